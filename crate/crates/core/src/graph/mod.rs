//! Immutable multi-relational graph with node features and optional
//! node/edge labels.
//!
//! Edges keep their `(src, relation, dst)` orientation, which is what edge
//! classification labels refer to, but the adjacency index lists every edge
//! at both endpoints so message passing and subgraph sampling treat the
//! graph as undirected.

mod episode;
mod generate;
mod io;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use episode::{
    draw_classes, split_episode_pool, EpisodePool, EpisodeSpec, Partition, PointPool,
};
pub use generate::{generate_sbm, generate_synthetic_kg, KgParams, SbmParams};
pub use io::{load_graph, parse_graph, save_graph, write_graph, GRAPH_FORMAT_VERSION};

use crate::error::{Error, Result};

pub type NodeId = usize;
pub type RelationId = usize;
pub type ClassId = usize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    #[serde(rename = "feat")]
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<ClassId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub src: NodeId,
    pub rel: RelationId,
    pub dst: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<ClassId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// The edge leaves the queried node.
    Out,
    /// The edge enters the queried node.
    In,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Neighbor {
    pub node: NodeId,
    pub relation: RelationId,
    pub direction: Direction,
    /// Index into [`Graph::edges`].
    pub edge: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    /// Node classification: one center node per input.
    Node,
    /// Edge classification: a `(head, tail)` pair per input.
    Edge,
}

/// The node(s) an input refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InputPoint {
    Node(NodeId),
    Edge(NodeId, NodeId),
}

impl InputPoint {
    pub fn kind(&self) -> TaskKind {
        match self {
            InputPoint::Node(_) => TaskKind::Node,
            InputPoint::Edge(..) => TaskKind::Edge,
        }
    }

    pub fn ids(&self) -> Vec<NodeId> {
        match *self {
            InputPoint::Node(v) => vec![v],
            InputPoint::Edge(h, t) => vec![h, t],
        }
    }

    /// Node tasks need an existing node; edge tasks need some edge
    /// `(head, r, tail)` in the graph.
    pub fn validate(&self, g: &Graph) -> Result<()> {
        match *self {
            InputPoint::Node(v) => g.check_node(v),
            InputPoint::Edge(h, t) => {
                g.check_node(h)?;
                g.check_node(t)?;
                if g.has_edge(h, t) {
                    Ok(())
                } else {
                    Err(Error::InvalidEpisode(format!("no edge from {h} to {t}")))
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub point: InputPoint,
    pub label: ClassId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    feature_dim: usize,
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    relations: BTreeMap<RelationId, String>,
    adjacency: Vec<Vec<Neighbor>>,
}

impl Graph {
    /// Validates and indexes a graph. Node ids must be exactly `0..n` in any
    /// order; nodes are stored sorted by id.
    pub fn new(
        feature_dim: usize,
        mut nodes: Vec<Node>,
        edges: Vec<Edge>,
        relations: BTreeMap<RelationId, String>,
    ) -> Result<Self> {
        nodes.sort_by_key(|n| n.id);
        for (i, n) in nodes.iter().enumerate() {
            if n.id != i {
                let msg = if i > 0 && nodes[i - 1].id == n.id {
                    format!("duplicate node id {}", n.id)
                } else {
                    format!("node ids must be 0..{} (found {})", nodes.len(), n.id)
                };
                return Err(Error::InvalidGraph(msg));
            }
            if n.features.len() != feature_dim {
                return Err(Error::InvalidGraph(format!(
                    "node {} has {} features, expected {feature_dim}",
                    n.id,
                    n.features.len()
                )));
            }
            if n.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidGraph(format!(
                    "node {} has non-finite features",
                    n.id
                )));
            }
        }
        for (i, e) in edges.iter().enumerate() {
            for end in [e.src, e.dst] {
                if end >= nodes.len() {
                    return Err(Error::DanglingEdge { edge: i, node: end });
                }
            }
            if !relations.contains_key(&e.rel) {
                return Err(Error::InvalidGraph(format!(
                    "edge {i} uses unknown relation {}",
                    e.rel
                )));
            }
        }
        let adjacency = build_adjacency(nodes.len(), &edges);
        Ok(Self {
            feature_dim,
            nodes,
            edges,
            relations,
            adjacency,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn relations(&self) -> &BTreeMap<RelationId, String> {
        &self.relations
    }

    /// Size of the relation-embedding table needed for this graph.
    pub fn relation_table_size(&self) -> usize {
        self.relations.keys().next_back().map_or(0, |r| r + 1)
    }

    pub fn features(&self, v: NodeId) -> &[f64] {
        &self.nodes[v].features
    }

    pub fn node_label(&self, v: NodeId) -> Option<ClassId> {
        self.nodes[v].label
    }

    fn check_node(&self, v: NodeId) -> Result<()> {
        if v < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(v))
        }
    }

    /// All incident edges of `v` in either direction, sorted by
    /// `(neighbor id, relation, direction, edge index)`.
    pub fn neighbors(&self, v: NodeId) -> Result<&[Neighbor]> {
        self.check_node(v)?;
        Ok(&self.adjacency[v])
    }

    /// Distinct neighbor ids of `v` (excluding `v` itself), ascending.
    pub fn neighbor_ids(&self, v: NodeId) -> Result<Vec<NodeId>> {
        let mut ids: Vec<NodeId> = self
            .neighbors(v)?
            .iter()
            .map(|n| n.node)
            .filter(|&n| n != v)
            .collect();
        ids.dedup();
        Ok(ids)
    }

    pub fn degree(&self, v: NodeId) -> usize {
        self.adjacency[v].len()
    }

    pub fn has_edge(&self, a: NodeId, b: NodeId) -> bool {
        let Some(list) = self.adjacency.get(a) else {
            return false;
        };
        let i = list.partition_point(|n| n.node < b);
        i < list.len() && list[i].node == b
    }

    /// Nodes within `hops` of `v` (excluding `v`), ascending.
    pub fn ball(&self, v: NodeId, hops: usize) -> Result<Vec<NodeId>> {
        self.check_node(v)?;
        let mut seen = vec![false; self.nodes.len()];
        seen[v] = true;
        let mut frontier = vec![v];
        let mut out = Vec::new();
        for _ in 0..hops {
            let mut next = Vec::new();
            for &u in &frontier {
                for n in &self.adjacency[u] {
                    if !seen[n.node] {
                        seen[n.node] = true;
                        next.push(n.node);
                        out.push(n.node);
                    }
                }
            }
            frontier = next;
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Recomputes the adjacency index from the edge list and compares.
    pub fn adjacency_consistent(&self) -> bool {
        self.adjacency == build_adjacency(self.nodes.len(), &self.edges)
    }

    /// Labeled inputs grouped by class, each group sorted. Node tasks use
    /// node labels; edge tasks use edge labels, one point per distinct
    /// `(head, tail, label)`.
    pub fn points_by_class(&self, kind: TaskKind) -> BTreeMap<ClassId, Vec<InputPoint>> {
        let mut out: BTreeMap<ClassId, Vec<InputPoint>> = BTreeMap::new();
        match kind {
            TaskKind::Node => {
                for n in &self.nodes {
                    if let Some(c) = n.label {
                        out.entry(c).or_default().push(InputPoint::Node(n.id));
                    }
                }
            }
            TaskKind::Edge => {
                for e in &self.edges {
                    if let Some(c) = e.label {
                        if e.src != e.dst {
                            out.entry(c)
                                .or_default()
                                .push(InputPoint::Edge(e.src, e.dst));
                        }
                    }
                }
            }
        }
        for pts in out.values_mut() {
            pts.sort_unstable();
            pts.dedup();
        }
        out
    }
}

fn build_adjacency(n: usize, edges: &[Edge]) -> Vec<Vec<Neighbor>> {
    let mut adj = vec![Vec::new(); n];
    for (i, e) in edges.iter().enumerate() {
        adj[e.src].push(Neighbor {
            node: e.dst,
            relation: e.rel,
            direction: Direction::Out,
            edge: i,
        });
        adj[e.dst].push(Neighbor {
            node: e.src,
            relation: e.rel,
            direction: Direction::In,
            edge: i,
        });
    }
    for list in &mut adj {
        list.sort_unstable();
    }
    adj
}
