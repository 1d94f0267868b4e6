//! Data graphs: sampled neighborhoods of an input point, their learned
//! edge weights and their pooled embeddings.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Direction, Graph, InputPoint, NodeId, RelationId, TaskKind};
use crate::model::{mlp2, ModelConfig};
use crate::rng::StreamRng;
use crate::tensor::{ModelParams, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataEdge {
    /// Local index into [`DataGraph::nodes`].
    pub src: usize,
    pub dst: usize,
    pub relation: RelationId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataGraph {
    pub kind: TaskKind,
    /// Global ids of the input's node(s). They are also the first entries
    /// of `nodes`.
    pub centers: Vec<NodeId>,
    /// Global ids of all sampled nodes; local index = position.
    pub nodes: Vec<NodeId>,
    pub features: Vec<Vec<f64>>,
    pub edges: Vec<DataEdge>,
    /// One weight per edge in `(0, 1)`, once reconstructed.
    pub weights: Option<Vec<f64>>,
    pub embedding: Option<Vec<f64>>,
}

impl DataGraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }
}

/// Random-walk neighborhood sampler. From each center in turn, the walk
/// adds the current node's neighbors, then moves to one of them uniformly
/// at random, for `hops` steps or until `max_nodes` is reached. When not all
/// neighbors fit, a random subset fills the remaining room. The result keeps
/// every edge among the sampled nodes except self-loops and, for edge
/// inputs, edges directly joining the head and the tail.
pub fn sample_data_graph(
    g: &Graph,
    x: &InputPoint,
    hops: usize,
    max_nodes: usize,
    rng: &mut StreamRng,
) -> Result<DataGraph> {
    x.validate(g)?;
    let mut centers = x.ids();
    centers.dedup();
    if hops == 0 {
        return Err(Error::InvalidParameter("hops must be at least 1".into()));
    }
    if max_nodes < centers.len() + 1 {
        return Err(Error::InvalidParameter(format!(
            "max_nodes {max_nodes} leaves no room beyond {} center(s)",
            centers.len()
        )));
    }
    let mut nodes = centers.clone();
    let mut local: HashMap<NodeId, usize> =
        centers.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    for &start in &centers {
        let mut cur = start;
        for _ in 0..hops {
            if nodes.len() >= max_nodes {
                break;
            }
            let mut nbrs = g.neighbor_ids(cur)?;
            if nbrs.is_empty() {
                break;
            }
            let next = *nbrs.choose(rng).expect("non-empty");
            nbrs.retain(|v| !local.contains_key(v));
            let room = max_nodes - nodes.len();
            if nbrs.len() > room {
                nbrs.shuffle(rng);
                nbrs.truncate(room);
            }
            for v in nbrs {
                local.insert(v, nodes.len());
                nodes.push(v);
            }
            cur = next;
        }
    }
    let pair = match *x {
        InputPoint::Edge(h, t) => Some((h.min(t), h.max(t))),
        InputPoint::Node(_) => None,
    };
    let mut edges = Vec::new();
    for (u_local, &u) in nodes.iter().enumerate() {
        for n in g.neighbors(u)? {
            if n.direction != Direction::Out || n.node == u {
                continue;
            }
            if pair == Some((u.min(n.node), u.max(n.node))) {
                continue;
            }
            if let Some(&v_local) = local.get(&n.node) {
                edges.push(DataEdge {
                    src: u_local,
                    dst: v_local,
                    relation: n.relation,
                });
            }
        }
    }
    Ok(DataGraph {
        kind: x.kind(),
        centers,
        features: nodes.iter().map(|&v| g.features(v).to_vec()).collect(),
        nodes,
        edges,
        weights: None,
        embedding: None,
    })
}

/// How edge weights are obtained when encoding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// Reconstruction MLP followed by a sigmoid.
    #[default]
    Learned,
    /// Every edge weighs 1 (reconstruction bypassed).
    Unit,
}

/// Several data graphs of one task kind laid out as a single block-diagonal
/// graph.
#[derive(Clone, Debug)]
pub struct DataBatch {
    kind: TaskKind,
    features: Tensor,
    edges: Arc<[(usize, usize)]>,
    relations: Vec<RelationId>,
    heads: Vec<usize>,
    tails: Vec<usize>,
}

impl DataBatch {
    pub fn new(graphs: &[&DataGraph]) -> Result<Self> {
        let first = graphs
            .first()
            .ok_or_else(|| Error::InvalidParameter("empty data-graph batch".into()))?;
        let kind = first.kind;
        let d = first.feature_dim();
        let mut feats = Vec::new();
        let mut edges = Vec::new();
        let mut relations = Vec::new();
        let mut heads = Vec::with_capacity(graphs.len());
        let mut tails = Vec::with_capacity(graphs.len());
        let mut offset = 0;
        for dg in graphs {
            if dg.kind != kind {
                return Err(Error::InvalidParameter(
                    "data-graph batch mixes task kinds".into(),
                ));
            }
            for f in &dg.features {
                if f.len() != d {
                    return Err(Error::InvalidParameter(format!(
                        "feature width {} in a batch of width {d}",
                        f.len()
                    )));
                }
                feats.extend_from_slice(f);
            }
            for e in &dg.edges {
                edges.push((offset + e.src, offset + e.dst));
                relations.push(e.relation);
            }
            heads.push(offset);
            tails.push(offset + dg.centers.len() - 1);
            offset += dg.num_nodes();
        }
        Ok(Self {
            kind,
            features: Tensor::new(vec![offset, d], feats)?,
            edges: edges.into(),
            relations,
            heads,
            tails,
        })
    }

    pub fn num_graphs(&self) -> usize {
        self.heads.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }
}

/// Edge weights `sigmoid(MLP_phi(input))` as an `[E, 1]` variable, or a
/// constant of ones in [`WeightMode::Unit`]. Node tasks feed the
/// concatenated endpoint features; edge tasks feed the relation embedding.
pub fn batch_edge_weights(
    tape: &mut Tape,
    params: &ModelParams,
    batch: &DataBatch,
    mode: WeightMode,
) -> Result<Var> {
    let e = batch.num_edges();
    if mode == WeightMode::Unit || e == 0 {
        let fill = if mode == WeightMode::Unit { 1.0 } else { 0.0 };
        return Ok(tape.constant(Tensor::new(vec![e, 1], vec![fill; e])?));
    }
    let input = match batch.kind {
        TaskKind::Node => {
            let x = tape.constant(batch.features.clone());
            let src: Vec<usize> = batch.edges.iter().map(|p| p.0).collect();
            let dst: Vec<usize> = batch.edges.iter().map(|p| p.1).collect();
            let xs = tape.gather_rows(x, &src)?;
            let xd = tape.gather_rows(x, &dst)?;
            tape.concat_cols(&[xs, xd])?
        }
        TaskKind::Edge => {
            let table = tape.param(params, "rel_emb")?;
            let rows = tape.value(table).rows();
            if let Some(&r) = batch.relations.iter().find(|&&r| r >= rows) {
                return Err(Error::MissingRelation(r));
            }
            tape.gather_rows(table, &batch.relations)?
        }
    };
    let prefix = match batch.kind {
        TaskKind::Node => "recon.node",
        TaskKind::Edge => "recon.edge",
    };
    let z = mlp2(tape, params, prefix, input)?;
    Ok(tape.sigmoid(z))
}

/// Weighted-mean message passing over the batch followed by the readout:
/// the center embedding for node tasks, the head/tail mean for edge tasks.
/// Returns `[num_graphs, H]`.
pub fn encode_batch(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &DataBatch,
    weights: Var,
) -> Result<Var> {
    let mut h = tape.constant(batch.features.clone());
    for layer in 0..cfg.gnn_depth {
        let w_self = tape.param(params, &format!("gnn_d.l{layer}.w_self"))?;
        let w_neigh = tape.param(params, &format!("gnn_d.l{layer}.w_neigh"))?;
        let agg = tape.neighbor_mean(h, weights, batch.edges.clone())?;
        let own = tape.matmul(h, w_self)?;
        let nb = tape.matmul(agg, w_neigh)?;
        let sum = tape.add(own, nb)?;
        h = tape.relu(sum);
    }
    let heads = tape.gather_rows(h, &batch.heads)?;
    match batch.kind {
        TaskKind::Node => Ok(heads),
        TaskKind::Edge => {
            let tails = tape.gather_rows(h, &batch.tails)?;
            let sum = tape.add(heads, tails)?;
            Ok(tape.scale(sum, 0.5))
        }
    }
}

/// Weights plus encoding for a list of data graphs in one pass.
pub fn embed_graphs(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &ModelConfig,
    graphs: &[&DataGraph],
    mode: WeightMode,
) -> Result<Var> {
    let batch = DataBatch::new(graphs)?;
    let w = batch_edge_weights(tape, params, &batch, mode)?;
    encode_batch(tape, params, cfg, &batch, w)
}

/// Sets `weights` on a copy of `dg`.
pub fn reconstruct_edge_weights(dg: &DataGraph, params: &ModelParams) -> Result<DataGraph> {
    let mut out = dg.clone();
    if dg.edges.is_empty() {
        out.weights = Some(Vec::new());
        return Ok(out);
    }
    let mut tape = Tape::no_grad();
    let batch = DataBatch::new(&[dg])?;
    let w = batch_edge_weights(&mut tape, params, &batch, WeightMode::Learned)?;
    out.weights = Some(tape.value(w).data().to_vec());
    Ok(out)
}

/// Encodes a data graph whose weights are already set.
pub fn encode_data_graph(
    dg: &DataGraph,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Vec<f64>> {
    let weights = dg.weights.as_ref().ok_or(Error::UnsetWeights)?;
    if weights.len() != dg.edges.len() {
        return Err(Error::UnsetWeights);
    }
    let mut tape = Tape::no_grad();
    let batch = DataBatch::new(&[dg])?;
    let w = tape.constant(Tensor::new(vec![weights.len(), 1], weights.clone())?);
    let g = encode_batch(&mut tape, params, cfg, &batch, w)?;
    Ok(tape.value(g).data().to_vec())
}
