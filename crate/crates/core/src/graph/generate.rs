//! Synthetic graph generators.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Edge, Graph, Node};
use crate::error::{Error, Result};
use crate::rng::{label, stream, StreamRng};

/// Stochastic block model with Gaussian block-mean features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbmParams {
    pub blocks: usize,
    pub nodes_per_block: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    /// Standard deviation of the per-node feature noise around the block mean.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SbmParams {
    fn default() -> Self {
        Self {
            blocks: 10,
            nodes_per_block: 200,
            p_in: 0.05,
            p_out: 0.005,
            feature_dim: 16,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

/// Node `i` belongs to block `i / nodes_per_block` and carries that block
/// id as its label. Each unordered pair is linked independently with
/// probability `p_in` (same block) or `p_out`. All edges use relation 0.
pub fn generate_sbm(p: &SbmParams) -> Result<Graph> {
    if !(0.0 <= p.p_out && p.p_out < p.p_in && p.p_in <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "need 0 <= p_out < p_in <= 1, got p_in={} p_out={}",
            p.p_in, p.p_out
        )));
    }
    if p.blocks == 0 || p.nodes_per_block == 0 || p.feature_dim == 0 {
        return Err(Error::InvalidParameter(
            "blocks, nodes_per_block and feature_dim must be positive".into(),
        ));
    }
    if !(p.noise_std >= 0.0 && p.noise_std.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "noise_std must be >= 0, got {}",
            p.noise_std
        )));
    }
    let mut rng = stream(p.seed, &[label::GENERATE]);
    let means: Vec<Vec<f64>> = (0..p.blocks)
        .map(|_| gaussian(&mut rng, p.feature_dim, 1.0))
        .collect();
    let n = p.blocks * p.nodes_per_block;
    let nodes: Vec<Node> = (0..n)
        .map(|i| {
            let b = i / p.nodes_per_block;
            let noise = gaussian(&mut rng, p.feature_dim, p.noise_std);
            Node {
                id: i,
                features: means[b].iter().zip(noise).map(|(m, z)| m + z).collect(),
                label: Some(b),
            }
        })
        .collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let prob = if i / p.nodes_per_block == j / p.nodes_per_block {
                p.p_in
            } else {
                p.p_out
            };
            if rng.random::<f64>() < prob {
                edges.push(Edge {
                    src: i,
                    rel: 0,
                    dst: j,
                    label: None,
                });
            }
        }
    }
    Graph::new(
        p.feature_dim,
        nodes,
        edges,
        BTreeMap::from([(0, "link".to_string())]),
    )
}

/// Knowledge graph where each relation connects a designated source
/// entity cluster to a designated target cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KgParams {
    pub num_entities: usize,
    pub num_relations: usize,
    pub triples_per_relation: usize,
    /// Entities are split into this many contiguous clusters; every relation
    /// gets a distinct unordered cluster pair while pairs last.
    pub num_clusters: usize,
    /// Probability that a triple ignores its relation's signature and links
    /// two uniformly random entities.
    pub signature_noise: f64,
    pub feature_dim: usize,
    /// Entity features are cluster centroid plus Gaussian noise of this scale.
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for KgParams {
    fn default() -> Self {
        Self {
            num_entities: 1000,
            num_relations: 50,
            triples_per_relation: 100,
            num_clusters: 10,
            signature_noise: 0.05,
            feature_dim: 16,
            feature_noise: 1.0,
            seed: 0,
        }
    }
}

/// Edge labels equal relation ids and node labels equal cluster ids.
/// Triples never form self-loops; a triple is redrawn (bounded) when it
/// repeats an existing `(head, relation, tail)`.
pub fn generate_synthetic_kg(p: &KgParams) -> Result<Graph> {
    if p.num_entities < 2
        || p.num_relations == 0
        || p.triples_per_relation == 0
        || p.num_clusters == 0
        || p.feature_dim == 0
        || p.num_clusters > p.num_entities
    {
        return Err(Error::InvalidParameter(
            "need num_entities >= 2, positive relations/triples/clusters/feature_dim, clusters <= entities".into(),
        ));
    }
    if !(0.0..=1.0).contains(&p.signature_noise) || !(p.feature_noise >= 0.0) {
        return Err(Error::InvalidParameter(
            "signature_noise must be in [0,1], feature_noise >= 0".into(),
        ));
    }
    let mut rng = stream(p.seed, &[label::GENERATE]);
    let cluster_of = |e: usize| e * p.num_clusters / p.num_entities;
    let members: Vec<Vec<usize>> = (0..p.num_clusters)
        .map(|c| {
            (0..p.num_entities)
                .filter(|&e| cluster_of(e) == c)
                .collect()
        })
        .collect();
    if p.num_clusters == 1 && members[0].len() < 2 {
        return Err(Error::InvalidParameter(
            "a single cluster needs two entities".into(),
        ));
    }

    let centroids: Vec<Vec<f64>> = (0..p.num_clusters)
        .map(|_| gaussian(&mut rng, p.feature_dim, 1.0))
        .collect();
    let nodes: Vec<Node> = (0..p.num_entities)
        .map(|e| {
            let c = cluster_of(e);
            let noise = gaussian(&mut rng, p.feature_dim, p.feature_noise);
            Node {
                id: e,
                features: centroids[c].iter().zip(noise).map(|(m, z)| m + z).collect(),
                label: Some(c),
            }
        })
        .collect();

    let mut pairs: Vec<(usize, usize)> = (0..p.num_clusters)
        .flat_map(|a| (a..p.num_clusters).map(move |b| (a, b)))
        .collect();
    pairs.shuffle(&mut rng);
    let signatures: Vec<(usize, usize)> = (0..p.num_relations)
        .map(|r| {
            let (a, b) = pairs[r % pairs.len()];
            if rng.random::<bool>() {
                (a, b)
            } else {
                (b, a)
            }
        })
        .collect();

    let mut seen = HashSet::new();
    let mut edges = Vec::with_capacity(p.num_relations * p.triples_per_relation);
    for (r, &(src_c, dst_c)) in signatures.iter().enumerate() {
        for _ in 0..p.triples_per_relation {
            let mut triple = (0, 0);
            for _attempt in 0..1000 {
                let (h, t) = if rng.random::<f64>() < p.signature_noise {
                    (
                        rng.random_range(0..p.num_entities),
                        rng.random_range(0..p.num_entities),
                    )
                } else {
                    (
                        pick(&mut rng, &members[src_c]),
                        pick(&mut rng, &members[dst_c]),
                    )
                };
                triple = (h, t);
                if h != t && !seen.contains(&(h, r, t)) {
                    break;
                }
            }
            let (h, t) = triple;
            if h == t {
                return Err(Error::InvalidParameter(format!(
                    "could not draw a non-loop triple for relation {r}"
                )));
            }
            seen.insert((h, r, t));
            edges.push(Edge {
                src: h,
                rel: r,
                dst: t,
                label: Some(r),
            });
        }
    }
    let relations = (0..p.num_relations)
        .map(|r| (r, format!("rel{r}")))
        .collect();
    Graph::new(p.feature_dim, nodes, edges, relations)
}

fn pick(rng: &mut StreamRng, items: &[usize]) -> usize {
    items[rng.random_range(0..items.len())]
}

fn gaussian(rng: &mut StreamRng, d: usize, scale: f64) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        })
        .collect()
}
