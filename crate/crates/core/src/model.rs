//! Model architecture and parameter initialization.
//!
//! Parameter names:
//!
//! | name | shape | role |
//! |---|---|---|
//! | `recon.node.{w1,b1,w2,b2}` | `[2F,H] [H] [H,1] [1]` | edge weights from endpoint features |
//! | `recon.edge.{w1,b1,w2,b2}` | `[H,H] [H] [H,1] [1]` | edge weights from relation embeddings |
//! | `rel_emb` | `[R,H]` | relation embeddings |
//! | `gnn_d.l{i}.{w_self,w_neigh}` | `[F or H, H]` | data-graph encoder layer `i` |
//! | `select.{w1,b1,w2,b2}` | `[H,H] [H] [H,1] [1]` | prompt importance |
//! | `task.edge_type` | `[3,H]` | task-graph edge types T, F, Q |
//! | `task.r{i}.{label,data}.{wq,wk,wv}` | `[H,H]` | attention round `i` |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{label, stream};
use crate::tensor::{ModelParams, Tape, Tensor, Var};
use rand::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub embedding_dim: usize,
    pub gnn_depth: usize,
    pub task_rounds: usize,
    /// Rows of the relation-embedding table.
    pub num_relations: usize,
    pub softmax_temperature: f64,
}

impl ModelConfig {
    pub fn new(feature_dim: usize, num_relations: usize) -> Self {
        Self {
            feature_dim,
            embedding_dim: 64,
            gnn_depth: 2,
            task_rounds: 2,
            num_relations,
            softmax_temperature: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.embedding_dim == 0 || self.gnn_depth == 0 {
            return Err(Error::InvalidParameter(
                "feature_dim, embedding_dim and gnn_depth must be positive".into(),
            ));
        }
        if !(self.softmax_temperature > 0.0 && self.softmax_temperature.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "softmax_temperature must be positive, got {}",
                self.softmax_temperature
            )));
        }
        Ok(())
    }

    /// Parameter names and shapes, in initialization order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (f, h) = (self.feature_dim, self.embedding_dim);
        let mut out = Vec::new();
        let mut mlp = |prefix: &str, input: usize| {
            out.push((format!("{prefix}.w1"), vec![input, h]));
            out.push((format!("{prefix}.b1"), vec![h]));
            out.push((format!("{prefix}.w2"), vec![h, 1]));
            out.push((format!("{prefix}.b2"), vec![1]));
        };
        mlp("recon.node", 2 * f);
        mlp("recon.edge", h);
        mlp("select", h);
        out.push(("rel_emb".into(), vec![self.num_relations.max(1), h]));
        for i in 0..self.gnn_depth {
            let input = if i == 0 { f } else { h };
            out.push((format!("gnn_d.l{i}.w_self"), vec![input, h]));
            out.push((format!("gnn_d.l{i}.w_neigh"), vec![input, h]));
        }
        out.push(("task.edge_type".into(), vec![3, h]));
        for r in 0..self.task_rounds {
            for side in ["label", "data"] {
                for w in ["wq", "wk", "wv"] {
                    out.push((format!("task.r{r}.{side}.{w}"), vec![h, h]));
                }
            }
        }
        out
    }
}

/// Weights uniform in `±sqrt(1/fan_in)` with `fan_in` the leading dimension;
/// biases (1-D) start at zero. Embedding tables use `fan_in = H`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = stream(seed, &[label::INIT]);
    let mut params = ModelParams::default();
    for (name, shape) in cfg.layout() {
        let t = if shape.len() == 1 {
            Tensor::zeros(&shape)
        } else {
            let fan_in = if name == "rel_emb" || name == "task.edge_type" {
                cfg.embedding_dim
            } else {
                shape[0]
            };
            let bound = (1.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
            Tensor::new(shape, data)?
        };
        params.insert(&name, t)?;
    }
    Ok(params)
}

/// Checks that `params` holds every tensor of `cfg` with the right shape.
pub fn check_params(cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    for (name, shape) in cfg.layout() {
        let t = params
            .get(&name)
            .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::ParameterShape {
                name,
                expected: shape,
                actual: t.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Two-layer perceptron `relu(x W1 + b1) W2 + b2` on the rows of `x`.
pub fn mlp2(tape: &mut Tape, params: &ModelParams, prefix: &str, x: Var) -> Result<Var> {
    let w1 = tape.param(params, &format!("{prefix}.w1"))?;
    let b1 = tape.param(params, &format!("{prefix}.b1"))?;
    let w2 = tape.param(params, &format!("{prefix}.w2"))?;
    let b2 = tape.param(params, &format!("{prefix}.b2"))?;
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, w2)?;
    tape.add_row(o, b2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = ModelConfig::new(4, 3);
        let a = init_params(&cfg, 1).unwrap();
        let b = init_params(&cfg, 1).unwrap();
        let c = init_params(&cfg, 2).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        check_params(&cfg, &a).unwrap();
        let w = a.get("gnn_d.l0.w_self").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.5));
        assert!(a.get("select.b1").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_params_rejected() {
        let cfg = ModelConfig::new(4, 3);
        let p = init_params(&cfg, 0).unwrap();
        let other = ModelConfig {
            embedding_dim: 8,
            ..cfg
        };
        assert!(check_params(&other, &p).is_err());
    }
}
