#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;

use graphprompter::graph::{Edge, Graph, Node};
use graphprompter::model::{init_params, ModelConfig};
use graphprompter::rng::{stream, StreamRng};
use graphprompter::tensor::{Gradients, ModelParams, Tensor};

pub fn rng(seed: u64) -> StreamRng {
    stream(seed, &[0xdead_beef])
}

pub fn micro_model(feature_dim: usize, num_relations: usize) -> ModelConfig {
    ModelConfig {
        embedding_dim: 4,
        ..ModelConfig::new(feature_dim, num_relations)
    }
}

/// Initialized parameters with biases filled in too, so bias gradients and
/// bias paths in the oracles are exercised.
pub fn random_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut params = init_params(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let t = params.get(&name).unwrap().clone();
        if t.shape().len() == 1 {
            let data = (0..t.len()).map(|_| r.random_range(-0.5..0.5)).collect();
            params
                .set(&name, Tensor::new(t.shape().to_vec(), data).unwrap())
                .unwrap();
        }
    }
    params
}

pub fn random_matrix(r: &mut StreamRng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect()
}

/// Undirected Erdos-Renyi style graph with node labels `id % classes`.
pub fn random_graph(
    r: &mut StreamRng,
    n: usize,
    p: f64,
    feature_dim: usize,
    relations: usize,
    classes: usize,
) -> Graph {
    let nodes = (0..n)
        .map(|id| Node {
            id,
            features: (0..feature_dim)
                .map(|_| r.random_range(-1.0..1.0))
                .collect(),
            label: Some(id % classes),
        })
        .collect();
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if r.random_bool(p) {
                let rel = r.random_range(0..relations);
                edges.push(Edge {
                    src: a,
                    rel,
                    dst: b,
                    label: Some(rel),
                });
            }
        }
    }
    let rels: BTreeMap<usize, String> = (0..relations).map(|i| (i, format!("r{i}"))).collect();
    Graph::new(feature_dim, nodes, edges, rels).unwrap()
}

/// Relative error with a floor on the denominator, so gradients that are
/// zero up to rounding are judged by absolute error instead.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Central differences for every element of the named tensors, compared
/// with `grads`. Returns the largest relative error and where it occurred.
pub fn fd_check(
    params: &ModelParams,
    names: &[&str],
    grads: &Gradients,
    eps: f64,
    loss: impl Fn(&ModelParams) -> f64,
) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for &name in names {
        let base = params
            .get(name)
            .unwrap_or_else(|| panic!("no parameter {name}"))
            .clone();
        let analytic = grads
            .get(name)
            .unwrap_or_else(|| panic!("no gradient for {name}"));
        assert_eq!(analytic.shape(), base.shape(), "{name}");
        for i in 0..base.len() {
            let mut p = params.clone();
            let mut t = base.clone();
            t.data_mut()[i] = base.data()[i] + eps;
            p.set(name, t.clone()).unwrap();
            let up = loss(&p);
            t.data_mut()[i] = base.data()[i] - eps;
            p.set(name, t).unwrap();
            let down = loss(&p);
            let numeric = (up - down) / (2.0 * eps);
            let e = rel_err(analytic.data()[i], numeric);
            if e > worst.0 {
                worst = (
                    e,
                    format!(
                        "{name}[{i}]: analytic {} numeric {numeric}",
                        analytic.data()[i]
                    ),
                );
            }
        }
    }
    worst
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x W` for a row vector and a row-major `[in, out]` tensor.
pub fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), rows);
    (0..cols)
        .map(|j| (0..rows).map(|i| x[i] * w.data()[i * cols + j]).sum())
        .collect()
}

/// Scalar output of the two-layer perceptron `prefix`, written out
/// independently of the tape.
pub fn mlp_oracle(params: &ModelParams, prefix: &str, x: &[f64]) -> f64 {
    let p = |s: &str| params.get(&format!("{prefix}.{s}")).unwrap();
    let hidden: Vec<f64> = vec_mat(x, p("w1"))
        .iter()
        .zip(p("b1").data())
        .map(|(v, b)| (v + b).max(0.0))
        .collect();
    vec_mat(&hidden, p("w2"))[0] + p("b2").data()[0]
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `#[test]` wrappers for suite functions, which stay plain functions so
/// the acceptance binary can call them too.
#[allow(unused_macros)]
macro_rules! tests_for {
    ($($name:ident),* $(,)?) => {
        #[cfg(test)]
        mod tests {
            $(
                #[test]
                fn $name() {
                    super::$name()
                }
            )*
        }
    };
}
