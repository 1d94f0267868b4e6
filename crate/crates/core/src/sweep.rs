//! Parameter sweeps over inference settings, producing per-seed rows and
//! their aggregates.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::inference::{evaluate, run_inference, InferenceConfig};
use crate::model::ModelConfig;
use crate::selector::SelectorMode;
use crate::tensor::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    CacheSize,
    Shots,
    Hops,
    Ways,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::CacheSize => "cache-size",
            SweepKind::Shots => "shots",
            SweepKind::Hops => "hops",
            SweepKind::Ways => "ways",
        }
    }

    pub fn default_values(self) -> Vec<usize> {
        match self {
            SweepKind::CacheSize => (0..=10).collect(),
            SweepKind::Shots => vec![1, 3, 5, 10, 20, 50],
            SweepKind::Hops => vec![1, 2, 3],
            SweepKind::Ways => vec![5, 10, 20, 40],
        }
    }

    /// The cache-size sweep varies the full pipeline only; the others also
    /// run the random-selection, cache-free baseline.
    pub fn methods(self) -> Vec<Method> {
        match self {
            SweepKind::CacheSize => vec![Method::GraphPrompter],
            _ => vec![Method::GraphPrompter, Method::Random],
        }
    }

    /// Applies one swept value. Raising shots above the candidate count
    /// raises the candidate count with it.
    pub fn apply(self, cfg: &mut InferenceConfig, value: usize) {
        match self {
            SweepKind::CacheSize => cfg.cache.capacity = value,
            SweepKind::Shots => {
                cfg.spec.shots = value;
                cfg.spec.candidates = cfg.spec.candidates.max(value);
            }
            SweepKind::Hops => cfg.spec.hops = value,
            SweepKind::Ways => cfg.spec.ways = value,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// The configured pipeline as given.
    GraphPrompter,
    /// Random selection with the cache disabled.
    Random,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::GraphPrompter => "graphprompter",
            Method::Random => "random",
        }
    }

    pub fn apply(self, cfg: &mut InferenceConfig) {
        if self == Method::Random {
            cfg.selector = SelectorMode::Random;
            cfg.cache.capacity = 0;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRow {
    pub sweep: String,
    pub method: String,
    pub value: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub sweep: String,
    pub method: String,
    pub value: usize,
    pub mean: f64,
    /// Sample standard deviation over seeds; 0 for a single run.
    pub std: f64,
    pub runs: usize,
}

/// One inference run per (method, value, seed), in parallel. Rows come back
/// in that nested order regardless of scheduling.
pub fn run_sweep(
    params: &ModelParams,
    model: &ModelConfig,
    graph: &Graph,
    base: &InferenceConfig,
    kind: SweepKind,
    values: &[usize],
    seeds: &[u64],
) -> Result<Vec<RawRow>> {
    let jobs: Vec<(Method, usize, u64)> = kind
        .methods()
        .into_iter()
        .flat_map(|m| {
            values
                .iter()
                .flat_map(move |&v| seeds.iter().map(move |&s| (m, v, s)))
        })
        .collect();
    jobs.par_iter()
        .map(|&(method, value, seed)| {
            let mut cfg = base.clone();
            kind.apply(&mut cfg, value);
            method.apply(&mut cfg);
            cfg.seed = seed;
            let records = run_inference(params, model, graph, &cfg)?;
            let report = evaluate(&records)?;
            Ok(RawRow {
                sweep: kind.name().to_string(),
                method: method.name().to_string(),
                value,
                seed,
                accuracy: report.accuracy,
                n: report.n,
            })
        })
        .collect()
}

/// Mean and sample standard deviation per (sweep, method, value), in first
/// appearance order.
pub fn aggregate(rows: &[RawRow]) -> Vec<AggregateRow> {
    let mut keys: Vec<(String, String, usize)> = Vec::new();
    for r in rows {
        let key = (r.sweep.clone(), r.method.clone(), r.value);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(sweep, method, value)| {
            let acc: Vec<f64> = rows
                .iter()
                .filter(|r| r.sweep == sweep && r.method == method && r.value == value)
                .map(|r| r.accuracy)
                .collect();
            let n = acc.len() as f64;
            let mean = acc.iter().sum::<f64>() / n;
            let std = if acc.len() > 1 {
                (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            AggregateRow {
                sweep,
                method,
                value,
                mean,
                std,
                runs: acc.len(),
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}
