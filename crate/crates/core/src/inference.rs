//! Downstream inference: candidate and query data graphs, prompt
//! selection, cache augmentation, task-graph prediction and cache update,
//! episode after episode with frozen parameters.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augmenter::{augment_prompt_set, AugmentedPrompt, CacheConfig, Candidate, PromptCache};
use crate::error::{Error, Result};
use crate::generator::{embed_graphs, sample_data_graph, DataGraph, WeightMode};
use crate::graph::{
    draw_classes, split_episode_pool, ClassId, EpisodePool, EpisodeSpec, Graph, NodeId, Partition,
    PointPool, TaskKind,
};
use crate::model::{check_params, ModelConfig};
use crate::rng::{label, stream};
use crate::selector::{
    importance, knn_similarity, random_select, score, vote_select, Metric, SelectionResult,
    SelectorMode,
};
use crate::task_graph::{build_task_graph, predict, TaskPrediction};
use crate::tensor::{ModelParams, Tape};

/// Pipeline stages that can be switched off.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Every data-graph edge weighs 1.
    pub no_reweight: bool,
    /// Scores drop the similarity term and keep only `I_p * I_q`.
    pub no_knn: bool,
    /// Importance is fixed at 1.
    pub no_selection_layer: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub spec: EpisodeSpec,
    pub task: TaskKind,
    pub selector: SelectorMode,
    pub metric: Metric,
    pub ablation: Ablation,
    pub cache: CacheConfig,
    pub episodes: usize,
    pub seed: u64,
    pub max_subgraph_nodes: usize,
    /// Classes episodes draw from; `None` uses every labeled class.
    pub classes: Option<Vec<ClassId>>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            spec: EpisodeSpec::default(),
            task: TaskKind::Node,
            selector: SelectorMode::Adaptive,
            metric: Metric::Cosine,
            ablation: Ablation::default(),
            cache: CacheConfig::default(),
            episodes: 20,
            seed: 0,
            max_subgraph_nodes: 20,
            classes: None,
        }
    }
}

impl InferenceConfig {
    pub fn point_pool(&self, g: &Graph) -> PointPool {
        let pool = PointPool::new(g, self.task);
        match &self.classes {
            Some(keep) => pool.restrict(|c| keep.contains(&c)),
            None => pool,
        }
    }

    fn weight_mode(&self) -> WeightMode {
        if self.ablation.no_reweight {
            WeightMode::Unit
        } else {
            WeightMode::Learned
        }
    }

    /// Importance is bypassed for random selection and when the selection
    /// layer is ablated.
    fn uses_importance(&self) -> bool {
        self.selector == SelectorMode::Adaptive && !self.ablation.no_selection_layer
    }
}

/// One line of the run record file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub episode: usize,
    /// Arrival order of the query within the run.
    pub query_id: usize,
    /// Node id(s) of the query input.
    pub point: Vec<NodeId>,
    pub y_true: ClassId,
    pub y_pred: ClassId,
    pub confidence: f64,
    /// Node id(s) of every selected prompt.
    pub prompt_ids: Vec<Vec<NodeId>>,
    /// Cache entries present when the query was predicted.
    pub cache_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub records: Vec<QueryRecord>,
    pub selection: SelectionResult,
    pub predictions: Vec<TaskPrediction>,
    /// Number of prompts in the task graph, cache extras included.
    pub num_prompts: usize,
}

/// Inference state: frozen parameters plus the prompt cache, which lives
/// across the episodes of one run.
pub struct Inference<'a> {
    params: &'a ModelParams,
    model: &'a ModelConfig,
    config: InferenceConfig,
    cache: PromptCache,
    next_query: usize,
}

impl<'a> Inference<'a> {
    pub fn new(
        params: &'a ModelParams,
        model: &'a ModelConfig,
        config: InferenceConfig,
    ) -> Result<Self> {
        check_params(model, params)?;
        config.spec.validate()?;
        let cache = PromptCache::new(config.cache.clone());
        Ok(Self {
            params,
            model,
            config,
            cache,
            next_query: 0,
        })
    }

    pub fn cache(&self) -> &PromptCache {
        &self.cache
    }

    pub fn config(&self) -> &InferenceConfig {
        &self.config
    }

    /// Runs `config.episodes` episodes drawn from the test partition, with
    /// a fresh cache.
    pub fn run(&mut self, g: &Graph) -> Result<Vec<QueryRecord>> {
        self.cache.clear();
        self.next_query = 0;
        let pool = self.config.point_pool(g);
        let mut records = Vec::new();
        for e in 0..self.config.episodes {
            let ep = self.sample_episode(&pool, e)?;
            records.extend(self.run_episode(g, &ep, e)?.records);
        }
        Ok(records)
    }

    pub fn sample_episode(&self, pool: &PointPool, episode: usize) -> Result<EpisodePool> {
        let mut rng = stream(self.config.seed, &[label::EPISODE, episode as u64]);
        let classes = draw_classes(&pool.classes(), self.config.spec.ways, &mut rng)?;
        split_episode_pool(pool, &self.config.spec, &classes, Partition::Test, &mut rng)
    }

    /// Candidate/query encoding, importance, scoring, selection, cache
    /// augmentation, prediction, then cache touch and admission.
    pub fn run_episode(
        &mut self,
        g: &Graph,
        ep: &EpisodePool,
        episode: usize,
    ) -> Result<EpisodeResult> {
        let cfg = &self.config;
        let k = cfg.spec.shots;
        let mut rng = stream(cfg.seed, &[label::DATA_GRAPH, episode as u64]);
        let candidates: Vec<_> = ep.candidates.iter().flatten().copied().collect();
        let mut groups = Vec::with_capacity(ep.candidates.len());
        let mut offset = 0;
        for pts in &ep.candidates {
            groups.push((offset..offset + pts.len()).collect::<Vec<_>>());
            offset += pts.len();
        }
        let graphs: Vec<DataGraph> = candidates
            .iter()
            .chain(ep.queries.iter().map(|q| &q.point))
            .map(|x| sample_data_graph(g, x, cfg.spec.hops, cfg.max_subgraph_nodes, &mut rng))
            .collect::<Result<_>>()?;

        let mut tape = Tape::no_grad();
        let refs: Vec<&DataGraph> = graphs.iter().collect();
        let emb = embed_graphs(&mut tape, self.params, self.model, &refs, cfg.weight_mode())?;
        let imp: Vec<f64> = if cfg.uses_importance() {
            let i = importance(&mut tape, self.params, emb)?;
            tape.value(i).data().to_vec()
        } else {
            vec![1.0; graphs.len()]
        };
        let raw = tape.value(emb).to_rows();
        let weighted: Vec<Vec<f64>> = raw
            .iter()
            .zip(&imp)
            .map(|(row, &i)| row.iter().map(|v| v * i).collect())
            .collect();
        let nc = candidates.len();
        let (cand_w, query_w) = weighted.split_at(nc);

        let selection = match cfg.selector {
            SelectorMode::Adaptive => {
                let sims = knn_similarity(cand_w, query_w, cfg.metric);
                let scores: Vec<Vec<f64>> = sims
                    .iter()
                    .enumerate()
                    .map(|(p, row)| {
                        row.iter()
                            .enumerate()
                            .map(|(q, &s)| {
                                let s = if cfg.ablation.no_knn { 0.0 } else { s };
                                score(s, imp[p], imp[nc + q])
                            })
                            .collect()
                    })
                    .collect();
                vote_select(&scores, &groups, k)?
            }
            SelectorMode::Random => {
                let mut rng = stream(cfg.seed, &[label::SELECT, episode as u64]);
                random_select(&groups, k, &mut rng)?
            }
        };

        let selected: Vec<AugmentedPrompt> = selection
            .chosen
            .iter()
            .enumerate()
            .flat_map(|(c, idx)| {
                idx.iter().map(move |&p| AugmentedPrompt {
                    embedding: cand_w[p].clone(),
                    class: c,
                    candidate: Some(p),
                })
            })
            .collect();
        let prompt_ids: Vec<Vec<NodeId>> = selected
            .iter()
            .map(|p| candidates[p.candidate.expect("selected")].ids())
            .collect();
        let prompts = augment_prompt_set(selected, &self.cache, &ep.classes);
        let tg = build_task_graph(
            &prompts
                .iter()
                .map(|p| (p.embedding.clone(), p.class))
                .collect::<Vec<_>>(),
            &raw[nc..],
            ep.classes.len(),
        )?;
        let h = tg.propagate(self.params, self.model.task_rounds)?;
        let predictions = predict(&h, self.model.softmax_temperature)?;

        let cache_size = self.cache.len();
        let records: Vec<QueryRecord> = ep
            .queries
            .iter()
            .zip(&predictions)
            .map(|(q, p)| {
                let id = self.next_query;
                self.next_query += 1;
                QueryRecord {
                    episode,
                    query_id: id,
                    point: q.point.ids(),
                    y_true: ep.classes[q.label],
                    y_pred: ep.classes[p.predicted],
                    confidence: p.confidence,
                    prompt_ids: prompt_ids.clone(),
                    cache_size,
                }
            })
            .collect();

        if self.config.cache.capacity > 0 {
            self.cache.touch(query_w);
            let offered: Vec<Candidate> = predictions
                .iter()
                .zip(query_w)
                .map(|(p, e)| Candidate {
                    embedding: e.clone(),
                    label: ep.classes[p.predicted],
                    confidence: p.confidence,
                })
                .collect();
            self.cache.admit_batch(&offered);
        }
        Ok(EpisodeResult {
            records,
            selection,
            predictions,
            num_prompts: prompts.len(),
        })
    }
}

/// Convenience wrapper: one full run with a fresh cache.
pub fn run_inference(
    params: &ModelParams,
    model: &ModelConfig,
    graph: &Graph,
    config: &InferenceConfig,
) -> Result<Vec<QueryRecord>> {
    Inference::new(params, model, config.clone())?.run(graph)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// Accuracy per true class, keyed by class id.
    pub per_class: BTreeMap<String, f64>,
    pub n: usize,
    pub mean_confidence: f64,
}

pub fn evaluate(records: &[QueryRecord]) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::EmptyRun);
    }
    let mut per: BTreeMap<ClassId, (usize, usize)> = BTreeMap::new();
    for r in records {
        let slot = per.entry(r.y_true).or_default();
        slot.0 += usize::from(r.y_pred == r.y_true);
        slot.1 += 1;
    }
    let correct: usize = per.values().map(|v| v.0).sum();
    let n = records.len();
    Ok(MetricsReport {
        accuracy: correct as f64 / n as f64,
        per_class: per
            .into_iter()
            .map(|(c, (hit, tot))| (c.to_string(), hit as f64 / tot as f64))
            .collect(),
        n,
        mean_confidence: records.iter().map(|r| r.confidence).sum::<f64>() / n as f64,
    })
}

/// Per-seed accuracy differences `a - b` and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedReport {
    pub deltas: Vec<f64>,
    pub mean_delta: f64,
}

pub fn paired_report(a: &[f64], b: &[f64]) -> Result<PairedReport> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "paired report needs equal non-empty runs, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let deltas: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean_delta = deltas.iter().sum::<f64>() / deltas.len() as f64;
    Ok(PairedReport { deltas, mean_delta })
}

pub fn write_records(path: &Path, records: &[QueryRecord]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<QueryRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(y_true: usize, y_pred: usize) -> QueryRecord {
        QueryRecord {
            episode: 0,
            query_id: 0,
            point: vec![0],
            y_true,
            y_pred,
            confidence: 0.5,
            prompt_ids: vec![],
            cache_size: 0,
        }
    }

    #[test]
    fn all_correct_is_one() {
        let m = evaluate(&[record(1, 1), record(2, 2)]).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.n, 2);
    }

    #[test]
    fn per_class_accuracy() {
        let m = evaluate(&[record(1, 1), record(1, 2), record(2, 2)]).unwrap();
        assert_eq!(m.per_class["1"], 0.5);
        assert_eq!(m.per_class["2"], 1.0);
    }

    #[test]
    fn empty_run_rejected() {
        assert!(matches!(evaluate(&[]), Err(Error::EmptyRun)));
    }

    #[test]
    fn paired_deltas() {
        let r = paired_report(&[0.5, 0.7], &[0.4, 0.8]).unwrap();
        assert!((r.deltas[0] - 0.1).abs() < 1e-12);
        assert!((r.mean_delta - 0.0).abs() < 1e-12);
    }
}
