//! Joint pretraining on neighbor-matching and multi-task episodes.

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{embed_graphs, sample_data_graph, DataGraph, WeightMode};
use crate::graph::{
    draw_classes, split_episode_pool, ClassId, EpisodeSpec, Graph, InputPoint, LabeledPoint,
    Partition, PointPool, TaskKind,
};
use crate::model::{check_params, init_params, ModelConfig};
use crate::rng::{label, stream, StreamRng};
use crate::selector::importance;
use crate::task_graph::{logits_on_tape, propagate_on_tape, TaskLayout};
use crate::tensor::{
    AdamW, AdamWConfig, Checkpoint, CheckpointHeader, Gradients, ModelParams, Tape, Var,
    CHECKPOINT_FORMAT_VERSION,
};

const NM_RETRIES: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeKind {
    /// Neighbor matching: which anchor's neighborhood a node belongs to.
    Nm,
    /// Multi-task: few-shot classification with the graph's own labels.
    Mt,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub kind: EpisodeKind,
    /// Anchor node ids (NM) or global class ids (MT), one per way.
    pub classes: Vec<usize>,
    /// Labels are positions in `classes`.
    pub prompts: Vec<LabeledPoint>,
    pub queries: Vec<LabeledPoint>,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.classes.len()
    }

    fn describe(&self) -> String {
        let kind = match self.kind {
            EpisodeKind::Nm => "nm anchors",
            EpisodeKind::Mt => "mt classes",
        };
        format!("{kind} {:?}", self.classes)
    }
}

/// Queries assigned to class `c` when `n` queries are dealt round-robin
/// over `m` classes.
fn queries_for(c: usize, n: usize, m: usize) -> usize {
    n / m + usize::from(c < n % m)
}

/// Anchors are drawn uniformly among nodes with at least `k + 1` distinct
/// neighbors. Each anchor's class is its `hops`-ball minus all anchors and
/// minus nodes lying in several balls. Infeasible draws are retried.
pub fn sample_nm_episode(g: &Graph, spec: &EpisodeSpec, rng: &mut StreamRng) -> Result<Episode> {
    spec.validate()?;
    let (m, k, n) = (spec.ways, spec.shots, spec.queries);
    let eligible: Vec<usize> = (0..g.num_nodes())
        .filter(|&v| g.neighbor_ids(v).map_or(0, |ids| ids.len()) > k)
        .collect();
    if eligible.len() < m {
        return Err(Error::InvalidEpisode(format!(
            "{} nodes have degree >= {}, {m} anchors needed",
            eligible.len(),
            k + 1
        )));
    }
    for _ in 0..NM_RETRIES {
        let anchors: Vec<usize> = eligible.choose_multiple(rng, m).copied().collect();
        let anchor_set: BTreeSet<usize> = anchors.iter().copied().collect();
        let balls: Vec<Vec<usize>> = anchors
            .iter()
            .map(|&a| g.ball(a, spec.hops))
            .collect::<Result<_>>()?;
        let mut owners = std::collections::HashMap::<usize, usize>::new();
        for ball in &balls {
            for &v in ball {
                *owners.entry(v).or_default() += 1;
            }
        }
        let mut groups: Vec<Vec<usize>> = balls
            .into_iter()
            .map(|b| {
                b.into_iter()
                    .filter(|v| !anchor_set.contains(v) && owners[v] == 1)
                    .collect()
            })
            .collect();
        if groups
            .iter()
            .enumerate()
            .any(|(c, grp)| grp.len() < k + queries_for(c, n, m))
        {
            continue;
        }
        let mut prompts = Vec::with_capacity(m * k);
        let mut pending = Vec::with_capacity(m);
        for (c, grp) in groups.iter_mut().enumerate() {
            grp.shuffle(rng);
            prompts.extend(grp[..k].iter().map(|&v| LabeledPoint {
                point: InputPoint::Node(v),
                label: c,
            }));
            pending.push(grp[k..k + queries_for(c, n, m)].to_vec());
        }
        let queries = (0..n)
            .map(|j| LabeledPoint {
                point: InputPoint::Node(pending[j % m][j / m]),
                label: j % m,
            })
            .collect();
        return Ok(Episode {
            kind: EpisodeKind::Nm,
            classes: anchors,
            prompts,
            queries,
        });
    }
    Err(Error::InvalidEpisode(format!(
        "no feasible neighbor-matching episode after {NM_RETRIES} draws"
    )))
}

/// Classes are drawn from `pool`; prompts (`k` per class) and queries both
/// come from its train partition and never overlap.
pub fn sample_mt_episode(
    pool: &PointPool,
    spec: &EpisodeSpec,
    rng: &mut StreamRng,
) -> Result<Episode> {
    let spec = EpisodeSpec {
        candidates: spec.shots,
        ..*spec
    };
    let classes = draw_classes(&pool.classes(), spec.ways, rng)?;
    let ep = split_episode_pool(pool, &spec, &classes, Partition::Train, rng)?;
    let prompts = ep
        .candidates
        .iter()
        .enumerate()
        .flat_map(|(c, pts)| {
            pts.iter()
                .map(move |&p| LabeledPoint { point: p, label: c })
        })
        .collect();
    Ok(Episode {
        kind: EpisodeKind::Mt,
        classes: ep.classes,
        prompts,
        queries: ep.queries,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub spec: EpisodeSpec,
    /// Task kind of the multi-task episodes.
    pub task: TaskKind,
    pub nm_episodes: usize,
    pub mt_episodes: usize,
    pub steps: u64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_interval: u64,
    pub max_subgraph_nodes: usize,
    /// Multi-task classes; `None` uses every labeled class.
    pub pretrain_classes: Option<Vec<ClassId>>,
    pub weight_mode: WeightMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            spec: EpisodeSpec::default(),
            task: TaskKind::Node,
            nm_episodes: 4,
            mt_episodes: 4,
            steps: 1000,
            optimizer: AdamWConfig::default(),
            seed: 0,
            checkpoint_interval: 0,
            max_subgraph_nodes: 20,
            pretrain_classes: None,
            weight_mode: WeightMode::Learned,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.nm_episodes == 0 || self.mt_episodes == 0 {
            return Err(Error::InvalidParameter(
                "each step needs at least one NM and one MT episode".into(),
            ));
        }
        Ok(())
    }

    pub fn point_pool(&self, g: &Graph) -> PointPool {
        let pool = PointPool::new(g, self.task);
        match &self.pretrain_classes {
            Some(keep) => pool.restrict(|c| keep.contains(&c)),
            None => pool,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: AdamW,
    pub step: u64,
}

impl TrainState {
    pub fn new(model: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        let params = init_params(model, cfg.seed)?;
        let optimizer = AdamW::new(cfg.optimizer.clone(), &params);
        Ok(Self {
            params,
            optimizer,
            step: 0,
        })
    }

    pub fn to_checkpoint(&self, model: &ModelConfig, cfg: &TrainConfig) -> Result<Checkpoint> {
        Ok(Checkpoint {
            header: CheckpointHeader {
                format_version: CHECKPOINT_FORMAT_VERSION,
                embedding_dim: model.embedding_dim,
                num_relations: model.num_relations,
                rng_seed: cfg.seed,
                step: self.step,
                model: serde_json::to_value(model)?,
                optimizer: Some(self.optimizer.config.clone()),
            },
            params: self.params.clone(),
            optimizer: Some(self.optimizer.clone()),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(ModelConfig, Self)> {
        let model: ModelConfig = serde_json::from_value(ck.header.model.clone())?;
        check_params(&model, &ck.params)?;
        let optimizer = match &ck.optimizer {
            Some(o) => o.clone(),
            None => AdamW::new(ck.header.optimizer.clone().unwrap_or_default(), &ck.params),
        };
        Ok((
            model,
            Self {
                params: ck.params.clone(),
                optimizer,
                step: ck.header.step,
            },
        ))
    }
}

/// Model architecture stored in a checkpoint.
pub fn checkpoint_model(ck: &Checkpoint) -> Result<ModelConfig> {
    let model: ModelConfig = serde_json::from_value(ck.header.model.clone())?;
    check_params(&model, &ck.params)?;
    Ok(model)
}

/// Per-episode loss variable, built on `tape`, and the number of correctly
/// classified queries. `graphs` holds the prompt data graphs followed by
/// the query data graphs. Prompts enter the task graph scaled by their
/// importance; queries enter unscaled.
pub fn episode_loss(
    tape: &mut Tape,
    params: &ModelParams,
    model: &ModelConfig,
    graphs: &[DataGraph],
    episode: &Episode,
    mode: WeightMode,
) -> Result<(Var, usize)> {
    let refs: Vec<&DataGraph> = graphs.iter().collect();
    let (prompt_graphs, query_graphs) = refs.split_at(episode.prompts.len());
    let gp = embed_graphs(tape, params, model, prompt_graphs, mode)?;
    let gq = embed_graphs(tape, params, model, query_graphs, mode)?;
    let imp = importance(tape, params, gp)?;
    let gp = tape.scale_rows(gp, imp)?;
    let layout = TaskLayout::new(
        episode.prompts.iter().map(|x| x.label).collect(),
        episode.queries.len(),
        episode.ways(),
    )?;
    let state = propagate_on_tape(tape, params, &layout, gp, gq, model.task_rounds)?;
    let logits = logits_on_tape(tape, &state, model.softmax_temperature)?;
    let targets: Vec<usize> = episode.queries.iter().map(|q| q.label).collect();
    let lv = tape.value(logits);
    let correct = (0..lv.rows())
        .filter(|&i| argmax(lv.row(i)) == targets[i])
        .count();
    let loss = tape.softmax_cross_entropy(logits, &targets)?;
    Ok((loss, correct))
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b })
}

/// Data graphs for an episode's prompts then queries.
pub fn episode_data_graphs(
    g: &Graph,
    episode: &Episode,
    hops: usize,
    max_nodes: usize,
    rng: &mut StreamRng,
) -> Result<Vec<DataGraph>> {
    episode
        .prompts
        .iter()
        .chain(&episode.queries)
        .map(|x| sample_data_graph(g, &x.point, hops, max_nodes, rng))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_total: f64,
    pub loss_nm: f64,
    pub loss_mt: f64,
    pub acc_nm: f64,
    pub acc_mt: f64,
    pub wall_ms: f64,
}

/// Everything a training step reads besides the mutable state.
pub struct TrainContext<'a> {
    pub graph: &'a Graph,
    pub model: &'a ModelConfig,
    pub config: &'a TrainConfig,
}

struct EpisodeOutcome {
    grads: Gradients,
    loss: f64,
    correct: usize,
    total: usize,
}

/// One optimizer step on a batch of episodes. The loss is the mean query
/// cross-entropy over NM episodes plus the same over MT episodes. Data
/// graphs are sampled from a stream derived from the seed, the state's step
/// and the episode position.
pub fn train_step(
    state: &mut TrainState,
    ctx: &TrainContext,
    episodes: &[Episode],
) -> Result<StepMetrics> {
    let started = Instant::now();
    let count = |k: EpisodeKind| episodes.iter().filter(|e| e.kind == k).count();
    let (n_nm, n_mt) = (count(EpisodeKind::Nm), count(EpisodeKind::Mt));
    if n_nm == 0 || n_mt == 0 {
        return Err(Error::InvalidEpisode(
            "a training step needs at least one NM and one MT episode".into(),
        ));
    }
    if let Some(e) = episodes.iter().find(|e| e.ways() < 2) {
        return Err(Error::InvalidEpisode(format!("{}-way episode", e.ways())));
    }
    let cfg = ctx.config;
    let outcomes: Vec<Result<EpisodeOutcome>> = episodes
        .par_iter()
        .enumerate()
        .map(|(i, ep)| {
            let mut rng = stream(
                cfg.seed,
                &[label::TRAIN_STEP, state.step, i as u64, label::DATA_GRAPH],
            );
            let graphs = episode_data_graphs(
                ctx.graph,
                ep,
                cfg.spec.hops,
                cfg.max_subgraph_nodes,
                &mut rng,
            )?;
            let mut tape = Tape::new();
            let (loss, correct) = episode_loss(
                &mut tape,
                &state.params,
                ctx.model,
                &graphs,
                ep,
                cfg.weight_mode,
            )?;
            let weight = 1.0
                / if ep.kind == EpisodeKind::Nm {
                    n_nm
                } else {
                    n_mt
                } as f64;
            let scaled = tape.scale(loss, weight);
            let value = tape.value(loss).item();
            let grads = tape.backward(scaled, &state.params)?;
            Ok(EpisodeOutcome {
                grads,
                loss: value,
                correct,
                total: ep.queries.len(),
            })
        })
        .collect();
    let mut grads = Gradients::zeros_like(&state.params);
    let (mut loss_nm, mut loss_mt) = (0.0, 0.0);
    let (mut hit_nm, mut tot_nm, mut hit_mt, mut tot_mt) = (0, 0, 0, 0);
    for (ep, out) in episodes.iter().zip(outcomes) {
        let out = out?;
        grads.add(&out.grads)?;
        match ep.kind {
            EpisodeKind::Nm => {
                loss_nm += out.loss / n_nm as f64;
                hit_nm += out.correct;
                tot_nm += out.total;
            }
            EpisodeKind::Mt => {
                loss_mt += out.loss / n_mt as f64;
                hit_mt += out.correct;
                tot_mt += out.total;
            }
        }
    }
    let loss_total = loss_nm + loss_mt;
    if !loss_total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            loss: loss_total,
            episodes: episodes
                .iter()
                .map(Episode::describe)
                .collect::<Vec<_>>()
                .join("; "),
        });
    }
    state.optimizer.step(&mut state.params, &grads)?;
    state.step += 1;
    Ok(StepMetrics {
        step: state.step,
        loss_total,
        loss_nm,
        loss_mt,
        acc_nm: hit_nm as f64 / tot_nm.max(1) as f64,
        acc_mt: hit_mt as f64 / tot_mt.max(1) as f64,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// The episodes of training step `step`, drawn from a stream that depends
/// only on the seed and the step.
pub fn sample_step_episodes(
    g: &Graph,
    pool: &PointPool,
    cfg: &TrainConfig,
    step: u64,
) -> Result<Vec<Episode>> {
    let mut out = Vec::with_capacity(cfg.nm_episodes + cfg.mt_episodes);
    for i in 0..cfg.nm_episodes + cfg.mt_episodes {
        let mut rng = stream(
            cfg.seed,
            &[label::TRAIN_STEP, step, i as u64, label::EPISODE],
        );
        out.push(if i < cfg.nm_episodes {
            sample_nm_episode(g, &cfg.spec, &mut rng)?
        } else {
            sample_mt_episode(pool, &cfg.spec, &mut rng)?
        });
    }
    Ok(out)
}

/// Where `pretrain` writes its files.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.dir.join(format!("checkpoint-{step:06}.gpck"))
    }

    pub fn final_path(&self) -> PathBuf {
        self.dir.join("final.gpck")
    }
}

pub struct PretrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
}

/// Runs training steps until `config.steps`, starting from `resume` when
/// given. With `outputs`, appends one metrics row per step, writes periodic
/// checkpoints and a final one.
pub fn pretrain(
    graph: &Graph,
    model: &ModelConfig,
    config: &TrainConfig,
    outputs: Option<&TrainOutputs>,
    resume: Option<&Checkpoint>,
) -> Result<PretrainOutcome> {
    config.validate()?;
    model.validate()?;
    if model.feature_dim != graph.feature_dim() {
        return Err(Error::InvalidParameter(format!(
            "model expects {} features, graph has {}",
            model.feature_dim,
            graph.feature_dim()
        )));
    }
    let mut state = match resume {
        Some(ck) => {
            let (stored, state) = TrainState::from_checkpoint(ck)?;
            if &stored != model {
                return Err(Error::Checkpoint(
                    "model configuration differs from the checkpoint".into(),
                ));
            }
            state
        }
        None => TrainState::new(model, config)?,
    };
    let pool = config.point_pool(graph);
    let mut writer = match outputs {
        Some(out) => Some(metrics_writer(out)?),
        None => None,
    };
    let ctx = TrainContext {
        graph,
        model,
        config,
    };
    let mut metrics = Vec::new();
    while state.step < config.steps {
        let episodes = sample_step_episodes(graph, &pool, config, state.step)?;
        let m = train_step(&mut state, &ctx, &episodes)?;
        if let (Some(w), Some(out)) = (writer.as_mut(), outputs) {
            w.serialize(&m)?;
            w.flush().map_err(|e| Error::io(out.metrics_path(), e))?;
            if config.checkpoint_interval > 0 && state.step % config.checkpoint_interval == 0 {
                state
                    .to_checkpoint(model, config)?
                    .save(&out.checkpoint_path(state.step))?;
            }
        }
        metrics.push(m);
    }
    if let Some(out) = outputs {
        state
            .to_checkpoint(model, config)?
            .save(&out.final_path())?;
    }
    Ok(PretrainOutcome { state, metrics })
}

fn metrics_writer(out: &TrainOutputs) -> Result<csv::Writer<fs::File>> {
    fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
    let path = out.metrics_path();
    let fresh = fs::metadata(&path).map_or(true, |m| m.len() == 0);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    Ok(csv::WriterBuilder::new()
        .has_headers(fresh)
        .from_writer(file))
}

/// Reads a metrics CSV written by [`pretrain`].
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::{node, one_relation};
    use crate::graph::Edge;

    fn two_cliques() -> Graph {
        let nodes = (0..10)
            .map(|i| node(i, vec![i as f64 / 10.0, 1.0], Some(i / 5)))
            .collect();
        let mut edges = Vec::new();
        for base in [0, 5] {
            for a in 0..5 {
                for b in a + 1..5 {
                    edges.push(Edge {
                        src: base + a,
                        rel: 0,
                        dst: base + b,
                        label: None,
                    });
                }
            }
        }
        Graph::new(2, nodes, edges, one_relation()).unwrap()
    }

    fn spec(ways: usize, shots: usize, queries: usize) -> EpisodeSpec {
        EpisodeSpec {
            ways,
            shots,
            candidates: shots,
            queries,
            hops: 1,
        }
    }

    #[test]
    fn nm_on_disjoint_cliques() {
        let g = two_cliques();
        for seed in 0..20 {
            let ep = sample_nm_episode(&g, &spec(2, 2, 2), &mut stream(seed, &[])).unwrap();
            let clique = |v: usize| v / 5;
            for p in ep.prompts.iter().chain(&ep.queries) {
                let InputPoint::Node(v) = p.point else {
                    unreachable!()
                };
                assert_eq!(clique(v), clique(ep.classes[p.label]));
                assert!(!ep.classes.contains(&v));
            }
            for q in &ep.queries {
                assert!(ep.prompts.iter().all(|p| p.point != q.point));
            }
        }
    }

    #[test]
    fn mt_with_all_classes() {
        let g = two_cliques();
        let pool = PointPool::new(&g, TaskKind::Node);
        let ep = sample_mt_episode(&pool, &spec(2, 1, 2), &mut stream(3, &[])).unwrap();
        let mut classes = ep.classes.clone();
        classes.sort_unstable();
        assert_eq!(classes, vec![0, 1]);
        assert_eq!(ep.prompts.len(), 2);
    }

    #[test]
    fn one_way_rejected() {
        let g = two_cliques();
        assert!(sample_nm_episode(&g, &spec(1, 1, 1), &mut stream(0, &[])).is_err());
    }
}
