//! `graphprompter` command-line entry point.
//!
//! Exit codes: 0 success, 2 usage error, 1 runtime error.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use graphprompter::augmenter::CacheConfig;
use graphprompter::generator::WeightMode;
use graphprompter::graph::{
    generate_sbm, generate_synthetic_kg, load_graph, save_graph, ClassId, EpisodeSpec, Graph,
    KgParams, SbmParams, TaskKind,
};
use graphprompter::inference::{evaluate, run_inference, write_records, Ablation, InferenceConfig};
use graphprompter::model::ModelConfig;
use graphprompter::selector::{Metric, SelectorMode};
use graphprompter::sweep::{aggregate, run_sweep, write_csv, SweepKind};
use graphprompter::tensor::{AdamWConfig, Checkpoint};
use graphprompter::trainer::{checkpoint_model, pretrain, TrainConfig, TrainOutputs};

#[derive(Parser)]
#[command(
    name = "graphprompter",
    version,
    about = "Graph in-context learning with adaptive prompts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic graph file.
    Generate(GenerateArgs),
    /// Pretrain a model and write checkpoints plus a metrics CSV.
    Pretrain(PretrainArgs),
    /// Run downstream episodes and write per-query records and metrics.
    Infer(InferArgs),
    /// Run inference over a grid of settings and seeds.
    Sweep(SweepArgs),
    /// Print a checkpoint's header and parameter table.
    InspectCheckpoint(InspectArgs),
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum GraphKind {
    Sbm,
    Kg,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Node,
    Edge,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Node => TaskKind::Node,
            TaskArg::Edge => TaskKind::Edge,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectorArg {
    Adaptive,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Cosine,
    Euclidean,
    Manhattan,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum AblateArg {
    /// All data-graph edges weigh 1.
    NoReweight,
    /// Score without the similarity term.
    NoKnn,
    /// Importance fixed at 1.
    NoSelectionLayer,
    /// Cache disabled.
    NoAugmenter,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    CacheSize,
    Shots,
    Hops,
    Ways,
}

impl From<SweepArg> for SweepKind {
    fn from(s: SweepArg) -> Self {
        match s {
            SweepArg::CacheSize => SweepKind::CacheSize,
            SweepArg::Shots => SweepKind::Shots,
            SweepArg::Hops => SweepKind::Hops,
            SweepArg::Ways => SweepKind::Ways,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_enum)]
    kind: GraphKind,
    /// Output graph file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 10)]
    blocks: usize,
    #[arg(long, default_value_t = 200)]
    nodes_per_block: usize,
    #[arg(long, default_value_t = 0.05)]
    p_in: f64,
    #[arg(long, default_value_t = 0.005)]
    p_out: f64,
    /// Feature noise around the block mean.
    #[arg(long, default_value_t = 1.0)]
    noise_std: f64,
    #[arg(long, default_value_t = 1000)]
    entities: usize,
    #[arg(long, default_value_t = 50)]
    relations: usize,
    #[arg(long, default_value_t = 100)]
    triples_per_relation: usize,
    #[arg(long, default_value_t = 10)]
    clusters: usize,
    #[arg(long, default_value_t = 0.05)]
    signature_noise: f64,
    #[arg(long, default_value_t = 1.0)]
    feature_noise: f64,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct EpisodeArgs {
    #[arg(long, default_value_t = 5)]
    ways: usize,
    #[arg(long, default_value_t = 3)]
    shots: usize,
    #[arg(long, default_value_t = 4)]
    queries: usize,
    #[arg(long, default_value_t = 1)]
    hops: usize,
    #[arg(long, value_enum, default_value = "node")]
    task: TaskArg,
    #[arg(long, default_value_t = 20)]
    max_subgraph_nodes: usize,
    /// Class ids to draw episodes from, e.g. `0-4` or `1,3,5`.
    #[arg(long, value_parser = parse_classes)]
    classes: Option<ClassList>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 1000)]
    steps: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    episode: EpisodeArgs,
    #[arg(long, default_value_t = 4)]
    nm_episodes: usize,
    #[arg(long, default_value_t = 4)]
    mt_episodes: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    weight_decay: f64,
    #[arg(long, default_value_t = 64)]
    embedding_dim: usize,
    #[arg(long, default_value_t = 2)]
    gnn_depth: usize,
    #[arg(long, default_value_t = 2)]
    task_rounds: usize,
    #[arg(long, default_value_t = 0.1)]
    temperature: f64,
    /// Write a checkpoint every N steps (0: final only).
    #[arg(long, default_value_t = 0)]
    checkpoint_interval: u64,
    /// Train with all edge weights fixed at 1.
    #[arg(long)]
    no_reweight: bool,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct InferOptions {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    episode: EpisodeArgs,
    #[arg(long, default_value_t = 10)]
    candidates: usize,
    #[arg(long, default_value_t = 20)]
    episodes: usize,
    #[arg(long, value_enum, default_value = "adaptive")]
    selector: SelectorArg,
    #[arg(long, value_enum, default_value = "cosine")]
    metric: MetricArg,
    #[arg(long, default_value_t = 3)]
    cache_size: usize,
    #[arg(long, default_value_t = 0.5)]
    admit_floor: f64,
    #[arg(long, default_value_t = 1)]
    touch_k: usize,
    /// Disable pipeline stages (repeatable or comma-separated).
    #[arg(long, value_enum, value_delimiter = ',')]
    ablate: Vec<AblateArg>,
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    opts: InferOptions,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    kind: SweepArg,
    /// Swept values; defaults to the standard grid for the kind.
    #[arg(long, value_delimiter = ',')]
    values: Vec<usize>,
    /// Number of seeds, 0..N.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[command(flatten)]
    opts: InferOptions,
}

#[derive(Args)]
struct InspectArgs {
    checkpoint: PathBuf,
    /// Print the header as JSON only.
    #[arg(long)]
    json: bool,
}

/// An error in the flags rather than in the run.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(e: impl fmt::Display) -> anyhow::Error {
    Usage(e.to_string()).into()
}

#[derive(Clone)]
struct ClassList(Vec<ClassId>);

fn parse_classes(s: &str) -> Result<ClassList, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let a: usize = a
                    .trim()
                    .parse()
                    .map_err(|_| format!("bad class range `{part}`"))?;
                let b: usize = b
                    .trim()
                    .parse()
                    .map_err(|_| format!("bad class range `{part}`"))?;
                if a > b {
                    return Err(format!("empty class range `{part}`"));
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| format!("bad class id `{part}`"))?),
        }
    }
    if out.is_empty() {
        return Err("no classes given".into());
    }
    Ok(ClassList(out))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::InspectCheckpoint(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

/// The error chain joined with `: `, skipping causes already quoted by
/// their parent's message.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn read_graph(path: &Path) -> Result<Graph> {
    Ok(load_graph(path)?)
}

#[derive(Serialize)]
#[serde(untagged)]
enum GraphParams {
    Sbm(SbmParams),
    Kg(KgParams),
}

#[derive(Serialize)]
struct GenerateConfig {
    command: &'static str,
    kind: GraphKind,
    params: GraphParams,
    out: PathBuf,
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let params = match a.kind {
        GraphKind::Sbm => GraphParams::Sbm(SbmParams {
            blocks: a.blocks,
            nodes_per_block: a.nodes_per_block,
            p_in: a.p_in,
            p_out: a.p_out,
            feature_dim: a.feature_dim,
            noise_std: a.noise_std,
            seed: a.seed,
        }),
        GraphKind::Kg => GraphParams::Kg(KgParams {
            num_entities: a.entities,
            num_relations: a.relations,
            triples_per_relation: a.triples_per_relation,
            num_clusters: a.clusters,
            signature_noise: a.signature_noise,
            feature_dim: a.feature_dim,
            feature_noise: a.feature_noise,
            seed: a.seed,
        }),
    };
    let config = GenerateConfig {
        command: "generate",
        kind: a.kind,
        params,
        out: a.out.clone(),
    };
    if a.print_config {
        return print_json(&config);
    }
    let graph = match &config.params {
        GraphParams::Sbm(p) => generate_sbm(p),
        GraphParams::Kg(p) => generate_synthetic_kg(p),
    }
    .map_err(|e| match e {
        graphprompter::Error::InvalidParameter(_) => usage(e),
        other => other.into(),
    })?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_graph(&graph, &a.out)?;
    let mut sidecar = a.out.clone().into_os_string();
    sidecar.push(".config.json");
    write_json(Path::new(&sidecar), &config)?;
    println!(
        "wrote {} ({} nodes, {} edges)",
        a.out.display(),
        graph.num_nodes(),
        graph.num_edges()
    );
    Ok(())
}

fn episode_spec(e: &EpisodeArgs, candidates: usize) -> Result<EpisodeSpec> {
    let spec = EpisodeSpec {
        ways: e.ways,
        shots: e.shots,
        candidates,
        queries: e.queries,
        hops: e.hops,
    };
    spec.validate().map_err(usage)?;
    Ok(spec)
}

#[derive(Serialize)]
struct PretrainConfig {
    command: &'static str,
    graph: PathBuf,
    out_dir: PathBuf,
    resume: Option<PathBuf>,
    model: ModelConfig,
    train: TrainConfig,
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let spec = episode_spec(&a.episode, a.episode.shots)?;
    let train = TrainConfig {
        spec,
        task: a.episode.task.into(),
        nm_episodes: a.nm_episodes,
        mt_episodes: a.mt_episodes,
        steps: a.steps,
        optimizer: AdamWConfig {
            lr: a.lr,
            weight_decay: a.weight_decay,
            ..AdamWConfig::default()
        },
        seed: a.seed,
        checkpoint_interval: a.checkpoint_interval,
        max_subgraph_nodes: a.episode.max_subgraph_nodes,
        pretrain_classes: a.episode.classes.clone().map(|c| c.0),
        weight_mode: if a.no_reweight {
            WeightMode::Unit
        } else {
            WeightMode::Learned
        },
    };
    train.validate().map_err(usage)?;
    let graph = read_graph(&a.graph)?;
    let resume = match &a.resume {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    let model = match &resume {
        Some(ck) => checkpoint_model(ck)?,
        None => ModelConfig {
            feature_dim: graph.feature_dim(),
            embedding_dim: a.embedding_dim,
            gnn_depth: a.gnn_depth,
            task_rounds: a.task_rounds,
            num_relations: graph.relation_table_size(),
            softmax_temperature: a.temperature,
        },
    };
    model.validate().map_err(usage)?;
    let config = PretrainConfig {
        command: "pretrain",
        graph: a.graph.clone(),
        out_dir: a.out_dir.clone(),
        resume: a.resume.clone(),
        model,
        train,
    };
    if a.print_config {
        return print_json(&config);
    }
    create_dir(&a.out_dir)?;
    write_json(&a.out_dir.join("config.json"), &config)?;
    let outputs = TrainOutputs {
        dir: a.out_dir.clone(),
    };
    let outcome = pretrain(
        &graph,
        &config.model,
        &config.train,
        Some(&outputs),
        resume.as_ref(),
    )?;
    match outcome.metrics.last() {
        Some(m) => println!(
            "step {} loss {:.4} (nm {:.4}, mt {:.4}) acc_mt {:.3}",
            m.step, m.loss_total, m.loss_nm, m.loss_mt, m.acc_mt
        ),
        None => println!("no steps run"),
    }
    println!("wrote {}", outputs.final_path().display());
    Ok(())
}

fn inference_config(o: &InferOptions, seed: u64) -> Result<InferenceConfig> {
    let spec = episode_spec(&o.episode, o.candidates)?;
    let has = |x: AblateArg| o.ablate.contains(&x);
    if !(0.0..=1.0).contains(&o.admit_floor) {
        return Err(usage(format!(
            "--admit-floor must be in [0, 1], got {}",
            o.admit_floor
        )));
    }
    if o.touch_k == 0 {
        return Err(usage("--touch-k must be at least 1"));
    }
    if o.episodes == 0 {
        return Err(usage("--episodes must be at least 1"));
    }
    Ok(InferenceConfig {
        spec,
        task: o.episode.task.into(),
        selector: match o.selector {
            SelectorArg::Adaptive => SelectorMode::Adaptive,
            SelectorArg::Random => SelectorMode::Random,
        },
        metric: match o.metric {
            MetricArg::Cosine => Metric::Cosine,
            MetricArg::Euclidean => Metric::Euclidean,
            MetricArg::Manhattan => Metric::Manhattan,
        },
        ablation: Ablation {
            no_reweight: has(AblateArg::NoReweight),
            no_knn: has(AblateArg::NoKnn),
            no_selection_layer: has(AblateArg::NoSelectionLayer),
        },
        cache: CacheConfig {
            capacity: if has(AblateArg::NoAugmenter) {
                0
            } else {
                o.cache_size
            },
            admit_confidence_floor: o.admit_floor,
            touch_k: o.touch_k,
        },
        episodes: o.episodes,
        seed,
        max_subgraph_nodes: o.episode.max_subgraph_nodes,
        classes: o.episode.classes.clone().map(|c| c.0),
    })
}

fn load_model(path: &Path) -> Result<(Checkpoint, ModelConfig)> {
    let ck = Checkpoint::load(path)?;
    let model = checkpoint_model(&ck)?;
    Ok((ck, model))
}

#[derive(Serialize)]
struct InferConfig {
    command: &'static str,
    checkpoint: PathBuf,
    graph: PathBuf,
    out_dir: PathBuf,
    inference: InferenceConfig,
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let o = &a.opts;
    let config = InferConfig {
        command: "infer",
        checkpoint: o.checkpoint.clone(),
        graph: o.graph.clone(),
        out_dir: o.out_dir.clone(),
        inference: inference_config(o, a.seed)?,
    };
    if o.print_config {
        return print_json(&config);
    }
    let (ck, model) = load_model(&o.checkpoint)?;
    let graph = read_graph(&o.graph)?;
    create_dir(&o.out_dir)?;
    write_json(&o.out_dir.join("config.json"), &config)?;
    let records = run_inference(&ck.params, &model, &graph, &config.inference)?;
    write_records(&o.out_dir.join("records.jsonl"), &records)?;
    let report = evaluate(&records)?;
    write_json(&o.out_dir.join("metrics.json"), &report)?;
    println!("accuracy {:.4} over {} queries", report.accuracy, report.n);
    Ok(())
}

#[derive(Serialize)]
struct SweepConfig {
    command: &'static str,
    kind: SweepKind,
    values: Vec<usize>,
    seeds: Vec<u64>,
    checkpoint: PathBuf,
    graph: PathBuf,
    out_dir: PathBuf,
    inference: InferenceConfig,
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let o = &a.opts;
    let kind: SweepKind = a.kind.into();
    let values = if a.values.is_empty() {
        kind.default_values()
    } else {
        a.values.clone()
    };
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let config = SweepConfig {
        command: "sweep",
        kind,
        values,
        seeds: (0..a.seeds).collect(),
        checkpoint: o.checkpoint.clone(),
        graph: o.graph.clone(),
        out_dir: o.out_dir.clone(),
        inference: inference_config(o, 0)?,
    };
    for &v in &config.values {
        let mut probe = config.inference.clone();
        kind.apply(&mut probe, v);
        probe.spec.validate().map_err(usage)?;
    }
    if o.print_config {
        return print_json(&config);
    }
    let (ck, model) = load_model(&o.checkpoint)?;
    let graph = read_graph(&o.graph)?;
    create_dir(&o.out_dir)?;
    write_json(&o.out_dir.join("config.json"), &config)?;
    let raw = run_sweep(
        &ck.params,
        &model,
        &graph,
        &config.inference,
        kind,
        &config.values,
        &config.seeds,
    )?;
    let agg = aggregate(&raw);
    write_csv(&o.out_dir.join("raw.csv"), &raw)?;
    write_csv(&o.out_dir.join("aggregate.csv"), &agg)?;
    for row in &agg {
        println!(
            "{} {}={} mean {:.4} std {:.4} ({} runs)",
            row.method, row.sweep, row.value, row.mean, row.std, row.runs
        );
    }
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    if a.json {
        return print_json(&ck.header);
    }
    let h = &ck.header;
    println!("format_version {}", h.format_version);
    println!("step           {}", h.step);
    println!("rng_seed       {}", h.rng_seed);
    println!("embedding_dim  {}", h.embedding_dim);
    println!("num_relations  {}", h.num_relations);
    println!(
        "optimizer      {}",
        if ck.optimizer.is_some() {
            "adamw (moments stored)"
        } else {
            "none"
        }
    );
    println!("fingerprint    {}", ck.params.fingerprint());
    println!(
        "parameters     {} tensors, {} values",
        ck.params.len(),
        ck.params.num_values()
    );
    for (name, t) in ck.params.iter() {
        println!("  {name:<24} {:?}", t.shape());
    }
    Ok(())
}
