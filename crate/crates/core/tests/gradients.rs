#[macro_use]
mod common;

use std::sync::Arc;

use rand::Rng;

use common::{fd_check, micro_model, random_graph, random_matrix, random_params, rng};
use graphprompter::generator::{
    batch_edge_weights, embed_graphs, sample_data_graph, DataBatch, DataGraph, WeightMode,
};
use graphprompter::graph::{Graph, InputPoint, LabeledPoint};
use graphprompter::model::ModelConfig;
use graphprompter::selector::importance;
use graphprompter::task_graph::{logits_on_tape, propagate_on_tape, TaskLayout};
use graphprompter::tensor::{AdamW, AdamWConfig, Gradients, ModelParams, Tape, Tensor, Var};
use graphprompter::trainer::{episode_loss, Episode, EpisodeKind};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

/// Loss and gradients of `build` at `params`, plus the finite-difference
/// comparison over `names`.
fn check(
    params: &ModelParams,
    names: &[&str],
    build: impl Fn(&mut Tape, &ModelParams) -> Var,
) -> (f64, String) {
    let mut tape = Tape::new();
    let loss = build(&mut tape, params);
    let grads = tape.backward(loss, params).unwrap();
    fd_check(params, names, &grads, EPS, |p| {
        let mut tape = Tape::no_grad();
        let l = build(&mut tape, p);
        tape.value(l).item()
    })
}

fn assert_ok(what: &str, seed: u64, (err, at): (f64, String)) {
    assert!(
        err <= TOL,
        "{what}, seed {seed}: relative error {err:.3e} at {at}"
    );
}

/// `sum(out * R)` for a fixed random `R`, so every output entry gets its
/// own upstream gradient.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let mut r = rng(seed ^ 0xabc);
    let proj = Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let proj = tape.constant(proj);
    let prod = tape.mul(out, proj).unwrap();
    tape.sum(prod)
}

fn names_with(params: &ModelParams, prefix: &str) -> Vec<String> {
    params
        .names()
        .filter(|n| n.starts_with(prefix))
        .map(str::to_string)
        .collect()
}

fn data_graphs(g: &Graph, points: &[InputPoint], seed: u64) -> Vec<DataGraph> {
    let mut r = rng(seed ^ 0x99);
    points
        .iter()
        .map(|x| sample_data_graph(g, x, 2, 8, &mut r).unwrap())
        .collect()
}

fn setup(seed: u64) -> (Graph, ModelConfig, ModelParams) {
    let mut r = rng(seed);
    let g = random_graph(&mut r, 14, 0.3, 3, 2, 2);
    let cfg = micro_model(3, 2);
    let params = random_params(&cfg, seed);
    (g, cfg, params)
}

pub fn three_layer_mlp_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let mut params = ModelParams::default();
        let dims = [5, 7, 6, 3];
        for l in 0..3 {
            let w = random_matrix(&mut r, dims[l], dims[l + 1]).concat();
            params
                .insert(
                    &format!("l{l}.w"),
                    Tensor::new(vec![dims[l], dims[l + 1]], w).unwrap(),
                )
                .unwrap();
            let b = random_matrix(&mut r, 1, dims[l + 1]).concat();
            params
                .insert(&format!("l{l}.b"), Tensor::vector(b))
                .unwrap();
        }
        let x = Tensor::from_rows(&random_matrix(&mut r, 4, 5));
        let targets: Vec<usize> = (0..4).map(|_| r.random_range(0..3)).collect();
        let names: Vec<String> = params.names().map(str::to_string).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let res = check(&params, &names, |tape, p| {
            let mut h = tape.constant(x.clone());
            for l in 0..3 {
                let w = tape.param(p, &format!("l{l}.w")).unwrap();
                let b = tape.param(p, &format!("l{l}.b")).unwrap();
                let z = tape.matmul(h, w).unwrap();
                let z = tape.add_row(z, b).unwrap();
                h = if l < 2 { tape.sigmoid(z) } else { z };
            }
            tape.softmax_cross_entropy(h, &targets).unwrap()
        });
        assert_ok("3-layer MLP", seed, res);
    }
}

pub fn composite_tape_ops_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let mut params = ModelParams::default();
        params
            .insert("a", Tensor::from_rows(&random_matrix(&mut r, 4, 3)))
            .unwrap();
        params
            .insert("b", Tensor::from_rows(&random_matrix(&mut r, 4, 3)))
            .unwrap();
        params
            .insert("s", Tensor::from_rows(&random_matrix(&mut r, 4, 1)))
            .unwrap();
        let edges: Arc<[(usize, usize)]> = vec![(0, 1), (1, 2), (2, 3), (0, 3)].into();
        let idx: Arc<[usize]> = (0..8).map(|i| (i * 5 + seed as usize) % 3).collect();
        let res = check(&params, &["a", "b", "s"], |tape, p| {
            let a = tape.param(p, "a").unwrap();
            let b = tape.param(p, "b").unwrap();
            let s = tape.param(p, "s").unwrap();
            let w = tape.sigmoid(s);
            let nb = tape.neighbor_mean(a, w, edges.clone()).unwrap();
            let d = tape.sub(nb, b).unwrap();
            let sr = tape.scale_rows(d, w).unwrap();
            let cos = tape.cosine_similarity(sr, b).unwrap();
            let sm = tape.row_softmax(cos).unwrap();
            let picked = tape.pick(sm, idx.clone(), 2).unwrap();
            let back = tape.scatter_cols(picked, idx.clone(), 4).unwrap();
            let at = tape.transpose(a).unwrap();
            let g = tape.matmul(at, back).unwrap();
            let g = tape.transpose(g).unwrap();
            let both = tape.concat_rows(&[g, b]).unwrap();
            let side = tape.concat_cols(&[both, both]).unwrap();
            let rows = tape.gather_rows(side, &[0, 2, 5]).unwrap();
            let sq = tape.mul(rows, rows).unwrap();
            let m = tape.mean(sq);
            let l = tape.relu(m);
            tape.scale(l, 3.0)
        });
        assert_ok("composite ops", seed, res);
    }
}

pub fn node_reconstruction_mlp_gradients() {
    for seed in 0..SEEDS {
        let (g, _, params) = setup(seed);
        let graphs = data_graphs(
            &g,
            &[
                InputPoint::Node(0),
                InputPoint::Node(5),
                InputPoint::Node(9),
            ],
            seed,
        );
        let names = names_with(&params, "recon.node");
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let res = check(&params, &names, |tape, p| {
            let refs: Vec<&DataGraph> = graphs.iter().collect();
            let batch = DataBatch::new(&refs).unwrap();
            let w = batch_edge_weights(tape, p, &batch, WeightMode::Learned).unwrap();
            project(tape, w, seed)
        });
        assert_ok("MLP_phi (node)", seed, res);
    }
}

pub fn edge_reconstruction_mlp_gradients() {
    for seed in 0..SEEDS {
        let (g, _, params) = setup(seed);
        let points: Vec<InputPoint> = g
            .edges()
            .iter()
            .take(3)
            .map(|e| InputPoint::Edge(e.src, e.dst))
            .collect();
        let graphs = data_graphs(&g, &points, seed);
        let mut names = names_with(&params, "recon.edge");
        names.push("rel_emb".into());
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let res = check(&params, &names, |tape, p| {
            let refs: Vec<&DataGraph> = graphs.iter().collect();
            let batch = DataBatch::new(&refs).unwrap();
            let w = batch_edge_weights(tape, p, &batch, WeightMode::Learned).unwrap();
            project(tape, w, seed)
        });
        assert_ok("MLP_phi (edge)", seed, res);
    }
}

pub fn selection_mlp_gradients() {
    for seed in 0..SEEDS {
        let (_, cfg, params) = setup(seed);
        let emb = Tensor::from_rows(&random_matrix(&mut rng(seed + 100), 5, cfg.embedding_dim));
        let names = names_with(&params, "select");
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let res = check(&params, &names, |tape, p| {
            let e = tape.constant(emb.clone());
            let i = importance(tape, p, e).unwrap();
            project(tape, i, seed)
        });
        assert_ok("MLP_theta", seed, res);
    }
}

pub fn data_graph_encoder_gradients() {
    for seed in 0..SEEDS {
        let (g, cfg, params) = setup(seed);
        let graphs = data_graphs(
            &g,
            &[
                InputPoint::Node(1),
                InputPoint::Node(2),
                InputPoint::Node(7),
            ],
            seed,
        );
        let mut names = names_with(&params, "gnn_d");
        names.extend(names_with(&params, "recon.node"));
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let res = check(&params, &names, |tape, p| {
            let refs: Vec<&DataGraph> = graphs.iter().collect();
            let out = embed_graphs(tape, p, &cfg, &refs, WeightMode::Learned).unwrap();
            project(tape, out, seed)
        });
        assert_ok("GNN_D", seed, res);
    }
}

pub fn task_graph_gradients() {
    for seed in 0..SEEDS {
        let (_, cfg, params) = setup(seed);
        let mut r = rng(seed + 200);
        let prompts = Tensor::from_rows(&random_matrix(&mut r, 5, cfg.embedding_dim));
        let queries = Tensor::from_rows(&random_matrix(&mut r, 3, cfg.embedding_dim));
        let layout = TaskLayout::new(vec![0, 1, 2, 0, 1], 3, 3).unwrap();
        let names = names_with(&params, "task");
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let res = check(&params, &names, |tape, p| {
            let pv = tape.constant(prompts.clone());
            let qv = tape.constant(queries.clone());
            let state = propagate_on_tape(tape, p, &layout, pv, qv, cfg.task_rounds).unwrap();
            let logits = logits_on_tape(tape, &state, cfg.softmax_temperature).unwrap();
            tape.softmax_cross_entropy(logits, &[2, 0, 1]).unwrap()
        });
        assert_ok("GNN_T", seed, res);
    }
}

pub fn end_to_end_two_way_one_shot() {
    for seed in 0..SEEDS {
        let (g, cfg, params) = setup(seed);
        let lp = |v, label| LabeledPoint {
            point: InputPoint::Node(v),
            label,
        };
        let episode = Episode {
            kind: EpisodeKind::Mt,
            classes: vec![0, 1],
            prompts: vec![lp(0, 0), lp(1, 1)],
            queries: vec![lp(2, 0), lp(3, 1)],
        };
        let points: Vec<InputPoint> = episode
            .prompts
            .iter()
            .chain(&episode.queries)
            .map(|x| x.point)
            .collect();
        let graphs = data_graphs(&g, &points, seed);
        let names: Vec<String> = params
            .names()
            .filter(|n| !n.starts_with("recon.edge") && *n != "rel_emb")
            .map(str::to_string)
            .collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let res = check(&params, &names, |tape, p| {
            episode_loss(tape, p, &cfg, &graphs, &episode, WeightMode::Learned)
                .unwrap()
                .0
        });
        assert_ok("end-to-end", seed, res);
    }
}

const TARGET: [f64; 2] = [0.6, -0.8];

fn adamw_config(lr: f64) -> AdamWConfig {
    AdamWConfig {
        lr,
        weight_decay: 0.01,
        ..AdamWConfig::default()
    }
}

fn distance(w: &[f64]) -> f64 {
    w.iter()
        .zip(&TARGET)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// One AdamW run on `||w - w*||^2` from the origin, recording the distance
/// after each step.
fn quadratic_trajectory(lr: f64, steps: usize) -> Vec<f64> {
    let mut params = ModelParams::default();
    params.insert("w", Tensor::vector(vec![0.0, 0.0])).unwrap();
    let mut opt = AdamW::new(adamw_config(lr), &params);
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let w = params.get("w").unwrap().data().to_vec();
        let g: Vec<f64> = w.iter().zip(&TARGET).map(|(a, b)| 2.0 * (a - b)).collect();
        let mut grads = Gradients::zeros_like(&params);
        grads.insert("w", Tensor::vector(g));
        opt.step(&mut params, &grads).unwrap();
        out.push(distance(params.get("w").unwrap().data()));
    }
    out
}

/// The same run written per coordinate from the update rule.
fn quadratic_oracle(lr: f64, steps: usize) -> Vec<f64> {
    let c = adamw_config(lr);
    let mut w = [0.0f64; 2];
    let mut m = [0.0f64; 2];
    let mut v = [0.0f64; 2];
    let mut out = Vec::new();
    for t in 1..=steps {
        let g = [2.0 * (w[0] - TARGET[0]), 2.0 * (w[1] - TARGET[1])];
        for i in 0..2 {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let mh = m[i] / (1.0 - c.beta1.powi(t as i32));
            let vh = v[i] / (1.0 - c.beta2.powi(t as i32));
            w[i] = w[i] * (1.0 - c.lr * c.weight_decay) - c.lr * mh / (vh.sqrt() + c.eps);
        }
        out.push(distance(&w));
    }
    out
}

pub fn adamw_descends_a_quadratic() {
    let traj = quadratic_trajectory(0.05, 100);
    let oracle = quadratic_oracle(0.05, 100);
    for (t, (a, b)) in traj.iter().zip(&oracle).enumerate() {
        assert!((a - b).abs() < 1e-12, "step {}: {a} vs {b}", t + 1);
    }
    assert!(traj[99] < 1e-2, "final distance {}", traj[99]);
    let pinned = [
        (0, 0.9300537623853168),
        (9, 0.34318424661554003),
        (49, 0.04395188296443242),
        (99, 0.005878006123941213),
    ];
    for (i, want) in pinned {
        assert!(
            (traj[i] - want).abs() < 1e-9,
            "step {}: {} vs {want}",
            i + 1,
            traj[i]
        );
    }
}

tests_for!(
    three_layer_mlp_matches_finite_differences,
    composite_tape_ops_match_finite_differences,
    node_reconstruction_mlp_gradients,
    edge_reconstruction_mlp_gradients,
    selection_mlp_gradients,
    data_graph_encoder_gradients,
    task_graph_gradients,
    end_to_end_two_way_one_shot,
    adamw_descends_a_quadratic
);
