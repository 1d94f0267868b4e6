#[macro_use]
mod common;

use rand::Rng;

use common::{dot, micro_model, norm, random_matrix, random_params, rng, softmax, vec_mat};
use graphprompter::task_graph::{build_task_graph, predict, Propagated, EDGE_F, EDGE_Q, EDGE_T};
use graphprompter::tensor::{ModelParams, Tensor};

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// One attention step written as loops: every target attends over all
/// sources with messages `h_s + e_type`.
fn attend(
    params: &ModelParams,
    prefix: &str,
    targets: &[Vec<f64>],
    sources: &[Vec<f64>],
    edge_type: impl Fn(usize, usize) -> usize,
) -> Vec<Vec<f64>> {
    let w = |s: &str| params.get(&format!("{prefix}.{s}")).unwrap();
    let et = params.get("task.edge_type").unwrap();
    let h = targets[0].len() as f64;
    targets
        .iter()
        .enumerate()
        .map(|(t, ht)| {
            let q = vec_mat(ht, w("wq"));
            let msgs: Vec<Vec<f64>> = sources
                .iter()
                .enumerate()
                .map(|(s, hs)| add(hs, et.row(edge_type(t, s))))
                .collect();
            let logits: Vec<f64> = msgs
                .iter()
                .map(|m| dot(&q, &vec_mat(m, w("wk"))) / h.sqrt())
                .collect();
            let alpha = softmax(&logits);
            let mut out = vec![0.0; ht.len()];
            for (a, m) in alpha.iter().zip(&msgs) {
                for (o, v) in out.iter_mut().zip(vec_mat(m, w("wv"))) {
                    *o += a * v;
                }
            }
            add(ht, &out)
        })
        .collect()
}

fn propagate_oracle(
    params: &ModelParams,
    prompts: &[(Vec<f64>, usize)],
    queries: &[Vec<f64>],
    m: usize,
    rounds: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let width = prompts[0].0.len();
    let mut labels: Vec<Vec<f64>> = (0..m)
        .map(|y| {
            let members: Vec<&Vec<f64>> =
                prompts.iter().filter(|p| p.1 == y).map(|p| &p.0).collect();
            (0..width)
                .map(|j| members.iter().map(|v| v[j] / members.len() as f64).sum())
                .collect()
        })
        .collect();
    let mut hp: Vec<Vec<f64>> = prompts.iter().map(|p| p.0.clone()).collect();
    let mut hq = queries.to_vec();
    let tf = |y: usize, c: usize| if y == c { EDGE_T } else { EDGE_F };
    for r in 0..rounds {
        labels = attend(params, &format!("task.r{r}.label"), &labels, &hp, |y, i| {
            tf(y, prompts[i].1)
        });
        let data = format!("task.r{r}.data");
        hp = attend(params, &data, &hp, &labels, |i, y| tf(y, prompts[i].1));
        hq = attend(params, &data, &hq, &labels, |_, _| EDGE_Q);
    }
    (labels, hp, hq)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn assert_close(got: &[Vec<f64>], want: &[Vec<f64>], tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}");
    for (g, w) in got.iter().zip(want) {
        for (a, b) in g.iter().zip(w) {
            assert!((a - b).abs() <= tol, "{what}: {got:?} vs {want:?}");
        }
    }
}

pub fn single_prompt_single_label_closed_form() {
    let cfg = micro_model(2, 1);
    let params = random_params(&cfg, 3);
    let mut r = rng(3);
    let x = random_matrix(&mut r, 2, cfg.embedding_dim);
    let (p, q) = (&x[0], &x[1]);
    let tg = build_task_graph(&[(p.clone(), 0)], std::slice::from_ref(q), 1).unwrap();
    let h = tg.propagate(&params, 1).unwrap();

    // With one source the attention weight is 1.
    let et = params.get("task.edge_type").unwrap();
    let wv_l = params.get("task.r0.label.wv").unwrap();
    let wv_d = params.get("task.r0.data.wv").unwrap();
    let label = add(p, &vec_mat(&add(p, et.row(EDGE_T)), wv_l));
    let prompt = add(p, &vec_mat(&add(&label, et.row(EDGE_T)), wv_d));
    let query = add(q, &vec_mat(&add(&label, et.row(EDGE_Q)), wv_d));
    assert_close(&rows(&h.labels), &[label], 1e-12, "label");
    assert_close(&rows(&h.prompts), &[prompt], 1e-12, "prompt");
    assert_close(&rows(&h.queries), &[query], 1e-12, "query");
}

pub fn propagation_matches_loop_oracle() {
    for seed in 0..10 {
        let cfg = micro_model(2, 1);
        let params = random_params(&cfg, seed);
        let mut r = rng(seed);
        let m = 4;
        let prompts: Vec<(Vec<f64>, usize)> = (0..m * 2)
            .map(|i| (random_matrix(&mut r, 1, cfg.embedding_dim).remove(0), i % m))
            .collect();
        let queries = random_matrix(&mut r, 3, cfg.embedding_dim);
        for rounds in 0..=cfg.task_rounds {
            let h = build_task_graph(&prompts, &queries, m)
                .unwrap()
                .propagate(&params, rounds)
                .unwrap();
            let (labels, hp, hq) = propagate_oracle(&params, &prompts, &queries, m, rounds);
            assert_close(&rows(&h.labels), &labels, 1e-12, "labels");
            assert_close(&rows(&h.prompts), &hp, 1e-12, "prompts");
            assert_close(&rows(&h.queries), &hq, 1e-12, "queries");
        }
    }
}

fn random_propagated(seed: u64, q: usize, m: usize, h: usize) -> Propagated {
    let mut r = rng(seed);
    let t = |rows: usize, r: &mut _| {
        Tensor::new(vec![rows, h], random_matrix(r, rows, h).concat()).unwrap()
    };
    Propagated {
        labels: t(m, &mut r),
        prompts: t(m, &mut r),
        queries: t(q, &mut r),
    }
}

pub fn probabilities_are_softmax_over_cosines() {
    let tau = 0.1;
    for seed in 0..20 {
        let h = random_propagated(seed, 5, 4, 6);
        let preds = predict(&h, tau).unwrap();
        assert_eq!(preds.len(), 5);
        for (i, p) in preds.iter().enumerate() {
            let qv = h.queries.row(i);
            let cos: Vec<f64> = (0..4)
                .map(|y| dot(qv, h.labels.row(y)) / (norm(qv) * norm(h.labels.row(y))))
                .collect();
            let want = softmax(&cos.iter().map(|c| c / tau).collect::<Vec<_>>());
            for y in 0..4 {
                assert!((p.similarities[y] - cos[y]).abs() < 1e-12);
                assert!((p.probabilities[y] - want[y]).abs() < 1e-12);
            }
            assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let best = (0..4)
                .max_by(|&a, &b| cos[a].total_cmp(&cos[b]).then(b.cmp(&a)))
                .unwrap();
            assert_eq!(p.predicted, best);
            assert_eq!(p.confidence, p.probabilities[best]);
        }
    }
}

pub fn predictions_invariant_to_query_scale() {
    let mut r = rng(5);
    for seed in 0..20 {
        let h = random_propagated(seed, 3, 5, 4);
        let c: f64 = r.random_range(0.01..100.0);
        let scaled = Propagated {
            queries: Tensor::new(
                h.queries.shape().to_vec(),
                h.queries.data().iter().map(|v| v * c).collect(),
            )
            .unwrap(),
            ..h.clone()
        };
        let (a, b) = (predict(&h, 0.1).unwrap(), predict(&scaled, 0.1).unwrap());
        for (x, y) in a.iter().zip(&b) {
            for (s, t) in x.similarities.iter().zip(&y.similarities) {
                assert!((s - t).abs() < 1e-12);
            }
            assert_eq!(x.predicted, y.predicted);
        }
    }
}

pub fn queries_do_not_influence_each_other() {
    for seed in 0..10 {
        let cfg = micro_model(2, 1);
        let params = random_params(&cfg, seed);
        let mut r = rng(50 + seed);
        let prompts: Vec<(Vec<f64>, usize)> = (0..6)
            .map(|i| (random_matrix(&mut r, 1, cfg.embedding_dim).remove(0), i % 3))
            .collect();
        let queries = random_matrix(&mut r, 4, cfg.embedding_dim);
        let all = build_task_graph(&prompts, &queries, 3)
            .unwrap()
            .propagate(&params, 2)
            .unwrap();
        let all_preds = predict(&all, 0.1).unwrap();
        for (i, q) in queries.iter().enumerate() {
            let one = build_task_graph(&prompts, std::slice::from_ref(q), 3)
                .unwrap()
                .propagate(&params, 2)
                .unwrap();
            assert_close(
                &[all.queries.row(i).to_vec()],
                &rows(&one.queries),
                1e-12,
                "query row",
            );
            assert_close(&rows(&all.labels), &rows(&one.labels), 0.0, "labels");
            let p = &predict(&one, 0.1).unwrap()[0];
            assert_eq!(p.predicted, all_preds[i].predicted);
        }
    }
}

tests_for!(
    single_prompt_single_label_closed_form,
    propagation_matches_loop_oracle,
    probabilities_are_softmax_over_cosines,
    predictions_invariant_to_query_scale,
    queries_do_not_influence_each_other
);
