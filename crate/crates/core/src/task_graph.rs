//! Bipartite prompt/query to label graph with attention propagation and
//! nearest-label prediction.
//!
//! Each round first updates the label nodes from the prompts (T or F
//! edges), then updates prompts and queries from the new label embeddings
//! (queries over Q edges). Labels never read from queries, so one query
//! cannot influence another's prediction.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, ModelParams, Tape, Tensor, Var};

/// Edge type rows of `task.edge_type`.
pub const EDGE_T: usize = 0;
pub const EDGE_F: usize = 1;
pub const EDGE_Q: usize = 2;

/// Structure of a task graph: class of every prompt node, query count and
/// label count. Every prompt links to all `m` labels (one T edge, the rest
/// F); every query links to all labels with Q edges.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskLayout {
    pub m: usize,
    pub prompt_classes: Vec<usize>,
    pub num_queries: usize,
}

impl TaskLayout {
    pub fn new(prompt_classes: Vec<usize>, num_queries: usize, m: usize) -> Result<Self> {
        if let Some(&c) = prompt_classes.iter().find(|&&c| c >= m) {
            return Err(Error::InvalidEpisode(format!(
                "prompt class {c} outside 0..{m}"
            )));
        }
        if let Some(c) = (0..m).find(|c| !prompt_classes.contains(c)) {
            return Err(Error::InvalidEpisode(format!("class {c} has no prompts")));
        }
        Ok(Self {
            m,
            prompt_classes,
            num_queries,
        })
    }

    pub fn num_prompts(&self) -> usize {
        self.prompt_classes.len()
    }

    /// `(data node, label, edge type)` for every edge; queries are numbered
    /// after the prompts.
    pub fn edges(&self) -> Vec<(usize, usize, usize)> {
        let p = self.num_prompts();
        let mut out = Vec::with_capacity((p + self.num_queries) * self.m);
        for (i, &c) in self.prompt_classes.iter().enumerate() {
            for y in 0..self.m {
                out.push((i, y, if y == c { EDGE_T } else { EDGE_F }));
            }
        }
        for q in 0..self.num_queries {
            for y in 0..self.m {
                out.push((p + q, y, EDGE_Q));
            }
        }
        out
    }

    /// `[m, P]` averaging matrix: row `y` is uniform over class-`y` prompts.
    fn label_init(&self) -> Tensor {
        let p = self.num_prompts();
        let mut data = vec![0.0; self.m * p];
        for y in 0..self.m {
            let count = self.prompt_classes.iter().filter(|&&c| c == y).count() as f64;
            for (i, &c) in self.prompt_classes.iter().enumerate() {
                if c == y {
                    data[y * p + i] = 1.0 / count;
                }
            }
        }
        Tensor::new(vec![self.m, p], data).expect("sized above")
    }
}

/// Node embeddings of a task graph on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TaskState {
    pub labels: Var,
    pub prompts: Var,
    pub queries: Var,
}

/// Label initialization followed by `rounds` attention rounds.
pub fn propagate_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    layout: &TaskLayout,
    prompts: Var,
    queries: Var,
    rounds: usize,
) -> Result<TaskState> {
    let init = tape.constant(layout.label_init());
    let mut state = TaskState {
        labels: tape.matmul(init, prompts)?,
        prompts,
        queries,
    };
    let (p, m, q) = (layout.num_prompts(), layout.m, layout.num_queries);
    let label_types: Arc<[usize]> = (0..m)
        .flat_map(|y| {
            layout
                .prompt_classes
                .iter()
                .map(move |&c| if c == y { EDGE_T } else { EDGE_F })
        })
        .collect();
    let prompt_types: Arc<[usize]> = layout
        .prompt_classes
        .iter()
        .flat_map(|&c| (0..m).map(move |y| if c == y { EDGE_T } else { EDGE_F }))
        .collect();
    let query_types: Arc<[usize]> = vec![EDGE_Q; q * m].into();
    debug_assert_eq!(label_types.len(), p * m);
    for r in 0..rounds {
        let upd = attend(
            tape,
            params,
            &format!("task.r{r}.label"),
            state.labels,
            state.prompts,
            &label_types,
        )?;
        let labels = tape.add(state.labels, upd)?;
        let data = format!("task.r{r}.data");
        let upd = attend(tape, params, &data, state.prompts, labels, &prompt_types)?;
        let prompts = tape.add(state.prompts, upd)?;
        let upd = attend(tape, params, &data, state.queries, labels, &query_types)?;
        let queries = tape.add(state.queries, upd)?;
        state = TaskState {
            labels,
            prompts,
            queries,
        };
    }
    Ok(state)
}

/// Single-head scaled dot-product attention of each target row over all
/// source rows. The message from source `s` to target `t` is
/// `h_s + e_type(t,s)`; keys and values are linear in the message.
/// `types[t * S + s]` indexes `task.edge_type`.
fn attend(
    tape: &mut Tape,
    params: &ModelParams,
    prefix: &str,
    targets: Var,
    sources: Var,
    types: &Arc<[usize]>,
) -> Result<Var> {
    let wq = tape.param(params, &format!("{prefix}.wq"))?;
    let wk = tape.param(params, &format!("{prefix}.wk"))?;
    let wv = tape.param(params, &format!("{prefix}.wv"))?;
    let et = tape.param(params, "task.edge_type")?;
    let s = tape.value(sources).rows();
    let h = tape.value(targets).cols();

    let query = tape.matmul(targets, wq)?;
    let keys = tape.matmul(sources, wk)?;
    let keys_t = tape.transpose(keys)?;
    let node_part = tape.matmul(query, keys_t)?;
    let type_keys = tape.matmul(et, wk)?;
    let type_keys_t = tape.transpose(type_keys)?;
    let per_type = tape.matmul(query, type_keys_t)?;
    let type_part = tape.pick(per_type, types.clone(), s)?;
    let logits = tape.add(node_part, type_part)?;
    let logits = tape.scale(logits, 1.0 / (h as f64).sqrt());
    let alpha = tape.row_softmax(logits)?;

    let values = tape.matmul(sources, wv)?;
    let node_msg = tape.matmul(alpha, values)?;
    let type_values = tape.matmul(et, wv)?;
    let type_mass = tape.scatter_cols(alpha, types.clone(), 3)?;
    let type_msg = tape.matmul(type_mass, type_values)?;
    tape.add(node_msg, type_msg)
}

/// `cos(h_q, h_y) / tau` for every query and label, `[Q, m]`.
pub fn logits_on_tape(tape: &mut Tape, state: &TaskState, temperature: f64) -> Result<Var> {
    let sims = tape.cosine_similarity(state.queries, state.labels)?;
    Ok(tape.scale(sims, 1.0 / temperature))
}

/// A task graph with concrete input embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskGraph {
    pub layout: TaskLayout,
    pub prompts: Tensor,
    pub queries: Tensor,
}

/// Embedding matrix after propagation.
#[derive(Clone, Debug, PartialEq)]
pub struct Propagated {
    pub labels: Tensor,
    pub prompts: Tensor,
    pub queries: Tensor,
}

pub fn build_task_graph(
    prompts: &[(Vec<f64>, usize)],
    queries: &[Vec<f64>],
    m: usize,
) -> Result<TaskGraph> {
    let layout = TaskLayout::new(prompts.iter().map(|p| p.1).collect(), queries.len(), m)?;
    let rows: Vec<Vec<f64>> = prompts.iter().map(|p| p.0.clone()).collect();
    let width = rows.first().map_or(0, Vec::len);
    Ok(TaskGraph {
        layout,
        prompts: matrix(&rows, width)?,
        queries: matrix(queries, width)?,
    })
}

fn matrix(rows: &[Vec<f64>], width: usize) -> Result<Tensor> {
    if let Some(r) = rows.iter().find(|r| r.len() != width) {
        return Err(Error::Shape {
            op: "build_task_graph",
            left: vec![rows.len(), width],
            right: vec![r.len()],
        });
    }
    Tensor::new(vec![rows.len(), width], rows.concat())
}

impl TaskGraph {
    pub fn propagate(&self, params: &ModelParams, rounds: usize) -> Result<Propagated> {
        let mut tape = Tape::no_grad();
        let p = tape.constant(self.prompts.clone());
        let q = tape.constant(self.queries.clone());
        let s = propagate_on_tape(&mut tape, params, &self.layout, p, q, rounds)?;
        Ok(Propagated {
            labels: tape.value(s.labels).clone(),
            prompts: tape.value(s.prompts).clone(),
            queries: tape.value(s.queries).clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskPrediction {
    pub similarities: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted: usize,
    pub confidence: f64,
}

/// Predictions from a `[Q, m]` cosine matrix: softmax of `sim / tau`,
/// argmax with ties to the lowest label index.
pub fn predict_from_similarities(sims: &Tensor, temperature: f64) -> Vec<TaskPrediction> {
    (0..sims.rows())
        .map(|i| {
            let s = sims.row(i).to_vec();
            let mut p: Vec<f64> = s.iter().map(|v| v / temperature).collect();
            softmax_in_place(&mut p);
            let predicted = (0..s.len()).fold(0, |best, j| if s[j] > s[best] { j } else { best });
            let confidence = p.iter().cloned().fold(0.0, f64::max);
            TaskPrediction {
                similarities: s,
                probabilities: p,
                predicted,
                confidence,
            }
        })
        .collect()
}

pub fn predict(h: &Propagated, temperature: f64) -> Result<Vec<TaskPrediction>> {
    let mut tape = Tape::no_grad();
    let q = tape.constant(h.queries.clone());
    let l = tape.constant(h.labels.clone());
    let sims = tape.cosine_similarity(q, l)?;
    Ok(predict_from_similarities(tape.value(sims), temperature))
}
