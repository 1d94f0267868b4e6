//! Prompt selection: learned importance, kNN similarity to the queries and
//! per-class query voting.

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::mlp2;
use crate::rng::StreamRng;
use crate::tensor::{cosine, ModelParams, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectorMode {
    #[default]
    Adaptive,
    Random,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    /// Negated Euclidean distance.
    Euclidean,
    /// Negated Manhattan distance.
    Manhattan,
}

/// `sigmoid(MLP_theta(G))` for each row of `emb` (`[B, H]`), as `[B, 1]`.
pub fn importance(tape: &mut Tape, params: &ModelParams, emb: Var) -> Result<Var> {
    let z = mlp2(tape, params, "select", emb)?;
    Ok(tape.sigmoid(z))
}

/// Importance of a single embedding and the weighted embedding `I * G`.
pub fn compute_importance(emb: &[f64], params: &ModelParams) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::no_grad();
    let x = tape.constant(Tensor::new(vec![1, emb.len()], emb.to_vec())?);
    let i = importance(&mut tape, params, x)?;
    let imp = tape.value(i).item();
    Ok((imp, emb.iter().map(|v| v * imp).collect()))
}

/// Similarity of every candidate (rows) to every query (columns).
pub fn knn_similarity(
    candidates: &[Vec<f64>],
    queries: &[Vec<f64>],
    metric: Metric,
) -> Vec<Vec<f64>> {
    candidates
        .iter()
        .map(|c| queries.iter().map(|q| similarity(c, q, metric)).collect())
        .collect()
}

pub fn similarity(a: &[f64], b: &[f64], metric: Metric) -> f64 {
    match metric {
        Metric::Cosine => cosine(a, b),
        Metric::Euclidean => -a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt(),
        Metric::Manhattan => -a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>(),
    }
}

/// Candidate-query score: similarity plus the product of importances.
pub fn score(sim: f64, ip: f64, iq: f64) -> f64 {
    sim + ip * iq
}

/// Chosen prompts per class, as indices into the candidate list.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    pub chosen: Vec<Vec<usize>>,
    /// Vote total per candidate; zero for random selection.
    pub votes: Vec<f64>,
}

impl SelectionResult {
    pub fn all(&self) -> Vec<usize> {
        self.chosen.iter().flatten().copied().collect()
    }
}

/// Indices of the `k` largest values, highest first; ties go to the lower
/// index.
pub fn top_k(items: &[usize], value: impl Fn(usize) -> f64, k: usize) -> Vec<usize> {
    let mut order = items.to_vec();
    order.sort_by(|&a, &b| value(b).total_cmp(&value(a)).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Per class, every query picks its top-`k` candidates of that class by
/// score and adds the score to their vote totals; the class keeps its `k`
/// candidates with the largest totals. `scores[p][q]` is candidate `p`
/// against query `q`; `classes[c]` lists the candidate indices of class `c`.
pub fn vote_select(
    scores: &[Vec<f64>],
    classes: &[Vec<usize>],
    k: usize,
) -> Result<SelectionResult> {
    check_budget(classes, k)?;
    let mut votes = vec![0.0; scores.len()];
    let n_queries = scores.first().map_or(0, Vec::len);
    let mut chosen = Vec::with_capacity(classes.len());
    for members in classes {
        for q in 0..n_queries {
            for p in top_k(members, |p| scores[p][q], k) {
                votes[p] += scores[p][q];
            }
        }
        chosen.push(top_k(members, |p| votes[p], k));
    }
    Ok(SelectionResult { chosen, votes })
}

/// Uniform choice of `k` candidates per class without replacement.
pub fn random_select(
    classes: &[Vec<usize>],
    k: usize,
    rng: &mut StreamRng,
) -> Result<SelectionResult> {
    check_budget(classes, k)?;
    let chosen = classes
        .iter()
        .map(|members| members.choose_multiple(rng, k).copied().collect())
        .collect();
    let n = classes.iter().flatten().max().map_or(0, |&m| m + 1);
    Ok(SelectionResult {
        chosen,
        votes: vec![0.0; n],
    })
}

fn check_budget(classes: &[Vec<usize>], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be positive".into()));
    }
    if let Some((c, m)) = classes.iter().enumerate().find(|(_, m)| m.len() < k) {
        return Err(Error::InvalidEpisode(format!(
            "class {c} has {} candidates, {k} needed",
            m.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::rng::stream;

    #[test]
    fn score_substitutions() {
        assert!((score(0.5, 0.8, 0.5) - 0.9).abs() < 1e-15);
        assert!((score(-1.0, 0.5, 0.5) + 0.75).abs() < 1e-15);
    }

    #[test]
    fn importance_follows_output_bias() {
        let cfg = ModelConfig::new(2, 1);
        let mut params = init_params(&cfg, 0).unwrap();
        let h = cfg.embedding_dim;
        params.set("select.w2", Tensor::zeros(&[h, 1])).unwrap();
        let emb = vec![0.3; h];
        assert_eq!(compute_importance(&emb, &params).unwrap().0, 0.5);
        params.set("select.b2", Tensor::vector(vec![1.0])).unwrap();
        let (i1, weighted) = compute_importance(&emb, &params).unwrap();
        assert!((i1 - 0.7310585786300049).abs() < 1e-15);
        assert!((weighted[0] - 0.3 * i1).abs() < 1e-15);
        params.set("select.b2", Tensor::vector(vec![2.0])).unwrap();
        let i2 = compute_importance(&emb, &params).unwrap().0;
        assert!((i2 - 0.8807970779778823).abs() < 1e-15);
    }

    #[test]
    fn single_query_vote_is_argmax() {
        let scores = vec![vec![0.1], vec![0.7], vec![0.3]];
        let r = vote_select(&scores, &[vec![0, 1, 2]], 1).unwrap();
        assert_eq!(r.chosen, vec![vec![1]]);
    }

    #[test]
    fn equal_scores_take_lowest_indices() {
        let scores = vec![vec![0.5, 0.5]; 4];
        let r = vote_select(&scores, &[vec![3, 1, 2, 0]], 2).unwrap();
        assert_eq!(r.chosen, vec![vec![0, 1]]);
    }

    #[test]
    fn too_few_candidates_rejected() {
        assert!(vote_select(&[vec![1.0]], &[vec![0]], 2).is_err());
        assert!(random_select(&[vec![0]], 2, &mut stream(0, &[])).is_err());
    }

    #[test]
    fn random_full_budget_takes_everything() {
        let mut r = random_select(&[vec![0, 1, 2]], 3, &mut stream(1, &[])).unwrap();
        r.chosen[0].sort_unstable();
        assert_eq!(r.chosen, vec![vec![0, 1, 2]]);
    }

    #[test]
    fn orthogonal_similarity_is_zero() {
        let s = knn_similarity(
            &[vec![1.0, 0.0]],
            &[vec![0.0, 1.0], vec![2.0, 0.0]],
            Metric::Cosine,
        );
        assert_eq!(s, vec![vec![0.0, 1.0]]);
    }
}
