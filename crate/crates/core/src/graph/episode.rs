//! Few-shot episode specification and sampling of candidate/query pools.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use super::{ClassId, Graph, InputPoint, LabeledPoint, TaskKind};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    /// Classes per episode (m).
    pub ways: usize,
    /// Prompts per class (k).
    pub shots: usize,
    /// Candidate prompts per class (N).
    pub candidates: usize,
    /// Queries per episode (n).
    pub queries: usize,
    /// Data-graph radius (l).
    pub hops: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            ways: 5,
            shots: 3,
            candidates: 10,
            queries: 4,
            hops: 1,
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidEpisode(m));
        if self.ways < 2 {
            return fail(format!("need at least 2 ways, got {}", self.ways));
        }
        if self.shots == 0 {
            return fail("shots must be positive".into());
        }
        if self.shots > self.candidates {
            return fail(format!(
                "shots {} exceed candidates {}",
                self.shots, self.candidates
            ));
        }
        if self.queries == 0 {
            return fail("queries must be positive".into());
        }
        if self.hops == 0 {
            return fail("hops must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Test,
}

impl Partition {
    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Test => "test",
        }
    }
}

/// Labeled points of one task kind, split per class into a train and a test
/// half. Within each class the sorted points alternate: even positions go to
/// train, odd positions to test.
#[derive(Clone, Debug, PartialEq)]
pub struct PointPool {
    kind: TaskKind,
    train: BTreeMap<ClassId, Vec<InputPoint>>,
    test: BTreeMap<ClassId, Vec<InputPoint>>,
}

impl PointPool {
    pub fn new(g: &Graph, kind: TaskKind) -> Self {
        let mut train = BTreeMap::new();
        let mut test = BTreeMap::new();
        for (c, pts) in g.points_by_class(kind) {
            let (tr, te): (Vec<_>, Vec<_>) = pts.iter().enumerate().partition(|(i, _)| i % 2 == 0);
            train.insert(c, tr.into_iter().map(|(_, p)| *p).collect());
            test.insert(c, te.into_iter().map(|(_, p)| *p).collect());
        }
        Self { kind, train, test }
    }

    /// Keeps only the listed classes.
    pub fn restrict(mut self, keep: impl Fn(ClassId) -> bool) -> Self {
        self.train.retain(|c, _| keep(*c));
        self.test.retain(|c, _| keep(*c));
        self
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.train.keys().copied().collect()
    }

    pub fn points(&self, class: ClassId, partition: Partition) -> &[InputPoint] {
        let map = match partition {
            Partition::Train => &self.train,
            Partition::Test => &self.test,
        };
        map.get(&class).map_or(&[], Vec::as_slice)
    }
}

/// Draws `m` distinct classes uniformly; the result keeps draw order.
pub fn draw_classes(pool: &[ClassId], m: usize, rng: &mut StreamRng) -> Result<Vec<ClassId>> {
    if pool.len() < m {
        return Err(Error::InvalidEpisode(format!(
            "{m} ways requested but only {} classes available",
            pool.len()
        )));
    }
    Ok(pool.choose_multiple(rng, m).copied().collect())
}

/// Candidates and queries for one episode. Query labels are positions in
/// `classes`, not global class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodePool {
    pub classes: Vec<ClassId>,
    pub candidates: Vec<Vec<InputPoint>>,
    pub queries: Vec<LabeledPoint>,
}

/// Samples `spec.candidates` points per class from the train partition and
/// `spec.queries` queries from `query_partition`. Query `j` belongs to class
/// `classes[j % m]`. Points already used as candidates are never queries.
pub fn split_episode_pool(
    pool: &PointPool,
    spec: &EpisodeSpec,
    classes: &[ClassId],
    query_partition: Partition,
    rng: &mut StreamRng,
) -> Result<EpisodePool> {
    spec.validate()?;
    if classes.len() != spec.ways {
        return Err(Error::InvalidEpisode(format!(
            "{} classes given for a {}-way episode",
            classes.len(),
            spec.ways
        )));
    }
    let m = classes.len();
    let mut candidates = Vec::with_capacity(m);
    let mut query_sources = Vec::with_capacity(m);
    for (local, &c) in classes.iter().enumerate() {
        let train = pool.points(c, Partition::Train);
        if train.len() < spec.candidates {
            return Err(Error::InsufficientPoints {
                class: c,
                partition: Partition::Train.name(),
                needed: spec.candidates,
                available: train.len(),
            });
        }
        let chosen: Vec<InputPoint> = train
            .choose_multiple(rng, spec.candidates)
            .copied()
            .collect();
        let needed = spec.queries / m + usize::from(local < spec.queries % m);
        let mut remaining: Vec<InputPoint> = pool
            .points(c, query_partition)
            .iter()
            .filter(|p| !chosen.contains(p))
            .copied()
            .collect();
        if remaining.len() < needed.max(1) {
            return Err(Error::InsufficientPoints {
                class: c,
                partition: query_partition.name(),
                needed: needed.max(1),
                available: remaining.len(),
            });
        }
        remaining.shuffle(rng);
        remaining.truncate(needed);
        candidates.push(chosen);
        query_sources.push(remaining);
    }
    let queries = (0..spec.queries)
        .map(|j| LabeledPoint {
            point: query_sources[j % m][j / m],
            label: j % m,
        })
        .collect();
    Ok(EpisodePool {
        classes: classes.to_vec(),
        candidates,
        queries,
    })
}
