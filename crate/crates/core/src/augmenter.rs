//! Fixed-capacity LFU cache of confidently pseudo-labeled queries, used to
//! extend the selected prompt set at test time.
//!
//! Not thread-safe: the inference loop is the single writer.

use serde::{Deserialize, Serialize};

use crate::graph::ClassId;
use crate::tensor::cosine;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheConfig {
    /// Maximum number of entries; 0 disables the cache.
    pub capacity: usize,
    /// Predictions below this confidence are never admitted.
    pub admit_confidence_floor: f64,
    /// Entries counted as hits per query.
    pub touch_k: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            capacity: 3,
            admit_confidence_floor: 0.5,
            touch_k: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub embedding: Vec<f64>,
    /// Global class id predicted for the query.
    pub label: ClassId,
    pub confidence: f64,
    pub frequency: u64,
    pub last_touch: u64,
}

/// A prediction offered to the cache.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub embedding: Vec<f64>,
    pub label: ClassId,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptCache {
    config: CacheConfig,
    entries: Vec<CacheEntry>,
    tick: u64,
}

impl PromptCache {
    pub fn new(config: CacheConfig) -> Self {
        Self {
            config,
            entries: Vec::new(),
            tick: 0,
        }
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.tick = 0;
    }

    fn next_tick(&mut self) -> u64 {
        self.tick += 1;
        self.tick
    }

    /// Inserts one entry with frequency 1, evicting the least frequently
    /// used entry (oldest last touch among equals) when full. Returns the
    /// evicted entry.
    pub fn admit(
        &mut self,
        embedding: Vec<f64>,
        label: ClassId,
        confidence: f64,
    ) -> Option<CacheEntry> {
        if self.config.capacity == 0 {
            return None;
        }
        let evicted = if self.entries.len() >= self.config.capacity {
            let victim = self
                .entries
                .iter()
                .enumerate()
                .min_by_key(|(_, e)| (e.frequency, e.last_touch))
                .map(|(i, _)| i)
                .expect("full cache is non-empty");
            Some(self.entries.remove(victim))
        } else {
            None
        };
        let tick = self.next_tick();
        self.entries.push(CacheEntry {
            embedding,
            label,
            confidence,
            frequency: 1,
            last_touch: tick,
        });
        evicted
    }

    /// Admits, per predicted class, the most confident candidate whose
    /// confidence reaches the floor (ties go to the earlier candidate).
    /// Admissions happen in candidate order. Returns the admitted indices.
    pub fn admit_batch(&mut self, candidates: &[Candidate]) -> Vec<usize> {
        if self.config.capacity == 0 {
            return Vec::new();
        }
        let mut best: Vec<(ClassId, usize)> = Vec::new();
        for (i, c) in candidates.iter().enumerate() {
            if !(c.confidence >= self.config.admit_confidence_floor) {
                continue;
            }
            match best.iter_mut().find(|(label, _)| *label == c.label) {
                Some(slot) => {
                    if c.confidence > candidates[slot.1].confidence {
                        slot.1 = i;
                    }
                }
                None => best.push((c.label, i)),
            }
        }
        let mut admitted: Vec<usize> = best.into_iter().map(|(_, i)| i).collect();
        admitted.sort_unstable();
        for &i in &admitted {
            let c = &candidates[i];
            self.admit(c.embedding.clone(), c.label, c.confidence);
        }
        admitted
    }

    /// For each query, the `touch_k` entries most similar by cosine (ties to
    /// the lower entry position) gain one use and a fresh tick.
    pub fn touch(&mut self, queries: &[Vec<f64>]) {
        self.touch_k(queries, self.config.touch_k);
    }

    pub fn touch_k(&mut self, queries: &[Vec<f64>], k: usize) {
        for q in queries {
            let sims: Vec<f64> = self
                .entries
                .iter()
                .map(|e| cosine(&e.embedding, q))
                .collect();
            let positions: Vec<usize> = (0..self.entries.len()).collect();
            for i in crate::selector::top_k(&positions, |i| sims[i], k) {
                let tick = self.next_tick();
                let e = &mut self.entries[i];
                e.frequency += 1;
                e.last_touch = tick;
            }
        }
    }

    /// Entries whose label is one of `classes`, paired with the label's
    /// position in `classes`.
    pub fn matching<'a>(
        &'a self,
        classes: &'a [ClassId],
    ) -> impl Iterator<Item = (usize, &'a CacheEntry)> + 'a {
        self.entries
            .iter()
            .filter_map(move |e| classes.iter().position(|&c| c == e.label).map(|p| (p, e)))
    }
}

/// A prompt in the final set: either a selected candidate or a cache entry.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPrompt {
    pub embedding: Vec<f64>,
    /// Position of the prompt's class in the episode class list.
    pub class: usize,
    /// Candidate index for selected prompts, `None` for cache entries.
    pub candidate: Option<usize>,
}

/// Union of the selected prompts and the cache entries whose pseudo-label
/// belongs to the episode. Selected prompts come first, in order.
pub fn augment_prompt_set(
    selected: Vec<AugmentedPrompt>,
    cache: &PromptCache,
    classes: &[ClassId],
) -> Vec<AugmentedPrompt> {
    let mut out = selected;
    out.extend(cache.matching(classes).map(|(class, e)| AugmentedPrompt {
        embedding: e.embedding.clone(),
        class,
        candidate: None,
    }));
    out
}
