//! Per-category instance memory: bounded queues of high-quality pseudo-label
//! crops with score-based replacement, feature prototypes, and sampling.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::Serialize;

use crate::backend::FeatureEmbedder;
use crate::core::{crop, CategorySpace, Detection, Image};
use crate::error::{Result, TtaError};
use crate::tensor::l2_norm;

/// A stored instance: crop, unit feature vector, score in `(0, 1]`, its
/// category, and the stream step it was harvested at.
#[derive(Debug, Clone)]
pub struct MemoryTriplet {
    pub crop: Image,
    pub feat: Vec<f64>,
    pub score: f64,
    pub category: usize,
    pub source_step: u64,
}

/// Bounded queue for one category. Starts empty; once full, a new triplet
/// only enters by evicting a strictly lower-scoring one.
#[derive(Debug, Clone)]
pub struct DynamicQueue {
    items: Vec<MemoryTriplet>,
    capacity: usize,
}

impl DynamicQueue {
    pub fn new(capacity: usize) -> Self {
        DynamicQueue {
            items: Vec::new(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn items(&self) -> &[MemoryTriplet] {
        &self.items
    }

    pub fn min_score(&self) -> Option<f64> {
        self.items.iter().map(|t| t.score).reduce(f64::min)
    }

    /// Insert under the replace-lowest rule. Ties keep the incumbent; among
    /// several minimum-score entries the oldest (smallest `source_step`)
    /// is evicted.
    pub fn insert(&mut self, triplet: MemoryTriplet) -> bool {
        if self.items.len() < self.capacity {
            self.items.push(triplet);
            return true;
        }
        let mut min_idx: Option<usize> = None;
        for (i, t) in self.items.iter().enumerate() {
            match min_idx {
                None => min_idx = Some(i),
                Some(j) => {
                    let cur = &self.items[j];
                    if t.score < cur.score
                        || (t.score == cur.score && t.source_step < cur.source_step)
                    {
                        min_idx = Some(i);
                    }
                }
            }
        }
        match min_idx {
            Some(j) if triplet.score > self.items[j].score => {
                self.items[j] = triplet;
                true
            }
            _ => false,
        }
    }
}

/// All per-category queues plus a counter of crops skipped as degenerate.
#[derive(Debug, Clone)]
pub struct InstanceMemory {
    queues: Vec<DynamicQueue>,
    skipped_degenerate: u64,
}

impl InstanceMemory {
    pub fn new(num_categories: usize, capacity: usize) -> Self {
        InstanceMemory {
            queues: (0..num_categories)
                .map(|_| DynamicQueue::new(capacity))
                .collect(),
            skipped_degenerate: 0,
        }
    }

    pub fn queue(&self, category: usize) -> &DynamicQueue {
        &self.queues[category]
    }

    pub fn queue_mut(&mut self, category: usize) -> &mut DynamicQueue {
        &mut self.queues[category]
    }

    pub fn num_categories(&self) -> usize {
        self.queues.len()
    }

    pub fn total_len(&self) -> usize {
        self.queues.iter().map(DynamicQueue::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_len() == 0
    }

    pub fn occupancy(&self) -> Vec<usize> {
        self.queues.iter().map(DynamicQueue::len).collect()
    }

    pub fn skipped_degenerate(&self) -> u64 {
        self.skipped_degenerate
    }

    /// Crop, embed, and insert every pseudo-label whose score strictly
    /// exceeds `th_pl`. Degenerate crops are counted and skipped. Scores
    /// above 1 (possible after enhancement) are stored clamped to 1.
    pub fn harvest(
        &mut self,
        image: &Image,
        pseudo_labels: &[Detection],
        embedder: &dyn FeatureEmbedder,
        th_pl: f64,
        source_step: u64,
    ) -> Result<Vec<MemoryTriplet>> {
        let mut inserted = Vec::new();
        for det in pseudo_labels {
            if det.score <= th_pl {
                continue;
            }
            if det.label >= self.queues.len() {
                return Err(TtaError::Invalid(format!(
                    "detection label {} outside memory of {} categories",
                    det.label,
                    self.queues.len()
                )));
            }
            let instance = match crop(image, &det.box_) {
                Ok(c) => c,
                Err(TtaError::DegenerateBox) => {
                    self.skipped_degenerate += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let feat = embedder.embed(&instance)?;
            let triplet = MemoryTriplet {
                crop: instance,
                feat,
                score: det.score.min(1.0),
                category: det.label,
                source_step,
            };
            if self.queues[det.label].insert(triplet.clone()) {
                inserted.push(triplet);
            }
        }
        Ok(inserted)
    }

    /// Renormalized mean feature per non-empty category. Categories whose
    /// mean collapses to (numerically) zero are omitted, since no direction
    /// can be recovered from them.
    pub fn prototypes(&self) -> BTreeMap<usize, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (c, q) in self.queues.iter().enumerate() {
            if q.is_empty() {
                continue;
            }
            let dim = q.items()[0].feat.len();
            let mut mean = vec![0.0; dim];
            for t in q.items() {
                for (m, f) in mean.iter_mut().zip(&t.feat) {
                    *m += f;
                }
            }
            let inv = 1.0 / q.len() as f64;
            for m in &mut mean {
                *m *= inv;
            }
            let norm = l2_norm(&mean);
            if norm < 1e-9 {
                continue;
            }
            for m in &mut mean {
                *m /= norm;
            }
            out.insert(c, mean);
        }
        out
    }

    /// `k` triplets drawn uniformly with replacement from the union of all
    /// queues. Empty memory yields an empty list.
    pub fn sample(&self, k: usize, rng: &mut impl Rng) -> Vec<MemoryTriplet> {
        let total = self.total_len();
        if total == 0 {
            return Vec::new();
        }
        let flat: Vec<&MemoryTriplet> = self.queues.iter().flat_map(|q| q.items()).collect();
        (0..k)
            .map(|_| flat[rng.random_range(0..total)].clone())
            .collect()
    }

    /// Dump the memory for inspection: one directory per category holding
    /// the crops as PNG files plus a JSON-lines index with features, scores,
    /// and source steps.
    pub fn dump(&self, dir: &Path, categories: &CategorySpace) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| TtaError::io(dir, e))?;
        for (c, q) in self.queues.iter().enumerate() {
            let sub = dir.join(categories.name(c));
            fs::create_dir_all(&sub).map_err(|e| TtaError::io(&sub, e))?;
            let mut index = String::new();
            for (i, t) in q.items().iter().enumerate() {
                let file = format!("{i:03}.png");
                crate::data::write_png(&sub.join(&file), &t.crop)?;
                let entry = DumpEntry {
                    file: &file,
                    score: t.score,
                    source_step: t.source_step,
                    feat: &t.feat,
                };
                index.push_str(&serde_json::to_string(&entry).expect("serializable"));
                index.push('\n');
            }
            let index_path = sub.join("index.jsonl");
            fs::write(&index_path, index).map_err(|e| TtaError::io(&index_path, e))?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct DumpEntry<'a> {
    file: &'a str,
    score: f64,
    source_step: u64,
    feat: &'a [f64],
}
