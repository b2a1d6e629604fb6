//! Label-guided pair sampling and positive-set construction.
//!
//! A batch of `N` anchors is drawn uniformly without replacement, then every
//! anchor receives a partner that shares at least one label with it. The
//! `2N` examples are laid out anchors first, partners second, so slot `i`
//! pairs with slot `i + N`.
//!
//! # RNG sequence
//!
//! Given a seed, [`sample_paired_batch`] consumes a `ChaCha8Rng` seeded with
//! `seed_from_u64(seed)` in exactly this order:
//!
//! 1. `rand::seq::index::sample(rng, pool_len, N)`; the anchors are the
//!    returned indices in iteration order.
//! 2. For each anchor in order, the candidates are all examples carrying
//!    any of the anchor's labels, ascending by index, with the anchor
//!    removed. If that leaves nothing, the anchor is its own partner and no
//!    number is drawn. Otherwise the partner is
//!    `candidates[rng.random_range(0..candidates.len())]`.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{LabelSet, LabeledExample};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SamplingError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("example {index} has an empty label set")]
    EmptyLabelSet { index: usize },
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("batch size {batch} exceeds the {available} available examples")]
    BatchTooLarge { batch: usize, available: usize },
    #[error("single-label mode given example at batch slot {slot} with {count} labels")]
    ModeMismatch { slot: usize, count: usize },
}

/// How positives are decided between two label sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// Exact label-set equality.
    Single,
    /// Non-empty intersection.
    Multi,
}

impl LabelMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelMode::Single => "single",
            LabelMode::Multi => "multi",
        }
    }
}

impl std::str::FromStr for LabelMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(LabelMode::Single),
            "multi" => Ok(LabelMode::Multi),
            other => Err(format!("unknown label mode `{other}` (expected single|multi)")),
        }
    }
}

/// Label id → ascending indices of the examples carrying it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelIndex {
    by_label: BTreeMap<u32, Vec<usize>>,
    len: usize,
}

impl LabelIndex {
    pub fn get(&self, label: u32) -> &[usize] {
        self.by_label.get(&label).map_or(&[], Vec::as_slice)
    }

    pub fn labels(&self) -> impl Iterator<Item = u32> + '_ {
        self.by_label.keys().copied()
    }

    pub fn as_map(&self) -> &BTreeMap<u32, Vec<usize>> {
        &self.by_label
    }

    /// Number of indexed examples.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Ascending indices sharing at least one label with `labels`.
    pub fn sharing(&self, labels: &LabelSet) -> Vec<usize> {
        let mut set = BTreeSet::new();
        for l in labels.iter() {
            set.extend(self.get(l).iter().copied());
        }
        set.into_iter().collect()
    }
}

pub fn build_label_index(dataset: &[LabeledExample]) -> Result<LabelIndex, SamplingError> {
    if dataset.is_empty() {
        return Err(SamplingError::EmptyDataset);
    }
    let mut by_label: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, ex) in dataset.iter().enumerate() {
        if ex.labels.is_empty() {
            return Err(SamplingError::EmptyLabelSet { index: i });
        }
        for l in ex.labels.iter() {
            by_label.entry(l).or_default().push(i);
        }
    }
    Ok(LabelIndex {
        by_label,
        len: dataset.len(),
    })
}

/// `2N` dataset indices laid out as anchors then partners.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairedBatch {
    indices: Vec<usize>,
    labels: Vec<LabelSet>,
    fallback_count: usize,
}

impl PairedBatch {
    /// Builds a batch from explicit anchor and partner indices. Used by the
    /// sampler and by tests that need a hand-made layout.
    pub fn from_pairs(
        dataset: &[LabeledExample],
        anchors: &[usize],
        partners: &[usize],
        fallback_count: usize,
    ) -> Self {
        assert_eq!(anchors.len(), partners.len());
        let indices: Vec<usize> = anchors.iter().chain(partners).copied().collect();
        let labels = indices.iter().map(|&i| dataset[i].labels.clone()).collect();
        Self {
            indices,
            labels,
            fallback_count,
        }
    }

    /// Batch over explicit label sets with no backing dataset; indices are
    /// the slot numbers.
    pub fn from_labels(labels: Vec<LabelSet>) -> Self {
        assert!(labels.len() % 2 == 0, "paired batch needs an even length");
        Self {
            indices: (0..labels.len()).collect(),
            labels,
            fallback_count: 0,
        }
    }

    /// `N`, the number of anchors.
    pub fn half(&self) -> usize {
        self.indices.len() / 2
    }

    /// `2N`.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn anchors(&self) -> &[usize] {
        &self.indices[..self.half()]
    }

    pub fn partners(&self) -> &[usize] {
        &self.indices[self.half()..]
    }

    pub fn labels(&self) -> &[LabelSet] {
        &self.labels
    }

    pub fn fallback_count(&self) -> usize {
        self.fallback_count
    }

    /// Exchanges the two halves, so anchors become partners and back.
    pub fn swapped(&self) -> Self {
        let n = self.half();
        let rotate = |v: &[usize]| v[n..].iter().chain(&v[..n]).copied().collect::<Vec<_>>();
        let labels = self.labels[n..]
            .iter()
            .chain(&self.labels[..n])
            .cloned()
            .collect();
        Self {
            indices: rotate(&self.indices),
            labels,
            fallback_count: self.fallback_count,
        }
    }

    pub fn examples<'a>(
        &'a self,
        dataset: &'a [LabeledExample],
    ) -> impl Iterator<Item = &'a LabeledExample> + 'a {
        self.indices.iter().map(move |&i| &dataset[i])
    }
}

pub fn sample_paired_batch(
    dataset: &[LabeledExample],
    index: &LabelIndex,
    batch: usize,
    seed: u64,
) -> Result<PairedBatch, SamplingError> {
    if batch == 0 {
        return Err(SamplingError::ZeroBatch);
    }
    if dataset.len() < batch {
        return Err(SamplingError::BatchTooLarge {
            batch,
            available: dataset.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors: Vec<usize> = index::sample(&mut rng, dataset.len(), batch).into_iter().collect();
    let mut partners = Vec::with_capacity(batch);
    let mut fallback_count = 0;
    for &a in &anchors {
        let mut candidates = index.sharing(&dataset[a].labels);
        candidates.retain(|&c| c != a);
        if candidates.is_empty() {
            partners.push(a);
            fallback_count += 1;
        } else {
            partners.push(candidates[rng.random_range(0..candidates.len())]);
        }
    }
    Ok(PairedBatch::from_pairs(dataset, &anchors, &partners, fallback_count))
}

/// Square boolean matrix of positive pairs; the diagonal is always false.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositiveMask {
    size: usize,
    bits: Vec<bool>,
}

impl PositiveMask {
    /// Builds a mask from explicit entries. Unlike [`positive_mask`], this
    /// does not clear the diagonal; the losses reject such masks.
    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(size * size);
        for i in 0..size {
            for p in 0..size {
                bits.push(f(i, p));
            }
        }
        Self { size, bits }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, i: usize, p: usize) -> bool {
        self.bits[i * self.size + p]
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.bits[i * self.size..(i + 1) * self.size]
            .iter()
            .filter(|b| **b)
            .count()
    }

    pub fn has_diagonal(&self) -> bool {
        (0..self.size).any(|i| self.get(i, i))
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.size).all(|i| (0..i).all(|p| self.get(i, p) == self.get(p, i)))
    }

    /// Same mask with every diagonal entry set.
    pub fn with_diagonal(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.size {
            out.bits[i * self.size + i] = true;
        }
        out
    }

    /// Positive pairs `(i, p)` in row-major order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        (0..self.size)
            .flat_map(|i| (0..self.size).map(move |p| (i, p)))
            .filter(|&(i, p)| self.get(i, p))
            .collect()
    }

    /// Same mask with rows and columns reordered: entry `(a, b)` of the
    /// result is entry `(perm[a], perm[b])` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self::from_fn(self.size, |a, b| self.get(perm[a], perm[b]))
    }
}

/// Positive mask over a batch's label sets.
pub fn positive_mask(batch: &PairedBatch, mode: LabelMode) -> Result<PositiveMask, SamplingError> {
    mask_from_labels(batch.labels(), mode)
}

pub fn mask_from_labels(labels: &[LabelSet], mode: LabelMode) -> Result<PositiveMask, SamplingError> {
    if mode == LabelMode::Single {
        if let Some((slot, l)) = labels.iter().enumerate().find(|(_, l)| l.len() > 1) {
            return Err(SamplingError::ModeMismatch {
                slot,
                count: l.len(),
            });
        }
    }
    Ok(PositiveMask::from_fn(labels.len(), |i, p| {
        i != p
            && match mode {
                LabelMode::Single => labels[i] == labels[p],
                LabelMode::Multi => labels[i].intersects(&labels[p]),
            }
    }))
}
