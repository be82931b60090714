//! Batch planning for multi-domain training.
//!
//! The balanced planner builds every batch from N sub-batches, one per
//! source; each sub-batch is half source-i items and half target items, and
//! all sub-batches of a batch share the same target half. Each domain is read
//! from its own shuffled cycle that reshuffles when it wraps.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{DomainDataset, Mask};
use crate::error::{Error, Result};
use crate::scalar::{cst, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubBatch {
    /// 1-based source index.
    pub source_index: usize,
    pub source_items: Vec<String>,
    pub target_items: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub sub_batches: Vec<SubBatch>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.sub_batches.iter().map(|s| s.source_items.len() + s.target_items.len()).sum()
    }

    /// Target half of the first sub-batch; the whole target half when it is
    /// shared.
    pub fn target_items(&self) -> &[String] {
        self.sub_batches.first().map(|s| s.target_items.as_slice()).unwrap_or(&[])
    }

    /// True when every sub-batch carries the same target items.
    pub fn shares_target(&self) -> bool {
        self.sub_batches.windows(2).all(|w| w[0].target_items == w[1].target_items)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochPlan {
    pub batches: Vec<Batch>,
    pub steps_per_epoch: usize,
    pub seed: u64,
    pub epoch_index: usize,
}

fn mix(mut h: u64, v: u64) -> u64 {
    // splitmix64 finaliser over the running state
    h ^= v.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
    let mut z = h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Endless stream over `n` indices in shuffled cycles.
struct Cycle {
    n: usize,
    key: u64,
    cycle: u64,
    perm: Vec<usize>,
    pos: usize,
}

impl Cycle {
    fn new(n: usize, seed: u64, epoch: usize, stream: u64) -> Self {
        let key = mix(mix(mix(0x6d73_6174_6c00_0000, seed), epoch as u64), stream);
        let mut c = Self { n, key, cycle: 0, perm: Vec::new(), pos: 0 };
        c.reshuffle();
        c
    }

    fn reshuffle(&mut self) {
        self.perm = (0..self.n).collect();
        self.perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.key, self.cycle)));
        self.pos = 0;
    }

    fn next(&mut self) -> usize {
        if self.pos == self.n {
            self.cycle += 1;
            self.reshuffle();
        }
        self.pos += 1;
        self.perm[self.pos - 1]
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        (0..k).map(|_| self.next()).collect()
    }
}

fn ids(ds: &DomainDataset, idx: Vec<usize>) -> Vec<String> {
    idx.into_iter().map(|i| ds.samples[i].sample_id.clone()).collect()
}

fn check_n_sb(n_sb: usize) -> Result<()> {
    if n_sb < 2 || !n_sb.is_multiple_of(2) {
        return Err(Error::Config(format!("sub-batch size {n_sb} must be even and at least 2")));
    }
    Ok(())
}

/// Balanced plan: `ceil(max_i n_si / (n_sb/2))` steps, so the largest source
/// is covered once per epoch (its last batch may wrap into a fresh cycle).
pub fn plan_epoch(
    sources: &[DomainDataset],
    target_train: &DomainDataset,
    n_sb: usize,
    epoch_index: usize,
    seed: u64,
) -> Result<EpochPlan> {
    check_n_sb(n_sb)?;
    if sources.is_empty() {
        return Err(Error::Config("no source domains".into()));
    }
    if let Some(d) = sources.iter().chain(std::iter::once(target_train)).find(|d| d.is_empty()) {
        return Err(Error::Data(format!("domain {} is empty", d.name)));
    }
    let half = n_sb / 2;
    let largest = sources.iter().map(DomainDataset::len).max().unwrap_or(0);
    let steps = largest.div_ceil(half);
    let mut target = Cycle::new(target_train.len(), seed, epoch_index, 0);
    let mut streams: Vec<Cycle> =
        sources.iter().enumerate().map(|(i, s)| Cycle::new(s.len(), seed, epoch_index, i as u64 + 1)).collect();
    let batches = (0..steps)
        .map(|_| {
            let target_items = ids(target_train, target.take(half));
            let sub_batches = streams
                .iter_mut()
                .zip(sources)
                .enumerate()
                .map(|(i, (stream, src))| SubBatch {
                    source_index: i + 1,
                    source_items: ids(src, stream.take(half)),
                    target_items: target_items.clone(),
                })
                .collect();
            Batch { sub_batches }
        })
        .collect();
    Ok(EpochPlan { batches, steps_per_epoch: steps, seed, epoch_index })
}

/// Naive baseline: all domains pooled and cut into uniform batches of
/// `batch_size`, with no per-domain balance. Source items land in the
/// sub-batch of their own domain. Target items are dealt round-robin to the
/// sub-batches, so no two sub-networks see the same target item in a step.
pub fn plan_mixed_epoch(
    sources: &[DomainDataset],
    target_train: &DomainDataset,
    batch_size: usize,
    epoch_index: usize,
    seed: u64,
) -> Result<EpochPlan> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if sources.is_empty() {
        return Err(Error::Config("no source domains".into()));
    }
    let mut pool: Vec<(usize, usize)> = Vec::new();
    for (d, ds) in std::iter::once(target_train).chain(sources).enumerate() {
        if ds.is_empty() {
            return Err(Error::Data(format!("domain {} is empty", ds.name)));
        }
        pool.extend((0..ds.len()).map(|i| (d, i)));
    }
    let steps = pool.len().div_ceil(batch_size);
    let mut cycle = Cycle::new(pool.len(), seed, epoch_index, u64::MAX);
    let batches = (0..steps)
        .map(|_| {
            let drawn: Vec<(usize, usize)> = cycle.take(batch_size).into_iter().map(|k| pool[k]).collect();
            let mut dealt = vec![Vec::new(); sources.len()];
            for (k, &(_, i)) in drawn.iter().filter(|(d, _)| *d == 0).enumerate() {
                dealt[k % sources.len()].push(target_train.samples[i].sample_id.clone());
            }
            let sub_batches = sources
                .iter()
                .enumerate()
                .map(|(si, src)| SubBatch {
                    source_index: si + 1,
                    source_items: drawn
                        .iter()
                        .filter(|(d, _)| *d == si + 1)
                        .map(|&(_, i)| src.samples[i].sample_id.clone())
                        .collect(),
                    target_items: std::mem::take(&mut dealt[si]),
                })
                .collect();
            Batch { sub_batches }
        })
        .collect();
    Ok(EpochPlan { batches, steps_per_epoch: steps, seed, epoch_index })
}

/// Target-only plan: `steps` batches of `n_sb` items cycled over the labeled
/// target samples, carried as the target half of a single sub-batch.
pub fn plan_target_only_epoch(
    target_train: &DomainDataset,
    n_sb: usize,
    steps: usize,
    epoch_index: usize,
    seed: u64,
) -> Result<EpochPlan> {
    check_n_sb(n_sb)?;
    let labeled = target_train.subset(target_train.name.clone(), |s| s.labeled);
    if labeled.is_empty() {
        return Err(Error::Data(format!("domain {} has no labeled samples", target_train.name)));
    }
    let mut cycle = Cycle::new(labeled.len(), seed, epoch_index, 0);
    let batches = (0..steps)
        .map(|_| Batch {
            sub_batches: vec![SubBatch {
                source_index: 1,
                source_items: Vec::new(),
                target_items: ids(&labeled, cycle.take(n_sb)),
            }],
        })
        .collect();
    Ok(EpochPlan { batches, steps_per_epoch: steps, seed, epoch_index })
}

/// Expected (source, target) counts in a batch of `n_b` drawn uniformly from
/// a pool mixing `n_s` source and `n_t` target samples.
pub fn naive_mixing_expectation(n_s: usize, n_t: usize, n_b: usize) -> (f64, f64) {
    let total = (n_s + n_t) as f64;
    (n_b as f64 * n_s as f64 / total, n_b as f64 * n_t as f64 / total)
}

/// Arrays for one sub-batch: source items first, then target items.
#[derive(Clone, Debug)]
pub struct SubBatchArrays<T> {
    pub source_index: usize,
    /// `[n_source + n_target, 1, H, W]`.
    pub images: Tensor<T>,
    /// Masks visible to training; absent for unlabeled target items.
    pub masks: Vec<Option<Mask>>,
    /// 1 = source, 0 = target.
    pub domain_labels: Vec<u8>,
    pub labeled: Vec<bool>,
    pub n_source: usize,
    /// The target items are the same in every sub-batch of the batch, so they
    /// go through every sub-network. Otherwise each listed item is a separate
    /// draw seen by this sub-batch's sub-network alone.
    pub shared_target: bool,
}

impl<T: Scalar> SubBatchArrays<T> {
    pub fn n_target(&self) -> usize {
        self.domain_labels.len() - self.n_source
    }

    pub fn source_images(&self) -> Result<Tensor<T>> {
        self.images.slice_batch(0, self.n_source)
    }

    pub fn target_images(&self) -> Result<Tensor<T>> {
        self.images.slice_batch(self.n_source, self.n_target())
    }
}

/// Lookup from sample id to dataset position across several datasets.
pub struct SampleIndex<'a> {
    by_id: HashMap<(usize, &'a str), usize>,
    datasets: Vec<&'a DomainDataset>,
}

impl<'a> SampleIndex<'a> {
    /// `sources[i]` is source `i + 1`; domain 0 is the target.
    pub fn new(sources: &'a [DomainDataset], target: &'a DomainDataset) -> Self {
        let datasets: Vec<&DomainDataset> = std::iter::once(target).chain(sources.iter()).collect();
        let mut by_id = HashMap::new();
        for (d, ds) in datasets.iter().enumerate() {
            for (i, s) in ds.samples.iter().enumerate() {
                by_id.insert((d, s.sample_id.as_str()), i);
            }
        }
        Self { by_id, datasets }
    }

    fn sample(&self, domain: usize, id: &str) -> Result<&'a crate::data::Sample> {
        let i = self.by_id.get(&(domain, id)).ok_or_else(|| Error::DanglingSample(id.to_string()))?;
        Ok(&self.datasets[domain].samples[*i])
    }

    pub fn materialize<T: Scalar>(&self, batch: &Batch) -> Result<Vec<SubBatchArrays<T>>> {
        let shared = batch.shares_target();
        batch.sub_batches.iter().map(|sb| self.materialize_sub(sb, shared)).collect()
    }

    fn materialize_sub<T: Scalar>(&self, sb: &SubBatch, shared_target: bool) -> Result<SubBatchArrays<T>> {
        let mut samples = Vec::new();
        for id in &sb.source_items {
            samples.push((self.sample(sb.source_index, id)?, true));
        }
        for id in &sb.target_items {
            samples.push((self.sample(0, id)?, false));
        }
        let (h, w) = samples
            .first()
            .map(|(s, _)| (s.image.height, s.image.width))
            .unwrap_or((0, 0));
        let mut data = Vec::with_capacity(samples.len() * h * w);
        let mut masks = Vec::new();
        let mut labels = Vec::new();
        let mut labeled = Vec::new();
        for (s, is_source) in &samples {
            if (s.image.height, s.image.width) != (h, w) {
                return Err(Error::Shape(format!(
                    "sample {} is {}x{}, batch is {h}x{w}",
                    s.sample_id, s.image.height, s.image.width
                )));
            }
            data.extend(s.image.pixels.iter().map(|&v| cst::<T>(v as f64)));
            let mask = s.training_mask().cloned();
            if *is_source && mask.is_none() {
                return Err(Error::MissingMask(s.sample_id.clone()));
            }
            labeled.push(mask.is_some());
            masks.push(mask);
            labels.push(u8::from(*is_source));
        }
        Ok(SubBatchArrays {
            source_index: sb.source_index,
            images: Tensor::from_vec(&[samples.len(), 1, h, w], data)?,
            masks,
            domain_labels: labels,
            labeled,
            n_source: sb.source_items.len(),
            shared_target,
        })
    }
}

/// Resolves every sample id of `batch` into arrays.
pub fn materialize<T: Scalar>(
    batch: &Batch,
    sources: &[DomainDataset],
    target: &DomainDataset,
) -> Result<Vec<SubBatchArrays<T>>> {
    SampleIndex::new(sources, target).materialize(batch)
}
