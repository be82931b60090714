//! Composite segmentation + adversarial objective.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::autograd::{bce_logit, Var};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::network::{Forward, ModelParams, PackVars};
use crate::sampling::SubBatchArrays;
use crate::scalar::{cst, Scalar};
use crate::tensor::Tensor;

/// Loss components of a sample or batch. `total` is the value seen by the
/// encoders: `source_seg + α·m·target_seg − λ·adversarial`, where `m` is `N`
/// when the target loss is counted per sub-batch and 1 otherwise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub source_seg: f64,
    pub target_seg: f64,
    pub adversarial: f64,
    pub total: f64,
}

impl Add for LossTerms {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            source_seg: self.source_seg + o.source_seg,
            target_seg: self.target_seg + o.target_seg,
            adversarial: self.adversarial + o.adversarial,
            total: self.total + o.total,
        }
    }
}

impl AddAssign for LossTerms {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl LossTerms {
    pub fn scaled(self, s: f64) -> Self {
        Self {
            source_seg: self.source_seg * s,
            target_seg: self.target_seg * s,
            adversarial: self.adversarial * s,
            total: self.total * s,
        }
    }

    /// First non-finite component, by name.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("source_seg", self.source_seg),
            ("target_seg", self.target_seg),
            ("adversarial", self.adversarial),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub target_loss_per_subbatch: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 1.0, lambda: 1.0, target_loss_per_subbatch: false }
    }
}

impl LossConfig {
    fn target_multiplier(&self, n_sources: usize) -> f64 {
        if self.target_loss_per_subbatch {
            n_sources as f64
        } else {
            1.0
        }
    }
}

/// Binary cross-entropy of one domain logit; label 1 = source, 0 = target.
pub fn domain_loss<T: Scalar>(logit: T, domain_label: u8) -> Result<T> {
    if domain_label > 1 {
        return Err(Error::Data(format!("domain label {domain_label} is not 0 or 1")));
    }
    Ok(bce_logit(logit, cst(domain_label as f64)))
}

/// Handles to the loss nodes of a batch on a [`Forward`] tape.
#[derive(Clone, Copy, Debug)]
pub struct BatchVars {
    /// Scalar whose gradient drives every parameter update.
    pub objective: Var,
    pub terms: LossTerms,
}

fn mask_bits(masks: &[Option<crate::data::Mask>], range: std::ops::Range<usize>) -> Vec<u8> {
    masks[range].iter().flat_map(|m| m.as_ref().expect("labeled item").bits.iter().copied()).collect()
}

fn select_pack<T: Scalar>(f: &mut Forward<'_, T>, p: &PackVars, idx: &[usize]) -> Result<PackVars> {
    let skips = p.skips.iter().map(|&s| f.graph.select_batch(s, idx)).collect::<Result<_>>()?;
    Ok(PackVars { skips, bottleneck: f.graph.select_batch(p.bottleneck, idx)? })
}

/// `N` packs in source order: `pack` at position `i` (1-based), zeros elsewhere.
fn zero_padded<T: Scalar>(f: &mut Forward<'_, T>, pack: PackVars, i: usize, n: usize) -> Vec<PackVars> {
    (1..=n)
        .map(|j| {
            if j == i {
                return pack.clone();
            }
            let zero = |f: &mut Forward<'_, T>, v: Var| {
                let t = Tensor::zeros(f.graph.value(v).shape());
                f.graph.input(t)
            };
            PackVars {
                skips: pack.skips.iter().map(|&s| zero(f, s)).collect(),
                bottleneck: zero(f, pack.bottleneck),
            }
        })
        .collect()
}

fn value_sum<T: Scalar>(f: &Forward<'_, T>, v: Var) -> f64 {
    f.graph.value(v).data().iter().map(|x| x.to_f64_lossy()).sum()
}

/// Records the full batch objective on `f`.
///
/// A shared target half is encoded once by every sub-network, seen by every
/// classifier with label 0, and its labeled items are decoded from the fused
/// features. Target items owned by a single sub-batch pass only through that
/// sub-network; the fusion then receives zero features from the others.
pub fn batch_objective<T: Scalar>(
    f: &mut Forward<'_, T>,
    subs: &[SubBatchArrays<T>],
    cfg: &LossConfig,
) -> Result<BatchVars> {
    let first = subs.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let n = f.model.n_sources();
    let lambda: T = cst(cfg.lambda);
    let mut parts: Vec<Var> = Vec::new();
    let mut terms = LossTerms::default();

    for sb in subs {
        if sb.n_source == 0 {
            continue;
        }
        let x = f.images(sb.source_images()?);
        let pack = f.encode(sb.source_index, x)?;
        let logits = f.decode_source(sb.source_index, &pack)?;
        let ce = f.graph.pixel_cross_entropy(logits, &mask_bits(&sb.masks, 0..sb.n_source))?;
        terms.source_seg += value_sum(f, ce);
        parts.push(f.graph.sum_scaled(ce, T::one()));

        let d = f.classify(sb.source_index, pack.bottleneck, lambda)?;
        let bce = f.graph.bce_with_logits(d, &vec![T::one(); sb.n_source])?;
        terms.adversarial += value_sum(f, bce);
        parts.push(f.graph.sum_scaled(bce, T::one()));
    }

    let owners: Vec<&SubBatchArrays<T>> = if first.shared_target { vec![first] } else { subs.iter().collect() };
    let w = cfg.alpha * cfg.target_multiplier(n);
    for sb in owners {
        let n_t = sb.n_target();
        if n_t == 0 {
            continue;
        }
        let xt = f.images(sb.target_images()?);
        let encoders: Vec<usize> = if sb.shared_target { (1..=n).collect() } else { vec![sb.source_index] };
        let mut packs = Vec::with_capacity(encoders.len());
        for &i in &encoders {
            let p = f.encode(i, xt)?;
            let d = f.classify(i, p.bottleneck, lambda)?;
            let bce = f.graph.bce_with_logits(d, &vec![T::zero(); n_t])?;
            terms.adversarial += value_sum(f, bce);
            parts.push(f.graph.sum_scaled(bce, T::one()));
            packs.push(p);
        }
        let labeled: Vec<usize> = (0..n_t).filter(|&j| sb.masks[sb.n_source + j].is_some()).collect();
        if labeled.is_empty() {
            continue;
        }
        if labeled.len() < n_t {
            for p in packs.iter_mut() {
                *p = select_pack(f, p, &labeled)?;
            }
        }
        if !sb.shared_target {
            packs = zero_padded(f, packs.remove(0), sb.source_index, n);
        }
        let logits = f.decode_target_fused(&packs)?;
        let bits: Vec<u8> = labeled
            .iter()
            .flat_map(|&j| sb.masks[sb.n_source + j].as_ref().expect("labeled").bits.iter().copied())
            .collect();
        let ce = f.graph.pixel_cross_entropy(logits, &bits)?;
        terms.target_seg += value_sum(f, ce);
        parts.push(f.graph.sum_scaled(ce, cst(w)));
    }

    let (head, rest) = parts.split_first().ok_or_else(|| Error::Data("batch produced no loss terms".into()))?;
    let mut objective = *head;
    for p in rest {
        objective = f.graph.add(objective, *p)?;
    }
    terms.total =
        terms.source_seg + cfg.alpha * cfg.target_multiplier(n) * terms.target_seg - cfg.lambda * terms.adversarial;
    Ok(BatchVars { objective, terms })
}

/// Loss value of a materialized batch.
pub fn batch_loss<T: Scalar>(model: &ModelParams<T>, subs: &[SubBatchArrays<T>], cfg: &LossConfig) -> Result<LossTerms> {
    let mut f = Forward::new(model);
    Ok(batch_objective(&mut f, subs, cfg)?.terms)
}

/// Where a single sample comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    /// 1-based source index.
    Source(usize),
    TargetLabeled,
    TargetUnlabeled,
}

/// One-item batch arrays for `sample` seen as `origin`.
pub fn sample_arrays<T: Scalar>(sample: &Sample, origin: Origin, n_sources: usize) -> Result<SubBatchArrays<T>> {
    let mask = sample.training_mask().cloned();
    let (source_index, is_source, mask) = match origin {
        Origin::Source(i) => {
            if i == 0 || i > n_sources {
                return Err(Error::Config(format!("source index {i} outside 1..={n_sources}")));
            }
            (i, true, Some(mask.ok_or_else(|| Error::MissingMask(sample.sample_id.clone()))?))
        }
        Origin::TargetLabeled => {
            let m = mask.ok_or_else(|| Error::Data(format!("target sample {} is not labeled", sample.sample_id)))?;
            (1, false, Some(m))
        }
        Origin::TargetUnlabeled => (1, false, None),
    };
    let img = &sample.image;
    let images = Tensor::from_vec(
        &[1, 1, img.height, img.width],
        img.pixels.iter().map(|&v| cst::<T>(v as f64)).collect(),
    )?;
    Ok(SubBatchArrays {
        source_index,
        images,
        labeled: vec![mask.is_some()],
        masks: vec![mask],
        domain_labels: vec![u8::from(is_source)],
        n_source: usize::from(is_source),
        shared_target: true,
    })
}

/// Loss contributed by a single sample.
pub fn sample_loss<T: Scalar>(model: &ModelParams<T>, sample: &Sample, origin: Origin, cfg: &LossConfig) -> Result<LossTerms> {
    let arr = sample_arrays::<T>(sample, origin, model.n_sources())?;
    batch_loss(model, std::slice::from_ref(&arr), cfg)
}
