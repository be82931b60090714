//! Optimization loop.
//!
//! Every epoch draws a fresh plan, applies one RMSprop step per batch in plan
//! order, then scores the fused target predictor on the validation split.
//! The returned model is the one with the best validation Dice.

mod loss;
mod optim;

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use loss::{
    batch_loss, batch_objective, domain_loss, sample_arrays, sample_loss, BatchVars, LossConfig, LossTerms, Origin,
};
pub use optim::{RmsProp, RmsPropConfig};

use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalOptions, MetricReport};
use crate::network::{Forward, ModelParams};
use crate::sampling::{plan_epoch, plan_mixed_epoch, plan_target_only_epoch, EpochPlan, SampleIndex};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SamplerKind {
    /// One sub-batch per source, each half source and half shared target.
    #[default]
    Balanced,
    /// All domains pooled into uniform batches of `N·n_sb`.
    Mixed,
    /// Labeled target items only; `steps` batches of `n_sb` per epoch.
    TargetOnly { steps: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub n_sb: usize,
    pub learning_rate: f64,
    /// When set, the rate decays linearly to this value at the last epoch.
    pub final_learning_rate: Option<f64>,
    pub seed: u64,
    pub optimizer: RmsPropConfig,
    pub target_loss_per_subbatch: bool,
    pub sampler: SamplerKind,
    pub eval: EvalOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambda: 1.0,
            epochs: 100,
            n_sb: 16,
            learning_rate: 1e-3,
            final_learning_rate: None,
            seed: 0,
            optimizer: RmsPropConfig::default(),
            target_loss_per_subbatch: false,
            sampler: SamplerKind::Balanced,
            eval: EvalOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha >= 0.0 && self.lambda >= 0.0) {
            return bad(format!("alpha {} and lambda {} must be nonnegative", self.alpha, self.lambda));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.n_sb < 2 || !self.n_sb.is_multiple_of(2) {
            return bad(format!("n_sb {} must be even and at least 2", self.n_sb));
        }
        if !(self.learning_rate > 0.0) || self.final_learning_rate.is_some_and(|r| !(r > 0.0)) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.optimizer.rho) || self.optimizer.eps < 0.0 {
            return bad("rmsprop rho must lie in [0, 1) and eps be nonnegative".into());
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { alpha: self.alpha, lambda: self.lambda, target_loss_per_subbatch: self.target_loss_per_subbatch }
    }

    /// Rate for 0-based `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.final_learning_rate {
            Some(end) if self.epochs > 1 => {
                let t = epoch as f64 / (self.epochs - 1) as f64;
                self.learning_rate + (end - self.learning_rate) * t
            }
            _ => self.learning_rate,
        }
    }

    pub fn plan(&self, sources: &[DomainDataset], target: &DomainDataset, epoch: usize) -> Result<EpochPlan> {
        match self.sampler {
            SamplerKind::Balanced => plan_epoch(sources, target, self.n_sb, epoch, self.seed),
            SamplerKind::Mixed => plan_mixed_epoch(sources, target, sources.len() * self.n_sb, epoch, self.seed),
            SamplerKind::TargetOnly { steps } => plan_target_only_epoch(target, self.n_sb, steps, epoch, self.seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Mean over the epoch's steps.
    pub losses: LossTerms,
    pub validation: Option<MetricReport>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// One line per epoch. Wall time is left out so that reruns compare
    /// byte for byte.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "epoch,steps,learning_rate,source_seg,target_seg,adversarial,total,val_iou,val_dice,val_f2,val_f05\n",
        );
        for r in &self.epochs {
            let l = &r.losses;
            let _ = write!(
                s,
                "{},{},{:e},{:.9e},{:.9e},{:.9e},{:.9e}",
                r.epoch, r.steps, r.learning_rate, l.source_seg, l.target_seg, l.adversarial, l.total
            );
            match &r.validation {
                Some(v) => {
                    let m = v.aggregate.mean;
                    let _ = writeln!(s, ",{:.3},{:.3},{:.3},{:.3}", m[0], m[1], m[2], m[3]);
                }
                None => s.push_str(",,,,\n"),
            }
        }
        s
    }
}

pub struct TrainOutcome<T> {
    pub best: ModelParams<T>,
    pub last: ModelParams<T>,
    pub history: TrainHistory,
}

/// Trains `model` and returns the best-validation parameters with the history.
pub fn train<T: Scalar>(
    model: ModelParams<T>,
    sources: &[DomainDataset],
    target_train: &DomainDataset,
    target_val: &DomainDataset,
    config: &TrainConfig,
) -> Result<(ModelParams<T>, TrainHistory)> {
    let out = train_with(model, sources, target_train, target_val, config, |_| Ok(()))?;
    Ok((out.best, out.history))
}

/// Like [`train`], calling `on_epoch` after every epoch and keeping the last
/// parameters as well.
pub fn train_with<T: Scalar>(
    mut model: ModelParams<T>,
    sources: &[DomainDataset],
    target_train: &DomainDataset,
    target_val: &DomainDataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if !matches!(config.sampler, SamplerKind::TargetOnly { .. }) && sources.len() != model.n_sources() {
        return Err(Error::Config(format!(
            "{} source domains for a model with {} sub-networks",
            sources.len(),
            model.n_sources()
        )));
    }
    let loss_cfg = config.loss();
    let index = SampleIndex::new(sources, target_train);
    let mut opt = RmsProp::new(config.optimizer, &model.store);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ModelParams<T>)> = None;

    for e in 0..config.epochs {
        let started = Instant::now();
        let lr = config.learning_rate_at(e);
        let plan = config.plan(sources, target_train, e)?;
        let mut sum = LossTerms::default();
        for (step, batch) in plan.batches.iter().enumerate() {
            let subs = index.materialize::<T>(batch)?;
            let grads = {
                let mut f = Forward::new(&model);
                let vars = batch_objective(&mut f, &subs, &loss_cfg)?;
                if let Some(term) = vars.terms.non_finite_term() {
                    return Err(Error::NonFiniteLoss { term, epoch: e + 1, step: step + 1 });
                }
                sum += vars.terms;
                f.graph.backward(vars.objective)?.params(model.store.len())
            };
            opt.step(&mut model.store, &grads, lr);
        }
        let validation = if target_val.is_empty() { None } else { Some(evaluate(&model, target_val, &config.eval)?) };
        let record = EpochRecord {
            epoch: e + 1,
            steps: plan.batches.len(),
            learning_rate: lr,
            losses: sum.scaled(1.0 / plan.batches.len().max(1) as f64),
            validation,
            seconds: started.elapsed().as_secs_f64(),
        };
        let score = record.validation.as_ref().map_or(f64::NEG_INFINITY, MetricReport::dice);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, model.clone()));
            history.best_epoch = Some(e + 1);
        }
        on_epoch(&record)?;
        history.epochs.push(record);
    }
    let best = match best {
        Some((_, m)) if !target_val.is_empty() => m,
        _ => {
            history.best_epoch = Some(config.epochs);
            model.clone()
        }
    };
    Ok(TrainOutcome { best, last: model, history })
}

#[cfg(test)]
mod tests;
