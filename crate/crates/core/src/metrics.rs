//! Pixel-level segmentation scores.
//!
//! Degenerate cases follow the usual benchmark convention: when prediction
//! and ground truth are both empty every score is 1; a zero precision or
//! recall denominator scores 1 for that ratio.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DomainDataset, Mask};
use crate::error::{Error, Result};
use crate::network::ModelParams;
use crate::scalar::{cst, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Same counts with prediction and ground truth exchanged.
    pub fn swapped(&self) -> Self {
        Self { tp: self.tp, fp: self.fn_, tn: self.tn, fn_: self.fp }
    }
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Jaccard index `tp / (tp + fp + fn)`.
pub fn iou(c: &ConfusionCounts) -> f64 {
    let den = c.tp + c.fp + c.fn_;
    if den == 0 {
        1.0
    } else {
        c.tp as f64 / den as f64
    }
}

/// `tp / (fp + fn)`, the variant without `tp` in the denominator. Unbounded;
/// kept only for auditing against tables computed that way.
pub fn iou_without_tp(c: &ConfusionCounts) -> f64 {
    let den = c.fp + c.fn_;
    if den == 0 {
        if c.tp == 0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        c.tp as f64 / den as f64
    }
}

pub fn f_beta(c: &ConfusionCounts, beta: f64) -> f64 {
    assert!(beta > 0.0, "beta must be positive");
    let b2 = beta * beta;
    let num = (1.0 + b2) * c.tp as f64;
    let den = num + b2 * c.fn_ as f64 + c.fp as f64;
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

pub fn dice(c: &ConfusionCounts) -> f64 {
    f_beta(c, 1.0)
}

/// `tp / (tp + fp)`, the `beta -> 0` limit of [`f_beta`].
pub fn precision(c: &ConfusionCounts) -> f64 {
    let den = c.tp + c.fp;
    if den == 0 {
        1.0
    } else {
        c.tp as f64 / den as f64
    }
}

/// `tp / (tp + fn)`, the `beta -> inf` limit of [`f_beta`].
pub fn recall(c: &ConfusionCounts) -> f64 {
    let den = c.tp + c.fn_;
    if den == 0 {
        1.0
    } else {
        c.tp as f64 / den as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IouFormula {
    #[default]
    Jaccard,
    WithoutTp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StdKind {
    #[default]
    Population,
    Sample,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub iou: IouFormula,
    pub std: StdKind,
    pub batch_size: Option<usize>,
}

/// Scores of one image, in percent rounded to three decimals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub sample_id: String,
    pub iou: f64,
    pub dice: f64,
    pub f2: f64,
    pub f05: f64,
}

impl ImageScores {
    pub fn from_counts(sample_id: impl Into<String>, c: &ConfusionCounts, formula: IouFormula) -> Self {
        let iou = match formula {
            IouFormula::Jaccard => iou(c),
            IouFormula::WithoutTp => iou_without_tp(c),
        };
        Self {
            sample_id: sample_id.into(),
            iou: percent3(iou),
            dice: percent3(dice(c)),
            f2: percent3(f_beta(c, 2.0)),
            f05: percent3(f_beta(c, 0.5)),
        }
    }

    pub fn values(&self) -> [f64; 4] {
        [self.iou, self.dice, self.f2, self.f05]
    }
}

fn percent3(x: f64) -> f64 {
    (x * 100_000.0).round() / 1000.0
}

pub const METRIC_NAMES: [&str; 4] = ["iou", "dice", "f2", "f05"];

/// Mean and standard deviation per metric, order `iou, dice, f2, f05`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: [f64; 4],
    pub std: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageScores>,
    pub aggregate: Aggregate,
}

impl MetricReport {
    /// Aggregates `per_image`, summing in sample-id order.
    pub fn from_scores(mut per_image: Vec<ImageScores>, std: StdKind) -> Self {
        per_image.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        let aggregate = aggregate(&per_image, std);
        Self { per_image, aggregate }
    }

    pub fn dice(&self) -> f64 {
        self.aggregate.mean[1]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,iou,dice,f2,f05\n");
        for r in &self.per_image {
            let _ = writeln!(s, "{},{:.3},{:.3},{:.3},{:.3}", r.sample_id, r.iou, r.dice, r.f2, r.f05);
        }
        let a = &self.aggregate;
        let _ = writeln!(s, "#mean,{:.3},{:.3},{:.3},{:.3}", a.mean[0], a.mean[1], a.mean[2], a.mean[3]);
        let _ = writeln!(s, "#std,{:.3},{:.3},{:.3},{:.3}", a.std[0], a.std[1], a.std[2], a.std[3]);
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn aggregate(rows: &[ImageScores], std: StdKind) -> Aggregate {
    let n = rows.len() as f64;
    let mut mean = [0.0; 4];
    let mut sd = [0.0; 4];
    if rows.is_empty() {
        return Aggregate { mean, std: sd };
    }
    for k in 0..4 {
        mean[k] = rows.iter().map(|r| r.values()[k]).sum::<f64>() / n;
        let ss: f64 = rows.iter().map(|r| (r.values()[k] - mean[k]).powi(2)).sum();
        let dof = match std {
            StdKind::Population => n,
            StdKind::Sample => (n - 1.0).max(1.0),
        };
        sd[k] = (ss / dof).sqrt();
    }
    Aggregate { mean, std: sd }
}

/// Per-image rows of a metrics CSV (aggregate rows starting with `#` are skipped).
pub fn read_metric_csv(path: &Path) -> Result<Vec<ImageScores>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: &str| Error::Csv { path: path.into(), row: i + 1, reason: reason.into() };
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(bad("expected 5 columns"));
        }
        let v: Vec<f64> = parts[1..]
            .iter()
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("non-numeric score"))?;
        rows.push(ImageScores { sample_id: parts[0].to_string(), iou: v[0], dice: v[1], f2: v[2], f05: v[3] });
    }
    Ok(rows)
}

/// Stacks sample images into a `[B, 1, H, W]` tensor.
pub fn stack_images<'a, T: Scalar>(images: impl IntoIterator<Item = &'a crate::data::Image>) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut b = 0;
    for img in images {
        match dims {
            None => dims = Some((img.height, img.width)),
            Some(d) if d != (img.height, img.width) => {
                return Err(Error::Shape("images of differing sizes in one batch".into()))
            }
            _ => {}
        }
        data.extend(img.pixels.iter().map(|&v| cst::<T>(v as f64)));
        b += 1;
    }
    let (h, w) = dims.unwrap_or((0, 0));
    Tensor::from_vec(&[b, 1, h, w], data)
}

/// Scores the fused target predictor on every sample of `dataset`.
pub fn evaluate<T: Scalar>(model: &ModelParams<T>, dataset: &DomainDataset, opts: &EvalOptions) -> Result<MetricReport> {
    if let Some(s) = dataset.samples.iter().find(|s| !s.labeled || s.mask.is_none()) {
        return Err(Error::Data(format!("evaluation sample {} is unlabeled", s.sample_id)));
    }
    let bs = opts.batch_size.unwrap_or(8).max(1);
    let mut rows = Vec::with_capacity(dataset.len());
    for chunk in dataset.samples.chunks(bs) {
        let x = stack_images::<T>(chunk.iter().map(|s| &s.image))?;
        let preds = model.predict(&x)?;
        for (s, p) in chunk.iter().zip(&preds) {
            let c = confusion(p, s.mask.as_ref().expect("checked above"))?;
            rows.push(ImageScores::from_counts(s.sample_id.clone(), &c, opts.iou));
        }
    }
    Ok(MetricReport::from_scores(rows, opts.std))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(tp: u64, fp: u64, fn_: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, tn: 0, fn_ }
    }

    #[test]
    fn confusion_examples() {
        let ones = Mask::new(4, 4, vec![1; 16]).unwrap();
        let zeros = Mask::zeros(4, 4);
        assert_eq!(confusion(&ones, &ones).unwrap(), ConfusionCounts { tp: 16, ..Default::default() });
        assert_eq!(confusion(&ones, &zeros).unwrap(), ConfusionCounts { fp: 16, ..Default::default() });
        assert!(confusion(&ones, &Mask::zeros(4, 5)).is_err());
    }

    #[test]
    fn score_examples() {
        assert_eq!(iou(&counts(50, 25, 25)), 0.5);
        assert_eq!(iou(&counts(10, 0, 0)), 1.0);
        assert_eq!(iou(&counts(0, 0, 0)), 1.0);
        let c = counts(50, 10, 40);
        assert!((f_beta(&c, 1.0) - 100.0 / 150.0).abs() < 1e-15);
        assert!((f_beta(&c, 2.0) - 250.0 / 420.0).abs() < 1e-15);
        assert!((f_beta(&c, 0.5) - 62.5 / 82.5).abs() < 1e-15);
        assert!((precision(&c) - 0.8333).abs() < 1e-4);
        assert!((recall(&c) - 0.5556).abs() < 1e-4);
        assert_eq!(precision(&counts(0, 0, 5)), 1.0);
        for beta in [0.25, 0.5, 1.0, 2.0, 4.0] {
            assert_eq!(f_beta(&counts(7, 0, 0), beta), 1.0);
        }
        // empty ground truth with a nonempty prediction
        assert_eq!(iou(&counts(0, 4, 0)), 0.0);
        assert_eq!(dice(&counts(0, 4, 0)), 0.0);
    }

    #[test]
    fn printed_iou_variant() {
        assert_eq!(iou_without_tp(&counts(50, 25, 25)), 1.0);
        assert_eq!(iou_without_tp(&counts(60, 10, 10)), 3.0);
    }

    #[test]
    fn aggregates_in_percent() {
        let rows = vec![
            ImageScores { sample_id: "a".into(), iou: 0.0, dice: 60.0, f2: 0.0, f05: 0.0 },
            ImageScores { sample_id: "b".into(), iou: 0.0, dice: 80.0, f2: 0.0, f05: 0.0 },
        ];
        let r = MetricReport::from_scores(rows, StdKind::Population);
        assert!((r.aggregate.mean[1] - 70.0).abs() < 1e-12);
        assert!((r.aggregate.std[1] - 10.0).abs() < 1e-12);
        let perfect = ImageScores::from_counts("p", &counts(5, 0, 0), IouFormula::Jaccard);
        let r = MetricReport::from_scores(vec![perfect], StdKind::Population);
        assert_eq!(r.aggregate.mean, [100.0; 4]);
        assert_eq!(r.aggregate.std, [0.0; 4]);
    }

    #[test]
    fn csv_round_trip_reproduces_aggregates() {
        let rows: Vec<ImageScores> = (0..13u64)
            .map(|i| ImageScores::from_counts(format!("s{i:02}"), &counts(i * 7 + 1, i * 3, 17 - i), IouFormula::Jaccard))
            .collect();
        let r = MetricReport::from_scores(rows, StdKind::Population);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        r.write_csv(&p).unwrap();
        let back = MetricReport::from_scores(read_metric_csv(&p).unwrap(), StdKind::Population);
        for k in 0..4 {
            assert!((back.aggregate.mean[k] - r.aggregate.mean[k]).abs() <= 1e-9);
            assert!((back.aggregate.std[k] - r.aggregate.std[k]).abs() <= 1e-9);
        }
    }

    proptest! {
        #[test]
        fn identities(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500) {
            let c = counts(tp, fp, fn_);
            prop_assume!(tp + fp + fn_ > 0);
            let i = iou(&c);
            prop_assert!((dice(&c) - 2.0 * i / (1.0 + i)).abs() <= 1e-12);
            prop_assert_eq!(f_beta(&c, 1.0), dice(&c));
            prop_assert!(f_beta(&counts(tp + 1, fp, fn_), 2.0) >= f_beta(&c, 2.0));
            let s = c.swapped();
            prop_assert_eq!(dice(&s), dice(&c));
            prop_assert_eq!(iou(&s), iou(&c));
            prop_assert_eq!(precision(&s), recall(&c));
            for beta in [0.5, 2.0, 3.0] {
                prop_assert!((f_beta(&s, beta) - f_beta(&c, 1.0 / beta)).abs() <= 1e-12);
            }
        }
    }
}
