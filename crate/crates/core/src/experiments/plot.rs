//! Trend figures from long-format sweep tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use std::ops::Range;

use plotters::coord::ranged1d::{DefaultFormatting, KeyPointHint};
use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::METRIC_NAMES;

const PANEL_TITLES: [&str; 4] = ["IoU", "Dice", "F2", "F0.5"];
const COLORS: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(255, 127, 14),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

/// Linear axis whose tick marks are exactly the swept fractions.
struct FractionAxis {
    lo: f64,
    hi: f64,
    ticks: Vec<f64>,
}

impl Ranged for FractionAxis {
    type ValueType = f64;
    type FormatOption = DefaultFormatting;

    fn map(&self, value: &f64, limit: (i32, i32)) -> i32 {
        let t = (value - self.lo) / (self.hi - self.lo);
        limit.0 + (t * f64::from(limit.1 - limit.0)).round() as i32
    }

    fn key_points<Hint: KeyPointHint>(&self, _hint: Hint) -> Vec<f64> {
        self.ticks.clone()
    }

    fn range(&self) -> Range<f64> {
        self.lo..self.hi
    }
}

/// One `(fraction, mean, std)` series per metric, in fraction order.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSeries {
    pub label: String,
    pub metrics: [Vec<(f64, f64, f64)>; 4],
}

impl SweepSeries {
    pub fn fractions(&self) -> Vec<f64> {
        self.metrics[0].iter().map(|p| p.0).collect()
    }
}

/// Reads a `fraction,metric,mean,std` table. Malformed rows are reported by
/// their 1-based line number.
pub fn read_sweep_csv(path: &Path) -> Result<SweepSeries> {
    let text = fs::read_to_string(path)?;
    let bad = |row: usize, reason: String| Error::Csv { path: path.to_path_buf(), row, reason };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "fraction,metric,mean,std" => {}
        _ => return Err(bad(1, "expected header `fraction,metric,mean,std`".into())),
    }
    let mut per_metric: [BTreeMap<u64, (f64, f64, f64)>; 4] = Default::default();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(bad(i + 1, format!("expected 4 columns, found {}", parts.len())));
        }
        let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(i + 1, format!("{what} `{s}` is not a number")));
        let (frac, mean, std) = (num(parts[0], "fraction")?, num(parts[2], "mean")?, num(parts[3], "std")?);
        let k = METRIC_NAMES
            .iter()
            .position(|m| *m == parts[1])
            .ok_or_else(|| bad(i + 1, format!("unknown metric `{}`", parts[1])))?;
        per_metric[k].insert(frac.to_bits(), (frac, mean, std));
    }
    let metrics = per_metric.map(|m| {
        let mut v: Vec<_> = m.into_values().collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    });
    if metrics.iter().any(|m| m.is_empty()) {
        return Err(bad(0, "every metric needs at least one row".into()));
    }
    let label = path
        .parent()
        .and_then(|p| p.file_name())
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(SweepSeries { label, metrics })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotSummary {
    pub path: PathBuf,
    pub panels: usize,
    pub lines_per_panel: usize,
    pub x_ticks: Vec<f64>,
}

/// Draws a 2×2 grid (IoU, Dice, F2, F0.5) with one mean line and one ±std
/// band per sweep into `out/trends.svg`.
pub fn plot_trends(csvs: &[PathBuf], out: &Path) -> Result<PlotSummary> {
    let series: Vec<SweepSeries> = csvs.iter().map(|p| read_sweep_csv(p)).collect::<Result<_>>()?;
    plot_series(&series, out)
}

pub fn plot_series(series: &[SweepSeries], out: &Path) -> Result<PlotSummary> {
    let first = series.first().ok_or_else(|| Error::Plot("no sweeps to plot".into()))?;
    let ticks = first.fractions();
    if let Some(s) = series.iter().find(|s| s.metrics.iter().any(|m| m.iter().map(|p| p.0).ne(ticks.iter().copied()))) {
        return Err(Error::Plot(format!("sweep `{}` does not share the fraction axis", s.label)));
    }
    fs::create_dir_all(out)?;
    let path = out.join("trends.svg");
    draw(series, &ticks, &path).map_err(|e| Error::Plot(e.to_string()))?;
    Ok(PlotSummary { path, panels: 4, lines_per_panel: series.len(), x_ticks: ticks })
}

fn draw(series: &[SweepSeries], ticks: &[f64], path: &Path) -> std::result::Result<(), Box<dyn std::error::Error>> {
    let root = SVGBackend::new(path, (1200, 900)).into_drawing_area();
    root.fill(&WHITE)?;
    let lo = ticks.first().copied().unwrap_or(0.0);
    let hi = ticks.last().copied().unwrap_or(1.0);
    let pad = ((hi - lo) * 0.05).max(0.05);
    for (k, area) in root.split_evenly((2, 2)).iter().enumerate() {
        let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for s in series {
            for &(_, m, sd) in &s.metrics[k] {
                y_lo = y_lo.min(m - sd);
                y_hi = y_hi.max(m + sd);
            }
        }
        let margin = ((y_hi - y_lo) * 0.1).max(1.0);
        let mut chart = ChartBuilder::on(area)
            .caption(PANEL_TITLES[k], ("sans-serif", 22))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(52)
            .build_cartesian_2d(
                FractionAxis { lo: lo - pad, hi: hi + pad, ticks: ticks.to_vec() },
                (y_lo - margin)..(y_hi + margin),
            )?;
        chart
            .configure_mesh()
            .x_desc("unlabeled fraction")
            .y_desc("%")
            .x_label_formatter(&|x| format!("{x:.1}"))
            .draw()?;
        for (j, s) in series.iter().enumerate() {
            let color = COLORS[j % COLORS.len()];
            let pts = &s.metrics[k];
            let band: Vec<(f64, f64)> = pts
                .iter()
                .map(|&(x, m, sd)| (x, m + sd))
                .chain(pts.iter().rev().map(|&(x, m, sd)| (x, m - sd)))
                .collect();
            chart.draw_series(std::iter::once(Polygon::new(band, color.mix(0.18).filled())))?;
            chart
                .draw_series(LineSeries::new(pts.iter().map(|&(x, m, _)| (x, m)), color.stroke_width(2)))?
                .label(s.label.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        }
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
    }
    root.present()?;
    Ok(())
}
