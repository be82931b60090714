//! Config-driven experiments: data preparation, one training run per mode,
//! unlabeled-fraction and α/λ sweeps, synthetic data and trend plots.

mod plot;
mod synth;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use plot::{plot_series, plot_trends, read_sweep_csv, PlotSummary, SweepSeries};
pub use synth::{
    gen_synthetic, gen_synthetic_detailed, write_domain, Appearance, DomainStyle, ShapeFamily, ShapeParams, SyntheticDomain,
    SyntheticSpec, Texture,
};

use crate::data::{load_domain, partition_labels, split_target, DomainDataset, LayoutDescriptor, LoadOptions, Role, SplitSpec};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport, METRIC_NAMES};
use crate::network::{build_model, save_checkpoint, ModelParams, NetConfig};
use crate::scalar::Scalar;
use crate::training::{train_with, SamplerKind, TrainConfig, TrainHistory};

/// Environment variable overriding [`ExperimentConfig::output_dir`].
pub const OUTPUT_ENV: &str = "MSATL_OUTPUT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    MultiSourceAdversarial,
    /// Only source `source` (1-based) with its adversarial branch.
    SingleSourceAdversarial { source: usize },
    /// All sources, adversarial weight forced to 0.
    MultiTaskNoAdversarial,
    /// One sub-network trained on labeled target samples alone.
    TargetOnly,
    /// All domains pooled into uniform batches instead of balanced sub-batches.
    NoIndependence,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub path: PathBuf,
    pub role: Role,
    #[serde(default = "default_layout")]
    pub layout: LayoutDescriptor,
}

fn default_layout() -> LayoutDescriptor {
    LayoutDescriptor::PairedMaskFiles
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Seeds the split, the label partition, initialization and sampling.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub mode: Mode,
    pub precision: Precision,
    pub domains: Vec<DomainSpec>,
    /// Generated domains, used instead of `domains` when set.
    pub synthetic: Option<SyntheticSpec>,
    pub load: LoadOptions,
    pub split: SplitSpec,
    pub net: NetConfig,
    pub train: TrainConfig,
    /// Unlabeled fractions for the sweep; defaults to `split.unlabeled_frac`.
    pub sweep: Option<Vec<f64>>,
    /// `(α, λ)` groups for the parameter sweep.
    pub alpha_lambda: Option<Vec<(f64, f64)>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            mode: Mode::default(),
            precision: Precision::default(),
            domains: Vec::new(),
            synthetic: None,
            load: LoadOptions::default(),
            split: SplitSpec::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            sweep: None,
            alpha_lambda: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies [`OUTPUT_ENV`] when it is set and nonempty.
    pub fn apply_env(&mut self) {
        if let Some(v) = std::env::var_os(OUTPUT_ENV).filter(|v| !v.is_empty()) {
            self.output_dir = PathBuf::from(v);
        }
    }

    fn role_counts(&self) -> (usize, Vec<usize>) {
        let roles: Vec<Role> = match &self.synthetic {
            Some(s) => s.domains.iter().map(|d| d.role).collect(),
            None => self.domains.iter().map(|d| d.role).collect(),
        };
        let targets = roles.iter().filter(|r| **r == Role::Target).count();
        let mut sources: Vec<usize> =
            roles.iter().filter_map(|r| if let Role::Source(i) = r { Some(*i) } else { None }).collect();
        sources.sort_unstable();
        (targets, sources)
    }

    /// Checks domain roles and mode constraints; nothing is loaded.
    pub fn validate(&self) -> Result<()> {
        let (targets, sources) = self.role_counts();
        if targets != 1 {
            return Err(Error::Config(format!("exactly one target domain required, found {targets}")));
        }
        if sources.iter().enumerate().any(|(k, &i)| i != k + 1) {
            return Err(Error::Config(format!("source indices must be 1..=N without gaps, found {sources:?}")));
        }
        match self.mode {
            Mode::TargetOnly => {}
            Mode::SingleSourceAdversarial { source } if source == 0 || source > sources.len() => {
                return Err(Error::Config(format!("single-source mode names source {source} of {}", sources.len())))
            }
            _ if sources.is_empty() => return Err(Error::Config(format!("mode {:?} needs source domains", self.mode))),
            _ => {}
        }
        self.split.validate()?;
        self.train.validate()?;
        if let Some(s) = &self.synthetic {
            s.validate()?;
        }
        Ok(())
    }

    /// Config with every mode-dependent setting filled in: seeds, the
    /// number of sub-networks, λ and the sampler.
    pub fn resolved(&self) -> Result<Self> {
        self.validate()?;
        let mut c = self.clone();
        c.split.seed = c.seed;
        c.train.seed = c.seed;
        let (_, sources) = self.role_counts();
        c.net.n_sources = match c.mode {
            Mode::SingleSourceAdversarial { .. } | Mode::TargetOnly => 1,
            _ => sources.len(),
        };
        match c.mode {
            Mode::MultiTaskNoAdversarial => c.train.lambda = 0.0,
            Mode::NoIndependence => c.train.sampler = SamplerKind::Mixed,
            Mode::TargetOnly => c.train.lambda = 0.0,
            _ => {}
        }
        c.net.validate()?;
        Ok(c)
    }
}

/// Everything a run trains and scores on.
#[derive(Clone, Debug)]
pub struct PreparedData {
    /// Sources seen by the mode, renumbered from 1.
    pub sources: Vec<DomainDataset>,
    pub train: DomainDataset,
    pub val: DomainDataset,
    pub test: DomainDataset,
}

/// Loads (or generates) every domain, sorted target first then sources.
pub fn load_domains(config: &ExperimentConfig) -> Result<Vec<DomainDataset>> {
    let mut out = match &config.synthetic {
        Some(spec) => gen_synthetic(spec, config.seed)?,
        None => config
            .domains
            .iter()
            .map(|d| {
                let mut ds = load_domain(&d.path, &d.layout, d.role, &config.load)?;
                ds.name = d.name.clone();
                Ok(ds)
            })
            .collect::<Result<Vec<_>>>()?,
    };
    out.sort_by_key(|d| d.role.domain_id());
    Ok(out)
}

fn renumber(mut ds: DomainDataset, i: usize) -> DomainDataset {
    ds.role = Role::Source(i);
    for s in &mut ds.samples {
        s.domain_id = i;
    }
    ds
}

/// Splits the target, hides labels at `split.unlabeled_frac`, and keeps the
/// sources the mode uses. Expects a resolved config.
pub fn prepare(config: &ExperimentConfig) -> Result<PreparedData> {
    let mut domains = load_domains(config)?.into_iter();
    let target = domains.next().ok_or_else(|| Error::Config("no domains".into()))?;
    let all_sources: Vec<DomainDataset> = domains.collect();
    let (train, val, test) = split_target(&target, &config.split)?;
    let train = partition_labels(&train, config.split.unlabeled_frac, config.split.seed)?;
    let sources = match config.mode {
        Mode::TargetOnly => Vec::new(),
        Mode::SingleSourceAdversarial { source } => vec![renumber(all_sources[source - 1].clone(), 1)],
        _ => all_sources,
    };
    Ok(PreparedData { sources, train, val, test })
}

/// Steps a balanced epoch over `sources` takes; target-only runs get the
/// same budget.
fn equal_step_budget(all_sources: &[DomainDataset], train: &DomainDataset, n_sb: usize) -> usize {
    let largest = all_sources.iter().map(DomainDataset::len).max().unwrap_or_else(|| train.len());
    largest.div_ceil(n_sb / 2).max(1)
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub history: TrainHistory,
    pub test: MetricReport,
}

/// Trains per `config.mode`, scores the best checkpoint on the test split
/// and writes `manifest.toml`, `history.csv`, `metrics.csv`, `best.ckpt.json`
/// and `last.ckpt.json` into the output directory.
pub fn run(config: &ExperimentConfig) -> Result<RunOutput> {
    let mut resolved = config.resolved()?;
    let data = prepare(&resolved)?;
    if let Mode::TargetOnly = resolved.mode {
        let all = load_domains(&resolved)?;
        let steps = equal_step_budget(&all[1..], &data.train, resolved.train.n_sb);
        resolved.train.sampler = SamplerKind::TargetOnly { steps };
    }
    match resolved.precision {
        Precision::F32 => run_typed::<f32>(&resolved, &data),
        Precision::F64 => run_typed::<f64>(&resolved, &data),
    }
}

fn run_typed<T: Scalar>(config: &ExperimentConfig, data: &PreparedData) -> Result<RunOutput> {
    let dir = config.output_dir.clone();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("manifest.toml"), config.to_toml()?)?;
    let model: ModelParams<T> = build_model(&config.net, config.seed)?;
    let out = train_with(model, &data.sources, &data.train, &data.val, &config.train, |_| Ok(()))?;
    fs::write(dir.join("history.csv"), out.history.to_csv())?;
    let meta = |which: &str| {
        serde_json::json!({ "which": which, "best_epoch": out.history.best_epoch, "epochs": out.history.len() })
    };
    save_checkpoint(&out.best, meta("best"), &dir.join("best.ckpt.json"))?;
    save_checkpoint(&out.last, meta("last"), &dir.join("last.ckpt.json"))?;
    let test = evaluate(&out.best, &data.test, &config.train.eval)?;
    test.write_csv(&dir.join("metrics.csv"))?;
    Ok(RunOutput { dir, config: config.clone(), history: out.history, test })
}

fn fraction_list(config: &ExperimentConfig) -> Result<Vec<f64>> {
    let mut f = config.sweep.clone().unwrap_or_else(|| vec![config.split.unlabeled_frac]);
    for &x in &f {
        let tenths = x * 10.0;
        if !(0.0..=0.9 + 1e-9).contains(&x) || (tenths - tenths.round()).abs() > 1e-9 {
            return Err(Error::Config(format!("sweep fraction {x} is not one of 0.0, 0.1, ..., 0.9")));
        }
    }
    f.sort_by(f64::total_cmp);
    f.dedup();
    if f.is_empty() {
        return Err(Error::Config("empty sweep".into()));
    }
    Ok(f)
}

/// Long-format rows `fraction,metric,mean,std`, fractions increasing.
pub fn sweep_csv(rows: &[(f64, MetricReport)]) -> String {
    let mut s = String::from("fraction,metric,mean,std\n");
    for (f, r) in rows {
        for (k, m) in METRIC_NAMES.iter().enumerate() {
            let _ = writeln!(s, "{f:.1},{m},{:.3},{:.3}", r.aggregate.mean[k], r.aggregate.std[k]);
        }
    }
    s
}

/// One run per unlabeled fraction into `<out>/frac-<f>/`, then `sweep.csv`.
pub fn sweep_unlabeled(config: &ExperimentConfig) -> Result<Vec<(f64, MetricReport)>> {
    let rows = sweep_into(config, &config.output_dir)?;
    fs::write(config.output_dir.join("sweep.csv"), sweep_csv(&rows))?;
    Ok(rows)
}

fn sweep_into(config: &ExperimentConfig, root: &Path) -> Result<Vec<(f64, MetricReport)>> {
    let fracs = fraction_list(config)?;
    config.validate()?;
    let mut rows = Vec::with_capacity(fracs.len());
    for f in fracs {
        let mut c = config.clone();
        c.split.unlabeled_frac = f;
        c.output_dir = root.join(format!("frac-{f:.1}"));
        rows.push((f, run(&c)?.test));
    }
    Ok(rows)
}

/// Result group of the α/λ sweep.
#[derive(Clone, Debug)]
pub struct AlphaLambdaGroup {
    pub group: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub rows: Vec<(f64, MetricReport)>,
}

/// Runs every `(α, λ)` pair at every sweep fraction into `<out>/group-<g>/`
/// and writes `sweep.csv` with columns `group,alpha,lambda,fraction,metric,mean,std`.
pub fn sweep_alpha_lambda(config: &ExperimentConfig, pairs: &[(f64, f64)]) -> Result<Vec<AlphaLambdaGroup>> {
    if pairs.is_empty() {
        return Err(Error::Config("no (alpha, lambda) pairs".into()));
    }
    if let Some((a, l)) = pairs.iter().find(|(a, l)| !(*a >= 0.0 && *l >= 0.0)) {
        return Err(Error::Config(format!("negative weight pair ({a}, {l})")));
    }
    let mut groups = Vec::with_capacity(pairs.len());
    let mut csv = String::from("group,alpha,lambda,fraction,metric,mean,std\n");
    for (g, &(alpha, lambda)) in pairs.iter().enumerate() {
        let mut c = config.clone();
        c.train.alpha = alpha;
        c.train.lambda = lambda;
        let rows = sweep_into(&c, &config.output_dir.join(format!("group-{}", g + 1)))?;
        for (f, r) in &rows {
            for (k, m) in METRIC_NAMES.iter().enumerate() {
                let _ = writeln!(
                    csv,
                    "{},{alpha},{lambda},{f:.1},{m},{:.3},{:.3}",
                    g + 1,
                    r.aggregate.mean[k],
                    r.aggregate.std[k]
                );
            }
        }
        groups.push(AlphaLambdaGroup { group: g + 1, alpha, lambda, rows });
    }
    fs::create_dir_all(&config.output_dir)?;
    fs::write(config.output_dir.join("sweep.csv"), csv)?;
    Ok(groups)
}

/// Writes every synthetic domain under `<out>/<name>/` in the paired layout.
pub fn write_synthetic(spec: &SyntheticSpec, seed: u64, out: &Path) -> Result<Vec<DomainSpec>> {
    gen_synthetic(spec, seed)?
        .into_iter()
        .map(|ds| {
            let path = out.join(&ds.name);
            write_domain(&ds, &path)?;
            Ok(DomainSpec { name: ds.name.clone(), path, role: ds.role, layout: LayoutDescriptor::PairedMaskFiles })
        })
        .collect()
}

/// `[[domains]]` tables for pasting into an experiment config.
pub fn domains_toml(domains: &[DomainSpec]) -> Result<String> {
    #[derive(Serialize)]
    struct Domains<'a> {
        domains: &'a [DomainSpec],
    }
    toml::to_string(&Domains { domains }).map_err(|e| Error::Config(e.to_string()))
}
