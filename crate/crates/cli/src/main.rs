use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use msatl::experiments::{
    self, prepare, run, sweep_alpha_lambda, sweep_unlabeled, write_synthetic, ExperimentConfig, Precision,
    SyntheticSpec,
};
use msatl::metrics::evaluate;
use msatl::network::load_checkpoint;
use msatl::Scalar;

/// Multi-source adversarial transfer learning for binary segmentation.
#[derive(Parser)]
#[command(name = "msatl", version)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; wins over the config and MSATL_OUTPUT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and split the domains; writes split.csv and manifest.toml.
    Prepare,
    /// Train per the configured mode and score the test split.
    Train,
    /// Score a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Unlabeled-fraction sweep, or the alpha/lambda sweep when configured.
    Sweep,
    /// Write synthetic domains to disk in the paired-mask layout.
    Synth {
        /// Image side when no synthetic spec is configured.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 100)]
        target_samples: usize,
        #[arg(long, default_value_t = 40)]
        source_samples: usize,
    },
    /// Draw trends.svg from one or more sweep.csv files.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    config.apply_env();
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(o) = &cli.out {
        config.output_dir = o.clone();
    }
    Ok(config)
}

fn evaluate_checkpoint<T: Scalar>(config: &ExperimentConfig, checkpoint: &Path) -> Result<()> {
    let data = prepare(config)?;
    let (model, _) = load_checkpoint::<T>(checkpoint)?;
    let report = evaluate(&model, &data.test, &config.train.eval)?;
    fs::create_dir_all(&config.output_dir)?;
    let path = config.output_dir.join("metrics.csv");
    report.write_csv(&path)?;
    let m = report.aggregate.mean;
    println!("test IoU {:.3} Dice {:.3} F2 {:.3} F0.5 {:.3} -> {}", m[0], m[1], m[2], m[3], path.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let config = load_config(&cli)?;
    match &cli.command {
        Command::Prepare => {
            let resolved = config.resolved()?;
            let data = prepare(&resolved)?;
            fs::create_dir_all(&resolved.output_dir)?;
            let mut csv = String::from("sample_id,split,labeled\n");
            for (name, ds) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
                for s in &ds.samples {
                    let _ = writeln!(csv, "{},{name},{}", s.sample_id, u8::from(s.labeled));
                }
            }
            fs::write(resolved.output_dir.join("split.csv"), csv)?;
            fs::write(resolved.output_dir.join("manifest.toml"), resolved.to_toml()?)?;
            for s in &data.sources {
                println!("source {} ({}): {} samples", s.role.domain_id(), s.name, s.len());
            }
            println!(
                "target: train {} ({} labeled), val {}, test {}",
                data.train.len(),
                data.train.n_labeled(),
                data.val.len(),
                data.test.len()
            );
        }
        Command::Train => {
            let out = run(&config)?;
            let m = out.test.aggregate.mean;
            println!(
                "best epoch {:?}; test IoU {:.3} Dice {:.3} F2 {:.3} F0.5 {:.3} -> {}",
                out.history.best_epoch,
                m[0],
                m[1],
                m[2],
                m[3],
                out.dir.display()
            );
        }
        Command::Evaluate { checkpoint } => {
            let resolved = config.resolved()?;
            match resolved.precision {
                Precision::F32 => evaluate_checkpoint::<f32>(&resolved, checkpoint)?,
                Precision::F64 => evaluate_checkpoint::<f64>(&resolved, checkpoint)?,
            }
        }
        Command::Sweep => match &config.alpha_lambda {
            Some(pairs) => {
                for g in sweep_alpha_lambda(&config, pairs)? {
                    for (f, r) in &g.rows {
                        println!("group {} (alpha {}, lambda {}) fraction {f:.1}: Dice {:.3}", g.group, g.alpha, g.lambda, r.dice());
                    }
                }
            }
            None => {
                for (f, r) in sweep_unlabeled(&config)? {
                    println!("fraction {f:.1}: Dice {:.3} ± {:.3}", r.dice(), r.aggregate.std[1]);
                }
            }
        },
        Command::Synth { size, target_samples, source_samples } => {
            let spec = config
                .synthetic
                .clone()
                .unwrap_or_else(|| SyntheticSpec::limited_similarity(*size, *target_samples, *source_samples));
            let domains = write_synthetic(&spec, config.seed, &config.output_dir)?;
            let snippet = experiments::domains_toml(&domains)?;
            fs::write(config.output_dir.join("domains.toml"), &snippet)?;
            println!("{snippet}");
        }
        Command::Plot { csv } => {
            if csv.is_empty() {
                bail!("no sweep tables given");
            }
            let summary = experiments::plot_trends(csv, &config.output_dir)?;
            println!("{} panels, {} lines each -> {}", summary.panels, summary.lines_per_panel, summary.path.display());
        }
    }
    Ok(())
}
