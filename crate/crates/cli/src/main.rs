//! `hydra`: generate data, train bodies and heads, predict, score, report.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error,
//! 3 numeric divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hydra::error::{Error, Result};
use hydra::fsutil::{write_atomic, write_json};
use hydra::metrics::score_submission;
use hydra::run::{predict_run, report, train_run};
use hydra::synthetic::{generate_synthetic, SyntheticSpec};
use hydra::trainer::{cost_report, default_roster, RunConfig, TrainPlan};

#[derive(Parser)]
#[command(name = "hydra", version, about = "Body/head CNN ensembles with majority-vote fusion")]
struct Cli {
    /// Config file: a dataset spec for `gen`, a run config for `train` and `cost`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or report file for `score` and `report`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for independent training and scoring jobs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into --out.
    Gen,
    /// Train bodies, then heads, into the run directory --out.
    Train {
        /// Dataset directory or training manifest.
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a manifest with every head of a run and fuse the votes.
    Predict {
        /// Run directory produced by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Manifest to predict.
        #[arg(long)]
        data: PathBuf,
    },
    /// Weighted F-measure of a prediction file.
    Score {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// False-detection class; the last class by default.
        #[arg(long)]
        false_detection: Option<usize>,
    },
    /// Summarise a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Epoch cost of the run config against independently trained networks.
    Cost,
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument(format!("--{flag} is required")))
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig {
            plan: TrainPlan::default(),
            model: Default::default(),
            crop: Default::default(),
            weighting: Default::default(),
            heads: default_roster(),
        },
    };
    if let Some(seed) = cli.seed {
        cfg.plan.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen => {
            let out = require(&cli.out, "out")?;
            let spec: SyntheticSpec = match &cli.config {
                Some(path) => toml::from_str(&hydra::fsutil::read_to_string(path)?)?,
                None => SyntheticSpec::default(),
            };
            let data = generate_synthetic(&spec, cli.seed.unwrap_or(0), out)?;
            for m in &data.manifests {
                println!(
                    "{}: {} regions, {} images",
                    m.split.as_str(),
                    m.group_by_region().len(),
                    m.records.len()
                );
            }
        }
        Command::Train { data } => {
            let out = require(&cli.out, "out")?;
            let cfg = run_config(cli)?;
            let started = std::time::Instant::now();
            let summary = train_run(&cfg, data, out, cli.jobs)?;
            for job in summary.bodies.iter().chain(&summary.heads) {
                let acc = |a: Option<f64>| a.map_or("-".into(), |a| format!("{a:.4}"));
                println!(
                    "{:<16} train {:>7} eval {:>7}",
                    job.name,
                    acc(job.final_train_accuracy),
                    acc(job.final_eval_accuracy)
                );
            }
            let c = &summary.cost;
            println!(
                "cost: hydra {} epochs, independent {}, ratio {:.3}",
                c.hydra_epochs, c.independent_epochs, c.ratio
            );
            eprintln!("trained in {:.1} s", started.elapsed().as_secs_f64());
        }
        Command::Predict { run, data } => {
            let out = cli.out.as_deref().unwrap_or(run);
            let s = predict_run(run, data, out, cli.jobs)?;
            for h in &s.heads {
                println!("head {:<8} region accuracy {:.4}", h.head, h.region_accuracy);
            }
            println!(
                "fused: {} regions, accuracy {:.4}, {} false detections",
                s.regions, s.fused_accuracy, s.false_detections
            );
        }
        Command::Score {
            pred,
            truth,
            weights,
            false_detection,
        } => {
            let report = score_submission(pred, truth, weights, *false_detection)?;
            let table = report.to_table();
            if let Some(out) = &cli.out {
                write_json(out, &report)?;
                write_atomic(&out.with_extension("txt"), table.as_bytes())?;
            }
            print!("{table}");
        }
        Command::Report { run } => {
            let text = report(run)?;
            if let Some(out) = &cli.out {
                write_atomic(out, text.as_bytes())?;
            }
            print!("{text}");
        }
        Command::Cost => {
            let cfg = run_config(cli)?;
            let c = cost_report(&cfg.plan, &cfg.heads);
            println!("{}", serde_json::to_string_pretty(&c)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
