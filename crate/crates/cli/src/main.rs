use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gaze_core::diffcore::load_checkpoint;
use gaze_core::estimators::{profile_estimator, standard_instance, write_profile_csv, Baseline, EstimatorKind};
use gaze_core::harness::{
    collect_report, format_report, load_data, predict_all, report_from_predictions, train,
    write_predictions, write_report_csv, RunConfig, CHECKPOINT_FILE,
};
use gaze_core::model::GazeDecode;
use gaze_core::rng::NoiseStreams;
use gaze_core::synthtask::{generate_dataset, write_jsonl};
use gaze_core::Error;

#[derive(Parser)]
#[command(name = "gaze-latent", version, about = "Train and probe gaze-latent attention models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set optimizer.lr=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        RunConfig::load(self.config.as_deref(), &self.set)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test splits as JSONL.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (defaults to `<output_dir>/data`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one run and write its run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: u64,
        /// Run directory (defaults to `output_dir` from the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to `<output_dir>/checkpoint.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = ["train", "test"])]
        split: String,
        /// Also write per-example predictions as JSONL.
        #[arg(long)]
        predictions: bool,
        /// Decode gaze by one Gumbel-Max sample per example (seeded by the config seed) instead of MAP.
        #[arg(long)]
        sampled_gaze: bool,
        /// Output directory (defaults to `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bias and variance of each estimator on the standard profiling instance.
    Profile {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: u64,
        /// CSV destination (defaults to `<output_dir>/profile.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare completed runs.
    Report {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory for `report.csv` and `report.txt` (defaults to `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } => 3,
        Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Data(_) => 4,
        _ => 2,
    }
}

fn init_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("GAZE_LATENT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("GAZE_LATENT_THREADS must be a non-negative integer, got `{raw}`")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<(), Error> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    init_threads()?;
    match cli.command {
        Command::GenData { cfg, out } => {
            let cfg = cfg.load()?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.join("data"));
            std::fs::create_dir_all(&dir)?;
            let data = generate_dataset::<f64>(&cfg.task)?;
            write_jsonl(&data.train, &dir.join("train.jsonl"))?;
            write_jsonl(&data.test, &dir.join("test.jsonl"))?;
            write_json(&cfg.task, &dir.join("task.json"))?;
            println!(
                "wrote {} train and {} test examples to {}",
                data.train.examples.len(),
                data.test.examples.len(),
                dir.display()
            );
        }
        Command::Train { cfg, seed, out } => {
            let mut cfg = cfg.load()?;
            cfg.seed = seed;
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            let outcome = train(&cfg)?;
            let t = &outcome.summary.test;
            println!(
                "{} seed {}: Acc {:.2}% Acc* {:.2}% gaze hit {:.2}% ({:.1}s) -> {}",
                cfg.mode,
                seed,
                100.0 * t.accuracy.acc,
                100.0 * t.accuracy.acc_star,
                100.0 * t.gaze_hit_rate_pred,
                outcome.summary.wall_time_secs,
                cfg.output_dir.display()
            );
        }
        Command::Eval {
            cfg,
            checkpoint,
            split,
            predictions,
            sampled_gaze,
            out,
        } => {
            let cfg = cfg.load()?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.output_dir.join(CHECKPOINT_FILE));
            let params = load_checkpoint::<f64>(&ckpt)?;
            let (train_set, test_set) = load_data(&cfg)?;
            let data = if split == "train" { train_set } else { test_set };
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            std::fs::create_dir_all(&dir)?;
            let decode = if sampled_gaze {
                GazeDecode::Sampled(NoiseStreams::new(cfg.seed))
            } else {
                GazeDecode::Map
            };
            let preds = predict_all(&cfg.model, &params, &data, cfg.mode, decode)?;
            if predictions {
                write_predictions(&data, &preds, &dir.join(format!("predictions-{split}.jsonl")))?;
            }
            let report = report_from_predictions(&cfg.model, &data, cfg.mode, &preds)?;
            write_json(&report, &dir.join(format!("eval-{split}.json")))?;
            println!(
                "{split}: Acc {:.2}% Acc* {:.2}% gaze hit {:.2}% (annotation {:.2}%)",
                100.0 * report.accuracy.acc,
                100.0 * report.accuracy.acc_star,
                100.0 * report.gaze_hit_rate_pred,
                100.0 * report.gaze_hit_rate_annotation
            );
        }
        Command::Profile { cfg, seed, out } => {
            let cfg = cfg.load()?;
            let p = &cfg.profile;
            let si = standard_instance::<f64>()?;
            let inst = si.instance();
            let mut kinds: Vec<EstimatorKind> = p.eps.iter().map(|&eps| EstimatorKind::Direct { eps }).collect();
            kinds.extend(p.tau.iter().map(|&tau| EstimatorKind::GumbelSoftmax { tau }));
            if p.reinforce {
                kinds.push(EstimatorKind::Reinforce {
                    baseline: Baseline::MovingAverage,
                });
            }
            let mut rows = Vec::new();
            for kind in kinds {
                let row = profile_estimator(kind, &inst, p.trials, p.replicates, seed)?;
                println!(
                    "{:<16} {:>8} bias {:.4e} (rel {:.4}) variance {:.4e}",
                    row.estimator,
                    row.eps_or_tau.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
                    row.bias_l2,
                    row.relative_bias(),
                    row.variance_trace
                );
                rows.push(row);
            }
            let path = out.unwrap_or_else(|| cfg.output_dir.join("profile.csv"));
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            write_profile_csv(&rows, &path)?;
        }
        Command::Report { cfg, out, runs } => {
            let cfg = cfg.load()?;
            let rows = collect_report(&runs)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            std::fs::create_dir_all(&dir)?;
            write_report_csv(&rows, &dir.join("report.csv"))?;
            let text = format_report(&rows);
            std::fs::write(dir.join("report.txt"), &text)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
