use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use shot::pipeline::{self, AdaptMode};
use shot::AdaptationConfig;

#[derive(Parser)]
#[command(name = "shot", version, about = "Source-free domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    source: Option<String>,
    #[arg(long)]
    target: Option<String>,
    /// closed, partial, multi-source or semi-supervised.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source model(s) and write `<task>_<seed>_source.ckpt`.
    TrainSource(Common),
    /// Adapt the source model to the target domain.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// shot, shot-im or source-only.
        #[arg(long, default_value = "shot")]
        mode: String,
    },
    /// Entropy split plus MixMatch on a predictions file.
    LabelTransfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        /// Checkpoint the encoder starts from; a fresh network otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Accuracy, per-class accuracy and the mean ± std across runs.
    Evaluate {
        /// One predictions file per run.
        #[arg(long, required = true, num_args = 1..)]
        predictions: Vec<PathBuf>,
        #[arg(long)]
        labels: PathBuf,
        /// Where to write the CSV report.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Encoder features of a domain as `f_0..f_{d-1},label`.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Domain to embed; the target by default.
        #[arg(long)]
        domain: Option<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<AdaptationConfig> {
    let mut config = AdaptationConfig::from_file(&common.config).with_context(|| format!("reading {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(s) = &common.source {
        config.set("source", s)?;
    }
    if let Some(t) = &common.target {
        config.set("target", t)?;
    }
    if let Some(s) = &common.scenario {
        config.set("scenario", s)?;
    }
    config.validate()?;
    Ok(config)
}

fn fmt_acc(a: Option<f64>) -> String {
    a.map_or("n/a".into(), |v| format!("{v:.2}"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainSource(common) => {
            let config = load_config(&common)?;
            for o in pipeline::run_train_source(&config, &common.out_dir)? {
                println!(
                    "{}: best epoch {} val accuracy {:.2}{} -> {}",
                    o.domain,
                    o.best_epoch,
                    o.best_val_accuracy,
                    if o.diverged { " (diverged)" } else { "" },
                    o.checkpoint.display()
                );
            }
        }
        Command::Adapt { common, mode } => {
            let config = load_config(&common)?;
            let mode: AdaptMode = mode.parse()?;
            let o = pipeline::run_adapt(&config, &common.out_dir, mode)?;
            println!("{}: adaptation-set accuracy {}, test accuracy {}", o.stage, fmt_acc(o.adapt_accuracy), fmt_acc(o.test_accuracy));
            println!("predictions: {}", o.predictions.display());
            write_summary(&common.out_dir, &config, &o.stage, o.adapt_accuracy, o.test_accuracy)?;
        }
        Command::LabelTransfer { common, predictions, checkpoint } => {
            let config = load_config(&common)?;
            let o = pipeline::run_label_transfer(&config, &common.out_dir, &predictions, checkpoint.as_deref())?;
            println!("split: a = {:.4}, labeled {}, unlabeled {}", o.fraction, o.labeled, o.unlabeled);
            println!(
                "{}: input accuracy {}, refined accuracy {}, test accuracy {}",
                o.stage,
                fmt_acc(o.input_accuracy),
                fmt_acc(o.adapt_accuracy),
                fmt_acc(o.test_accuracy)
            );
            println!("predictions: {}", o.predictions.display());
            write_summary(&common.out_dir, &config, &o.stage, o.adapt_accuracy, o.test_accuracy)?;
        }
        Command::Evaluate { predictions, labels, csv } => {
            let report = pipeline::evaluate_files(&predictions, &labels)?;
            print!("{}", report.to_text());
            if let Some(path) = csv {
                report.write_csv(&path)?;
            }
        }
        Command::ExportEmbeddings { common, checkpoint, domain, output } => {
            let config = load_config(&common)?;
            let out = output.unwrap_or_else(|| {
                let stem = checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
                common.out_dir.join(format!("{stem}_embeddings.csv"))
            });
            let (rows, d) = pipeline::run_export_embeddings(&config, &checkpoint, domain.as_deref(), &out)?;
            println!("{rows} rows x {} columns -> {}", d + 1, out.display());
        }
    }
    Ok(())
}

fn write_summary(out_dir: &Path, config: &AdaptationConfig, stage: &str, adapt: Option<f64>, test: Option<f64>) -> Result<()> {
    let cell = |a: Option<f64>| a.map(|v| v.to_string()).unwrap_or_default();
    let path = out_dir.join(format!("{}_{}_{stage}_metrics.csv", config.task, config.seed));
    std::fs::write(&path, format!("stage,seed,adapt_accuracy,test_accuracy\n{stage},{},{},{}\n", config.seed, cell(adapt), cell(test)))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
