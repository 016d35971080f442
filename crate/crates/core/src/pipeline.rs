//! Stage runners shared by the command-line front end and the test suites.
//! Each stage reads its inputs from the data root and an output directory
//! and writes checkpoints, score files, logs and plots back to it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::config::{AdaptationConfig, Benchmark, Scenario};
use crate::data::{audit, load_digits, load_image_folder, subsample, write_manifest, DigitFormat, DomainDataset, FolderOptions};
use crate::error::{contract, Error, Result};
use crate::hypothesis_transfer::{self, adapt_shot, AdaptEpoch};
use crate::io;
use crate::labeling_transfer::{self, apply_to_predictions, LabelTransferRun};
use crate::matrix::ProbabilityMatrix;
use crate::metrics;
use crate::model::{checkpoint_name, ModelBundle};
use crate::scenarios::{msda_average, msda_fuse, pda_configure, ssda_adapt, ssda_label_transfer, ssda_split};
use crate::source_training::{self, build_model, train_source, train_source_with_val};
use crate::train::full_pass;

/// What the adapt stage trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptMode {
    Shot,
    /// Information maximization only: both self-supervised weights are zero.
    ShotIm,
    /// No training; scores of the source model.
    SourceOnly,
}

impl AdaptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AdaptMode::Shot => "shot",
            AdaptMode::ShotIm => "shot-im",
            AdaptMode::SourceOnly => "source-only",
        }
    }

    /// `config` with the mode's loss weights applied.
    pub fn apply(self, config: &AdaptationConfig) -> AdaptationConfig {
        let mut c = config.clone();
        if self == AdaptMode::ShotIm {
            c.gamma1 = 0.0;
            c.gamma2 = 0.0;
        }
        c
    }
}

impl FromStr for AdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shot" => Ok(AdaptMode::Shot),
            "shot-im" => Ok(AdaptMode::ShotIm),
            "source-only" => Ok(AdaptMode::SourceOnly),
            other => Err(Error::InvalidValue { key: "mode".into(), reason: format!("`{other}` is not one of: shot, shot-im, source-only") }),
        }
    }
}

/// Output file naming under one directory.
#[derive(Debug, Clone)]
pub struct Outputs {
    pub dir: PathBuf,
    pub task: String,
    pub seed: u64,
}

impl Outputs {
    pub fn new(dir: &Path, config: &AdaptationConfig) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), task: config.task.clone(), seed: config.seed })
    }

    pub fn checkpoint(&self, stage: &str) -> PathBuf {
        self.dir.join(checkpoint_name(&self.task, self.seed, stage))
    }

    /// `<task>_<seed>_<stage>_<what>`
    pub fn file(&self, stage: &str, what: &str) -> PathBuf {
        self.dir.join(format!("{}_{}_{stage}_{what}", self.task, self.seed))
    }

    pub fn classes(&self) -> PathBuf {
        self.dir.join(format!("{}_classes.txt", self.task))
    }
}

/// Train and evaluation sets of one domain.
#[derive(Debug, Clone)]
pub struct DomainSplits {
    /// Samples used for training (source) or adaptation (target).
    pub train: DomainDataset,
    /// Samples accuracy is reported on.
    pub test: DomainDataset,
}

pub fn data_root(config: &AdaptationConfig) -> Result<PathBuf> {
    config.resolved_data_root().ok_or_else(|| Error::MissingKey("data_root".into()))
}

/// Directory holding the files of domain `name`.
pub fn domain_dir(config: &AdaptationConfig, name: &str) -> Result<PathBuf> {
    Ok(data_root(config)?.join(name))
}

fn digit_format(config: &AdaptationConfig) -> DigitFormat {
    let svhn = config.source.as_deref() == Some("svhn") || config.sources.iter().any(|s| s == "svhn");
    if svhn || config.target.as_deref() == Some("svhn") {
        DigitFormat::Rgb32
    } else {
        DigitFormat::Gray28
    }
}

/// Loads domain `name`. Digit domains keep their standard train/test
/// membership; folder domains use every image for both roles.
pub fn load_domain(config: &AdaptationConfig, name: &str, class_names: Option<&[String]>) -> Result<DomainSplits> {
    let root = data_root(config)?;
    let (train, test) = if config.benchmark == Benchmark::Digits {
        load_digits(name, &root, digit_format(config))?
    } else {
        let ds = load_image_folder(&root.join(name), class_names, &FolderOptions::new(config.resize_size, config.image_size))?;
        (ds.clone(), ds.with_role(crate::data::SplitRole::Test))
    };
    if config.subsample < 1.0 {
        let train = subsample(&train, config.subsample, config.seed)?;
        let test = if config.benchmark == Benchmark::Digits {
            subsample(&test, config.subsample, config.seed)?
        } else {
            train.clone().with_role(crate::data::SplitRole::Test)
        };
        return Ok(DomainSplits { train, test });
    }
    Ok(DomainSplits { train, test })
}

fn source_names(config: &AdaptationConfig) -> Result<Vec<String>> {
    if config.scenario == Scenario::MultiSource {
        if config.sources.is_empty() {
            return Err(Error::MissingKey("sources".into()));
        }
        Ok(config.sources.clone())
    } else {
        Ok(vec![config.require_source()?.to_string()])
    }
}

fn source_stage(config: &AdaptationConfig, name: &str) -> String {
    if config.scenario == Scenario::MultiSource {
        format!("source-{name}")
    } else {
        "source".into()
    }
}

fn read_classes(path: &Path) -> Result<Option<Vec<String>>> {
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(fs::read_to_string(path)?.lines().map(str::to_string).filter(|l| !l.is_empty()).collect()))
}

#[derive(Debug, Clone)]
pub struct SourceOutcome {
    pub domain: String,
    pub checkpoint: PathBuf,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub diverged: bool,
}

/// Trains one source model per source domain.
pub fn run_train_source(config: &AdaptationConfig, out_dir: &Path) -> Result<Vec<SourceOutcome>> {
    let out = Outputs::new(out_dir, config)?;
    let mut outcomes = Vec::new();
    for name in source_names(config)? {
        let stage = source_stage(config, &name);
        let data = load_domain(config, &name, None)?;
        let (run, train, val) = if config.benchmark == Benchmark::Digits {
            let run = train_source_with_val(&data.train, &data.test, config, config.seed)?;
            (run, data.train, data.test)
        } else {
            let (train, val) = source_training::split_source(&data.train, config.source_val_ratio, config.seed)?;
            (train_source(&data.train, config)?, train, val)
        };
        let ckpt = out.checkpoint(&stage);
        run.model.save(&ckpt)?;
        source_training::write_log(&out.file(&stage, "log.csv"), &run.log)?;
        write_manifest(&out.file(&stage, "manifest.csv"), &[&train, &val])?;
        fs::write(out.classes(), train.label_space.names().join("\n") + "\n")?;
        log::info!("{name}: best epoch {} with val accuracy {:.2}", run.best_epoch, run.best_val_accuracy);
        outcomes.push(SourceOutcome {
            domain: name,
            checkpoint: ckpt,
            best_epoch: run.best_epoch,
            best_val_accuracy: run.best_val_accuracy,
            diverged: run.diverged,
        });
    }
    Ok(outcomes)
}

/// Forbids reads under every source-domain directory; refuses a target
/// that lives under one.
fn guard_sources(config: &AdaptationConfig) -> Result<Vec<audit::ForbiddenRoot>> {
    let target = domain_dir(config, config.require_target()?)?;
    let target = target.canonicalize().unwrap_or(target);
    let mut guards = Vec::new();
    for name in source_names(config)? {
        let root = domain_dir(config, &name)?;
        let root = root.canonicalize().unwrap_or(root);
        if target.starts_with(&root) {
            return Err(Error::SourceAccess(target));
        }
        guards.push(audit::forbid(&root));
    }
    Ok(guards)
}

/// Target data for a target-side stage: `(adapt set, test set, labeled)`.
/// In the semi-supervised scenario the labeled shots are split off first.
fn target_sets(config: &AdaptationConfig, out: &Outputs) -> Result<(DomainDataset, DomainDataset, Option<DomainDataset>)> {
    let classes = read_classes(&out.classes())?;
    let data = load_domain(config, config.require_target()?, classes.as_deref())?;
    if config.scenario == Scenario::SemiSupervised {
        let (labeled, unlabeled) = ssda_split(&data.train, config.ssda_shots, config.seed)?;
        let test = if config.benchmark == Benchmark::Digits {
            data.test
        } else {
            unlabeled.clone().with_role(crate::data::SplitRole::Test)
        };
        return Ok((unlabeled, test, Some(labeled)));
    }
    Ok((data.train, data.test, None))
}

fn same_samples(a: &DomainDataset, b: &DomainDataset) -> bool {
    a.len() == b.len() && (0..a.len()).all(|i| a.source_name(i) == b.source_name(i))
}

/// Scores of `models` on `test`, averaged; reuses `adapt_probs` when the
/// test set is the adaptation set.
fn test_scores(models: &[&ModelBundle], adapt: &DomainDataset, test: &DomainDataset, adapt_probs: &ProbabilityMatrix) -> Result<ProbabilityMatrix> {
    if same_samples(adapt, test) {
        return Ok(adapt_probs.clone());
    }
    let scores = models.iter().map(|m| Ok(full_pass(m, test, false)?.probs)).collect::<Result<Vec<_>>>()?;
    msda_average(&scores)
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub stage: String,
    pub predictions: PathBuf,
    pub test_predictions: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub adapt_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub log: Vec<AdaptEpoch>,
}

fn write_scores(out: &Outputs, stage: &str, what: &str, probs: &ProbabilityMatrix, data: &DomainDataset) -> Result<(PathBuf, Option<f64>)> {
    let path = out.file(stage, &format!("{what}predictions.csv"));
    io::write_predictions(&path, probs)?;
    let accuracy = match data.all_labels() {
        Some(y) => {
            io::write_labels(&out.file(stage, &format!("{what}labels.csv")), &y)?;
            Some(metrics::accuracy(&probs.argmax(), &y)?)
        }
        None => None,
    };
    Ok((path, accuracy))
}

/// Adapts the source model(s) to the target domain. Source-domain files
/// are unreadable for the duration.
pub fn run_adapt(config: &AdaptationConfig, out_dir: &Path, mode: AdaptMode) -> Result<AdaptOutcome> {
    let config = &pda_configure(&mode.apply(config));
    let out = Outputs::new(out_dir, config)?;
    let _guards = guard_sources(config)?;
    let stage = mode.as_str().to_string();
    let seed = config.seed;

    let mut sources = Vec::new();
    for name in source_names(config)? {
        let ckpt = out.checkpoint(&source_stage(config, &name));
        sources.push((name, ModelBundle::load(&ckpt)?));
    }
    let (adapt_set, test_set, labeled) = target_sets(config, &out)?;

    let mut models = Vec::new();
    let mut scores = Vec::new();
    let mut log = Vec::new();
    for (name, source) in &sources {
        let (model, probs) = match (mode, &labeled) {
            (AdaptMode::SourceOnly, _) => (source.try_clone()?, full_pass(source, &adapt_set, false)?.probs),
            (_, Some(l)) => {
                let run = ssda_adapt(source, l, &adapt_set, config, seed)?;
                log = run.log;
                (run.model, run.probs)
            }
            (_, None) => {
                let run = adapt_shot(source, &adapt_set, config, seed)?;
                log = run.log;
                (run.model, run.probs)
            }
        };
        if sources.len() > 1 {
            let pair = format!("{stage}-{name}");
            io::write_predictions(&out.file(&pair, "predictions.csv"), &probs)?;
            hypothesis_transfer::write_log(&out.file(&pair, "log.csv"), &log)?;
        }
        models.push(model);
        scores.push(probs);
    }

    let fused = msda_average(&scores)?;
    debug_assert_eq!(msda_fuse(&scores)?, fused.argmax());
    let model_refs: Vec<&ModelBundle> = models.iter().collect();
    let test_probs = test_scores(&model_refs, &adapt_set, &test_set, &fused)?;

    let mut checkpoints = Vec::new();
    for ((name, _), model) in sources.iter().zip(&models) {
        let path = if models.len() > 1 { out.checkpoint(&format!("{stage}-{name}")) } else { out.checkpoint(&stage) };
        model.save(&path)?;
        checkpoints.push(path);
    }
    let (predictions, adapt_accuracy) = write_scores(&out, &stage, "", &fused, &adapt_set)?;
    let (test_predictions, test_accuracy) = write_scores(&out, &stage, "test_", &test_probs, &test_set)?;
    if mode != AdaptMode::SourceOnly {
        hypothesis_transfer::write_log(&out.file(&stage, "log.csv"), &log)?;
        hypothesis_transfer::plot_log(&out.file(&stage, "loss.svg"), &log)?;
    }
    Ok(AdaptOutcome { stage, predictions, test_predictions, checkpoints, adapt_accuracy, test_accuracy, log })
}

#[derive(Debug, Clone)]
pub struct LabelTransferOutcome {
    pub stage: String,
    pub predictions: PathBuf,
    pub test_predictions: PathBuf,
    pub split: PathBuf,
    pub checkpoint: PathBuf,
    pub fraction: f64,
    pub labeled: usize,
    pub unlabeled: usize,
    pub input_accuracy: Option<f64>,
    pub adapt_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
}

/// Stage name for the refinement of a predictions file named
/// `<task>_<seed>_<stage>_predictions.csv`.
fn refined_stage(out: &Outputs, predictions: &Path) -> String {
    let name = predictions.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let prefix = format!("{}_{}_", out.task, out.seed);
    let stem = name.strip_suffix("_predictions.csv").unwrap_or(name.trim_end_matches(".csv"));
    format!("{}++", stem.strip_prefix(&prefix).unwrap_or(stem))
}

/// Refines a predictions file over the target adaptation set. The encoder
/// starts from `init` when given, otherwise from a fresh network.
pub fn run_label_transfer(config: &AdaptationConfig, out_dir: &Path, predictions: &Path, init: Option<&Path>) -> Result<LabelTransferOutcome> {
    let out = Outputs::new(out_dir, config)?;
    let probs = io::read_predictions(predictions)?;
    let _guards = guard_sources(config)?;
    let seed = config.seed;
    let (adapt_set, test_set, labeled) = target_sets(config, &out)?;
    if probs.rows() != adapt_set.len() {
        return Err(Error::Shape(format!(
            "{} has {} rows but the target adaptation set has {} samples",
            predictions.display(),
            probs.rows(),
            adapt_set.len()
        )));
    }
    let model_init = match init {
        Some(path) => ModelBundle::load(path)?,
        None => build_model(config, &adapt_set, seed)?,
    };
    let stage = refined_stage(&out, predictions);

    let (run, refined): (LabelTransferRun, ProbabilityMatrix) = match &labeled {
        Some(l) => {
            let run = ssda_label_transfer(&probs, &model_init, l, &adapt_set, config, seed)?;
            let rows: Vec<usize> = (l.len()..l.len() + adapt_set.len()).collect();
            let refined = run.refined.probs.select_rows(&rows);
            (run, refined)
        }
        None => {
            let run = apply_to_predictions(&probs, &model_init, &adapt_set, config, seed)?;
            let refined = run.refined.probs.clone();
            (run, refined)
        }
    };
    let test_probs = test_scores(&[&run.refined.model], &adapt_set, &test_set, &refined)?;

    let split = out.file(&stage, "split.csv");
    labeling_transfer::write_split(&split, &run.split)?;
    labeling_transfer::plot_entropy_histogram(&out.file(&stage, "entropy.svg"), &run.split)?;
    write_mixmatch_log(&out.file(&stage, "log.csv"), &run.refined.log)?;
    let checkpoint = out.checkpoint(&stage);
    run.refined.model.save(&checkpoint)?;
    let (predictions_out, adapt_accuracy) = write_scores(&out, &stage, "", &refined, &adapt_set)?;
    let (test_predictions, test_accuracy) = write_scores(&out, &stage, "test_", &test_probs, &test_set)?;
    let input_accuracy = adapt_set.all_labels().map(|y| metrics::accuracy(&probs.argmax(), &y)).transpose()?;
    Ok(LabelTransferOutcome {
        stage,
        predictions: predictions_out,
        test_predictions,
        split,
        checkpoint,
        fraction: run.split.fraction,
        labeled: run.split.labeled.len(),
        unlabeled: run.split.unlabeled.len(),
        input_accuracy,
        adapt_accuracy,
        test_accuracy,
    })
}

fn write_mixmatch_log(path: &Path, log: &[labeling_transfer::MixMatchEpoch]) -> Result<()> {
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                e.labeled_loss.to_string(),
                e.unlabeled_loss.to_string(),
                e.unlabeled_weight.to_string(),
                e.accuracy.map(|a| a.to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    io::write_table(path, &["epoch", "L_x", "L_u", "unlabeled_weight", "accuracy"], &rows)
}

/// Metrics of one predictions file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub source: PathBuf,
    pub accuracy: f64,
    pub per_class: Vec<Option<f64>>,
    pub mean_per_class: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub runs: Vec<RunMetrics>,
    /// Mean and population std of the overall accuracy across runs.
    pub accuracy_mean_std: (f64, f64),
    pub mean_per_class_mean_std: (f64, f64),
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.runs {
            let _ = writeln!(s, "{}", r.source.display());
            let _ = writeln!(s, "  accuracy            {:.2}", r.accuracy);
            let _ = writeln!(s, "  mean per-class acc  {:.2}", r.mean_per_class);
            let classes: Vec<String> = r.per_class.iter().map(|a| a.map_or("-".into(), |v| format!("{v:.1}"))).collect();
            let _ = writeln!(s, "  per class           {}", classes.join(" "));
        }
        if self.runs.len() > 1 {
            let (m, sd) = self.accuracy_mean_std;
            let (pm, psd) = self.mean_per_class_mean_std;
            let _ = writeln!(s, "over {} runs: accuracy {m:.2} ± {sd:.2}, mean per-class {pm:.2} ± {psd:.2}", self.runs.len());
        }
        s
    }

    /// `run,accuracy,mean_per_class,class_0..`; aggregate rows `mean` and
    /// `std` follow when there is more than one run.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let k = self.runs.first().map_or(0, |r| r.per_class.len());
        let mut header = vec!["run".to_string(), "accuracy".into(), "mean_per_class".into()];
        header.extend((0..k).map(|c| format!("class_{c}")));
        let mut rows: Vec<Vec<String>> = self
            .runs
            .iter()
            .map(|r| {
                let mut row = vec![r.source.display().to_string(), r.accuracy.to_string(), r.mean_per_class.to_string()];
                row.extend(r.per_class.iter().map(|a| a.map(|v| v.to_string()).unwrap_or_default()));
                row
            })
            .collect();
        if self.runs.len() > 1 {
            let pad = vec![String::new(); k];
            let mut mean = vec!["mean".into(), self.accuracy_mean_std.0.to_string(), self.mean_per_class_mean_std.0.to_string()];
            mean.extend(pad.clone());
            let mut std = vec!["std".into(), self.accuracy_mean_std.1.to_string(), self.mean_per_class_mean_std.1.to_string()];
            std.extend(pad);
            rows.push(mean);
            rows.push(std);
        }
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        io::write_table(path, &header, &rows)
    }
}

/// Scores each predictions file against one labels file.
pub fn evaluate_files(predictions: &[PathBuf], labels: &Path) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(contract("no predictions files given"));
    }
    let y = io::read_labels(labels)?;
    let mut runs = Vec::new();
    for path in predictions {
        let probs = io::read_predictions(path)?;
        let pred = probs.argmax();
        if pred.len() != y.len() {
            return Err(Error::Shape(format!("{} has {} rows, {} has {}", path.display(), pred.len(), labels.display(), y.len())));
        }
        let k = probs.num_classes().max(y.iter().max().map_or(0, |m| m + 1));
        runs.push(RunMetrics {
            source: path.clone(),
            accuracy: metrics::accuracy(&pred, &y)?,
            per_class: metrics::per_class_accuracy(&pred, &y, k)?,
            mean_per_class: metrics::mean_per_class_accuracy(&pred, &y, k)?,
        });
    }
    let accuracy_mean_std = metrics::mean_std(&runs.iter().map(|r| r.accuracy).collect::<Vec<_>>())?;
    let mean_per_class_mean_std = metrics::mean_std(&runs.iter().map(|r| r.mean_per_class).collect::<Vec<_>>())?;
    Ok(EvalReport { runs, accuracy_mean_std, mean_per_class_mean_std })
}

/// Writes encoder features of `domain` (default: the target) under the
/// checkpoint as `f_0..f_{d-1},label`. Returns `(rows, d)`.
pub fn run_export_embeddings(config: &AdaptationConfig, checkpoint: &Path, domain: Option<&str>, out: &Path) -> Result<(usize, usize)> {
    let model = ModelBundle::load(checkpoint)?;
    let name = match domain {
        Some(d) => d,
        None => config.require_target()?,
    };
    let classes = match out.parent() {
        Some(dir) => read_classes(&dir.join(format!("{}_classes.txt", config.task)))?,
        None => None,
    };
    let data = load_domain(config, name, classes.as_deref())?;
    let pass = full_pass(&model, &data.train, false)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    io::write_embeddings(out, &pass.features, data.train.labels())?;
    Ok((data.train.len(), model.feature_dim()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refined_stage_names() {
        let out = Outputs { dir: PathBuf::from("."), task: "u2m".into(), seed: 2019 };
        assert_eq!(refined_stage(&out, Path::new("x/u2m_2019_shot_predictions.csv")), "shot++");
        assert_eq!(refined_stage(&out, Path::new("black_box.csv")), "black_box++");
    }

    #[test]
    fn modes_parse_and_zero_weights() {
        let c = AdaptationConfig::default();
        let im = "shot-im".parse::<AdaptMode>().unwrap().apply(&c);
        assert_eq!((im.gamma1, im.gamma2), (0.0, 0.0));
        assert_eq!(AdaptMode::Shot.apply(&c), c);
        assert!("fancy".parse::<AdaptMode>().is_err());
    }
}
