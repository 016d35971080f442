//! Supervised training of the source model with label smoothing and
//! best-checkpoint selection on a held-out split.

use std::path::Path;

use crate::config::AdaptationConfig;
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::io;
use crate::losses;
use crate::model::{ArchitectureSpec, Mode, ModelBundle};
use crate::optim::{lr_schedule, Sgd};
use crate::train::{default_augment, epoch_batches, evaluate, scalar, stream_rng};

pub use crate::data::split_source;

#[derive(Debug, Clone, PartialEq)]
pub struct SourceEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

pub struct SourceRun {
    /// The checkpoint with the highest validation accuracy.
    pub model: ModelBundle,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub log: Vec<SourceEpoch>,
    /// Training stopped early on a non-finite loss.
    pub diverged: bool,
}

/// Fresh network for `dataset` under `config`, with backbone weights loaded
/// when configured.
pub fn build_model(config: &AdaptationConfig, dataset: &DomainDataset, seed: u64) -> Result<ModelBundle> {
    let spec = ArchitectureSpec::from_config(config, dataset.input, dataset.num_classes());
    let mut model = ModelBundle::new(spec, seed)?;
    if let Some(w) = &config.backbone_weights {
        if config.pretrained {
            model.load_backbone_weights(w)?;
        }
    }
    Ok(model)
}

/// Splits `dataset` with the configured ratio and trains on the larger part.
pub fn train_source(dataset: &DomainDataset, config: &AdaptationConfig) -> Result<SourceRun> {
    let (train, val) = split_source(dataset, config.source_val_ratio, config.seed)?;
    train_source_with_val(&train, &val, config, config.seed)
}

/// Trains for `config.source_epochs` epochs and returns the epoch with the
/// best validation accuracy (ties go to the later epoch).
pub fn train_source_with_val(
    train: &DomainDataset,
    val: &DomainDataset,
    config: &AdaptationConfig,
    seed: u64,
) -> Result<SourceRun> {
    let labels = train.require_labels()?;
    val.require_labels()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset("source training needs non-empty train and validation sets".into()));
    }
    let model = build_model(config, train, seed)?;
    let mut opt = Sgd::from_config(model.param_groups(), config);
    let augment = default_augment(train);
    let mut order_rng = stream_rng(seed, 10);
    let mut aug_rng = stream_rng(seed, 11);
    let mut drop_rng = stream_rng(seed, 12);

    let per_epoch = epoch_batches(train.len(), config.batch_size, &mut stream_rng(seed, 0)).len();
    let total = (per_epoch * config.source_epochs).max(1);
    let mut iter = 0usize;
    let initial = model.snapshot()?;
    let mut best: Option<(f64, usize, Vec<(String, candle_core::Tensor)>)> = None;
    let mut log = Vec::new();
    let mut diverged = false;

    'epochs: for epoch in 1..=config.source_epochs {
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in epoch_batches(train.len(), config.batch_size, &mut order_rng) {
            let x = train.train_batch(&batch, augment, &mut aug_rng, model.device())?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let logits = model.forward(&x, &mut Mode::Train(&mut drop_rng))?;
            let loss = match losses::cross_entropy_smoothed(&logits, &y, config.smoothing) {
                Ok(l) => l,
                Err(Error::Numeric(msg)) => {
                    log::error!("source training diverged at epoch {epoch}, iteration {iter}: {msg}");
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let value = scalar(&loss)?;
            if !value.is_finite() {
                log::error!("source training diverged at epoch {epoch}, iteration {iter}: loss {value}");
                diverged = true;
                break 'epochs;
            }
            let lr = lr_schedule(config.base_lr, iter as f64 / total as f64)?;
            opt.step(&loss.backward()?, lr)?;
            loss_sum += value;
            batches += 1;
            iter += 1;
        }
        let val_accuracy = evaluate(&model, val)?;
        let train_loss = loss_sum / batches.max(1) as f64;
        log::info!("source epoch {epoch}/{}: loss {train_loss:.4}, val acc {val_accuracy:.2}", config.source_epochs);
        log.push(SourceEpoch { epoch, train_loss, val_accuracy });
        if best.as_ref().is_none_or(|(acc, _, _)| val_accuracy >= *acc) {
            best = Some((val_accuracy, epoch, model.snapshot()?));
        }
    }

    let (best_val_accuracy, best_epoch) = match best {
        Some((acc, epoch, snap)) => {
            model.restore(&snap)?;
            (acc, epoch)
        }
        None => {
            // Diverged within the first epoch; the initial weights are the last finite state.
            model.restore(&initial)?;
            (evaluate(&model, val)?, 0)
        }
    };
    Ok(SourceRun { model, best_epoch, best_val_accuracy, log, diverged })
}

/// `epoch,train_loss,val_accuracy`
pub fn write_log(path: &Path, log: &[SourceEpoch]) -> Result<()> {
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|e| vec![e.epoch.to_string(), e.train_loss.to_string(), e.val_accuracy.to_string()])
        .collect();
    io::write_table(path, &["epoch", "train_loss", "val_accuracy"], &rows)
}
