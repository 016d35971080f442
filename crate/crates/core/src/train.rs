//! Shared plumbing for the training stages: seeded batch orders, frozen
//! full passes and evaluation.

use candle_core::{Tensor, D};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Augment, DomainDataset};
use crate::error::{Error, Result};
use crate::losses;
use crate::matrix::{FeatureMatrix, Matrix, ProbabilityMatrix};
use crate::metrics;
use crate::model::{no_grad, Mode, ModelBundle};

/// Independent random stream `stream` derived from `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Shuffled mini-batches covering `0..n`. A trailing batch of a single
/// sample is dropped (batch statistics need two values) unless it is the
/// only batch.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        batches.pop();
    }
    batches
}

/// Augmentation used when training on `dataset`: random crop and flip when
/// the stored images are larger than the network input, none otherwise.
pub fn default_augment(dataset: &DomainDataset) -> Augment {
    if dataset.stored != dataset.input {
        Augment::CropFlip
    } else {
        Augment::None
    }
}

/// Features, logits-derived probabilities and hard predictions for a dataset.
#[derive(Debug, Clone)]
pub struct FullPass {
    pub features: FeatureMatrix,
    pub probs: ProbabilityMatrix,
}

impl FullPass {
    pub fn predictions(&self) -> Vec<usize> {
        self.probs.argmax()
    }

    /// Accuracy in percent against the dataset's labels, if all are present.
    pub fn accuracy(&self, dataset: &DomainDataset) -> Option<f64> {
        let labels = dataset.all_labels()?;
        metrics::accuracy(&self.predictions(), &labels).ok()
    }
}

pub const EVAL_BATCH: usize = 256;

/// Forward pass over every sample in order with the deterministic eval
/// transform. Batch statistics layers use their running estimates unless
/// `calibrate_bn` is set, in which case they normalize with (and update
/// from) batch statistics.
pub fn full_pass(model: &ModelBundle, dataset: &DomainDataset, calibrate_bn: bool) -> Result<FullPass> {
    no_grad(|| full_pass_inner(model, dataset, calibrate_bn))
}

fn full_pass_inner(model: &ModelBundle, dataset: &DomainDataset, calibrate_bn: bool) -> Result<FullPass> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset(format!("dataset `{}` has no samples", dataset.domain)));
    }
    let d = model.feature_dim();
    let k = model.num_classes();
    let mut feats = Vec::with_capacity(dataset.len() * d);
    let mut probs = Vec::with_capacity(dataset.len() * k);
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let x = dataset.eval_batch(chunk, model.device())?;
        let mut mode = if calibrate_bn && chunk.len() > 1 { Mode::Calibrate } else { Mode::Eval };
        let f = model.encode(&x, &mut mode)?;
        let logits = model.classify(&f)?;
        let p = losses::softmax(&logits.to_dtype(candle_core::DType::F64)?)?;
        feats.extend(f.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?);
        probs.extend(p.flatten_all()?.to_vec1::<f64>()?);
    }
    if let Some(bad) = feats.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite feature value {bad} in full pass")));
    }
    let n = dataset.len();
    let probs = renormalized(Matrix::new(n, k, probs)?)?;
    Ok(FullPass { features: Matrix::new(n, d, feats)?, probs })
}

fn renormalized(mut m: Matrix) -> Result<ProbabilityMatrix> {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let s: f64 = row.iter().sum();
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Numeric(format!("probability row {i} sums to {s}")));
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    ProbabilityMatrix::new(m)
}

/// Accuracy in percent of `model` on a labeled dataset.
pub fn evaluate(model: &ModelBundle, dataset: &DomainDataset) -> Result<f64> {
    let labels = dataset.require_labels()?;
    let pass = full_pass(model, dataset, false)?;
    metrics::accuracy(&pass.predictions(), &labels)
}

/// Scalar value of a 0-d tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// One-hot `(n, k)` f32 tensor.
pub fn one_hot(labels: &[usize], k: usize, device: &candle_core::Device) -> Result<Tensor> {
    let mut data = vec![0f32; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        data[i * k + y] = 1.0;
    }
    Ok(Tensor::from_vec(data, (labels.len(), k), device)?)
}

/// Mean of the max soft-max probability per row.
pub fn mean_max_prob(logits: &Tensor) -> Result<f64> {
    let p = losses::softmax(logits)?;
    scalar(&p.max(D::Minus1)?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_and_are_seeded() {
        let a = epoch_batches(10, 4, &mut stream_rng(1, 0));
        let b = epoch_batches(10, 4, &mut stream_rng(1, 0));
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let c = epoch_batches(9, 4, &mut stream_rng(1, 0));
        assert_eq!(c.len(), 2);
        assert_eq!(epoch_batches(1, 4, &mut stream_rng(1, 0)), vec![vec![0]]);
    }
}
