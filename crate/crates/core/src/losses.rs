//! Training objectives as pure functions of network outputs.
//!
//! Every tensor-valued loss here is built from differentiable primitives and
//! works in either float precision, so gradients can be checked at f64.
//! Logarithms are natural; `0 · log 0` is taken as 0 by clamping
//! probabilities at [`PROB_FLOOR`] inside the logarithm.

use candle_core::{DType, Tensor, D};

use crate::error::{contract, Error, Result};
use crate::matrix::ProbabilityMatrix;

pub const PROB_FLOOR: f64 = 1e-12;

/// Row-wise log-soft-max, shifted by the (detached) row maximum.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    Ok(log_softmax(logits)?.exp()?)
}

fn ensure_finite(logits: &Tensor, what: &str) -> Result<()> {
    let values = logits.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{what}: non-finite logit {} at flat index {pos}", values[pos])));
    }
    Ok(())
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(contract(format!("label {bad} outside [0, {k})")));
    }
    Ok(())
}

/// The smoothed target `(1 − α)·onehot(y) + α/K`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedLabel {
    pub class: usize,
    pub smoothing: f64,
    pub target: Vec<f64>,
}

impl SmoothedLabel {
    pub fn new(class: usize, num_classes: usize, smoothing: f64) -> Result<Self> {
        if class >= num_classes {
            return Err(contract(format!("label {class} outside [0, {num_classes})")));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(contract(format!("smoothing must lie in [0, 1), got {smoothing}")));
        }
        let off = smoothing / num_classes as f64;
        let mut target = vec![off; num_classes];
        target[class] = 1.0 - smoothing + off;
        Ok(Self { class, smoothing, target })
    }
}

fn smoothed_targets(labels: &[usize], k: usize, smoothing: f64, like: &Tensor) -> Result<Tensor> {
    let mut data = Vec::with_capacity(labels.len() * k);
    for &y in labels {
        data.extend(SmoothedLabel::new(y, k, smoothing)?.target);
    }
    Ok(Tensor::from_vec(data, (labels.len(), k), like.device())?.to_dtype(like.dtype())?)
}

/// Mean over rows of `−Σ_k t_k log softmax(logits)_k` for soft targets `t`.
pub fn soft_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if logits.dims() != targets.dims() {
        return Err(Error::Shape(format!("logits {:?} vs targets {:?}", logits.dims(), targets.dims())));
    }
    ensure_finite(logits, "soft cross-entropy")?;
    let logp = log_softmax(logits)?;
    Ok((targets.to_dtype(logits.dtype())? * logp)?.sum(D::Minus1)?.mean_all()?.neg()?)
}

/// Label-smoothed cross-entropy; plain cross-entropy when `smoothing = 0`.
pub fn cross_entropy_smoothed(logits: &Tensor, labels: &[usize], smoothing: f64) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    check_labels(labels, n, k)?;
    if !(0.0..1.0).contains(&smoothing) {
        return Err(contract(format!("smoothing must lie in [0, 1), got {smoothing}")));
    }
    let targets = smoothed_targets(labels, k, smoothing, logits)?;
    soft_cross_entropy(logits, &targets)
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    cross_entropy_smoothed(logits, labels, 0.0)
}

fn plogp_rows(probs: &Tensor) -> Result<Tensor> {
    let logp = probs.maximum(PROB_FLOOR)?.log()?;
    Ok((probs * logp)?.sum(D::Minus1)?)
}

/// Mean per-row entropy `−E Σ_k p_k log p_k` of soft-max outputs.
pub fn entropy_term(probs: &Tensor) -> Result<Tensor> {
    Ok(plogp_rows(probs)?.mean_all()?.neg()?)
}

/// `Σ_k p̂_k log p̂_k` for the batch-mean prediction `p̂`; equals
/// `KL(p̂ ‖ uniform) − log K`.
pub fn diversity_term(probs: &Tensor) -> Result<Tensor> {
    if probs.dim(0)? == 0 {
        return Err(contract("diversity term needs at least one row"));
    }
    let mean = probs.mean_keepdim(0)?;
    Ok(plogp_rows(&mean)?.sum_all()?)
}

/// Entropy term plus `beta` times the diversity term.
pub fn im_loss(probs: &Tensor, beta: f64) -> Result<Tensor> {
    let ent = entropy_term(probs)?;
    if beta == 0.0 {
        return Ok(ent);
    }
    Ok((ent + (diversity_term(probs)? * beta)?)?)
}

/// `gamma1` times cross-entropy against hard pseudo labels.
pub fn pseudo_label_ce(logits: &Tensor, pseudo_labels: &[usize], gamma1: f64) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    check_labels(pseudo_labels, n, k)?;
    Ok((cross_entropy(logits, pseudo_labels)? * gamma1)?)
}

/// `gamma2` times cross-entropy over the four relative-rotation classes.
pub fn rotation_ce(rotation_logits: &Tensor, rotation_labels: &[usize], gamma2: f64) -> Result<Tensor> {
    let (n, k) = rotation_logits.dims2()?;
    if k != crate::model::ROTATION_CLASSES {
        return Err(contract(format!("rotation scores need exactly 4 columns, got {k}")));
    }
    check_labels(rotation_labels, n, k)?;
    Ok((cross_entropy(rotation_logits, rotation_labels)? * gamma2)?)
}

/// Mean over all entries of `(p − q)²`.
pub fn squared_error(probs: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if probs.dims() != targets.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", probs.dims(), targets.dims())));
    }
    Ok((probs - targets.to_dtype(probs.dtype())?)?.sqr()?.mean_all()?)
}

/// Entropy `−Σ p log p` of one probability vector.
pub fn prediction_entropy(row: &[f64]) -> f64 {
    -row.iter().map(|&p| p * p.max(PROB_FLOOR).ln()).sum::<f64>()
}

/// `KL(p ‖ uniform)` of one probability vector.
pub fn kl_to_uniform(row: &[f64]) -> f64 {
    let k = row.len() as f64;
    row.iter().map(|&p| if p > 0.0 { p * (p * k).ln() } else { 0.0 }).sum()
}

/// Probability matrix as a `(n, K)` tensor of the given dtype.
pub fn probs_tensor(p: &ProbabilityMatrix, dtype: DType) -> Result<Tensor> {
    let t = Tensor::from_slice(p.matrix().as_slice(), (p.rows(), p.num_classes()), &candle_core::Device::Cpu)?;
    Ok(t.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(rows: &[&[f64]]) -> Tensor {
        let k = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(data, (rows.len(), k), &Device::Cpu).unwrap()
    }

    fn scalar(x: Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    fn logits_for(p: &[f64]) -> Vec<f64> {
        p.iter().map(|v| v.ln()).collect()
    }

    #[test]
    fn smoothed_ce_hand_value() {
        let l = logits_for(&[0.7, 0.2, 0.1]);
        let got = scalar(cross_entropy_smoothed(&t(&[&l]), &[0], 0.1).unwrap());
        let a = 0.1 / 3.0;
        let oracle = -((0.9 + a) * 0.7f64.ln() + a * 0.2f64.ln() + a * 0.1f64.ln());
        assert!((got - oracle).abs() < 1e-12);
        assert!((got - 0.4633).abs() < 5e-5, "{got}");
    }

    #[test]
    fn ce_perfect_and_uniform() {
        let got = scalar(cross_entropy(&t(&[&[50.0, -50.0, -50.0]]), &[0]).unwrap());
        assert!(got.abs() < 1e-12);
        let got = scalar(cross_entropy(&t(&[&[0.3, 0.3, 0.3, 0.3]]), &[2]).unwrap());
        assert!((got - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_bad_label_and_nan() {
        assert!(matches!(cross_entropy(&t(&[&[0.0, 1.0]]), &[2]), Err(Error::Contract(_))));
        assert!(matches!(cross_entropy(&t(&[&[f64::NAN, 1.0]]), &[0]), Err(Error::Numeric(_))));
        assert!(matches!(cross_entropy(&t(&[&[f64::INFINITY, 1.0]]), &[0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn smoothed_label_sums_to_one() {
        let s = SmoothedLabel::new(1, 7, 0.1).unwrap();
        assert!((s.target.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn entropy_examples() {
        assert!(scalar(entropy_term(&t(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap()).abs() < 1e-12);
        let u = scalar(entropy_term(&t(&[&[0.25; 4], &[0.25; 4]])).unwrap());
        assert!((u - 4f64.ln()).abs() < 1e-12);
        let e = scalar(entropy_term(&t(&[&[0.8, 0.2]])).unwrap());
        let oracle = -(0.8 * 0.8f64.ln() + 0.2 * 0.2f64.ln());
        assert!((e - oracle).abs() < 1e-12 && (e - 0.5004).abs() < 5e-5);
    }

    #[test]
    fn diversity_examples() {
        let d = scalar(diversity_term(&t(&[&[0.25; 4]])).unwrap());
        assert!((d + 4f64.ln()).abs() < 1e-12);
        let d = scalar(diversity_term(&t(&[&[0.8, 0.2]])).unwrap());
        assert!((d + 0.5004).abs() < 5e-5);
        let d = scalar(diversity_term(&t(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap());
        assert!((d + 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn im_loss_examples() {
        let p = t(&[&[0.8, 0.2], &[0.6, 0.4]]);
        assert_eq!(scalar(im_loss(&p, 0.0).unwrap()), scalar(entropy_term(&p).unwrap()));
        let onehot = t(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        assert!((scalar(im_loss(&onehot, 1.0).unwrap()) + 3f64.ln()).abs() < 1e-12);
        let same = t(&[&[0.8, 0.2], &[0.8, 0.2]]);
        assert!(scalar(im_loss(&same, 1.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn pseudo_label_ce_examples() {
        let l = t(&[&logits_for(&[0.6, 0.4])]);
        assert_eq!(scalar(pseudo_label_ce(&l, &[1], 0.0).unwrap()), 0.0);
        let v = scalar(pseudo_label_ce(&l, &[1], 0.3).unwrap());
        assert!((v - 0.3 * -(0.4f64.ln())).abs() < 1e-12 && (v - 0.2749).abs() < 5e-5);
        assert!(pseudo_label_ce(&l, &[2], 0.3).is_err());
    }

    #[test]
    fn rotation_ce_examples() {
        let l = t(&[&logits_for(&[0.7, 0.1, 0.1, 0.1])]);
        assert_eq!(scalar(rotation_ce(&l, &[0], 0.0).unwrap()), 0.0);
        let v = scalar(rotation_ce(&l, &[0], 0.6).unwrap());
        assert!((v - 0.6 * -(0.7f64.ln())).abs() < 1e-12 && (v - 0.2140).abs() < 5e-5);
        let u = scalar(rotation_ce(&t(&[&[0.0; 4]]), &[3], 0.6).unwrap());
        assert!((u - 0.6 * 4f64.ln()).abs() < 1e-12);
        assert!(rotation_ce(&l, &[4], 0.6).is_err());
        assert!(rotation_ce(&t(&[&[0.0; 3]]), &[0], 0.6).is_err());
    }

    #[test]
    fn prediction_entropy_examples() {
        assert_eq!(prediction_entropy(&[1.0, 0.0, 0.0]), 0.0);
        assert!((prediction_entropy(&[0.2; 5]) - 5f64.ln()).abs() < 1e-12);
        assert!((prediction_entropy(&[0.8, 0.2]) - 0.5004).abs() < 5e-5);
    }
}
