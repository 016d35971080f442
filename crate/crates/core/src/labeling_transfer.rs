//! Second-stage refinement: split the target set by prediction entropy into
//! a confident pool (kept with its predicted labels) and the rest, then
//! train with MixMatch using the confident pool as labeled data.

use std::path::Path;

use candle_core::{Tensor, D};
use rand::seq::SliceRandom;
use rand_distr::{Beta, Distribution};

use crate::config::AdaptationConfig;
use crate::data::{Augment, DomainDataset};
use crate::error::{contract, Error, Result};
use crate::io;
use crate::losses;
use crate::matrix::ProbabilityMatrix;
use crate::model::{Mode, ModelBundle};
use crate::optim::{lr_schedule, Sgd};
use crate::train::{epoch_batches, full_pass, one_hot, scalar, stream_rng};

/// Pixel shift used to augment digit-sized inputs (no crop margin).
pub const DIGIT_TRANSLATION: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct EntropySplit {
    pub entropies: Vec<f64>,
    /// Fraction `a` of samples strictly below the mean entropy.
    pub fraction: f64,
    /// Per-class quota `t_k = ⌊a · count_k⌋`.
    pub quotas: Vec<usize>,
    /// `(index, label)` pairs of the confident pool, ascending by index.
    pub labeled: Vec<(usize, usize)>,
    /// Remaining indices, ascending.
    pub unlabeled: Vec<usize>,
    /// Argmax prediction of every sample.
    pub predicted: Vec<usize>,
}

/// `a = #{i : ξ_i < mean(ξ)} / n`.
pub fn split_fraction(entropies: &[f64]) -> Result<f64> {
    if entropies.is_empty() {
        return Err(contract("split fraction needs at least one entropy"));
    }
    let n = entropies.len() as f64;
    let mean = entropies.iter().sum::<f64>() / n;
    Ok(entropies.iter().filter(|&&e| e < mean).count() as f64 / n)
}

/// Per class `k`, the `⌊a · count_k⌋` lowest-entropy samples predicted as
/// `k` join the labeled pool (ties by index).
pub fn class_balanced_split(entropies: &[f64], predicted: &[usize], a: f64, k: usize) -> Result<EntropySplit> {
    split_subset(entropies, predicted, a, k, &(0..entropies.len()).collect::<Vec<_>>())
}

fn split_subset(entropies: &[f64], predicted: &[usize], a: f64, k: usize, members: &[usize]) -> Result<EntropySplit> {
    if entropies.len() != predicted.len() {
        return Err(Error::Shape(format!("{} entropies for {} labels", entropies.len(), predicted.len())));
    }
    if !(0.0..=1.0).contains(&a) {
        return Err(contract(format!("split fraction must lie in [0, 1], got {a}")));
    }
    if let Some(bad) = predicted.iter().find(|&&y| y >= k) {
        return Err(contract(format!("label {bad} outside [0, {k})")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for &i in members {
        by_class[predicted[i]].push(i);
    }
    let mut quotas = Vec::with_capacity(k);
    let mut labeled = Vec::new();
    for (c, mut idx) in by_class.into_iter().enumerate() {
        let t = (a * idx.len() as f64).floor() as usize;
        idx.sort_by(|&x, &y| entropies[x].total_cmp(&entropies[y]).then(x.cmp(&y)));
        labeled.extend(idx[..t].iter().map(|&i| (i, c)));
        quotas.push(t);
    }
    labeled.sort_unstable();
    let mut in_labeled = vec![false; entropies.len()];
    labeled.iter().for_each(|&(i, _)| in_labeled[i] = true);
    let unlabeled = members.iter().copied().filter(|&i| !in_labeled[i]).collect::<Vec<_>>();
    Ok(EntropySplit {
        entropies: entropies.to_vec(),
        fraction: a,
        quotas,
        labeled,
        unlabeled,
        predicted: predicted.to_vec(),
    })
}

/// Entropy split of `probs`. `anchors` (`(index, true label)` pairs) are
/// excluded from the split and then added to the labeled pool.
pub fn entropy_split(probs: &ProbabilityMatrix, anchors: &[(usize, usize)]) -> Result<EntropySplit> {
    let entropies = probs.entropies();
    let predicted = probs.argmax();
    let mut anchored = vec![false; probs.rows()];
    for &(i, y) in anchors {
        if i >= probs.rows() || y >= probs.num_classes() {
            return Err(contract(format!("anchor ({i}, {y}) out of range")));
        }
        anchored[i] = true;
    }
    let members: Vec<usize> = (0..probs.rows()).filter(|&i| !anchored[i]).collect();
    let pool: Vec<f64> = members.iter().map(|&i| entropies[i]).collect();
    let a = if pool.is_empty() { 0.0 } else { split_fraction(&pool)? };
    let mut split = split_subset(&entropies, &predicted, a, probs.num_classes(), &members)?;
    split.labeled.extend_from_slice(anchors);
    split.labeled.sort_unstable();
    Ok(split)
}

/// `p^(1/T)` renormalized.
pub fn sharpen(p: &[f64], temperature: f64) -> Vec<f64> {
    let powered: Vec<f64> = p.iter().map(|v| v.powf(1.0 / temperature)).collect();
    let s: f64 = powered.iter().sum();
    powered.into_iter().map(|v| v / s).collect()
}

fn sharpen_tensor(p: &Tensor, temperature: f64) -> Result<Tensor> {
    let powered = p.powf(1.0 / temperature)?;
    Ok(powered.broadcast_div(&powered.sum_keepdim(D::Minus1)?)?)
}

/// `λ' = max(λ, 1 − λ)`; returns `λ'·a + (1 − λ')·b`.
pub fn mixup(a: &Tensor, b: &Tensor, lambda: f64) -> Result<Tensor> {
    let l = lambda.max(1.0 - lambda);
    Ok(((a * l)? + (b * (1.0 - l))?)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixMatchEpoch {
    pub epoch: usize,
    pub labeled_loss: f64,
    pub unlabeled_loss: f64,
    pub unlabeled_weight: f64,
    pub accuracy: Option<f64>,
}

pub struct RefineRun {
    pub model: ModelBundle,
    pub probs: ProbabilityMatrix,
    pub log: Vec<MixMatchEpoch>,
}

fn mixmatch_augment(dataset: &DomainDataset) -> Augment {
    if dataset.stored != dataset.input {
        Augment::CropFlip
    } else {
        Augment::Translate(DIGIT_TRANSLATION)
    }
}

/// MixMatch on `target` with the split's labeled pool as supervision. The
/// encoder starts from `init_model`; the classifier is re-initialized and
/// trainable.
pub fn mixmatch_refine(
    init_model: &ModelBundle,
    split: &EntropySplit,
    target: &DomainDataset,
    config: &AdaptationConfig,
    seed: u64,
) -> Result<RefineRun> {
    if split.labeled.is_empty() {
        return Err(Error::EmptyLabeledPool { fraction: split.fraction });
    }
    if split.predicted.len() != target.len() {
        return Err(Error::Shape(format!("split over {} samples, target has {}", split.predicted.len(), target.len())));
    }
    let mut model = init_model.try_clone()?;
    model.detach_rotation_head();
    model.reset_classifier(seed)?;
    let mut opt = Sgd::from_config(model.param_groups(), config);
    let device = model.device().clone();
    let k = model.num_classes();
    let augment = mixmatch_augment(target);
    let beta = Beta::new(config.mixmatch_alpha, config.mixmatch_alpha)
        .map_err(|e| contract(format!("mixmatch_alpha: {e}")))?;

    let lab_idx: Vec<usize> = split.labeled.iter().map(|&(i, _)| i).collect();
    let lab_y: Vec<usize> = split.labeled.iter().map(|&(_, y)| y).collect();
    let unl_idx = &split.unlabeled;
    let (n_l, n_u) = (lab_idx.len(), unl_idx.len());
    let bs = config.batch_size.max(2);
    let steps = n_l.max(n_u).div_ceil(bs).max(1);
    let total = (steps * config.mixmatch_epochs).max(1);

    let mut order_rng = stream_rng(seed, 30);
    let mut aug_rng = stream_rng(seed, 31);
    let mut drop_rng = stream_rng(seed, 32);
    let mut mix_rng = stream_rng(seed, 33);
    let mut iter = 0usize;
    let mut log = Vec::new();
    let eval_labels = target.all_labels();
    let augmentations = config.mixmatch_augmentations.max(1);

    let mut l_order: Vec<Vec<usize>> = Vec::new();
    let mut u_order: Vec<Vec<usize>> = Vec::new();
    for epoch in 1..=config.mixmatch_epochs {
        let mut sums = [0.0f64; 2];
        let mut weight = 0.0;
        for _ in 0..steps {
            if l_order.is_empty() {
                l_order = epoch_batches(n_l, bs, &mut order_rng);
                l_order.reverse();
            }
            let lb: Vec<usize> = l_order.pop().unwrap();
            let xl = target.train_batch(&lb.iter().map(|&j| lab_idx[j]).collect::<Vec<_>>(), augment, &mut aug_rng, &device)?;
            let yl = one_hot(&lb.iter().map(|&j| lab_y[j]).collect::<Vec<_>>(), k, &device)?;
            let mut inputs = vec![xl];
            let mut targets = vec![yl];
            if n_u > 0 {
                if u_order.is_empty() {
                    u_order = epoch_batches(n_u, bs, &mut order_rng);
                    u_order.reverse();
                }
                let ub: Vec<usize> = u_order.pop().unwrap().iter().map(|&j| unl_idx[j]).collect();
                let views: Vec<Tensor> = (0..augmentations)
                    .map(|_| target.train_batch(&ub, augment, &mut aug_rng, &device))
                    .collect::<Result<_>>()?;
                let mut guess: Option<Tensor> = None;
                for v in &views {
                    // a lone unlabeled sample has no batch statistics; guess it with running ones
                    let logits = if ub.len() > 1 {
                        model.forward(v, &mut Mode::Train(&mut drop_rng))?
                    } else {
                        model.forward(v, &mut Mode::Eval)?
                    };
                    let p = losses::softmax(&logits)?.detach();
                    guess = Some(match guess {
                        Some(g) => (g + p)?,
                        None => p,
                    });
                }
                let guess = (guess.unwrap() / augmentations as f64)?;
                let q = sharpen_tensor(&guess, config.mixmatch_temperature)?.detach();
                for v in views {
                    inputs.push(v);
                    targets.push(q.clone());
                }
            }
            let x = Tensor::cat(&inputs, 0)?;
            let y = Tensor::cat(&targets, 0)?;
            let n = x.dim(0)?;
            let mut perm: Vec<u32> = (0..n as u32).collect();
            perm.shuffle(&mut mix_rng);
            let perm = Tensor::from_vec(perm, n, &device)?;
            let lambda = beta.sample(&mut mix_rng);
            let xm = mixup(&x, &x.index_select(&perm, 0)?, lambda)?;
            let ym = mixup(&y, &y.index_select(&perm, 0)?, lambda)?;

            let logits = model.forward(&xm, &mut Mode::Train(&mut drop_rng))?;
            let bl = lb.len();
            let lx = losses::soft_cross_entropy(&logits.narrow(0, 0, bl)?, &ym.narrow(0, 0, bl)?)?;
            let progress = iter as f64 / total as f64;
            weight = config.mixmatch_unlabeled_weight * progress.clamp(0.0, 1.0);
            let mut loss = lx.clone();
            let mut lu_value = 0.0;
            if n > bl {
                let pu = losses::softmax(&logits.narrow(0, bl, n - bl)?)?;
                let lu = losses::squared_error(&pu, &ym.narrow(0, bl, n - bl)?)?;
                lu_value = scalar(&lu)?;
                loss = (loss + (lu * weight)?)?;
            }
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("MixMatch loss {value} at epoch {epoch}")));
            }
            opt.step(&loss.backward()?, lr_schedule(config.base_lr, progress)?)?;
            sums[0] += scalar(&lx)?;
            sums[1] += lu_value;
            iter += 1;
        }
        let accuracy = match &eval_labels {
            Some(y) => Some(crate::metrics::accuracy(&full_pass(&model, target, false)?.predictions(), y)?),
            None => None,
        };
        let record = MixMatchEpoch {
            epoch,
            labeled_loss: sums[0] / steps as f64,
            unlabeled_loss: sums[1] / steps as f64,
            unlabeled_weight: weight,
            accuracy,
        };
        log::info!(
            "mixmatch epoch {epoch}/{}: Lx {:.4} Lu {:.5} w {:.2} acc {}",
            config.mixmatch_epochs,
            record.labeled_loss,
            record.unlabeled_loss,
            weight,
            accuracy.map_or("-".into(), |a| format!("{a:.2}"))
        );
        log.push(record);
    }
    let probs = full_pass(&model, target, false)?.probs;
    Ok(RefineRun { model, probs, log })
}

pub struct LabelTransferRun {
    pub split: EntropySplit,
    pub refined: RefineRun,
}

/// Entropy split of `predictions` (from any predictor) followed by MixMatch.
pub fn apply_to_predictions(
    predictions: &ProbabilityMatrix,
    model_init: &ModelBundle,
    target: &DomainDataset,
    config: &AdaptationConfig,
    seed: u64,
) -> Result<LabelTransferRun> {
    apply_with_anchors(predictions, &[], model_init, target, config, seed)
}

/// As [`apply_to_predictions`], with `(index, true label)` anchors that are
/// kept out of the split and added to the labeled pool.
pub fn apply_with_anchors(
    predictions: &ProbabilityMatrix,
    anchors: &[(usize, usize)],
    model_init: &ModelBundle,
    target: &DomainDataset,
    config: &AdaptationConfig,
    seed: u64,
) -> Result<LabelTransferRun> {
    if predictions.rows() != target.len() {
        return Err(Error::Shape(format!("{} prediction rows for {} target samples", predictions.rows(), target.len())));
    }
    if predictions.num_classes() != model_init.num_classes() {
        return Err(Error::Shape(format!(
            "predictions have {} classes, model has {}",
            predictions.num_classes(),
            model_init.num_classes()
        )));
    }
    let split = entropy_split(predictions, anchors)?;
    log::info!(
        "entropy split: a = {:.4}, labeled {}, unlabeled {}",
        split.fraction,
        split.labeled.len(),
        split.unlabeled.len()
    );
    let refined = mixmatch_refine(model_init, &split, target, config, seed)?;
    Ok(LabelTransferRun { split, refined })
}

/// `index,entropy,predicted_label,pool`
pub fn write_split(path: &Path, split: &EntropySplit) -> Result<()> {
    let mut pool = vec!["unlabeled"; split.entropies.len()];
    let mut label = split.predicted.clone();
    for &(i, y) in &split.labeled {
        pool[i] = "labeled";
        label[i] = y;
    }
    let rows: Vec<Vec<String>> = (0..split.entropies.len())
        .map(|i| vec![i.to_string(), split.entropies[i].to_string(), label[i].to_string(), pool[i].to_string()])
        .collect();
    io::write_table(path, &["index", "entropy", "predicted_label", "pool"], &rows)
}

/// Histogram of prediction entropies with the mean marked.
pub fn plot_entropy_histogram(path: &Path, split: &EntropySplit) -> Result<()> {
    let n = split.entropies.len().max(1) as f64;
    let mean = split.entropies.iter().sum::<f64>() / n;
    io::histogram_svg(path, "prediction entropy", &split.entropies, 40, Some(mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fraction_examples() {
        assert_eq!(split_fraction(&[0.1, 0.2, 0.9, 1.0]).unwrap(), 0.5);
        assert_eq!(split_fraction(&[0.4; 5]).unwrap(), 0.0);
        assert_eq!(split_fraction(&[0.0, 1.0, 1.0, 1.0]).unwrap(), 0.25);
        assert!(split_fraction(&[]).is_err());
    }

    #[test]
    fn quota_examples() {
        let ent = [0.5, 0.1, 0.3, 0.2, 0.9, 0.4];
        let pred = [0, 0, 0, 0, 1, 1];
        let s = class_balanced_split(&ent, &pred, 0.5, 2).unwrap();
        assert_eq!(s.quotas, vec![2, 1]);
        assert_eq!(s.labeled, vec![(1, 0), (3, 0), (5, 1)]);
        assert_eq!(s.unlabeled, vec![0, 2, 4]);
        assert!(class_balanced_split(&ent, &pred, 0.0, 2).unwrap().labeled.is_empty());
        let all = class_balanced_split(&ent, &pred, 1.0, 2).unwrap();
        assert_eq!(all.quotas, vec![4, 2]);
        assert!(all.unlabeled.is_empty());
    }

    #[test]
    fn ties_broken_by_index() {
        let s = class_balanced_split(&[0.2, 0.2, 0.2], &[0, 0, 0], 0.5, 2).unwrap();
        assert_eq!(s.labeled, vec![(0, 0)]);
    }

    #[test]
    fn sharpening_raises_the_max() {
        let p = [0.5, 0.3, 0.2];
        let q = sharpen(&p, 0.5);
        assert!(q[0] > p[0]);
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(sharpen(&[1.0, 0.0], 0.5), vec![1.0, 0.0]);
    }

    #[test]
    fn labeled_pool_can_have_higher_mean_entropy() {
        // Quotas are per class, so a confident-but-rare class can leave the
        // labeled pool with only high-entropy members.
        let ent = [2.0, 2.0, 2.0, 2.0, 0.0, 0.0];
        let pred = [0, 0, 0, 0, 1, 1];
        let a = split_fraction(&ent).unwrap();
        assert!((a - 1.0 / 3.0).abs() < 1e-15);
        let s = class_balanced_split(&ent, &pred, a, 2).unwrap();
        assert_eq!(s.quotas, vec![1, 0]);
        let mean = |idx: &[usize]| idx.iter().map(|&i| ent[i]).sum::<f64>() / idx.len() as f64;
        let labeled: Vec<usize> = s.labeled.iter().map(|p| p.0).collect();
        assert!(mean(&labeled) > mean(&s.unlabeled));
    }

    #[test]
    fn anchors_join_the_labeled_pool() {
        let p = ProbabilityMatrix::from_rows(&[vec![0.5, 0.5], vec![0.9, 0.1], vec![0.6, 0.4], vec![0.99, 0.01]]).unwrap();
        let s = entropy_split(&p, &[(0, 1)]).unwrap();
        assert!(s.labeled.contains(&(0, 1)));
        assert!(!s.unlabeled.contains(&0));
    }

    #[test]
    fn mixup_is_dominated_by_first_argument() {
        let dev = candle_core::Device::Cpu;
        let a = Tensor::new(&[1f32, 1.0], &dev).unwrap();
        let b = Tensor::new(&[0f32, 0.0], &dev).unwrap();
        for lambda in [0.0, 0.2, 0.5, 0.9] {
            let m = mixup(&a, &b, lambda).unwrap().to_vec1::<f32>().unwrap();
            assert!(m.iter().all(|&v| v >= 0.5));
        }
    }

    proptest! {
        #[test]
        fn split_invariants(
            rows in prop::collection::vec((0.0f64..2.0, 0usize..4), 1..60),
        ) {
            let ent: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let pred: Vec<usize> = rows.iter().map(|r| r.1).collect();
            let a = split_fraction(&ent).unwrap();
            let s = class_balanced_split(&ent, &pred, a, 4).unwrap();
            let mut all: Vec<usize> = s.labeled.iter().map(|p| p.0).chain(s.unlabeled.iter().copied()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..ent.len()).collect::<Vec<_>>());
            for c in 0..4 {
                let count = pred.iter().filter(|&&y| y == c).count();
                prop_assert_eq!(s.quotas[c], (a * count as f64).floor() as usize);
                prop_assert_eq!(s.labeled.iter().filter(|p| p.1 == c).count(), s.quotas[c]);
                prop_assert!(s.quotas[c] <= count);
            }
            prop_assert!(s.quotas.iter().sum::<usize>() <= (a * ent.len() as f64).floor() as usize + 4);
            prop_assert_eq!(&s, &class_balanced_split(&ent, &pred, a, 4).unwrap());
        }

        #[test]
        fn mixup_is_convex(a in prop::collection::vec(0f32..1.0, 8), b in prop::collection::vec(0f32..1.0, 8), lambda in 0.0f64..1.0) {
            let dev = candle_core::Device::Cpu;
            let ta = Tensor::new(a.as_slice(), &dev).unwrap();
            let tb = Tensor::new(b.as_slice(), &dev).unwrap();
            let m = mixup(&ta, &tb, lambda).unwrap().to_vec1::<f32>().unwrap();
            for i in 0..8 {
                let (lo, hi) = (a[i].min(b[i]), a[i].max(b[i]));
                prop_assert!(m[i] >= lo - 1e-6 && m[i] <= hi + 1e-6);
            }
        }
    }
}
