//! Target adaptation with a frozen source classifier: information
//! maximization, centroid pseudo labels and relative-rotation prediction.

use std::path::Path;

use candle_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{AdaptationConfig, SquarePolicy};
use crate::data::DomainDataset;
use crate::error::{contract, Error, Result};
use crate::io;
use crate::losses;
use crate::matrix::ProbabilityMatrix;
use crate::model::{Mode, ModelBundle, ROTATION_CLASSES};
use crate::optim::{lr_schedule, Sgd};
use crate::pseudo_label::pseudo_labels_with;
use crate::train::{default_augment, epoch_batches, full_pass, scalar, stream_rng, FullPass};

/// Rotates a square `side × side` plane counter-clockwise by `z · 90°`.
pub fn rotate_plane<T: Copy>(plane: &[T], side: usize, z: usize) -> Vec<T> {
    let mut cur = plane.to_vec();
    for _ in 0..z % 4 {
        let mut next = cur.clone();
        for y in 0..side {
            for x in 0..side {
                next[y * side + x] = cur[x * side + (side - 1 - y)];
            }
        }
        cur = next;
    }
    cur
}

/// Images with their relative-rotation labels and rotated copies.
#[derive(Debug, Clone)]
pub struct RotationBatch {
    /// `(n, C, S, S)` originals (after any pad or crop to a square).
    pub original: Tensor,
    pub labels: Vec<usize>,
    pub rotated: Tensor,
}

fn to_square(images: &Tensor, policy: SquarePolicy) -> Result<Tensor> {
    let (_, _, h, w) = images.dims4()?;
    if h == w {
        return Ok(images.clone());
    }
    match policy {
        SquarePolicy::Reject => Err(contract(format!(
            "rotation needs square images, got {h}x{w}; set square_policy to pad or crop"
        ))),
        SquarePolicy::PadZero => {
            let s = h.max(w);
            let x = images.pad_with_zeros(2, (s - h) / 2, s - h - (s - h) / 2)?;
            Ok(x.pad_with_zeros(3, (s - w) / 2, s - w - (s - w) / 2)?)
        }
        SquarePolicy::CenterCrop => {
            let s = h.min(w);
            Ok(images.narrow(2, (h - s) / 2, s)?.narrow(3, (w - s) / 2, s)?)
        }
    }
}

/// Draws one rotation class per image uniformly from `rng` and builds the
/// rotated copies. Label 0 leaves an image untouched.
pub fn make_rotation_batch(images: &Tensor, rng: &mut ChaCha8Rng, policy: SquarePolicy) -> Result<RotationBatch> {
    let original = to_square(images, policy)?;
    let (n, c, s, _) = original.dims4()?;
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..ROTATION_CLASSES)).collect();
    let rotated = rotate_images(&original, &labels)?;
    debug_assert_eq!(c * s * s * n, rotated.elem_count());
    Ok(RotationBatch { original, labels, rotated })
}

/// Rotates image `i` of a square `(n, C, S, S)` batch by `z_i · 90°`.
pub fn rotate_images(images: &Tensor, z: &[usize]) -> Result<Tensor> {
    let (n, c, s, w) = images.dims4()?;
    if s != w {
        return Err(contract("rotation needs square images"));
    }
    if z.len() != n {
        return Err(Error::Shape(format!("{} rotation labels for {n} images", z.len())));
    }
    let dtype = images.dtype();
    let data = images.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let plane = s * s;
    let mut out = Vec::with_capacity(data.len());
    for (i, &zi) in z.iter().enumerate() {
        for ch in 0..c {
            let start = (i * c + ch) * plane;
            out.extend(rotate_plane(&data[start..start + plane], s, zi));
        }
    }
    Ok(Tensor::from_vec(out, (n, c, s, s), images.device())?.to_dtype(dtype)?)
}

/// Rotation scores `h_c([g(x), g(x^z)])`, shape `(n, 4)`.
pub fn rotation_forward(model: &ModelBundle, batch: &RotationBatch, mode: &mut Mode) -> Result<Tensor> {
    if !model.has_rotation_head() {
        return Err(contract("rotation head is not attached"));
    }
    let f = model.encode(&batch.original, mode)?;
    let fr = model.encode(&batch.rotated, mode)?;
    model.rotation_logits(&f, &fr)
}

/// Per-epoch record of the adaptation objective (weighted terms, batch means).
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptEpoch {
    pub epoch: usize,
    pub entropy: f64,
    pub diversity: f64,
    /// γ1-weighted pseudo-label cross-entropy.
    pub ssl1: f64,
    /// γ2-weighted rotation cross-entropy.
    pub ssl2: f64,
    /// Accuracy after the epoch when evaluation labels are available.
    pub accuracy: Option<f64>,
}

pub struct AdaptRun {
    pub model: ModelBundle,
    /// Full-pass probabilities of the final model over the target set.
    pub probs: ProbabilityMatrix,
    pub log: Vec<AdaptEpoch>,
    /// Accuracy of the unadapted model, when labels are available.
    pub initial_accuracy: Option<f64>,
}

/// Adapts the encoder of `source_model` to `target`.
///
/// Target labels, when present, are used only for the accuracy column of
/// the log; training never reads them.
pub fn adapt_shot(source_model: &ModelBundle, target: &DomainDataset, config: &AdaptationConfig, seed: u64) -> Result<AdaptRun> {
    adapt_with_labeled(source_model, target, None, config, seed)
}

/// Adaptation with an optional labeled target set (semi-supervised variant).
/// Labeled samples get smoothed cross-entropy, one-hot weight in the
/// centroids, and a batch interleaved 1:1 (by `ssda_labeled_ratio`) with
/// every unlabeled batch.
pub fn adapt_with_labeled(
    source_model: &ModelBundle,
    unlabeled: &DomainDataset,
    labeled: Option<&DomainDataset>,
    config: &AdaptationConfig,
    seed: u64,
) -> Result<AdaptRun> {
    let labeled = labeled.filter(|l| !l.is_empty());
    if unlabeled.is_empty() && labeled.is_none() {
        return Err(Error::EmptyDataset("target set has no samples".into()));
    }
    let labeled_y = labeled.map(|l| l.require_labels()).transpose()?;
    let mut model = source_model.try_clone()?;
    model.freeze_classifier()?;
    let use_rotation = config.gamma2 > 0.0;
    if use_rotation && !model.has_rotation_head() {
        model.attach_rotation_head(seed)?;
    }
    if !use_rotation {
        model.detach_rotation_head();
    }
    let mut opt = Sgd::from_config(model.param_groups(), config);
    let device = model.device().clone();

    let n_u = unlabeled.len();
    let n_l = labeled.map_or(0, DomainDataset::len);
    let l_batch = ((config.batch_size as f64 * config.ssda_labeled_ratio).round() as usize).max(2);
    let augment_u = default_augment(if n_u > 0 { unlabeled } else { labeled.unwrap() });
    let mut order_rng = stream_rng(seed, 20);
    let mut aug_rng = stream_rng(seed, 21);
    let mut drop_rng = stream_rng(seed, 22);
    let mut rot_rng = stream_rng(seed, 23);

    let batches_per_epoch = if n_u > 0 {
        epoch_batches(n_u, config.batch_size, &mut stream_rng(seed, 0)).len()
    } else {
        epoch_batches(n_l, l_batch, &mut stream_rng(seed, 0)).len()
    };
    let total = (batches_per_epoch * config.adapt_epochs).max(1);
    let mut iter = 0usize;

    // Joint pass dataset: labeled samples first so anchors are 0..n_l.
    let joint = match labeled {
        Some(l) if n_u > 0 => Some(l.concat(unlabeled)?),
        _ => None,
    };
    let pass_set = joint.as_ref().unwrap_or(if n_u > 0 { unlabeled } else { labeled.unwrap() });
    let anchors: Vec<(usize, usize)> = match (&joint, &labeled_y) {
        (Some(_), Some(y)) => y.iter().copied().enumerate().collect(),
        _ => Vec::new(),
    };
    let eval_labels = pass_set.all_labels();
    let accuracy_of = |pass: &FullPass| {
        eval_labels
            .as_ref()
            .and_then(|y| crate::metrics::accuracy(&pass.predictions(), y).ok())
    };

    let mut pass = full_pass(&model, pass_set, config.update_bn_in_full_pass)?;
    let initial_accuracy = accuracy_of(&pass);
    let mut log = Vec::new();
    let threshold = config.filters_tiny_centroids().then_some(config.tiny_centroid_threshold);

    for epoch in 1..=config.adapt_epochs {
        // Pseudo labels from the frozen snapshot taken at the epoch start.
        let pseudo = if config.gamma1 > 0.0 && n_u > 0 {
            let a = pseudo_labels_with(&pass.features, &pass.probs, &anchors, threshold)?;
            Some(a.labels[anchors.len()..].to_vec())
        } else {
            None
        };

        let mut sums = [0.0f64; 4];
        let mut count = 0usize;
        let u_batches = if n_u > 0 { epoch_batches(n_u, config.batch_size, &mut order_rng) } else { Vec::new() };
        let mut l_order = labeled.map(|_| epoch_batches(n_l, l_batch, &mut order_rng)).unwrap_or_default();
        let steps = if n_u > 0 { u_batches.len() } else { l_order.len() };
        let mut l_cursor = 0usize;

        for step in 0..steps {
            let mut loss: Option<Tensor> = None;
            let add = |acc: Option<Tensor>, t: Tensor| -> Result<Option<Tensor>> {
                Ok(Some(match acc {
                    Some(a) => (a + t)?,
                    None => t,
                }))
            };
            let mut terms = [0.0f64; 4];

            if n_u > 0 {
                let batch = &u_batches[step];
                let x = unlabeled.train_batch(batch, augment_u, &mut aug_rng, &device)?;
                let feats = model.encode(&x, &mut Mode::Train(&mut drop_rng))?;
                let logits = model.classify(&feats)?;
                let probs = losses::softmax(&logits)?;
                let ent = losses::entropy_term(&probs)?;
                terms[0] = scalar(&ent)?;
                loss = add(loss, ent)?;
                if config.beta != 0.0 {
                    let div = losses::diversity_term(&probs)?;
                    terms[1] = scalar(&div)?;
                    loss = add(loss, (div * config.beta)?)?;
                }
                if let Some(pl) = &pseudo {
                    let y: Vec<usize> = batch.iter().map(|&i| pl[i]).collect();
                    let ce = losses::pseudo_label_ce(&logits, &y, config.gamma1)?;
                    terms[2] = scalar(&ce)?;
                    loss = add(loss, ce)?;
                }
                if use_rotation {
                    let rb = make_rotation_batch(&x, &mut rot_rng, config.square_policy)?;
                    let orig_feats = if rb.original.dims() == x.dims() {
                        feats.clone()
                    } else {
                        model.encode(&rb.original, &mut Mode::Train(&mut drop_rng))?
                    };
                    let rot_feats = model.encode(&rb.rotated, &mut Mode::Train(&mut drop_rng))?;
                    let rot_logits = model.rotation_logits(&orig_feats, &rot_feats)?;
                    let rce = losses::rotation_ce(&rot_logits, &rb.labels, config.gamma2)?;
                    terms[3] = scalar(&rce)?;
                    loss = add(loss, rce)?;
                }
            }

            if let (Some(l), Some(ly)) = (labeled, &labeled_y) {
                if l_cursor >= l_order.len() {
                    l_order = epoch_batches(n_l, l_batch, &mut order_rng);
                    l_cursor = 0;
                }
                let lb = &l_order[l_cursor];
                l_cursor += 1;
                let x = l.train_batch(lb, default_augment(l), &mut aug_rng, &device)?;
                let y: Vec<usize> = lb.iter().map(|&i| ly[i]).collect();
                let logits = model.forward(&x, &mut Mode::Train(&mut drop_rng))?;
                loss = add(loss, losses::cross_entropy_smoothed(&logits, &y, config.smoothing)?)?;
            }

            let loss = loss.expect("at least one term");
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "adaptation loss {value} at epoch {epoch}, step {step}: entropy {}, diversity {}, pseudo-label {}, rotation {}",
                    terms[0], terms[1], terms[2], terms[3]
                )));
            }
            let lr = lr_schedule(config.base_lr, iter as f64 / total as f64)?;
            opt.step(&loss.backward()?, lr)?;
            iter += 1;
            for (s, t) in sums.iter_mut().zip(terms) {
                *s += t;
            }
            count += 1;
        }

        pass = full_pass(&model, pass_set, config.update_bn_in_full_pass)?;
        let c = count.max(1) as f64;
        let record = AdaptEpoch {
            epoch,
            entropy: sums[0] / c,
            diversity: sums[1] / c,
            ssl1: sums[2] / c,
            ssl2: sums[3] / c,
            accuracy: accuracy_of(&pass),
        };
        log::info!(
            "adapt epoch {epoch}/{}: ent {:.4} div {:.4} ssl1 {:.4} ssl2 {:.4} acc {}",
            config.adapt_epochs,
            record.entropy,
            record.diversity,
            record.ssl1,
            record.ssl2,
            record.accuracy.map_or("-".into(), |a| format!("{a:.2}"))
        );
        log.push(record);
    }

    // Unlabeled rows only (the joint pass puts labeled samples first).
    let probs = if joint.is_some() {
        pass.probs.select_rows(&(n_l..n_l + n_u).collect::<Vec<_>>())
    } else {
        pass.probs
    };
    if model.frozen_digest() != Some(model.classifier_digest()?.as_str()) {
        return Err(contract("classifier parameters changed during adaptation"));
    }
    Ok(AdaptRun { model, probs, log, initial_accuracy })
}

/// `epoch,L_ent,L_div,L_ssl1,L_ssl2,accuracy`
pub fn write_log(path: &Path, log: &[AdaptEpoch]) -> Result<()> {
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                e.entropy.to_string(),
                e.diversity.to_string(),
                e.ssl1.to_string(),
                e.ssl2.to_string(),
                e.accuracy.map(|a| a.to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    io::write_table(path, &["epoch", "L_ent", "L_div", "L_ssl1", "L_ssl2", "accuracy"], &rows)
}

/// Loss curves of an adaptation log as SVG.
pub fn plot_log(path: &Path, log: &[AdaptEpoch]) -> Result<()> {
    let col = |f: fn(&AdaptEpoch) -> f64| log.iter().map(f).collect::<Vec<_>>();
    io::curves_svg(
        path,
        "adaptation losses",
        &[
            ("L_ent", col(|e| e.entropy)),
            ("L_div", col(|e| e.diversity)),
            ("L_ssl1", col(|e| e.ssl1)),
            ("L_ssl2", col(|e| e.ssl2)),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;

    #[test]
    fn rotate_two_by_two() {
        let img = ['a', 'b', 'c', 'd'];
        assert_eq!(rotate_plane(&img, 2, 1), vec!['b', 'd', 'a', 'c']);
        assert_eq!(rotate_plane(&img, 2, 0), img.to_vec());
        assert_eq!(rotate_plane(&rotate_plane(&img, 2, 2), 2, 2), img.to_vec());
        assert_eq!(rotate_plane(&rotate_plane(&img, 2, 1), 2, 3), img.to_vec());
    }

    #[test]
    fn rotation_batch_labels_and_identity() {
        let dev = Device::Cpu;
        let x = Tensor::arange(0f32, 2.0 * 9.0, &dev).unwrap().reshape((2, 1, 3, 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = make_rotation_batch(&x, &mut rng, SquarePolicy::Reject).unwrap();
        assert!(b.labels.iter().all(|&z| z < 4));
        let zero = rotate_images(&x, &[0, 0]).unwrap();
        assert_eq!(zero.flatten_all().unwrap().to_vec1::<f32>().unwrap(), x.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        let again = make_rotation_batch(&x, &mut ChaCha8Rng::seed_from_u64(0), SquarePolicy::Reject).unwrap();
        assert_eq!(again.labels, b.labels);
    }

    #[test]
    fn rotation_labels_are_roughly_uniform() {
        let x = Tensor::zeros((4000, 1, 2, 2), candle_core::DType::F32, &Device::Cpu).unwrap();
        let b = make_rotation_batch(&x, &mut ChaCha8Rng::seed_from_u64(9), SquarePolicy::Reject).unwrap();
        let mut counts = [0usize; 4];
        b.labels.iter().for_each(|&z| counts[z] += 1);
        assert!(counts.iter().all(|&c| (900..1100).contains(&c)), "{counts:?}");
    }

    #[test]
    fn non_square_policies() {
        let x = Tensor::zeros((1, 1, 2, 4), candle_core::DType::F32, &Device::Cpu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(make_rotation_batch(&x, &mut rng, SquarePolicy::Reject).is_err());
        let p = make_rotation_batch(&x, &mut rng, SquarePolicy::PadZero).unwrap();
        assert_eq!(p.original.dims(), &[1, 1, 4, 4]);
        let c = make_rotation_batch(&x, &mut rng, SquarePolicy::CenterCrop).unwrap();
        assert_eq!(c.rotated.dims(), &[1, 1, 2, 2]);
    }
}
