//! Multi-source, partial-set and semi-supervised variants built from the
//! closed-set stages.

use rand::seq::SliceRandom;

use crate::config::{AdaptationConfig, Scenario};
use crate::data::{DomainDataset, SplitRole};
use crate::error::{contract, Error, Result};
use crate::hypothesis_transfer::{adapt_shot, adapt_with_labeled, AdaptRun};
use crate::labeling_transfer::{apply_to_predictions, apply_with_anchors, LabelTransferRun};
use crate::matrix::{argmax, Matrix, ProbabilityMatrix};
use crate::model::ModelBundle;

fn check_aligned(scores: &[ProbabilityMatrix]) -> Result<(usize, usize)> {
    let first = scores.first().ok_or_else(|| contract("fusion needs at least one score matrix"))?;
    let shape = (first.rows(), first.num_classes());
    for (s, m) in scores.iter().enumerate().skip(1) {
        if (m.rows(), m.num_classes()) != shape {
            return Err(Error::Shape(format!(
                "score matrix {s} is {}x{}, expected {}x{}",
                m.rows(),
                m.num_classes(),
                shape.0,
                shape.1
            )));
        }
    }
    Ok(shape)
}

/// Argmax of the elementwise sum of the score matrices (ties to the
/// smallest class index).
pub fn msda_fuse(scores: &[ProbabilityMatrix]) -> Result<Vec<usize>> {
    let (n, k) = check_aligned(scores)?;
    let mut row = vec![0.0; k];
    Ok((0..n)
        .map(|i| {
            row.iter_mut().for_each(|v| *v = 0.0);
            for m in scores {
                row.iter_mut().zip(m.row(i)).for_each(|(acc, p)| *acc += p);
            }
            argmax(&row)
        })
        .collect())
}

/// Elementwise mean of the score matrices.
pub fn msda_average(scores: &[ProbabilityMatrix]) -> Result<ProbabilityMatrix> {
    let (n, k) = check_aligned(scores)?;
    let mut sum = Matrix::zeros(n, k);
    for m in scores {
        for i in 0..n {
            sum.row_mut(i).iter_mut().zip(m.row(i)).for_each(|(acc, p)| *acc += p);
        }
    }
    let s = scores.len() as f64;
    for i in 0..n {
        sum.row_mut(i).iter_mut().for_each(|v| *v /= s);
    }
    ProbabilityMatrix::new(sum)
}

pub struct MsdaRun {
    /// Adapted (or refined) model of every pair, in source order.
    pub models: Vec<ModelBundle>,
    /// Score matrix of every source-target pair, in source order.
    pub per_pair: Vec<ProbabilityMatrix>,
    pub fused: ProbabilityMatrix,
    pub predictions: Vec<usize>,
}

/// Adapts every source model to `target` independently and fuses the
/// per-pair scores. With `plus_plus`, each pair's predictions are refined
/// by labeling transfer before fusion.
pub fn msda_pipeline(
    source_models: &[ModelBundle],
    target: &DomainDataset,
    config: &AdaptationConfig,
    seed: u64,
    plus_plus: bool,
) -> Result<MsdaRun> {
    if source_models.is_empty() {
        return Err(contract("multi-source adaptation needs at least one source model"));
    }
    let mut per_pair = Vec::with_capacity(source_models.len());
    let mut models = Vec::with_capacity(source_models.len());
    for (s, model) in source_models.iter().enumerate() {
        log::info!("multi-source pair {}/{}", s + 1, source_models.len());
        let run = adapt_shot(model, target, config, seed)?;
        let (model, probs) = if plus_plus {
            let refined = apply_to_predictions(&run.probs, &run.model, target, config, seed)?.refined;
            (refined.model, refined.probs)
        } else {
            (run.model, run.probs)
        };
        models.push(model);
        per_pair.push(probs);
    }
    let predictions = msda_fuse(&per_pair)?;
    let fused = msda_average(&per_pair)?;
    Ok(MsdaRun { models, per_pair, fused, predictions })
}

/// Partial-set settings: no diversity term, tiny-centroid filtering on.
/// Other scenarios are returned unchanged.
pub fn pda_configure(config: &AdaptationConfig) -> AdaptationConfig {
    let mut c = config.clone();
    if c.scenario == Scenario::Partial {
        c.beta = 0.0;
    }
    c
}

/// `shots` labeled samples per class (fewer if a class is smaller), chosen
/// by seed; returns `(labeled, unlabeled)`. The unlabeled part has its
/// labels kept for evaluation only.
pub fn ssda_split(target: &DomainDataset, shots: usize, seed: u64) -> Result<(DomainDataset, DomainDataset)> {
    let labels = target.require_labels()?;
    let mut order: Vec<usize> = (0..target.len()).collect();
    order.shuffle(&mut crate::train::stream_rng(seed, 40));
    let mut taken = vec![0usize; target.num_classes()];
    let mut labeled = Vec::new();
    for &i in &order {
        let y = labels[i];
        if taken[y] < shots {
            taken[y] += 1;
            labeled.push(i);
        }
    }
    labeled.sort_unstable();
    let mut is_labeled = vec![false; target.len()];
    labeled.iter().for_each(|&i| is_labeled[i] = true);
    let unlabeled: Vec<usize> = (0..target.len()).filter(|&i| !is_labeled[i]).collect();
    Ok((target.subset(&labeled, SplitRole::Train), target.subset(&unlabeled, SplitRole::Train)))
}

/// Semi-supervised adaptation with a few labeled target samples.
pub fn ssda_adapt(
    source_model: &ModelBundle,
    labeled: &DomainDataset,
    unlabeled: &DomainDataset,
    config: &AdaptationConfig,
    seed: u64,
) -> Result<AdaptRun> {
    if labeled.is_empty() {
        return Err(Error::EmptyDataset("semi-supervised adaptation needs labeled target samples".into()));
    }
    adapt_with_labeled(source_model, unlabeled, Some(labeled), config, seed)
}

/// Labeling transfer for the semi-supervised case: the split runs over the
/// unlabeled samples only and the labeled samples join the labeled pool.
/// `predictions` has one row per unlabeled sample; indices of the returned
/// run refer to `labeled ++ unlabeled`.
pub fn ssda_label_transfer(
    predictions: &ProbabilityMatrix,
    model_init: &ModelBundle,
    labeled: &DomainDataset,
    unlabeled: &DomainDataset,
    config: &AdaptationConfig,
    seed: u64,
) -> Result<LabelTransferRun> {
    let y = labeled.require_labels()?;
    let k = model_init.num_classes();
    let combined = labeled.concat(unlabeled)?;
    let predictions = ProbabilityMatrix::one_hot(&y, k)?.vstack(predictions)?;
    let anchors: Vec<(usize, usize)> = y.iter().copied().enumerate().collect();
    apply_with_anchors(&predictions, &anchors, model_init, &combined, config, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pm(rows: &[[f64; 2]]) -> ProbabilityMatrix {
        ProbabilityMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn fuse_examples() {
        let a = pm(&[[0.6, 0.4]]);
        let b = pm(&[[0.3, 0.7]]);
        assert_eq!(msda_fuse(&[a.clone(), b.clone()]).unwrap(), vec![1]);
        assert_eq!(msda_fuse(&[b, a.clone()]).unwrap(), vec![1]);
        assert_eq!(msda_fuse(std::slice::from_ref(&a)).unwrap(), a.argmax());
        assert_eq!(msda_fuse(&[pm(&[[0.5, 0.5]])]).unwrap(), vec![0]);
    }

    #[test]
    fn fuse_rejects_misaligned() {
        let a = pm(&[[0.6, 0.4]]);
        let b = pm(&[[0.6, 0.4], [0.1, 0.9]]);
        assert!(matches!(msda_fuse(&[a, b]), Err(Error::Shape(_))));
        assert!(msda_fuse(&[]).is_err());
    }

    #[test]
    fn fusion_beats_each_source_on_disjoint_confidence() {
        // Source A is confident and right on classes {0,1}, source B on {2,3};
        // each is near-uniform elsewhere with a wrong lean.
        let truth = [0usize, 1, 2, 3];
        let a = ProbabilityMatrix::from_rows(&[
            vec![0.9, 0.04, 0.03, 0.03],
            vec![0.04, 0.9, 0.03, 0.03],
            vec![0.3, 0.24, 0.23, 0.23],
            vec![0.3, 0.24, 0.23, 0.23],
        ])
        .unwrap();
        let b = ProbabilityMatrix::from_rows(&[
            vec![0.23, 0.23, 0.24, 0.3],
            vec![0.23, 0.23, 0.24, 0.3],
            vec![0.03, 0.03, 0.9, 0.04],
            vec![0.03, 0.03, 0.04, 0.9],
        ])
        .unwrap();
        let acc = |p: &[usize]| p.iter().zip(&truth).filter(|(x, y)| x == y).count();
        let fused = msda_fuse(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(acc(&fused), 4);
        assert!(acc(&fused) >= acc(&a.argmax()) && acc(&fused) >= acc(&b.argmax()));
    }

    #[test]
    fn pda_configure_is_idempotent_and_guarded() {
        let mut c = AdaptationConfig::for_benchmark(crate::config::Benchmark::OfficeHome);
        assert_eq!(pda_configure(&c), c);
        c.scenario = Scenario::Partial;
        let once = pda_configure(&c);
        assert_eq!(once.beta, 0.0);
        assert!(once.filters_tiny_centroids());
        assert_eq!(once.tiny_centroid_threshold, 10);
        assert_eq!(pda_configure(&once), once);
    }

    proptest! {
        #[test]
        fn fusion_is_order_invariant(
            raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 3), 2..12),
            shift in 0usize..3,
        ) {
            let norm = |r: &Vec<f64>| { let s: f64 = r.iter().sum(); r.iter().map(|v| v / s).collect::<Vec<_>>() };
            let a = ProbabilityMatrix::from_rows(&raw.iter().map(norm).collect::<Vec<_>>()).unwrap();
            let b = ProbabilityMatrix::from_rows(&raw.iter().map(|r| { let mut r = r.clone(); r.rotate_left(shift); norm(&r) }).collect::<Vec<_>>()).unwrap();
            prop_assert_eq!(msda_fuse(&[a.clone(), b.clone()]).unwrap(), msda_fuse(&[b, a.clone()]).unwrap());
            prop_assert_eq!(msda_fuse(&[a.clone(), a.clone()]).unwrap(), a.argmax());
        }
    }
}
