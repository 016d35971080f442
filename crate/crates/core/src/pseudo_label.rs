//! Target pseudo labels from class centroids: soft-weighted centroids, a
//! nearest-centroid assignment, one round of hard-mean refinement and a
//! second assignment. Partial-set runs drop tiny refined centroids.

use std::path::Path;

use crate::config::AdaptationConfig;
use crate::error::{contract, Error, Result};
use crate::matrix::{FeatureMatrix, ProbabilityMatrix};

/// Soft mass below which a class has no centroid.
pub const MIN_CLASS_MASS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generation {
    Soft,
    Refined,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    /// One entry per class; `None` marks an absent centroid.
    pub centroids: Vec<Option<Vec<f64>>>,
    /// Soft mass (soft generation) or hard member count (refined generation).
    pub member_counts: Vec<f64>,
    pub generation: Generation,
}

impl CentroidSet {
    pub fn num_classes(&self) -> usize {
        self.centroids.len()
    }

    pub fn present(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.centroids.iter().enumerate().filter_map(|(k, c)| c.as_deref().map(|c| (k, c)))
    }

    pub fn num_present(&self) -> usize {
        self.present().count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelAssignment {
    pub labels: Vec<usize>,
    pub soft: CentroidSet,
    pub refined: CentroidSet,
    pub distance: &'static str,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn usable(c: &[f64]) -> bool {
    let n = norm(c);
    n > 0.0 && n.is_finite()
}

fn check_dims(features: &FeatureMatrix, probs: &ProbabilityMatrix) -> Result<()> {
    if features.rows() != probs.rows() {
        return Err(Error::Shape(format!("{} feature rows vs {} probability rows", features.rows(), probs.rows())));
    }
    if features.rows() == 0 {
        return Err(contract("centroids need at least one sample"));
    }
    Ok(())
}

/// `c_k = Σ_i p_ik g_i / Σ_i p_ik` for every class with enough mass.
pub fn soft_centroids(features: &FeatureMatrix, probs: &ProbabilityMatrix) -> Result<CentroidSet> {
    check_dims(features, probs)?;
    let (k, d) = (probs.num_classes(), features.cols());
    let mut sums = vec![vec![0.0; d]; k];
    let mut mass = vec![0.0; k];
    for (g, p) in features.iter_rows().zip(probs.iter_rows()) {
        for c in 0..k {
            if p[c] == 0.0 {
                continue;
            }
            mass[c] += p[c];
            for (s, x) in sums[c].iter_mut().zip(g) {
                *s += p[c] * x;
            }
        }
    }
    let centroids = sums
        .into_iter()
        .zip(&mass)
        .map(|(s, &m)| {
            if m < MIN_CLASS_MASS {
                return None;
            }
            let c: Vec<f64> = s.into_iter().map(|v| v / m).collect();
            usable(&c).then_some(c)
        })
        .collect();
    Ok(CentroidSet { centroids, member_counts: mass, generation: Generation::Soft })
}

/// `1 − ⟨a, b⟩ / (‖a‖ ‖b‖)`, in [0, 2].
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(contract("cosine distance is undefined for a zero vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0))
}

/// Nearest present centroid under cosine distance; ties go to the smaller class.
pub fn nearest_centroid_assign(features: &FeatureMatrix, centroids: &CentroidSet) -> Result<Vec<usize>> {
    let present: Vec<(usize, &[f64])> = centroids.present().collect();
    if present.is_empty() {
        return Err(Error::NoCentroids);
    }
    features
        .iter_rows()
        .map(|g| {
            let mut best = (f64::INFINITY, usize::MAX);
            for &(k, c) in &present {
                let dist = cosine_distance(g, c)?;
                if dist < best.0 {
                    best = (dist, k);
                }
            }
            Ok(best.1)
        })
        .collect()
}

/// Hard class means; classes without members inherit `fallback`.
fn hard_centroids(features: &FeatureMatrix, labels: &[usize], fallback: &CentroidSet) -> CentroidSet {
    let (k, d) = (fallback.num_classes(), features.cols());
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (g, &y) in features.iter_rows().zip(labels) {
        counts[y] += 1;
        for (s, x) in sums[y].iter_mut().zip(g) {
            *s += x;
        }
    }
    let centroids = sums
        .into_iter()
        .enumerate()
        .map(|(c, s)| {
            if counts[c] == 0 {
                return fallback.centroids[c].clone();
            }
            let m: Vec<f64> = s.into_iter().map(|v| v / counts[c] as f64).collect();
            usable(&m).then_some(m)
        })
        .collect();
    CentroidSet {
        centroids,
        member_counts: counts.into_iter().map(|c| c as f64).collect(),
        generation: Generation::Refined,
    }
}

/// Rows scaled to unit length; a zero row is a contract violation.
pub fn unit_rows(features: &FeatureMatrix) -> Result<FeatureMatrix> {
    let mut out = features.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = norm(row);
        if n == 0.0 || !n.is_finite() {
            return Err(contract(format!("feature row {i} has norm {n}")));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// The full pseudo-labeling pass. Features are scaled to unit length before
/// averaging so that the labels depend only on feature directions.
/// `anchors` are `(index, true label)` pairs of labeled samples: their
/// probability rows become one-hot and their labels are fixed before
/// refinement. `tiny_threshold` enables dropping refined centroids with
/// fewer members.
pub fn pseudo_labels_with(
    features: &FeatureMatrix,
    probs: &ProbabilityMatrix,
    anchors: &[(usize, usize)],
    tiny_threshold: Option<usize>,
) -> Result<PseudoLabelAssignment> {
    check_dims(features, probs)?;
    let unit = unit_rows(features)?;
    let features = &unit;
    let anchored;
    let probs = if anchors.is_empty() {
        probs
    } else {
        let mut p = probs.clone();
        for &(i, y) in anchors {
            p.set_one_hot(i, y)?;
        }
        anchored = p;
        &anchored
    };
    let soft = soft_centroids(features, probs)?;
    let mut labels = nearest_centroid_assign(features, &soft)?;
    for &(i, y) in anchors {
        labels[i] = y;
    }
    let mut refined = hard_centroids(features, &labels, &soft);
    if let Some(t) = tiny_threshold {
        for (c, count) in refined.centroids.iter_mut().zip(&refined.member_counts) {
            if *count < t as f64 {
                *c = None;
            }
        }
    }
    let labels = nearest_centroid_assign(features, &refined)?;
    Ok(PseudoLabelAssignment { labels, soft, refined, distance: "cosine" })
}

/// Pseudo labels for an unlabeled target pass under `config`.
pub fn self_supervised_pseudo_labels(
    features: &FeatureMatrix,
    probs: &ProbabilityMatrix,
    config: &AdaptationConfig,
) -> Result<PseudoLabelAssignment> {
    let threshold = config.filters_tiny_centroids().then_some(config.tiny_centroid_threshold);
    pseudo_labels_with(features, probs, &[], threshold)
}

/// Writes `f_0..f_{d-1}, p_0..p_{K-1}, label` rows for offline inspection.
pub fn export_csv(path: &Path, features: &FeatureMatrix, probs: &ProbabilityMatrix, labels: &[usize]) -> Result<()> {
    if features.rows() != probs.rows() || labels.len() != probs.rows() {
        return Err(Error::Shape("features, probabilities and labels differ in length".into()));
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..features.cols()).map(|j| format!("f_{j}")).collect();
    header.extend((0..probs.num_classes()).map(|k| format!("p_{k}")));
    header.push("label".into());
    w.write_record(&header)?;
    for i in 0..labels.len() {
        let mut row: Vec<String> = features.row(i).iter().map(|v| v.to_string()).collect();
        row.extend(probs.row(i).iter().map(|v| v.to_string()));
        row.push(labels[i].to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use proptest::prelude::*;

    fn feats(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn probs(rows: &[&[f64]]) -> ProbabilityMatrix {
        ProbabilityMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert!(cosine_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap().abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() - 2.0).abs() < 1e-15);
        let d = cosine_distance(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((d - (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-12 && (d - 0.2929).abs() < 5e-5);
        assert!(cosine_distance(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn one_hot_probs_give_class_means() {
        let f = feats(&[&[1.0, 0.0], &[3.0, 2.0], &[0.0, 5.0]]);
        let p = probs(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let c = soft_centroids(&f, &p).unwrap();
        assert_eq!(c.centroids[0].as_deref(), Some(&[2.0, 1.0][..]));
        assert_eq!(c.centroids[1].as_deref(), Some(&[0.0, 5.0][..]));
    }

    #[test]
    fn single_sample_centroids() {
        let f = feats(&[&[0.5, -1.5, 2.0]]);
        let p = probs(&[&[0.2, 0.8, 0.0]]);
        let c = soft_centroids(&f, &p).unwrap();
        assert!(c.centroids[2].is_none());
        for (_, v) in c.present() {
            for (a, b) in v.iter().zip(f.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mixed_probs_match_weighted_means() {
        let f = feats(&[&[1.0, 2.0], &[-1.0, 0.5], &[0.0, 3.0], &[2.0, -1.0]]);
        let p = probs(&[&[0.9, 0.1], &[0.3, 0.7], &[0.5, 0.5], &[0.2, 0.8]]);
        let c = soft_centroids(&f, &p).unwrap();
        for k in 0..2 {
            let mut num = [0.0, 0.0];
            let mut den = 0.0;
            for i in 0..4 {
                den += p.row(i)[k];
                num[0] += p.row(i)[k] * f.row(i)[0];
                num[1] += p.row(i)[k] * f.row(i)[1];
            }
            let got = c.centroids[k].as_ref().unwrap();
            assert!((got[0] - num[0] / den).abs() < 1e-10 && (got[1] - num[1] / den).abs() < 1e-10);
        }
    }

    #[test]
    fn assignment_identity_and_ties() {
        let set = CentroidSet {
            centroids: vec![Some(vec![1.0, 0.0]), Some(vec![0.0, 1.0]), None],
            member_counts: vec![1.0, 1.0, 0.0],
            generation: Generation::Soft,
        };
        let f = feats(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        assert_eq!(nearest_centroid_assign(&f, &set).unwrap(), vec![0, 1, 0]);
        let none = CentroidSet { centroids: vec![None, None], member_counts: vec![0.0; 2], generation: Generation::Soft };
        assert!(matches!(nearest_centroid_assign(&f, &none), Err(Error::NoCentroids)));
    }

    #[test]
    fn separated_clusters_follow_argmax() {
        let f = feats(&[&[5.0, 0.1], &[4.0, -0.2], &[0.1, 6.0], &[-0.3, 5.0]]);
        let p = probs(&[&[0.99, 0.01], &[0.98, 0.02], &[0.01, 0.99], &[0.03, 0.97]]);
        let a = pseudo_labels_with(&f, &p, &[], None).unwrap();
        assert_eq!(a.labels, p.argmax());
    }

    #[test]
    fn geometry_corrects_wrong_argmax() {
        // Two tight clusters; samples 3 and 7 sit in the other cluster than their argmax.
        let f = feats(&[
            &[1.0, 0.05],
            &[1.0, -0.05],
            &[0.9, 0.0],
            &[1.1, 0.02],
            &[0.05, 1.0],
            &[-0.05, 1.0],
            &[0.0, 0.9],
            &[0.02, 1.1],
        ]);
        let p = probs(&[
            &[0.9, 0.1],
            &[0.8, 0.2],
            &[0.85, 0.15],
            &[0.4, 0.6],
            &[0.1, 0.9],
            &[0.2, 0.8],
            &[0.15, 0.85],
            &[0.6, 0.4],
        ]);
        let a = pseudo_labels_with(&f, &p, &[], None).unwrap();
        assert_eq!(a.labels, vec![0, 0, 0, 0, 1, 1, 1, 1]);
        assert_ne!(p.argmax()[3], 0);
        assert_ne!(p.argmax()[7], 1);
    }

    #[test]
    fn tiny_class_is_filtered() {
        let mut rows: Vec<Vec<f64>> = (0..12).map(|i| vec![1.0, 0.01 * i as f64]).collect();
        rows.extend((0..12).map(|i| vec![0.01 * i as f64, 1.0]));
        rows.push(vec![-1.0, -1.0]);
        let f = Matrix::from_rows(&rows).unwrap();
        let mut p: Vec<Vec<f64>> = (0..12).map(|_| vec![0.9, 0.05, 0.05]).collect();
        p.extend((0..12).map(|_| vec![0.05, 0.9, 0.05]));
        p.push(vec![0.05, 0.05, 0.9]);
        let p = ProbabilityMatrix::from_rows(&p).unwrap();
        let plain = pseudo_labels_with(&f, &p, &[], None).unwrap();
        assert!(plain.labels.contains(&2));
        let filtered = pseudo_labels_with(&f, &p, &[], Some(10)).unwrap();
        assert!(!filtered.labels.contains(&2));
        assert!(filtered.refined.centroids[2].is_none());
    }

    #[test]
    fn anchors_without_entries_match_plain_path() {
        let f = feats(&[&[1.0, 0.3], &[0.2, 1.0], &[0.7, 0.6]]);
        let p = probs(&[&[0.7, 0.3], &[0.4, 0.6], &[0.5, 0.5]]);
        assert_eq!(pseudo_labels_with(&f, &p, &[], None).unwrap(), pseudo_labels_with(&f, &p, &[], None).unwrap());
        let a = pseudo_labels_with(&f, &p, &[(2, 1)], None).unwrap();
        assert_eq!(a.soft.member_counts[1], 0.3 + 0.6 + 1.0);
    }

    fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        (1usize..=10, 2usize..=4, 1usize..=3).prop_flat_map(|(n, k, d)| {
            (
                prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), n),
                prop::collection::vec(prop::collection::vec(0.01f64..1.0, k), n),
            )
        })
    }

    fn normalized(p: &[Vec<f64>]) -> ProbabilityMatrix {
        let rows: Vec<Vec<f64>> = p
            .iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(|v| v / s).collect()
            })
            .collect();
        ProbabilityMatrix::from_rows(&rows).unwrap()
    }

    /// Whether the nearest centroid of `g` beats the runner-up by more than rounding.
    fn decisive(g: &[f64], set: &CentroidSet) -> bool {
        let mut d: Vec<f64> = set.present().map(|(_, c)| cosine_distance(g, c).unwrap()).collect();
        d.sort_by(f64::total_cmp);
        d.len() < 2 || d[1] - d[0] > 1e-9
    }

    proptest! {
        #[test]
        fn positive_rescaling_keeps_labels((f, p) in instance(), scales in prop::collection::vec(0.1f64..10.0, 10)) {
            prop_assume!(f.iter().all(|r| norm(r) > 1e-3));
            let scaled: Vec<Vec<f64>> = f.iter().zip(&scales).map(|(r, s)| r.iter().map(|v| v * s).collect()).collect();
            let pm = normalized(&p);
            let a = pseudo_labels_with(&Matrix::from_rows(&f).unwrap(), &pm, &[], None).unwrap();
            let b = pseudo_labels_with(&Matrix::from_rows(&scaled).unwrap(), &pm, &[], None).unwrap();
            for i in 0..f.len() {
                if decisive(&f[i], &a.refined) {
                    prop_assert_eq!(a.labels[i], b.labels[i]);
                }
            }
        }

        #[test]
        fn permutation_equivariance((f, p) in instance(), seed in any::<u64>()) {
            prop_assume!(f.iter().all(|r| norm(r) > 1e-3));
            use rand::{seq::SliceRandom, SeedableRng};
            let mut perm: Vec<usize> = (0..f.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let pf: Vec<Vec<f64>> = perm.iter().map(|&i| f[i].clone()).collect();
            let pp: Vec<Vec<f64>> = perm.iter().map(|&i| p[i].clone()).collect();
            let a = pseudo_labels_with(&Matrix::from_rows(&f).unwrap(), &normalized(&p), &[], None).unwrap();
            let b = pseudo_labels_with(&Matrix::from_rows(&pf).unwrap(), &normalized(&pp), &[], None).unwrap();
            // Summation order moves centroids in the last bits; skip near-ties.
            for (j, &i) in perm.iter().enumerate() {
                if decisive(&f[i], &a.refined) {
                    prop_assert_eq!(a.labels[i], b.labels[j]);
                }
            }
        }

        #[test]
        fn one_hot_separable_labels_are_a_fixed_point(n in 2usize..8, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for i in 0..n {
                let y = i % 2;
                let jitter: f64 = rng.random_range(-0.2..0.2);
                rows.push(if y == 0 { vec![1.0, jitter] } else { vec![jitter, 1.0] });
                labels.push(y);
            }
            let f = Matrix::from_rows(&rows).unwrap();
            let first = pseudo_labels_with(&f, &ProbabilityMatrix::one_hot(&labels, 2).unwrap(), &[], None).unwrap();
            prop_assert_eq!(&first.labels, &labels);
            let second = pseudo_labels_with(&f, &ProbabilityMatrix::one_hot(&first.labels, 2).unwrap(), &[], None).unwrap();
            prop_assert_eq!(first.labels, second.labels);
        }
    }
}
