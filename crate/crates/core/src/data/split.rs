//! Deterministic stratified partitions and split manifests.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DomainDataset, SplitRole};
use crate::error::{contract, Result};

/// Largest-remainder rounding of `n · f_j` to integers summing to `n`.
/// Ties go to the earlier part.
fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| n as f64 * f).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = n - sizes.iter().sum::<usize>();
    for &j in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[j] += 1;
        left -= 1;
    }
    sizes
}

/// Splits `0..labels.len()` into parts with the given fractions.
///
/// Global part sizes follow largest-remainder rounding; when `stratify` is
/// set every class (and the unlabeled samples as one group) is spread over
/// the parts in proportion. Each part is returned in ascending index order.
pub fn stratified_partition(labels: &[Option<usize>], fractions: &[f64], seed: u64, stratify: bool) -> Result<Vec<Vec<usize>>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f >= 0.0) || !f.is_finite()) {
        return Err(contract(format!("split fractions must be non-negative, got {fractions:?}")));
    }
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(contract(format!("split fractions must sum to 1, got {fractions:?}")));
    }
    let n = labels.len();
    let parts = fractions.len();
    let targets = apportion(n, fractions);

    let mut strata: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (i, y) in labels.iter().enumerate() {
        strata.entry(if stratify { *y } else { None }).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: Vec<Vec<usize>> = strata.into_values().collect();
    for g in &mut groups {
        g.shuffle(&mut rng);
    }

    // Per-group floors, then hand out the leftovers by descending remainder
    // while respecting the global targets.
    let mut alloc: Vec<Vec<usize>> = groups
        .iter()
        .map(|g| fractions.iter().map(|f| (g.len() as f64 * f).floor() as usize).collect())
        .collect();
    let mut deficit: Vec<usize> = (0..parts).map(|j| targets[j] - alloc.iter().map(|a| a[j]).sum::<usize>()).collect();
    let mut leftover: Vec<usize> = groups.iter().zip(&alloc).map(|(g, a)| g.len() - a.iter().sum::<usize>()).collect();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        for (j, f) in fractions.iter().enumerate() {
            let e = g.len() as f64 * f;
            pairs.push((e - e.floor(), gi, j));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for &(_, gi, j) in &pairs {
        if leftover[gi] > 0 && deficit[j] > 0 {
            alloc[gi][j] += 1;
            leftover[gi] -= 1;
            deficit[j] -= 1;
        }
    }
    for gi in 0..groups.len() {
        for j in 0..parts {
            while leftover[gi] > 0 && deficit[j] > 0 {
                alloc[gi][j] += 1;
                leftover[gi] -= 1;
                deficit[j] -= 1;
            }
        }
    }

    let mut out = vec![Vec::new(); parts];
    for (g, a) in groups.iter().zip(&alloc) {
        let mut start = 0;
        for j in 0..parts {
            out[j].extend_from_slice(&g[start..start + a[j]]);
            start += a[j];
        }
    }
    for part in &mut out {
        part.sort_unstable();
    }
    Ok(out)
}

/// Stratified train/validation split of a labeled source set.
pub fn split_source(dataset: &DomainDataset, ratio: f64, seed: u64) -> Result<(DomainDataset, DomainDataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(contract(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let counts = dataset.class_counts();
    let stratify = !counts.contains(&1);
    if !stratify {
        log::warn!("a class of `{}` has a single sample; falling back to an unstratified split", dataset.domain);
    }
    let parts = stratified_partition(dataset.labels(), &[ratio, 1.0 - ratio], seed, stratify)?;
    Ok((dataset.subset(&parts[0], SplitRole::Train), dataset.subset(&parts[1], SplitRole::Val)))
}

/// Stratified train/validation/test partition of a target set.
pub fn target_eval_split(dataset: &DomainDataset, fractions: [f64; 3], seed: u64) -> Result<[DomainDataset; 3]> {
    let parts = stratified_partition(dataset.labels(), &fractions, seed, true)?;
    Ok([
        dataset.subset(&parts[0], SplitRole::Train),
        dataset.subset(&parts[1], SplitRole::Val),
        dataset.subset(&parts[2], SplitRole::Test),
    ])
}

/// Keeps a stratified `fraction` of the samples.
pub fn subsample(dataset: &DomainDataset, fraction: f64, seed: u64) -> Result<DomainDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(contract(format!("subsample fraction must lie in (0, 1], got {fraction}")));
    }
    if fraction == 1.0 {
        return Ok(dataset.clone());
    }
    let parts = stratified_partition(dataset.labels(), &[fraction, 1.0 - fraction], seed, true)?;
    Ok(dataset.subset(&parts[0], dataset.role))
}

/// Writes `index,path,label,split,convention` rows for each dataset.
pub fn write_manifest(path: &Path, datasets: &[&DomainDataset]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "path", "label", "split", "convention"])?;
    for ds in datasets {
        for i in 0..ds.len() {
            let label = ds.labels()[i].map(|y| y.to_string()).unwrap_or_default();
            w.write_record([i.to_string(), ds.source_name(i).to_string(), label, ds.role.to_string(), ds.convention.clone()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ImageShape, LabelSpace, Normalization};
    use proptest::prelude::*;

    fn dataset(labels: Vec<Option<usize>>, k: usize) -> DomainDataset {
        let shape = ImageShape::new(1, 1, 1);
        DomainDataset::new(
            "toy",
            SplitRole::Train,
            LabelSpace::numbered(k).unwrap(),
            shape,
            shape,
            Normalization::symmetric(1),
            (0..labels.len()).map(|i| i as u8).collect(),
            labels,
        )
        .unwrap()
    }

    #[test]
    fn source_split_sizes() {
        let ds = dataset((0..100).map(|i| Some(i % 3)).collect(), 3);
        let (tr, va) = split_source(&ds, 0.9, 7).unwrap();
        assert_eq!((tr.len(), va.len()), (90, 10));
        let (tr2, _) = split_source(&ds, 0.9, 7).unwrap();
        assert_eq!(tr.labels(), tr2.labels());
        assert_eq!(tr.image(0), tr2.image(0));
    }

    #[test]
    fn target_split_sizes() {
        let ds = dataset((0..100).map(|i| Some(i % 4)).collect(), 4);
        let [a, b, c] = target_eval_split(&ds, [0.6, 0.2, 0.2], 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (60, 20, 20));
        assert_eq!(a.class_counts(), vec![15; 4]);
    }

    #[test]
    fn singleton_class_falls_back() {
        let mut labels: Vec<Option<usize>> = (0..20).map(|_| Some(0)).collect();
        labels.push(Some(1));
        let (tr, va) = split_source(&dataset(labels, 2), 0.9, 3).unwrap();
        assert_eq!(tr.len() + va.len(), 21);
    }

    #[test]
    fn manifest_rows() {
        let ds = dataset((0..4).map(|i| Some(i % 2)).collect(), 2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_manifest(&p, &[&ds]).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("index,path,label,split,convention"));
    }

    proptest! {
        #[test]
        fn partitions_are_exact_and_seed_stable(
            labels in prop::collection::vec(prop::option::of(0usize..4), 0..80),
            seed in any::<u64>(),
            f in 0.05f64..0.95,
        ) {
            let fr = [f, (1.0 - f) * 0.5, (1.0 - f) * 0.5];
            let parts = stratified_partition(&labels, &fr, seed, true).unwrap();
            let again = stratified_partition(&labels, &fr, seed, true).unwrap();
            prop_assert_eq!(&parts, &again);
            let mut all: Vec<usize> = parts.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
            let expect = apportion(labels.len(), &fr);
            for (p, e) in parts.iter().zip(expect) {
                prop_assert_eq!(p.len(), e);
            }
        }
    }
}
