//! Datasets, loaders, deterministic splits and batch assembly.
//!
//! Images are kept in memory as 8-bit pixels in CHW order at their stored
//! size; normalization and augmentation happen when a batch is assembled.

pub mod audit;
mod digits;
mod folder;
mod split;
pub mod synthetic;

use std::fmt;

use candle_core::{Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};

pub use digits::{digit_task, load_digits, load_mnist, load_svhn, load_usps, DigitFormat, DigitTask};
pub use folder::{load_image_folder, FolderOptions};
pub use split::{split_source, stratified_partition, subsample, target_eval_split, write_manifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    /// Number of values in one image.
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }
}

impl fmt::Display for ImageShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    names: Vec<String>,
}

impl LabelSpace {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(contract(format!("a label space needs K >= 2 classes, got {}", names.len())));
        }
        let mut sorted = names.clone();
        sorted.sort();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(contract(format!("duplicate class name `{}`", w[0])));
        }
        Ok(Self { names })
    }

    /// Classes named "0", "1", ..., zero-padded so that name order is
    /// index order.
    pub fn numbered(k: usize) -> Result<Self> {
        let width = k.saturating_sub(1).to_string().len();
        Self::new((0..k).map(|i| format!("{i:0width$}")).collect())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRole {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitRole::Train => "train",
            SplitRole::Val => "val",
            SplitRole::Test => "test",
        })
    }
}

/// Per-channel normalization applied to `pixel / 255`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    /// Maps [0, 1] to [-1, 1].
    pub fn symmetric(channels: usize) -> Self {
        Self { mean: vec![0.5; channels], std: vec![0.5; channels] }
    }

    pub fn imagenet() -> Self {
        Self { mean: vec![0.485, 0.456, 0.406], std: vec![0.229, 0.224, 0.225] }
    }
}

/// Training-time augmentation. Evaluation always uses the deterministic
/// center transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Augment {
    None,
    /// Random shift by up to this many pixels in each direction, zero fill.
    Translate(usize),
    /// Random crop to the input size plus a random horizontal flip.
    CropFlip,
}

#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub domain: String,
    pub role: SplitRole,
    pub label_space: LabelSpace,
    /// Shape of the stored images.
    pub stored: ImageShape,
    /// Shape fed to the network (center or random crop of `stored`).
    pub input: ImageShape,
    pub normalization: Normalization,
    /// How the images were converted on load.
    pub convention: String,
    pixels: Vec<u8>,
    labels: Vec<Option<usize>>,
    sources: Vec<String>,
}

impl DomainDataset {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        domain: impl Into<String>,
        role: SplitRole,
        label_space: LabelSpace,
        stored: ImageShape,
        input: ImageShape,
        normalization: Normalization,
        pixels: Vec<u8>,
        labels: Vec<Option<usize>>,
    ) -> Result<Self> {
        if pixels.len() != labels.len() * stored.len() {
            return Err(Error::Shape(format!(
                "{} pixel values for {} images of {stored}",
                pixels.len(),
                labels.len()
            )));
        }
        if input.channels != stored.channels || input.height > stored.height || input.width > stored.width {
            return Err(contract(format!("input {input} is not a crop of stored {stored}")));
        }
        if normalization.mean.len() != stored.channels || normalization.std.len() != stored.channels {
            return Err(contract("normalization needs one mean and std per channel"));
        }
        let k = label_space.len();
        if let Some(bad) = labels.iter().flatten().find(|&&y| y >= k) {
            return Err(contract(format!("label {bad} outside [0, {k})")));
        }
        let domain = domain.into();
        let sources = (0..labels.len()).map(|i| format!("{domain}/{role}/{i}")).collect();
        Ok(Self {
            domain,
            role,
            label_space,
            stored,
            input,
            normalization,
            convention: String::new(),
            pixels,
            labels,
            sources,
        })
    }

    pub fn with_sources(mut self, sources: Vec<String>) -> Result<Self> {
        if sources.len() != self.len() {
            return Err(Error::Shape(format!("{} source names for {} samples", sources.len(), self.len())));
        }
        self.sources = sources;
        Ok(self)
    }

    pub fn with_convention(mut self, convention: impl Into<String>) -> Self {
        self.convention = convention.into();
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.label_space.len()
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    /// Labels when every sample carries one.
    pub fn all_labels(&self) -> Option<Vec<usize>> {
        self.labels.iter().copied().collect()
    }

    pub fn require_labels(&self) -> Result<Vec<usize>> {
        self.all_labels()
            .ok_or_else(|| contract(format!("dataset `{}` has unlabeled samples", self.domain)))
    }

    pub fn source_name(&self, i: usize) -> &str {
        &self.sources[i]
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.stored.len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Drops every label (target data seen by adaptation).
    pub fn without_labels(&self) -> Self {
        let mut d = self.clone();
        d.labels = vec![None; d.len()];
        d
    }

    pub fn with_role(mut self, role: SplitRole) -> Self {
        self.role = role;
        self
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], role: SplitRole) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * self.stored.len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Self {
            domain: self.domain.clone(),
            role,
            label_space: self.label_space.clone(),
            stored: self.stored,
            input: self.input,
            normalization: self.normalization.clone(),
            convention: self.convention.clone(),
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            sources: indices.iter().map(|&i| self.sources[i].clone()).collect(),
        }
    }

    /// Appends `other` (same geometry) after `self`.
    pub fn concat(&self, other: &DomainDataset) -> Result<Self> {
        if other.stored != self.stored || other.input != self.input || other.label_space != self.label_space {
            return Err(Error::Shape("datasets differ in geometry or label space".into()));
        }
        let mut d = self.clone();
        d.pixels.extend_from_slice(&other.pixels);
        d.labels.extend_from_slice(&other.labels);
        d.sources.extend(other.sources.iter().cloned());
        Ok(d)
    }

    /// Number of samples per class (labeled samples only).
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes()];
        for y in self.labels.iter().flatten() {
            c[*y] += 1;
        }
        c
    }

    /// Evaluation batch: deterministic center crop, no augmentation.
    pub fn eval_batch(&self, indices: &[usize], device: &Device) -> Result<Tensor> {
        self.assemble(indices, device, |_, _| (center_offset(self.stored, self.input), false), None)
    }

    /// Training batch with the given augmentation drawn from `rng`.
    pub fn train_batch(&self, indices: &[usize], augment: Augment, rng: &mut ChaCha8Rng, device: &Device) -> Result<Tensor> {
        match augment {
            Augment::None => self.eval_batch(indices, device),
            Augment::CropFlip => {
                let (s, inp) = (self.stored, self.input);
                let draws: Vec<((usize, usize), bool)> = indices
                    .iter()
                    .map(|_| {
                        let dy = rng.random_range(0..=s.height - inp.height);
                        let dx = rng.random_range(0..=s.width - inp.width);
                        ((dy, dx), rng.random_bool(0.5))
                    })
                    .collect();
                self.assemble(indices, device, |pos, _| draws[pos], None)
            }
            Augment::Translate(max) => {
                let m = max as i64;
                let shifts: Vec<(i64, i64)> = indices
                    .iter()
                    .map(|_| (rng.random_range(-m..=m), rng.random_range(-m..=m)))
                    .collect();
                self.assemble(indices, device, |_, _| (center_offset(self.stored, self.input), false), Some(&shifts))
            }
        }
    }

    fn assemble<F>(&self, indices: &[usize], device: &Device, crop: F, shifts: Option<&[(i64, i64)]>) -> Result<Tensor>
    where
        F: Fn(usize, usize) -> ((usize, usize), bool),
    {
        let (s, inp) = (self.stored, self.input);
        let mut out = vec![0f32; indices.len() * inp.len()];
        for (pos, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(contract(format!("sample index {i} out of range for {} samples", self.len())));
            }
            let img = self.image(i);
            let ((oy, ox), flip) = crop(pos, i);
            let (sy, sx) = shifts.map_or((0, 0), |s| s[pos]);
            let dst = &mut out[pos * inp.len()..(pos + 1) * inp.len()];
            for c in 0..inp.channels {
                let (mean, std) = (self.normalization.mean[c], self.normalization.std[c]);
                // Value of a zero pixel, used for translation fill.
                let fill = (0.0 - mean) / std;
                for y in 0..inp.height {
                    for x in 0..inp.width {
                        let ty = y as i64 - sy;
                        let tx = x as i64 - sx;
                        let v = if ty < 0 || tx < 0 || ty >= inp.height as i64 || tx >= inp.width as i64 {
                            fill
                        } else {
                            let (ty, tx) = (ty as usize, tx as usize);
                            let tx = if flip { inp.width - 1 - tx } else { tx };
                            let p = img[c * s.height * s.width + (oy + ty) * s.width + ox + tx];
                            (p as f32 / 255.0 - mean) / std
                        };
                        dst[c * inp.height * inp.width + y * inp.width + x] = v;
                    }
                }
            }
        }
        Ok(Tensor::from_vec(out, (indices.len(), inp.channels, inp.height, inp.width), device)?)
    }
}

fn center_offset(stored: ImageShape, input: ImageShape) -> (usize, usize) {
    ((stored.height - input.height) / 2, (stored.width - input.width) / 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> DomainDataset {
        let pixels: Vec<u8> = (0..2 * 16).map(|v| (v * 8) as u8).collect();
        DomainDataset::new(
            "toy",
            SplitRole::Train,
            LabelSpace::numbered(2).unwrap(),
            ImageShape::new(1, 4, 4),
            ImageShape::new(1, 2, 2),
            Normalization { mean: vec![0.0], std: vec![1.0] },
            pixels,
            vec![Some(0), Some(1)],
        )
        .unwrap()
    }

    #[test]
    fn label_space_rules() {
        assert!(LabelSpace::numbered(1).is_err());
        assert!(LabelSpace::new(vec!["a".into(), "a".into()]).is_err());
        assert_eq!(LabelSpace::numbered(3).unwrap().index_of("2"), Some(2));
    }

    #[test]
    fn eval_batch_center_crops() {
        let d = tiny();
        let t = d.eval_batch(&[0], &Device::Cpu).unwrap();
        let v = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        // rows 1..3, cols 1..3 of image 0 (values 8*i)
        let expect: Vec<f32> = [5u8, 6, 9, 10].iter().map(|&i| (i as f32 * 8.0) / 255.0).collect();
        assert_eq!(v, expect);
    }

    #[test]
    fn eval_batch_is_deterministic_and_train_varies() {
        let d = tiny();
        let a = d.eval_batch(&[0, 1], &Device::Cpu).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = d.eval_batch(&[0, 1], &Device::Cpu).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..20 {
            let t = d.train_batch(&[0], Augment::CropFlip, &mut rng, &Device::Cpu).unwrap();
            let v: Vec<u32> = t.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|x| x.to_bits()).collect();
            seen.insert(v);
        }
        assert!(seen.len() > 1);
    }

    #[test]
    fn translation_fills_with_zero_pixels() {
        let d = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let t = d.train_batch(&[1], Augment::Translate(2), &mut rng, &Device::Cpu).unwrap();
            for v in t.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn subset_and_counts() {
        let d = tiny();
        let s = d.subset(&[1, 1, 0], SplitRole::Val);
        assert_eq!(s.labels(), &[Some(1), Some(1), Some(0)]);
        assert_eq!(s.image(2), d.image(0));
        assert_eq!(s.class_counts(), vec![1, 2]);
        assert_eq!(s.role, SplitRole::Val);
    }
}
