//! Synthetic class-prototype domains with a controllable shift, used by tests
//! and by the offline checks that have no real dataset available.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DomainDataset, ImageShape, LabelSpace, Normalization, SplitRole};
use crate::error::{Error, Result};

/// Appearance change applied to every image of a domain: `gain · x + offset`
/// plus a fixed random pattern of the given amplitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainShift {
    pub gain: f64,
    pub offset: f64,
    pub pattern: f64,
    pub pattern_seed: u64,
}

impl DomainShift {
    pub const NONE: DomainShift = DomainShift { gain: 1.0, offset: 0.0, pattern: 0.0, pattern_seed: 0 };
}

/// One random prototype image per class, values in [0, 1].
pub fn prototypes(num_classes: usize, shape: ImageShape, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_classes)
        .map(|_| (0..shape.len()).map(|_| if rng.random_bool(0.5) { 0.8 } else { 0.2 }).collect())
        .collect()
}

/// `per_class` noisy copies of each prototype in `classes`. The label space
/// always spans every prototype, so absent classes keep their indices.
#[allow(clippy::too_many_arguments)]
pub fn prototype_domain(
    name: &str,
    protos: &[Vec<f64>],
    shape: ImageShape,
    classes: &[usize],
    per_class: usize,
    noise: f64,
    shift: DomainShift,
    seed: u64,
) -> Result<DomainDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, noise.max(0.0)).map_err(|e| crate::error::contract(e.to_string()))?;
    let mut prng = ChaCha8Rng::seed_from_u64(shift.pattern_seed);
    let pattern: Vec<f64> = (0..shape.len()).map(|_| prng.random_range(-1.0..1.0)).collect();
    let mut pixels = Vec::with_capacity(classes.len() * per_class * shape.len());
    let mut labels = Vec::new();
    for &k in classes {
        for _ in 0..per_class {
            for (p, pat) in protos[k].iter().zip(&pattern) {
                let v = shift.gain * (p + gauss.sample(&mut rng)) + shift.offset + shift.pattern * pat;
                pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            labels.push(Some(k));
        }
    }
    let ds = DomainDataset::new(
        name,
        SplitRole::Train,
        LabelSpace::numbered(protos.len())?,
        shape,
        shape,
        Normalization::symmetric(shape.channels),
        pixels,
        labels,
    )?;
    Ok(ds.with_convention("synthetic"))
}

/// Writes every labeled sample as `root/<class name>/<index>.png` (RGB or gray).
pub fn write_image_folder(root: &Path, dataset: &DomainDataset) -> Result<()> {
    let s = dataset.stored;
    for name in dataset.label_space.names() {
        std::fs::create_dir_all(root.join(name))?;
    }
    let plane = s.height * s.width;
    for i in 0..dataset.len() {
        let Some(y) = dataset.labels()[i] else { continue };
        let img = dataset.image(i);
        let path = root.join(&dataset.label_space.names()[y]).join(format!("{i:06}.png"));
        let save = |r: image::ImageResult<()>| r.map_err(|e| Error::Data { path: path.clone(), reason: e.to_string() });
        if s.channels == 3 {
            let raw: Vec<u8> = (0..plane).flat_map(|p| [img[p], img[plane + p], img[2 * plane + p]]).collect();
            let buf = image::RgbImage::from_raw(s.width as u32, s.height as u32, raw).expect("size");
            save(buf.save(&path))?;
        } else {
            let buf = image::GrayImage::from_raw(s.width as u32, s.height as u32, img[..plane].to_vec()).expect("size");
            save(buf.save(&path))?;
        }
    }
    Ok(())
}
