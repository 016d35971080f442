//! Loaders for the digit archives: MNIST (IDX), USPS (libsvm text) and
//! SVHN (MATLAB v5 `.mat`).
//!
//! Expected layout under the data root:
//!
//! ```text
//! mnist/train-images-idx3-ubyte[.gz]  mnist/train-labels-idx1-ubyte[.gz]
//! mnist/t10k-images-idx3-ubyte[.gz]   mnist/t10k-labels-idx1-ubyte[.gz]
//! usps/usps[.gz]                      usps/usps.t[.gz]
//! svhn/train_32x32.mat                svhn/test_32x32.mat
//! ```

use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::GzDecoder;
use image::imageops::{self, FilterType};
use image::GrayImage;

use super::{audit, DomainDataset, ImageShape, LabelSpace, Normalization, SplitRole};
use crate::error::{contract, Error, Result};

/// Channel and size convention shared by both domains of a digit task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DigitFormat {
    /// Grayscale 28×28.
    Gray28,
    /// RGB 32×32; grayscale domains are replicated across channels.
    Rgb32,
}

impl DigitFormat {
    pub fn shape(self) -> ImageShape {
        match self {
            DigitFormat::Gray28 => ImageShape::new(1, 28, 28),
            DigitFormat::Rgb32 => ImageShape::new(3, 32, 32),
        }
    }

    fn describe(self, native: ImageShape) -> String {
        let s = self.shape();
        if native.channels == 1 && s.channels == 3 {
            format!("gray {}x{} resized bilinearly to {}x{}, replicated to 3 channels", native.height, native.width, s.height, s.width)
        } else if native.channels == 3 && s.channels == 1 {
            format!("rgb {}x{} converted to luma, resized to {}x{}", native.height, native.width, s.height, s.width)
        } else if native.height != s.height {
            format!("{}x{} resized bilinearly to {}x{}", native.height, native.width, s.height, s.width)
        } else {
            "native".into()
        }
    }
}

/// A digit adaptation task such as `u2m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DigitTask {
    pub source: &'static str,
    pub target: &'static str,
    pub format: DigitFormat,
}

impl FromStr for DigitTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (source, target, format) = match s {
            "u2m" => ("usps", "mnist", DigitFormat::Gray28),
            "m2u" => ("mnist", "usps", DigitFormat::Gray28),
            "s2m" => ("svhn", "mnist", DigitFormat::Rgb32),
            other => return Err(contract(format!("unknown digit task `{other}` (expected u2m, m2u or s2m)"))),
        };
        Ok(Self { source, target, format })
    }
}

pub fn digit_task(name: &str) -> Result<DigitTask> {
    name.parse()
}

/// Train and test sets of one digit domain in the requested format.
pub fn load_digits(name: &str, root: &Path, format: DigitFormat) -> Result<(DomainDataset, DomainDataset)> {
    match name {
        "mnist" => load_mnist(&root.join("mnist"), format),
        "usps" => load_usps(&root.join("usps"), format),
        "svhn" => load_svhn(&root.join("svhn"), format),
        other => Err(contract(format!("unknown digit domain `{other}`"))),
    }
}

fn locate(dir: &Path, stem: &str) -> Result<PathBuf> {
    for candidate in [dir.join(stem), dir.join(format!("{stem}.gz"))] {
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    Err(Error::Data {
        path: dir.join(stem),
        reason: format!("file not found (also tried {stem}.gz); see scripts/fetch_digits.sh"),
    })
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = audit::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Malformed { path: path.into(), reason: format!("bad gzip stream: {e}") })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn parse_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let b = read_maybe_gz(path)?;
    let bad = |reason: String| Error::Malformed { path: path.into(), reason };
    if b.len() < 16 || be_u32(&b, 0) != 2051 {
        return Err(bad("not an IDX image file (magic 2051)".into()));
    }
    let (n, h, w) = (be_u32(&b, 4) as usize, be_u32(&b, 8) as usize, be_u32(&b, 12) as usize);
    if b.len() != 16 + n * h * w {
        return Err(bad(format!("expected {} bytes, found {}", 16 + n * h * w, b.len())));
    }
    Ok((n, h, w, b[16..].to_vec()))
}

fn parse_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let b = read_maybe_gz(path)?;
    let bad = |reason: String| Error::Malformed { path: path.into(), reason };
    if b.len() < 8 || be_u32(&b, 0) != 2049 {
        return Err(bad("not an IDX label file (magic 2049)".into()));
    }
    let n = be_u32(&b, 4) as usize;
    if b.len() != 8 + n {
        return Err(bad(format!("expected {} bytes, found {}", 8 + n, b.len())));
    }
    Ok(b[8..].to_vec())
}

pub fn load_mnist(dir: &Path, format: DigitFormat) -> Result<(DomainDataset, DomainDataset)> {
    let mut out = Vec::new();
    for (prefix, role) in [("train", SplitRole::Train), ("t10k", SplitRole::Test)] {
        let img_path = locate(dir, &format!("{prefix}-images-idx3-ubyte"))?;
        let lbl_path = locate(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
        let (n, h, w, pixels) = parse_idx_images(&img_path)?;
        let labels = parse_idx_labels(&lbl_path)?;
        if labels.len() != n {
            return Err(Error::Malformed { path: lbl_path, reason: format!("{} labels for {n} images", labels.len()) });
        }
        check_digit_labels(&lbl_path, &labels)?;
        out.push(build("mnist", role, ImageShape::new(1, h, w), &pixels, labels, format)?);
    }
    let test = out.pop().unwrap();
    Ok((out.pop().unwrap(), test))
}

fn check_digit_labels(path: &Path, labels: &[u8]) -> Result<()> {
    if let Some(bad) = labels.iter().find(|&&y| y >= 10) {
        return Err(Error::Malformed { path: path.into(), reason: format!("label {bad} outside [0, 10)") });
    }
    Ok(())
}

/// USPS in libsvm format: `label idx:value ...`, labels 1..=10, values in [-1, 1], 16×16.
pub fn load_usps(dir: &Path, format: DigitFormat) -> Result<(DomainDataset, DomainDataset)> {
    let mut out = Vec::new();
    for (stem, role) in [("usps", SplitRole::Train), ("usps.t", SplitRole::Test)] {
        let path = locate(dir, stem)?;
        let text = String::from_utf8(read_maybe_gz(&path)?)
            .map_err(|e| Error::Malformed { path: path.clone(), reason: e.to_string() })?;
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| Error::Malformed { path: path.clone(), reason: format!("line {}: {reason}", lineno + 1) };
            let mut parts = line.split_whitespace();
            let label: f64 = parts.next().unwrap().parse().map_err(|_| bad("bad label".into()))?;
            let label = label as i64;
            if !(1..=10).contains(&label) {
                return Err(bad(format!("label {label} outside 1..=10")));
            }
            labels.push((label - 1) as u8);
            let mut img = [0u8; 256];
            for tok in parts {
                let (idx, val) = tok.split_once(':').ok_or_else(|| bad(format!("bad feature `{tok}`")))?;
                let idx: usize = idx.parse().map_err(|_| bad(format!("bad index `{idx}`")))?;
                let val: f64 = val.parse().map_err(|_| bad(format!("bad value `{val}`")))?;
                if idx == 0 || idx > 256 {
                    return Err(bad(format!("feature index {idx} outside 1..=256")));
                }
                img[idx - 1] = (((val.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8;
            }
            pixels.extend_from_slice(&img);
        }
        out.push(build("usps", role, ImageShape::new(1, 16, 16), &pixels, labels, format)?);
    }
    let test = out.pop().unwrap();
    Ok((out.pop().unwrap(), test))
}

/// SVHN cropped digits: `X` is 32×32×3×N (column-major), `y` is N×1 with 10 meaning digit 0.
pub fn load_svhn(dir: &Path, format: DigitFormat) -> Result<(DomainDataset, DomainDataset)> {
    let mut out = Vec::new();
    for (stem, role) in [("train_32x32.mat", SplitRole::Train), ("test_32x32.mat", SplitRole::Test)] {
        let path = dir.join(stem);
        if !path.is_file() {
            return Err(Error::Data { path, reason: "file not found; see scripts/fetch_digits.sh".into() });
        }
        let bytes = audit::read(&path)?;
        let bad = |reason: String| Error::Malformed { path: path.clone(), reason };
        let mat = matfile::MatFile::parse(bytes.as_slice()).map_err(|e| bad(format!("{e:?}")))?;
        let x = mat.find_by_name("X").ok_or_else(|| bad("no array `X`".into()))?;
        let y = mat.find_by_name("y").ok_or_else(|| bad("no array `y`".into()))?;
        let size = x.size().clone();
        if size.len() != 4 || size[2] != 3 {
            return Err(bad(format!("`X` has shape {size:?}, expected HxWx3xN")));
        }
        let (h, w, n) = (size[0], size[1], size[3]);
        let xs = match x.data() {
            matfile::NumericData::UInt8 { real, .. } => real,
            _ => return Err(bad("`X` is not uint8".into())),
        };
        let ys: Vec<f64> = match y.data() {
            matfile::NumericData::UInt8 { real, .. } => real.iter().map(|&v| v as f64).collect(),
            matfile::NumericData::Double { real, .. } => real.clone(),
            _ => return Err(bad("`y` has an unsupported type".into())),
        };
        if ys.len() != n {
            return Err(bad(format!("{} labels for {n} images", ys.len())));
        }
        let mut pixels = vec![0u8; n * 3 * h * w];
        for i in 0..n {
            for c in 0..3 {
                for r in 0..h {
                    for col in 0..w {
                        let src = r + h * (col + w * (c + 3 * i));
                        pixels[i * 3 * h * w + c * h * w + r * w + col] = xs[src];
                    }
                }
            }
        }
        let labels: Vec<u8> = ys.iter().map(|&v| if v as i64 == 10 { 0 } else { v as u8 }).collect();
        check_digit_labels(&path, &labels)?;
        out.push(build("svhn", role, ImageShape::new(3, h, w), &pixels, labels, format)?);
    }
    let test = out.pop().unwrap();
    Ok((out.pop().unwrap(), test))
}

fn build(
    domain: &str,
    role: SplitRole,
    native: ImageShape,
    pixels: &[u8],
    labels: Vec<u8>,
    format: DigitFormat,
) -> Result<DomainDataset> {
    let shape = format.shape();
    let mut converted = Vec::with_capacity(labels.len() * shape.len());
    for img in pixels.chunks_exact(native.len()) {
        converted.extend(convert(img, native, shape));
    }
    let ds = DomainDataset::new(
        domain,
        role,
        LabelSpace::numbered(10)?,
        shape,
        shape,
        Normalization::symmetric(shape.channels),
        converted,
        labels.into_iter().map(|y| Some(y as usize)).collect(),
    )?;
    Ok(ds.with_convention(format.describe(native)))
}

fn resize_plane(plane: &[u8], from: ImageShape, h: usize, w: usize) -> Vec<u8> {
    if from.height == h && from.width == w {
        return plane.to_vec();
    }
    let img = GrayImage::from_raw(from.width as u32, from.height as u32, plane.to_vec()).expect("plane size");
    imageops::resize(&img, w as u32, h as u32, FilterType::Triangle).into_raw()
}

/// Converts one CHW image between channel counts and sizes.
pub(crate) fn convert(img: &[u8], from: ImageShape, to: ImageShape) -> Vec<u8> {
    let plane_len = from.height * from.width;
    let planes: Vec<Vec<u8>> = match (from.channels, to.channels) {
        (a, b) if a == b => img.chunks_exact(plane_len).map(<[u8]>::to_vec).collect(),
        (1, 3) => vec![img.to_vec(); 3],
        (3, 1) => {
            let luma = (0..plane_len)
                .map(|p| {
                    let (r, g, b) = (img[p] as f32, img[plane_len + p] as f32, img[2 * plane_len + p] as f32);
                    (0.299 * r + 0.587 * g + 0.114 * b).round().clamp(0.0, 255.0) as u8
                })
                .collect();
            vec![luma]
        }
        (a, b) => panic!("unsupported channel conversion {a} -> {b}"),
    };
    planes.iter().flat_map(|p| resize_plane(p, from, to.height, to.width)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx(dir: &Path, prefix: &str, n: usize, gz: bool) {
        let mut img = Vec::new();
        img.extend(2051u32.to_be_bytes());
        img.extend((n as u32).to_be_bytes());
        img.extend(28u32.to_be_bytes());
        img.extend(28u32.to_be_bytes());
        img.extend((0..n * 784).map(|i| (i % 251) as u8));
        let mut lbl = Vec::new();
        lbl.extend(2049u32.to_be_bytes());
        lbl.extend((n as u32).to_be_bytes());
        lbl.extend((0..n).map(|i| (i % 10) as u8));
        for (name, data) in [(format!("{prefix}-images-idx3-ubyte"), img), (format!("{prefix}-labels-idx1-ubyte"), lbl)] {
            if gz {
                let f = std::fs::File::create(dir.join(format!("{name}.gz"))).unwrap();
                let mut e = flate2::write::GzEncoder::new(f, flate2::Compression::fast());
                e.write_all(&data).unwrap();
                e.finish().unwrap();
            } else {
                std::fs::write(dir.join(name), data).unwrap();
            }
        }
    }

    #[test]
    fn mnist_idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("mnist");
        std::fs::create_dir(&m).unwrap();
        write_idx(&m, "train", 12, true);
        write_idx(&m, "t10k", 5, false);
        let (train, test) = load_digits("mnist", dir.path(), DigitFormat::Gray28).unwrap();
        assert_eq!((train.len(), test.len()), (12, 5));
        assert_eq!(train.labels()[3], Some(3));
        assert_eq!(train.image(0)[..3], [0, 1, 2]);
        let (rgb, _) = load_digits("mnist", dir.path(), DigitFormat::Rgb32).unwrap();
        assert_eq!(rgb.stored, ImageShape::new(3, 32, 32));
        let img = rgb.image(0);
        assert_eq!(img[..1024], img[1024..2048]);
        assert!(rgb.convention.contains("replicated"));
    }

    #[test]
    fn missing_files_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_digits("mnist", dir.path(), DigitFormat::Gray28).unwrap_err().to_string();
        assert!(err.contains("train-images-idx3-ubyte"), "{err}");
    }

    #[test]
    fn usps_libsvm_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let u = dir.path().join("usps");
        std::fs::create_dir(&u).unwrap();
        let line = |y: u32| {
            let feats: Vec<String> = (1..=256).map(|i| format!("{i}:{}", if i == 1 { 1.0 } else { -1.0 })).collect();
            format!("{y} {}\n", feats.join(" "))
        };
        std::fs::write(u.join("usps"), format!("{}{}", line(10), line(3))).unwrap();
        std::fs::write(u.join("usps.t"), line(1)).unwrap();
        let (train, test) = load_digits("usps", dir.path(), DigitFormat::Gray28).unwrap();
        assert_eq!(train.labels(), &[Some(9), Some(2)]);
        assert_eq!(test.labels(), &[Some(0)]);
        assert_eq!(train.stored, ImageShape::new(1, 28, 28));
        assert!(train.image(0)[0] > 100 && train.image(0)[783] == 0);
    }

    #[test]
    fn task_names() {
        let t = digit_task("s2m").unwrap();
        assert_eq!((t.source, t.target, t.format), ("svhn", "mnist", DigitFormat::Rgb32));
        assert!(digit_task("x2y").is_err());
    }

    #[test]
    fn luma_conversion() {
        let img = [255u8, 0, 0, 0];
        let out = convert(&[255, 255, 255, 255, 0, 0, 0, 0, 0, 0, 0, 0][..], ImageShape::new(3, 2, 2), ImageShape::new(1, 2, 2));
        assert_eq!(out, vec![76; 4]);
        assert_eq!(convert(&img, ImageShape::new(1, 2, 2), ImageShape::new(1, 2, 2)), img.to_vec());
    }
}
