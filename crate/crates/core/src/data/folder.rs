//! Class-per-directory image folders (Office-style datasets).

use std::path::Path;

use image::imageops::FilterType;

use super::{audit, DomainDataset, ImageShape, LabelSpace, Normalization, SplitRole};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct FolderOptions {
    /// Images are resized to `resize × resize` on load.
    pub resize: usize,
    /// Network input side; a crop of the resized image.
    pub crop: usize,
    pub normalization: Normalization,
}

impl FolderOptions {
    pub fn new(resize: usize, crop: usize) -> Self {
        Self { resize, crop, normalization: Normalization::imagenet() }
    }
}

const EXTENSIONS: &[&str] = &["jpg", "jpeg", "png", "bmp"];

/// Loads `root/<class>/<image>`. Classes are the sorted subdirectory names
/// unless `class_names` fixes the label space (classes missing on disk then
/// keep zero samples). Unreadable images are skipped with a warning.
pub fn load_image_folder(root: &Path, class_names: Option<&[String]>, opts: &FolderOptions) -> Result<DomainDataset> {
    if !root.is_dir() {
        return Err(Error::Data { path: root.into(), reason: "not a directory".into() });
    }
    let names: Vec<String> = match class_names {
        Some(n) => n.to_vec(),
        None => {
            let mut dirs: Vec<String> = audit::read_dir(root)?
                .into_iter()
                .filter(|p| p.is_dir())
                .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
                .collect();
            dirs.sort();
            dirs
        }
    };
    let space = LabelSpace::new(names.clone())?;
    let shape = ImageShape::new(3, opts.resize, opts.resize);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut sources = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let dir = root.join(name);
        if !dir.is_dir() {
            log::warn!("class directory {} is missing; class `{name}` has no samples", dir.display());
            continue;
        }
        let files: Vec<_> = audit::read_dir(&dir)?
            .into_iter()
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        if files.is_empty() {
            log::warn!("class directory {} is empty; class `{name}` kept with zero samples", dir.display());
        }
        for file in files {
            let decoded = audit::read(&file).and_then(|b| {
                image::load_from_memory(&b).map_err(|e| Error::Malformed { path: file.clone(), reason: e.to_string() })
            });
            let img = match decoded {
                Ok(img) => img,
                Err(Error::SourceAccess(p)) => return Err(Error::SourceAccess(p)),
                Err(e) => {
                    log::warn!("skipping unreadable image: {e}");
                    continue;
                }
            };
            let rgb = img.resize_exact(opts.resize as u32, opts.resize as u32, FilterType::Triangle).to_rgb8();
            let plane = opts.resize * opts.resize;
            let raw = rgb.as_raw();
            for c in 0..3 {
                pixels.extend((0..plane).map(|p| raw[p * 3 + c]));
            }
            labels.push(Some(k));
            sources.push(file.to_string_lossy().into_owned());
        }
    }
    let domain = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let ds = DomainDataset::new(
        domain,
        SplitRole::Train,
        space,
        shape,
        ImageShape::new(3, opts.crop, opts.crop),
        opts.normalization.clone(),
        pixels,
        labels,
    )?;
    Ok(ds.with_sources(sources)?.with_convention(format!("rgb resized to {0}x{0}", opts.resize)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, v: u8) {
        image::RgbImage::from_pixel(5, 7, image::Rgb([v, v, v])).save(path).unwrap();
    }

    #[test]
    fn two_classes_three_files() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["b_cls", "a_cls"] {
            std::fs::create_dir(dir.path().join(class)).unwrap();
            for i in 0..3 {
                write_png(&dir.path().join(class).join(format!("{i}.png")), 10 * i as u8);
            }
        }
        std::fs::write(dir.path().join("a_cls").join("broken.jpg"), b"not an image").unwrap();
        let ds = load_image_folder(dir.path(), None, &FolderOptions::new(8, 6)).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.label_space.names(), &["a_cls".to_string(), "b_cls".to_string()]);
        assert_eq!(ds.labels(), &[Some(0), Some(0), Some(0), Some(1), Some(1), Some(1)]);
        assert_eq!(ds.stored, ImageShape::new(3, 8, 8));
        assert_eq!(ds.input, ImageShape::new(3, 6, 6));
    }

    #[test]
    fn empty_class_is_kept() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("x")).unwrap();
        std::fs::create_dir(dir.path().join("y")).unwrap();
        write_png(&dir.path().join("y").join("0.png"), 1);
        let ds = load_image_folder(dir.path(), None, &FolderOptions::new(4, 4)).unwrap();
        assert_eq!(ds.num_classes(), 2);
        assert_eq!(ds.class_counts(), vec![0, 1]);
    }
}
