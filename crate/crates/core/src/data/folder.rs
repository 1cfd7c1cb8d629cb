//! Loading PNG folders into image records.

use std::path::Path;

use image::DynamicImage;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::{Dataset, ImageRecord, ImageShape, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Naming {
    /// `0001_c1s1_000151_00.png`: identity, then `c<camera>`.
    #[default]
    MarketStyle,
    /// Identity is the parent directory name; camera is 0.
    Flat,
}

/// Market-1501 style name for an image.
pub fn market_file_name(identity: u32, camera: u32, frame: u32) -> String {
    format!("{identity:04}_c{camera}s1_{frame:06}_00.png")
}

/// Identity and camera encoded in a market-style file name.
pub fn parse_market_name(name: &str) -> Result<(u32, u32)> {
    let bad = || Error::BadFileName(name.to_string());
    let mut parts = name.split('_');
    let identity = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    let cam_field = parts
        .next()
        .and_then(|s| s.strip_prefix('c'))
        .ok_or_else(bad)?;
    let digits: String = cam_field.chars().take_while(char::is_ascii_digit).collect();
    let camera = digits.parse().map_err(|_| bad())?;
    Ok((identity, camera))
}

fn decode(path: &Path) -> Result<(Vec<u8>, u32, u32, usize)> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width(), img.height());
    Ok(match img {
        DynamicImage::ImageLuma8(buf) => (buf.into_raw(), h, w, 1),
        DynamicImage::ImageRgb8(buf) => (buf.into_raw(), h, w, 3),
        DynamicImage::ImageLumaA8(_) => (img.to_luma8().into_raw(), h, w, 1),
        DynamicImage::ImageRgba8(_) => (img.to_rgb8().into_raw(), h, w, 3),
        other => {
            return Err(Error::Invalid(format!(
                "{}: unsupported pixel format {:?} (8-bit grey or RGB expected)",
                path.display(),
                other.color()
            )))
        }
    })
}

/// Loads every PNG below `dir` (sorted by path) as records of `split`.
pub fn load_image_folder(dir: &Path, naming: Naming, split: Split) -> Result<Vec<ImageRecord>> {
    if !dir.is_dir() {
        return Err(Error::NoImages(dir.to_path_buf()));
    }
    let mut files = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(dir).to_path_buf();
            Error::io(path, e.into())
        })?;
        let is_png = entry
            .path()
            .extension()
            .is_some_and(|ext| ext.eq_ignore_ascii_case("png"));
        if entry.file_type().is_file() && is_png {
            files.push(entry.into_path());
        }
    }
    if files.is_empty() {
        return Err(Error::NoImages(dir.to_path_buf()));
    }

    let mut records = Vec::with_capacity(files.len());
    let mut first: Option<(String, (u32, u32, usize))> = None;
    for path in files {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::BadFileName(path.display().to_string()))?
            .to_string();
        let (identity, camera) = match naming {
            Naming::MarketStyle => parse_market_name(&name)?,
            Naming::Flat => {
                let parent = path
                    .parent()
                    .and_then(|p| p.file_name())
                    .and_then(|p| p.to_str())
                    .ok_or_else(|| Error::BadFileName(path.display().to_string()))?;
                let identity = parent
                    .parse()
                    .map_err(|_| Error::BadFileName(path.display().to_string()))?;
                (identity, 0)
            }
        };
        let (pixels, h, w, c) = decode(&path)?;
        match &first {
            None => first = Some((path.display().to_string(), (h, w, c))),
            Some((first_file, expected)) if *expected != (h, w, c) => {
                return Err(Error::MixedSizes {
                    first: first_file.clone(),
                    file: path.display().to_string(),
                    expected: *expected,
                    found: (h, w, c),
                })
            }
            Some(_) => {}
        }
        records.push(ImageRecord {
            pixels,
            shape: ImageShape::new(h as usize, w as usize, c),
            identity,
            camera,
            split,
            source_path: Some(path.display().to_string()),
        });
    }
    Ok(records)
}

/// Loads `root/train`, `root/probe` and `root/gallery` and verifies that the
/// splits are consistent.
pub fn load_dataset(root: &Path, naming: Naming) -> Result<Dataset> {
    let train = load_image_folder(&root.join(Split::Train.dir_name()), naming, Split::Train)?;
    let probe = load_image_folder(&root.join(Split::Probe.dir_name()), naming, Split::Probe)?;
    let gallery = load_image_folder(
        &root.join(Split::Gallery.dir_name()),
        naming,
        Split::Gallery,
    )?;
    let shape = train[0].shape;
    for r in probe.iter().chain(&gallery) {
        if r.shape != shape {
            return Err(Error::MixedSizes {
                first: train[0].source_path.clone().unwrap_or_default(),
                file: r.source_path.clone().unwrap_or_default(),
                expected: (shape.height as u32, shape.width as u32, shape.channels),
                found: (
                    r.shape.height as u32,
                    r.shape.width as u32,
                    r.shape.channels,
                ),
            });
        }
    }
    let dataset = Dataset {
        shape,
        train,
        probe,
        gallery,
    };
    dataset.verify_splits()?;
    Ok(dataset)
}
