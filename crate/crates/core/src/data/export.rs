//! 8-bit PNG export of image sets and adversarial galleries.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::ExtendedColorType;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{market_file_name, ImageRecord, ImageShape};
use crate::attacks::{linf_distance, AdversarialExample, BALL_SLACK};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// One line of an adversarial manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub source: String,
    pub identity: u32,
    pub camera: u32,
    pub attack_hash: String,
    /// Absent for images that were passed through unattacked.
    pub loss_before: Option<f32>,
    pub loss_after: Option<f32>,
    pub file: String,
}

/// Rounds each pixel to the nearest 8-bit value that stays within `epsilon`
/// of the original (plain rounding can leave the ball when `epsilon < 1`).
pub fn quantize_within_ball(adv: &[f32], orig: &[u8], epsilon: f32) -> Vec<u8> {
    let eps = f64::from(epsilon);
    adv.iter()
        .zip(orig)
        .map(|(&a, &o)| {
            let o = f64::from(o);
            let lo = (o - eps).ceil().max(0.0);
            let hi = (o + eps).floor().min(255.0);
            f64::from(a).round().clamp(lo, hi) as u8
        })
        .collect()
}

fn write_png(path: &Path, shape: ImageShape, pixels: &[u8]) -> Result<()> {
    let color = if shape.channels == 1 {
        ExtendedColorType::L8
    } else {
        ExtendedColorType::Rgb8
    };
    image::save_buffer(path, pixels, shape.width as u32, shape.height as u32, color).map_err(
        |source| Error::Image {
            path: path.to_path_buf(),
            source,
        },
    )
}

fn output_name(record: &ImageRecord, index: usize) -> String {
    record
        .source_path
        .as_deref()
        .and_then(|p| Path::new(p).file_name())
        .and_then(|n| n.to_str())
        .map(str::to_string)
        .unwrap_or_else(|| market_file_name(record.identity, record.camera, index as u32))
}

fn unique_names(names: &[String]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(Error::Invalid(format!("duplicate output file name {n}")));
        }
    }
    Ok(())
}

/// Writes records as PNGs named after their source files.
pub fn write_split(records: &[ImageRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names: Vec<String> = records
        .iter()
        .enumerate()
        .map(|(i, r)| output_name(r, i))
        .collect();
    unique_names(&names)?;
    records
        .par_iter()
        .zip(&names)
        .map(|(r, name)| {
            let path = dir.join(name);
            write_png(&path, r.shape, &r.pixels)?;
            Ok(path)
        })
        .collect()
}

/// Quantizes, re-verifies the ε-ball and writes every adversarial image to
/// `out_dir`, followed by `manifest.jsonl`. Returns the manifest path.
pub fn export_adversarial_gallery(
    examples: &[AdversarialExample],
    out_dir: &Path,
) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let names: Vec<String> = examples
        .iter()
        .enumerate()
        .map(|(i, e)| output_name(&e.original, i))
        .collect();
    unique_names(&names)?;

    let entries: Vec<ManifestEntry> = examples
        .par_iter()
        .zip(&names)
        .map(|(ex, name)| {
            let orig_f32 = ex.original.pixels_f32();
            let eps = f64::from(ex.config.epsilon);
            let float_dist = linf_distance(&ex.adversarial, &orig_f32);
            let in_range = ex.adversarial.iter().all(|v| (0.0..=255.0).contains(v));
            if float_dist > eps + BALL_SLACK || !in_range {
                return Err(Error::EpsilonViolation {
                    file: name.clone(),
                    found: float_dist,
                    epsilon: eps,
                });
            }
            let pixels =
                quantize_within_ball(&ex.adversarial, &ex.original.pixels, ex.config.epsilon);
            let quantized: Vec<f32> = pixels.iter().map(|&p| f32::from(p)).collect();
            let found = linf_distance(&quantized, &orig_f32);
            if found > eps {
                return Err(Error::EpsilonViolation {
                    file: name.clone(),
                    found,
                    epsilon: eps,
                });
            }
            write_png(&out_dir.join(name), ex.original.shape, &pixels)?;
            let finite = |v: f32| v.is_finite().then_some(v);
            Ok(ManifestEntry {
                source: ex.original.source_path.clone().unwrap_or_default(),
                identity: ex.original.identity,
                camera: ex.original.camera,
                attack_hash: ex.config.hash()?,
                loss_before: finite(ex.loss_before),
                loss_after: finite(ex.loss_after),
                file: name.clone(),
            })
        })
        .collect::<Result<_>>()?;

    let manifest = out_dir.join(MANIFEST_FILE);
    let mut body = Vec::new();
    for entry in &entries {
        serde_json::to_writer(&mut body, entry)?;
        body.push(b'\n');
    }
    let mut file = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    file.write_all(&body).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_stays_in_ball() {
        assert_eq!(
            quantize_within_ball(&[104.6, 95.4], &[100, 100], 5.0),
            vec![105, 95]
        );
        // Rounding 100.5 up would leave a 0.5 ball.
        assert_eq!(quantize_within_ball(&[100.5], &[100], 0.5), vec![100]);
        assert_eq!(
            quantize_within_ball(&[255.0, 0.0], &[253, 2], 3.0),
            vec![255, 0]
        );
    }
}
