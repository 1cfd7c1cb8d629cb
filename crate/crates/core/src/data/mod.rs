//! Image records, datasets and pixel batches.
//!
//! Records hold 8-bit pixels as stored on disk. Everything that feeds a model
//! goes through [`ImageBatch`], which keeps pixels as `f32` in `[0, 255]` so
//! that adversarial images can be evaluated before quantization.

mod export;
mod folder;
mod synth;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::attacks::AdversarialExample;
use crate::error::{Error, Result};

pub use export::{
    export_adversarial_gallery, quantize_within_ball, read_manifest, write_split, ManifestEntry,
    MANIFEST_FILE,
};
pub use folder::{load_dataset, load_image_folder, market_file_name, parse_market_name, Naming};
pub use synth::{synth_generate, Jitter, SynthSpec};

/// Height, width and channel count of every image in a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    /// Number of values in one image.
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "image shape {self:?} has a zero side"
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!(
                "image shape {self:?}: channels must be 1 or 3"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Probe,
    Gallery,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Probe => "probe",
            Split::Gallery => "gallery",
        }
    }
}

/// One labelled image. Pixels are row-major `H × W × C`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub pixels: Vec<u8>,
    pub shape: ImageShape,
    pub identity: u32,
    pub camera: u32,
    pub split: Split,
    pub source_path: Option<String>,
}

impl ImageRecord {
    pub fn pixels_f32(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| f32::from(p)).collect()
    }
}

/// Train, probe and gallery splits sharing one image shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub shape: ImageShape,
    pub train: Vec<ImageRecord>,
    pub probe: Vec<ImageRecord>,
    pub gallery: Vec<ImageRecord>,
}

impl Dataset {
    /// Checks that training identities do not appear in the test splits and
    /// that no file is listed in both probe and gallery.
    pub fn verify_splits(&self) -> Result<()> {
        let train_ids: BTreeSet<u32> = self.train.iter().map(|r| r.identity).collect();
        let overlap: Vec<u32> = self
            .probe
            .iter()
            .chain(&self.gallery)
            .map(|r| r.identity)
            .filter(|id| train_ids.contains(id))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if !overlap.is_empty() {
            return Err(Error::Invalid(format!(
                "identities {overlap:?} appear in both training and test splits"
            )));
        }
        let probe_files: BTreeSet<&str> = self
            .probe
            .iter()
            .filter_map(|r| r.source_path.as_deref().and_then(file_name))
            .collect();
        if let Some(dup) = self
            .gallery
            .iter()
            .filter_map(|r| r.source_path.as_deref().and_then(file_name))
            .find(|f| probe_files.contains(f))
        {
            return Err(Error::Invalid(format!(
                "file {dup} appears in both probe and gallery"
            )));
        }
        Ok(())
    }
}

fn file_name(path: &str) -> Option<&str> {
    std::path::Path::new(path).file_name()?.to_str()
}

/// A batch of images as `f32` pixels with aligned identity and camera labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub shape: ImageShape,
    pub pixels: Vec<f32>,
    pub identities: Vec<u32>,
    pub cameras: Vec<u32>,
}

impl ImageBatch {
    pub fn empty(shape: ImageShape) -> Self {
        Self {
            shape,
            pixels: Vec::new(),
            identities: Vec::new(),
            cameras: Vec::new(),
        }
    }

    pub fn from_records(records: &[ImageRecord]) -> Result<Self> {
        let shape = records
            .first()
            .map(|r| r.shape)
            .ok_or_else(|| Error::Invalid("empty image list".into()))?;
        let mut batch = Self::empty(shape);
        for r in records {
            batch.push(&r.pixels_f32(), r.identity, r.camera)?;
        }
        Ok(batch)
    }

    /// Batch of the adversarial pixels, labelled like their source images.
    pub fn from_adversarial(examples: &[AdversarialExample]) -> Result<Self> {
        let shape = examples
            .first()
            .map(|e| e.original.shape)
            .ok_or_else(|| Error::Invalid("empty adversarial set".into()))?;
        let mut batch = Self::empty(shape);
        for e in examples {
            batch.push(&e.adversarial, e.original.identity, e.original.camera)?;
        }
        Ok(batch)
    }

    pub fn push(&mut self, pixels: &[f32], identity: u32, camera: u32) -> Result<()> {
        if pixels.len() != self.shape.len() {
            return Err(Error::Invalid(format!(
                "image has {} values, expected {} for shape {:?}",
                pixels.len(),
                self.shape.len(),
                self.shape
            )));
        }
        self.pixels.extend_from_slice(pixels);
        self.identities.push(identity);
        self.cameras.push(camera);
        Ok(())
    }

    /// Concatenation of two batches of the same shape.
    pub fn concat(&self, other: &ImageBatch) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Invalid(format!(
                "cannot merge batches of shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = self.clone();
        out.pixels.extend_from_slice(&other.pixels);
        out.identities.extend_from_slice(&other.identities);
        out.cameras.extend_from_slice(&other.cameras);
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn image(&self, index: usize) -> &[f32] {
        let n = self.shape.len();
        &self.pixels[index * n..(index + 1) * n]
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = Self::empty(self.shape);
        for &i in indices {
            out.pixels.extend_from_slice(self.image(i));
            out.identities.push(self.identities[i]);
            out.cameras.push(self.cameras[i]);
        }
        out
    }

    /// Dense class indices for the identities of this batch.
    pub fn class_labels(&self) -> LabelMap {
        LabelMap::new(&self.identities)
    }
}

/// Maps sparse identity numbers to dense class indices in ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub classes: BTreeMap<u32, usize>,
    pub labels: Vec<usize>,
}

impl LabelMap {
    pub fn new(identities: &[u32]) -> Self {
        let classes: BTreeMap<u32, usize> = identities
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, i))
            .collect();
        let labels = identities.iter().map(|id| classes[id]).collect();
        Self { classes, labels }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_map_is_dense_and_ordered() {
        let map = LabelMap::new(&[7, 3, 7, 12]);
        assert_eq!(map.labels, vec![1, 0, 1, 2]);
        assert_eq!(map.num_classes(), 3);
    }

    #[test]
    fn batch_rejects_wrong_length() {
        let mut b = ImageBatch::empty(ImageShape::new(2, 2, 1));
        assert!(b.push(&[0.0; 3], 0, 0).is_err());
        b.push(&[1.0; 4], 5, 1).unwrap();
        assert_eq!(b.image(0), &[1.0; 4]);
    }
}
