//! Dataset schema: annotated images, concept specs, and split bundles.

mod cub;
mod synthetic;
mod validate;

pub use cub::{load_cub_dataset, SplitConfig};
pub use synthetic::{generate_synthetic_dataset, SyntheticConfig};
pub use validate::{validate_dataset, ValidationReport};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// One named concept (a part such as "beak"), with a contiguous zero-based id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub concept_id: usize,
    pub name: String,
}

/// Center location of one concept within one image. When `visible` is false
/// the coordinates carry no meaning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptAnnotation {
    pub concept_id: usize,
    pub x: u32,
    pub y: u32,
    pub visible: bool,
}

/// A 3-channel image with class label and per-concept center annotations.
///
/// Pixels are stored channel-first `[3, height, width]` in `[0, 1]`; the
/// mean/std normalization applied before the network lives in
/// [`PixelNormalization`] so it can travel with checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: u64,
    pub pixels: Array3<f64>,
    pub class_label: u32,
    /// At most one annotation per concept_id, sorted by concept_id.
    pub annotations: Vec<ConceptAnnotation>,
}

impl AnnotatedImage {
    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn annotation_for(&self, concept_id: usize) -> Option<&ConceptAnnotation> {
        self.annotations.iter().find(|a| a.concept_id == concept_id)
    }
}

/// Per-channel normalization constants applied before the trunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelNormalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for PixelNormalization {
    fn default() -> Self {
        PixelNormalization {
            mean: [0.5, 0.5, 0.5],
            std: [0.5, 0.5, 0.5],
        }
    }
}

/// A full dataset: concept specs, three disjoint class splits, and metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub concept_specs: Vec<ConceptSpec>,
    pub base_split: Vec<AnnotatedImage>,
    pub val_split: Vec<AnnotatedImage>,
    pub novel_split: Vec<AnnotatedImage>,
    pub class_names: BTreeMap<u32, String>,
    pub normalization: PixelNormalization,
    /// Source id -> concept_id mapping (e.g. 1-based CUB part ids).
    pub concept_id_map: BTreeMap<u32, usize>,
    /// Edge length images were resized/rendered to.
    pub input_size: usize,
}

impl DatasetBundle {
    pub fn n_concepts(&self) -> usize {
        self.concept_specs.len()
    }

    pub fn split(&self, name: &str) -> Result<&[AnnotatedImage]> {
        match name {
            "base" => Ok(&self.base_split),
            "val" => Ok(&self.val_split),
            "novel" => Ok(&self.novel_split),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }

    /// Labels present in a split, sorted.
    pub fn split_labels(images: &[AnnotatedImage]) -> Vec<u32> {
        let mut labels: Vec<u32> = images.iter().map(|im| im.class_label).collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }
}

/// Per-channel mean/std computed over a set of images.
pub fn compute_normalization(images: &[AnnotatedImage]) -> PixelNormalization {
    let mut mean = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut count = 0usize;
    for im in images {
        let (_, h, w) = im.pixels.dim();
        count += h * w;
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = im.pixels[[c, y, x]];
                    mean[c] += v;
                    sq[c] += v * v;
                }
            }
        }
    }
    if count == 0 {
        return PixelNormalization::default();
    }
    let mut std = [0.0f64; 3];
    for c in 0..3 {
        mean[c] /= count as f64;
        let var = (sq[c] / count as f64 - mean[c] * mean[c]).max(0.0);
        // floor keeps near-constant channels from exploding after division
        std[c] = var.sqrt().max(1e-3);
    }
    PixelNormalization { mean, std }
}
