//! Synthetic multi-label segmentation data.

mod augment;
mod io;
mod synth;

pub use augment::{augment, rescale};
pub use io::{load_dataset, parse_manifest_line, save_dataset, ManifestEntry, DATASET_MANIFEST};
pub use synth::{generate, GenerateConfig, ShapeKind};

use crate::error::{Error, Result};
use crate::seeding::LabelMask;
use crate::tensor::Tensor;

/// Image, image-level labels and pixel ground truth.
///
/// `labels[s]` is set iff id `s + 1` occurs in `gt`; the constructor
/// derives the labels so the two cannot disagree.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, size, size]`, values in `[0, 1]`.
    pub image: Tensor,
    labels: Vec<bool>,
    gt: LabelMask,
}

impl Sample {
    pub fn new(image: Tensor, gt: LabelMask, num_classes: usize) -> Result<Self> {
        match image.shape()[..] {
            [3, h, w] if h == gt.height() && w == gt.width() => {}
            _ => {
                return Err(Error::invalid(
                    "sample",
                    format!(
                        "image {:?} does not match {}x{} mask",
                        image.shape(),
                        gt.height(),
                        gt.width()
                    ),
                ))
            }
        }
        gt.check_ids(num_classes + 1)?;
        let labels = gt.present(num_classes + 1)[1..].to_vec();
        Ok(Sample { image, labels, gt })
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn gt(&self) -> &LabelMask {
        &self.gt
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    /// Multi-hot `y` as a `[S−1]` tensor of 0/1.
    pub fn label_tensor(&self) -> Tensor {
        Tensor::from_vec(self.labels.iter().map(|&b| b as u8 as f64).collect())
    }

    pub fn label_bits(&self) -> String {
        self.labels.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub image_size: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn gts(&self) -> Vec<LabelMask> {
        self.samples.iter().map(|s| s.gt.clone()).collect()
    }
}
