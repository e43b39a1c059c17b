//! Sparsely annotated samples and everything that produces or reshuffles them.

mod augment;
mod crop;
mod manifest;
mod pgm;
mod split;
mod synth;

pub use augment::{augment, compose_ops, invert_op, transform_plane, NUM_OPS};
pub use crop::{crop_lungs, Crop, LUNG_MARGIN};
pub use manifest::{DatasetManifest, ManifestRecord, Provenance, DEFAULT_CLASSES};
pub use pgm::{read_pgm, PgmImage};
pub use split::{
    fold_sizes, hill_climb_split, hill_climb_split_counts, hill_climb_split_restarts,
    mean_fold_entropy, SplitAssignment,
};
pub use synth::{synth_mosaic, synth_suite, thin_labels, SynthConfig, TEXTURE_FAMILIES};

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Mask, Tensor, UNLABELED};

/// One training or evaluation image with its sparse annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub case_id: String,
    /// `1×H×W` raw intensities.
    pub image: Tensor,
    pub labels: LabelMap,
    pub roi: Mask,
}

impl SampleRecord {
    /// Checks shapes, label codes and that every labeled pixel lies in the ROI.
    pub fn new(case_id: impl Into<String>, image: Tensor, labels: LabelMap, roi: Mask) -> Result<Self> {
        let rec = SampleRecord {
            case_id: case_id.into(),
            image,
            labels,
            roi,
        };
        rec.validate(None)?;
        Ok(rec)
    }

    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }

    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        let (c, h, w) = self.image.chw()?;
        if c != 1 {
            return Err(Error::InvalidShape(format!(
                "{}: image must have one channel, has {c}",
                self.case_id
            )));
        }
        if (self.labels.height, self.labels.width) != (h, w)
            || (self.roi.height, self.roi.width) != (h, w)
        {
            return Err(Error::InvalidShape(format!(
                "{}: image {h}×{w}, labels {}×{}, roi {}×{}",
                self.case_id, self.labels.height, self.labels.width, self.roi.height, self.roi.width
            )));
        }
        if let Some(c) = num_classes {
            self.labels.validate(c)?;
        }
        if let Some(i) = self
            .labels
            .data
            .iter()
            .zip(&self.roi.data)
            .position(|(&l, &r)| l != UNLABELED && !r)
        {
            return Err(Error::InvalidInput(format!(
                "{}: labeled pixel ({}, {}) lies outside the roi",
                self.case_id,
                i / w,
                i % w
            )));
        }
        Ok(())
    }

    /// Labeled pixels per class inside the ROI.
    pub fn class_counts(&self, num_classes: usize) -> Result<Vec<u64>> {
        self.labels.validate(num_classes)?;
        let mut counts = vec![0u64; num_classes];
        for (&l, &r) in self.labels.data.iter().zip(&self.roi.data) {
            if r && l != UNLABELED {
                counts[l as usize] += 1;
            }
        }
        Ok(counts)
    }
}

/// Labeled pixel tally over a subset of per-case counts.
pub fn class_counts(per_case: &[Vec<u64>], subset: &[usize], num_classes: usize) -> Result<Vec<u64>> {
    let mut total = vec![0u64; num_classes];
    for &i in subset {
        let row = per_case.get(i).ok_or_else(|| {
            Error::InvalidParameter(format!("case index {i} out of range ({})", per_case.len()))
        })?;
        if row.len() != num_classes {
            return Err(Error::InvalidShape(format!(
                "case {i} has {} class counts, expected {num_classes}",
                row.len()
            )));
        }
        for (t, &n) in total.iter_mut().zip(row) {
            *t += n;
        }
    }
    Ok(total)
}
