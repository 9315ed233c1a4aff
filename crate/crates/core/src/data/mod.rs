//! Spine samples: on-disk format, synthetic generation, volumetric
//! ingestion, batching and the train/validation split.

mod batch;
mod format;
mod synth;
mod volume;

use serde::{Deserialize, Serialize};

use crate::error::{HcaError, Result};
use crate::heatmap::KeypointSet;
use crate::tensor::Tensor;

pub use batch::{heatmap_keypoints, prepare_batch, resize_to, Batch, ResizeTransform};
pub use format::{
    load_dataset, read_image_file, read_keypoints_csv, read_manifest, read_sample, write_dataset,
    write_image_file, write_keypoints_csv, write_manifest, write_sample, ManifestEntry,
};
pub use synth::{generate_synthetic, SynthConfig};
pub use volume::{load_volume_as_sample, slice_window, SLAB};

/// Number of labeled discs per subject.
pub const NUM_DISCS: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    T1w,
    T2w,
    #[serde(rename = "synthetic")]
    Synthetic,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::T1w => "T1w",
            Modality::T2w => "T2w",
            Modality::Synthetic => "synthetic",
        })
    }
}

impl std::str::FromStr for Modality {
    type Err = HcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "T1w" => Ok(Modality::T1w),
            "T2w" => Ok(Modality::T2w),
            "synthetic" => Ok(Modality::Synthetic),
            other => Err(HcaError::InputDomain(format!("unknown modality {other:?}"))),
        }
    }
}

/// One 2-D sagittal image in `[0, 1]` with its disc annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct SpineSample {
    /// `H x W` intensities.
    pub image: Tensor,
    pub keypoints: KeypointSet,
    pub subject_id: String,
    pub modality: Modality,
}

impl SpineSample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.shape().len() != 2 {
            return Err(HcaError::InputDomain(format!(
                "sample image must be H x W, got {:?}",
                self.image.shape()
            )));
        }
        if self
            .image
            .data()
            .iter()
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(HcaError::InputDomain(format!(
                "sample {} has intensities outside [0, 1]",
                self.subject_id
            )));
        }
        if self.keypoints.len() != NUM_DISCS {
            return Err(HcaError::InputDomain(format!(
                "sample {} has {} disc slots, expected {NUM_DISCS}",
                self.subject_id,
                self.keypoints.len()
            )));
        }
        self.keypoints.check_bounds(self.height(), self.width())
    }
}

/// Scales values to `[0, 1]` by min-max; a constant input becomes all zeros.
pub fn min_max_normalize(values: &mut [f64]) {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        values.fill(0.0);
        return;
    }
    for v in values.iter_mut() {
        *v = ((*v - lo) / range).clamp(0.0, 1.0);
    }
}

/// FNV-1a 64-bit hash, stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// True when `subject_id` belongs to the validation fold (about 20% of
/// subjects). All samples of one subject land on the same side.
pub fn is_validation_subject(subject_id: &str) -> bool {
    fnv1a(subject_id.as_bytes()) % 100 >= 80
}

/// Splits samples 80/20 by subject hash into `(train, validation)`.
pub fn split_by_subject(samples: Vec<SpineSample>) -> (Vec<SpineSample>, Vec<SpineSample>) {
    samples
        .into_iter()
        .partition(|s| !is_validation_subject(&s.subject_id))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_normalizes_to_zero() {
        let mut v = vec![3.0; 10];
        min_max_normalize(&mut v);
        assert!(v.iter().all(|&x| x == 0.0));
        let mut v = vec![2.0, 4.0, 3.0];
        min_max_normalize(&mut v);
        assert_eq!(v, vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn split_keeps_subjects_together_and_is_roughly_80_20() {
        let ids: Vec<String> = (0..2000).map(|i| format!("sub-{i:04}")).collect();
        let val = ids.iter().filter(|id| is_validation_subject(id)).count();
        assert!((300..500).contains(&val), "validation fraction {val}/2000");
        assert_eq!(is_validation_subject("sub-0007"), is_validation_subject("sub-0007"));
    }
}
