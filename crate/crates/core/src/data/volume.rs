//! NIfTI volume ingestion: sagittal slab averaging and disc projection.
//!
//! Volumes are indexed `[i, j, k]` with `i` the sagittal (left-right) axis.
//! The 2-D image has `row = nk - 1 - k` (superior at the top) and `col = j`.
//!
//! Disc labels come either from a CSV with header `disc,x,y,z` (voxel
//! indices, disc numbered 1..=11) or from a NIfTI label volume whose voxel
//! values 1..=11 mark each disc; the label's centroid is used.

use std::path::Path;

use nifti::{IntoNdArray, NiftiObject, ReaderOptions};
use serde::Deserialize;

use super::{min_max_normalize, Modality, SpineSample, NUM_DISCS};
use crate::error::{HcaError, Result};
use crate::heatmap::{KeypointSet, INVISIBLE};
use crate::tensor::Tensor;

/// Number of sagittal slices averaged into one image.
pub const SLAB: usize = 6;

/// Indices of the averaged slices: `mid-3 .. mid+2` with `mid = n / 2`.
pub fn slice_window(n_slices: usize) -> Option<std::ops::Range<usize>> {
    if n_slices < SLAB {
        return None;
    }
    let mid = n_slices / 2;
    Some(mid - 3..mid + 3)
}

struct Volume {
    dims: [usize; 3],
    data: Vec<f64>,
    spacing: [f64; 3],
}

impl Volume {
    fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.dims[1] + j) * self.dims[2] + k]
    }
}

fn read_volume(path: &Path) -> Result<Volume> {
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| HcaError::ingest(path, e.to_string()))?;
    let header = obj.header().clone();
    let arr = obj
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| HcaError::ingest(path, e.to_string()))?;
    let shape = arr.shape().to_vec();
    let dims = match shape.as_slice() {
        [a, b, c] => [*a, *b, *c],
        [a, b, c, 1] => [*a, *b, *c],
        other => {
            return Err(HcaError::ingest(
                path,
                format!("expected a 3-D volume, got shape {other:?}"),
            ))
        }
    };
    let mut data = Vec::with_capacity(dims.iter().product());
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let v = if shape.len() == 3 {
                    arr[[i, j, k].as_slice()]
                } else {
                    arr[[i, j, k, 0].as_slice()]
                };
                data.push(v);
            }
        }
    }
    let spacing = [1, 2, 3].map(|d| {
        let s = header.pixdim[d] as f64;
        if s > 0.0 && s.is_finite() {
            s
        } else {
            1.0
        }
    });
    Ok(Volume {
        dims,
        data,
        spacing,
    })
}

#[derive(Deserialize)]
struct LabelRow {
    disc: usize,
    x: f64,
    y: f64,
    z: f64,
}

/// Disc centres in voxel indices, slot `disc - 1`.
fn read_labels(path: &Path, dims: [usize; 3]) -> Result<Vec<Option<[f64; 3]>>> {
    let mut out = vec![None; NUM_DISCS];
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        let vol = read_volume(path)?;
        if vol.dims != dims {
            return Err(HcaError::ingest(
                path,
                format!("label volume {:?} does not match image {:?}", vol.dims, dims),
            ));
        }
        let mut sums = vec![[0.0f64; 4]; NUM_DISCS];
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    let v = vol.at(i, j, k).round();
                    if v >= 1.0 && v <= NUM_DISCS as f64 {
                        let s = &mut sums[v as usize - 1];
                        s[0] += i as f64;
                        s[1] += j as f64;
                        s[2] += k as f64;
                        s[3] += 1.0;
                    }
                }
            }
        }
        for (slot, s) in out.iter_mut().zip(&sums) {
            if s[3] > 0.0 {
                *slot = Some([s[0] / s[3], s[1] / s[3], s[2] / s[3]]);
            }
        }
        return Ok(out);
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| HcaError::ingest(path, e.to_string()))?;
    for row in reader.deserialize::<LabelRow>() {
        let row = row.map_err(|e| HcaError::ingest(path, e.to_string()))?;
        if row.disc == 0 || row.disc > NUM_DISCS {
            return Err(HcaError::ingest(
                path,
                format!("disc label {} outside 1..={NUM_DISCS}", row.disc),
            ));
        }
        if ![row.x, row.y, row.z].iter().all(|v| v.is_finite()) {
            return Err(HcaError::ingest(path, format!("non-finite coordinate for disc {}", row.disc)));
        }
        out[row.disc - 1] = Some([row.x, row.y, row.z]);
    }
    Ok(out)
}

/// Loads a 3-D volume and its disc labels as one averaged sagittal image.
pub fn load_volume_as_sample(
    volume_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    modality: Modality,
) -> Result<SpineSample> {
    let volume_path = volume_path.as_ref();
    let labels_path = labels_path.as_ref();
    let vol = read_volume(volume_path)?;
    let [ni, nj, nk] = vol.dims;
    let window = slice_window(ni).ok_or_else(|| {
        HcaError::ingest(
            volume_path,
            format!("{ni} sagittal slices, need at least {SLAB}"),
        )
    })?;
    let (h, w) = (nk, nj);
    let mut img = vec![0.0; h * w];
    for i in window.clone() {
        for j in 0..nj {
            for k in 0..nk {
                img[(nk - 1 - k) * w + j] += vol.at(i, j, k);
            }
        }
    }
    if img.iter().any(|v| !v.is_finite()) {
        return Err(HcaError::ingest(volume_path, "volume contains non-finite values"));
    }
    for v in img.iter_mut() {
        *v /= SLAB as f64;
    }
    min_max_normalize(&mut img);

    let labels = read_labels(labels_path, vol.dims)?;
    let mut coords = vec![INVISIBLE; NUM_DISCS];
    let mut visible = vec![false; NUM_DISCS];
    for (slot, label) in labels.iter().enumerate() {
        if let Some([_, y, z]) = *label {
            let (r, c) = ((nk - 1) as f64 - z, y);
            if r < 0.0 || c < 0.0 || r > (h - 1) as f64 || c > (w - 1) as f64 {
                return Err(HcaError::ingest(
                    labels_path,
                    format!("disc {} lies outside the volume", slot + 1),
                ));
            }
            coords[slot] = [r, c];
            visible[slot] = true;
        }
    }
    let spacing = 0.5 * (vol.spacing[1] + vol.spacing[2]);
    let keypoints = KeypointSet::new(coords, visible, spacing)?;
    let subject_id = volume_path
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.trim_end_matches(".gz").trim_end_matches(".nii").to_string())
        .unwrap_or_default();
    let sample = SpineSample {
        image: Tensor::from_vec(&[h, w], img)?,
        keypoints,
        subject_id,
        modality,
    };
    sample.validate()?;
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use nifti::writer::WriterOptions;
    use nifti::NiftiHeader;

    #[test]
    fn window_arithmetic() {
        assert_eq!(slice_window(7), Some(0..6));
        assert_eq!(slice_window(6), Some(0..6));
        assert_eq!(slice_window(10), Some(2..8));
        assert_eq!(slice_window(5), None);
    }

    fn write_volume(path: &Path, arr: &Array3<f32>, pixdim: [f32; 3]) {
        let mut header = NiftiHeader::default();
        header.pixdim = [1.0, pixdim[0], pixdim[1], pixdim[2], 1.0, 1.0, 1.0, 1.0];
        WriterOptions::new(path)
            .reference_header(&header)
            .write_nifti(arr)
            .unwrap();
    }

    #[test]
    fn phantom_discs_project_to_in_plane_coordinates() {
        let dir = tempfile::tempdir().unwrap();
        let (ni, nj, nk) = (8, 20, 40);
        let mut img = Array3::<f32>::zeros((ni, nj, nk));
        let mut labels = Array3::<f32>::zeros((ni, nj, nk));
        let mut expected = Vec::new();
        for d in 0..NUM_DISCS {
            if d == 4 {
                continue;
            }
            let (j, k) = (5 + d % 3, 2 + 3 * d);
            for i in 3..6 {
                img[[i, j, k]] = 10.0;
                labels[[i, j, k]] = (d + 1) as f32;
            }
            expected.push((d, [(nk - 1 - k) as f64, j as f64]));
        }
        let vpath = dir.path().join("sub-01_T2w.nii");
        let lpath = dir.path().join("sub-01_labels.nii");
        write_volume(&vpath, &img, [1.0, 0.5, 1.5]);
        write_volume(&lpath, &labels, [1.0, 0.5, 1.5]);

        let s = load_volume_as_sample(&vpath, &lpath, Modality::T2w).unwrap();
        assert_eq!((s.height(), s.width()), (nk, nj));
        assert_eq!(s.subject_id, "sub-01_T2w");
        assert!(!s.keypoints.visible[4]);
        for (d, c) in expected {
            assert!(s.keypoints.visible[d]);
            assert_eq!(s.keypoints.coords[d], c);
            // 3 of the 6 averaged slices carry the disc voxel
            let [r, cc] = c.map(|v| v as usize);
            assert_eq!(s.image.data()[r * nj + cc], 1.0);
        }
        assert_eq!(s.keypoints.spacing_mm, 1.0);

        let csv_path = dir.path().join("labels.csv");
        std::fs::write(&csv_path, "disc,x,y,z\n1,4,6.5,10\n").unwrap();
        let s = load_volume_as_sample(&vpath, &csv_path, Modality::T2w).unwrap();
        assert_eq!(s.keypoints.coords[0], [29.0, 6.5]);
        assert_eq!(s.keypoints.visible.iter().filter(|&&v| v).count(), 1);
    }

    #[test]
    fn constant_volume_gives_zero_image() {
        let dir = tempfile::tempdir().unwrap();
        let vpath = dir.path().join("flat.nii");
        write_volume(&vpath, &Array3::<f32>::from_elem((7, 4, 5), 3.0), [1.0; 3]);
        let lpath = dir.path().join("l.csv");
        std::fs::write(&lpath, "disc,x,y,z\n").unwrap();
        let s = load_volume_as_sample(&vpath, &lpath, Modality::T1w).unwrap();
        assert!(s.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ingestion_errors_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let vpath = dir.path().join("thin.nii");
        write_volume(&vpath, &Array3::<f32>::zeros((5, 4, 4)), [1.0; 3]);
        let lpath = dir.path().join("l.csv");
        std::fs::write(&lpath, "disc,x,y,z\n").unwrap();
        let err = load_volume_as_sample(&vpath, &lpath, Modality::T1w).unwrap_err();
        assert!(matches!(err, HcaError::Ingestion { .. }));
        assert!(err.to_string().contains("thin.nii"));

        let vpath = dir.path().join("ok.nii");
        write_volume(&vpath, &Array3::<f32>::zeros((6, 4, 4)), [1.0; 3]);
        std::fs::write(&lpath, "disc,x,y,z\n12,0,0,0\n").unwrap();
        let err = load_volume_as_sample(&vpath, &lpath, Modality::T1w).unwrap_err();
        assert!(err.to_string().contains("l.csv"));
        let missing = dir.path().join("missing.csv");
        let err = load_volume_as_sample(&vpath, &missing, Modality::T1w).unwrap_err();
        assert!(err.to_string().contains("missing.csv"));
    }
}
