//! Portable sample files.
//!
//! * `<id>.img`: one ASCII line `HCA1 <height> <width> <spacing_mm>\n`
//!   followed by `height * width` little-endian `f32` values, row-major.
//! * `<id>.keypoints.csv`: header `disc,row,col,visible`, one row per disc
//!   slot; invisible discs carry `-1,-1,0`.
//! * `manifest.csv` (optional): header `id,modality,subject_id`.

use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Modality, SpineSample, NUM_DISCS};
use crate::error::{HcaError, Result};
use crate::heatmap::{KeypointSet, INVISIBLE};
use crate::tensor::Tensor;

const MAGIC: &str = "HCA1";
pub const MANIFEST: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub modality: String,
    pub subject_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct KeypointRow {
    disc: usize,
    row: f64,
    col: f64,
    visible: u8,
}

fn img_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.img"))
}

fn csv_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.keypoints.csv"))
}

/// Writes an `.img` file.
pub fn write_image_file(path: &Path, image: &Tensor, spacing_mm: f64) -> Result<()> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut buf = format!("{MAGIC} {h} {w} {spacing_mm}\n").into_bytes();
    buf.reserve(4 * h * w);
    for &v in image.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| HcaError::io(path, e))
}

/// Reads an `.img` file into an `H x W` tensor and its spacing.
pub fn read_image_file(path: &Path) -> Result<(Tensor, f64)> {
    let file = fs::File::open(path).map_err(|e| HcaError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut header = String::new();
    reader
        .read_line(&mut header)
        .map_err(|e| HcaError::io(path, e))?;
    let fields: Vec<&str> = header.trim_end_matches('\n').split(' ').collect();
    if fields.len() != 4 || fields[0] != MAGIC {
        return Err(HcaError::ingest(path, format!("bad image header {header:?}")));
    }
    let parse_dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| HcaError::ingest(path, format!("bad dimension {s:?}")))
    };
    let (h, w) = (parse_dim(fields[1])?, parse_dim(fields[2])?);
    let spacing: f64 = fields[3]
        .parse()
        .map_err(|_| HcaError::ingest(path, format!("bad spacing {:?}", fields[3])))?;
    if h == 0 || w == 0 || !(spacing > 0.0) {
        return Err(HcaError::ingest(path, "image dimensions and spacing must be positive"));
    }
    let mut raw = Vec::with_capacity(4 * h * w);
    reader
        .read_to_end(&mut raw)
        .map_err(|e| HcaError::io(path, e))?;
    if raw.len() != 4 * h * w {
        return Err(HcaError::ingest(
            path,
            format!("expected {} payload bytes, found {}", 4 * h * w, raw.len()),
        ));
    }
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok((Tensor::from_vec(&[h, w], data)?, spacing))
}

pub fn write_keypoints_csv(path: &Path, keypoints: &KeypointSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HcaError::ingest(path, e.to_string()))?;
    for (disc, (c, &v)) in keypoints.coords.iter().zip(&keypoints.visible).enumerate() {
        let c = if v { *c } else { INVISIBLE };
        w.serialize(KeypointRow {
            disc,
            row: c[0],
            col: c[1],
            visible: v as u8,
        })
        .map_err(|e| HcaError::ingest(path, e.to_string()))?;
    }
    w.flush().map_err(|e| HcaError::io(path, e))
}

/// Reads disc annotations; slots not listed in the file are invisible.
pub fn read_keypoints_csv(path: &Path, spacing_mm: f64) -> Result<KeypointSet> {
    let mut r = csv::Reader::from_path(path).map_err(|e| HcaError::ingest(path, e.to_string()))?;
    let mut coords = vec![INVISIBLE; NUM_DISCS];
    let mut visible = vec![false; NUM_DISCS];
    for row in r.deserialize::<KeypointRow>() {
        let row = row.map_err(|e| HcaError::ingest(path, e.to_string()))?;
        if row.disc >= NUM_DISCS {
            return Err(HcaError::ingest(
                path,
                format!("disc index {} outside 0..{NUM_DISCS}", row.disc),
            ));
        }
        if row.visible > 1 {
            return Err(HcaError::ingest(path, format!("visible flag {}", row.visible)));
        }
        if row.visible == 1 {
            coords[row.disc] = [row.row, row.col];
            visible[row.disc] = true;
        }
    }
    KeypointSet::new(coords, visible, spacing_mm).map_err(|e| HcaError::ingest(path, e.to_string()))
}

pub fn write_manifest(dir: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let path = dir.join(MANIFEST);
    let mut w = csv::Writer::from_path(&path).map_err(|e| HcaError::ingest(&path, e.to_string()))?;
    for e in entries {
        w.serialize(e)
            .map_err(|err| HcaError::ingest(&path, err.to_string()))?;
    }
    w.flush().map_err(|e| HcaError::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Option<Vec<ManifestEntry>>> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Ok(None);
    }
    let mut r = csv::Reader::from_path(&path).map_err(|e| HcaError::ingest(&path, e.to_string()))?;
    let entries = r
        .deserialize()
        .collect::<std::result::Result<Vec<ManifestEntry>, _>>()
        .map_err(|e| HcaError::ingest(&path, e.to_string()))?;
    Ok(Some(entries))
}

pub fn write_sample(dir: &Path, id: &str, sample: &SpineSample) -> Result<()> {
    write_image_file(&img_path(dir, id), &sample.image, sample.keypoints.spacing_mm)?;
    write_keypoints_csv(&csv_path(dir, id), &sample.keypoints)
}

pub fn read_sample(dir: &Path, id: &str, subject_id: &str, modality: Modality) -> Result<SpineSample> {
    let ipath = img_path(dir, id);
    let (image, spacing) = read_image_file(&ipath)?;
    let keypoints = read_keypoints_csv(&csv_path(dir, id), spacing)?;
    let sample = SpineSample {
        image,
        keypoints,
        subject_id: subject_id.to_string(),
        modality,
    };
    sample
        .validate()
        .map_err(|e| HcaError::ingest(&ipath, e.to_string()))?;
    Ok(sample)
}

/// Writes samples as `<id>.img` / `<id>.keypoints.csv` pairs plus a
/// manifest. Sample `i` gets id `sample_<i>` (zero-padded to 4 digits).
pub fn write_dataset(dir: &Path, samples: &[SpineSample]) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir).map_err(|e| HcaError::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let id = format!("sample_{i:04}");
        write_sample(dir, &id, s)?;
        entries.push(ManifestEntry {
            id,
            modality: s.modality.to_string(),
            subject_id: s.subject_id.clone(),
        });
    }
    write_manifest(dir, &entries)?;
    Ok(entries)
}

/// Loads every sample of a dataset directory, in manifest order when a
/// manifest exists and in sorted id order otherwise (each file then counts
/// as its own subject, modality `synthetic`).
pub fn load_dataset(dir: &Path) -> Result<Vec<SpineSample>> {
    let entries = match read_manifest(dir)? {
        Some(e) => e,
        None => {
            let mut ids = Vec::new();
            for entry in fs::read_dir(dir).map_err(|e| HcaError::io(dir, e))? {
                let entry = entry.map_err(|e| HcaError::io(dir, e))?;
                let name = entry.file_name().to_string_lossy().into_owned();
                if let Some(id) = name.strip_suffix(".img") {
                    ids.push(id.to_string());
                }
            }
            ids.sort();
            ids.into_iter()
                .map(|id| ManifestEntry {
                    subject_id: id.clone(),
                    id,
                    modality: Modality::Synthetic.to_string(),
                })
                .collect()
        }
    };
    if entries.is_empty() {
        return Err(HcaError::ingest(dir, "dataset directory holds no samples"));
    }
    entries
        .iter()
        .map(|e| {
            let modality = e
                .modality
                .parse()
                .map_err(|err: HcaError| HcaError::ingest(dir.join(MANIFEST), err.to_string()))?;
            read_sample(dir, &e.id, &e.subject_id, modality)
        })
        .collect()
}
