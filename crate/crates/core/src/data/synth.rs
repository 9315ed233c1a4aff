//! Synthetic sagittal spine images with exact disc annotations.
//!
//! Each image shows a smooth spine curve carrying 11 bright elliptical discs
//! separated by darker, flat-topped vertebral bodies. Layers are composited
//! with `max`, so every disc's brightest pixel is the pixel nearest its
//! centre. Optional bright blobs away from the spine act as distractors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Modality, SpineSample, NUM_DISCS};
use crate::error::{HcaError, Result};
use crate::heatmap::{KeypointSet, INVISIBLE};
use crate::tensor::Tensor;

const BACKGROUND: f64 = 0.2;
const VERTEBRA: f64 = 0.45;
const DISC: f64 = 0.95;
/// Probability that a sample loses one random disc.
const DROP_PROBABILITY: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Range of the quadratic coefficient of the spine's column offset, in
    /// 1/pixel.
    pub curvature: (f64, f64),
    /// Range of the row distance between consecutive disc centres.
    pub disc_gap_px: (f64, f64),
    pub noise_std: f64,
    pub distractor_count: usize,
    pub spacing_mm: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 16,
            height: 256,
            width: 256,
            curvature: (-0.0015, 0.0015),
            disc_gap_px: (16.0, 20.0),
            noise_std: 0.03,
            distractor_count: 0,
            spacing_mm: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// 64x64 images matching [`crate::ModelConfig::tiny`].
    pub fn tiny() -> Self {
        Self {
            height: 64,
            width: 64,
            curvature: (-0.006, 0.006),
            disc_gap_px: (4.0, 5.0),
            noise_std: 0.02,
            spacing_mm: 4.0,
            ..Self::default()
        }
    }

    fn margin(&self) -> f64 {
        (0.5 * self.disc_gap_px.1).max(2.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(HcaError::Config("synthetic count must be at least 1".into()));
        }
        let (g0, g1) = self.disc_gap_px;
        let (c0, c1) = self.curvature;
        if !(g0 > 0.0 && g0 <= g1) || !(c0 <= c1) {
            return Err(HcaError::Config(
                "synthetic ranges must be nonempty with positive gaps".into(),
            ));
        }
        if !(self.noise_std >= 0.0) || !(self.spacing_mm > 0.0) {
            return Err(HcaError::Config(
                "noise_std must be >= 0 and spacing_mm > 0".into(),
            ));
        }
        let span = (NUM_DISCS - 1) as f64 * g1 + 2.0 * self.margin();
        if span > (self.height - 1) as f64 {
            return Err(HcaError::Config(format!(
                "{} discs with gaps up to {g1} px do not fit in height {}",
                NUM_DISCS, self.height
            )));
        }
        if self.width < 16 {
            return Err(HcaError::Config("synthetic width must be at least 16".into()));
        }
        Ok(())
    }
}

/// Generates `config.count` samples. Sample `i` draws from its own ChaCha
/// stream, so the output depends only on `(seed, i)`.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Vec<SpineSample>> {
    config.validate()?;
    Ok((0..config.count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            render(config, &mut rng, i)
        })
        .collect())
}

/// Anisotropic Gaussian bump; separable, so its maximum over the grid is at
/// the nearest pixel to `(r, c)`.
struct Blob {
    r: f64,
    c: f64,
    sr: f64,
    sc: f64,
    amp: f64,
}

impl Blob {
    fn paint(&self, img: &mut [f64], h: usize, w: usize) {
        let reach_r = (4.0 * self.sr).ceil() as isize;
        let reach_c = (4.0 * self.sc).ceil() as isize;
        let (cr, cc) = (self.r.round() as isize, self.c.round() as isize);
        for y in (cr - reach_r).max(0)..=(cr + reach_r).min(h as isize - 1) {
            let dy = (y as f64 - self.r) / self.sr;
            for x in (cc - reach_c).max(0)..=(cc + reach_c).min(w as isize - 1) {
                let dx = (x as f64 - self.c) / self.sc;
                let v = self.amp * (-0.5 * (dy * dy + dx * dx)).exp();
                let p = &mut img[y as usize * w + x as usize];
                *p = p.max(v);
            }
        }
    }
}

fn render(cfg: &SynthConfig, rng: &mut ChaCha8Rng, index: usize) -> SpineSample {
    let (h, w) = (cfg.height, cfg.width);
    let margin = cfg.margin();

    let gaps: Vec<f64> = (0..NUM_DISCS - 1)
        .map(|_| sample_range(rng, cfg.disc_gap_px))
        .collect();
    let span: f64 = gaps.iter().sum();
    let top = sample_range(rng, (margin, (h - 1) as f64 - margin - span));
    let mid_row = top + span / 2.0;
    let base_col = sample_range(rng, (0.4 * w as f64, 0.6 * w as f64));
    let slope = sample_range(rng, (-0.15, 0.15));
    let bend = sample_range(rng, cfg.curvature);
    let col_lo = margin;
    let col_hi = (w - 1) as f64 - margin;
    let spine_col = |r: f64| {
        let d = r - mid_row;
        (base_col + slope * d + bend * d * d).clamp(col_lo, col_hi)
    };

    let mut rows = Vec::with_capacity(NUM_DISCS);
    let mut r = top;
    for k in 0..NUM_DISCS {
        rows.push(r);
        if k < gaps.len() {
            r += gaps[k];
        }
    }
    let centres: Vec<[f64; 2]> = rows.iter().map(|&r| [r, spine_col(r)]).collect();

    let dropped = (rng.random::<f64>() < DROP_PROBABILITY).then(|| rng.random_range(0..NUM_DISCS));

    let mut img = vec![BACKGROUND; h * w];

    // vertebral bodies between (and just outside) consecutive discs
    let mean_gap = span / gaps.len() as f64;
    let mut body_rows: Vec<(f64, f64)> = Vec::new();
    body_rows.push((rows[0] - 0.5 * mean_gap, mean_gap));
    for k in 0..gaps.len() {
        body_rows.push((rows[k] + 0.5 * gaps[k], gaps[k]));
    }
    body_rows.push((rows[NUM_DISCS - 1] + 0.5 * mean_gap, mean_gap));
    for (br, gap) in body_rows {
        paint_body(&mut img, h, w, br, spine_col(br), 0.3 * gap, 0.9 * gap);
    }

    for (k, c) in centres.iter().enumerate() {
        if Some(k) == dropped {
            continue;
        }
        let gap = if k < gaps.len() { gaps[k] } else { gaps[k - 1] };
        Blob {
            r: c[0],
            c: c[1],
            sr: 0.18 * gap,
            sc: 0.45 * gap,
            amp: DISC,
        }
        .paint(&mut img, h, w);
    }

    let min_dist = 1.5 * cfg.disc_gap_px.1;
    for _ in 0..cfg.distractor_count {
        for _attempt in 0..200 {
            let r = rng.random_range(margin..(h - 1) as f64 - margin);
            let c = rng.random_range(margin..(w - 1) as f64 - margin);
            if (c - spine_col(r)).abs() < min_dist {
                continue;
            }
            let size = 0.3 * cfg.disc_gap_px.1;
            Blob {
                r,
                c,
                sr: size,
                sc: size,
                amp: rng.random_range(0.8..1.0),
            }
            .paint(&mut img, h, w);
            break;
        }
    }

    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).expect("finite std");
        for p in img.iter_mut() {
            *p += normal.sample(rng);
        }
    }
    for p in img.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }

    let mut coords = centres;
    let mut visible = vec![true; NUM_DISCS];
    if let Some(k) = dropped {
        coords[k] = INVISIBLE;
        visible[k] = false;
    }
    SpineSample {
        image: Tensor::from_vec(&[h, w], img).expect("shape"),
        keypoints: KeypointSet::new(coords, visible, cfg.spacing_mm).expect("valid"),
        subject_id: format!("synth-{}-{index:04}", cfg.seed),
        modality: Modality::Synthetic,
    }
}

/// Flat-topped elliptical plateau at `VERTEBRA` with a one-pixel ramp.
fn paint_body(img: &mut [f64], h: usize, w: usize, r: f64, c: f64, half_h: f64, half_w: f64) {
    let y0 = (r - half_h - 1.0).floor().max(0.0) as usize;
    let y1 = ((r + half_h + 1.0).ceil() as usize).min(h - 1);
    let x0 = (c - half_w - 1.0).floor().max(0.0) as usize;
    let x1 = ((c + half_w + 1.0).ceil() as usize).min(w - 1);
    if r + half_h + 1.0 < 0.0 {
        return;
    }
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dy = (y as f64 - r) / half_h;
            let dx = (x as f64 - c) / half_w;
            let q = (dy * dy + dx * dx).sqrt();
            let v = VERTEBRA * (1.0 - (q - 1.0).max(0.0) * half_h.min(half_w)).clamp(0.0, 1.0);
            let p = &mut img[y * w + x];
            *p = p.max(v);
        }
    }
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}
