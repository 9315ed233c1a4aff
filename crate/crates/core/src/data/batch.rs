//! Resizing to the network input and assembly of training batches.

use super::SpineSample;
use crate::error::{HcaError, Result};
use crate::heatmap::{encode_heatmaps, KeypointSet, INVISIBLE};
use crate::network::{ModelConfig, DOWNSAMPLE};
use crate::tensor::Tensor;

/// Affine map `p_out = p_in * scale + offset` from source to resized pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResizeTransform {
    pub scale: f64,
    pub offset: [f64; 2],
}

impl ResizeTransform {
    /// Aspect-preserving fit of `src` into `dst`, centred with integer padding.
    pub fn fit(src: (usize, usize), dst: (usize, usize)) -> Self {
        let scale = (dst.0 as f64 / src.0 as f64).min(dst.1 as f64 / src.1 as f64);
        let pad = |d: usize, s: usize| ((d as f64 - s as f64 * scale) / 2.0).max(0.0).floor();
        Self {
            scale,
            offset: [pad(dst.0, src.0), pad(dst.1, src.1)],
        }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0] * self.scale + self.offset[0], p[1] * self.scale + self.offset[1]]
    }

    pub fn invert(&self, p: [f64; 2]) -> [f64; 2] {
        [
            (p[0] - self.offset[0]) / self.scale,
            (p[1] - self.offset[1]) / self.scale,
        ]
    }
}

/// Bilinear resize of an `h x w` image into `height x width` with zero
/// padding outside the mapped source.
pub fn resize_to(image: &Tensor, height: usize, width: usize) -> Result<(Tensor, ResizeTransform)> {
    let shape = image.shape();
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 || height == 0 || width == 0 {
        return Err(HcaError::InputDomain(format!(
            "cannot resize {shape:?} to {height}x{width}"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    let t = ResizeTransform::fit((h, w), (height, width));
    if h == height && w == width {
        return Ok((image.clone(), t));
    }
    let src = image.data();
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        let sy = (y as f64 - t.offset[0]) / t.scale;
        if !(-0.5..h as f64 - 0.5).contains(&sy) {
            continue;
        }
        let sy = sy.clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for x in 0..width {
            let sx = (x as f64 - t.offset[1]) / t.scale;
            if !(-0.5..w as f64 - 0.5).contains(&sx) {
                continue;
            }
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[y * width + x] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0);
        }
    }
    Ok((Tensor::from_vec(&[height, width], out)?, t))
}

/// Aligned network inputs and targets for `B` samples with `V` discs.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, 1, H, W]`
    pub images: Tensor,
    /// `[B, V, H/4, W/4]`
    pub targets: Tensor,
    /// `[B, V, 2]` ground truth in heatmap pixels; invisible slots are 0.
    pub gt_heatmap: Tensor,
    /// Ground truth in resized-image pixels with adjusted spacing.
    pub keypoints: Vec<KeypointSet>,
    /// `B * V` flags, sample-major.
    pub visible: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(HcaError::InputDomain("cannot build an empty batch".into()));
        }
        let v = self.gt_heatmap.shape()[1];
        let pick = |t: &Tensor| Tensor::stack(&indices.iter().map(|&i| t.batch_item(i)).collect::<Vec<_>>());
        Ok(Batch {
            images: pick(&self.images)?,
            targets: pick(&self.targets)?,
            gt_heatmap: pick(&self.gt_heatmap)?,
            keypoints: indices.iter().map(|&i| self.keypoints[i].clone()).collect(),
            visible: indices
                .iter()
                .flat_map(|&i| self.visible[i * v..(i + 1) * v].iter().copied())
                .collect(),
        })
    }
}

/// Resizes every sample to the model input and encodes heatmap targets.
pub fn prepare_batch(samples: &[&SpineSample], model: &ModelConfig, sigma: f64) -> Result<Batch> {
    if samples.is_empty() {
        return Err(HcaError::InputDomain("cannot build an empty batch".into()));
    }
    let (ih, iw) = model.input_size;
    let (hh, hw) = model.heatmap_size();
    let v = model.num_discs;
    let mut images = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    let mut gt = Vec::with_capacity(samples.len() * v * 2);
    let mut keypoints = Vec::with_capacity(samples.len());
    let mut visible = Vec::with_capacity(samples.len() * v);
    for s in samples {
        if s.keypoints.len() != v {
            return Err(HcaError::InputDomain(format!(
                "sample {} has {} discs, model expects {v}",
                s.subject_id,
                s.keypoints.len()
            )));
        }
        let (img, t) = resize_to(&s.image, ih, iw)?;
        let kp = s.keypoints.transformed(t.scale, t.offset);
        let coarse = heatmap_keypoints(&kp, hh, hw);
        let target = encode_heatmaps(&coarse, hh, hw, sigma)?;
        for (c, &vis) in coarse.coords.iter().zip(&coarse.visible) {
            gt.extend_from_slice(if vis { c } else { &[0.0, 0.0] });
            visible.push(vis);
        }
        images.push(img.reshape(&[1, ih, iw])?);
        targets.push(target.values);
        keypoints.push(kp);
    }
    let n = samples.len();
    Ok(Batch {
        images: Tensor::stack(&images)?,
        targets: Tensor::stack(&targets)?,
        gt_heatmap: Tensor::from_vec(&[n, v, 2], gt)?,
        keypoints,
        visible,
    })
}

/// Image-pixel keypoints divided by the network stride, clamped in bounds.
pub fn heatmap_keypoints(kp: &KeypointSet, height: usize, width: usize) -> KeypointSet {
    let f = DOWNSAMPLE as f64;
    let coords = kp
        .coords
        .iter()
        .zip(&kp.visible)
        .map(|(c, &v)| {
            if v {
                [
                    (c[0] / f).clamp(0.0, (height - 1) as f64),
                    (c[1] / f).clamp(0.0, (width - 1) as f64),
                ]
            } else {
                INVISIBLE
            }
        })
        .collect();
    KeypointSet {
        coords,
        visible: kp.visible.clone(),
        spacing_mm: kp.spacing_mm * f,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Modality, SynthConfig};
    use crate::heatmap::{decode_peaks, HeatmapRole, HeatmapStack};

    fn sample(h: usize, w: usize, coords: Vec<[f64; 2]>) -> SpineSample {
        let n = coords.len();
        let data = (0..h * w).map(|i| (i % 7) as f64 / 7.0).collect();
        SpineSample {
            image: Tensor::from_vec(&[h, w], data).unwrap(),
            keypoints: KeypointSet::new(coords, vec![true; n], 0.5).unwrap(),
            subject_id: "s".into(),
            modality: Modality::Synthetic,
        }
    }

    fn model(h: usize, w: usize, v: usize) -> ModelConfig {
        ModelConfig {
            input_size: (h, w),
            num_discs: v,
            ..ModelConfig::tiny()
        }
    }

    #[test]
    fn identity_resize_keeps_everything() {
        let s = sample(64, 64, vec![[10.0, 20.5], [33.0, 40.0]]);
        let b = prepare_batch(&[&s], &model(64, 64, 2), 2.0).unwrap();
        assert_eq!(b.keypoints[0], s.keypoints);
        assert_eq!(b.images.data(), s.image.data());
        assert_eq!(b.images.shape(), &[1, 1, 64, 64]);
        assert_eq!(b.targets.shape(), &[1, 2, 16, 16]);
        assert_eq!(b.gt_heatmap.data(), &[2.5, 5.125, 8.25, 10.0]);
    }

    #[test]
    fn doubling_doubles_keypoints() {
        let s = sample(128, 128, vec![[10.0, 20.5], [127.0, 0.0]]);
        let (_, t) = resize_to(&s.image, 256, 256).unwrap();
        assert_eq!(t, ResizeTransform { scale: 2.0, offset: [0.0, 0.0] });
        let b = prepare_batch(&[&s], &model(256, 256, 2), 2.0).unwrap();
        assert_eq!(b.keypoints[0].coords, vec![[20.0, 41.0], [254.0, 0.0]]);
        assert_eq!(b.keypoints[0].spacing_mm, 0.25);
    }

    #[test]
    fn non_square_input_is_padded_and_centred() {
        let s = sample(32, 16, vec![[0.0, 0.0]]);
        let (img, t) = resize_to(&s.image, 64, 64).unwrap();
        assert_eq!(t, ResizeTransform { scale: 2.0, offset: [0.0, 16.0] });
        let d = img.data();
        assert_eq!(d[10 * 64 + 5], 0.0);
        assert_eq!(d[10 * 64 + 60], 0.0);
        // source pixel (0,0) lands on (0,16)
        assert_eq!(d[16], s.image.data()[0]);
        assert_eq!(t.invert(t.apply([3.0, 4.0])), [3.0, 4.0]);
    }

    #[test]
    fn empty_batch_is_rejected() {
        assert!(matches!(
            prepare_batch(&[], &ModelConfig::tiny(), 2.0),
            Err(HcaError::InputDomain(_))
        ));
    }

    #[test]
    fn decoded_targets_recover_transformed_keypoints() {
        let cfg = SynthConfig {
            count: 12,
            height: 96,
            width: 80,
            disc_gap_px: (6.0, 7.5),
            seed: 3,
            ..SynthConfig::tiny()
        };
        let samples = generate_synthetic(&cfg).unwrap();
        let refs: Vec<&SpineSample> = samples.iter().collect();
        let m = model(64, 64, 11);
        let b = prepare_batch(&refs, &m, 2.0).unwrap();
        for i in 0..b.len() {
            let stack = HeatmapStack::new(b.targets.batch_item(i), HeatmapRole::Prediction).unwrap();
            let dec = decode_peaks(&stack, 0.5).unwrap();
            let expected = heatmap_keypoints(&b.keypoints[i], 16, 16);
            assert_eq!(dec.visible, expected.visible);
            for (p, q) in dec.coords.iter().zip(&expected.coords) {
                if q[0] >= 0.0 {
                    assert!((p[0] - q[0]).abs() <= 0.5 && (p[1] - q[1]).abs() <= 0.5);
                }
            }
            b.keypoints[i].check_bounds(64, 64).unwrap();
            assert!(b.images.batch_item(i).data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
