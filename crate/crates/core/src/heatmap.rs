//! Keypoint <-> heatmap conversion: Gaussian target encoding, per-channel
//! spatial softmax, and peak decoding.

use serde::{Deserialize, Serialize};

use crate::error::{HcaError, Result};
use crate::tensor::Tensor;

/// Default Gaussian width of target heatmaps, in heatmap pixels.
pub const DEFAULT_SIGMA: f64 = 2.0;

/// Coordinate written for discs that are not visible.
pub const INVISIBLE: [f64; 2] = [-1.0, -1.0];

/// Per-disc `(row, col)` pixel positions with visibility flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub coords: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
    pub spacing_mm: f64,
}

impl KeypointSet {
    pub fn new(coords: Vec<[f64; 2]>, visible: Vec<bool>, spacing_mm: f64) -> Result<Self> {
        if coords.len() != visible.len() {
            return Err(HcaError::InputDomain(format!(
                "{} coordinates but {} visibility flags",
                coords.len(),
                visible.len()
            )));
        }
        if !(spacing_mm > 0.0) {
            return Err(HcaError::InputDomain(format!(
                "spacing must be positive, got {spacing_mm}"
            )));
        }
        Ok(Self {
            coords,
            visible,
            spacing_mm,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Checks that every visible coordinate lies in `[0, h-1] x [0, w-1]`.
    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        for (i, (c, &v)) in self.coords.iter().zip(&self.visible).enumerate() {
            if !v {
                continue;
            }
            let ok = c[0].is_finite()
                && c[1].is_finite()
                && c[0] >= 0.0
                && c[1] >= 0.0
                && c[0] <= (height - 1) as f64
                && c[1] <= (width - 1) as f64;
            if !ok {
                return Err(HcaError::InputDomain(format!(
                    "disc {i} at ({}, {}) lies outside {height}x{width}",
                    c[0], c[1]
                )));
            }
        }
        Ok(())
    }

    /// Applies `p -> p * scale + offset` to visible coordinates and divides
    /// the spacing by `scale`.
    pub fn transformed(&self, scale: f64, offset: [f64; 2]) -> KeypointSet {
        let coords = self
            .coords
            .iter()
            .zip(&self.visible)
            .map(|(c, &v)| {
                if v {
                    [c[0] * scale + offset[0], c[1] * scale + offset[1]]
                } else {
                    INVISIBLE
                }
            })
            .collect();
        KeypointSet {
            coords,
            visible: self.visible.clone(),
            spacing_mm: self.spacing_mm / scale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeatmapRole {
    Target,
    Prediction,
}

/// A `V x H x W` stack of per-disc maps.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub values: Tensor,
    pub role: HeatmapRole,
}

impl HeatmapStack {
    pub fn new(values: Tensor, role: HeatmapRole) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(HcaError::Shape(format!(
                "heatmap stack must be rank 3, got {:?}",
                values.shape()
            )));
        }
        Ok(Self { values, role })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        let plane = self.height() * self.width();
        &self.values.data()[i * plane..(i + 1) * plane]
    }
}

/// Per-channel positional distribution; each channel sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub values: Tensor,
}

impl ProbabilityMap {
    /// Wraps a `V x H x W` tensor after checking it is a valid distribution
    /// per channel (nonnegative, sums to 1 within `1e-6`).
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(HcaError::Shape(format!(
                "probability map must be rank 3, got {:?}",
                values.shape()
            )));
        }
        let plane = values.shape()[1] * values.shape()[2];
        for (i, ch) in values.data().chunks(plane).enumerate() {
            let s: f64 = ch.iter().sum();
            if ch.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-6 {
                return Err(HcaError::InputDomain(format!(
                    "channel {i} is not a probability distribution (sum {s})"
                )));
            }
        }
        Ok(Self { values })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        let plane = self.height() * self.width();
        &self.values.data()[i * plane..(i + 1) * plane]
    }
}

/// Integer pixel a sub-pixel coordinate snaps to (half-way rounds up).
pub fn nearest_pixel(c: [f64; 2]) -> [usize; 2] {
    [(c[0] + 0.5).floor() as usize, (c[1] + 0.5).floor() as usize]
}

/// Renders one unit-peak Gaussian per visible keypoint, centred on the
/// keypoint's nearest pixel. Invisible channels stay zero.
pub fn encode_heatmaps(
    keypoints: &KeypointSet,
    height: usize,
    width: usize,
    sigma: f64,
) -> Result<HeatmapStack> {
    if !(sigma > 0.0) {
        return Err(HcaError::Config(format!("sigma must be positive, got {sigma}")));
    }
    if height == 0 || width == 0 {
        return Err(HcaError::Config(format!(
            "heatmap size must be positive, got {height}x{width}"
        )));
    }
    keypoints.check_bounds(height, width)?;
    let v = keypoints.len();
    let mut values = Tensor::zeros(&[v, height, width]);
    let plane = height * width;
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (i, dst) in values.data_mut().chunks_mut(plane).enumerate() {
        if !keypoints.visible[i] {
            continue;
        }
        let [cr, cc] = nearest_pixel(keypoints.coords[i]);
        // separable: exp(-(dr^2 + dc^2) k) = exp(-dr^2 k) * exp(-dc^2 k)
        let col_terms: Vec<f64> = (0..width)
            .map(|x| {
                let d = x as f64 - cc as f64;
                (-d * d * inv).exp()
            })
            .collect();
        for y in 0..height {
            let d = y as f64 - cr as f64;
            let row_term = (-d * d * inv).exp();
            for (x, ct) in col_terms.iter().enumerate() {
                dst[y * width + x] = row_term * ct;
            }
        }
    }
    HeatmapStack::new(values, HeatmapRole::Target)
}

/// Max-stabilised per-channel softmax over all pixels.
pub fn softmax_probability(prediction: &HeatmapStack) -> Result<ProbabilityMap> {
    if !prediction.values.all_finite() {
        return Err(HcaError::NumericInput(
            "prediction contains NaN or infinite values".into(),
        ));
    }
    let plane = prediction.height() * prediction.width();
    let mut values = prediction.values.clone();
    for ch in values.data_mut().chunks_mut(plane) {
        let m = ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for p in ch.iter_mut() {
            *p = (*p - m).exp();
            z += *p;
        }
        for p in ch.iter_mut() {
            *p /= z;
        }
    }
    Ok(ProbabilityMap { values })
}

/// Location and value of a channel's global maximum. Ties go to the
/// smallest row, then the smallest column.
pub fn channel_peak(channel: &[f64], width: usize) -> (usize, usize, f64) {
    let mut best = 0usize;
    for (i, &v) in channel.iter().enumerate() {
        if v > channel[best] {
            best = i;
        }
    }
    (best / width, best % width, channel[best])
}

/// Marks a disc visible at its channel argmax when the peak reaches
/// `threshold`; otherwise invisible at `(-1, -1)`. Spacing is set to 1.
pub fn decode_peaks(prediction: &HeatmapStack, threshold: f64) -> Result<KeypointSet> {
    Ok(decode_with_confidence(prediction, threshold)?.0)
}

/// [`decode_peaks`] that also returns each channel's peak value.
pub fn decode_with_confidence(
    prediction: &HeatmapStack,
    threshold: f64,
) -> Result<(KeypointSet, Vec<f64>)> {
    if !(threshold >= 0.0) {
        return Err(HcaError::InputDomain(format!(
            "threshold must be nonnegative, got {threshold}"
        )));
    }
    let w = prediction.width();
    let mut coords = Vec::with_capacity(prediction.channels());
    let mut visible = Vec::with_capacity(prediction.channels());
    let mut peaks = Vec::with_capacity(prediction.channels());
    for i in 0..prediction.channels() {
        let (r, c, v) = channel_peak(prediction.channel(i), w);
        peaks.push(v);
        if v >= threshold {
            coords.push([r as f64, c as f64]);
            visible.push(true);
        } else {
            coords.push(INVISIBLE);
            visible.push(false);
        }
    }
    Ok((
        KeypointSet {
            coords,
            visible,
            spacing_mm: 1.0,
        },
        peaks,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(c: [f64; 2]) -> KeypointSet {
        KeypointSet::new(vec![c], vec![true], 1.0).unwrap()
    }

    #[test]
    fn unit_peak_and_closed_form_neighbour() {
        let hm = encode_heatmaps(&single([4.0, 4.0]), 9, 9, 2.0).unwrap();
        let ch = hm.channel(0);
        assert_eq!(ch[4 * 9 + 4], 1.0);
        // exp(-d^2 / (2 sigma^2)) with d = 1, sigma = 2
        assert!((ch[4 * 9 + 5] - (-0.125f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn invisible_channel_is_zero_and_others_unaffected() {
        let both = KeypointSet::new(vec![[3.0, 3.0], [5.0, 1.0]], vec![true, false], 1.0).unwrap();
        let hm = encode_heatmaps(&both, 8, 8, 2.0).unwrap();
        assert!(hm.channel(1).iter().all(|&v| v == 0.0));
        let alone = encode_heatmaps(&single([3.0, 3.0]), 8, 8, 2.0).unwrap();
        assert_eq!(hm.channel(0), alone.channel(0));
    }

    #[test]
    fn subpixel_grid_matches_double_loop_oracle() {
        // the peak snaps to the nearest pixel; (2.5, 2.5) rounds half-up to (3, 3)
        let hm = encode_heatmaps(&single([2.5, 2.5]), 8, 8, 1.5).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let d2 = ((r as f64) - 3.0).powi(2) + ((c as f64) - 3.0).powi(2);
                let expected = (-d2 / (2.0 * 1.5 * 1.5)).exp();
                assert!((hm.channel(0)[r * 8 + c] - expected).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_sigma_and_out_of_bounds() {
        assert!(matches!(
            encode_heatmaps(&single([1.0, 1.0]), 4, 4, 0.0),
            Err(HcaError::Config(_))
        ));
        assert!(matches!(
            encode_heatmaps(&single([4.0, 1.0]), 4, 4, 1.0),
            Err(HcaError::InputDomain(_))
        ));
        assert!(matches!(
            encode_heatmaps(&single([-0.1, 1.0]), 4, 4, 1.0),
            Err(HcaError::InputDomain(_))
        ));
    }

    #[test]
    fn softmax_uniform_and_dominant_cases() {
        let flat = HeatmapStack::new(Tensor::full(&[1, 8, 8], 3.7), HeatmapRole::Prediction)
            .unwrap();
        let p = softmax_probability(&flat).unwrap();
        assert!(p.channel(0).iter().all(|&v| (v - 1.0 / 64.0).abs() < 1e-15));

        let mut t = Tensor::zeros(&[1, 8, 8]);
        t.data_mut()[10] = 20.0;
        let p = softmax_probability(&HeatmapStack::new(t, HeatmapRole::Prediction).unwrap())
            .unwrap();
        // e^20 / (e^20 + 63)
        let direct = 20f64.exp() / (20f64.exp() + 63.0);
        assert!((p.channel(0)[10] - direct).abs() < 1e-12);
        assert!(p.channel(0)[10] > 0.999);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut t = Tensor::zeros(&[1, 2, 2]);
        t.data_mut()[3] = f64::NAN;
        let hm = HeatmapStack::new(t, HeatmapRole::Prediction).unwrap();
        assert!(matches!(softmax_probability(&hm), Err(HcaError::NumericInput(_))));
    }

    #[test]
    fn decode_threshold_and_tie_break() {
        let zero = HeatmapStack::new(Tensor::zeros(&[1, 4, 4]), HeatmapRole::Prediction).unwrap();
        let k = decode_peaks(&zero, 0.25).unwrap();
        assert!(!k.visible[0]);
        assert_eq!(k.coords[0], INVISIBLE);

        let mut t = Tensor::zeros(&[1, 8, 8]);
        t.data_mut()[3 * 8 + 7] = 0.9;
        t.data_mut()[5 * 8 + 2] = 0.9;
        let k = decode_peaks(&HeatmapStack::new(t, HeatmapRole::Prediction).unwrap(), 0.1).unwrap();
        assert_eq!(k.coords[0], [3.0, 7.0]);
    }

    #[test]
    fn decode_recovers_subpixel_truth_within_half_pixel() {
        let kp = KeypointSet::new(
            vec![[2.3, 7.6], [10.49, 0.2], [0.0, 0.0]],
            vec![true, true, false],
            0.8,
        )
        .unwrap();
        let back = decode_peaks(&encode_heatmaps(&kp, 12, 12, 2.0).unwrap(), 0.5).unwrap();
        assert_eq!(back.visible, kp.visible);
        for i in 0..2 {
            assert!((back.coords[i][0] - kp.coords[i][0]).abs() <= 0.5);
            assert!((back.coords[i][1] - kp.coords[i][1]).abs() <= 0.5);
        }
    }

    fn integer_keypoints() -> impl Strategy<Value = (KeypointSet, usize, usize)> {
        (4usize..24, 4usize..24, 1usize..12).prop_flat_map(|(h, w, v)| {
            (
                proptest::collection::vec((0..h, 0..w, any::<bool>()), v),
                Just(h),
                Just(w),
            )
                .prop_map(|(pts, h, w)| {
                    let coords = pts.iter().map(|&(r, c, _)| [r as f64, c as f64]).collect();
                    let visible = pts.iter().map(|&(_, _, v)| v).collect();
                    (KeypointSet::new(coords, visible, 1.0).unwrap(), h, w)
                })
        })
    }

    proptest! {
        #[test]
        fn integer_roundtrip_is_exact((kp, h, w) in integer_keypoints(), tau in 0.01f64..0.99) {
            let hm = encode_heatmaps(&kp, h, w, 2.0).unwrap();
            prop_assert!(hm.values.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let back = decode_peaks(&hm, tau).unwrap();
            prop_assert_eq!(&back.visible, &kp.visible);
            for i in 0..kp.len() {
                if kp.visible[i] {
                    prop_assert_eq!(back.coords[i], kp.coords[i]);
                }
            }
        }

        #[test]
        fn softmax_is_shift_invariant(
            vals in proptest::collection::vec(-30.0f64..30.0, 2 * 5 * 3),
            shift in (-50.0f64..50.0, -50.0f64..50.0),
        ) {
            let t = Tensor::from_vec(&[2, 5, 3], vals.clone()).unwrap();
            let mut shifted = t.clone();
            for (i, v) in shifted.data_mut().iter_mut().enumerate() {
                *v += if i < 15 { shift.0 } else { shift.1 };
            }
            let a = softmax_probability(&HeatmapStack::new(t, HeatmapRole::Prediction).unwrap()).unwrap();
            let b = softmax_probability(&HeatmapStack::new(shifted, HeatmapRole::Prediction).unwrap()).unwrap();
            for (x, y) in a.values.data().iter().zip(b.values.data()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
            for i in 0..2 {
                prop_assert!((a.channel(i).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }
    }
}
