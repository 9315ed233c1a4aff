//! Heatmap regression loss, prototype extraction and the skeleton loss.
//!
//! Every loss exists twice: as a tape builder (`build_*`) used for training
//! and gradient checks, and as a plain function on single-sample types that
//! runs the same builder on a throwaway tape.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{weighted::WeightedIndex, Distribution};
use serde::{Deserialize, Serialize};

use crate::autograd::{Decay, Tape, Var};
use crate::error::{HcaError, Result};
use crate::heatmap::{HeatmapStack, KeypointSet, ProbabilityMap};
use crate::network::NetworkOutput;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeMode {
    /// Soft-argmax: the mean of the positional distribution.
    Expectation,
    /// Average of `samples` multinomial pixel draws.
    Stochastic,
}

impl std::str::FromStr for PrototypeMode {
    type Err = HcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expectation" => Ok(Self::Expectation),
            "stochastic" => Ok(Self::Stochastic),
            other => Err(HcaError::Config(format!(
                "unknown prototype mode {other:?} (expected expectation|stochastic)"
            ))),
        }
    }
}

impl std::fmt::Display for PrototypeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Expectation => "expectation",
            Self::Stochastic => "stochastic",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_sk: f64,
    pub beta: f64,
    pub alpha: f64,
    pub samples: usize,
    pub prototype_mode: PrototypeMode,
    /// Train the pair-weight decay as a scalar parameter clamped to
    /// `[ALPHA_FLOOR, 1]`, starting from `alpha`.
    pub learnable_alpha: bool,
}

/// Lower clamp for a learnable decay.
pub const ALPHA_FLOOR: f64 = 1e-3;

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_sk: 2e-4,
            beta: 0.75,
            alpha: 0.8,
            samples: 10,
            prototype_mode: PrototypeMode::Expectation,
            learnable_alpha: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_sk >= 0.0) || !self.lambda_sk.is_finite() {
            return Err(HcaError::Config(format!(
                "lambda_sk must be >= 0, got {}",
                self.lambda_sk
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(HcaError::Config(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(HcaError::Config(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if self.samples == 0 {
            return Err(HcaError::Config("samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-disc prototype locations in heatmap pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub coords: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl Prototype {
    /// Reference prototype from ground-truth keypoints; invisible discs are
    /// invalid.
    pub fn from_keypoints(k: &KeypointSet) -> Self {
        Self {
            coords: k.coords.clone(),
            valid: k.visible.clone(),
        }
    }

    fn to_tensor(&self) -> Tensor {
        let v = self.coords.len();
        Tensor::from_vec(&[1, v, 2], self.coords.iter().flatten().copied().collect())
            .expect("shape")
    }
}

/// Multinomial draws for each `(batch, channel)` plane of `probs`.
fn draw_pixels(probs: &Tensor, samples: usize, rng: &mut impl Rng) -> Result<Vec<Vec<(usize, u32)>>> {
    let (_, _, h, w) = probs.dims4();
    probs
        .data()
        .chunks(h * w)
        .map(|plane| {
            let dist = WeightedIndex::new(plane).map_err(|e| {
                HcaError::InputDomain(format!("cannot sample from probability plane: {e}"))
            })?;
            let mut counts = BTreeMap::new();
            for _ in 0..samples {
                *counts.entry(dist.sample(rng)).or_insert(0u32) += 1;
            }
            Ok(counts.into_iter().collect())
        })
        .collect()
}

/// Prototype coordinates (`[n, v, 2]`) from a probability node.
pub fn build_prototype(
    tape: &mut Tape,
    probs: Var,
    config: &LossConfig,
    rng: &mut impl Rng,
) -> Result<Var> {
    Ok(match config.prototype_mode {
        PrototypeMode::Expectation => tape.expectation(probs),
        PrototypeMode::Stochastic => {
            let draws = draw_pixels(tape.value(probs), config.samples, rng)?;
            tape.sampled_expectation(probs, draws, config.samples)
        }
    })
}

/// Skeleton loss over block outputs (`[n, v, h, w]` each).
///
/// `gt` holds `[n, v, 2]` reference coordinates in heatmap pixels and
/// `visible` the `n * v` flags masking discs out of both terms.
pub fn build_skeleton_loss(
    tape: &mut Tape,
    intermediates: &[Var],
    gt: &Tensor,
    visible: &[bool],
    config: &LossConfig,
    decay: Decay,
    rng: &mut impl Rng,
) -> Result<Var> {
    if intermediates.is_empty() {
        return Err(HcaError::InputDomain(
            "skeleton loss needs at least one block output".into(),
        ));
    }
    let mut total: Option<Var> = None;
    for &out in intermediates {
        let probs = tape.spatial_softmax(out);
        let proto = build_prototype(tape, probs, config, rng)?;
        let id = tape.point_distance(proto, gt.clone(), visible.to_vec());
        let pd = tape.pairwise_distance(proto, gt.clone(), visible.to_vec(), decay);
        let id = tape.scale(id, config.beta);
        let pd = tape.scale(pd, 1.0 - config.beta);
        let term = tape.add(id, pd);
        total = Some(match total {
            Some(t) => tape.add(t, term),
            None => term,
        });
    }
    Ok(total.expect("nonempty"))
}

/// Tape nodes of the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub mse: Var,
    pub skeleton: Option<Var>,
}

/// `mse(fused, target) + lambda * skeleton(intermediates)`. The skeleton
/// branch is omitted from the tape when `lambda == 0`.
#[allow(clippy::too_many_arguments)]
pub fn build_total_loss(
    tape: &mut Tape,
    fused: Var,
    intermediates: &[Var],
    target: &Tensor,
    gt: &Tensor,
    visible: &[bool],
    config: &LossConfig,
    decay: Decay,
    rng: &mut impl Rng,
) -> Result<LossVars> {
    if tape.value(fused).shape() != target.shape() {
        return Err(HcaError::InputDomain(format!(
            "prediction {:?} vs target {:?}",
            tape.value(fused).shape(),
            target.shape()
        )));
    }
    let mse = tape.masked_mse(fused, target.clone(), visible.to_vec());
    if config.lambda_sk == 0.0 {
        return Ok(LossVars {
            total: mse,
            mse,
            skeleton: None,
        });
    }
    let sk = build_skeleton_loss(tape, intermediates, gt, visible, config, decay, rng)?;
    let weighted = tape.scale(sk, config.lambda_sk);
    let total = tape.add(mse, weighted);
    Ok(LossVars {
        total,
        mse,
        skeleton: Some(sk),
    })
}

fn batch1(t: &Tensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.clone().reshape(&shape).expect("same size")
}

fn keypoint_tensor(k: &KeypointSet) -> Tensor {
    Prototype::from_keypoints(k).to_tensor()
}

/// Mean squared error normalised by `V * M`; channels with
/// `visible[i] == false` add nothing to the sum.
pub fn mse_loss(prediction: &HeatmapStack, target: &HeatmapStack, visible: &[bool]) -> Result<f64> {
    if prediction.values.shape() != target.values.shape() {
        return Err(HcaError::InputDomain(format!(
            "prediction {:?} vs target {:?}",
            prediction.values.shape(),
            target.values.shape()
        )));
    }
    if visible.len() != prediction.channels() {
        return Err(HcaError::InputDomain(format!(
            "{} visibility flags for {} channels",
            visible.len(),
            prediction.channels()
        )));
    }
    let mut tape = Tape::new();
    let p = tape.leaf(batch1(&prediction.values));
    let l = tape.masked_mse(p, batch1(&target.values), visible.to_vec());
    Ok(tape.value(l).item())
}

/// Prototype of each channel of `prob`. All discs are marked valid.
pub fn prototype_from_map(
    prob: &ProbabilityMap,
    config: &LossConfig,
    rng: &mut impl Rng,
) -> Result<Prototype> {
    // re-validate: the fields are public
    let prob = ProbabilityMap::new(prob.values.clone())?;
    let mut tape = Tape::new();
    let p = tape.leaf(batch1(&prob.values));
    let c = build_prototype(&mut tape, p, config, rng)?;
    let coords = tape
        .value(c)
        .data()
        .chunks(2)
        .map(|x| [x[0], x[1]])
        .collect::<Vec<_>>();
    let valid = vec![true; coords.len()];
    Ok(Prototype { coords, valid })
}

fn joint_valid(pred: &Prototype, gt: &Prototype) -> Result<Vec<bool>> {
    if pred.coords.len() != gt.coords.len()
        || pred.valid.len() != pred.coords.len()
        || gt.valid.len() != gt.coords.len()
    {
        return Err(HcaError::InputDomain(format!(
            "prototype sizes differ: {} vs {}",
            pred.coords.len(),
            gt.coords.len()
        )));
    }
    Ok(pred.valid.iter().zip(&gt.valid).map(|(a, b)| *a && *b).collect())
}

/// Decay-weighted squared discrepancy of all jointly valid pairwise
/// distances.
pub fn pairwise_distance_loss(pred: &Prototype, gt: &Prototype, alpha: f64) -> Result<f64> {
    let valid = joint_valid(pred, gt)?;
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(HcaError::InputDomain(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let mut tape = Tape::new();
    let c = tape.leaf(pred.to_tensor());
    let l = tape.pairwise_distance(c, gt.to_tensor(), valid, Decay::Fixed(alpha));
    Ok(tape.value(l).item())
}

/// Mean Euclidean distance between jointly valid prototype points.
pub fn identity_distance_loss(pred: &Prototype, gt: &Prototype) -> Result<f64> {
    let valid = joint_valid(pred, gt)?;
    let mut tape = Tape::new();
    let c = tape.leaf(pred.to_tensor());
    let l = tape.point_distance(c, gt.to_tensor(), valid);
    Ok(tape.value(l).item())
}

fn check_stack_against(k: &KeypointSet, stack: &HeatmapStack) -> Result<()> {
    if stack.channels() != k.len() {
        return Err(HcaError::InputDomain(format!(
            "{} channels vs {} keypoints",
            stack.channels(),
            k.len()
        )));
    }
    Ok(())
}

/// Skeleton loss of one sample. `gt_keypoints` must already be expressed in
/// heatmap pixels.
pub fn skeleton_loss(
    intermediates: &[HeatmapStack],
    gt_keypoints: &KeypointSet,
    config: &LossConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    config.validate()?;
    let mut tape = Tape::new();
    let mut vars = Vec::with_capacity(intermediates.len());
    for s in intermediates {
        check_stack_against(gt_keypoints, s)?;
        vars.push(tape.leaf(batch1(&s.values)));
    }
    let l = build_skeleton_loss(
        &mut tape,
        &vars,
        &keypoint_tensor(gt_keypoints),
        &gt_keypoints.visible,
        config,
        Decay::Fixed(config.alpha),
        rng,
    )?;
    Ok(tape.value(l).item())
}

/// Combined objective of one sample; `gt` in heatmap pixels.
pub fn total_loss(
    prediction: &NetworkOutput,
    target: &HeatmapStack,
    gt: &KeypointSet,
    config: &LossConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    config.validate()?;
    check_stack_against(gt, &prediction.fused)?;
    let mut tape = Tape::new();
    let fused = tape.leaf(batch1(&prediction.fused.values));
    let mut vars = Vec::with_capacity(prediction.intermediates.len());
    for s in &prediction.intermediates {
        check_stack_against(gt, s)?;
        vars.push(tape.leaf(batch1(&s.values)));
    }
    let l = build_total_loss(
        &mut tape,
        fused,
        &vars,
        &batch1(&target.values),
        &keypoint_tensor(gt),
        &gt.visible,
        config,
        Decay::Fixed(config.alpha),
        rng,
    )?;
    Ok(tape.value(l.total).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::{softmax_probability, HeatmapRole};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn stack(shape: &[usize], seed: u64) -> HeatmapStack {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        HeatmapStack::new(
            Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap(),
            HeatmapRole::Prediction,
        )
        .unwrap()
    }

    fn proto(points: &[[f64; 2]]) -> Prototype {
        Prototype {
            coords: points.to_vec(),
            valid: vec![true; points.len()],
        }
    }

    #[test]
    fn mse_basic_cases() {
        let t = stack(&[2, 4, 4], 1);
        assert_eq!(mse_loss(&t, &t, &[true, true]).unwrap(), 0.0);
        let mut shifted = t.clone();
        shifted.values.data_mut().iter_mut().for_each(|v| *v += 1.0);
        assert!((mse_loss(&shifted, &t, &[true, true]).unwrap() - 1.0).abs() < 1e-15);
        // masking keeps the V*M normaliser
        assert!((mse_loss(&shifted, &t, &[true, false]).unwrap() - 0.5).abs() < 1e-15);
        let other = stack(&[2, 4, 5], 2);
        assert!(matches!(
            mse_loss(&t, &other, &[true, true]),
            Err(HcaError::InputDomain(_))
        ));
    }

    #[test]
    fn mse_matches_double_loop() {
        let (p, t) = (stack(&[2, 4, 4], 3), stack(&[2, 4, 4], 4));
        let mut s = 0.0;
        for i in 0..2 {
            for px in 0..16 {
                s += (t.channel(i)[px] - p.channel(i)[px]).powi(2);
            }
        }
        assert!((mse_loss(&p, &t, &[true, true]).unwrap() - s / 32.0).abs() < 1e-12);
    }

    fn prob(values: Tensor) -> ProbabilityMap {
        ProbabilityMap::new(values).unwrap()
    }

    #[test]
    fn degenerate_and_uniform_prototypes() {
        let mut delta = Tensor::zeros(&[1, 8, 8]);
        delta.data_mut()[3 * 8 + 5] = 1.0;
        let p = prob(delta);
        for mode in [PrototypeMode::Expectation, PrototypeMode::Stochastic] {
            let cfg = LossConfig {
                prototype_mode: mode,
                ..LossConfig::default()
            };
            assert_eq!(prototype_from_map(&p, &cfg, &mut rng()).unwrap().coords[0], [3.0, 5.0]);
        }
        let uniform = prob(Tensor::full(&[1, 8, 8], 1.0 / 64.0));
        let c = prototype_from_map(&uniform, &LossConfig::default(), &mut rng()).unwrap();
        assert!((c.coords[0][0] - 3.5).abs() < 1e-12 && (c.coords[0][1] - 3.5).abs() < 1e-12);
    }

    #[test]
    fn two_point_distribution_expectation_and_monte_carlo() {
        let mut t = Tensor::zeros(&[1, 1, 9]);
        t.data_mut()[0] = 0.25;
        t.data_mut()[8] = 0.75;
        let p = prob(t);
        let e = prototype_from_map(&p, &LossConfig::default(), &mut rng()).unwrap();
        assert!((e.coords[0][0]).abs() < 1e-15 && (e.coords[0][1] - 6.0).abs() < 1e-12);
        let cfg = LossConfig {
            prototype_mode: PrototypeMode::Stochastic,
            samples: 100_000,
            ..LossConfig::default()
        };
        let s = prototype_from_map(&p, &cfg, &mut rng()).unwrap();
        assert_eq!(s.coords[0][0], 0.0);
        assert!((s.coords[0][1] - 6.0).abs() < 0.05, "{:?}", s.coords[0]);
    }

    #[test]
    fn unnormalised_map_is_rejected() {
        let bad = ProbabilityMap {
            values: Tensor::full(&[1, 2, 2], 0.3),
        };
        assert!(matches!(
            prototype_from_map(&bad, &LossConfig::default(), &mut rng()),
            Err(HcaError::InputDomain(_))
        ));
    }

    #[test]
    fn pairwise_hand_case() {
        let gt = proto(&[[0.0, 0.0], [10.0, 0.0], [20.0, 0.0]]);
        let pred = proto(&[[0.0, 0.0], [10.0, 0.0], [25.0, 0.0]]);
        // (0,2): 0.8^2 * 5^2 = 16, (1,2): 0.8 * 5^2 = 20
        assert!((pairwise_distance_loss(&pred, &gt, 0.8).unwrap() - 36.0).abs() < 1e-9);
        assert_eq!(pairwise_distance_loss(&gt, &gt, 0.8).unwrap(), 0.0);
        let moved = proto(&[[5.0, 5.0], [15.0, 5.0], [25.0, 5.0]]);
        assert!(pairwise_distance_loss(&moved, &gt, 0.8).unwrap().abs() < 1e-12);
        assert!(pairwise_distance_loss(&proto(&[[0.0, 0.0]]), &gt, 0.8).is_err());
    }

    #[test]
    fn invalid_discs_drop_out_of_pairs() {
        let gt = Prototype {
            coords: vec![[0.0, 0.0], [10.0, 0.0], [20.0, 0.0]],
            valid: vec![true, false, true],
        };
        let pred = proto(&[[0.0, 0.0], [99.0, 99.0], [25.0, 0.0]]);
        // only (0,2) remains, at its original index gap of 2
        assert!((pairwise_distance_loss(&pred, &gt, 0.8).unwrap() - 16.0).abs() < 1e-9);
        assert!((identity_distance_loss(&pred, &gt).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn skeleton_endpoints() {
        let gt = KeypointSet::new(vec![[1.0, 2.0], [3.0, 3.0], [5.0, 4.0]], vec![true; 3], 1.0)
            .unwrap();
        // sharp peaks make the soft-argmax land on the keypoints
        let mut t = Tensor::full(&[3, 8, 8], -1000.0);
        for (i, c) in gt.coords.iter().enumerate() {
            t.data_mut()[i * 64 + c[0] as usize * 8 + c[1] as usize] = 0.0;
        }
        let sharp = HeatmapStack::new(t, HeatmapRole::Prediction).unwrap();
        let cfg = LossConfig::default();
        assert!(skeleton_loss(&[sharp.clone()], &gt, &cfg, &mut rng()).unwrap().abs() < 1e-9);

        let noisy = stack(&[3, 8, 8], 9);
        let b1 = LossConfig { beta: 1.0, ..cfg.clone() };
        let sk = skeleton_loss(&[noisy.clone(), sharp], &gt, &b1, &mut rng()).unwrap();
        let p = prototype_from_map(&softmax_probability(&noisy).unwrap(), &cfg, &mut rng()).unwrap();
        let id = identity_distance_loss(&p, &Prototype::from_keypoints(&gt)).unwrap();
        assert!((sk - id).abs() < 1e-9);
        assert!(skeleton_loss(&[], &gt, &cfg, &mut rng()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        for bad in [
            LossConfig { lambda_sk: -1.0, ..Default::default() },
            LossConfig { beta: 1.5, ..Default::default() },
            LossConfig { alpha: 0.0, ..Default::default() },
            LossConfig { alpha: 1.2, ..Default::default() },
            LossConfig { samples: 0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(HcaError::Config(_))));
        }
    }
}
