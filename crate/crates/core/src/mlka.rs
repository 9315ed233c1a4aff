//! Multi-scale large kernel attention.
//!
//! Each scale approximates a `K x K` depth-wise convolution by a local
//! `(2d-1) x (2d-1)` depth-wise convolution followed by a `ceil(K/d)`-sized
//! depth-wise convolution with dilation `d`. The branch outputs are
//! concatenated and mixed by one 1x1 convolution into the attention map,
//! which gates the input elementwise.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::conv::ConvSpec;
use crate::error::{HcaError, Result};
use crate::params::{Binding, Conv2d, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LkaScaleSpec {
    kernel: usize,
    dilation: usize,
}

impl LkaScaleSpec {
    pub fn new(kernel: usize, dilation: usize) -> Result<Self> {
        if kernel < 3 || dilation < 2 {
            return Err(HcaError::Config(format!(
                "LKA scale needs kernel >= 3 and dilation >= 2, got ({kernel}, {dilation})"
            )));
        }
        let dilated = kernel.div_ceil(dilation);
        if dilated < 3 || dilated % 2 == 0 {
            return Err(HcaError::Config(format!(
                "ceil({kernel}/{dilation}) = {dilated} must be odd and at least 3"
            )));
        }
        Ok(Self { kernel, dilation })
    }

    /// Receptive field the branch stands in for.
    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    /// Side of the local depth-wise kernel, `2d - 1`.
    pub fn local_kernel(&self) -> usize {
        2 * self.dilation - 1
    }

    /// Side of the dilated depth-wise kernel, `ceil(K / d)`.
    pub fn dilated_kernel(&self) -> usize {
        self.kernel.div_ceil(self.dilation)
    }

    /// Weights plus biases of one branch with `channels` channels.
    pub fn branch_parameter_count(&self, channels: usize) -> usize {
        channels * (self.local_kernel().pow(2) + self.dilated_kernel().pow(2)) + 2 * channels
    }

    /// Weights of the dense depth-wise `K x K` convolution being approximated.
    pub fn dense_parameter_count(&self, channels: usize) -> usize {
        channels * self.kernel * self.kernel
    }
}

/// Scale of the merge weights at construction; the merge bias starts at 1.
pub const MERGE_INIT_GAIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlkaConfig {
    pub channels: usize,
    pub scales: Vec<LkaScaleSpec>,
}

impl MlkaConfig {
    /// Scales (9,3), (15,3), (21,3): one 5x5 local kernel with dilated
    /// 3x3, 5x5 and 7x7 kernels.
    pub fn default_scales() -> Vec<LkaScaleSpec> {
        [(9, 3), (15, 3), (21, 3)]
            .into_iter()
            .map(|(k, d)| LkaScaleSpec::new(k, d).expect("valid default"))
            .collect()
    }

    pub fn with_default_scales(channels: usize) -> Self {
        Self {
            channels,
            scales: Self::default_scales(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(HcaError::Config("M-LKA needs at least one channel".into()));
        }
        if self.scales.is_empty() {
            return Err(HcaError::Config("M-LKA scale set is empty".into()));
        }
        for (i, a) in self.scales.iter().enumerate() {
            // re-run construction checks for deserialized values
            LkaScaleSpec::new(a.kernel, a.dilation)?;
            if self.scales[..i].iter().any(|b| b.kernel == a.kernel) {
                return Err(HcaError::Config(format!(
                    "duplicate M-LKA kernel size {}",
                    a.kernel
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LkaBranch {
    pub spec: LkaScaleSpec,
    pub local: Conv2d,
    pub dilated: Conv2d,
}

impl LkaBranch {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        spec: LkaScaleSpec,
    ) -> Self {
        let lk = spec.local_kernel();
        let dk = spec.dilated_kernel();
        let local = Conv2d::new(
            store,
            rng,
            &format!("{name}.dw"),
            channels,
            channels,
            lk,
            ConvSpec::same(lk, 1, channels),
            true,
        );
        let dilated = Conv2d::new(
            store,
            rng,
            &format!("{name}.dwd"),
            channels,
            channels,
            dk,
            ConvSpec::same(dk, spec.dilation, channels),
            true,
        );
        Self {
            spec,
            local,
            dilated,
        }
    }

    pub fn forward(&self, tape: &mut Tape, binding: &Binding, x: Var) -> Var {
        let h = self.local.forward(tape, binding, x);
        self.dilated.forward(tape, binding, h)
    }

    pub fn parameter_count(&self, store: &ParamStore) -> usize {
        self.local.parameter_count(store) + self.dilated.parameter_count(store)
    }
}

#[derive(Debug, Clone)]
pub struct Mlka {
    pub config: MlkaConfig,
    pub branches: Vec<LkaBranch>,
    pub merge: Conv2d,
}

impl Mlka {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        config: &MlkaConfig,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let branches = config
            .scales
            .iter()
            .enumerate()
            .map(|(i, &s)| LkaBranch::new(store, rng, &format!("{name}.scale{i}"), c, s))
            .collect::<Vec<_>>();
        let merge = Conv2d::new(
            store,
            rng,
            &format!("{name}.merge"),
            c * branches.len(),
            c,
            1,
            ConvSpec::same(1, 1, 1),
            true,
        );
        // gate starts near 1
        merge.rescale(store, MERGE_INIT_GAIN, 1.0);
        Ok(Self {
            config: config.clone(),
            branches,
            merge,
        })
    }

    /// Attention map for `x` (`[n, C, h, w]`).
    pub fn attention(&self, tape: &mut Tape, binding: &Binding, x: Var) -> Var {
        let outs: Vec<Var> = self
            .branches
            .iter()
            .map(|b| b.forward(tape, binding, x))
            .collect();
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs)
        };
        self.merge.forward(tape, binding, cat)
    }

    /// `attention(x) * x`.
    pub fn forward(&self, tape: &mut Tape, binding: &Binding, x: Var) -> Var {
        let a = self.attention(tape, binding, x);
        tape.mul(a, x)
    }

    fn check_input(&self, features: &Tensor) -> Result<()> {
        let s = features.shape();
        if s.len() != 3 || s[0] != self.config.channels {
            return Err(HcaError::Config(format!(
                "M-LKA expects [{}, H, W] input, got {:?}",
                self.config.channels, s
            )));
        }
        Ok(())
    }

    /// Runs one branch on a `C x H x W` feature map.
    pub fn apply_branch(&self, store: &ParamStore, index: usize, features: &Tensor) -> Result<Tensor> {
        self.check_input(features)?;
        let branch = self.branches.get(index).ok_or_else(|| {
            HcaError::Config(format!("no M-LKA branch {index}"))
        })?;
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let x = tape.leaf(batch1(features));
        let y = branch.forward(&mut tape, &binding, x);
        Ok(tape.value(y).batch_item(0))
    }

    /// Full gated forward pass on a `C x H x W` feature map.
    pub fn apply(&self, store: &ParamStore, features: &Tensor) -> Result<Tensor> {
        self.check_input(features)?;
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let x = tape.leaf(batch1(features));
        let y = self.forward(&mut tape, &binding, x);
        Ok(tape.value(y).batch_item(0))
    }
}

fn batch1(t: &Tensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.clone().reshape(&shape).expect("same size")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn build(channels: usize, scales: &[(usize, usize)], seed: u64) -> (ParamStore, Mlka) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = MlkaConfig {
            channels,
            scales: scales
                .iter()
                .map(|&(k, d)| LkaScaleSpec::new(k, d).unwrap())
                .collect(),
        };
        let m = Mlka::new(&mut store, &mut rng, "mlka", &cfg).unwrap();
        (store, m)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn decomposition_rule_for_21_3() {
        let s = LkaScaleSpec::new(21, 3).unwrap();
        assert_eq!(s.local_kernel(), 5);
        assert_eq!(s.dilated_kernel(), 7);
        let (store, m) = build(32, &[(21, 3)], 0);
        let b = &m.branches[0];
        assert_eq!(store.get(b.local.weight).shape(), &[32, 1, 5, 5]);
        assert_eq!(store.get(b.dilated.weight).shape(), &[32, 1, 7, 7]);
        assert_eq!(b.dilated.spec.dilation, 3);
        assert_eq!(b.parameter_count(&store), 2432);
        assert_eq!(s.branch_parameter_count(32), 2432);
        assert_eq!(s.dense_parameter_count(32), 14112);
    }

    #[test]
    fn invalid_scales_are_rejected() {
        assert!(LkaScaleSpec::new(2, 2).is_err());
        assert!(LkaScaleSpec::new(9, 1).is_err());
        assert!(LkaScaleSpec::new(12, 3).is_err()); // ceil = 4, even
        assert!(LkaScaleSpec::new(5, 3).is_err()); // ceil = 2
        let empty = MlkaConfig {
            channels: 4,
            scales: vec![],
        };
        assert!(matches!(empty.validate(), Err(HcaError::Config(_))));
        let dup = MlkaConfig {
            channels: 4,
            scales: vec![LkaScaleSpec::new(9, 3).unwrap(), LkaScaleSpec::new(9, 4).unwrap()],
        };
        assert!(dup.validate().is_err());
    }

    #[test]
    fn zero_input_gives_zero_branch_output() {
        let (store, m) = build(4, &[(9, 3)], 1);
        let out = m.apply_branch(&store, 0, &Tensor::zeros(&[4, 10, 10])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_attention_is_identity_gate() {
        let (mut store, m) = build(16, &[(9, 3), (21, 3)], 2);
        store.get_mut(m.merge.weight).data_mut().fill(0.0);
        store.get_mut(m.merge.bias.unwrap()).data_mut().fill(1.0);
        let x = random(&[16, 32, 32], 3);
        let y = m.apply(&store, &x).unwrap();
        assert_eq!(y.shape(), &[16, 32, 32]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dirac_kernels_square_the_input() {
        let c = 3;
        let (mut store, m) = build(c, &[(9, 3)], 4);
        let b = &m.branches[0];
        for conv in [&b.local, &b.dilated] {
            let w = store.get_mut(conv.weight);
            let k = w.shape()[2];
            let mut dirac = Tensor::zeros(w.shape());
            for ch in 0..c {
                dirac.data_mut()[(ch * k + k / 2) * k + k / 2] = 1.0;
            }
            *w = dirac;
            store.get_mut(conv.bias.unwrap()).data_mut().fill(0.0);
        }
        let mut eye = Tensor::zeros(&[c, c, 1, 1]);
        for ch in 0..c {
            eye.data_mut()[ch * c + ch] = 1.0;
        }
        *store.get_mut(m.merge.weight) = eye;
        store.get_mut(m.merge.bias.unwrap()).data_mut().fill(0.0);
        let x = random(&[c, 7, 9], 5);
        let y = m.apply(&store, &x).unwrap();
        for (o, i) in y.data().iter().zip(x.data()) {
            assert!((o - i * i).abs() < 1e-15);
        }
    }

    #[test]
    fn channel_mismatch_is_a_configuration_error() {
        let (store, m) = build(4, &[(9, 3)], 6);
        assert!(matches!(
            m.apply(&store, &Tensor::zeros(&[3, 8, 8])),
            Err(HcaError::Config(_))
        ));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let (store, m) = build(2, &[(9, 3), (15, 3)], 7);
        let x0 = random(&[1, 2, 8, 8], 8);
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let x = tape.leaf(x0.clone());
        let y = m.forward(&mut tape, &binding, x);
        let s = tape.sum(y);
        let g = tape.backward(s).get(x).unwrap().clone();
        let eval = |t: Tensor| {
            let mut tape = Tape::new();
            let binding = store.bind(&mut tape);
            let x = tape.leaf(t);
            let y = m.forward(&mut tape, &binding, x);
            tape.value(y).sum()
        };
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..x0.len() {
            let mut p = x0.clone();
            p.data_mut()[i] += h;
            let mut q = x0.clone();
            q.data_mut()[i] -= h;
            let num = (eval(p) - eval(q)) / (2.0 * h);
            let a = g.data()[i];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
        }
        assert!(worst <= 1e-3, "max relative error {worst}");
    }

    proptest::proptest! {
        #[test]
        fn branch_is_cheaper_than_dense(d in 2usize..12, m in 1usize..8, c in 1usize..64) {
            // kernels whose ceil(K/d) = 2m+1
            let q = 2 * m + 1;
            for k in (d * (q - 1) + 1)..=(d * q) {
                let s = LkaScaleSpec::new(k, d).unwrap();
                proptest::prop_assert!(s.branch_parameter_count(c) < s.dense_parameter_count(c),
                    "K={} d={} c={}", k, d, c);
            }
        }
    }
}
