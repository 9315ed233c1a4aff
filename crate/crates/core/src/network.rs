//! The stacked hierarchical-context-attention network.
//!
//! ```text
//! image -> stem (7x7/2 conv, residual, 2x max-pool)
//!       -> block 1: hourglass -> M-LKA gate -> 1x1 feature conv -> head -> Out_1
//!       -> block 2: (previous input + remapped features + remapped Out_1) -> ... -> Out_2
//!       ...
//! fused = 1x1 conv over [Out_1, ..., Out_N]
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::conv::ConvSpec;
use crate::error::{HcaError, Result};
use crate::heatmap::{HeatmapRole, HeatmapStack};
use crate::mlka::{Mlka, MlkaConfig};
use crate::params::{Binding, Conv2d, ParamStore, Residual};
use crate::tensor::Tensor;

/// Spatial reduction between the input image and the heatmaps.
pub const DOWNSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stacks: usize,
    pub channels: usize,
    pub hourglass_depth: usize,
    pub num_discs: usize,
    pub input_size: (usize, usize),
    pub mlka: MlkaConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stacks: 2,
            channels: 64,
            hourglass_depth: 3,
            num_discs: 11,
            input_size: (256, 256),
            mlka: MlkaConfig::with_default_scales(64),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// One stack, 8 channels, 64x64 input.
    pub fn tiny() -> Self {
        Self {
            stacks: 1,
            channels: 8,
            hourglass_depth: 3,
            num_discs: 11,
            input_size: (64, 64),
            mlka: MlkaConfig::with_default_scales(8),
            seed: 0,
        }
    }

    pub fn heatmap_size(&self) -> (usize, usize) {
        (
            self.input_size.0 / DOWNSAMPLE,
            self.input_size.1 / DOWNSAMPLE,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.stacks == 0 || self.num_discs == 0 || self.channels == 0 {
            return Err(HcaError::Config(
                "stacks, channels and num_discs must all be at least 1".into(),
            ));
        }
        if self.hourglass_depth == 0 {
            return Err(HcaError::Config("hourglass_depth must be at least 1".into()));
        }
        let unit = DOWNSAMPLE << self.hourglass_depth;
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
            return Err(HcaError::Config(format!(
                "input size {h}x{w} must be divisible by {unit} \
                 (stem x{DOWNSAMPLE} times 2^hourglass_depth)"
            )));
        }
        if self.mlka.channels != self.channels {
            return Err(HcaError::Config(format!(
                "mlka.channels ({}) must equal channels ({})",
                self.mlka.channels, self.channels
            )));
        }
        self.mlka.validate()
    }
}

/// Fused map plus one intermediate map per stacked block.
#[derive(Debug, Clone)]
pub struct NetworkOutput {
    pub fused: HeatmapStack,
    pub intermediates: Vec<HeatmapStack>,
}

#[derive(Debug, Clone)]
struct Hourglass {
    skip: Residual,
    down: Residual,
    inner: Inner,
    up: Residual,
}

#[derive(Debug, Clone)]
enum Inner {
    Nested(Box<Hourglass>),
    Bottom(Residual),
}

impl Hourglass {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize, depth: usize) -> Self {
        let skip = Residual::new(store, rng, &format!("{name}.skip"), c);
        let down = Residual::new(store, rng, &format!("{name}.down"), c);
        let inner = if depth > 1 {
            Inner::Nested(Box::new(Hourglass::new(
                store,
                rng,
                &format!("{name}.inner"),
                c,
                depth - 1,
            )))
        } else {
            Inner::Bottom(Residual::new(store, rng, &format!("{name}.bottom"), c))
        };
        let up = Residual::new(store, rng, &format!("{name}.up"), c);
        Self {
            skip,
            down,
            inner,
            up,
        }
    }

    fn forward(&self, tape: &mut Tape, b: &Binding, x: Var) -> Var {
        let skip = self.skip.forward(tape, b, x);
        let low = tape.max_pool2(x);
        let low = self.down.forward(tape, b, low);
        let low = match &self.inner {
            Inner::Nested(hg) => hg.forward(tape, b, low),
            Inner::Bottom(r) => r.forward(tape, b, low),
        };
        let low = self.up.forward(tape, b, low);
        let up = tape.upsample2(low);
        tape.add(skip, up)
    }
}

#[derive(Debug, Clone)]
struct HcaBlock {
    hourglass: Hourglass,
    attention: Mlka,
    features: Conv2d,
    head: Conv2d,
    /// Re-injection into the next block; absent on the last block.
    remap: Option<(Conv2d, Conv2d)>,
}

#[derive(Debug, Clone)]
struct Stem {
    conv: Conv2d,
    residual: Residual,
}

/// HCA-Net with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    stem: Stem,
    blocks: Vec<HcaBlock>,
    fusion: Conv2d,
}

/// Tape handles of one batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub fused: Var,
    pub intermediates: Vec<Var>,
}

impl Model {
    /// Builds the network with weights drawn from `config.seed`.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let v = config.num_discs;
        let one = ConvSpec::same(1, 1, 1);
        let stem = Stem {
            conv: Conv2d::new(
                &mut store,
                &mut rng,
                "stem.conv",
                1,
                c,
                7,
                ConvSpec {
                    stride: 2,
                    padding: 3,
                    dilation: 1,
                    groups: 1,
                },
                true,
            ),
            residual: Residual::new(&mut store, &mut rng, "stem.res", c),
        };
        let mut blocks = Vec::with_capacity(config.stacks);
        for j in 0..config.stacks {
            let name = format!("block{j}");
            let hourglass = Hourglass::new(
                &mut store,
                &mut rng,
                &format!("{name}.hg"),
                c,
                config.hourglass_depth,
            );
            let attention = Mlka::new(&mut store, &mut rng, &format!("{name}.mlka"), &config.mlka)?;
            let features =
                Conv2d::new(&mut store, &mut rng, &format!("{name}.features"), c, c, 1, one, true);
            let head = Conv2d::new(&mut store, &mut rng, &format!("{name}.head"), c, v, 1, one, true);
            let remap = (j + 1 < config.stacks).then(|| {
                (
                    Conv2d::new(&mut store, &mut rng, &format!("{name}.remap_feat"), c, c, 1, one, true),
                    Conv2d::new(&mut store, &mut rng, &format!("{name}.remap_out"), v, c, 1, one, true),
                )
            });
            blocks.push(HcaBlock {
                hourglass,
                attention,
                features,
                head,
                remap,
            });
        }
        let fusion = Conv2d::new(
            &mut store,
            &mut rng,
            "fusion",
            config.stacks * v,
            v,
            1,
            one,
            true,
        );
        Ok(Self {
            config: config.clone(),
            params: store,
            stem,
            blocks,
            fusion,
        })
    }

    /// Rebuilds the architecture for `config` and installs `params`, which
    /// must match the freshly built layout name for name and shape for shape.
    pub fn from_parts(config: &ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config)?;
        if model.params.len() != params.len() {
            return Err(HcaError::Config(format!(
                "expected {} parameter tensors, got {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((_, n1, t1), (_, n2, t2)) in model.params.iter().zip(params.iter()) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(HcaError::Config(format!(
                    "parameter layout mismatch: {n1} {:?} vs {n2} {:?}",
                    t1.shape(),
                    t2.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Number of per-block prediction heads.
    pub fn head_count(&self) -> usize {
        self.blocks.len()
    }

    /// Names of each block's head bias, in block order.
    pub fn head_bias_names(&self) -> Vec<String> {
        self.blocks
            .iter()
            .filter_map(|b| b.head.bias.map(|id| self.params.name(id).to_string()))
            .collect()
    }

    /// Name of the fusion layer's weight.
    pub fn fusion_weight_name(&self) -> &str {
        self.params.name(self.fusion.weight)
    }

    /// Batched forward pass on `images` (`[n, 1, H, W]`).
    pub fn forward_vars(&self, tape: &mut Tape, binding: &Binding, images: Var) -> ForwardVars {
        let x = self.stem.conv.forward(tape, binding, images);
        let x = tape.relu(x);
        let x = self.stem.residual.forward(tape, binding, x);
        let mut x = tape.max_pool2(x);
        let mut intermediates = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let h = block.hourglass.forward(tape, binding, x);
            let h = block.attention.forward(tape, binding, h);
            let h = block.features.forward(tape, binding, h);
            let h = tape.relu(h);
            let out = block.head.forward(tape, binding, h);
            intermediates.push(out);
            if let Some((remap_feat, remap_out)) = &block.remap {
                let a = remap_feat.forward(tape, binding, h);
                let b = remap_out.forward(tape, binding, out);
                let s = tape.add(x, a);
                x = tape.add(s, b);
            }
        }
        let cat = if intermediates.len() == 1 {
            intermediates[0]
        } else {
            tape.concat(&intermediates)
        };
        let fused = self.fusion.forward(tape, binding, cat);
        ForwardVars {
            fused,
            intermediates,
        }
    }

    pub fn check_images(&self, images: &Tensor) -> Result<()> {
        let (h, w) = self.config.input_size;
        let s = images.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != h || s[3] != w {
            return Err(HcaError::InputDomain(format!(
                "expected images of shape [n, 1, {h}, {w}], got {s:?}"
            )));
        }
        Ok(())
    }

    /// Inference on a batch `[n, 1, H, W]`; one output per image.
    pub fn predict_batch(&self, images: &Tensor) -> Result<Vec<NetworkOutput>> {
        self.check_images(images)?;
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape);
        let x = tape.leaf(images.clone());
        let vars = self.forward_vars(&mut tape, &binding, x);
        let n = images.shape()[0];
        let stack = |t: &Tensor, i: usize| {
            HeatmapStack::new(t.batch_item(i), HeatmapRole::Prediction).expect("rank 3")
        };
        Ok((0..n)
            .map(|i| NetworkOutput {
                fused: stack(tape.value(vars.fused), i),
                intermediates: vars
                    .intermediates
                    .iter()
                    .map(|&v| stack(tape.value(v), i))
                    .collect(),
            })
            .collect())
    }

    /// Inference on one `1 x H x W` image.
    pub fn forward(&self, image: &Tensor) -> Result<NetworkOutput> {
        let s = image.shape();
        if s.len() != 3 {
            return Err(HcaError::InputDomain(format!(
                "expected a 1 x H x W image, got {s:?}"
            )));
        }
        let batch = image.clone().reshape(&[1, s[0], s[1], s[2]])?;
        Ok(self.predict_batch(&batch)?.remove(0))
    }
}
