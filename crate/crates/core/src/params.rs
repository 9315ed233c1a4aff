//! Named parameter storage and the layers built on it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::conv::ConvSpec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Flat, ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }
}

/// Tape variables of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub const RESIDUAL_INIT_GAIN: f64 = 0.1;

/// Convolution layer whose weights live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv2d {
    /// He-uniform weights (variance `2 / fan_in`), zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
    ) -> Self {
        let cin_g = cin / spec.groups;
        let fan_in = (cin_g * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let n = cout * cin_g * kernel * kernel;
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::from_vec(&[cout, cin_g, kernel, kernel], data).expect("shape"),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self { weight, bias, spec }
    }

    /// Multiplies the weights by `k` and fills the bias with `bias`.
    pub fn rescale(&self, store: &mut ParamStore, k: f64, bias: f64) {
        for w in store.get_mut(self.weight).data_mut() {
            *w *= k;
        }
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().fill(bias);
        }
    }

    pub fn forward(&self, tape: &mut Tape, binding: &Binding, x: Var) -> Var {
        tape.conv2d(
            x,
            binding.var(self.weight),
            self.bias.map(|b| binding.var(b)),
            self.spec,
        )
    }

    pub fn parameter_count(&self, store: &ParamStore) -> usize {
        store.get(self.weight).len() + self.bias.map_or(0, |b| store.get(b).len())
    }
}

/// `relu(x + conv(relu(conv(x))))` with 3x3 convolutions.
#[derive(Debug, Clone)]
pub struct Residual {
    first: Conv2d,
    second: Conv2d,
}

impl Residual {
    /// The second convolution starts at `RESIDUAL_INIT_GAIN` times He scale,
    /// so a fresh block is close to the identity.
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Self {
        let spec = ConvSpec::same(3, 1, 1);
        let first = Conv2d::new(store, rng, &format!("{name}.conv1"), channels, channels, 3, spec, true);
        let second = Conv2d::new(store, rng, &format!("{name}.conv2"), channels, channels, 3, spec, true);
        second.rescale(store, RESIDUAL_INIT_GAIN, 0.0);
        Self { first, second }
    }

    pub fn forward(&self, tape: &mut Tape, binding: &Binding, x: Var) -> Var {
        let h = self.first.forward(tape, binding, x);
        let h = tape.relu(h);
        let h = self.second.forward(tape, binding, h);
        let s = tape.add(x, h);
        tape.relu(s)
    }
}
