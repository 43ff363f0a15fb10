//! Named parameter storage shared by every layer of the model.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    /// Channel-wise fusion weight of the scale-adaptive fusion block.
    FusionWeight,
    /// Batch-norm running statistics; updated from forward passes, never by the optimizer.
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn is_buffer(self) -> bool {
        matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: String, value: Tensor, kind: ParamKind) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter name");
        let trainable = !kind.is_buffer();
        self.params.push(Param { name, value, kind, trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Number of scalars the optimizer may update.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.kind.is_buffer()).map(|p| p.value.shape().len()).sum()
    }

    /// Scalars whose names start with `prefix` (buffers excluded).
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| !p.kind.is_buffer() && p.name.starts_with(prefix))
            .map(|p| p.value.shape().len())
            .sum()
    }

    /// Rounds every stored value to `f32` precision, the checkpoint storage type.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Kaiming (He) normal initialization for a `(cout, cin, k, k)` kernel.
pub fn kaiming_kernel(rng: &mut impl Rng, cout: usize, cin: usize, k: usize) -> Tensor {
    let shape = Shape::new(cout, cin, k, k);
    let fan_in = (cin * k * k) as f64;
    let normal = Normal::new(0.0, libm::sqrt(2.0 / fan_in)).expect("finite std");
    Tensor::from_vec(shape, (0..shape.len()).map(|_| normal.sample(rng)).collect())
}

/// A 1x1 kernel that copies channel `i` to channel `i`.
pub fn identity_kernel(channels: usize) -> Tensor {
    let mut t = Tensor::zeros(Shape::new(channels, channels, 1, 1));
    for c in 0..channels {
        *t.at_mut(c, c, 0, 0) = 1.0;
    }
    t
}

pub fn channel_vector(channels: usize, value: f64) -> Tensor {
    Tensor::full(Shape::new(1, channels, 1, 1), value)
}
