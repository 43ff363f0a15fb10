//! Convolution and normalization layers that register their parameters in a
//! [`ParamStore`] and evaluate on a [`Graph`].

use alloc::format;

use rand::Rng;

use crate::graph::{Graph, Mode, Var};
use crate::params::{channel_vector, kaiming_kernel, ParamId, ParamKind, ParamStore};

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), kaiming_kernel(rng, cout, cin, k), ParamKind::Weight);
        let bias = bias.then(|| store.add(format!("{name}.bias"), channel_vector(cout, 0.0), ParamKind::Bias));
        Self { weight, bias, stride }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), channel_vector(channels, 1.0), ParamKind::Gamma),
            beta: store.add(format!("{name}.beta"), channel_vector(channels, 0.0), ParamKind::Beta),
            running_mean: store.add(
                format!("{name}.running_mean"),
                channel_vector(channels, 0.0),
                ParamKind::RunningMean,
            ),
            running_var: store.add(format!("{name}.running_var"), channel_vector(channels, 1.0), ParamKind::RunningVar),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Var {
        g.batch_norm(store, x, self.gamma, self.beta, (self.running_mean, self.running_var), mode)
    }
}

/// Convolution, batch normalization and ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        Self {
            conv: Conv::new(store, rng, &format!("{name}.conv"), cin, cout, k, stride, false),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Var {
        let y = self.conv.forward(g, store, x);
        let y = self.bn.forward(g, store, y, mode);
        g.relu(y)
    }
}
