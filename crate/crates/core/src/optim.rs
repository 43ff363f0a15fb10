//! Stochastic gradient descent with momentum and coupled L2 weight decay.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

/// Per step, for every trainable parameter `p` with gradient `g` (zero if absent):
/// `v = momentum * v + g + weight_decay * p; p -= learning_rate * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self { config, velocity: Vec::new() }
    }

    pub fn step<'a>(&mut self, store: &mut ParamStore, grads: impl IntoIterator<Item = (ParamId, &'a Tensor)>) {
        let mut by_param: Vec<Option<&Tensor>> = alloc::vec![None; store.len()];
        for (id, g) in grads {
            by_param[id.index()] = Some(g);
        }
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let SgdConfig { learning_rate: lr, weight_decay: wd, momentum: mu } = self.config;
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let v = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            let g = by_param[id.index()];
            for (j, (pv, vv)) in p.value.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
                let grad = g.map_or(0.0, |g| g.data()[j]);
                *vv = mu * *vv + grad + wd * *pv;
                *pv -= lr * *vv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use crate::tensor::Shape;
    use alloc::string::ToString;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add(
            "w".to_string(),
            Tensor::from_vec(Shape::new(1, 1, 1, 3), alloc::vec![1.0, -2.0, 0.5]),
            ParamKind::Weight,
        );
        s.add("rm".to_string(), Tensor::full(Shape::new(1, 1, 1, 1), 3.0), ParamKind::RunningMean);
        s
    }

    #[test]
    fn zero_gradient_step_shrinks_by_decay() {
        let mut s = store();
        let before = s.value(ParamId(0)).clone();
        let cfg = SgdConfig { learning_rate: 0.001, weight_decay: 0.0005, momentum: 0.9 };
        Sgd::new(cfg).step(&mut s, core::iter::empty());
        for (a, b) in s.value(ParamId(0)).data().iter().zip(before.data()) {
            assert_eq!(*a, b - 0.001 * (0.0005 * b));
            assert!((a - b * (1.0 - 0.001 * 0.0005)).abs() < 1e-18);
        }
        assert_eq!(s.value(ParamId(1)).data(), &[3.0]);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut s = store();
        let before = s.clone();
        let g = Tensor::full(Shape::new(1, 1, 1, 3), 5.0);
        Sgd::new(SgdConfig { learning_rate: 0.0, weight_decay: 0.0005, momentum: 0.9 })
            .step(&mut s, [(ParamId(0), &g)]);
        assert_eq!(s, before);
    }

    #[test]
    fn momentum_accumulates() {
        let mut s = store();
        let g = Tensor::full(Shape::new(1, 1, 1, 3), 1.0);
        let mut opt = Sgd::new(SgdConfig { learning_rate: 0.1, weight_decay: 0.0, momentum: 0.5 });
        opt.step(&mut s, [(ParamId(0), &g)]);
        opt.step(&mut s, [(ParamId(0), &g)]);
        // steps of 0.1 then 0.15
        assert!((s.value(ParamId(0)).data()[0] - (1.0 - 0.25)).abs() < 1e-12);
    }
}
