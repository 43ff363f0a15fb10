//! A single-use reverse-mode autodiff tape over [`Tensor`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so reverse iteration is a valid topological order for
//! backpropagation.

use alloc::vec;
use alloc::vec::Vec;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Whether batch normalization uses batch statistics or the running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, stride: usize },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64>, batch_stats: bool },
    Relu(Var),
    Resize(Var),
    Concat(Vec<Var>),
    Add(Var, Var),
    Mul(Var, Var),
    ChannelScale { input: Var, scale: Var },
    SliceChannels { input: Var, start: usize },
    Softmax(Var),
    CrossEntropy { logits: Var, labels: Vec<u8>, weights: Vec<f64>, probs: Tensor, denom: f64 },
    Mse { pred: Var, target: Tensor, weights: Vec<f64>, denom: f64 },
    Sum(Var),
    LinComb(Vec<(Var, f64)>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch-norm node.
#[derive(Clone, Debug)]
pub struct BatchNormStats {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f64>,
    /// Unbiased variance estimate.
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    bn_stats: Vec<BatchNormStats>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient, not tied to any stored parameter.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.0) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Parameter leaves registered on this graph.
    pub fn param_leaves(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.param_vars.iter().enumerate().filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    pub fn batch_norm_stats(&self) -> &[BatchNormStats] {
        &self.bn_stats
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize) -> Var {
        let out = tensor::conv2d(self.value(input), self.value(weight), bias.map(|b| self.value(b)), stride);
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.grad_any(&deps);
        self.push(out, Op::Conv2d { input, weight, bias, stride }, rg)
    }

    /// Batch normalization over (batch, height, width) for every channel.
    ///
    /// In [`Mode::Train`] the batch statistics are used and recorded so the
    /// caller can fold them into the running estimates; in [`Mode::Eval`] the
    /// running estimates are used as constants.
    pub fn batch_norm(
        &mut self,
        store: &ParamStore,
        input: Var,
        gamma: ParamId,
        beta: ParamId,
        running: (ParamId, ParamId),
        mode: Mode,
    ) -> Var {
        let gv = self.param(store, gamma);
        let bv = self.param(store, beta);
        let x = self.value(input);
        let s = x.shape();
        let m = (s.n * s.plane()) as f64;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; s.c];
                let mut var = vec![0.0; s.c];
                for c in 0..s.c {
                    let mut acc = 0.0;
                    for n in 0..s.n {
                        acc += x.plane(n, c).iter().sum::<f64>();
                    }
                    mean[c] = acc / m;
                    let mut sq = 0.0;
                    for n in 0..s.n {
                        sq += x.plane(n, c).iter().map(|v| (v - mean[c]) * (v - mean[c])).sum::<f64>();
                    }
                    var[c] = sq / m;
                }
                (mean, var)
            }
            Mode::Eval => (store.value(running.0).data().to_vec(), store.value(running.1).data().to_vec()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + BN_EPS)).collect();
        let mut xhat = Tensor::zeros(s);
        let mut out = Tensor::zeros(s);
        let g = store.value(gamma).data();
        let b = store.value(beta).data();
        for n in 0..s.n {
            for c in 0..s.c {
                let src = x.plane(n, c);
                let xh = xhat.plane_mut(n, c);
                for (d, &v) in xh.iter_mut().zip(src) {
                    *d = (v - mean[c]) * inv_std[c];
                }
                let xh = xhat.plane(n, c).to_vec();
                for (d, v) in out.plane_mut(n, c).iter_mut().zip(xh) {
                    *d = g[c] * v + b[c];
                }
            }
        }
        let batch_stats = mode == Mode::Train;
        if batch_stats {
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            self.bn_stats.push(BatchNormStats {
                running_mean: running.0,
                running_var: running.1,
                mean,
                var: var.iter().map(|v| v * unbias).collect(),
            });
        }
        let rg = self.grad_any(&[input, gv, bv]);
        self.push(out, Op::BatchNorm { input, gamma: gv, beta: bv, xhat, inv_std, batch_stats }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.grad_any(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// Bilinear resize to `(h, w)`; a no-op node is skipped when sizes already match.
    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Var {
        let s = self.shape(x);
        if s.h == h && s.w == w {
            return x;
        }
        let out = tensor::resize_bilinear(self.value(x), h, w);
        let rg = self.grad_any(&[x]);
        self.push(out, Op::Resize(x), rg)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let refs: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let out = tensor::concat_channels(&refs);
        let rg = self.grad_any(parts);
        self.push(out, Op::Concat(parts.to_vec()), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.grad_any(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Hadamard product of equal-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "hadamard product needs equal shapes");
        let bv = self.value(b).data();
        let out = Tensor::from_vec(self.shape(a), self.value(a).data().iter().zip(bv).map(|(x, y)| x * y).collect());
        let rg = self.grad_any(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Multiplies every channel `c` by `scale[c]`, broadcast over batch and space.
    pub fn channel_scale(&mut self, input: Var, scale: Var) -> Var {
        let s = self.shape(input);
        assert_eq!(self.shape(scale).len(), s.c, "channel scale length must equal channel count");
        let w = self.value(scale).data().to_vec();
        let mut out = self.value(input).clone();
        for n in 0..s.n {
            for (c, wc) in w.iter().enumerate() {
                for v in out.plane_mut(n, c) {
                    *v *= wc;
                }
            }
        }
        let rg = self.grad_any(&[input, scale]);
        self.push(out, Op::ChannelScale { input, scale }, rg)
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Var {
        let out = self.value(input).slice_channels(start, len);
        let rg = self.grad_any(&[input]);
        self.push(out, Op::SliceChannels { input, start }, rg)
    }

    pub fn softmax(&mut self, logits: Var) -> Var {
        let out = tensor::softmax_channels(self.value(logits));
        let rg = self.grad_any(&[logits]);
        self.push(out, Op::Softmax(logits), rg)
    }

    /// Weighted mean over locations of `-log softmax(logits)[label]`.
    ///
    /// `labels` and `weights` are indexed by `(n, y, x)`; locations with zero
    /// weight do not contribute. Returns a scalar node.
    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<u8>, weights: Vec<f64>) -> Var {
        let x = self.value(logits);
        let s = x.shape();
        let p = s.plane();
        assert_eq!(labels.len(), s.n * p);
        assert_eq!(weights.len(), s.n * p);
        let logp = tensor::log_softmax_channels(x);
        let denom: f64 = weights.iter().sum();
        let mut total = 0.0;
        for n in 0..s.n {
            for j in 0..p {
                let w = weights[n * p + j];
                if w != 0.0 {
                    let l = labels[n * p + j] as usize;
                    total -= w * logp.data()[(n * s.c + l) * p + j];
                }
            }
        }
        let loss = if denom > 0.0 { total / denom } else { 0.0 };
        let probs = logp.map(libm::exp);
        let rg = self.grad_any(&[logits]);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels, weights, probs, denom }, rg)
    }

    /// Weighted mean of squared differences against a constant target.
    pub fn mse(&mut self, pred: Var, target: Tensor, weights: Vec<f64>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "regression target shape mismatch");
        assert_eq!(weights.len(), target.shape().len());
        let denom: f64 = weights.iter().sum();
        let total: f64 =
            pv.data().iter().zip(target.data()).zip(&weights).map(|((p, t), w)| w * (p - t) * (p - t)).sum();
        let loss = if denom > 0.0 { total / denom } else { 0.0 };
        let rg = self.grad_any(&[pred]);
        self.push(Tensor::scalar(loss), Op::Mse { pred, target, weights, denom }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.grad_any(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    /// `sum_i coeff_i * x_i` over equal-shaped inputs.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut out = Tensor::zeros(self.shape(terms[0].0));
        for (v, c) in terms {
            for (o, x) in out.data_mut().iter_mut().zip(self.value(*v).data()) {
                *o += c * x;
            }
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.grad_any(&vars);
        self.push(out, Op::LinComb(terms.to_vec()), rg)
    }

    /// Backpropagates from a scalar root with seed gradient 1.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, value: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, stride } => {
                let want_input = self.nodes[input.0].requires_grad;
                let (gi, gw, gb) =
                    tensor::conv2d_backward(self.value(*input), self.value(*weight), g, *stride, want_input);
                if let Some(gi) = gi {
                    self.accumulate(grads, *input, gi);
                }
                self.accumulate(grads, *weight, gw);
                if let Some(b) = bias {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch_stats } => {
                let s = g.shape();
                let m = (s.n * s.plane()) as f64;
                let gam = self.value(*gamma).data();
                let mut dgamma = Tensor::zeros(Shape::new(1, s.c, 1, 1));
                let mut dbeta = Tensor::zeros(Shape::new(1, s.c, 1, 1));
                let mut dx = Tensor::zeros(s);
                for c in 0..s.c {
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for n in 0..s.n {
                        for (dy, xh) in g.plane(n, c).iter().zip(xhat.plane(n, c)) {
                            sum_dy += dy;
                            sum_dy_xhat += dy * xh;
                        }
                    }
                    dgamma.data_mut()[c] = sum_dy_xhat;
                    dbeta.data_mut()[c] = sum_dy;
                    let k = gam[c] * inv_std[c];
                    for n in 0..s.n {
                        let xh = xhat.plane(n, c).to_vec();
                        let dy = g.plane(n, c).to_vec();
                        let dst = dx.plane_mut(n, c);
                        for j in 0..dst.len() {
                            dst[j] = if *batch_stats {
                                k * (dy[j] - sum_dy / m - xh[j] * sum_dy_xhat / m)
                            } else {
                                k * dy[j]
                            };
                        }
                    }
                }
                self.accumulate(grads, *input, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gi = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(xv).map(|(gv, v)| if *v > 0.0 { *gv } else { 0.0 }).collect(),
                );
                self.accumulate(grads, *x, gi);
            }
            Op::Resize(x) => {
                let gi = tensor::resize_bilinear_backward(g, self.shape(*x));
                self.accumulate(grads, *x, gi);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let c = self.shape(*p).c;
                    self.accumulate(grads, *p, g.slice_channels(offset, c));
                    offset += c;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let s = g.shape();
                if self.nodes[a.0].requires_grad {
                    let ga = g.data().iter().zip(bv).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_vec(s, ga));
                }
                if self.nodes[b.0].requires_grad {
                    let gb = g.data().iter().zip(av).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(s, gb));
                }
            }
            Op::ChannelScale { input, scale } => {
                let s = g.shape();
                let w = self.value(*scale).data();
                let x = self.value(*input);
                let mut gi = g.clone();
                let mut gw = Tensor::zeros(self.shape(*scale));
                for n in 0..s.n {
                    for (c, &wc) in w.iter().enumerate().take(s.c) {
                        gw.data_mut()[c] += g.plane(n, c).iter().zip(x.plane(n, c)).map(|(a, b)| a * b).sum::<f64>();
                        for v in gi.plane_mut(n, c) {
                            *v *= wc;
                        }
                    }
                }
                self.accumulate(grads, *input, gi);
                self.accumulate(grads, *scale, gw);
            }
            Op::SliceChannels { input, start } => {
                let s = self.shape(*input);
                let mut gi = Tensor::zeros(s);
                for n in 0..s.n {
                    for c in 0..g.shape().c {
                        gi.plane_mut(n, start + c).copy_from_slice(g.plane(n, c));
                    }
                }
                self.accumulate(grads, *input, gi);
            }
            Op::Softmax(x) => {
                let gi = tensor::softmax_channels_backward(value, g);
                self.accumulate(grads, *x, gi);
            }
            Op::CrossEntropy { logits, labels, weights, probs, denom } => {
                let s = probs.shape();
                let p = s.plane();
                let seed = g.data()[0];
                let mut gi = Tensor::zeros(s);
                if *denom > 0.0 {
                    for n in 0..s.n {
                        for j in 0..p {
                            let w = weights[n * p + j] * seed / denom;
                            if w == 0.0 {
                                continue;
                            }
                            let l = labels[n * p + j] as usize;
                            for c in 0..s.c {
                                let i = (n * s.c + c) * p + j;
                                let onehot = if c == l { 1.0 } else { 0.0 };
                                gi.data_mut()[i] = w * (probs.data()[i] - onehot);
                            }
                        }
                    }
                }
                self.accumulate(grads, *logits, gi);
            }
            Op::Mse { pred, target, weights, denom } => {
                let seed = g.data()[0];
                let pv = self.value(*pred);
                let scale = if *denom > 0.0 { 2.0 * seed / denom } else { 0.0 };
                let gi =
                    pv.data().iter().zip(target.data()).zip(weights).map(|((p, t), w)| scale * w * (p - t)).collect();
                self.accumulate(grads, *pred, Tensor::from_vec(pv.shape(), gi));
            }
            Op::Sum(x) => {
                let seed = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), seed));
            }
            Op::LinComb(terms) => {
                for (v, c) in terms {
                    let mut gi = g.clone();
                    gi.scale(*c);
                    self.accumulate(grads, *v, gi);
                }
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of every parameter leaf of `graph` that received one.
    pub fn params<'a>(&'a self, graph: &'a Graph) -> impl Iterator<Item = (ParamId, &'a Tensor)> + 'a {
        graph.param_leaves().filter_map(move |(id, v)| self.of(v).map(|g| (id, g)))
    }
}
