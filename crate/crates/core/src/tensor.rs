//! Dense NCHW tensors of `f64` and the raw kernels the autodiff tape is built on.
//!
//! Every kernel here is a plain function of its inputs. The graph in
//! [`crate::graph`] calls them for the forward pass and uses the matching
//! `*_backward` functions for the reverse pass.

use alloc::vec;
use alloc::vec::Vec;

/// Shape of a 4-D tensor in batch, channel, height, width order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub const fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self { shape, data: vec![0.0; shape.len()] }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self { shape, data: vec![value; shape.len()] }
    }

    /// Panics if `data.len()` does not match the shape.
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(shape.len(), data.len(), "tensor data length does not match shape");
        Self { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(Shape::new(1, 1, 1, 1), vec![value])
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.index(n, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        let i = self.shape.index(n, c, y, x);
        &mut self.data[i]
    }

    /// Contiguous `h*w` slice for one (batch, channel) pair.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies channels `start..start + len` into a new tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Tensor {
        let s = self.shape;
        assert!(start + len <= s.c, "channel slice out of range");
        let mut out = Tensor::zeros(Shape::new(s.n, len, s.h, s.w));
        for n in 0..s.n {
            for c in 0..len {
                out.plane_mut(n, c).copy_from_slice(self.plane(n, start + c));
            }
        }
        out
    }

    /// Extracts one sample of a batch.
    pub fn batch_item(&self, n: usize) -> Tensor {
        let s = self.shape;
        let per = s.c * s.plane();
        Tensor::from_vec(Shape::new(1, s.c, s.h, s.w), self.data[n * per..(n + 1) * per].to_vec())
    }

    /// Stacks single-sample tensors of identical shape along the batch axis.
    pub fn stack(items: &[Tensor]) -> Tensor {
        assert!(!items.is_empty(), "cannot stack zero tensors");
        let s = items[0].shape;
        let mut data = Vec::with_capacity(s.len() * items.len());
        for t in items {
            assert_eq!(t.shape, s, "stacked tensors must share a shape");
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(Shape::new(s.n * items.len(), s.c, s.h, s.w), data)
    }
}

/// Output spatial size of a `k x k` convolution with padding `k / 2`.
pub const fn conv_out_size(size: usize, k: usize, stride: usize) -> usize {
    (size + 2 * (k / 2) - k) / stride + 1
}

/// Output positions `o` whose input coordinate `o * stride + t - pad` lies in `0..size`.
fn valid_range(out: usize, size: usize, stride: usize, t: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(t).div_ceil(stride);
    let hi = if size + pad > t { (size + pad - t).div_ceil(stride).min(out) } else { 0 };
    (lo, hi.max(lo))
}

/// Geometry shared by the convolution kernels.
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    xr: Vec<(usize, usize)>,
    yr: Vec<(usize, usize)>,
}

impl ConvGeom {
    fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, oh: usize, ow: usize) -> Self {
        let pad = k / 2;
        let xr = (0..k).map(|t| valid_range(ow, w, stride, t, pad)).collect();
        let yr = (0..k).map(|t| valid_range(oh, h, stride, t, pad)).collect();
        Self { cin, h, w, k, pad, stride, oh, ow, xr, yr }
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds one image `(cin, h, w)` into a `(cin*k*k, oh*ow)` patch matrix.
    fn im2col(&self, src: &[f64], cols: &mut [f64]) {
        cols.fill(0.0);
        let p = self.cols();
        for ci in 0..self.cin {
            let plane = &src[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                let (oy0, oy1) = self.yr[ky];
                for kx in 0..self.k {
                    let (ox0, ox1) = self.xr[kx];
                    let r = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[r * p..(r + 1) * p];
                    for oy in oy0..oy1 {
                        let iy = oy * self.stride + ky - self.pad;
                        let row = &plane[iy * self.w..(iy + 1) * self.w];
                        let ix0 = ox0 * self.stride + kx - self.pad;
                        let d = &mut dst[oy * self.ow + ox0..oy * self.ow + ox1];
                        for (d, s) in d.iter_mut().zip(row[ix0..].iter().step_by(self.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters patch gradients back onto the image.
    fn col2im(&self, cols: &[f64], dst: &mut [f64]) {
        let p = self.cols();
        for ci in 0..self.cin {
            let plane = &mut dst[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                let (oy0, oy1) = self.yr[ky];
                for kx in 0..self.k {
                    let (ox0, ox1) = self.xr[kx];
                    let r = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[r * p..(r + 1) * p];
                    for oy in oy0..oy1 {
                        let iy = oy * self.stride + ky - self.pad;
                        let row = &mut plane[iy * self.w..(iy + 1) * self.w];
                        let ix0 = ox0 * self.stride + kx - self.pad;
                        let s = &src[oy * self.ow + ox0..oy * self.ow + ox1];
                        for (d, s) in row[ix0..].iter_mut().step_by(self.stride).zip(s) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of size `m x k`
/// and `op(b)` of size `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides above address exactly the checked `m*k`, `k*n` and
    // `m*n` element ranges of the three slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 2-D cross-correlation with zero padding `k / 2`.
///
/// `weight` is `(cout, cin, k, k)`; `bias`, when present, has `cout` entries.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize) -> Tensor {
    let is = input.shape;
    let ws = weight.shape;
    assert_eq!(ws.c, is.c, "conv2d input channels do not match kernel");
    assert_eq!(ws.h, ws.w, "conv2d kernels must be square");
    let k = ws.h;
    let oh = conv_out_size(is.h, k, stride);
    let ow = conv_out_size(is.w, k, stride);
    let geom = ConvGeom::new(is.c, is.h, is.w, k, stride, oh, ow);
    let mut out = Tensor::zeros(Shape::new(is.n, ws.n, oh, ow));
    let direct = k == 1 && stride == 1;
    let mut cols = if direct { Vec::new() } else { vec![0.0; geom.rows() * geom.cols()] };
    let per_in = is.c * is.plane();
    let per_out = ws.n * oh * ow;
    for n in 0..is.n {
        let src = &input.data[n * per_in..(n + 1) * per_in];
        let patches: &[f64] = if direct {
            src
        } else {
            geom.im2col(src, &mut cols);
            &cols
        };
        let dst = &mut out.data[n * per_out..(n + 1) * per_out];
        if let Some(b) = bias {
            for (co, plane) in dst.chunks_mut(oh * ow).enumerate() {
                plane.fill(b.data[co]);
            }
        }
        gemm(ws.n, geom.rows(), geom.cols(), &weight.data, false, patches, false, 1.0, dst);
    }
    out
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    want_input: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let is = input.shape;
    let ws = weight.shape;
    let k = ws.h;
    let gs = grad_out.shape;
    let geom = ConvGeom::new(is.c, is.h, is.w, k, stride, gs.h, gs.w);
    let direct = k == 1 && stride == 1;
    let mut gin = want_input.then(|| Tensor::zeros(is));
    let mut gw = Tensor::zeros(ws);
    let mut gb = Tensor::zeros(Shape::new(1, ws.n, 1, 1));
    let mut cols = if direct { Vec::new() } else { vec![0.0; geom.rows() * geom.cols()] };
    let mut gcols = vec![0.0; if want_input && !direct { geom.rows() * geom.cols() } else { 0 }];
    let per_in = is.c * is.plane();
    let per_out = ws.n * gs.h * gs.w;
    for n in 0..is.n {
        let g = &grad_out.data[n * per_out..(n + 1) * per_out];
        for (co, plane) in g.chunks(gs.h * gs.w).enumerate() {
            gb.data[co] += plane.iter().sum::<f64>();
        }
        let src = &input.data[n * per_in..(n + 1) * per_in];
        let patches: &[f64] = if direct {
            src
        } else {
            geom.im2col(src, &mut cols);
            &cols
        };
        gemm(ws.n, geom.cols(), geom.rows(), g, false, patches, true, 1.0, &mut gw.data);
        if let Some(gin) = gin.as_mut() {
            let dst = &mut gin.data[n * per_in..(n + 1) * per_in];
            if direct {
                gemm(geom.rows(), ws.n, geom.cols(), &weight.data, true, g, false, 0.0, dst);
            } else {
                gemm(geom.rows(), ws.n, geom.cols(), &weight.data, true, g, false, 0.0, &mut gcols);
                geom.col2im(&gcols, dst);
            }
        }
    }
    (gin, gw, gb)
}

/// Source taps for one output coordinate of a half-pixel bilinear resize.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn axis_taps(input: usize, output: usize) -> Vec<Tap> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (libm::floor(src) as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap { lo, hi, frac: src - lo as f64 }
        })
        .collect()
}

/// Bilinear resize with half-pixel centers and edge clamping
/// (the `align_corners = false` convention).
pub fn resize_bilinear(input: &Tensor, oh: usize, ow: usize) -> Tensor {
    let s = input.shape;
    let ty = axis_taps(s.h, oh);
    let tx = axis_taps(s.w, ow);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, a) in ty.iter().enumerate() {
                for (ox, b) in tx.iter().enumerate() {
                    let top = src[a.lo * s.w + b.lo] * (1.0 - b.frac) + src[a.lo * s.w + b.hi] * b.frac;
                    let bot = src[a.hi * s.w + b.lo] * (1.0 - b.frac) + src[a.hi * s.w + b.hi] * b.frac;
                    dst[oy * ow + ox] = top * (1.0 - a.frac) + bot * a.frac;
                }
            }
        }
    }
    out
}

pub fn resize_bilinear_backward(grad_out: &Tensor, input_shape: Shape) -> Tensor {
    let s = input_shape;
    let gs = grad_out.shape;
    let ty = axis_taps(s.h, gs.h);
    let tx = axis_taps(s.w, gs.w);
    let mut gin = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad_out.plane(n, c);
            let dst = gin.plane_mut(n, c);
            for (oy, a) in ty.iter().enumerate() {
                for (ox, b) in tx.iter().enumerate() {
                    let gv = g[oy * gs.w + ox];
                    dst[a.lo * s.w + b.lo] += gv * (1.0 - a.frac) * (1.0 - b.frac);
                    dst[a.lo * s.w + b.hi] += gv * (1.0 - a.frac) * b.frac;
                    dst[a.hi * s.w + b.lo] += gv * a.frac * (1.0 - b.frac);
                    dst[a.hi * s.w + b.hi] += gv * a.frac * b.frac;
                }
            }
        }
    }
    gin
}

/// Channel-wise softmax at every spatial location, stabilized by the
/// per-location maximum.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let s = logits.shape;
    let p = s.plane();
    let mut out = Tensor::zeros(s);
    let mut buf = vec![0.0; s.c];
    for n in 0..s.n {
        let base = n * s.c * p;
        for j in 0..p {
            let mut max = f64::NEG_INFINITY;
            for c in 0..s.c {
                max = max.max(logits.data[base + c * p + j]);
            }
            let mut total = 0.0;
            for (c, b) in buf.iter_mut().enumerate() {
                *b = libm::exp(logits.data[base + c * p + j] - max);
                total += *b;
            }
            for (c, b) in buf.iter().enumerate() {
                out.data[base + c * p + j] = b / total;
            }
        }
    }
    out
}

/// Channel-wise log-softmax at every spatial location.
pub fn log_softmax_channels(logits: &Tensor) -> Tensor {
    let s = logits.shape;
    let p = s.plane();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        let base = n * s.c * p;
        for j in 0..p {
            let mut max = f64::NEG_INFINITY;
            for c in 0..s.c {
                max = max.max(logits.data[base + c * p + j]);
            }
            let mut total = 0.0;
            for c in 0..s.c {
                total += libm::exp(logits.data[base + c * p + j] - max);
            }
            let lse = max + libm::log(total);
            for c in 0..s.c {
                out.data[base + c * p + j] = logits.data[base + c * p + j] - lse;
            }
        }
    }
    out
}

pub fn softmax_channels_backward(probs: &Tensor, grad_out: &Tensor) -> Tensor {
    let s = probs.shape;
    let p = s.plane();
    let mut gin = Tensor::zeros(s);
    for n in 0..s.n {
        let base = n * s.c * p;
        for j in 0..p {
            let mut dot = 0.0;
            for c in 0..s.c {
                dot += probs.data[base + c * p + j] * grad_out.data[base + c * p + j];
            }
            for c in 0..s.c {
                let i = base + c * p + j;
                gin.data[i] = probs.data[i] * (grad_out.data[i] - dot);
            }
        }
    }
    gin
}

/// One-hot encoding of the per-location argmax over channels. Ties resolve
/// to the lowest channel index.
pub fn argmax_one_hot(logits: &Tensor) -> Tensor {
    let s = logits.shape;
    let p = s.plane();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        let base = n * s.c * p;
        for j in 0..p {
            let mut best = 0;
            for c in 1..s.c {
                if logits.data[base + c * p + j] > logits.data[base + best * p + j] {
                    best = c;
                }
            }
            out.data[base + best * p + j] = 1.0;
        }
    }
    out
}

/// Concatenates tensors with equal batch and spatial size along channels.
pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
    let first = parts[0].shape;
    let c: usize = parts.iter().map(|t| t.shape.c).sum();
    let mut out = Tensor::zeros(Shape::new(first.n, c, first.h, first.w));
    for n in 0..first.n {
        let mut offset = 0;
        for t in parts {
            assert_eq!((t.shape.n, t.shape.h, t.shape.w), (first.n, first.h, first.w));
            for ci in 0..t.shape.c {
                out.plane_mut(n, offset + ci).copy_from_slice(t.plane(n, ci));
            }
            offset += t.shape.c;
        }
    }
    out
}
