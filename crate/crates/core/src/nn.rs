//! Layers with explicit forward and backward passes.
//!
//! Every layer keeps its parameters and their accumulated gradients.
//! Forward functions are pure; backward functions take whatever the
//! forward pass saved, accumulate parameter gradients and return the
//! gradient with respect to the layer input.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{gemm, Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const PIXEL_NORM_EPS: f64 = 1e-8;

/// A learnable tensor and its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Named parameter traversal. Visit order is stable and defines the
/// checkpoint layout and optimizer state layout.
pub trait Module<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.value.numel());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn he_normal<T: Real, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
    let std = gain * (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::lit(normal.sample(rng))).collect())
}

/// Fully connected layer, `y = x Wᵀ + b`, weight `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng>(rng: &mut R, inp: usize, out: usize, gain: f64) -> Self {
        Linear {
            weight: Param::new(he_normal(rng, &[out, inp], inp, gain)),
            bias: Param::new(Tensor::zeros(&[out])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.dim(1)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, inp) = x.dims2();
        assert_eq!(inp, self.in_dim(), "linear input width");
        let out = self.out_dim();
        let mut y = Tensor::zeros(&[n, out]);
        for i in 0..n {
            y.item_mut(i).copy_from_slice(self.bias.value.data());
        }
        gemm(false, true, n, out, inp, T::one(), x.data(), self.weight.value.data(), T::one(), y.data_mut());
        y
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (n, inp) = x.dims2();
        let out = self.out_dim();
        gemm(true, false, out, inp, n, T::one(), dy.data(), x.data(), T::one(), self.weight.grad.data_mut());
        let db = self.bias.grad.data_mut();
        for i in 0..n {
            for (g, d) in db.iter_mut().zip(dy.item(i)) {
                *g = *g + *d;
            }
        }
        let mut dx = Tensor::zeros(&[n, inp]);
        gemm(false, false, n, inp, out, T::one(), dy.data(), self.weight.value.data(), T::zero(), dx.data_mut());
        dx
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Square-kernel 2-D convolution via im2col. Weight `[cout, cin·k·k]`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng>(
        rng: &mut R,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gain: f64,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        Conv2d {
            weight: Param::new(he_normal(rng, &[cout, fan_in], fan_in, gain)),
            bias: Param::new(Tensor::zeros(&[cout])),
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    pub fn zero_init(mut self) -> Self {
        self.weight.value.fill(T::zero());
        self
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad` lies inside `[0, w)`.
    fn valid_cols(&self, kx: usize, w: usize, wo: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        let hi = if w + p > kx { ((w + p - kx - 1) / s + 1).min(wo) } else { 0 };
        (lo.min(hi), hi)
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, col: &mut [T]) {
        let (ho, wo) = self.out_size(h, w);
        let k = self.kernel;
        let (s, p) = (self.stride, self.pad as isize);
        for c in 0..self.cin {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                    let (lo, hi) = self.valid_cols(kx, w, wo);
                    for oy in 0..ho {
                        let iy = (oy * s) as isize + ky as isize - p;
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            drow.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        drow[..lo].fill(T::zero());
                        drow[hi..].fill(T::zero());
                        if lo == hi {
                            continue;
                        }
                        let ix0 = lo * s + kx - self.pad;
                        if s == 1 {
                            drow[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                        } else {
                            for (j, d) in drow[lo..hi].iter_mut().enumerate() {
                                *d = src[ix0 + j * s];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[T], h: usize, w: usize, dx: &mut [T]) {
        let (ho, wo) = self.out_size(h, w);
        let k = self.kernel;
        let (s, p) = (self.stride, self.pad as isize);
        for c in 0..self.cin {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * ho * wo..(row + 1) * ho * wo];
                    let (lo, hi) = self.valid_cols(kx, w, wo);
                    if lo == hi {
                        continue;
                    }
                    let ix0 = lo * s + kx - self.pad;
                    for oy in 0..ho {
                        let iy = (oy * s) as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let srow = &src[oy * wo + lo..oy * wo + hi];
                        if s == 1 {
                            for (d, v) in dst[ix0..ix0 + hi - lo].iter_mut().zip(srow) {
                                *d = *d + *v;
                            }
                        } else {
                            for (j, v) in srow.iter().enumerate() {
                                dst[ix0 + j * s] = dst[ix0 + j * s] + *v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.cin, "conv input channels");
        let (ho, wo) = self.out_size(h, w);
        let kk = self.cin * self.kernel * self.kernel;
        let mut col = vec![T::zero(); kk * ho * wo];
        let mut y = Tensor::zeros(&[n, self.cout, ho, wo]);
        for i in 0..n {
            self.im2col(x.item(i), h, w, &mut col);
            let yi = y.item_mut(i);
            for (oc, b) in self.bias.value.data().iter().enumerate() {
                yi[oc * ho * wo..(oc + 1) * ho * wo].fill(*b);
            }
            gemm(false, false, self.cout, ho * wo, kk, T::one(), self.weight.value.data(), &col, T::one(), yi);
        }
        y
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (n, _, h, w) = x.dims4();
        let (ho, wo) = self.out_size(h, w);
        let kk = self.cin * self.kernel * self.kernel;
        let mut col = vec![T::zero(); kk * ho * wo];
        let mut dcol = vec![T::zero(); kk * ho * wo];
        let mut dx = Tensor::zeros(x.shape());
        for i in 0..n {
            let dyi = dy.item(i);
            self.im2col(x.item(i), h, w, &mut col);
            gemm(false, true, self.cout, kk, ho * wo, T::one(), dyi, &col, T::one(), self.weight.grad.data_mut());
            for (oc, g) in self.bias.grad.data_mut().iter_mut().enumerate() {
                *g = *g + dyi[oc * ho * wo..(oc + 1) * ho * wo].iter().copied().sum();
            }
            gemm(true, false, kk, ho * wo, self.cout, T::one(), self.weight.value.data(), dyi, T::zero(), &mut dcol);
            self.col2im(&dcol, h, w, dx.item_mut(i));
        }
        dx
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Nearest-neighbour ×2 upsampling of `[N, C, H, W]`.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let mut y = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let src = x.data();
    let dst = y.data_mut();
    for p in 0..n * c {
        for iy in 0..h {
            let srow = &src[(p * h + iy) * w..(p * h + iy + 1) * w];
            for dy in 0..2 {
                let base = (p * 2 * h + 2 * iy + dy) * 2 * w;
                for (ix, v) in srow.iter().enumerate() {
                    dst[base + 2 * ix] = *v;
                    dst[base + 2 * ix + 1] = *v;
                }
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h2, w2) = dy.dims4();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let src = dy.data();
    let dst = dx.data_mut();
    for p in 0..n * c {
        for iy in 0..h {
            for ix in 0..w {
                let r0 = (p * h2 + 2 * iy) * w2 + 2 * ix;
                let r1 = r0 + w2;
                dst[(p * h + iy) * w + ix] = src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1];
            }
        }
    }
    dx
}

/// Per-pixel normalization across channels: `y = x / sqrt(mean_c(x²) + ε)`.
/// Returns the output and the per-pixel inverse norms.
pub fn pixel_norm<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let eps = T::lit(PIXEL_NORM_EPS);
    let cf = T::lit(c as f64);
    let mut y = Tensor::zeros(x.shape());
    let mut inv = vec![T::zero(); n * hw];
    for i in 0..n {
        let xi = x.item(i);
        let ms = &mut inv[i * hw..(i + 1) * hw];
        for ch in 0..c {
            for (m, v) in ms.iter_mut().zip(&xi[ch * hw..(ch + 1) * hw]) {
                *m = *m + *v * *v;
            }
        }
        for m in ms.iter_mut() {
            *m = T::one() / (*m / cf + eps).sqrt();
        }
        let yi = y.item_mut(i);
        for ch in 0..c {
            for ((o, v), r) in yi[ch * hw..(ch + 1) * hw].iter_mut().zip(&xi[ch * hw..(ch + 1) * hw]).zip(ms.iter()) {
                *o = *v * *r;
            }
        }
    }
    (y, inv)
}

/// Backward of [`pixel_norm`] given its output and inverse norms:
/// `dx = r (dy − y · mean_c(y·dy))`.
pub fn pixel_norm_backward<T: Real>(y: &Tensor<T>, inv: &[T], dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = y.dims4();
    let hw = h * w;
    let cf = T::lit(c as f64);
    let mut dx = Tensor::zeros(y.shape());
    let mut dots = vec![T::zero(); hw];
    for i in 0..n {
        let (yi, gi) = (y.item(i), dy.item(i));
        dots.fill(T::zero());
        for ch in 0..c {
            for ((d, a), b) in dots.iter_mut().zip(&yi[ch * hw..(ch + 1) * hw]).zip(&gi[ch * hw..(ch + 1) * hw]) {
                *d = *d + *a * *b;
            }
        }
        let r = &inv[i * hw..(i + 1) * hw];
        let dxi = dx.item_mut(i);
        for ch in 0..c {
            let s = ch * hw..(ch + 1) * hw;
            for p in 0..hw {
                let (yy, gg) = (yi[s.start + p], gi[s.start + p]);
                dxi[s.start + p] = r[p] * (gg - yy * dots[p] / cf);
            }
        }
    }
    dx
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let a = T::lit(LEAKY_SLOPE);
    x.map(|v| if v > T::zero() { v } else { v * a })
}

/// Backward of [`leaky_relu`]; `y` may be either the input or the output
/// (they share signs).
pub fn leaky_relu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let a = T::lit(LEAKY_SLOPE);
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(v, g)| if *v > T::zero() { *g } else { *g * a })
        .collect();
    Tensor::from_vec(y.shape(), data)
}

pub fn tanh<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

pub fn tanh_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(v, g)| *g * (T::one() - *v * *v))
        .collect();
    Tensor::from_vec(y.shape(), data)
}

/// Hard saturation to `[-1, 1]`.
pub fn saturate<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(-T::one()).min(T::one()))
}

pub fn saturate_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(v, g)| if v.abs() <= T::one() { *g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Sum over the spatial dimensions: `[N, C, H, W] -> [N, C]`.
pub fn sum_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let data = (0..n * c)
        .map(|p| x.data()[p * hw..(p + 1) * hw].iter().copied().sum())
        .collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn sum_pool_backward<T: Real>(dy: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (n, c) = dy.dims2();
    let hw = h * w;
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for (p, g) in dy.data().iter().enumerate() {
        dx.data_mut()[p * hw..(p + 1) * hw].fill(*g);
    }
    dx
}

/// Squeeze-excite channel attention: `y = x · σ(W₂ relu(W₁ mean_hw(x)))`.
/// Preserves the input shape.
#[derive(Debug, Clone)]
pub struct ChannelAttention<T> {
    pub squeeze: Linear<T>,
    pub excite: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    pooled: Tensor<T>,
    hidden_pre: Tensor<T>,
    hidden: Tensor<T>,
    gate: Tensor<T>,
}

impl<T: Real> ChannelAttention<T> {
    pub fn new<R: Rng>(rng: &mut R, channels: usize) -> Self {
        let hidden = (channels / 8).max(4);
        ChannelAttention {
            squeeze: Linear::new(rng, channels, hidden, 1.0),
            excite: Linear::new(rng, hidden, channels, 1.0),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, AttentionCache<T>) {
        let (n, c, h, w) = x.dims4();
        let hw = T::lit((h * w) as f64);
        let pooled = sum_pool(x).map(|v| v / hw);
        let hidden_pre = self.squeeze.forward(&pooled);
        let hidden = hidden_pre.map(|v| v.max(T::zero()));
        let gate = self.excite.forward(&hidden).map(|v| T::one() / (T::one() + (-v).exp()));
        let mut y = x.clone();
        let plane = h * w;
        for i in 0..n {
            let g = gate.item(i).to_vec();
            let yi = y.item_mut(i);
            for ch in 0..c {
                for v in &mut yi[ch * plane..(ch + 1) * plane] {
                    *v = *v * g[ch];
                }
            }
        }
        (
            y,
            AttentionCache {
                pooled,
                hidden_pre,
                hidden,
                gate,
            },
        )
    }

    pub fn backward(&mut self, x: &Tensor<T>, cache: &AttentionCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        let plane = h * w;
        let mut dx = Tensor::zeros(x.shape());
        let mut dgate_pre = Tensor::zeros(&[n, c]);
        for i in 0..n {
            let (xi, gi, g) = (x.item(i), dy.item(i), cache.gate.item(i));
            let dxi = dx.item_mut(i);
            for ch in 0..c {
                let r = ch * plane..(ch + 1) * plane;
                let mut dg = T::zero();
                for p in r.clone() {
                    dxi[p] = gi[p] * g[ch];
                    dg = dg + gi[p] * xi[p];
                }
                dgate_pre.item_mut(i)[ch] = dg * g[ch] * (T::one() - g[ch]);
            }
        }
        let dhidden = self.excite.backward(&cache.hidden, &dgate_pre);
        let dhidden_pre = Tensor::from_vec(
            dhidden.shape(),
            dhidden
                .data()
                .iter()
                .zip(cache.hidden_pre.data())
                .map(|(g, v)| if *v > T::zero() { *g } else { T::zero() })
                .collect(),
        );
        let dpooled = self.squeeze.backward(&cache.pooled, &dhidden_pre);
        let inv = T::one() / T::lit(plane as f64);
        for i in 0..n {
            let dp = dpooled.item(i).to_vec();
            let dxi = dx.item_mut(i);
            for ch in 0..c {
                let add = dp[ch] * inv;
                for v in &mut dxi[ch * plane..(ch + 1) * plane] {
                    *v = *v + add;
                }
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for ChannelAttention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.squeeze.visit(&join(prefix, "squeeze"), f);
        self.excite.visit(&join(prefix, "excite"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.squeeze.visit_mut(&join(prefix, "squeeze"), f);
        self.excite.visit_mut(&join(prefix, "excite"), f);
    }
}

/// Adaptive-moment optimizer over the parameters of one or more modules.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Applies one update to every parameter of `modules`, in visit order.
    pub fn step(&mut self, modules: &mut [&mut dyn Module<T>]) {
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.step));
        let c2 = T::lit(1.0 - self.beta2.powi(self.step));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        let mut idx = 0;
        let moments = &mut self.moments;
        for m in modules.iter_mut() {
            m.visit_mut("", &mut |_, p| {
                if moments.len() <= idx {
                    moments.push((vec![T::zero(); p.value.numel()], vec![T::zero(); p.value.numel()]));
                }
                let (mm, vv) = &mut moments[idx];
                for (((w, g), m1), m2) in p
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(p.grad.data())
                    .zip(mm.iter_mut())
                    .zip(vv.iter_mut())
                {
                    *m1 = b1 * *m1 + (T::one() - b1) * *g;
                    *m2 = b2 * *m2 + (T::one() - b2) * *g * *g;
                    let mhat = *m1 / c1;
                    let vhat = *m2 / c2;
                    *w = *w - lr * mhat / (vhat.sqrt() + eps);
                }
                idx += 1;
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central finite difference of `sum(w ⊙ f(x))` with respect to `x`.
    fn fd_input(
        x: &Tensor<f64>,
        weights: &Tensor<f64>,
        f: &dyn Fn(&Tensor<f64>) -> Tensor<f64>,
    ) -> Vec<f64> {
        let h = 1e-6;
        (0..x.numel())
            .map(|i| {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                let fp: f64 = f(&xp).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
                let fm: f64 = f(&xm).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "index {i}: {x} vs {y}");
        }
    }

    #[test]
    fn conv_forward_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stride, pad, size) in [(2, 1, 5), (2, 1, 4), (1, 1, 4), (1, 0, 5), (2, 2, 6), (1, 2, 3)] {
            let conv = Conv2d::<f64>::new(&mut rng, 2, 3, 3, stride, pad, 1.0);
            let x = rand_tensor(&mut rng, &[1, 2, size, size]);
            let y = conv.forward(&x);
            let (ho, wo) = conv.out_size(size, size);
            assert_eq!(y.shape(), &[1, 3, ho, wo]);
            for oc in 0..3 {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = conv.bias.value.data()[oc];
                        for ic in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if (0..size as isize).contains(&iy) && (0..size as isize).contains(&ix) {
                                        let wv = conv.weight.value.data()[oc * 18 + ic * 9 + ky * 3 + kx];
                                        s += wv * x.data()[ic * size * size + iy as usize * size + ix as usize];
                                    }
                                }
                            }
                        }
                        assert!((y.data()[(oc * ho + oy) * wo + ox] - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_input_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (stride, pad, size) in [(1, 1, 4), (2, 1, 5), (2, 1, 4), (1, 2, 3)] {
            let mut conv = Conv2d::<f64>::new(&mut rng, 2, 3, 3, stride, pad, 1.0);
            let x = rand_tensor(&mut rng, &[2, 2, size, size]);
            let (ho, wo) = conv.out_size(size, size);
            let wts = rand_tensor(&mut rng, &[2, 3, ho, wo]);
            let dx = conv.backward(&x, &wts);
            let c2 = conv.clone();
            let fd = fd_input(&x, &wts, &|x| c2.forward(x));
            assert_close(dx.data(), &fd, 1e-6);
        }
    }

    #[test]
    fn pixel_norm_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 3, 2, 2]);
        let wts = rand_tensor(&mut rng, &[2, 3, 2, 2]);
        let (y, inv) = pixel_norm(&x);
        let dx = pixel_norm_backward(&y, &inv, &wts);
        let fd = fd_input(&x, &wts, &|x| pixel_norm(x).0);
        assert_close(dx.data(), &fd, 1e-6);
    }

    #[test]
    fn attention_preserves_shape_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut att = ChannelAttention::<f64>::new(&mut rng, 8);
        let x = rand_tensor(&mut rng, &[2, 8, 3, 3]);
        let (y, cache) = att.forward(&x);
        assert_eq!(y.shape(), x.shape());
        let wts = rand_tensor(&mut rng, &[2, 8, 3, 3]);
        let dx = att.backward(&x, &cache, &wts);
        let a2 = att.clone();
        let fd = fd_input(&x, &wts, &|x| a2.forward(x).0);
        assert_close(dx.data(), &fd, 1e-6);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[1, 2, 3, 3]);
        let g = rand_tensor(&mut rng, &[1, 2, 6, 6]);
        let lhs: f64 = upsample2(&x).data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(upsample2_backward(&g).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn linear_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut lin = Linear::<f64>::new(&mut rng, 4, 3, 1.0);
        let x = rand_tensor(&mut rng, &[2, 4]);
        let wts = rand_tensor(&mut rng, &[2, 3]);
        let dx = lin.backward(&x, &wts);
        let l2 = lin.clone();
        let fd = fd_input(&x, &wts, &|x| l2.forward(x));
        assert_close(dx.data(), &fd, 1e-6);
        // weight gradient: d/dW sum(wts ⊙ (x Wᵀ)) = wtsᵀ x
        for o in 0..3 {
            for i in 0..4 {
                let want: f64 = (0..2).map(|n| wts.data()[n * 3 + o] * x.data()[n * 4 + i]).sum();
                assert!((lin.weight.grad.data()[o * 4 + i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut lin = Linear::<f64> {
            weight: Param::new(Tensor::from_vec(&[1, 1], vec![1.0])),
            bias: Param::new(Tensor::zeros(&[1])),
        };
        lin.weight.grad.data_mut()[0] = 2.0;
        let mut opt = Adam::new(0.1, 0.0, 0.9);
        opt.step(&mut [&mut lin]);
        assert!((lin.weight.value.data()[0] - 0.9).abs() < 1e-6);
        assert_eq!(lin.bias.value.data()[0], 0.0);
    }
}
