//! Dense row-major `f32` tensors and the `f64` linear kernels shared by the
//! forward pass, the gradient pass and the relevance rules.
//!
//! Every parameterized layer (dense, convolution, average pooling, residual
//! add) is lowered to a [`LinearMap`]: a bias-free linear operator that can be
//! applied with an arbitrary weight buffer and transposed. Relevance rules use
//! this to evaluate `W⁺·a⁺`, `W⁻·a⁻` and friends without per-layer special
//! cases; convolution goes through an im2col lowering so it shares the dense
//! path.

use serde::{Deserialize, Serialize};

use crate::error::{shape, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(&shape, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    /// Build from an `f64` buffer, rounding to `f32`.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&v| v as f32).collect())
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum with `f64` accumulation.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Index of the largest element (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }
}

fn shape_err(dims: &[usize], len: usize) -> crate::Error {
    shape(format!("shape {dims:?} needs {} values, got {len}", dims.iter().product::<usize>()))
}

/// `sign` with `sign(0) = 1`.
#[inline]
pub(crate) fn sign0(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// A bias-free linear operator `y = W x` whose weight buffer is supplied per call.
pub trait LinearMap: Sync {
    fn in_len(&self) -> usize;
    fn out_len(&self) -> usize;
    fn apply(&self, x: &[f64], w: &[f64]) -> Vec<f64>;
    /// `Wᵀ s`
    fn apply_t(&self, s: &[f64], w: &[f64]) -> Vec<f64>;
}

/// Dense map acting on the last axis of a `[rows, inp]` input with weights `[out, inp]`.
#[derive(Clone, Copy, Debug)]
pub struct DenseMap {
    pub rows: usize,
    pub inp: usize,
    pub out: usize,
}

impl LinearMap for DenseMap {
    fn in_len(&self) -> usize {
        self.rows * self.inp
    }
    fn out_len(&self) -> usize {
        self.rows * self.out
    }
    fn apply(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.out_len()];
        for r in 0..self.rows {
            let xr = &x[r * self.inp..(r + 1) * self.inp];
            for o in 0..self.out {
                let wr = &w[o * self.inp..(o + 1) * self.inp];
                y[r * self.out + o] = dot(xr, wr);
            }
        }
        y
    }
    fn apply_t(&self, s: &[f64], w: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.in_len()];
        for r in 0..self.rows {
            let gr = &mut g[r * self.inp..(r + 1) * self.inp];
            for o in 0..self.out {
                let so = s[r * self.out + o];
                if so == 0.0 {
                    continue;
                }
                let wr = &w[o * self.inp..(o + 1) * self.inp];
                for (gi, wi) in gr.iter_mut().zip(wr) {
                    *gi += so * wi;
                }
            }
        }
        g
    }
}

impl DenseMap {
    /// Gradient of `Σ s ⊙ (W x)` with respect to `W`.
    pub(crate) fn weight_grad(&self, x: &[f64], s: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.out * self.inp];
        for r in 0..self.rows {
            let xr = &x[r * self.inp..(r + 1) * self.inp];
            for o in 0..self.out {
                let so = s[r * self.out + o];
                if so == 0.0 {
                    continue;
                }
                for (gi, xi) in g[o * self.inp..(o + 1) * self.inp].iter_mut().zip(xr) {
                    *gi += so * xi;
                }
            }
        }
        g
    }
}

/// 2-D convolution `[c_in, h, w] -> [c_out, oh, ow]` with weights `[c_out, c_in, kh, kw]`.
#[derive(Clone, Copy, Debug)]
pub struct ConvMap {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvMap {
    pub fn out_hw(&self) -> (usize, usize) {
        let oh = (self.h + 2 * self.pad - self.kh) / self.stride + 1;
        let ow = (self.w + 2 * self.pad - self.kw) / self.stride + 1;
        (oh, ow)
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Calls `f(column index, input index)` for every in-bounds tap; padding taps are skipped.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (oh, ow) = self.out_hw();
        let pl = self.patch_len();
        for oy in 0..oh {
            for ox in 0..ow {
                let p = oy * ow + ox;
                for c in 0..self.c_in {
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let k = (c * self.kh + ky) * self.kw + kx;
                            let src = (c * self.h + iy as usize) * self.w + ix as usize;
                            f(p * pl + k, src);
                        }
                    }
                }
            }
        }
    }

    /// Gradient of `Σ s ⊙ (W x)` with respect to `W`.
    pub(crate) fn weight_grad(&self, x: &[f64], s: &[f64]) -> Vec<f64> {
        let (oh, ow) = self.out_hw();
        let np = oh * ow;
        let pl = self.patch_len();
        let cols = self.im2col(x);
        let mut g = vec![0.0; self.c_out * pl];
        for c in 0..self.c_out {
            let gr = &mut g[c * pl..(c + 1) * pl];
            for p in 0..np {
                let sc = s[c * np + p];
                if sc == 0.0 {
                    continue;
                }
                for (gi, xi) in gr.iter_mut().zip(&cols[p * pl..(p + 1) * pl]) {
                    *gi += sc * xi;
                }
            }
        }
        g
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (oh, ow) = self.out_hw();
        let mut cols = vec![0.0; oh * ow * self.patch_len()];
        self.for_each_tap(|dst, src| cols[dst] = x[src]);
        cols
    }
}

impl LinearMap for ConvMap {
    fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }
    fn out_len(&self) -> usize {
        let (oh, ow) = self.out_hw();
        self.c_out * oh * ow
    }
    fn apply(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (oh, ow) = self.out_hw();
        let np = oh * ow;
        let pl = self.patch_len();
        let cols = self.im2col(x);
        let mut y = vec![0.0; self.c_out * np];
        for c in 0..self.c_out {
            let wr = &w[c * pl..(c + 1) * pl];
            for p in 0..np {
                y[c * np + p] = dot(&cols[p * pl..(p + 1) * pl], wr);
            }
        }
        y
    }
    fn apply_t(&self, s: &[f64], w: &[f64]) -> Vec<f64> {
        let (oh, ow) = self.out_hw();
        let np = oh * ow;
        let pl = self.patch_len();
        let mut gcols = vec![0.0; np * pl];
        for c in 0..self.c_out {
            let wr = &w[c * pl..(c + 1) * pl];
            for p in 0..np {
                let sc = s[c * np + p];
                if sc == 0.0 {
                    continue;
                }
                for (g, wi) in gcols[p * pl..(p + 1) * pl].iter_mut().zip(wr) {
                    *g += sc * wi;
                }
            }
        }
        let mut g = vec![0.0; self.in_len()];
        self.for_each_tap(|col, src| g[src] += gcols[col]);
        g
    }
}

/// Average pooling as a linear map; the single weight is the per-tap factor `1/k²`.
#[derive(Clone, Copy, Debug)]
pub struct AvgPoolMap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
}

impl AvgPoolMap {
    pub fn out_hw(&self) -> (usize, usize) {
        ((self.h - self.k) / self.stride + 1, (self.w - self.k) / self.stride + 1)
    }

    pub fn weight(&self) -> [f64; 1] {
        [1.0 / (self.k * self.k) as f64]
    }

    fn windows(&self, mut f: impl FnMut(usize, usize)) {
        let (oh, ow) = self.out_hw();
        for c in 0..self.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = (c * oh + oy) * ow + ox;
                    for ky in 0..self.k {
                        for kx in 0..self.k {
                            let i = (c * self.h + oy * self.stride + ky) * self.w + ox * self.stride + kx;
                            f(o, i);
                        }
                    }
                }
            }
        }
    }
}

impl LinearMap for AvgPoolMap {
    fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }
    fn out_len(&self) -> usize {
        let (oh, ow) = self.out_hw();
        self.c * oh * ow
    }
    fn apply(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.out_len()];
        self.windows(|o, i| y[o] += w[0] * x[i]);
        y
    }
    fn apply_t(&self, s: &[f64], w: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.in_len()];
        self.windows(|o, i| g[i] += w[0] * s[o]);
        g
    }
}

/// Residual add of two equally shaped inputs, concatenated as `[a; b]`, with unit weights.
#[derive(Clone, Copy, Debug)]
pub struct AddMap {
    pub len: usize,
}

impl LinearMap for AddMap {
    fn in_len(&self) -> usize {
        2 * self.len
    }
    fn out_len(&self) -> usize {
        self.len
    }
    fn apply(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        (0..self.len).map(|i| w[0] * (x[i] + x[self.len + i])).collect()
    }
    fn apply_t(&self, s: &[f64], w: &[f64]) -> Vec<f64> {
        let mut g: Vec<f64> = s.iter().map(|v| w[0] * v).collect();
        g.extend_from_slice(&g.clone());
        g
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn positive(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

pub(crate) fn negative(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.min(0.0)).collect()
}

/// Row-wise softmax over the last axis of a `[rows, n]` buffer.
pub(crate) fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}
