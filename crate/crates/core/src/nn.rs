//! Layers with explicit forward caches and hand-written backward passes.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView2, ArrayView4, Axis, Ix1, Ix2, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Whether a tensor is updated by the optimizer or only carried along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    fn from_fn(shape: &[usize], f: impl FnMut(IxDyn) -> f64) -> Self {
        Self::new(ArrayD::from_shape_fn(IxDyn(shape), f))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Visitor over named tensors, used by optimizers and checkpoints.
pub type Visitor<'a> = dyn FnMut(&str, ParamKind, &mut Param) + 'a;

pub trait Layer {
    fn visit(&mut self, prefix: &str, f: &mut Visitor);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
        }
    }

    /// Applies the activation, returning the output and the pre-activation input.
    pub fn forward<D: ndarray::Dimension>(
        self,
        x: ndarray::Array<f64, D>,
    ) -> (ndarray::Array<f64, D>, ndarray::Array<f64, D>) {
        (x.mapv(|v| self.apply(v)), x)
    }

    pub fn backward<D: ndarray::Dimension>(
        self,
        pre: &ndarray::Array<f64, D>,
        mut dy: ndarray::Array<f64, D>,
    ) -> ndarray::Array<f64, D> {
        ndarray::Zip::from(&mut dy)
            .and(pre)
            .for_each(|g, &x| *g *= self.derivative(x));
        dy
    }
}

fn visit_one(prefix: &str, name: &str, kind: ParamKind, p: &mut Param, f: &mut Visitor) {
    f(&format!("{prefix}.{name}"), kind, p)
}

/// Batch, height and width of a map stored as `channels x (B * H * W)`.
///
/// Convolution, normalization and the heads all work on this planar layout:
/// each channel is one contiguous row with columns ordered by `(b, h, w)`.
pub type Extent = (usize, usize, usize);

/// `B x C x H x W` to planar `C x (B * H * W)`.
pub fn to_planar(x: ArrayView4<f64>) -> (Array2<f64>, Extent) {
    let (b, c, h, w) = x.dim();
    let planar = x
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, b * h * w))
        .expect("contiguous");
    (planar, (b, h, w))
}

/// Inverse of [`to_planar`].
pub fn from_planar(x: ArrayView2<f64>, ext: Extent) -> Array4<f64> {
    let (b, h, w) = ext;
    let c = x.nrows();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, b, h, w))
        .expect("column count matches extent")
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
}

/// 2-D convolution without bias, computed as im2col followed by a matrix product.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `out x in x k x k`
    pub weight: Param,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache {
    cols: Array2<f64>,
    in_ext: Extent,
}

impl ConvCache {
    pub fn in_ext(&self) -> Extent {
        self.in_ext
    }
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        // He initialization for ReLU networks
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        Self {
            weight: Param::from_fn(&[c_out, c_in, k, k], |_| normal.sample(rng)),
            stride,
            pad,
        }
    }

    fn dims(&self) -> (usize, usize, usize) {
        let s = self.weight.value.shape();
        (s[0], s[1], s[2])
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.dims().2;
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let (co, ci, k) = self.dims();
        self.weight
            .value
            .view()
            .into_shape_with_order((co, ci * k * k))
            .expect("contiguous weight")
    }

    /// Calls `f(row, plane_offset, out_offset, ih, ow_iw_pairs)` for every
    /// valid input row feeding an output row, shared by im2col and col2im.
    fn for_each_tap(&self, c: usize, ext: Extent, mut f: impl FnMut(usize, usize, usize, usize, usize, isize)) {
        let (b, h, w) = ext;
        let k = self.dims().2;
        let (ho, wo) = self.out_size(h, w);
        for ch in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ch * k + ki) * k + kj;
                    for bi in 0..b {
                        let plane = (ch * b + bi) * h * w;
                        for oh in 0..ho {
                            let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let shift = kj as isize - self.pad as isize;
                            f(row, plane + ih as usize * w, (bi * ho + oh) * wo, wo, w, shift);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: ArrayView2<f64>, ext: Extent) -> Array2<f64> {
        let (b, h, w) = ext;
        let (ci, k) = (x.nrows(), self.dims().2);
        let (ho, wo) = self.out_size(h, w);
        let n = b * ho * wo;
        let stride = self.stride as isize;
        let mut cols = Array2::zeros((ci * k * k, n));
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let cs = cols.as_slice_mut().expect("fresh array");
        self.for_each_tap(ci, ext, |row, src, dst, wo, w, shift| {
            let src = &xs[src..src + w];
            let dst = &mut cs[row * n + dst..row * n + dst + wo];
            for (ow, d) in dst.iter_mut().enumerate() {
                let iw = ow as isize * stride + shift;
                if iw >= 0 && iw < w as isize {
                    *d = src[iw as usize];
                }
            }
        });
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, ci: usize, ext: Extent) -> Array2<f64> {
        let (b, h, w) = ext;
        let (ho, wo) = self.out_size(h, w);
        let n = b * ho * wo;
        let stride = self.stride as isize;
        let mut x = Array2::zeros((ci, b * h * w));
        let xs = x.as_slice_mut().expect("fresh array");
        let cs = cols.as_slice().expect("standard layout");
        self.for_each_tap(ci, ext, |row, dst, src, wo, w, shift| {
            let src = &cs[row * n + src..row * n + src + wo];
            let dst = &mut xs[dst..dst + w];
            for (ow, v) in src.iter().enumerate() {
                let iw = ow as isize * stride + shift;
                if iw >= 0 && iw < w as isize {
                    dst[iw as usize] += v;
                }
            }
        });
        x
    }

    /// Convolves a planar `C_in x (B * H * W)` map; returns the planar output and its extent.
    pub fn forward(&self, x: ArrayView2<f64>, ext: Extent) -> (Array2<f64>, Extent, ConvCache) {
        let (b, h, w) = ext;
        let (ho, wo) = self.out_size(h, w);
        let cols = self.im2col(x, ext);
        let y = self.weight_matrix().dot(&cols);
        (y, (b, ho, wo), ConvCache { cols, in_ext: ext })
    }

    pub fn backward(&mut self, cache: &ConvCache, dy: ArrayView2<f64>) -> Array2<f64> {
        let dw = dy.dot(&cache.cols.t());
        let mut grad = self
            .weight
            .grad
            .view_mut()
            .into_shape_with_order(dw.raw_dim())
            .expect("contiguous grad");
        grad += &dw;
        let dcols = self.weight_matrix().t().dot(&dy);
        self.col2im(&dcols, self.dims().1, cache.in_ext)
    }
}

impl Layer for Conv2d {
    fn visit(&mut self, prefix: &str, f: &mut Visitor) {
        visit_one(prefix, "weight", ParamKind::Trainable, &mut self.weight, f);
    }
}

/// Batch normalization of a `channels x samples` matrix, one row per channel.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
}

pub struct BnCache {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(ArrayD::ones(IxDyn(&[channels]))),
            beta: Param::new(ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: Param::new(ArrayD::zeros(IxDyn(&[channels]))),
            running_var: Param::new(ArrayD::ones(IxDyn(&[channels]))),
        }
    }

    /// Returns the output and, in training mode, the cache for the backward pass.
    pub fn forward(&mut self, x: ArrayView2<f64>, mode: Mode) -> (Array2<f64>, Option<BnCache>) {
        let (c, n) = x.dim();
        let x = x.as_standard_layout();
        let mut xhat = Array2::zeros((c, n));
        let mut y = Array2::zeros((c, n));
        let mut inv_std = vec![0.0; c];
        for k in 0..c {
            let row = x.row(k);
            let row = row.as_slice().expect("standard layout");
            let (mean, istd) = match mode {
                Mode::Train => {
                    let nf = n as f64;
                    let mean = row.iter().sum::<f64>() / nf;
                    let ss: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum();
                    let unbiased = if n > 1 { ss / (nf - 1.0) } else { ss / nf };
                    let rm = &mut self.running_mean.value[k];
                    *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean;
                    let rv = &mut self.running_var.value[k];
                    *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * unbiased;
                    (mean, 1.0 / (ss / nf + BN_EPS).sqrt())
                }
                Mode::Eval => (
                    self.running_mean.value[k],
                    1.0 / (self.running_var.value[k] + BN_EPS).sqrt(),
                ),
            };
            inv_std[k] = istd;
            let (g, bt) = (self.gamma.value[k], self.beta.value[k]);
            let mut xr = xhat.row_mut(k);
            let mut yr = y.row_mut(k);
            let xs = xr.as_slice_mut().expect("fresh array");
            let ys = yr.as_slice_mut().expect("fresh array");
            for ((xh, yo), &v) in xs.iter_mut().zip(ys.iter_mut()).zip(row) {
                *xh = (v - mean) * istd;
                *yo = g * *xh + bt;
            }
        }
        let cache = (mode == Mode::Train).then_some(BnCache { xhat, inv_std });
        (y, cache)
    }

    pub fn backward(&mut self, cache: &BnCache, dy: ArrayView2<f64>) -> Array2<f64> {
        let (c, n) = dy.dim();
        let nf = n as f64;
        let dy = dy.as_standard_layout();
        let mut dx = Array2::zeros((c, n));
        for k in 0..c {
            let d = dy.row(k);
            let d = d.as_slice().expect("standard layout");
            let xh = cache.xhat.row(k);
            let xh = xh.as_slice().expect("standard layout");
            let dbeta: f64 = d.iter().sum();
            let dgamma: f64 = d.iter().zip(xh).map(|(a, b)| a * b).sum();
            self.beta.grad[k] += dbeta;
            self.gamma.grad[k] += dgamma;
            let scale = self.gamma.value[k] * cache.inv_std[k] / nf;
            let mut out = dx.row_mut(k);
            for ((o, &g), &h) in out.iter_mut().zip(d).zip(xh) {
                *o = scale * (nf * g - dbeta - h * dgamma);
            }
        }
        dx
    }
}

impl Layer for BatchNorm {
    fn visit(&mut self, prefix: &str, f: &mut Visitor) {
        visit_one(prefix, "gamma", ParamKind::Trainable, &mut self.gamma, f);
        visit_one(prefix, "beta", ParamKind::Trainable, &mut self.beta, f);
        visit_one(prefix, "running_mean", ParamKind::Buffer, &mut self.running_mean, f);
        visit_one(prefix, "running_var", ParamKind::Buffer, &mut self.running_var, f);
    }
}

/// Fully connected layer on column samples: `y = W x + b` with `x` of shape `in x N`.
#[derive(Debug, Clone)]
pub struct Linear {
    /// `out x in`
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_out: usize) -> Self {
        let bound = (1.0 / d_in as f64).sqrt();
        let mut draw = |_| rng.random_range(-bound..bound);
        let weight = Param::from_fn(&[d_out, d_in], &mut draw);
        let bias = Param::from_fn(&[d_out], &mut draw);
        Self { weight, bias }
    }

    pub fn from_weights(weight: Array2<f64>, bias: Array1<f64>) -> Self {
        Self {
            weight: Param::new(weight.into_dyn()),
            bias: Param::new(bias.into_dyn()),
        }
    }

    /// `(in, out)`
    pub fn dims(&self) -> (usize, usize) {
        let s = self.weight.value.shape();
        (s[1], s[0])
    }

    fn w(&self) -> ArrayView2<'_, f64> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("rank 2")
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let b = self.bias.value.view().into_dimensionality::<Ix1>().expect("rank 1");
        let mut y = self.w().dot(&x);
        for (mut row, &bk) in y.rows_mut().into_iter().zip(b.iter()) {
            row += bk;
        }
        y
    }

    pub fn backward(&mut self, x: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
        self.weight.grad += &dy.dot(&x.t()).into_dyn();
        self.bias.grad += &dy.sum_axis(Axis(1)).into_dyn();
        self.w().t().dot(&dy)
    }
}

impl Layer for Linear {
    fn visit(&mut self, prefix: &str, f: &mut Visitor) {
        visit_one(prefix, "weight", ParamKind::Trainable, &mut self.weight, f);
        visit_one(prefix, "bias", ParamKind::Trainable, &mut self.bias, f);
    }
}
