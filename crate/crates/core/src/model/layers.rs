//! Layer primitives with hand-written backward passes.
//!
//! Every forward optionally returns a cache; the matching backward consumes
//! it, accumulates parameter gradients into a same-shaped gradient layer and
//! returns the input gradient when asked.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const NORM_EPS: f64 = 1e-5;

/// Deterministic flat list of named parameter tensors.
pub trait Parameters<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    /// `(out_channels, in_channels, k, k)`.
    pub weight: Array4<T>,
    pub bias: Array1<T>,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache<T> {
    cols: Array3<T>,
    in_dim: (usize, usize, usize, usize),
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal weights, zero bias.
    pub fn init<R: Rng>(rng: &mut R, in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize) -> Self {
        let fan_in = (in_ch * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let weight = Array4::from_shape_fn((out_ch, in_ch, k, k), |_| T::lit(normal.sample(rng)));
        Self { weight, bias: Array1::zeros(out_ch), stride, pad }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array4::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        if h + 2 * self.pad < k || w + 2 * self.pad < k {
            return Err(Error::InvalidShape(format!("{h}x{w} input smaller than {k}x{k} kernel")));
        }
        Ok(((h + 2 * self.pad - k) / self.stride + 1, (w + 2 * self.pad - k) / self.stride + 1))
    }

    pub fn forward(&self, x: &Array4<T>, keep_cache: bool) -> Result<(Array4<T>, Option<ConvCache<T>>)> {
        let (n, c, h, w) = x.dim();
        if c != self.in_channels() {
            return Err(Error::shape(&[n, self.in_channels(), h, w], x.shape()));
        }
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let (ho, wo) = self.out_size(h, w)?;
        let k = self.kernel();
        let ckk = c * k * k;
        let o = self.out_channels();
        let w2 = self.weight.view().into_shape_with_order((o, ckk)).expect("contiguous weight");
        let mut out = Array4::<T>::zeros((n, o, ho, wo));
        let mut cols = Array3::<T>::zeros((if keep_cache { n } else { 1 }, ckk, ho * wo));
        for b in 0..n {
            let slot = if keep_cache { b } else { 0 };
            let mut col = cols.index_axis_mut(Axis(0), slot);
            im2col(
                &xs[b * c * h * w..(b + 1) * c * h * w],
                (c, h, w),
                k,
                self.stride,
                self.pad,
                (ho, wo),
                col.as_slice_mut().expect("contiguous cols"),
            );
            let mut ob = out.index_axis_mut(Axis(0), b).into_shape_with_order((o, ho * wo)).expect("contiguous out");
            general_mat_mul(T::one(), &w2, &col, T::zero(), &mut ob);
            for (mut row, &bias) in ob.outer_iter_mut().zip(self.bias.iter()) {
                row.mapv_inplace(|v| v + bias);
            }
        }
        let cache = keep_cache.then_some(ConvCache { cols, in_dim: (n, c, h, w) });
        Ok((out, cache))
    }

    pub fn backward(
        &self,
        cache: &ConvCache<T>,
        dy: &Array4<T>,
        grad: &mut Conv2d<T>,
        need_input_grad: bool,
    ) -> Option<Array4<T>> {
        let (n, c, h, w) = cache.in_dim;
        let (_, o, ho, wo) = dy.dim();
        let k = self.kernel();
        let ckk = c * k * k;
        let dy = dy.as_standard_layout();
        let w2 = self.weight.view().into_shape_with_order((o, ckk)).expect("contiguous weight");
        let mut gw = grad.weight.view_mut().into_shape_with_order((o, ckk)).expect("contiguous grad");
        let mut dx = need_input_grad.then(|| Array4::<T>::zeros((n, c, h, w)));
        let mut dcols = Array2::<T>::zeros((ckk, ho * wo));
        for b in 0..n {
            let dyb = dy.index_axis(Axis(0), b).into_shape_with_order((o, ho * wo)).expect("contiguous dy");
            let col = cache.cols.index_axis(Axis(0), b);
            general_mat_mul(T::one(), &dyb, &col.t(), T::one(), &mut gw);
            for (g, row) in grad.bias.iter_mut().zip(dyb.outer_iter()) {
                *g += row.sum();
            }
            if let Some(dx) = dx.as_mut() {
                general_mat_mul(T::one(), &w2.t(), &dyb, T::zero(), &mut dcols);
                let mut dxb = dx.index_axis_mut(Axis(0), b);
                col2im(
                    dcols.as_slice().expect("contiguous"),
                    (c, h, w),
                    k,
                    self.stride,
                    self.pad,
                    (ho, wo),
                    dxb.as_slice_mut().expect("contiguous dx"),
                );
            }
        }
        dx
    }
}

impl<T: Scalar> Parameters<T> for Conv2d<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        out.push((format!("{prefix}.weight"), self.weight.view().into_dyn()));
        out.push((format!("{prefix}.bias"), self.bias.view().into_dyn()));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        out.push((format!("{prefix}.weight"), self.weight.view_mut().into_dyn()));
        out.push((format!("{prefix}.bias"), self.bias.view_mut().into_dyn()));
    }
}

/// Output columns `ox` whose input column `ox * stride + offset - pad` lies in `0..w`.
fn valid_cols(w: usize, wo: usize, stride: usize, offset: usize, pad: usize) -> std::ops::Range<usize> {
    let lo = pad.saturating_sub(offset).div_ceil(stride);
    let hi = (w + pad).saturating_sub(offset).div_ceil(stride).min(wo);
    lo.min(hi)..hi
}

fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    cols: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let valid = valid_cols(w, wo, stride, kj, pad);
                for oy in 0..ho {
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    drow[..valid.start].fill(T::zero());
                    drow[valid.end..].fill(T::zero());
                    if valid.is_empty() {
                        continue;
                    }
                    let first = valid.start * stride + kj - pad;
                    if stride == 1 {
                        drow[valid.clone()].copy_from_slice(&srow[first..first + valid.len()]);
                    } else {
                        for (d, &v) in drow[valid.clone()].iter_mut().zip(srow[first..].iter().step_by(stride)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    dx: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let valid = valid_cols(w, wo, stride, kj, pad);
                if valid.is_empty() {
                    continue;
                }
                let first = valid.start * stride + kj - pad;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * wo + valid.start..oy * wo + valid.end];
                    for (d, &v) in drow[first..].iter_mut().step_by(stride).zip(srow) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Per-sample group normalization with a per-channel affine.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub groups: usize,
}

pub struct NormCache<T> {
    xhat: Array4<T>,
    inv_std: Array2<T>,
}

impl<T: Scalar> GroupNorm<T> {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(groups > 0 && channels.is_multiple_of(groups), "{groups} groups do not divide {channels} channels");
        Self { gamma: Array1::ones(channels), beta: Array1::zeros(channels), groups }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gamma: Array1::zeros(self.gamma.raw_dim()),
            beta: Array1::zeros(self.beta.raw_dim()),
            groups: self.groups,
        }
    }

    pub fn forward(&self, x: Array4<T>, keep_cache: bool) -> (Array4<T>, Option<NormCache<T>>) {
        let (n, c, h, w) = x.dim();
        let cg = c / self.groups;
        let m = cg * h * w;
        let mut xhat = x.as_standard_layout().into_owned();
        let mut inv_std = Array2::<T>::zeros((n, self.groups));
        let eps = T::lit(NORM_EPS);
        let mf = T::from_usize(m).expect("size");
        {
            let data = xhat.as_slice_mut().expect("standard layout");
            for b in 0..n {
                for g in 0..self.groups {
                    let start = (b * c + g * cg) * h * w;
                    let chunk = &mut data[start..start + m];
                    let mean = chunk.iter().copied().sum::<T>() / mf;
                    let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
                    let inv = (var + eps).sqrt().recip();
                    chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv);
                    inv_std[[b, g]] = inv;
                }
            }
        }
        let mut y = xhat.clone();
        for mut sample in y.outer_iter_mut() {
            for ((mut plane, &gm), &bt) in sample.outer_iter_mut().zip(&self.gamma).zip(&self.beta) {
                plane.mapv_inplace(|v| v * gm + bt);
            }
        }
        (y, keep_cache.then_some(NormCache { xhat, inv_std }))
    }

    pub fn backward(&self, cache: &NormCache<T>, dy: &Array4<T>, grad: &mut GroupNorm<T>) -> Array4<T> {
        let (n, c, h, w) = dy.dim();
        let cg = c / self.groups;
        let m = cg * h * w;
        let mf = T::from_usize(m).expect("size");
        let mut dxhat = dy.as_standard_layout().into_owned();
        for b in 0..n {
            for ch in 0..c {
                let dyp = dy.slice(s![b, ch, .., ..]);
                let xp = cache.xhat.slice(s![b, ch, .., ..]);
                grad.beta[ch] += dyp.sum();
                let mut acc = T::zero();
                ndarray::Zip::from(&dyp).and(&xp).for_each(|&d, &x| acc += d * x);
                grad.gamma[ch] += acc;
                let gm = self.gamma[ch];
                dxhat.slice_mut(s![b, ch, .., ..]).mapv_inplace(|v| v * gm);
            }
        }
        let xh = cache.xhat.as_slice().expect("standard layout");
        let data = dxhat.as_slice_mut().expect("standard layout");
        for b in 0..n {
            for g in 0..self.groups {
                let start = (b * c + g * cg) * h * w;
                let d = &mut data[start..start + m];
                let xg = &xh[start..start + m];
                let s1: T = d.iter().copied().sum();
                let s2: T = d.iter().zip(xg).map(|(&a, &x)| a * x).sum();
                let scale = cache.inv_std[[b, g]] / mf;
                d.iter_mut().zip(xg).for_each(|(v, &x)| *v = scale * (mf * *v - s1 - x * s2));
            }
        }
        dxhat
    }
}

impl<T: Scalar> Parameters<T> for GroupNorm<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.view().into_dyn()));
        out.push((format!("{prefix}.beta"), self.beta.view().into_dyn()));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.view_mut().into_dyn()));
        out.push((format!("{prefix}.beta"), self.beta.view_mut().into_dyn()));
    }
}

/// Convolution, group normalization, ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T> {
    pub conv: Conv2d<T>,
    pub norm: GroupNorm<T>,
}

pub struct BlockCache<T> {
    conv: ConvCache<T>,
    norm: NormCache<T>,
    out: Array4<T>,
}

impl<T: Scalar> ConvBlock<T> {
    pub fn init<R: Rng>(rng: &mut R, in_ch: usize, out_ch: usize, stride: usize, norm_groups: usize) -> Self {
        Self {
            conv: Conv2d::init(rng, in_ch, out_ch, 3, stride, 1),
            norm: GroupNorm::new(out_ch, gcd(norm_groups, out_ch)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self { conv: self.conv.zeros_like(), norm: self.norm.zeros_like() }
    }

    pub fn forward(&self, x: &Array4<T>, keep_cache: bool) -> Result<(Array4<T>, Option<BlockCache<T>>)> {
        let (z, conv) = self.conv.forward(x, keep_cache)?;
        let (mut y, norm) = self.norm.forward(z, keep_cache);
        y.mapv_inplace(|v| v.max(T::zero()));
        let cache = match (conv, norm) {
            (Some(conv), Some(norm)) => Some(BlockCache { conv, norm, out: y.clone() }),
            _ => None,
        };
        Ok((y, cache))
    }

    pub fn backward(
        &self,
        cache: &BlockCache<T>,
        dy: &Array4<T>,
        grad: &mut ConvBlock<T>,
        need_input_grad: bool,
    ) -> Option<Array4<T>> {
        let mut d = dy.clone();
        ndarray::Zip::from(&mut d).and(&cache.out).for_each(|d, &y| {
            if y <= T::zero() {
                *d = T::zero();
            }
        });
        let dz = self.norm.backward(&cache.norm, &d, &mut grad.norm);
        self.conv.backward(&cache.conv, &dz, &mut grad.conv, need_input_grad)
    }
}

impl<T: Scalar> Parameters<T> for ConvBlock<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        self.conv.params(&format!("{prefix}.conv"), out);
        self.norm.params(&format!("{prefix}.norm"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        self.conv.params_mut(&format!("{prefix}.conv"), out);
        self.norm.params_mut(&format!("{prefix}.norm"), out);
    }
}

/// Nearest-neighbor upsampling by 2 in both spatial axes.
pub fn upsample2x<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut out = Array4::<T>::zeros((n, c, 2 * h, 2 * w));
    let dst = out.as_slice_mut().expect("fresh array");
    for (plane, out_plane) in src.chunks_exact(h * w).zip(dst.chunks_exact_mut(4 * h * w)) {
        for (row, out_rows) in plane.chunks_exact(w).zip(out_plane.chunks_exact_mut(4 * w)) {
            let (top, bottom) = out_rows.split_at_mut(2 * w);
            for (pair, &v) in top.chunks_exact_mut(2).zip(row) {
                pair[0] = v;
                pair[1] = v;
            }
            bottom.copy_from_slice(top);
        }
    }
    out
}

/// Adjoint of [`upsample2x`]: sums each 2x2 block.
pub fn upsample2x_backward<T: Scalar>(dy: &Array4<T>) -> Array4<T> {
    let (n, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let dy = dy.as_standard_layout();
    let src = dy.as_slice().expect("standard layout");
    let mut dx = Array4::<T>::zeros((n, c, h, w));
    let dst = dx.as_slice_mut().expect("fresh array");
    for (plane, out_plane) in src.chunks_exact(h2 * w2).zip(dst.chunks_exact_mut(h * w)) {
        for (rows, out_row) in plane.chunks_exact(2 * w2).zip(out_plane.chunks_exact_mut(w)) {
            let (top, bottom) = rows.split_at(w2);
            for ((o, t), b) in out_row.iter_mut().zip(top.chunks_exact(2)).zip(bottom.chunks_exact(2)) {
                *o = t[0] + t[1] + b[0] + b[1];
            }
        }
    }
    dx
}

/// Softmax over the channel axis.
pub fn softmax_channels<T: Scalar>(logits: &Array4<T>) -> Array4<T> {
    let mut out = logits.clone();
    for mut sample in out.outer_iter_mut() {
        let max = sample.fold_axis(Axis(0), T::neg_infinity(), |&a, &b| a.max(b));
        for mut plane in sample.outer_iter_mut() {
            ndarray::Zip::from(&mut plane).and(&max).for_each(|v, &m| *v = (*v - m).exp());
        }
        let sum = sample.sum_axis(Axis(0));
        for mut plane in sample.outer_iter_mut() {
            ndarray::Zip::from(&mut plane).and(&sum).for_each(|v, &s| *v /= s);
        }
    }
    out
}

/// Gradient through the channel softmax: `dl_k = p_k (dp_k - sum_j p_j dp_j)`.
pub fn softmax_channels_backward<T: Scalar>(probs: &Array4<T>, dprobs: &Array4<T>) -> Array4<T> {
    let mut dl = Array4::<T>::zeros(probs.raw_dim());
    for ((mut dls, ps), dps) in dl.outer_iter_mut().zip(probs.outer_iter()).zip(dprobs.outer_iter()) {
        let dot = (&ps * &dps).sum_axis(Axis(0));
        ndarray::Zip::from(dls.view_mut()).and(&ps).and(&dps).and_broadcast(&dot).for_each(|o, &p, &d, &s| {
            *o = p * (d - s);
        });
    }
    dl
}

pub(crate) fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a.max(1)
    } else {
        gcd(b, a % b)
    }
}
