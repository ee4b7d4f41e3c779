//! Forward and backward kernels for the differentiable ops, free of any graph bookkeeping.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{gemm, sigmoid, softplus, Real};

/// Upper bound on im2col columns per GEMM; whole samples are grouped up to this size.
const COL_CHUNK: usize = 4096;

fn out_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || extent + 2 * pad < kernel {
        return Err(Error::DimensionMismatch(format!(
            "kernel {kernel} does not fit extent {extent} with pad {pad}"
        )));
    }
    Ok((extent + 2 * pad - kernel) / stride + 1)
}

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new<F: Real>(
        x: &Tensor<F>,
        w: &Tensor<F>,
        b: Option<&Tensor<F>>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let [n, cin, h, wd] = x.shape();
        let [cout, wcin, kh, kw] = w.shape();
        if wcin != cin {
            return Err(Error::DimensionMismatch(format!(
                "conv weight expects {wcin} input channels, input has {cin}"
            )));
        }
        if let Some(b) = b {
            if b.len() != cout {
                return Err(Error::DimensionMismatch(format!(
                    "conv bias has {} entries for {cout} output channels",
                    b.len()
                )));
            }
        }
        Ok(ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            oh: out_extent(h, kh, stride, pad)?,
            ow: out_extent(wd, kw, stride, pad)?,
            stride,
            pad,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.oh * self.ow
    }

    fn samples_per_chunk(&self) -> usize {
        (COL_CHUNK / self.pixels().max(1)).max(1)
    }

    /// Source pixel for output `(oy, ox)` and kernel tap `(ky, kx)`, if inside the image.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        (y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w)
            .then_some((y as usize, x as usize))
    }

    /// Unfolds samples `n0..n1` into a `patch_len × (samples·pixels)` row-major matrix.
    fn im2col<F: Real>(&self, x: &[F], n0: usize, n1: usize, cols: &mut Vec<F>) {
        let ncols = (n1 - n0) * self.pixels();
        cols.clear();
        cols.resize(self.patch_len() * ncols, F::zero());
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for s in n0..n1 {
                        let plane = &x[(s * self.cin + ci) * self.h * self.w..][..self.h * self.w];
                        let base = (s - n0) * self.pixels();
                        for oy in 0..self.oh {
                            for ox in 0..self.ow {
                                if let Some((y, xx)) = self.source(oy, ox, ky, kx) {
                                    dst[base + oy * self.ow + ox] = plane[y * self.w + xx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: accumulates `cols` back into `dx`.
    fn col2im<F: Real>(&self, cols: &[F], n0: usize, n1: usize, dx: &mut [F]) {
        let ncols = (n1 - n0) * self.pixels();
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for s in n0..n1 {
                        let plane =
                            &mut dx[(s * self.cin + ci) * self.h * self.w..][..self.h * self.w];
                        let base = (s - n0) * self.pixels();
                        for oy in 0..self.oh {
                            for ox in 0..self.ow {
                                if let Some((y, xx)) = self.source(oy, ox, ky, kx) {
                                    plane[y * self.w + xx] += src[base + oy * self.ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation. `w` is `[cout, cin, kh, kw]`, `b` holds `cout` values.
pub fn conv2d_fwd<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<F>> {
    let g = ConvGeom::new(x, w, Some(b), stride, pad)?;
    let mut y = Tensor::zeros([g.n, g.cout, g.oh, g.ow]);
    let px = g.pixels();
    let mut cols = Vec::new();
    let mut prod = Vec::new();
    let step = g.samples_per_chunk();
    let mut n0 = 0;
    while n0 < g.n {
        let n1 = (n0 + step).min(g.n);
        let ncols = (n1 - n0) * px;
        g.im2col(x.data(), n0, n1, &mut cols);
        prod.clear();
        prod.resize(g.cout * ncols, F::zero());
        gemm(
            g.cout,
            g.patch_len(),
            ncols,
            w.data(),
            false,
            &cols,
            false,
            &mut prod,
            false,
        );
        let yd = y.data_mut();
        for co in 0..g.cout {
            let bias = b.data()[co];
            for s in n0..n1 {
                let src = &prod[co * ncols + (s - n0) * px..][..px];
                let dst = &mut yd[(s * g.cout + co) * px..][..px];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = v + bias;
                }
            }
        }
        n0 = n1;
    }
    Ok(y)
}

/// Gradients `(dx, dw, db)` of a convolution given the upstream gradient `dy`.
pub fn conv2d_bwd<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    dy: &Tensor<F>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let g = ConvGeom::new(x, w, None, stride, pad)?;
    if dy.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(Error::DimensionMismatch(format!(
            "conv upstream gradient {:?} vs output {:?}",
            dy.shape(),
            [g.n, g.cout, g.oh, g.ow]
        )));
    }
    let px = g.pixels();
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros([g.cout, 1, 1, 1]);
    let mut cols = Vec::new();
    let mut dyc = Vec::new();
    let mut dcols = Vec::new();
    let step = g.samples_per_chunk();
    let mut n0 = 0;
    while n0 < g.n {
        let n1 = (n0 + step).min(g.n);
        let ncols = (n1 - n0) * px;
        dyc.clear();
        dyc.resize(g.cout * ncols, F::zero());
        for co in 0..g.cout {
            let mut bsum = F::zero();
            for s in n0..n1 {
                let src = &dy.data()[(s * g.cout + co) * px..][..px];
                dyc[co * ncols + (s - n0) * px..][..px].copy_from_slice(src);
                bsum += src.iter().copied().sum::<F>();
            }
            db.data_mut()[co] += bsum;
        }
        g.im2col(x.data(), n0, n1, &mut cols);
        gemm(
            g.cout,
            ncols,
            g.patch_len(),
            &dyc,
            false,
            &cols,
            true,
            dw.data_mut(),
            true,
        );
        dcols.clear();
        dcols.resize(g.patch_len() * ncols, F::zero());
        gemm(
            g.patch_len(),
            g.cout,
            ncols,
            w.data(),
            true,
            &dyc,
            false,
            &mut dcols,
            false,
        );
        g.col2im(&dcols, n0, n1, dx.data_mut());
        n0 = n1;
    }
    Ok((dx, dw, db))
}

pub fn leaky_relu_fwd<F: Real>(x: &Tensor<F>, slope: F) -> Tensor<F> {
    x.map(|v| if v > F::zero() { v } else { slope * v })
}

pub fn leaky_relu_bwd<F: Real>(x: &Tensor<F>, dy: &Tensor<F>, slope: F) -> Tensor<F> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= F::zero() {
            *d *= slope;
        }
    }
    dx
}

/// Normalization statistics source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Per-channel statistics of the current batch.
    Train,
    /// Stored running statistics.
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
/// Weight of the old running statistic in the exponential average.
pub const BN_MOMENTUM: f64 = 0.9;

/// Values saved by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<F> {
    pub xhat: Tensor<F>,
    pub inv_std: Vec<F>,
    pub mode: NormMode,
    /// Batch mean and unbiased batch variance (train mode only).
    pub batch_mean: Vec<F>,
    pub batch_var: Vec<F>,
}

/// Per-channel normalization followed by the affine map `gamma·x̂ + beta`.
pub fn batch_norm_fwd<F: Real>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    mode: NormMode,
    running_mean: &[F],
    running_var: &[F],
) -> Result<(Tensor<F>, BatchNormCache<F>)> {
    let [n, c, h, w] = x.shape();
    if gamma.len() != c || beta.len() != c || running_mean.len() != c || running_var.len() != c {
        return Err(Error::DimensionMismatch(format!(
            "batch norm over {c} channels got parameters of length {}/{}",
            gamma.len(),
            beta.len()
        )));
    }
    let hw = h * w;
    let count = n * hw;
    let eps = F::lit(BN_EPS);
    let mut mean = vec![F::zero(); c];
    let mut var = vec![F::zero(); c];
    let mut batch_var = vec![F::zero(); c];
    match mode {
        NormMode::Train => {
            let cnt = F::lit(count as f64);
            for ch in 0..c {
                let mut s = F::zero();
                for s_ in 0..n {
                    s += x.data()[(s_ * c + ch) * hw..][..hw]
                        .iter()
                        .copied()
                        .sum::<F>();
                }
                let m = s / cnt;
                let mut q = F::zero();
                for s_ in 0..n {
                    for &v in &x.data()[(s_ * c + ch) * hw..][..hw] {
                        q += (v - m) * (v - m);
                    }
                }
                mean[ch] = m;
                var[ch] = q / cnt;
                batch_var[ch] = if count > 1 {
                    q / F::lit((count - 1) as f64)
                } else {
                    F::zero()
                };
            }
        }
        NormMode::Eval => {
            mean.copy_from_slice(running_mean);
            var.copy_from_slice(running_var);
        }
    }
    let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for s_ in 0..n {
        for ch in 0..c {
            let off = (s_ * c + ch) * hw;
            for i in off..off + hw {
                let v = (x.data()[i] - mean[ch]) * inv_std[ch];
                xhat.data_mut()[i] = v;
                y.data_mut()[i] = gamma.data()[ch] * v + beta.data()[ch];
            }
        }
    }
    let cache = BatchNormCache {
        xhat,
        inv_std,
        mode,
        batch_mean: if mode == NormMode::Train {
            mean
        } else {
            Vec::new()
        },
        batch_var: if mode == NormMode::Train {
            batch_var
        } else {
            Vec::new()
        },
    };
    Ok((y, cache))
}

/// Gradients `(dx, dgamma, dbeta)`.
pub fn batch_norm_bwd<F: Real>(
    gamma: &Tensor<F>,
    cache: &BatchNormCache<F>,
    dy: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let [n, c, h, w] = dy.shape();
    let hw = h * w;
    let cnt = F::lit((n * hw) as f64);
    let mut dgamma = Tensor::zeros([c, 1, 1, 1]);
    let mut dbeta = Tensor::zeros([c, 1, 1, 1]);
    let mut dx = Tensor::zeros(dy.shape());
    for ch in 0..c {
        let (mut sum_dy, mut sum_dy_xhat) = (F::zero(), F::zero());
        for s in 0..n {
            let off = (s * c + ch) * hw;
            for i in off..off + hw {
                sum_dy += dy.data()[i];
                sum_dy_xhat += dy.data()[i] * cache.xhat.data()[i];
            }
        }
        dgamma.data_mut()[ch] = sum_dy_xhat;
        dbeta.data_mut()[ch] = sum_dy;
        let g = gamma.data()[ch];
        let is = cache.inv_std[ch];
        for s in 0..n {
            let off = (s * c + ch) * hw;
            for i in off..off + hw {
                dx.data_mut()[i] = match cache.mode {
                    NormMode::Eval => dy.data()[i] * g * is,
                    NormMode::Train => {
                        g * is
                            * (dy.data()[i]
                                - sum_dy / cnt
                                - cache.xhat.data()[i] * sum_dy_xhat / cnt)
                    }
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Non-overlapping mean pooling with a square `k×k` window and stride `k`.
pub fn avg_pool_fwd<F: Real>(x: &Tensor<F>, k: usize) -> Result<Tensor<F>> {
    let [n, c, h, w] = x.shape();
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{h}x{w} input is not divisible by pooling kernel {k}"
        )));
    }
    let (oh, ow) = (h / k, w / k);
    let norm = F::lit((k * k) as f64);
    let mut y = Tensor::zeros([n, c, oh, ow]);
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = F::zero();
                for i in 0..k {
                    for j in 0..k {
                        s += src[(oy * k + i) * w + ox * k + j];
                    }
                }
                y.data_mut()[(plane * oh + oy) * ow + ox] = s / norm;
            }
        }
    }
    Ok(y)
}

pub fn avg_pool_bwd<F: Real>(input_shape: [usize; 4], dy: &Tensor<F>, k: usize) -> Tensor<F> {
    let [n, c, h, w] = input_shape;
    let (oh, ow) = (h / k, w / k);
    let norm = F::lit((k * k) as f64);
    let mut dx = Tensor::zeros(input_shape);
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy.data()[(plane * oh + oy) * ow + ox] / norm;
                for i in 0..k {
                    for j in 0..k {
                        dx.data_mut()[plane * h * w + (oy * k + i) * w + ox * k + j] = g;
                    }
                }
            }
        }
    }
    dx
}

pub fn softplus_fwd<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    x.map(softplus)
}

pub fn softplus_bwd<F: Real>(x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        *d *= sigmoid(v);
    }
    dx
}

/// Mean over channels and pixels of each sample: `[n, c, h, w] → [n, 1, 1, 1]`.
pub fn global_mean_fwd<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let n = x.shape()[0];
    let per = F::lit((x.len() / n.max(1)) as f64);
    Tensor::from_vec(
        (0..n)
            .map(|s| x.sample(s).iter().copied().sum::<F>() / per)
            .collect(),
    )
}

pub fn global_mean_bwd<F: Real>(input_shape: [usize; 4], dy: &Tensor<F>) -> Tensor<F> {
    let n = input_shape[0];
    let per: usize = input_shape[1..].iter().product();
    let norm = F::lit(per as f64);
    let mut dx = Tensor::zeros(input_shape);
    for s in 0..n {
        let g = dy.data()[s] / norm;
        dx.data_mut()[s * per..(s + 1) * per]
            .iter_mut()
            .for_each(|v| *v = g);
    }
    dx
}

/// Mean of a single-channel map over the `side×side` window at each anchor: `[1, 1, h, w] → [p, 1, 1, 1]`.
pub fn window_mean_fwd<F: Real>(
    x: &Tensor<F>,
    anchors: &[(usize, usize)],
    side: usize,
) -> Result<Tensor<F>> {
    let [n, c, h, w] = x.shape();
    if n != 1 || c != 1 {
        return Err(Error::DimensionMismatch(format!(
            "window mean expects a single-channel map, got {:?}",
            x.shape()
        )));
    }
    if let Some(&(r, col)) = anchors
        .iter()
        .find(|&&(r, col)| r + side > h || col + side > w)
    {
        return Err(Error::DimensionMismatch(format!(
            "window at ({r}, {col}) with side {side} leaves the {h}x{w} map"
        )));
    }
    let norm = F::lit((side * side) as f64);
    Ok(Tensor::from_vec(
        anchors
            .iter()
            .map(|&(r, col)| {
                let mut s = F::zero();
                for i in 0..side {
                    for j in 0..side {
                        s += x.data()[(r + i) * w + col + j];
                    }
                }
                s / norm
            })
            .collect(),
    ))
}

pub fn window_mean_bwd<F: Real>(
    input_shape: [usize; 4],
    anchors: &[(usize, usize)],
    side: usize,
    dy: &Tensor<F>,
) -> Tensor<F> {
    let w = input_shape[3];
    let norm = F::lit((side * side) as f64);
    let mut dx = Tensor::zeros(input_shape);
    for (&(r, col), &g) in anchors.iter().zip(dy.data()) {
        let g = g / norm;
        for i in 0..side {
            for j in 0..side {
                dx.data_mut()[(r + i) * w + col + j] += g;
            }
        }
    }
    dx
}
