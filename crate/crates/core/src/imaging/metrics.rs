//! PSNR and SSIM with peak value 1.0.

use super::Image;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_dims<F: Real>(a: &Image<F>, b: &Image<F>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    Ok(())
}

/// `10·log10(1/MSE)` per channel, averaged over channels; `+∞` when the images match.
pub fn psnr<F: Real>(a: &Image<F>, b: &Image<F>) -> Result<f64> {
    check_dims(a, b)?;
    let plane = a.width() * a.height();
    let mut total = 0.0;
    for ch in 0..a.channels() {
        let range = ch * plane..(ch + 1) * plane;
        let mse = a.data()[range.clone()]
            .iter()
            .zip(&b.data()[range])
            .map(|(&x, &y)| {
                let e = x.as_f64() - y.as_f64();
                e * e
            })
            .sum::<f64>()
            / plane as f64;
        total += if mse == 0.0 {
            f64::INFINITY
        } else {
            -10.0 * mse.log10()
        };
    }
    Ok(total / a.channels() as f64)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-mode Gaussian filter of a `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        let row = &plane[r * w..(r + 1) * w];
        for c in 0..ow {
            tmp[r * ow + c] = win
                .iter()
                .zip(&row[c..c + SSIM_WINDOW])
                .map(|(k, v)| k * v)
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = win
                .iter()
                .enumerate()
                .map(|(i, k)| k * tmp[(r + i) * ow + c])
                .sum();
        }
    }
    out
}

/// Mean local SSIM: 11×11 Gaussian window (σ = 1.5), K1 = 0.01, K2 = 0.03, range 1.0.
///
/// Only window positions fully inside the image contribute. Multi-channel images are
/// scored per channel and averaged.
pub fn ssim<F: Real>(a: &Image<F>, b: &Image<F>) -> Result<f64> {
    check_dims(a, b)?;
    if a.width() < SSIM_WINDOW || a.height() < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, image is {}x{}",
            a.height(),
            a.width()
        )));
    }
    let win = gaussian_window();
    let (h, w) = (a.height(), a.width());
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for ch in 0..a.channels() {
        let x: Vec<f64> = a.channel(ch).data().iter().map(|v| v.as_f64()).collect();
        let y: Vec<f64> = b.channel(ch).data().iter().map(|v| v.as_f64()).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, h, w, &win);
        let my = filter_valid(&y, h, w, &win);
        let sxx = filter_valid(&xx, h, w, &win);
        let syy = filter_valid(&yy, h, w, &win);
        let sxy = filter_valid(&xy, h, w, &win);
        let n = mx.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / n as f64;
    }
    Ok(total / a.channels() as f64)
}
