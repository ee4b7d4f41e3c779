//! Classical Poisson-Gaussian noise level estimate from a single noisy image.

use crate::bayes::NoiseParams;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::scalar::Real;

const MIN_BIN: usize = 64;
const MAX_BINS: usize = 8;
/// `median(|z|)` of a standard normal.
const MAD_NORMAL: f64 = 0.674_489_750_196_081_7;

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Fits `variance = beta²·mean + sigma²` to robust variances of 2×2 diagonal Haar
/// details, binned by the local block mean.
pub fn estimate_noise<F: Real>(img: &Image<F>) -> Result<NoiseParams> {
    let (h, w) = (img.height(), img.width());
    let mut blocks: Vec<(f64, f64)> = Vec::with_capacity(img.channels() * (h / 2) * (w / 2));
    for ch in 0..img.channels() {
        for r in (0..h.saturating_sub(1)).step_by(2) {
            for c in (0..w.saturating_sub(1)).step_by(2) {
                let a = img.get(ch, r, c).as_f64();
                let b = img.get(ch, r, c + 1).as_f64();
                let cc = img.get(ch, r + 1, c).as_f64();
                let d = img.get(ch, r + 1, c + 1).as_f64();
                blocks.push(((a + b + cc + d) / 4.0, (a - b - cc + d) / 2.0));
            }
        }
    }
    if blocks.len() < MIN_BIN {
        return Err(Error::InvalidArgument(format!(
            "image too small to estimate noise ({} blocks, need {MIN_BIN})",
            blocks.len()
        )));
    }
    blocks.sort_by(|x, y| x.0.total_cmp(&y.0));
    let bins = (blocks.len() / MIN_BIN).clamp(1, MAX_BINS);
    let per = blocks.len() / bins;
    let mut pts = Vec::with_capacity(bins);
    for b in 0..bins {
        let chunk = &blocks[b * per..if b + 1 == bins {
            blocks.len()
        } else {
            (b + 1) * per
        }];
        let mean = chunk.iter().map(|p| p.0).sum::<f64>() / chunk.len() as f64;
        let mut abs: Vec<f64> = chunk.iter().map(|p| p.1.abs()).collect();
        let s = median(&mut abs) / MAD_NORMAL;
        pts.push((mean, s * s, chunk.len() as f64));
    }
    let (sigma2, gain2) = if pts.len() < 2 {
        (pts[0].1, 0.0)
    } else {
        let sw: f64 = pts.iter().map(|p| p.2).sum();
        let mx = pts.iter().map(|p| p.2 * p.0).sum::<f64>() / sw;
        let my = pts.iter().map(|p| p.2 * p.1).sum::<f64>() / sw;
        let sxx: f64 = pts.iter().map(|p| p.2 * (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| p.2 * (p.0 - mx) * (p.1 - my)).sum();
        if sxx <= 1e-12 {
            (my, 0.0)
        } else {
            let slope = (sxy / sxx).max(0.0);
            let icpt = my - slope * mx;
            if icpt < 0.0 {
                // negative intercept: refit with sigma pinned at zero
                let sxx0: f64 = pts.iter().map(|p| p.2 * p.0 * p.0).sum();
                let sxy0: f64 = pts.iter().map(|p| p.2 * p.0 * p.1).sum();
                (
                    0.0,
                    if sxx0 > 0.0 {
                        (sxy0 / sxx0).max(0.0)
                    } else {
                        0.0
                    },
                )
            } else {
                (icpt, slope)
            }
        }
    };
    NoiseParams::new(sigma2.max(0.0).sqrt(), gain2.sqrt())
}
