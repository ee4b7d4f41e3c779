//! Deterministic synthetic test images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Image;

/// Structured pattern: shaded background, stripes, rings, step edges and a grid of discs.
pub fn structured(size: usize) -> Image<f64> {
    let s = size as f64;
    Image::from_fn(size, size, |r, c| {
        let (y, x) = (r as f64 / s, c as f64 / s);
        let mut v = 0.25 + 0.15 * x;
        if y < 0.5 && x < 0.5 {
            v = if ((x * s) as usize / 4).is_multiple_of(2) {
                0.75
            } else {
                0.3
            };
        } else if y < 0.5 {
            let (dy, dx) = (y - 0.25, x - 0.75);
            let rad = (dx * dx + dy * dy).sqrt() * s;
            v = 0.5 + 0.3 * (rad / 3.0).cos();
        } else if x < 0.5 {
            let cell = (s / 8.0).max(4.0);
            let (cy, cx) = ((y * s) % cell - cell / 2.0, (x * s) % cell - cell / 2.0);
            if cx * cx + cy * cy < (cell * 0.3).powi(2) {
                v = 0.85;
            }
        } else if x + y > 1.4 {
            v = 0.8;
        } else if (x - y).abs() < 0.05 {
            v = 0.6;
        }
        v
    })
}

/// Fluorescence-like field of Gaussian blobs on a dim background.
pub fn cells(size: usize, seed: u64) -> Image<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = (size * size) / 180 + 4;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..count)
        .map(|_| {
            (
                rng.random_range(0.0..size as f64),
                rng.random_range(0.0..size as f64),
                rng.random_range(1.5..4.5),
                rng.random_range(0.3..0.7),
            )
        })
        .collect();
    Image::from_fn(size, size, |r, c| {
        let mut v = 0.1 + 0.05 * (r as f64 / size as f64);
        for &(by, bx, rad, amp) in &blobs {
            let d2 = (r as f64 - by).powi(2) + (c as f64 - bx).powi(2);
            v += amp * (-d2 / (2.0 * rad * rad)).exp();
        }
        v.min(0.95)
    })
}
