use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Image;
use crate::scalar::Real;

/// Adds heteroscedastic Gaussian noise with variance `beta²·x + sigma²` per pixel.
///
/// Draws come from a ChaCha8 stream seeded with `seed`, in storage order. Output is not
/// clamped; negative intensities contribute only `sigma²`.
pub fn poisson_gaussian_corrupt<F: Real>(
    img: &Image<F>,
    beta: f64,
    sigma: f64,
    seed: u64,
) -> Image<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b2, s2) = (beta * beta, sigma * sigma);
    img.map(|x| {
        let z: f64 = StandardNormal.sample(&mut rng);
        let xf = x.as_f64();
        let std = (b2 * xf.max(0.0) + s2).sqrt();
        x + F::lit(std * z)
    })
}
