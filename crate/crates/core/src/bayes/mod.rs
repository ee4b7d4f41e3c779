//! Closed-form Gaussian machinery: MLE prior, heteroscedastic likelihood, MAP
//! estimate and the negative log-likelihood used for training.

mod grad;
pub mod linalg;

pub use grad::{nll_gradient, NllGradient};
pub use linalg::{cholesky, cholesky_solve, cholesky_with_jitter, Matrix, JITTER_BASE, JITTER_MAX};
pub use linalg::{log_det_from_factor, solve_lower, solve_lower_transpose};

use crate::error::{Error, Result};
use crate::scalar::{softplus, Real};

/// Gaussian prior `N(mean, L·Lᵀ)` over a vectorized patch.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior<F> {
    mean: Vec<F>,
    cov_factor: Matrix<F>,
}

impl<F: Real> GaussianPrior<F> {
    /// `cov_factor` must be lower-triangular with a strictly positive diagonal.
    pub fn new(mean: Vec<F>, cov_factor: Matrix<F>) -> Result<Self> {
        let d = mean.len();
        if cov_factor.dim() != d {
            return Err(Error::DimensionMismatch(format!(
                "mean has {d} entries, factor is {}x{}",
                cov_factor.dim(),
                cov_factor.dim()
            )));
        }
        for i in 0..d {
            if !(cov_factor[(i, i)] > F::zero()) {
                return Err(Error::InvalidArgument(format!(
                    "factor diagonal {i} is {}, must be positive",
                    cov_factor[(i, i)]
                )));
            }
            for j in i + 1..d {
                if cov_factor[(i, j)] != F::zero() {
                    return Err(Error::InvalidArgument(
                        "factor must be lower-triangular".into(),
                    ));
                }
            }
        }
        if !mean.iter().all(|v| v.is_finite()) || !cov_factor.is_finite() {
            return Err(Error::NonFinite("Gaussian prior".into()));
        }
        Ok(GaussianPrior { mean, cov_factor })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[F] {
        &self.mean
    }

    pub fn cov_factor(&self) -> &Matrix<F> {
        &self.cov_factor
    }

    /// Implied covariance `L·Lᵀ`.
    pub fn covariance(&self) -> Matrix<F> {
        self.cov_factor.lower_gram()
    }
}

/// Observation likelihood `N(mean, cov)` for the noisy patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Likelihood<F> {
    pub mean: Vec<F>,
    pub cov: Matrix<F>,
}

/// Poisson-Gaussian noise level: `sigma` (signal-independent std) and `beta`
/// (signal-dependent gain), both in normalized intensity units.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseParams {
    pub sigma: f64,
    pub beta: f64,
}

impl NoiseParams {
    pub fn new(sigma: f64, beta: f64) -> Result<Self> {
        if !(sigma.is_finite() && beta.is_finite() && sigma >= 0.0 && beta >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise parameters must be finite and non-negative, got sigma={sigma}, beta={beta}"
            )));
        }
        Ok(NoiseParams { sigma, beta })
    }

    pub fn noiseless() -> Self {
        NoiseParams {
            sigma: 0.0,
            beta: 0.0,
        }
    }

    /// Per-pixel variance `beta²·max(x, 0) + sigma²`.
    pub fn variance(&self, x: f64) -> f64 {
        self.beta * self.beta * x.max(0.0) + self.sigma * self.sigma
    }
}

/// Maximum-likelihood prior from the `k ≥ 2` neighbor patches: sample mean and unbiased
/// sample covariance, factorized after adding [`JITTER_BASE`]·I (escalated on failure).
pub fn mle_prior<F: Real, P: AsRef<[F]>>(neighbors: &[P]) -> Result<GaussianPrior<F>> {
    let k = neighbors.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "MLE covariance needs at least 2 neighbors, got {k}"
        )));
    }
    let d = neighbors[0].as_ref().len();
    if neighbors.iter().any(|p| p.as_ref().len() != d) {
        return Err(Error::DimensionMismatch(
            "neighbor patches differ in length".into(),
        ));
    }
    let mut mean = vec![F::zero(); d];
    for p in neighbors {
        for (m, &v) in mean.iter_mut().zip(p.as_ref()) {
            *m += v;
        }
    }
    let kf = F::lit(k as f64);
    mean.iter_mut().for_each(|m| *m /= kf);

    let mut cov = Matrix::zeros(d);
    let mut centered = vec![F::zero(); d];
    for p in neighbors {
        for ((c, &v), &m) in centered.iter_mut().zip(p.as_ref()).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            for j in 0..=i {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    let denom = F::lit((k - 1) as f64);
    for i in 0..d {
        for j in 0..=i {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let (factor, _) = cholesky_with_jitter(&cov, JITTER_BASE)?;
    GaussianPrior::new(mean, factor)
}

/// Likelihood parameters: `m_y = m_x`, `C_y = C_x + diag(β²·max(m_x, 0)) + σ²·I`.
pub fn likelihood_from_prior<F: Real>(
    prior: &GaussianPrior<F>,
    noise: NoiseParams,
) -> Likelihood<F> {
    let mut cov = prior.covariance();
    let s2 = F::lit(noise.sigma * noise.sigma);
    let b2 = F::lit(noise.beta * noise.beta);
    for (i, &m) in prior.mean().iter().enumerate() {
        cov[(i, i)] += b2 * m.max(F::zero()) + s2;
    }
    Likelihood {
        mean: prior.mean().to_vec(),
        cov,
    }
}

/// Denoised patch plus whether the likelihood covariance could not be factorized
/// (in which case the prior mean is returned).
#[derive(Debug, Clone, PartialEq)]
pub struct MapEstimate<F> {
    pub values: Vec<F>,
    pub fallback: bool,
}

/// MAP estimate `m_x + C_x·C_y⁻¹·(y − m_x)` via a Cholesky solve of `C_y`.
///
/// Evaluated as `y − (C_y − C_x)·z` with `C_y·z = y − m_x`, which is the same
/// quantity but reproduces `y` exactly when the noise term vanishes.
pub fn map_estimate<F: Real>(
    prior: &GaussianPrior<F>,
    lik: &Likelihood<F>,
    y: &[F],
) -> Result<MapEstimate<F>> {
    let d = prior.dim();
    if y.len() != d || lik.cov.dim() != d {
        return Err(Error::DimensionMismatch(format!(
            "patch has {} values, prior {d}, likelihood {}",
            y.len(),
            lik.cov.dim()
        )));
    }
    let (factor, jitter) = match cholesky_with_jitter(&lik.cov, 0.0) {
        Ok(f) => f,
        Err(_) => {
            return Ok(MapEstimate {
                values: prior.mean().to_vec(),
                fallback: true,
            })
        }
    };
    let resid: Vec<F> = y.iter().zip(prior.mean()).map(|(&a, &b)| a - b).collect();
    let z = cholesky_solve(&factor, &resid);
    let cx = prior.covariance();
    let mut out = y.to_vec();
    for i in 0..d {
        let mut s = F::zero();
        for j in 0..d {
            let mut n = lik.cov[(i, j)] - cx[(i, j)];
            if i == j {
                n += jitter;
            }
            s += n * z[j];
        }
        out[i] -= s;
    }
    Ok(MapEstimate {
        values: out,
        fallback: false,
    })
}

/// `½(y − m_y)ᵀ C_y⁻¹ (y − m_y) + ½ log|C_y|` (no `d/2·log 2π` constant).
pub fn nll_loss<F: Real>(y: &[F], lik: &Likelihood<F>) -> Result<F> {
    if y.len() != lik.mean.len() || lik.cov.dim() != y.len() {
        return Err(Error::DimensionMismatch(
            "patch and likelihood sizes differ".into(),
        ));
    }
    let (factor, _) = cholesky_with_jitter(&lik.cov, 0.0)?;
    let resid: Vec<F> = y.iter().zip(&lik.mean).map(|(&a, &b)| a - b).collect();
    let w = linalg::solve_lower(&factor, &resid);
    let half = F::lit(0.5);
    let quad: F = w.iter().map(|&v| v * v).sum();
    Ok(half * quad + half * linalg::log_det_from_factor(&factor))
}

/// Number of raw entries `d(d+1)/2` parametrizing a `d×d` Cholesky factor.
pub fn tri_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Index of `L[i][j]` (`j ≤ i`) in the row-wise packed raw vector.
#[inline]
pub fn tri_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

/// Patch dimension `d` for a packed vector of length `d(d+1)/2`.
pub fn dim_from_tri_len(len: usize) -> Result<usize> {
    let d = (((8 * len + 1) as f64).sqrt() as usize).saturating_sub(1) / 2;
    if tri_len(d) == len && len > 0 {
        Ok(d)
    } else {
        Err(Error::DimensionMismatch(format!(
            "{len} is not a triangular number d(d+1)/2"
        )))
    }
}

/// Fills a lower-triangular factor row-wise from `raw`; diagonal entries go
/// through softplus so they are strictly positive.
pub fn cholesky_assemble<F: Real>(raw: &[F]) -> Result<Matrix<F>> {
    let d = dim_from_tri_len(raw.len())?;
    let mut l = Matrix::zeros(d);
    for i in 0..d {
        for j in 0..=i {
            let v = raw[tri_index(i, j)];
            l[(i, j)] = if i == j { softplus(v) } else { v };
        }
    }
    Ok(l)
}

/// Pulls a gradient with respect to the assembled factor back to the raw entries.
pub fn cholesky_assemble_backward<F: Real>(raw: &[F], d_factor: &Matrix<F>) -> Result<Vec<F>> {
    let d = dim_from_tri_len(raw.len())?;
    if d_factor.dim() != d {
        return Err(Error::DimensionMismatch(format!(
            "factor gradient is {}x{}, raw entries describe {d}x{d}",
            d_factor.dim(),
            d_factor.dim()
        )));
    }
    let mut out = vec![F::zero(); raw.len()];
    for i in 0..d {
        for j in 0..=i {
            let t = tri_index(i, j);
            out[t] = if i == j {
                d_factor[(i, i)] * crate::scalar::sigmoid(raw[t])
            } else {
                d_factor[(i, j)]
            };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
