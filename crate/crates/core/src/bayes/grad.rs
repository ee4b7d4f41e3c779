//! Analytic gradient of the training NLL with respect to the prior parameters
//! and the noise levels.

use super::linalg::{
    cholesky_solve, cholesky_with_jitter, log_det_from_factor, solve_lower, Matrix,
};
use super::NoiseParams;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone)]
pub struct NllGradient<F> {
    pub loss: F,
    pub d_mean: Vec<F>,
    /// Gradient w.r.t. the lower-triangular prior factor; upper triangle is zero.
    pub d_factor: Matrix<F>,
    pub d_sigma: F,
    pub d_beta: F,
}

/// NLL of `y` under `C_y = L·Lᵀ + diag(β²·max(m, 0)) + σ²·I`, `m_y = m`, with gradients.
///
/// With `G = ½(C_y⁻¹ − ααᵀ)` and `α = C_y⁻¹(y − m)`:
/// `∂/∂m = −α + β²·diag(G)·[m > 0]`, `∂/∂L = 2·G·L`, `∂/∂σ = 2σ·tr G`,
/// `∂/∂β = 2β·Σ max(m_i, 0)·G_ii`.
pub fn nll_gradient<F: Real>(
    y: &[F],
    mean: &[F],
    factor: &Matrix<F>,
    noise: NoiseParams,
) -> Result<NllGradient<F>> {
    let d = mean.len();
    if y.len() != d || factor.dim() != d {
        return Err(Error::DimensionMismatch(
            "patch, mean and factor sizes differ".into(),
        ));
    }
    let sigma = F::lit(noise.sigma);
    let beta = F::lit(noise.beta);
    let zero = F::zero();
    let mut cy = factor.lower_gram();
    for i in 0..d {
        cy[(i, i)] += beta * beta * mean[i].max(zero) + sigma * sigma;
    }
    let (lc, _) = cholesky_with_jitter(&cy, 0.0)?;
    let resid: Vec<F> = y.iter().zip(mean).map(|(&a, &b)| a - b).collect();
    let w = solve_lower(&lc, &resid);
    let half = F::lit(0.5);
    let loss = half * w.iter().map(|&v| v * v).sum::<F>() + half * log_det_from_factor(&lc);
    let alpha = cholesky_solve(&lc, &resid);

    // G = ½(C⁻¹ − ααᵀ); C⁻¹ column by column through the factor.
    let mut g = Matrix::zeros(d);
    let mut e = vec![zero; d];
    for j in 0..d {
        e.iter_mut().for_each(|v| *v = zero);
        e[j] = F::one();
        let col = cholesky_solve(&lc, &e);
        for i in 0..d {
            g[(i, j)] = half * (col[i] - alpha[i] * alpha[j]);
        }
    }
    // symmetrize away solve round-off
    for i in 0..d {
        for j in 0..i {
            let s = half * (g[(i, j)] + g[(j, i)]);
            g[(i, j)] = s;
            g[(j, i)] = s;
        }
    }

    let two = F::lit(2.0);
    let mut d_mean = vec![zero; d];
    let mut trace = zero;
    let mut weighted = zero;
    for i in 0..d {
        let gii = g[(i, i)];
        trace += gii;
        d_mean[i] = -alpha[i];
        if mean[i] > zero {
            d_mean[i] += beta * beta * gii;
            weighted += mean[i] * gii;
        }
    }
    let mut d_factor = Matrix::zeros(d);
    for i in 0..d {
        for j in 0..=i {
            let mut s = zero;
            for p in j..d {
                s += g[(i, p)] * factor[(p, j)];
            }
            d_factor[(i, j)] = two * s;
        }
    }
    Ok(NllGradient {
        loss,
        d_mean,
        d_factor,
        d_sigma: two * sigma * trace,
        d_beta: two * beta * weighted,
    })
}
