//! Batched NLL objective of the prior network and its gradients.
//!
//! Each neighbor stack is recentered by its per-pixel mean `mu` and divided by its RMS
//! deviation `s` before entering the network; the heads are mapped back as
//! `m = mu + s·mean_head` and `L = s·assemble(raw_head)`.

use indexmap::IndexMap;

use crate::autonet::{prior_net_graph, Graph, NetConfig, NormMode, NormUpdate, ParamStore, Tensor};
use crate::bayes::{
    cholesky_assemble, cholesky_assemble_backward, nll_gradient, tri_len, GaussianPrior, Matrix,
    NoiseParams,
};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Lower bound on the stack scale `s`, intensity units.
pub const MIN_STACK_SCALE: f64 = 1e-3;

/// Reference patches with their neighbor stacks, flattened.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RefBatch {
    pub k: usize,
    pub side: usize,
    /// `len × k × d` neighbor values.
    pub neighbors: Vec<f64>,
    /// `len × d` observed reference patches.
    pub targets: Vec<f64>,
}

impl RefBatch {
    pub fn new(k: usize, side: usize) -> Self {
        RefBatch {
            k,
            side,
            neighbors: Vec::new(),
            targets: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.side * self.side
    }

    pub fn len(&self) -> usize {
        self.targets.len() / self.dim().max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn push<F: Real, P: AsRef<[F]>>(&mut self, neighbors: &[P], target: &[F]) -> Result<()> {
        let d = self.dim();
        if neighbors.len() != self.k
            || target.len() != d
            || neighbors.iter().any(|p| p.as_ref().len() != d)
        {
            return Err(Error::DimensionMismatch(format!(
                "batch expects {} neighbors of {d} values",
                self.k
            )));
        }
        for p in neighbors {
            self.neighbors.extend(p.as_ref().iter().map(|v| v.as_f64()));
        }
        self.targets.extend(target.iter().map(|v| v.as_f64()));
        Ok(())
    }

    pub fn target(&self, r: usize) -> &[f64] {
        let d = self.dim();
        &self.targets[r * d..(r + 1) * d]
    }

    pub fn stack(&self, r: usize) -> &[f64] {
        let n = self.k * self.dim();
        &self.neighbors[r * n..(r + 1) * n]
    }
}

/// Per-stack recentering statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct StackNorm {
    /// `len × d` per-pixel neighbor means.
    pub mu: Vec<f64>,
    pub scale: Vec<f64>,
    pub floored: Vec<bool>,
}

/// Network input `[len, k, side, side]` and the statistics needed to undo the normalization.
pub fn normalize_stacks<F: Real>(batch: &RefBatch) -> Result<(Tensor<F>, StackNorm)> {
    let (k, d) = (batch.k, batch.dim());
    let n = batch.len();
    let mut input = Vec::with_capacity(n * k * d);
    let mut norm = StackNorm {
        mu: Vec::with_capacity(n * d),
        scale: Vec::with_capacity(n),
        floored: Vec::with_capacity(n),
    };
    for r in 0..n {
        let stack = batch.stack(r);
        let mut mu = vec![0.0; d];
        for t in 0..k {
            for i in 0..d {
                mu[i] += stack[t * d + i];
            }
        }
        mu.iter_mut().for_each(|v| *v /= k as f64);
        let mut q = 0.0;
        for t in 0..k {
            for i in 0..d {
                let e = stack[t * d + i] - mu[i];
                q += e * e;
            }
        }
        let rms = (q / (k * d) as f64).sqrt();
        let floored = !(rms > MIN_STACK_SCALE);
        let s = if floored { MIN_STACK_SCALE } else { rms };
        for t in 0..k {
            for i in 0..d {
                input.push(F::lit((stack[t * d + i] - mu[i]) / s));
            }
        }
        norm.mu.extend(mu);
        norm.scale.push(s);
        norm.floored.push(floored);
    }
    Ok((Tensor::new([n, k, batch.side, batch.side], input)?, norm))
}

/// Prior of reference `r` from the network heads.
pub fn prior_from_heads(
    mean_head: &[f64],
    raw_head: &[f64],
    mu: &[f64],
    scale: f64,
) -> Result<GaussianPrior<f64>> {
    let mean = mu
        .iter()
        .zip(mean_head)
        .map(|(m, a)| m + scale * a)
        .collect();
    let l0 = cholesky_assemble(raw_head)?;
    let d = l0.dim();
    let mut l = Matrix::zeros(d);
    for i in 0..d {
        for j in 0..=i {
            l[(i, j)] = scale * l0[(i, j)];
        }
    }
    GaussianPrior::new(mean, l)
}

/// Learned priors for every reference of `batch` (eval-mode normalization).
pub fn learned_priors<F: Real>(
    store: &ParamStore<F>,
    cfg: &NetConfig,
    batch: &RefBatch,
) -> Result<Vec<GaussianPrior<f64>>> {
    let (input, norm) = normalize_stacks::<F>(batch)?;
    let mut g = Graph::new();
    let x = g.input(input)?;
    let (mv, rv) = prior_net_graph(&mut g, store, cfg, x, NormMode::Eval)?;
    let (mean, raw) = (g.value(mv), g.value(rv));
    let d = batch.dim();
    (0..batch.len())
        .map(|r| {
            let a: Vec<f64> = mean.sample(r).iter().map(|v| v.as_f64()).collect();
            let w: Vec<f64> = raw.sample(r).iter().map(|v| v.as_f64()).collect();
            prior_from_heads(&a, &w, &norm.mu[r * d..(r + 1) * d], norm.scale[r])
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ObjectiveOutput<F> {
    /// Mean NLL over the references.
    pub loss: f64,
    pub param_grads: IndexMap<String, Tensor<F>>,
    /// Gradient of the mean loss w.r.t. each reference's `sigma` and `beta`.
    pub d_sigma: Vec<f64>,
    pub d_beta: Vec<f64>,
    /// Gradient of the mean loss w.r.t. the raw neighbor values (`len × k × d`).
    pub d_neighbors: Vec<f64>,
    pub norm_updates: Vec<NormUpdate<F>>,
}

/// Mean NLL of the references under their learned priors and the given noise levels
/// (one per reference, or a single shared one), with gradients.
pub fn prior_objective<F: Real>(
    store: &ParamStore<F>,
    cfg: &NetConfig,
    batch: &RefBatch,
    noise: &[NoiseParams],
    mode: NormMode,
) -> Result<ObjectiveOutput<F>> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty reference batch".into()));
    }
    if noise.len() != 1 && noise.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} noise levels for {n} references",
            noise.len()
        )));
    }
    let (k, d) = (batch.k, batch.dim());
    let t = tri_len(d);
    let (input, norm) = normalize_stacks::<F>(batch)?;
    let mut g = Graph::new();
    let x = g.input(input.clone())?;
    let (mv, rv) = prior_net_graph(&mut g, store, cfg, x, mode)?;
    let inv_n = 1.0 / n as f64;

    let mut loss = 0.0;
    let mut seed_mean = Vec::with_capacity(n * d);
    let mut seed_raw = Vec::with_capacity(n * t);
    let mut d_sigma = Vec::with_capacity(n);
    let mut d_beta = Vec::with_capacity(n);
    let mut d_scale_direct = Vec::with_capacity(n);
    let mut d_mu = Vec::with_capacity(n * d);
    for r in 0..n {
        let a: Vec<f64> = g.value(mv).sample(r).iter().map(|v| v.as_f64()).collect();
        let raw: Vec<f64> = g.value(rv).sample(r).iter().map(|v| v.as_f64()).collect();
        let s = norm.scale[r];
        let prior = prior_from_heads(&a, &raw, &norm.mu[r * d..(r + 1) * d], s)?;
        let nz = noise[if noise.len() == 1 { 0 } else { r }];
        let gr = nll_gradient(batch.target(r), prior.mean(), prior.cov_factor(), nz)?;
        if !gr.loss.is_finite() {
            return Err(Error::NonFinite(format!("loss of reference {r}")));
        }
        loss += gr.loss * inv_n;
        let mut ds = 0.0;
        for i in 0..d {
            seed_mean.push(F::lit(s * gr.d_mean[i] * inv_n));
            ds += gr.d_mean[i] * a[i];
            d_mu.push(gr.d_mean[i] * inv_n);
        }
        let mut d_l0 = Matrix::zeros(d);
        for i in 0..d {
            for j in 0..=i {
                d_l0[(i, j)] = s * gr.d_factor[(i, j)] * inv_n;
                // L = s·L0, so ∂/∂s picks up L0 = L / s
                ds += gr.d_factor[(i, j)] * prior.cov_factor()[(i, j)] / s;
            }
        }
        seed_raw.extend(
            cholesky_assemble_backward(&raw, &d_l0)?
                .into_iter()
                .map(F::lit),
        );
        d_scale_direct.push(ds * inv_n);
        d_sigma.push(gr.d_sigma * inv_n);
        d_beta.push(gr.d_beta * inv_n);
    }
    let seeds = [
        (mv, Tensor::new(g.value(mv).shape(), seed_mean)?),
        (rv, Tensor::new(g.value(rv).shape(), seed_raw)?),
    ];
    let grads = g.backward(&seeds)?;
    let g_in = grads
        .input(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(input.shape()));
    let norm_updates = g.take_norm_updates();
    let param_grads = grads.into_params();

    let mut d_neighbors = vec![0.0; n * k * d];
    for r in 0..n {
        let s = norm.scale[r];
        let gi = g_in.sample(r);
        let xi = input.sample(r);
        let stack = batch.stack(r);
        let mut ds = d_scale_direct[r];
        for (gv, xv) in gi.iter().zip(xi) {
            ds -= gv.as_f64() * xv.as_f64() / s;
        }
        let mut gbar = vec![0.0; d];
        for tt in 0..k {
            for i in 0..d {
                gbar[i] += gi[tt * d + i].as_f64() / k as f64;
            }
        }
        let mu = &norm.mu[r * d..(r + 1) * d];
        let out = &mut d_neighbors[r * k * d..(r + 1) * k * d];
        for tt in 0..k {
            for i in 0..d {
                let idx = tt * d + i;
                let mut v = (gi[idx].as_f64() - gbar[i]) / s + d_mu[r * d + i] / k as f64;
                if !norm.floored[r] {
                    v += ds * (stack[idx] - mu[i]) / ((k * d) as f64 * s);
                }
                out[idx] = v;
            }
        }
    }
    Ok(ObjectiveOutput {
        loss,
        param_grads,
        d_sigma,
        d_beta,
        d_neighbors,
        norm_updates,
    })
}
