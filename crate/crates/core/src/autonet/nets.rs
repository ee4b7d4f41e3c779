//! Prior, noise-level and patch-embedding networks built on [`Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::ops::NormMode;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::bayes::tri_len;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Convolution layers in the noise-level network trunk.
pub const NOISE_DEPTH: usize = 5;
/// Multiplier on the softplus outputs of the noise heads (intensity units).
pub const NOISE_OUTPUT_SCALE: f64 = 0.1;
/// Convolution layers in the embedding network.
pub const EMBED_DEPTH: usize = 3;
/// Feature channels per pixel produced by the embedding network.
pub const EMBED_FEATURES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Convolution layers in the prior trunk.
    pub depth: usize,
    pub features: usize,
    pub patch_side: usize,
    pub k: usize,
    pub use_norm: bool,
    pub leaky_slope: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            depth: 6,
            features: 32,
            patch_side: 5,
            k: 8,
            use_norm: false,
            leaky_slope: 0.1,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 3 {
            return Err(Error::Config(format!(
                "depth must be at least 3, got {}",
                self.depth
            )));
        }
        if self.features < 8 {
            return Err(Error::Config(format!(
                "features must be at least 8, got {}",
                self.features
            )));
        }
        if self.patch_side == 0 || self.k == 0 {
            return Err(Error::Config("patch_side and k must be positive".into()));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky_slope must lie in [0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.patch_side * self.patch_side
    }

    fn slope<F: Real>(&self) -> F {
        F::lit(self.leaky_slope)
    }
}

fn conv<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    name: &str,
    x: Var,
    pad: usize,
) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    g.conv2d(x, w, b, 1, pad)
}

/// Registers the prior network parameters under `prior.*`.
pub fn prior_net_init<F: Real, R: Rng>(
    store: &mut ParamStore<F>,
    cfg: &NetConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let f = cfg.features;
    store.init_conv("prior.conv1", cfg.k, f, 3, rng)?;
    for i in 2..=cfg.depth {
        store.init_conv(&format!("prior.conv{i}"), f, f, 3, rng)?;
        if cfg.use_norm && i < cfg.depth {
            store.init_norm(&format!("prior.bn{i}"), f)?;
        }
    }
    store.init_conv_zero("prior.mean", f, cfg.dim(), 1)?;
    store.init_conv_zero("prior.cov", f, tri_len(cfg.dim()), 1)
}

/// Records the prior network on `g` for a `[n, k, side, side]` neighbor stack.
/// Returns the mean head `[n, d, 1, 1]` and the raw Cholesky head `[n, d(d+1)/2, 1, 1]`.
pub fn prior_net_graph<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    cfg: &NetConfig,
    input: Var,
    mode: NormMode,
) -> Result<(Var, Var)> {
    let [_, k, h, w] = g.value(input).shape();
    if k != cfg.k || h != cfg.patch_side || w != cfg.patch_side {
        return Err(Error::DimensionMismatch(format!(
            "prior net expects [n, {}, {s}, {s}] input, got [n, {k}, {h}, {w}]",
            cfg.k,
            s = cfg.patch_side
        )));
    }
    let slope = cfg.slope();
    let first = conv(g, store, "prior.conv1", input, 1)?;
    let mut h = g.leaky_relu(first, slope)?;
    for i in 2..=cfg.depth {
        h = conv(g, store, &format!("prior.conv{i}"), h, 1)?;
        if i < cfg.depth {
            if cfg.use_norm {
                h = g.batch_norm(store, &format!("prior.bn{i}"), h, mode)?;
            }
            h = g.leaky_relu(h, slope)?;
        }
    }
    let skip = g.add(h, first)?;
    let act = g.leaky_relu(skip, slope)?;
    let pooled = g.avg_pool(act, cfg.patch_side)?;
    let mean = conv(g, store, "prior.mean", pooled, 0)?;
    let raw = conv(g, store, "prior.cov", pooled, 0)?;
    Ok((mean, raw))
}

/// Evaluates the prior network on a neighbor stack, returning `(mean, raw)` heads.
pub fn prior_net_forward<F: Real>(
    store: &ParamStore<F>,
    cfg: &NetConfig,
    neighbors: &Tensor<F>,
    mode: NormMode,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let mut g = Graph::new();
    let x = g.input(neighbors.clone())?;
    let (m, r) = prior_net_graph(&mut g, store, cfg, x, mode)?;
    Ok((g.value(m).clone(), g.value(r).clone()))
}

/// Registers the noise-level network parameters under `noise.*`.
pub fn noise_net_init<F: Real, R: Rng>(
    store: &mut ParamStore<F>,
    cfg: &NetConfig,
    rng: &mut R,
) -> Result<()> {
    let f = cfg.features;
    store.init_conv("noise.conv1", 1, f, 3, rng)?;
    for i in 2..=NOISE_DEPTH {
        store.init_conv(&format!("noise.conv{i}"), f, f, 3, rng)?;
    }
    store.init_conv_zero("noise.sigma", f, 1, 1)?;
    store.init_conv_zero("noise.beta", f, 1, 1)
}

/// Records the noise network on a `[1, 1, h, w]` image. Returns the image-wide
/// `sigma` (`[1, 1, 1, 1]`) and one `beta` per anchor window (`[p, 1, 1, 1]`).
pub fn noise_net_graph<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    cfg: &NetConfig,
    image: Var,
    anchors: &[(usize, usize)],
    side: usize,
) -> Result<(Var, Var)> {
    let slope = cfg.slope();
    let mut h = image;
    for i in 1..=NOISE_DEPTH {
        h = conv(g, store, &format!("noise.conv{i}"), h, 1)?;
        h = g.leaky_relu(h, slope)?;
    }
    let scale = F::lit(NOISE_OUTPUT_SCALE);
    let s = conv(g, store, "noise.sigma", h, 0)?;
    let s = g.global_mean(s)?;
    let s = g.softplus(s)?;
    let sigma = g.scale(s, scale)?;
    let b = conv(g, store, "noise.beta", h, 0)?;
    let b = g.window_mean(b, anchors, side)?;
    let b = g.softplus(b)?;
    let beta = g.scale(b, scale)?;
    Ok((sigma, beta))
}

/// Evaluates the noise network, returning `(sigma, beta per anchor)`.
pub fn noise_net_forward<F: Real>(
    store: &ParamStore<F>,
    cfg: &NetConfig,
    image: &Tensor<F>,
    anchors: &[(usize, usize)],
    side: usize,
) -> Result<(F, Vec<F>)> {
    let mut g = Graph::new();
    let x = g.input(image.clone())?;
    let (s, b) = noise_net_graph(&mut g, store, cfg, x, anchors, side)?;
    Ok((g.value(s).data()[0], g.value(b).data().to_vec()))
}

/// Registers the embedding network parameters under `embed.*`.
pub fn embed_net_init<F: Real, R: Rng>(store: &mut ParamStore<F>, rng: &mut R) -> Result<()> {
    store.init_conv("embed.conv1", 1, EMBED_FEATURES, 3, rng)?;
    for i in 2..=EMBED_DEPTH {
        store.init_conv(
            &format!("embed.conv{i}"),
            EMBED_FEATURES,
            EMBED_FEATURES,
            3,
            rng,
        )?;
    }
    Ok(())
}

/// Records the embedding network on a `[1, 1, h, w]` image, giving `[1, EMBED_FEATURES, h, w]`.
pub fn embed_net_graph<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    cfg: &NetConfig,
    image: Var,
) -> Result<Var> {
    let mut h = image;
    for i in 1..=EMBED_DEPTH {
        h = conv(g, store, &format!("embed.conv{i}"), h, 1)?;
        if i < EMBED_DEPTH {
            h = g.leaky_relu(h, cfg.slope())?;
        }
    }
    Ok(h)
}
