//! Dense patch-wise MAP denoising with classical or learned priors.

use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::config::{DenoiseConfig, Engine};
use super::estimate::estimate_noise;
use super::objective::{learned_priors, RefBatch};
use crate::autonet::{embed_net_graph, noise_net_forward, Graph, Tensor};
use crate::bayes::{likelihood_from_prior, map_estimate, mle_prior, GaussianPrior, NoiseParams};
use crate::error::{Error, Result};
use crate::imaging::{extract_patches, reconstruct_dense_flat, Image, PatchGrid};
use crate::nonlocal::{find_neighbors, FeatureMap, SearchMode};

/// References processed together; fixed so results do not depend on the thread count.
const REF_CHUNK: usize = 256;

/// A configured denoiser, optionally holding a trained model.
#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiseConfig,
    model: Option<Checkpoint>,
}

impl Denoiser {
    pub fn new(cfg: DenoiseConfig, model: Option<Checkpoint>) -> Result<Self> {
        cfg.validate()?;
        if cfg.engine == Engine::Learned {
            let m = model.as_ref().ok_or_else(|| {
                Error::InvalidArgument("learned engine needs a checkpoint".into())
            })?;
            let side = cfg.effective_patch_side();
            if m.net.patch_side != side {
                return Err(Error::CheckpointMismatch(format!(
                    "checkpoint patch side {} but denoising with patch side {side}",
                    m.net.patch_side
                )));
            }
            if m.net.k != cfg.k {
                return Err(Error::CheckpointMismatch(format!(
                    "checkpoint trained with k = {} but denoising with k = {}",
                    m.net.k, cfg.k
                )));
            }
            if cfg.mode == SearchMode::NonlocalEmbedding && !m.has_embedding() {
                return Err(Error::CheckpointMismatch(
                    "embedding search requested but the checkpoint has no embedding network".into(),
                ));
            }
        } else if cfg.mode == SearchMode::NonlocalEmbedding {
            return Err(Error::Config(
                "embedding search requires the learned engine".into(),
            ));
        }
        Ok(Denoiser { cfg, model })
    }

    pub fn config(&self) -> &DenoiseConfig {
        &self.cfg
    }

    /// Denoises every channel independently.
    pub fn denoise(&self, img: &Image<f64>) -> Result<Image<f64>> {
        if self.cfg.engine == Engine::Identity {
            return Ok(img.clone());
        }
        let planes = (0..img.channels())
            .map(|ch| self.denoise_plane(&img.channel(ch)))
            .collect::<Result<Vec<_>>>()?;
        Image::from_channels(&planes)
    }

    fn noise_for(&self, plane: &Image<f64>, refs: &PatchGrid<f64>) -> Result<Vec<NoiseParams>> {
        if let Some(n) = self.cfg.noise {
            return Ok(vec![n]);
        }
        match (self.cfg.engine, &self.model) {
            (Engine::Learned, Some(m)) => match m.train.noise {
                super::NoiseModel::Known(n) => Ok(vec![n]),
                super::NoiseModel::Blind => {
                    let input = Tensor::new(
                        [1, 1, plane.height(), plane.width()],
                        plane.data().iter().map(|&v| v as f32).collect(),
                    )?;
                    let anchors = refs.anchors();
                    let (sigma, betas) =
                        noise_net_forward(&m.params, &m.net, &input, &anchors, refs.side())?;
                    betas
                        .iter()
                        .map(|&b| NoiseParams::new(sigma as f64, b as f64))
                        .collect()
                }
            },
            _ => Ok(vec![estimate_noise(plane)?]),
        }
    }

    fn features(&self, plane: &Image<f64>) -> Result<Option<FeatureMap<f64>>> {
        if self.cfg.mode != SearchMode::NonlocalEmbedding {
            return Ok(None);
        }
        let m = self.model.as_ref().expect("validated in new");
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(
            [1, 1, plane.height(), plane.width()],
            plane.data().iter().map(|&v| v as f32).collect(),
        )?)?;
        let e = embed_net_graph(&mut g, &m.params, &m.net, x)?;
        let t = g.value(e);
        let [_, c, h, w] = t.shape();
        Ok(Some(FeatureMap {
            channels: c,
            height: h,
            width: w,
            data: t.data().iter().map(|&v| v as f64).collect(),
        }))
    }

    fn denoise_plane(&self, plane: &Image<f64>) -> Result<Image<f64>> {
        let side = self.cfg.effective_patch_side();
        let search = extract_patches(plane, side, 1)?;
        let refs = if self.cfg.stride == 1 {
            search.clone()
        } else {
            extract_patches(plane, side, self.cfg.stride)?
        };
        let noise = self.noise_for(plane, &refs)?;
        let features = self.features(plane)?;
        let scfg = self.cfg.search_config();
        let d = side * side;
        let chunks: Vec<Vec<f64>> = (0..refs.len())
            .collect::<Vec<_>>()
            .par_chunks(REF_CHUNK)
            .map(|chunk| -> Result<Vec<f64>> {
                let mut sets = Vec::with_capacity(chunk.len());
                for &ri in chunk {
                    let (r, c) = refs.anchor(ri);
                    let si = search.index_of(r, c);
                    sets.push(find_neighbors(
                        &search,
                        si,
                        &scfg,
                        features.as_ref(),
                        self.cfg.temperature,
                    )?);
                }
                let priors: Vec<GaussianPrior<f64>> = match (&self.model, self.cfg.engine) {
                    (Some(m), Engine::Learned) => {
                        let mut batch = RefBatch::new(scfg.k, side);
                        for (set, &ri) in sets.iter().zip(chunk) {
                            let nb: Vec<&[f64]> = set
                                .neighbor_patches
                                .iter()
                                .map(|p| p.values.as_slice())
                                .collect();
                            batch.push(&nb, refs.patch_values(ri))?;
                        }
                        learned_priors(&m.params, &m.net, &batch)?
                    }
                    _ => sets
                        .iter()
                        .map(|set| {
                            let nb: Vec<&[f64]> = set
                                .neighbor_patches
                                .iter()
                                .map(|p| p.values.as_slice())
                                .collect();
                            mle_prior(&nb)
                        })
                        .collect::<Result<_>>()?,
                };
                let mut out = Vec::with_capacity(chunk.len() * d);
                for (prior, &ri) in priors.iter().zip(chunk) {
                    let nz = noise[if noise.len() == 1 { 0 } else { ri }];
                    let lik = likelihood_from_prior(prior, nz);
                    out.extend(map_estimate(prior, &lik, refs.patch_values(ri))?.values);
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        let values: Vec<f64> = chunks.into_iter().flatten().collect();
        reconstruct_dense_flat(&refs, &values)
    }
}

/// Denoises `img` with the given configuration (and checkpoint, for the learned engine).
pub fn denoise(
    img: &Image<f64>,
    model: Option<&Checkpoint>,
    cfg: &DenoiseConfig,
) -> Result<Image<f64>> {
    Denoiser::new(cfg.clone(), model.cloned())?.denoise(img)
}
