//! Self-supervised training on noisy images only.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::{NoiseModel, TrainConfig};
use super::objective::{prior_objective, RefBatch};
use crate::autonet::{
    adam_step, embed_net_graph, embed_net_init, noise_net_graph, noise_net_init, prior_net_init,
    Adam, Graph, NormMode, ParamStore, Tensor, Var,
};
use crate::bayes::NoiseParams;
use crate::error::{Error, Result};
use crate::imaging::{extract_patches, load_image, Image, PatchGrid};
use crate::nonlocal::{
    knn_embedding, knn_exact, local_adjacent, EmbeddingSelection, FeatureMap, SearchMode,
};

/// Per-pixel weight of the `−(sigma + mean beta)` term that keeps blind noise
/// estimates from collapsing. The patch NLL sums `d` pixels, so the applied weight is `0.1·d`.
pub const NOISE_REGULARIZER: f64 = 0.1;

/// Progress after each epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    /// Mean estimated `sigma` and `beta` over the epoch (blind mode only).
    pub noise: Option<NoiseParams>,
}

/// Image files (`.pgm`, `.nlbf`) directly inside `dir`, sorted by name.
pub fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("pgm") | Some("nlbf")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads every image in `dir`, splitting multi-channel images into single planes.
pub fn load_training_images(dir: &Path) -> Result<Vec<Image<f64>>> {
    let mut out = Vec::new();
    for path in image_files(dir)? {
        let img: Image<f64> = load_image(&path)?;
        for ch in 0..img.channels() {
            out.push(img.channel(ch));
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyData(dir.to_path_buf()));
    }
    Ok(out)
}

/// Trains on the noisy images found in `data_dir`.
pub fn train(data_dir: &Path, cfg: &TrainConfig) -> Result<Checkpoint> {
    let images = load_training_images(data_dir)?;
    train_images(&images, cfg, |_| {})
}

struct CropWork {
    crop: Image<f64>,
    grid: PatchGrid<f64>,
    refs: Vec<usize>,
    graph: Option<Graph<f32>>,
    sigma: Option<Var>,
    beta: Option<Var>,
    embed: Option<Var>,
    selections: Vec<EmbeddingSelection<f64>>,
}

fn crop_tensor(img: &Image<f64>) -> Result<Tensor<f32>> {
    Tensor::new(
        [1, 1, img.height(), img.width()],
        img.data().iter().map(|&v| v as f32).collect(),
    )
}

fn init_store(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore<f32>> {
    let net = cfg.net_config();
    let mut store = ParamStore::new();
    prior_net_init(&mut store, &net, rng)?;
    if cfg.noise == NoiseModel::Blind {
        noise_net_init(&mut store, &net, rng)?;
    }
    if cfg.mode == SearchMode::NonlocalEmbedding {
        embed_net_init(&mut store, rng)?;
    }
    Ok(store)
}

fn merge(into: &mut IndexMap<String, Tensor<f32>>, from: IndexMap<String, Tensor<f32>>) {
    for (k, v) in from {
        match into.get_mut(&k) {
            Some(acc) => acc.add_assign(&v),
            None => {
                into.insert(k, v);
            }
        }
    }
}

/// Straight-through gradient of the embedded distances: each round's hard pick is
/// differentiated as if it were the softmax-weighted mix of that round's candidates.
fn embedding_seed(
    sel: &EmbeddingSelection<f64>,
    grid: &PatchGrid<f64>,
    d_neighbors: &[f64],
    features: &FeatureMap<f64>,
    seed: &mut [f32],
) {
    let d = grid.dim();
    let side = grid.side();
    let (h, w) = (features.height, features.width);
    let ref_anchor = grid.anchor(sel.set.reference_index);
    for (t, round) in sel.rounds.iter().enumerate() {
        let g = &d_neighbors[t * d..(t + 1) * d];
        let scores: Vec<f64> = round
            .remaining
            .iter()
            .map(|&pos| {
                let p = grid.patch_values(sel.candidates[pos]);
                g.iter().zip(p).map(|(a, b)| a * b).sum()
            })
            .collect();
        let mean: f64 = scores.iter().zip(&round.probs).map(|(s, p)| s * p).sum();
        for ((&pos, &p), &s) in round.remaining.iter().zip(&round.probs).zip(&scores) {
            let d_logit = p * (s - mean);
            if d_logit.abs() < 1e-12 {
                continue;
            }
            let d_dist = -d_logit / sel.temperature;
            let cand = grid.anchor(sel.candidates[pos]);
            for ch in 0..features.channels {
                for i in 0..side {
                    for j in 0..side {
                        let ia = (ch * h + ref_anchor.0 + i) * w + ref_anchor.1 + j;
                        let ib = (ch * h + cand.0 + i) * w + cand.1 + j;
                        let diff = features.data[ia] - features.data[ib];
                        let v = (2.0 * d_dist * diff) as f32;
                        seed[ia] += v;
                        seed[ib] -= v;
                    }
                }
            }
        }
    }
}

/// Trains the prior network (plus the noise and embedding networks when configured)
/// on noisy images. `on_epoch` is called after every epoch.
pub fn train_images(
    images: &[Image<f64>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<Checkpoint> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::EmptyData(PathBuf::new()));
    }
    if let Some(img) = images.iter().find(|im| im.channels() != 1) {
        return Err(Error::DimensionMismatch(format!(
            "training expects single-channel planes, got {} channels",
            img.channels()
        )));
    }
    let side = cfg.patch_side;
    if let Some(img) = images
        .iter()
        .find(|im| im.height() < 3 * side || im.width() < 3 * side)
    {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} image is smaller than three patch sides",
            img.width(),
            img.height()
        )));
    }
    let net = cfg.net_config();
    let scfg = cfg.search_config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = init_store(cfg, &mut rng)?;
    let blind = cfg.noise == NoiseModel::Blind;
    let steps_per_epoch = (images.len() * cfg.crops_per_image).div_ceil(cfg.batch);
    let mut step: u64 = 0;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr * 0.5f64.powi((epoch / cfg.lr_halve_every) as i32);
        let opt = Adam::with_lr(lr);
        let mut epoch_loss = 0.0;
        let (mut sig_sum, mut beta_sum) = (0.0, 0.0);
        for _ in 0..steps_per_epoch {
            let mut work = Vec::with_capacity(cfg.batch);
            for b in 0..cfg.batch {
                let img = &images[rng.random_range(0..images.len())];
                let ch = cfg.crop.min(img.height());
                let cw = cfg.crop.min(img.width());
                let r0 = rng.random_range(0..=img.height() - ch);
                let c0 = rng.random_range(0..=img.width() - cw);
                let crop = img.crop(r0, c0, ch, cw)?;
                let grid = extract_patches(&crop, side, 1)?;
                let want =
                    cfg.refs_per_step / cfg.batch + usize::from(b < cfg.refs_per_step % cfg.batch);
                let refs = sample(&mut rng, grid.len(), want.min(grid.len())).into_vec();
                work.push(CropWork {
                    crop,
                    grid,
                    refs,
                    graph: None,
                    sigma: None,
                    beta: None,
                    embed: None,
                    selections: Vec::new(),
                });
            }

            let mut batch = RefBatch::new(cfg.k, side);
            let mut noise = Vec::new();
            for wk in work.iter_mut() {
                let needs_graph = blind || cfg.mode == SearchMode::NonlocalEmbedding;
                if needs_graph {
                    let mut g = Graph::new();
                    let x = g.input(crop_tensor(&wk.crop)?)?;
                    if blind {
                        let anchors: Vec<(usize, usize)> =
                            wk.refs.iter().map(|&i| wk.grid.anchor(i)).collect();
                        let (s, b) = noise_net_graph(&mut g, &store, &net, x, &anchors, side)?;
                        wk.sigma = Some(s);
                        wk.beta = Some(b);
                    }
                    if cfg.mode == SearchMode::NonlocalEmbedding {
                        wk.embed = Some(embed_net_graph(&mut g, &store, &net, x)?);
                    }
                    wk.graph = Some(g);
                }
                let features = match (wk.embed, &wk.graph) {
                    (Some(e), Some(g)) => {
                        let t = g.value(e);
                        let [_, c, h, w] = t.shape();
                        Some(FeatureMap {
                            channels: c,
                            height: h,
                            width: w,
                            data: t.data().iter().map(|&v| v as f64).collect(),
                        })
                    }
                    _ => None,
                };
                for (j, &ri) in wk.refs.iter().enumerate() {
                    let set = match cfg.mode {
                        SearchMode::NonlocalExact => knn_exact(&wk.grid, ri, &scfg)?,
                        SearchMode::LocalAdjacent => local_adjacent(&wk.grid, ri, &scfg)?,
                        SearchMode::NonlocalEmbedding => {
                            let f = features.as_ref().expect("embedding graph recorded");
                            let sel = knn_embedding(
                                &wk.grid,
                                ri,
                                &scfg,
                                f,
                                cfg.temperature,
                                Some(&mut rng),
                            )?;
                            let set = sel.set.clone();
                            wk.selections.push(sel);
                            set
                        }
                    };
                    let nb: Vec<&[f64]> = set
                        .neighbor_patches
                        .iter()
                        .map(|p| p.values.as_slice())
                        .collect();
                    batch.push(&nb, wk.grid.patch_values(ri))?;
                    if let (Some(s), Some(b), Some(g)) = (wk.sigma, wk.beta, &wk.graph) {
                        let sigma = g.value(s).data()[0] as f64;
                        let beta = g.value(b).data()[j] as f64;
                        noise.push(NoiseParams::new(sigma, beta)?);
                    }
                }
            }
            if let NoiseModel::Known(n) = cfg.noise {
                noise.push(n);
            }

            let out = prior_objective(&store, &net, &batch, &noise, NormMode::Train)?;
            let mut grads = out.param_grads;
            let mut loss = out.loss;
            let n_refs = batch.len();
            let dim = batch.dim();
            let mut offset = 0;
            for wk in work.iter_mut() {
                let count = wk.refs.len();
                let Some(g) = wk.graph.take() else {
                    offset += count;
                    continue;
                };
                let mut seeds = Vec::new();
                if let (Some(s), Some(b)) = (wk.sigma, wk.beta) {
                    let sigma = g.value(s).data()[0] as f64;
                    let betas = g.value(b).data();
                    let weight = NOISE_REGULARIZER * dim as f64;
                    let reg_s = weight / cfg.batch as f64;
                    let reg_b = weight / n_refs as f64;
                    loss -= reg_s * sigma + reg_b * betas.iter().map(|&v| v as f64).sum::<f64>();
                    sig_sum += sigma / cfg.batch as f64;
                    beta_sum += betas.iter().map(|&v| v as f64).sum::<f64>() / n_refs as f64;
                    let ds: f64 = out.d_sigma[offset..offset + count].iter().sum::<f64>() - reg_s;
                    seeds.push((s, Tensor::scalar(ds as f32)));
                    let db: Vec<f32> = out.d_beta[offset..offset + count]
                        .iter()
                        .map(|v| (v - reg_b) as f32)
                        .collect();
                    seeds.push((b, Tensor::new(g.value(b).shape(), db)?));
                }
                if let Some(e) = wk.embed {
                    let t = g.value(e);
                    let [_, c, h, w] = t.shape();
                    let features = FeatureMap {
                        channels: c,
                        height: h,
                        width: w,
                        data: t.data().iter().map(|&v| v as f64).collect(),
                    };
                    let mut seed = vec![0f32; t.len()];
                    let per = cfg.k * dim;
                    for (j, sel) in wk.selections.iter().enumerate() {
                        let r = offset + j;
                        embedding_seed(
                            sel,
                            &wk.grid,
                            &out.d_neighbors[r * per..(r + 1) * per],
                            &features,
                            &mut seed,
                        );
                    }
                    seeds.push((e, Tensor::new(t.shape(), seed)?));
                }
                merge(&mut grads, g.backward(&seeds)?.into_params());
                offset += count;
            }
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, step {step}"
                )));
            }
            step += 1;
            store.apply_norm_updates(&out.norm_updates)?;
            adam_step(&mut store, &grads, &opt, step)?;
            epoch_loss += loss;
        }
        let spe = steps_per_epoch as f64;
        let report = EpochReport {
            epoch,
            mean_loss: epoch_loss / spe,
            lr,
            noise: blind.then(|| NoiseParams {
                sigma: sig_sum / spe,
                beta: beta_sum / spe,
            }),
        };
        history.push(report.mean_loss);
        on_epoch(&report);
    }
    Ok(Checkpoint {
        train: cfg.clone(),
        net,
        step,
        loss_history: history,
        params: store,
    })
}
