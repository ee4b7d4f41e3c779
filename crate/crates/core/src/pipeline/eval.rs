//! Metrics tables over aligned image pairs and ablation sweeps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::checkpoint::Checkpoint;
use super::config::{format_kv, DenoiseConfig, Engine, TrainConfig};
use super::denoise::Denoiser;
use super::train::train_images;
use crate::error::{Error, Result};
use crate::imaging::{load_image, psnr, ssim, Image};
use crate::nonlocal::SearchMode;

/// A noisy observation with its reference image.
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub name: String,
    pub noisy: Image<f64>,
    pub reference: Image<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub image: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-image scores with their mean and standard error of the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

/// Sample mean and standard error (`NaN` for fewer than two values).
pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v:.6}")
    }
}

impl MetricsTable {
    pub fn psnr_mean_sem(&self) -> (f64, f64) {
        mean_sem(&self.rows.iter().map(|r| r.psnr_db).collect::<Vec<_>>())
    }

    pub fn ssim_mean_sem(&self) -> (f64, f64) {
        mean_sem(&self.rows.iter().map(|r| r.ssim).collect::<Vec<_>>())
    }

    /// CSV with header `image,psnr_db,ssim` followed by `mean` and `sem` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,psnr_db,ssim\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{}",
                r.image,
                fmt_value(r.psnr_db),
                fmt_value(r.ssim)
            );
        }
        let (pm, ps) = self.psnr_mean_sem();
        let (sm, ss) = self.ssim_mean_sem();
        let _ = writeln!(out, "mean,{},{}", fmt_value(pm), fmt_value(sm));
        let _ = writeln!(out, "sem,{},{}", fmt_value(ps), fmt_value(ss));
        out
    }
}

/// Denoises every noisy image and scores it against its reference.
pub fn evaluate(pairs: &[ImagePair], denoiser: &Denoiser) -> Result<MetricsTable> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no image pairs to evaluate".into()));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for p in pairs {
        if !p.noisy.same_shape(&p.reference) {
            return Err(Error::DimensionMismatch(format!(
                "{}: noisy {}x{}x{} vs reference {}x{}x{}",
                p.name,
                p.noisy.width(),
                p.noisy.height(),
                p.noisy.channels(),
                p.reference.width(),
                p.reference.height(),
                p.reference.channels()
            )));
        }
        let out = denoiser.denoise(&p.noisy)?;
        rows.push(MetricsRow {
            image: p.name.clone(),
            psnr_db: psnr(&out, &p.reference)?,
            ssim: ssim(&out, &p.reference)?,
        });
    }
    Ok(MetricsTable { rows })
}

/// Reads a manifest of `noisy_path,reference_path` lines. Relative paths resolve
/// against the manifest's directory; blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (a, b) = line.split_once(',').ok_or_else(|| {
            Error::Config(format!(
                "manifest line {}: expected noisy,reference",
                no + 1
            ))
        })?;
        out.push((base.join(a.trim()), base.join(b.trim())));
    }
    if out.is_empty() {
        return Err(Error::EmptyData(path.to_path_buf()));
    }
    Ok(out)
}

/// Loads every pair listed in a manifest; each pair is named after its noisy file.
pub fn load_pairs(manifest: &Path) -> Result<Vec<ImagePair>> {
    read_manifest(manifest)?
        .into_iter()
        .map(|(n, r)| {
            Ok(ImagePair {
                name: n
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                noisy: load_image(&n)?,
                reference: load_image(&r)?,
            })
        })
        .collect()
}

/// Cells of an ablation sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub k: Vec<usize>,
    pub patch_side: Vec<usize>,
    pub mode: Vec<SearchMode>,
}

impl AblationGrid {
    /// Parses `k=4,8;side=5;mode=nonlocal,local`. Missing axes take the single base value.
    pub fn parse(text: &str, base: &DenoiseConfig) -> Result<Self> {
        let mut grid = AblationGrid {
            k: vec![base.k],
            patch_side: vec![base.patch_side],
            mode: vec![base.mode],
        };
        for part in text.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, values) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("grid axis {part:?}: expected key=v1,v2")))?;
            let values: Vec<&str> = values
                .split(',')
                .map(str::trim)
                .filter(|v| !v.is_empty())
                .collect();
            if values.is_empty() {
                return Err(Error::Config(format!("grid axis {key:?} has no values")));
            }
            let nums = || -> Result<Vec<usize>> {
                values
                    .iter()
                    .map(|v| {
                        v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
                            Error::Config(format!("grid axis {key:?}: bad value {v:?}"))
                        })
                    })
                    .collect()
            };
            match key.trim() {
                "k" => grid.k = nums()?,
                "side" | "patch_side" => grid.patch_side = nums()?,
                "mode" => grid.mode = values.iter().map(|v| v.parse()).collect::<Result<_>>()?,
                other => return Err(Error::Config(format!("unknown grid axis {other:?}"))),
            }
        }
        Ok(grid)
    }

    /// Cells in row-major order: `k`, then patch side, then mode.
    pub fn cells(&self) -> Vec<(usize, usize, SearchMode)> {
        let mut out = Vec::new();
        for &k in &self.k {
            for &s in &self.patch_side {
                for &m in &self.mode {
                    out.push((k, s, m));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub k: usize,
    pub patch_side: usize,
    pub mode: SearchMode,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// CSV with header `k,patch_side,mode,psnr_db,ssim`.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("k,patch_side,mode,psnr_db,ssim\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.k,
            r.patch_side,
            r.mode,
            fmt_value(r.psnr_db),
            fmt_value(r.ssim)
        );
    }
    out
}

/// Base settings of an ablation sweep.
#[derive(Debug, Clone)]
pub struct AblationSetup {
    /// Training settings for the learned engine; ignored otherwise.
    pub train: TrainConfig,
    pub denoise: DenoiseConfig,
    /// Where trained checkpoints are cached; `None` disables caching.
    pub cache_dir: Option<PathBuf>,
}

/// Cache key of a training run: SHA-256 over the resolved config and the training data.
pub fn training_key(cfg: &TrainConfig, images: &[Image<f64>]) -> String {
    let mut h = Sha256::new();
    h.update(format_kv(&cfg.to_pairs()).as_bytes());
    for img in images {
        h.update((img.width() as u64).to_le_bytes());
        h.update((img.height() as u64).to_le_bytes());
        for v in img.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn trained_model(
    cfg: &TrainConfig,
    images: &[Image<f64>],
    cache: Option<&Path>,
) -> Result<Checkpoint> {
    let path = cache.map(|dir| dir.join(format!("{}.nlbc", training_key(cfg, images))));
    if let Some(p) = &path {
        if p.is_file() {
            return Checkpoint::load(p);
        }
    }
    let ckpt = train_images(images, cfg, |_| {})?;
    if let (Some(p), Some(dir)) = (&path, cache) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        ckpt.save(p)?;
    }
    Ok(ckpt)
}

/// Evaluates every grid cell on `pairs`. With the learned engine each cell trains
/// on the noisy images (or reuses a cached checkpoint).
pub fn ablate(
    pairs: &[ImagePair],
    setup: &AblationSetup,
    grid: &AblationGrid,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    let training: Vec<Image<f64>> = pairs
        .iter()
        .flat_map(|p| (0..p.noisy.channels()).map(|c| p.noisy.channel(c)))
        .collect();
    for (k, side, mode) in grid.cells() {
        let mut dcfg = setup.denoise.clone();
        dcfg.k = k;
        dcfg.patch_side = side;
        dcfg.mode = mode;
        let model = if dcfg.engine == Engine::Learned {
            let mut tcfg = setup.train.clone();
            tcfg.k = k;
            tcfg.patch_side = dcfg.effective_patch_side();
            tcfg.mode = mode;
            Some(trained_model(&tcfg, &training, setup.cache_dir.as_deref())?)
        } else {
            None
        };
        let table = evaluate(pairs, &Denoiser::new(dcfg, model)?)?;
        rows.push(AblationRow {
            k,
            patch_side: side,
            mode,
            psnr_db: table.psnr_mean_sem().0,
            ssim: table.ssim_mean_sem().0,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sem_of_two_values_is_half_their_spread() {
        let (m, s) = mean_sem(&[30.0, 32.0]);
        assert_eq!(m, 31.0);
        // sample std of {30, 32} is √2, divided by √2
        assert!((s - 1.0).abs() < 1e-12);
        assert!(mean_sem(&[1.0]).1.is_nan());
    }

    #[test]
    fn csv_prints_inf_and_nan() {
        let t = MetricsTable {
            rows: vec![MetricsRow {
                image: "a.pgm".into(),
                psnr_db: f64::INFINITY,
                ssim: 1.0,
            }],
        };
        assert_eq!(
            t.to_csv(),
            "image,psnr_db,ssim\na.pgm,inf,1.000000\nmean,inf,1.000000\nsem,nan,nan\n"
        );
    }

    #[test]
    fn grid_parsing_and_cell_count() {
        let base = DenoiseConfig::default();
        let g = AblationGrid::parse("k=4,8;side=5", &base).unwrap();
        assert_eq!(g.cells().len(), 2);
        let g = AblationGrid::parse("k=4,8,16; patch_side=1,3,5,7; mode=nonlocal,local", &base)
            .unwrap();
        assert_eq!(g.cells().len(), 24);
        assert_eq!(g.cells()[1], (4, 1, SearchMode::LocalAdjacent));
        assert!(AblationGrid::parse("k=0", &base).is_err());
        assert!(AblationGrid::parse("depth=3", &base).is_err());
        assert!(AblationGrid::parse("k", &base).is_err());
    }

    #[test]
    fn training_key_tracks_config_and_data() {
        let img = vec![Image::filled(8, 8, 1, 0.5)];
        let cfg = TrainConfig::default();
        let mut other = cfg.clone();
        other.k = 4;
        let a = training_key(&cfg, &img);
        assert_eq!(a, training_key(&cfg, &img));
        assert_ne!(a, training_key(&other, &img));
        assert_ne!(a, training_key(&cfg, &[Image::filled(8, 8, 1, 0.25)]));
        assert_eq!(a.len(), 64);
    }
}
