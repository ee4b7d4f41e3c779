//! Training and inference configuration with a `key = value` text form.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autonet::NetConfig;
use crate::bayes::NoiseParams;
use crate::error::{Error, Result};
use crate::nonlocal::{SearchConfig, SearchMode};

/// How the noise level is obtained during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseModel {
    Known(NoiseParams),
    /// Estimated jointly by the noise network.
    Blind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub crop: usize,
    pub patch_side: usize,
    pub k: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_halve_every: usize,
    pub mode: SearchMode,
    pub noise: NoiseModel,
    pub seed: u64,
    pub window_radius: usize,
    /// Random crops drawn from each image per epoch.
    pub crops_per_image: usize,
    /// Reference patches per optimization step, split evenly over the crops of a batch.
    pub refs_per_step: usize,
    /// Softmax temperature of the embedding-space neighbor selection.
    pub temperature: f64,
    pub depth: usize,
    pub features: usize,
    pub use_norm: bool,
    pub leaky_slope: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            crop: 90,
            patch_side: 5,
            k: 8,
            epochs: 100,
            batch: 4,
            lr: 3e-4,
            lr_halve_every: 40,
            mode: SearchMode::NonlocalExact,
            noise: NoiseModel::Blind,
            seed: 0,
            window_radius: 10,
            crops_per_image: 32,
            refs_per_step: 256,
            temperature: 1.0,
            depth: 6,
            features: 32,
            use_norm: false,
            leaky_slope: 0.1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid boolean {value:?} for {key}"
        ))),
    }
}

impl TrainConfig {
    /// Keys accepted by [`TrainConfig::set`].
    pub const KEYS: &'static [&'static str] = &[
        "crop",
        "patch_side",
        "k",
        "epochs",
        "batch",
        "lr",
        "lr_halve_every",
        "mode",
        "noise",
        "sigma",
        "beta",
        "seed",
        "window_radius",
        "crops_per_image",
        "refs_per_step",
        "temperature",
        "depth",
        "features",
        "use_norm",
        "leaky_slope",
    ];

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            depth: self.depth,
            features: self.features,
            patch_side: self.patch_side,
            k: self.k,
            use_norm: self.use_norm,
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            k: self.k,
            window_radius: self.window_radius,
            mode: self.mode,
            exclude_self: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("crop", self.crop),
            ("patch_side", self.patch_side),
            ("k", self.k),
            ("epochs", self.epochs),
            ("batch", self.batch),
            ("lr_halve_every", self.lr_halve_every),
            ("window_radius", self.window_radius),
            ("crops_per_image", self.crops_per_image),
            ("refs_per_step", self.refs_per_step),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.crop < 3 * self.patch_side {
            return Err(Error::Config(format!(
                "crop {} must be at least three patch sides ({})",
                self.crop,
                3 * self.patch_side
            )));
        }
        if self.k < 2 {
            return Err(Error::Config("k must be at least 2".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.refs_per_step < self.batch {
            return Err(Error::Config("refs_per_step must be at least batch".into()));
        }
        self.net_config().validate()
    }

    /// Applies one `key = value` setting. `sigma`/`beta` switch the noise model to known.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "crop" => self.crop = parse(key, value)?,
            "patch_side" => self.patch_side = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_halve_every" => self.lr_halve_every = parse(key, value)?,
            "mode" => self.mode = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "window_radius" => self.window_radius = parse(key, value)?,
            "crops_per_image" => self.crops_per_image = parse(key, value)?,
            "refs_per_step" => self.refs_per_step = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "features" => self.features = parse(key, value)?,
            "use_norm" => self.use_norm = parse_bool(key, value)?,
            "leaky_slope" => self.leaky_slope = parse(key, value)?,
            "noise" => {
                self.noise = match value {
                    "blind" => NoiseModel::Blind,
                    "known" => {
                        NoiseModel::Known(self.known_noise().unwrap_or_else(NoiseParams::noiseless))
                    }
                    _ => {
                        return Err(Error::Config(format!(
                            "noise must be known or blind, got {value:?}"
                        )))
                    }
                }
            }
            "sigma" | "beta" => {
                let v: f64 = parse(key, value)?;
                let mut n = self.known_noise().unwrap_or_else(NoiseParams::noiseless);
                if key == "sigma" {
                    n.sigma = v;
                } else {
                    n.beta = v;
                }
                self.noise = NoiseModel::Known(NoiseParams::new(n.sigma, n.beta)?);
            }
            _ => return Err(Error::Config(format!("unknown training key {key:?}"))),
        }
        Ok(())
    }

    fn known_noise(&self) -> Option<NoiseParams> {
        match self.noise {
            NoiseModel::Known(n) => Some(n),
            NoiseModel::Blind => None,
        }
    }

    /// Resolved settings in file order, suitable for [`TrainConfig::set`].
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = vec![
            ("crop".into(), self.crop.to_string()),
            ("patch_side".into(), self.patch_side.to_string()),
            ("k".into(), self.k.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("batch".into(), self.batch.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("lr_halve_every".into(), self.lr_halve_every.to_string()),
            ("mode".into(), self.mode.to_string()),
        ];
        match self.noise {
            NoiseModel::Blind => out.push(("noise".into(), "blind".into())),
            NoiseModel::Known(n) => {
                out.push(("noise".into(), "known".into()));
                out.push(("sigma".into(), n.sigma.to_string()));
                out.push(("beta".into(), n.beta.to_string()));
            }
        }
        out.extend([
            ("seed".into(), self.seed.to_string()),
            ("window_radius".into(), self.window_radius.to_string()),
            ("crops_per_image".into(), self.crops_per_image.to_string()),
            ("refs_per_step".into(), self.refs_per_step.to_string()),
            ("temperature".into(), self.temperature.to_string()),
            ("depth".into(), self.depth.to_string()),
            ("features".into(), self.features.to_string()),
            ("use_norm".into(), self.use_norm.to_string()),
            ("leaky_slope".into(), self.leaky_slope.to_string()),
        ]);
        out
    }
}

/// Source of the patch prior at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Engine {
    /// Sample mean and covariance of the retrieved neighbors.
    MleClassical,
    /// Prior network from a checkpoint.
    Learned,
    /// Returns the input unchanged (evaluation baseline).
    Identity,
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Engine::MleClassical => "mle-classical",
            Engine::Learned => "learned",
            Engine::Identity => "identity",
        })
    }
}

impl FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mle-classical" | "classical" => Ok(Engine::MleClassical),
            "learned" => Ok(Engine::Learned),
            "identity" => Ok(Engine::Identity),
            _ => Err(Error::Config(format!("unknown engine {s:?}"))),
        }
    }
}

/// Patch-level (`d = side²`) or pixel-level (`d = 1`) denoising.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "NLBNN-P")]
    Patch,
    #[serde(rename = "NLBNN-S")]
    Pixel,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Patch => "NLBNN-P",
            Variant::Pixel => "NLBNN-S",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "NLBNN-P" | "P" | "patch" => Ok(Variant::Patch),
            "NLBNN-S" | "S" | "pixel" => Ok(Variant::Pixel),
            _ => Err(Error::Config(format!("unknown variant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseConfig {
    pub stride: usize,
    pub engine: Engine,
    pub variant: Variant,
    pub patch_side: usize,
    pub k: usize,
    pub window_radius: usize,
    pub mode: SearchMode,
    /// Known noise level; `None` means estimate it (noise network or classical estimator).
    pub noise: Option<NoiseParams>,
    pub temperature: f64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig {
            stride: 1,
            engine: Engine::MleClassical,
            variant: Variant::Patch,
            patch_side: 5,
            k: 8,
            window_radius: 10,
            mode: SearchMode::NonlocalExact,
            noise: None,
            temperature: 1.0,
        }
    }
}

impl DenoiseConfig {
    /// Keys accepted by [`DenoiseConfig::set`].
    pub const KEYS: &'static [&'static str] = &[
        "stride",
        "engine",
        "variant",
        "patch_side",
        "k",
        "window_radius",
        "mode",
        "noise",
        "sigma",
        "beta",
        "temperature",
    ];

    /// Patch side after applying the variant (pixel level forces 1).
    pub fn effective_patch_side(&self) -> usize {
        match self.variant {
            Variant::Pixel => 1,
            Variant::Patch => self.patch_side,
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            k: self.k,
            window_radius: self.window_radius,
            mode: self.mode,
            exclude_self: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.patch_side == 0 || self.window_radius == 0 {
            return Err(Error::Config(
                "stride, patch_side and window_radius must be positive".into(),
            ));
        }
        if self.engine == Engine::MleClassical && self.k < 2 {
            return Err(Error::Config(
                "classical engine needs k of at least 2".into(),
            ));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "stride" => self.stride = parse(key, value)?,
            "engine" => self.engine = value.parse()?,
            "variant" => self.variant = value.parse()?,
            "patch_side" => self.patch_side = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "window_radius" => self.window_radius = parse(key, value)?,
            "mode" => self.mode = value.parse()?,
            "temperature" => self.temperature = parse(key, value)?,
            "noise" => match value {
                "blind" => self.noise = None,
                "known" => self.noise = Some(self.noise.unwrap_or_else(NoiseParams::noiseless)),
                _ => {
                    return Err(Error::Config(format!(
                        "noise must be known or blind, got {value:?}"
                    )))
                }
            },
            "sigma" | "beta" => {
                let v: f64 = parse(key, value)?;
                let mut n = self.noise.unwrap_or_else(NoiseParams::noiseless);
                if key == "sigma" {
                    n.sigma = v;
                } else {
                    n.beta = v;
                }
                self.noise = Some(NoiseParams::new(n.sigma, n.beta)?);
            }
            _ => return Err(Error::Config(format!("unknown denoising key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = vec![
            ("stride".into(), self.stride.to_string()),
            ("engine".into(), self.engine.to_string()),
            ("variant".into(), self.variant.to_string()),
            ("patch_side".into(), self.patch_side.to_string()),
            ("k".into(), self.k.to_string()),
            ("window_radius".into(), self.window_radius.to_string()),
            ("mode".into(), self.mode.to_string()),
        ];
        match self.noise {
            None => out.push(("noise".into(), "blind".into())),
            Some(n) => {
                out.push(("noise".into(), "known".into()));
                out.push(("sigma".into(), n.sigma.to_string()));
                out.push(("beta".into(), n.beta.to_string()));
            }
        }
        out.push(("temperature".into(), self.temperature.to_string()));
        out
    }
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are ignored.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::Config(format!(
                "line {}: empty key or value",
                no + 1
            )));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn read_kv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text)
}

/// Renders settings as `key = value` lines.
pub fn format_kv(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut cfg = TrainConfig::default();
        for (k, v) in parse_kv(
            "# comment\ncrop = 60 # trailing\n\nk=4\nsigma = 0.05\nbeta=0.1\nmode = local\n",
        )
        .unwrap()
        {
            cfg.set(&k, &v).unwrap();
        }
        assert_eq!(cfg.crop, 60);
        assert_eq!(cfg.k, 4);
        assert_eq!(cfg.mode, SearchMode::LocalAdjacent);
        assert_eq!(
            cfg.noise,
            NoiseModel::Known(NoiseParams {
                sigma: 0.05,
                beta: 0.1
            })
        );
        let mut back = TrainConfig::default();
        for (k, v) in parse_kv(&format_kv(&cfg.to_pairs())).unwrap() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, cfg);
        let mut d = DenoiseConfig {
            noise: Some(NoiseParams {
                sigma: 0.1,
                beta: 0.0,
            }),
            variant: Variant::Pixel,
            ..DenoiseConfig::default()
        };
        d.set("engine", "learned").unwrap();
        let mut dback = DenoiseConfig::default();
        for (k, v) in parse_kv(&format_kv(&d.to_pairs())).unwrap() {
            dback.set(&k, &v).unwrap();
        }
        assert_eq!(dback, d);
        assert_eq!(d.effective_patch_side(), 1);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(TrainConfig::default().set("learning_rate", "1").is_err());
        assert!(TrainConfig::default().set("k", "eight").is_err());
        assert!(DenoiseConfig::default().set("epochs", "3").is_err());
        assert!(parse_kv("novalue\n").is_err());
        assert!(TrainConfig::default().set("sigma", "-1").is_err());
    }

    #[test]
    fn key_lists_match_setters() {
        for key in TrainConfig::KEYS {
            let value = TrainConfig::default()
                .to_pairs()
                .into_iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v);
            let value = value.unwrap_or_else(|| "0.1".into());
            TrainConfig::default().set(key, &value).unwrap();
        }
        for key in DenoiseConfig::KEYS {
            let value = DenoiseConfig::default()
                .to_pairs()
                .into_iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v);
            let value = value.unwrap_or_else(|| "0.1".into());
            DenoiseConfig::default().set(key, &value).unwrap();
        }
    }

    #[test]
    fn train_config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            crop: 14,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            depth: 2,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }
}
