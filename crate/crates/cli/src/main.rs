//! `nlbnn` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nlbnn::imaging::{load_image, poisson_gaussian_corrupt, psnr, save_image, ssim, Image};
use nlbnn::pipeline::{
    ablate, ablation_csv, evaluate, format_kv, load_pairs, load_training_images, read_kv,
    train_images, AblationGrid, AblationSetup, Checkpoint, DenoiseConfig, Denoiser, Engine,
    TrainConfig,
};
use nlbnn::Error;

#[derive(Parser, Debug)]
#[command(name = "nlbnn", version, about = "Non-local Bayesian patch denoising")]
struct Cli {
    /// Worker threads for parallel inference (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Corrupt a clean image with Poisson-Gaussian noise.
    Synth {
        /// Clean input image (PGM).
        #[arg(long)]
        clean: PathBuf,
        /// Poisson gain.
        #[arg(long, default_value_t = 0.0)]
        beta: f64,
        /// Gaussian noise standard deviation.
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        /// Noise seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the noisy images in a directory.
    Train {
        /// Directory of noisy training images.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: Overrides,
        /// Training epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Learn the noise level jointly instead of using --sigma/--beta.
        #[arg(long)]
        blind: bool,
    },
    /// Denoise one image.
    Denoise {
        /// Noisy input image.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Trained checkpoint; selects the learned engine.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// `mle-classical` or `learned`.
        #[arg(long)]
        engine: Option<String>,
        /// `NLBNN-P` (patch) or `NLBNN-S` (pixel).
        #[arg(long)]
        variant: Option<String>,
        /// Reference stride for inference.
        #[arg(long)]
        stride: Option<usize>,
        /// Clean reference; when given, PSNR and SSIM are printed.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Score denoising on a manifest of `noisy,reference` pairs.
    Eval {
        /// Manifest of `noisy,reference` lines.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Trained checkpoint; selects the learned engine.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// `mle-classical` or `learned`.
        #[arg(long)]
        engine: Option<String>,
        /// `NLBNN-P` (patch) or `NLBNN-S` (pixel).
        #[arg(long)]
        variant: Option<String>,
        /// Reference stride for inference.
        #[arg(long)]
        stride: Option<usize>,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Sweep k, patch side and search mode over a pair manifest.
    Ablate {
        /// Directory holding `pairs.txt`, or the manifest itself.
        #[arg(long)]
        data: PathBuf,
        /// Grid such as `k=4,8;side=3,5;mode=nonlocal,local`.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
        /// `mle-classical` or `learned`.
        #[arg(long)]
        engine: Option<String>,
        /// Reference stride for inference.
        #[arg(long)]
        stride: Option<usize>,
        /// Training epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Directory for cached checkpoints of the learned engine.
        #[arg(long)]
        cache: Option<PathBuf>,
        #[command(flatten)]
        opts: Overrides,
    },
}

/// Settings shared by several commands; flags override the config file.
#[derive(Args, Debug)]
struct Overrides {
    /// `key = value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed for training and sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Neighbors per reference patch.
    #[arg(long)]
    k: Option<usize>,
    /// Patch side length.
    #[arg(long)]
    patch_side: Option<usize>,
    /// `nonlocal`, `embedding` or `local`.
    #[arg(long)]
    mode: Option<String>,
    /// Search window radius.
    #[arg(long)]
    window_radius: Option<usize>,
    /// Gaussian noise standard deviation.
    #[arg(long)]
    sigma: Option<f64>,
    /// Poisson gain.
    #[arg(long)]
    beta: Option<f64>,
    /// Extra `key=value` setting (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

type Settings = Vec<(String, String)>;

impl Overrides {
    /// File settings followed by flag settings, so later entries win.
    fn settings(&self) -> Result<Settings, Error> {
        let mut out = match &self.config {
            Some(p) => read_kv(p)?,
            None => Vec::new(),
        };
        let mut flag = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        flag("seed", self.seed.map(|v| v.to_string()));
        flag("k", self.k.map(|v| v.to_string()));
        flag("patch_side", self.patch_side.map(|v| v.to_string()));
        flag("mode", self.mode.clone());
        flag("window_radius", self.window_radius.map(|v| v.to_string()));
        flag("sigma", self.sigma.map(|v| v.to_string()));
        flag("beta", self.beta.map(|v| v.to_string()));
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {s:?}")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }
}

fn push(settings: &mut Settings, key: &str, value: Option<String>) {
    if let Some(v) = value {
        settings.push((key.to_string(), v));
    }
}

/// Applies settings to whichever configs know the key; keys known to neither are rejected.
fn apply(
    settings: &Settings,
    mut train: Option<&mut TrainConfig>,
    mut dcfg: Option<&mut DenoiseConfig>,
) -> Result<(), Error> {
    for (k, v) in settings {
        let known_train = TrainConfig::KEYS.contains(&k.as_str());
        let known_denoise = DenoiseConfig::KEYS.contains(&k.as_str());
        if !known_train && !known_denoise {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
        if let (true, Some(t)) = (known_train, train.as_deref_mut()) {
            t.set(k, v)?;
        }
        if let (true, Some(d)) = (known_denoise, dcfg.as_deref_mut()) {
            d.set(k, v)?;
        }
    }
    Ok(())
}

fn print_config(title: &str, pairs: &[(String, String)]) {
    println!("# {title}");
    print!("{}", format_kv(pairs));
}

fn denoise_settings(
    opts: &Overrides,
    engine: &Option<String>,
    variant: &Option<String>,
    stride: &Option<usize>,
) -> Result<Settings, Error> {
    let mut s = opts.settings()?;
    push(&mut s, "engine", engine.clone());
    push(&mut s, "variant", variant.clone());
    push(&mut s, "stride", stride.map(|v| v.to_string()));
    Ok(s)
}

fn build_denoiser(settings: &Settings, ckpt: Option<&Path>) -> Result<Denoiser, Error> {
    let mut dcfg = DenoiseConfig::default();
    let model = ckpt.map(Checkpoint::load).transpose()?;
    if model.is_some() && !settings.iter().any(|(k, _)| k == "engine") {
        dcfg.engine = Engine::Learned;
    }
    if let Some(m) = &model {
        dcfg.k = m.net.k;
        dcfg.patch_side = m.net.patch_side;
    }
    apply(settings, None, Some(&mut dcfg))?;
    print_config("denoise", &dcfg.to_pairs());
    Denoiser::new(dcfg, model)
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth {
            clean,
            beta,
            sigma,
            seed,
            out,
        } => {
            let img: Image<f64> = load_image(&clean)?;
            let noisy = poisson_gaussian_corrupt(&img, beta, sigma, seed);
            save_image(&noisy, &out)?;
            let mut sidecar = out.clone().into_os_string();
            sidecar.push(".txt");
            let sidecar = PathBuf::from(sidecar);
            write_text(
                &sidecar,
                &format!("beta = {beta}\nsigma = {sigma}\nseed = {seed}\n"),
            )?;
            println!("{}", out.display());
        }
        Command::Train {
            data,
            out,
            opts,
            epochs,
            blind,
        } => {
            let mut settings = opts.settings()?;
            push(&mut settings, "epochs", epochs.map(|v| v.to_string()));
            if blind {
                settings.push(("noise".into(), "blind".into()));
            }
            let mut cfg = TrainConfig::default();
            apply(&settings, Some(&mut cfg), None)?;
            cfg.validate()?;
            print_config("train", &cfg.to_pairs());
            let images = load_training_images(&data)?;
            let ckpt = train_images(&images, &cfg, |r| {
                let noise = r
                    .noise
                    .map(|n| format!(" sigma {:.5} beta {:.5}", n.sigma, n.beta))
                    .unwrap_or_default();
                println!(
                    "epoch {} loss {:.6} lr {:.3e}{noise}",
                    r.epoch + 1,
                    r.mean_loss,
                    r.lr
                );
            })?;
            ckpt.save(&out)?;
            println!("{}", out.display());
        }
        Command::Denoise {
            input,
            out,
            ckpt,
            engine,
            variant,
            stride,
            reference,
            opts,
        } => {
            let settings = denoise_settings(&opts, &engine, &variant, &stride)?;
            let denoiser = build_denoiser(&settings, ckpt.as_deref())?;
            let img: Image<f64> = load_image(&input)?;
            let result = denoiser.denoise(&img)?;
            save_image(&result, &out)?;
            if let Some(r) = reference {
                let reference: Image<f64> = load_image(&r)?;
                println!(
                    "psnr_db = {:.4}\nssim = {:.6}",
                    psnr(&result, &reference)?,
                    ssim(&result, &reference)?
                );
            }
            println!("{}", out.display());
        }
        Command::Eval {
            pairs,
            out,
            ckpt,
            engine,
            variant,
            stride,
            opts,
        } => {
            let settings = denoise_settings(&opts, &engine, &variant, &stride)?;
            let denoiser = build_denoiser(&settings, ckpt.as_deref())?;
            let table = evaluate(&load_pairs(&pairs)?, &denoiser)?;
            write_text(&out, &table.to_csv())?;
            println!("{}", out.display());
        }
        Command::Ablate {
            data,
            grid,
            out,
            engine,
            stride,
            epochs,
            cache,
            opts,
        } => {
            let mut settings = denoise_settings(&opts, &engine, &None, &stride)?;
            push(&mut settings, "epochs", epochs.map(|v| v.to_string()));
            let mut train = TrainConfig::default();
            let mut dcfg = DenoiseConfig::default();
            apply(&settings, Some(&mut train), Some(&mut dcfg))?;
            print_config("train", &train.to_pairs());
            print_config("denoise", &dcfg.to_pairs());
            let grid = AblationGrid::parse(&grid, &dcfg)?;
            let manifest = if data.is_dir() {
                data.join("pairs.txt")
            } else {
                data
            };
            let setup = AblationSetup {
                train,
                denoise: dcfg,
                cache_dir: cache,
            };
            let rows = ablate(&load_pairs(&manifest)?, &setup, &grid)?;
            write_text(&out, &ablation_csv(&rows))?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0
            || rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .is_err()
        {
            eprintln!("error: invalid-argument: cannot start {n} worker threads");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.code());
            ExitCode::from(2)
        }
    }
}
