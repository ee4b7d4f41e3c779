use nlbnn::autonet::{
    grad_check, prior_net_graph, prior_net_init, Graph, NetConfig, NormMode, ParamStore, Tensor,
};
use nlbnn::bayes::NoiseParams;
use nlbnn::imaging::{pattern, poisson_gaussian_corrupt, psnr, Image};
use nlbnn::nonlocal::SearchMode;
use nlbnn::pipeline::{
    denoise, evaluate, normalize_stacks, prior_objective, train_images, Checkpoint, DenoiseConfig,
    Denoiser, Engine, ImagePair, NoiseModel, RefBatch, TrainConfig, Variant,
};
use nlbnn::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn classical(sigma: f64, beta: f64) -> DenoiseConfig {
    DenoiseConfig {
        noise: Some(NoiseParams::new(sigma, beta).unwrap()),
        ..DenoiseConfig::default()
    }
}

fn small_train() -> TrainConfig {
    TrainConfig {
        crop: 32,
        epochs: 2,
        batch: 2,
        crops_per_image: 4,
        refs_per_step: 32,
        depth: 3,
        features: 8,
        noise: NoiseModel::Known(NoiseParams::new(0.1, 0.0).unwrap()),
        ..TrainConfig::default()
    }
}

fn noisy_cells(size: usize, sigma: f64, seed: u64) -> Image<f64> {
    poisson_gaussian_corrupt(&pattern::cells(size, seed), 0.0, sigma, seed + 100)
}

#[test]
fn noise_free_classical_is_identity() {
    let img = pattern::cells(48, 3);
    let out = denoise(&img, None, &classical(0.0, 0.0)).unwrap();
    let err = img
        .data()
        .iter()
        .zip(out.data())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(err <= 1e-9, "max abs error {err}");
}

#[test]
fn constant_image_is_preserved() {
    let img = Image::filled(32, 32, 1, 0.4);
    let out = denoise(&img, None, &classical(0.1, 0.0)).unwrap();
    assert!(out.data().iter().all(|v| (v - 0.4).abs() < 1e-9));
}

#[test]
fn classical_engine_improves_psnr() {
    let clean = pattern::structured(64);
    let noisy = poisson_gaussian_corrupt(&clean, 0.0, 0.1, 7);
    let out = denoise(&noisy, None, &classical(0.1, 0.0)).unwrap();
    assert!(psnr(&out, &clean).unwrap() > psnr(&noisy, &clean).unwrap() + 2.0);
}

#[test]
fn classical_engine_estimates_unknown_noise() {
    let clean = pattern::structured(64);
    let noisy = poisson_gaussian_corrupt(&clean, 0.0, 0.1, 8);
    let out = denoise(&noisy, None, &DenoiseConfig::default()).unwrap();
    assert!(psnr(&out, &clean).unwrap() > psnr(&noisy, &clean).unwrap() + 2.0);
}

#[test]
fn pixel_variant_is_scalar_wiener_filter() {
    let clean = pattern::cells(24, 5);
    let noisy = poisson_gaussian_corrupt(&clean, 0.0, 0.05, 9);
    let cfg = DenoiseConfig {
        variant: Variant::Pixel,
        k: 6,
        window_radius: 3,
        ..classical(0.05, 0.0)
    };
    let out = denoise(&noisy, None, &cfg).unwrap();
    // independent scalar oracle: nearest 6 pixels, mean/variance, Wiener shrinkage
    let (h, w) = (noisy.height() as isize, noisy.width() as isize);
    for r in 0..h {
        for c in 0..w {
            let y = noisy.get(0, r as usize, c as usize);
            let mut cand = Vec::new();
            for rr in (r - 3).max(0)..=(r + 3).min(h - 1) {
                for cc in (c - 3).max(0)..=(c + 3).min(w - 1) {
                    if (rr, cc) != (r, c) {
                        let v = noisy.get(0, rr as usize, cc as usize);
                        cand.push(((v - y).powi(2), rr * w + cc, v));
                    }
                }
            }
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let vals: Vec<f64> = cand[..6].iter().map(|t| t.2).collect();
            let m = vals.iter().sum::<f64>() / 6.0;
            // unbiased variance plus the factorization jitter
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 5.0 + 1e-6;
            let expected = m + var / (var + 0.0025) * (y - m);
            let got = out.get(0, r as usize, c as usize);
            assert!(
                (got - expected).abs() < 1e-12,
                "({r},{c}): {got} vs {expected}"
            );
        }
    }
}

#[test]
fn stride_equal_to_side_stays_close_to_dense() {
    let clean = pattern::structured(60);
    let noisy = poisson_gaussian_corrupt(&clean, 0.0, 0.1, 11);
    let dense = denoise(&noisy, None, &classical(0.1, 0.0)).unwrap();
    let tiled = denoise(
        &noisy,
        None,
        &DenoiseConfig {
            stride: 5,
            ..classical(0.1, 0.0)
        },
    )
    .unwrap();
    let p_in = psnr(&noisy, &clean).unwrap();
    assert!(psnr(&dense, &clean).unwrap() > p_in);
    assert!(psnr(&tiled, &clean).unwrap() > p_in);
    let diff = dense
        .data()
        .iter()
        .zip(tiled.data())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(diff < 0.5, "max difference {diff}");
}

#[test]
fn multichannel_images_are_denoised_per_channel() {
    let a = noisy_cells(24, 0.1, 1);
    let b = noisy_cells(24, 0.1, 2);
    let rgb = Image::from_channels(&[a.clone(), b.clone()]).unwrap();
    let cfg = classical(0.1, 0.0);
    let out = denoise(&rgb, None, &cfg).unwrap();
    assert_eq!(out.channel(0), denoise(&a, None, &cfg).unwrap());
    assert_eq!(out.channel(1), denoise(&b, None, &cfg).unwrap());
}

#[test]
fn evaluate_identity_on_identical_pair() {
    let img = pattern::cells(24, 1);
    let pairs = vec![ImagePair {
        name: "same".into(),
        noisy: img.clone(),
        reference: img,
    }];
    let d = Denoiser::new(
        DenoiseConfig {
            engine: Engine::Identity,
            ..Default::default()
        },
        None,
    )
    .unwrap();
    let t = evaluate(&pairs, &d).unwrap();
    assert!(t.rows[0].psnr_db.is_infinite());
    assert!((t.rows[0].ssim - 1.0).abs() < 1e-12);
}

#[test]
fn evaluate_rejects_mismatched_pairs() {
    let pairs = vec![ImagePair {
        name: "bad".into(),
        noisy: Image::filled(8, 8, 1, 0.0),
        reference: Image::filled(9, 8, 1, 0.0),
    }];
    let d = Denoiser::new(
        DenoiseConfig {
            engine: Engine::Identity,
            ..Default::default()
        },
        None,
    )
    .unwrap();
    assert!(matches!(
        evaluate(&pairs, &d),
        Err(Error::DimensionMismatch(_))
    ));
}

#[test]
fn learned_engine_requires_matching_checkpoint() {
    let ckpt = train_images(
        &[noisy_cells(32, 0.1, 1)],
        &TrainConfig {
            epochs: 1,
            ..small_train()
        },
        |_| {},
    )
    .unwrap();
    let cfg = DenoiseConfig {
        engine: Engine::Learned,
        ..classical(0.1, 0.0)
    };
    assert!(Denoiser::new(cfg.clone(), None).is_err());
    let err = Denoiser::new(
        DenoiseConfig {
            patch_side: 3,
            ..cfg.clone()
        },
        Some(ckpt.clone()),
    )
    .unwrap_err();
    assert_eq!(err.code(), "ckpt-mismatch");
    let err = Denoiser::new(
        DenoiseConfig {
            k: 4,
            ..cfg.clone()
        },
        Some(ckpt.clone()),
    )
    .unwrap_err();
    assert_eq!(err.code(), "ckpt-mismatch");
    assert!(Denoiser::new(cfg, Some(ckpt)).is_ok());
}

#[test]
fn training_is_deterministic_and_loss_falls() {
    let images = vec![noisy_cells(64, 0.1, 4)];
    let cfg = TrainConfig {
        epochs: 2,
        crops_per_image: 16,
        lr: 1e-3,
        ..small_train()
    };
    let a = train_images(&images, &cfg, |_| {}).unwrap();
    let b = train_images(&images, &cfg, |_| {}).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    assert_eq!(a.step, 16);
    assert!(
        a.loss_history[1] < a.loss_history[0],
        "{:?}",
        a.loss_history
    );
}

#[test]
fn known_noise_checkpoint_has_no_noise_network() {
    let ckpt = train_images(
        &[noisy_cells(32, 0.1, 2)],
        &TrainConfig {
            epochs: 1,
            ..small_train()
        },
        |_| {},
    )
    .unwrap();
    assert!(ckpt.params.params().keys().all(|k| k.starts_with("prior.")));
    assert!(!ckpt.is_blind());
}

#[test]
fn blind_and_embedding_modes_train() {
    let cfg = TrainConfig {
        epochs: 1,
        noise: NoiseModel::Blind,
        mode: SearchMode::NonlocalEmbedding,
        ..small_train()
    };
    let ckpt = train_images(&[noisy_cells(32, 0.1, 3)], &cfg, |_| {}).unwrap();
    assert!(ckpt.params.contains("noise.sigma.w"));
    assert!(ckpt.has_embedding());
    let dcfg = DenoiseConfig {
        engine: Engine::Learned,
        mode: SearchMode::NonlocalEmbedding,
        ..DenoiseConfig::default()
    };
    let out = denoise(&noisy_cells(24, 0.1, 5), Some(&ckpt), &dcfg).unwrap();
    assert!(out.data().iter().all(|v| v.is_finite()));
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let ckpt = train_images(
        &[noisy_cells(32, 0.1, 6)],
        &TrainConfig {
            epochs: 1,
            ..small_train()
        },
        |_| {},
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.nlbc");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.to_bytes().unwrap(), ckpt.to_bytes().unwrap());
    assert_eq!(loaded.params.params(), ckpt.params.params());
    assert_eq!(loaded.params.buffers(), ckpt.params.buffers());
    assert_eq!(loaded.train, ckpt.train);
    assert_eq!(loaded.loss_history, ckpt.loss_history);
    let img = noisy_cells(24, 0.1, 7);
    let cfg = DenoiseConfig {
        engine: Engine::Learned,
        ..classical(0.1, 0.0)
    };
    assert_eq!(
        denoise(&img, Some(&ckpt), &cfg).unwrap(),
        denoise(&img, Some(&loaded), &cfg).unwrap()
    );
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let ckpt = train_images(
        &[noisy_cells(32, 0.1, 8)],
        &TrainConfig {
            epochs: 1,
            ..small_train()
        },
        |_| {},
    )
    .unwrap();
    let bytes = ckpt.to_bytes().unwrap();
    let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).unwrap_err();
    assert!(matches!(err, Error::PayloadMismatch { .. }));
    assert!(Checkpoint::from_bytes(b"nope").is_err());
}

#[test]
fn training_rejects_empty_input() {
    assert!(matches!(
        train_images(&[], &small_train(), |_| {}),
        Err(Error::EmptyData(_))
    ));
}

fn objective_fixture(seed: u64) -> (ParamStore<f64>, NetConfig, RefBatch, Vec<NoiseParams>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = NetConfig {
        depth: 3,
        features: 8,
        patch_side: 2,
        k: 3,
        ..NetConfig::default()
    };
    let mut store = ParamStore::new();
    prior_net_init(&mut store, &cfg, &mut rng).unwrap();
    // replace the zero tails so every path carries gradient
    for name in ["prior.mean.w", "prior.mean.b", "prior.cov.w", "prior.cov.b"] {
        let t = store.get(name).unwrap();
        let data = (0..t.len()).map(|_| rng.random_range(-0.3..0.3)).collect();
        store
            .set(name, Tensor::new(t.shape(), data).unwrap())
            .unwrap();
    }
    let mut batch = RefBatch::new(3, 2);
    let mut noise = Vec::new();
    for _ in 0..3 {
        let nb: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.random_range(0.1..0.9)).collect())
            .collect();
        let y: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..0.9)).collect();
        batch.push(&nb, &y).unwrap();
        noise.push(
            NoiseParams::new(rng.random_range(0.05..0.2), rng.random_range(0.0..0.2)).unwrap(),
        );
    }
    (store, cfg, batch, noise)
}

/// Leaky-ReLU sign pattern of the prior network on a batch.
fn kinks(store: &ParamStore<f64>, cfg: &NetConfig, batch: &RefBatch) -> Vec<bool> {
    let (input, _) = normalize_stacks::<f64>(batch).unwrap();
    let mut g = Graph::new();
    let x = g.input(input).unwrap();
    prior_net_graph(&mut g, store, cfg, x, NormMode::Eval).unwrap();
    g.kink_pattern()
}

/// Marks coordinates whose finite-difference stencil changes the sign pattern.
fn crossings(x: &[f64], step: f64, pattern: impl Fn(&[f64]) -> Vec<bool>) -> Vec<bool> {
    let base = pattern(x);
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let hit = [2.0 * step, step, -step, -2.0 * step].iter().any(|h| {
                probe[i] = x[i] + h;
                pattern(&probe) != base
            });
            probe[i] = x[i];
            hit
        })
        .collect()
}

#[test]
fn objective_gradients_match_finite_differences() {
    for seed in 0..20 {
        let (store, cfg, batch, noise) = objective_fixture(seed);
        let out = prior_objective(&store, &cfg, &batch, &noise, NormMode::Eval).unwrap();

        let names: Vec<String> = store.params().keys().cloned().collect();
        let mut x = Vec::new();
        let mut analytic = Vec::new();
        for n in &names {
            x.extend_from_slice(store.get(n).unwrap().data());
            analytic.extend_from_slice(out.param_grads[n].data());
        }
        let with_params = |v: &[f64]| {
            let mut s = store.clone();
            let mut off = 0;
            for n in &names {
                let t = s.get(n).unwrap();
                let len = t.len();
                s.set(
                    n,
                    Tensor::new(t.shape(), v[off..off + len].to_vec()).unwrap(),
                )
                .unwrap();
                off += len;
            }
            s
        };
        let loss_at = |v: &[f64]| {
            Ok(prior_objective(&with_params(v), &cfg, &batch, &noise, NormMode::Eval)?.loss)
        };
        let skip = crossings(&x, 1e-5, |v| kinks(&with_params(v), &cfg, &batch));
        grad_check(loss_at, &x, &analytic, 1e-5, 1e-4, |i| skip[i]).unwrap();

        let with_nb = |v: &[f64]| RefBatch {
            neighbors: v.to_vec(),
            ..batch.clone()
        };
        let nb_loss = |v: &[f64]| {
            Ok(prior_objective(&store, &cfg, &with_nb(v), &noise, NormMode::Eval)?.loss)
        };
        let skip = crossings(&batch.neighbors, 1e-5, |v| kinks(&store, &cfg, &with_nb(v)));
        grad_check(
            nb_loss,
            &batch.neighbors,
            &out.d_neighbors,
            1e-5,
            1e-4,
            |i| skip[i],
        )
        .unwrap();

        let mut xn = Vec::new();
        let mut an = Vec::new();
        for (i, n) in noise.iter().enumerate() {
            xn.extend([n.sigma, n.beta]);
            an.extend([out.d_sigma[i], out.d_beta[i]]);
        }
        let noise_loss = |v: &[f64]| {
            let nz: Vec<NoiseParams> = v
                .chunks(2)
                .map(|c| NoiseParams::new(c[0], c[1]))
                .collect::<Result<_, _>>()?;
            Ok(prior_objective(&store, &cfg, &batch, &nz, NormMode::Eval)?.loss)
        };
        grad_check(noise_loss, &xn, &an, 1e-5, 1e-4, |_| false).unwrap();
    }
}

#[test]
fn zero_initialised_tails_give_scaled_identity_prior() {
    let (mut store, cfg, batch, noise) = objective_fixture(1);
    for name in ["prior.mean.w", "prior.mean.b", "prior.cov.w", "prior.cov.b"] {
        let t = store.get(name).unwrap();
        store.set(name, Tensor::zeros(t.shape())).unwrap();
    }
    let out = prior_objective(&store, &cfg, &batch, &noise, NormMode::Eval).unwrap();
    assert!(out.loss.is_finite());
    let priors = nlbnn::pipeline::learned_priors(&store, &cfg, &batch).unwrap();
    let (_, norm) = nlbnn::pipeline::normalize_stacks::<f64>(&batch).unwrap();
    for (r, p) in priors.iter().enumerate() {
        assert_eq!(p.mean(), &norm.mu[r * 4..(r + 1) * 4]);
        let l = p.cov_factor();
        for i in 0..4 {
            // softplus(0) on the diagonal, scaled by the stack RMS
            assert!((l[(i, i)] - norm.scale[r] * std::f64::consts::LN_2).abs() < 1e-12);
        }
    }
}
