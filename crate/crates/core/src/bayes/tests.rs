use super::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mat(n: usize, v: &[f64]) -> Matrix<f64> {
    Matrix::from_row_major(n, v.to_vec()).unwrap()
}

fn prior_from_cov(mean: Vec<f64>, cov: &Matrix<f64>) -> GaussianPrior<f64> {
    GaussianPrior::new(mean, cholesky(cov).unwrap()).unwrap()
}

fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> Matrix<f64> {
    let a: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let a = mat(d, &a);
    let mut c = a.matmul(&a.transpose());
    c.add_diagonal(0.1);
    c
}

/// Explicit inverse through cofactors (d ≤ 3).
fn cofactor_inverse(m: &Matrix<f64>) -> Matrix<f64> {
    let d = m.dim();
    match d {
        1 => mat(1, &[1.0 / m[(0, 0)]]),
        2 => {
            let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
            mat(
                2,
                &[
                    m[(1, 1)] / det,
                    -m[(0, 1)] / det,
                    -m[(1, 0)] / det,
                    m[(0, 0)] / det,
                ],
            )
        }
        3 => {
            let c = |i: usize, j: usize| {
                let rows: Vec<usize> = (0..3).filter(|&r| r != i).collect();
                let cols: Vec<usize> = (0..3).filter(|&r| r != j).collect();
                let minor = m[(rows[0], cols[0])] * m[(rows[1], cols[1])]
                    - m[(rows[0], cols[1])] * m[(rows[1], cols[0])];
                if (i + j).is_multiple_of(2) {
                    minor
                } else {
                    -minor
                }
            };
            let det: f64 = (0..3).map(|j| m[(0, j)] * c(0, j)).sum();
            let mut out = Matrix::zeros(3);
            for i in 0..3 {
                for j in 0..3 {
                    out[(i, j)] = c(j, i) / det;
                }
            }
            out
        }
        _ => unreachable!(),
    }
}

#[test]
fn mle_two_points() {
    let p = mle_prior(&[vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap();
    assert_eq!(p.mean(), &[1.0, 1.0]);
    let c = p.covariance();
    // [[2,2],[2,2]] plus the base jitter on the diagonal
    assert!((c[(0, 0)] - 2.0 - JITTER_BASE).abs() < 1e-12);
    assert!((c[(0, 1)] - 2.0).abs() < 1e-12);
    assert!((c[(1, 1)] - 2.0 - JITTER_BASE).abs() < 1e-12);
}

#[test]
fn mle_identical_patches_give_jitter_covariance() {
    let p = vec![0.3f64, 0.7, 0.1];
    let prior = mle_prior(&vec![p.clone(); 5]).unwrap();
    for (a, b) in prior.mean().iter().zip(&p) {
        assert!((a - b).abs() < 1e-15);
    }
    let c = prior.covariance();
    for i in 0..3 {
        for j in 0..3 {
            let want = if i == j { JITTER_BASE } else { 0.0 };
            assert!((c[(i, j)] - want).abs() < 1e-18);
        }
    }
}

#[test]
fn mle_scalar_sample_variance() {
    let prior = mle_prior(&[[0.0], [1.0], [2.0]]).unwrap();
    assert_eq!(prior.mean(), &[1.0]);
    assert!((prior.covariance()[(0, 0)] - 1.0 - JITTER_BASE).abs() < 1e-12);
}

#[test]
fn mle_needs_two_neighbors() {
    assert!(mle_prior(&[[1.0f64]]).is_err());
    assert!(mle_prior(&[vec![1.0f64], vec![1.0, 2.0]]).is_err());
}

#[test]
fn likelihood_scalar_substitution() {
    let prior = prior_from_cov(vec![1.0], &mat(1, &[2.0]));
    let lik = likelihood_from_prior(&prior, NoiseParams::new(1.0, 0.5).unwrap());
    assert_eq!(lik.mean, vec![1.0]);
    assert!((lik.cov[(0, 0)] - 3.25).abs() < 1e-12);
}

#[test]
fn likelihood_noise_free_limit_and_clamp() {
    let cov = mat(2, &[1.0, 0.3, 0.3, 2.0]);
    let prior = prior_from_cov(vec![-0.5, 0.4], &cov);
    let lik = likelihood_from_prior(&prior, NoiseParams::noiseless());
    assert_eq!(lik.cov, prior.covariance());
    let lik = likelihood_from_prior(&prior, NoiseParams::new(0.1, 2.0).unwrap());
    let base = prior.covariance();
    assert!((lik.cov[(0, 0)] - base[(0, 0)] - 0.01).abs() < 1e-12);
    assert!((lik.cov[(1, 1)] - base[(1, 1)] - 0.01 - 4.0 * 0.4).abs() < 1e-12);
    assert_eq!(lik.cov[(0, 1)], base[(0, 1)]);
}

#[test]
fn map_is_identity_without_noise() {
    let cov = mat(3, &[1.0, 0.2, 0.1, 0.2, 0.8, 0.0, 0.1, 0.0, 0.5]);
    let prior = prior_from_cov(vec![0.2, 0.3, 0.4], &cov);
    let lik = likelihood_from_prior(&prior, NoiseParams::noiseless());
    let y = [0.9, -0.1, 0.35];
    let est = map_estimate(&prior, &lik, &y).unwrap();
    assert!(!est.fallback);
    assert_eq!(est.values, y.to_vec());
}

#[test]
fn map_trusts_prior_mean_with_zero_prior_variance() {
    let mut c = Matrix::zeros(2);
    c.add_diagonal(JITTER_BASE);
    let prior = prior_from_cov(vec![0.5, 0.25], &c);
    let lik = likelihood_from_prior(&prior, NoiseParams::new(0.1, 0.0).unwrap());
    let est = map_estimate(&prior, &lik, &[0.9, 0.0]).unwrap();
    assert!((est.values[0] - 0.5).abs() < 1e-3 * 0.4);
    assert!((est.values[1] - 0.25).abs() < 1e-3 * 0.25);
}

#[test]
fn map_scalar_wiener() {
    let prior = prior_from_cov(vec![0.0], &mat(1, &[1.0]));
    let lik = likelihood_from_prior(&prior, NoiseParams::new(1.0, 0.0).unwrap());
    let est = map_estimate(&prior, &lik, &[2.0]).unwrap();
    assert!((est.values[0] - 1.0).abs() < 1e-14);
}

#[test]
fn map_falls_back_on_unfactorizable_likelihood() {
    let prior = prior_from_cov(vec![0.3], &mat(1, &[1.0]));
    let lik = Likelihood {
        mean: vec![0.3],
        cov: mat(1, &[-5.0]),
    };
    let est = map_estimate(&prior, &lik, &[1.0]).unwrap();
    assert!(est.fallback);
    assert_eq!(est.values, vec![0.3]);
}

#[test]
fn nll_examples() {
    let lik = |m: Vec<f64>, c: Matrix<f64>| Likelihood { mean: m, cov: c };
    assert_eq!(
        nll_loss(&[0.0], &lik(vec![0.0], mat(1, &[1.0]))).unwrap(),
        0.0
    );
    assert!((nll_loss(&[1.0], &lik(vec![0.0], mat(1, &[1.0]))).unwrap() - 0.5).abs() < 1e-15);
    let id = Matrix::identity(2);
    assert!((nll_loss(&[1.0, 1.0], &lik(vec![0.0, 0.0], id)).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn assemble_examples() {
    let l = cholesky_assemble(&[0.0f64, 0.0, 0.0]).unwrap();
    let c = l.lower_gram();
    let ln2 = 2f64.ln();
    assert!((l[(0, 0)] - ln2).abs() < 1e-15 && l[(0, 1)] == 0.0 && l[(1, 0)] == 0.0);
    assert!((c[(0, 0)] - 0.4805).abs() < 1e-4 && (c[(1, 1)] - 0.4805).abs() < 1e-4);
    for x in [-30.0f64, -1.0, 0.0, 4.0] {
        assert!(cholesky_assemble(&[x]).unwrap().lower_gram()[(0, 0)] > 0.0);
    }
    assert!(cholesky_assemble(&[0.0f64; 4]).is_err());
    // off-diagonals verbatim, row-wise fill
    let l = cholesky_assemble(&[0.0, 7.0, 0.0]).unwrap();
    assert_eq!(l[(1, 0)], 7.0);
    assert_eq!(dim_from_tri_len(325).unwrap(), 25);
}

#[test]
fn map_exact_against_cofactor_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for d in 1..=3 {
        for _ in 0..200 {
            let cx = random_spd(&mut rng, d);
            let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..1.0)).collect();
            let y: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..2.0)).collect();
            let noise =
                NoiseParams::new(rng.random_range(0.0..0.5), rng.random_range(0.0..0.5)).unwrap();
            let prior = prior_from_cov(mean.clone(), &cx);
            let lik = likelihood_from_prior(&prior, noise);
            let got = map_estimate(&prior, &lik, &y).unwrap().values;
            let inv = cofactor_inverse(&lik.cov);
            let cx = prior.covariance();
            let r: Vec<f64> = y.iter().zip(&mean).map(|(a, b)| a - b).collect();
            let want: Vec<f64> = cx
                .matmul(&inv)
                .mul_vec(&r)
                .iter()
                .zip(&mean)
                .map(|(a, b)| a + b)
                .collect();
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() <= 1e-10, "d={d}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn nll_matches_dense_eigen_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for d in 1..=6 {
        for _ in 0..100 {
            let c = random_spd(&mut rng, d);
            let m: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = nll_loss(
                &y,
                &Likelihood {
                    mean: m.clone(),
                    cov: c.clone(),
                },
            )
            .unwrap();
            let cm = DMatrix::from_row_slice(d, d, c.as_slice());
            let r = DVector::from_iterator(d, y.iter().zip(&m).map(|(a, b)| a - b));
            let inv = cm.clone().try_inverse().unwrap();
            let logdet: f64 = cm.symmetric_eigenvalues().iter().map(|v| v.ln()).sum();
            let want = 0.5 * (r.transpose() * inv * &r)[(0, 0)] + 0.5 * logdet;
            assert!((got - want).abs() <= 1e-8, "d={d}: {got} vs {want}");
        }
    }
}

#[test]
fn nll_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for d in [1usize, 2, 4] {
        let raw: Vec<f64> = (0..tri_len(d))
            .map(|_| rng.random_range(-0.6..0.6))
            .collect();
        let factor = cholesky_assemble(&raw).unwrap();
        let mean: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..0.9)).collect();
        let y: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
        let noise = NoiseParams::new(0.3, 0.4).unwrap();
        let g = nll_gradient(&y, &mean, &factor, noise).unwrap();
        let loss_at = |mean: &[f64], f: &Matrix<f64>, n: NoiseParams| {
            let prior = GaussianPrior::new(mean.to_vec(), f.clone()).unwrap();
            nll_loss(&y, &likelihood_from_prior(&prior, n)).unwrap()
        };
        assert!((g.loss - loss_at(&mean, &factor, noise)).abs() < 1e-12);
        let h = 1e-6;
        let fd = |plus: f64, minus: f64| (plus - minus) / (2.0 * h);
        for i in 0..d {
            let (mut p, mut m) = (mean.clone(), mean.clone());
            p[i] += h;
            m[i] -= h;
            let want = fd(loss_at(&p, &factor, noise), loss_at(&m, &factor, noise));
            assert!((g.d_mean[i] - want).abs() < 1e-6 * want.abs().max(1.0));
            for j in 0..=i {
                let (mut p, mut m) = (factor.clone(), factor.clone());
                p[(i, j)] += h;
                m[(i, j)] -= h;
                let want = fd(loss_at(&mean, &p, noise), loss_at(&mean, &m, noise));
                assert!((g.d_factor[(i, j)] - want).abs() < 1e-6 * want.abs().max(1.0));
            }
        }
        let s = |v: f64| NoiseParams::new(v, noise.beta).unwrap();
        let b = |v: f64| NoiseParams::new(noise.sigma, v).unwrap();
        let want = fd(
            loss_at(&mean, &factor, s(0.3 + h)),
            loss_at(&mean, &factor, s(0.3 - h)),
        );
        assert!((g.d_sigma - want).abs() < 1e-6 * want.abs().max(1.0));
        let want = fd(
            loss_at(&mean, &factor, b(0.4 + h)),
            loss_at(&mean, &factor, b(0.4 - h)),
        );
        assert!((g.d_beta - want).abs() < 1e-6 * want.abs().max(1.0));
    }
}

#[test]
fn assemble_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 3;
    let raw: Vec<f64> = (0..tri_len(d))
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let w = mat(
        3,
        &(0..9)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect::<Vec<_>>(),
    );
    // scalar test function: sum of w ⊙ L over the lower triangle
    let f = |r: &[f64]| {
        let l = cholesky_assemble(r).unwrap();
        (0..d)
            .flat_map(|i| (0..=i).map(move |j| (i, j)))
            .map(|(i, j)| w[(i, j)] * l[(i, j)])
            .sum::<f64>()
    };
    let got = cholesky_assemble_backward(&raw, &w).unwrap();
    for t in 0..raw.len() {
        let (mut p, mut m) = (raw.clone(), raw.clone());
        p[t] += 1e-6;
        m[t] -= 1e-6;
        let want = (f(&p) - f(&m)) / 2e-6;
        assert!((got[t] - want).abs() < 1e-8, "{t}: {} vs {want}", got[t]);
    }
    assert!(cholesky_assemble_backward(&raw, &Matrix::zeros(2)).is_err());
}

proptest! {
    #[test]
    fn mle_matches_double_loop(seed in 0u64..10_000, k in 2usize..10, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let prior = mle_prior(&pts).unwrap();
        let c = prior.covariance();
        for i in 0..d {
            let mi: f64 = pts.iter().map(|p| p[i]).sum::<f64>() / k as f64;
            prop_assert!((prior.mean()[i] - mi).abs() <= 1e-12);
            for j in 0..d {
                let mj: f64 = pts.iter().map(|p| p[j]).sum::<f64>() / k as f64;
                let mut s = 0.0;
                for p in &pts {
                    s += (p[i] - mi) * (p[j] - mj);
                }
                let mut want = s / (k - 1) as f64;
                if i == j {
                    want += JITTER_BASE;
                }
                prop_assert!((c[(i, j)] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn diagonal_map_shrinks_between_mean_and_observation(seed in 0u64..10_000, d in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cx = Matrix::zeros(d);
        for i in 0..d {
            cx[(i, i)] = rng.random_range(0.01..1.0);
        }
        let mean: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..2.0)).collect();
        let prior = prior_from_cov(mean.clone(), &cx);
        let noise = NoiseParams::new(rng.random_range(0.0..0.5), rng.random_range(0.0..0.5)).unwrap();
        let est = map_estimate(&prior, &likelihood_from_prior(&prior, noise), &y).unwrap().values;
        for i in 0..d {
            let (lo, hi) = (mean[i].min(y[i]), mean[i].max(y[i]));
            prop_assert!(est[i] >= lo - 1e-12 && est[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn map_is_scale_equivariant(seed in 0u64..10_000, d in 1usize..6, s in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cx = random_spd(&mut rng, d);
        let mean: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut noise_cov = Matrix::zeros(d);
        for i in 0..d {
            noise_cov[(i, i)] = rng.random_range(0.01..0.2);
        }
        let build = |scale: f64| {
            let mut c = cx.clone();
            let mut cy = cx.clone();
            for i in 0..d {
                for j in 0..d {
                    c[(i, j)] *= scale * scale;
                    cy[(i, j)] = (cx[(i, j)] + noise_cov[(i, j)]) * scale * scale;
                }
            }
            let m: Vec<f64> = mean.iter().map(|v| v * scale).collect();
            let yy: Vec<f64> = y.iter().map(|v| v * scale).collect();
            let prior = prior_from_cov(m.clone(), &c);
            map_estimate(&prior, &Likelihood { mean: m, cov: cy }, &yy).unwrap().values
        };
        let base = build(1.0);
        let scaled = build(s);
        for (a, b) in base.iter().zip(&scaled) {
            prop_assert!((a * s - b).abs() <= 1e-9 * s.max(1.0));
        }
    }
}
