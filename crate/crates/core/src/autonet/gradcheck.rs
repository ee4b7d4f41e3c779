//! Finite-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Coordinate with the largest relative error.
    pub worst: usize,
    pub checked: usize,
}

/// Compares `analytic` against fourth-order central differences of `f` around `x`.
///
/// Each partial uses the five-point stencil at `x ± step` and `x ± 2·step`.
/// The relative error of coordinate `i` is `|a − n| / max(|a|, |n|, 1e-6·max(1, ‖a‖∞))`, so
/// coordinates whose gradient is negligible next to the largest one are judged on an
/// absolute scale. Coordinates for which `skip(i)` holds are ignored.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    analytic: &[f64],
    step: f64,
    tolerance: f64,
    skip: impl Fn(usize) -> bool,
) -> Result<GradReport> {
    if analytic.len() != x.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} analytic partials for {} inputs",
            analytic.len(),
            x.len()
        )));
    }
    let amax = analytic.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-6 * amax;
    let mut probe = x.to_vec();
    let mut report = GradReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: 0,
        checked: 0,
    };
    for i in 0..x.len() {
        if skip(i) {
            continue;
        }
        let mut at = |h: f64| -> Result<f64> {
            probe[i] = x[i] + h;
            f(&probe)
        };
        let (up2, up, down, down2) = (at(2.0 * step)?, at(step)?, at(-step)?, at(-2.0 * step)?);
        probe[i] = x[i];
        let numeric = (8.0 * (up - down) - (up2 - down2)) / (12.0 * step);
        let a = analytic[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(floor);
        if !rel.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite difference at coordinate {i}"
            )));
        }
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = i;
        }
        report.max_abs_err = report.max_abs_err.max(abs);
        report.checked += 1;
    }
    if report.max_rel_err > tolerance {
        return Err(Error::GradCheck(format!(
            "relative error {:.3e} at coordinate {} exceeds {tolerance:.1e}",
            report.max_rel_err, report.worst
        )));
    }
    Ok(report)
}

/// Checks the gradient of a graph-built op with respect to all of its inputs.
///
/// The scalar under test is `Σ r ⊙ op(inputs)` with a fixed standard-normal `r` drawn from
/// `seed`. `skip` receives the flat coordinate over the concatenated inputs.
pub fn check_graph_op(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    seed: u64,
    step: f64,
    tolerance: f64,
    skip: impl Fn(usize) -> bool,
) -> Result<GradReport> {
    let eval = |ins: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars = ins
            .iter()
            .map(|t| g.input(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let (g, vars, out) = eval(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(out).shape();
    let weights = Tensor::new(
        shape,
        (0..g.value(out).len())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect(),
    )?;
    let grads = g.backward(&[(out, weights.clone())])?;
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match grads.input(*v) {
            Some(gr) => analytic.extend_from_slice(gr.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }
    let x: Vec<f64> = inputs
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    let f = |flat: &[f64]| -> Result<f64> {
        let mut off = 0;
        let ins = inputs
            .iter()
            .map(|t| {
                let part = flat[off..off + t.len()].to_vec();
                off += t.len();
                Tensor::new(t.shape(), part)
            })
            .collect::<Result<Vec<_>>>()?;
        let (g, _, out) = eval(&ins)?;
        Ok(g.value(out)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum())
    };
    grad_check(f, &x, &analytic, step, tolerance, skip)
}
