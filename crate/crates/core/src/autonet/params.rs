use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::graph::NormUpdate;
use super::ops::BN_MOMENTUM;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Adam {
            lr,
            ..Self::default()
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments<F> {
    m: Vec<F>,
    v: Vec<F>,
}

/// Named trainable tensors with their Adam moments, plus non-trainable buffers
/// (batch-norm running statistics).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F> {
    params: IndexMap<String, Tensor<F>>,
    moments: IndexMap<String, Moments<F>>,
    buffers: IndexMap<String, Tensor<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
            moments: IndexMap::new(),
            buffers: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<F>) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        let n = t.len();
        self.moments.insert(
            name.to_string(),
            Moments {
                m: vec![F::zero(); n],
                v: vec![F::zero(); n],
            },
        );
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: &str, t: Tensor<F>) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate buffer name {name:?}"
            )));
        }
        self.buffers.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<F>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown buffer {name:?}")))
    }

    /// Replaces the values of an existing parameter; the shape must not change.
    pub fn set(&mut self, name: &str, t: Tensor<F>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))?;
        if slot.shape() != t.shape() {
            return Err(Error::DimensionMismatch(format!(
                "parameter {name:?} has shape {:?}, got {:?}",
                slot.shape(),
                t.shape()
            )));
        }
        *slot = t;
        Ok(())
    }

    pub fn set_buffer(&mut self, name: &str, t: Tensor<F>) -> Result<()> {
        let slot = self
            .buffers
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown buffer {name:?}")))?;
        if slot.shape() != t.shape() {
            return Err(Error::DimensionMismatch(format!(
                "buffer {name:?} shape changed"
            )));
        }
        *slot = t;
        Ok(())
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<F>> {
        &self.params
    }

    pub fn buffers(&self) -> &IndexMap<String, Tensor<F>> {
        &self.buffers
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Folds batch statistics into the running estimates:
    /// `running = momentum·running + (1 − momentum)·batch`.
    pub fn apply_norm_updates(&mut self, updates: &[NormUpdate<F>]) -> Result<()> {
        let mom = F::lit(BN_MOMENTUM);
        let rest = F::one() - mom;
        for u in updates {
            for (suffix, batch) in [("mean", &u.batch_mean), ("var", &u.batch_var)] {
                let name = format!("{}.{suffix}", u.name);
                let buf = self
                    .buffers
                    .get_mut(&name)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown buffer {name:?}")))?;
                for (r, &b) in buf.data_mut().iter_mut().zip(batch.iter()) {
                    *r = mom * *r + rest * b;
                }
            }
        }
        Ok(())
    }

    /// Registers `[cout, cin, k, k]` weights with He fan-in normal initialization and a zero bias.
    pub fn init_conv<R: Rng>(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<()> {
        let fan_in = (cin * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w: Vec<F> = (0..cout * cin * k * k)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                F::lit(std * z)
            })
            .collect();
        self.insert(&format!("{name}.w"), Tensor::new([cout, cin, k, k], w)?)?;
        self.insert(&format!("{name}.b"), Tensor::zeros([cout, 1, 1, 1]))
    }

    /// Registers a `k×k` convolution with all-zero weights and bias.
    pub fn init_conv_zero(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
        self.insert(&format!("{name}.w"), Tensor::zeros([cout, cin, k, k]))?;
        self.insert(&format!("{name}.b"), Tensor::zeros([cout, 1, 1, 1]))
    }

    /// Registers a batch norm over `c` channels: unit scale, zero shift, running mean 0 and variance 1.
    pub fn init_norm(&mut self, name: &str, c: usize) -> Result<()> {
        self.insert(
            &format!("{name}.gamma"),
            Tensor::full([c, 1, 1, 1], F::one()),
        )?;
        self.insert(&format!("{name}.beta"), Tensor::zeros([c, 1, 1, 1]))?;
        self.insert_buffer(&format!("{name}.mean"), Tensor::zeros([c, 1, 1, 1]))?;
        self.insert_buffer(&format!("{name}.var"), Tensor::full([c, 1, 1, 1], F::one()))
    }
}

/// One bias-corrected Adam update at step `t ≥ 1` for every parameter with a gradient.
///
/// Parameters absent from `grads` are left untouched, as are their moments.
pub fn adam_step<F: Real>(
    store: &mut ParamStore<F>,
    grads: &IndexMap<String, Tensor<F>>,
    opt: &Adam,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidArgument("Adam step count starts at 1".into()));
    }
    for (name, g) in grads {
        let p = store.params.get_mut(name).ok_or_else(|| {
            Error::InvalidArgument(format!("gradient for unknown parameter {name:?}"))
        })?;
        if p.shape() != g.shape() {
            return Err(Error::DimensionMismatch(format!(
                "gradient for {name:?} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        let mo = store
            .moments
            .get_mut(name)
            .expect("moments registered with parameter");
        let c1 = 1.0 - opt.beta1.powi(t as i32);
        let c2 = 1.0 - opt.beta2.powi(t as i32);
        for (((pv, &gv), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(mo.m.iter_mut())
            .zip(mo.v.iter_mut())
        {
            let gv = gv.as_f64();
            let mn = opt.beta1 * m.as_f64() + (1.0 - opt.beta1) * gv;
            let vn = opt.beta2 * v.as_f64() + (1.0 - opt.beta2) * gv * gv;
            *m = F::lit(mn);
            *v = F::lit(vn);
            let update = opt.lr * (mn / c1) / ((vn / c2).sqrt() + opt.eps);
            *pv = F::lit(pv.as_f64() - update);
        }
    }
    Ok(())
}
