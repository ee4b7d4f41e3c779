//! Eagerly evaluated tape with a reverse sweep.

use indexmap::IndexMap;

use super::ops::{self, BatchNormCache, NormMode};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F> {
    Input,
    Param(String),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    LeakyRelu {
        x: Var,
        slope: F,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: Box<BatchNormCache<F>>,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: F,
    },
    Softplus {
        x: Var,
    },
    GlobalMean {
        x: Var,
    },
    WindowMean {
        x: Var,
        anchors: Vec<(usize, usize)>,
        side: usize,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Running-statistic update produced by a train-mode batch norm.
#[derive(Debug, Clone)]
pub struct NormUpdate<F> {
    pub name: String,
    pub batch_mean: Vec<F>,
    pub batch_var: Vec<F>,
}

#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    norm_updates: Vec<NormUpdate<F>>,
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            norm_updates: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, what: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {what}")));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sign of every leaky-ReLU input, in recording order.
    pub fn kink_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::LeakyRelu { x, .. } => Some(x),
                _ => None,
            })
            .flat_map(|x| self.nodes[x.0].value.data().iter().map(|v| *v > F::zero()))
            .collect()
    }

    pub fn input(&mut self, t: Tensor<F>) -> Result<Var> {
        self.push(t, Op::Input, "input")
    }

    /// Records a copy of the named parameter as a leaf.
    pub fn param(&mut self, store: &ParamStore<F>, name: &str) -> Result<Var> {
        let t = store.get(name)?.clone();
        self.push(t, Op::Param(name.to_string()), name)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::conv2d_fwd(self.value(x), self.value(w), self.value(b), stride, pad)?;
        self.push(
            y,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            "conv2d",
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: F) -> Result<Var> {
        let y = ops::leaky_relu_fwd(self.value(x), slope);
        self.push(y, Op::LeakyRelu { x, slope }, "leaky_relu")
    }

    /// Batch norm whose running statistics live in `store` under `name.mean` / `name.var`.
    pub fn batch_norm(
        &mut self,
        store: &ParamStore<F>,
        name: &str,
        x: Var,
        mode: NormMode,
    ) -> Result<Var> {
        let gamma = self.param(store, &format!("{name}.gamma"))?;
        let beta = self.param(store, &format!("{name}.beta"))?;
        let rm = store.buffer(&format!("{name}.mean"))?;
        let rv = store.buffer(&format!("{name}.var"))?;
        let (y, cache) = ops::batch_norm_fwd(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            mode,
            rm.data(),
            rv.data(),
        )?;
        if mode == NormMode::Train {
            self.norm_updates.push(NormUpdate {
                name: name.to_string(),
                batch_mean: cache.batch_mean.clone(),
                batch_var: cache.batch_var.clone(),
            });
        }
        self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache: Box::new(cache),
            },
            "batch_norm",
        )
    }

    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let y = ops::avg_pool_fwd(self.value(x), k)?;
        self.push(y, Op::AvgPool { x, k }, "avg_pool")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::DimensionMismatch(format!(
                "add of {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut y = ta.clone();
        y.add_assign(tb);
        self.push(y, Op::Add { a, b }, "add")
    }

    pub fn scale(&mut self, x: Var, s: F) -> Result<Var> {
        let y = self.value(x).map(|v| v * s);
        self.push(y, Op::Scale { x, s }, "scale")
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let y = ops::softplus_fwd(self.value(x));
        self.push(y, Op::Softplus { x }, "softplus")
    }

    pub fn global_mean(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_mean_fwd(self.value(x));
        self.push(y, Op::GlobalMean { x }, "global_mean")
    }

    pub fn window_mean(&mut self, x: Var, anchors: &[(usize, usize)], side: usize) -> Result<Var> {
        let y = ops::window_mean_fwd(self.value(x), anchors, side)?;
        self.push(
            y,
            Op::WindowMean {
                x,
                anchors: anchors.to_vec(),
                side,
            },
            "window_mean",
        )
    }

    /// Running-statistic updates collected from train-mode batch norms since the last call.
    pub fn take_norm_updates(&mut self) -> Vec<NormUpdate<F>> {
        std::mem::take(&mut self.norm_updates)
    }

    /// Reverse sweep from the given `(output, upstream gradient)` seeds.
    pub fn backward(&self, seeds: &[(Var, Tensor<F>)]) -> Result<Gradients<F>> {
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.shape() != self.value(*v).shape() {
                return Err(Error::DimensionMismatch(format!(
                    "seed gradient {:?} for value {:?}",
                    g.shape(),
                    self.value(*v).shape()
                )));
            }
            accumulate(&mut grads, *v, g.clone());
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if !dy.is_finite() {
                return Err(Error::NonFinite(format!("gradient at node {i}")));
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::Param(_) => {
                    grads[i] = Some(dy);
                    continue;
                }
                Op::Conv2d {
                    x,
                    w,
                    stride,
                    pad,
                    b,
                } => {
                    let (dx, dw, db) =
                        ops::conv2d_bwd(self.value(*x), self.value(*w), &dy, *stride, *pad)?;
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db.reshape(self.value(*b).shape())?);
                }
                Op::LeakyRelu { x, slope } => {
                    accumulate(
                        &mut grads,
                        *x,
                        ops::leaky_relu_bwd(self.value(*x), &dy, *slope),
                    );
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (dx, dg, db) = ops::batch_norm_bwd(self.value(*gamma), cache, &dy);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dg.reshape(self.value(*gamma).shape())?);
                    accumulate(&mut grads, *beta, db.reshape(self.value(*beta).shape())?);
                }
                Op::AvgPool { x, k } => {
                    accumulate(
                        &mut grads,
                        *x,
                        ops::avg_pool_bwd(self.value(*x).shape(), &dy, *k),
                    );
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy);
                }
                Op::Scale { x, s } => {
                    let s = *s;
                    accumulate(&mut grads, *x, dy.map(|v| v * s));
                }
                Op::Softplus { x } => {
                    accumulate(&mut grads, *x, ops::softplus_bwd(self.value(*x), &dy));
                }
                Op::GlobalMean { x } => {
                    accumulate(
                        &mut grads,
                        *x,
                        ops::global_mean_bwd(self.value(*x).shape(), &dy),
                    );
                }
                Op::WindowMean { x, anchors, side } => {
                    accumulate(
                        &mut grads,
                        *x,
                        ops::window_mean_bwd(self.value(*x).shape(), anchors, *side, &dy),
                    );
                }
            }
        }
        let mut params = IndexMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(name), Some(g)) = (&node.op, &grads[i]) {
                match params.get_mut(name) {
                    None => {
                        params.insert(name.clone(), g.clone());
                    }
                    Some(acc) => Tensor::add_assign(acc, g),
                }
            }
        }
        Ok(Gradients {
            leaves: grads,
            params,
        })
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of leaf values after [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<F> {
    leaves: Vec<Option<Tensor<F>>>,
    params: IndexMap<String, Tensor<F>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of an input leaf, if it influenced the seeds.
    pub fn input(&self, v: Var) -> Option<&Tensor<F>> {
        self.leaves[v.0].as_ref()
    }

    /// Parameter gradients by name, summed over every use.
    pub fn params(&self) -> &IndexMap<String, Tensor<F>> {
        &self.params
    }

    pub fn into_params(self) -> IndexMap<String, Tensor<F>> {
        self.params
    }
}
