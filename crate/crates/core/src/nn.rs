//! Parameter storage, initializers, layers and the Adam optimizer.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::float::Float;
use crate::graph::{BatchStats, Graph, Var};
use crate::tensor::Tensor;

/// Deterministic generator threaded through every stochastic operation.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Fan-in and fan-out of a weight shape: `[out, in]` for dense layers,
/// `[out, in, k]` for convolutions.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (*n, *n),
        [out, inp] => (*inp, *out),
        [out, inp, rest @ ..] => {
            let field: usize = rest.iter().product();
            (inp * field, out * field)
        }
        [] => (1, 1),
    }
}

/// Glorot/Xavier uniform initialization on `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_init<F: Float>(shape: &[usize], rng: &mut Rng) -> Tensor<F> {
    let (fan_in, fan_out) = fans(shape);
    let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    Tensor::from_fn(shape, |_| F::from_f64(rng.random_range(-bound..bound)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named learnable tensors, in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Float> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<F>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    /// Places every parameter on the tape as a gradient-receiving leaf.
    pub fn bind(&self, g: &mut Graph<F>) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t.clone())).collect())
    }

    /// Places every parameter on the tape as a constant.
    pub fn bind_frozen(&self, g: &mut Graph<F>) -> Bound {
        Bound(self.tensors.iter().map(|t| g.constant(t.clone())).collect())
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(|t| t.cast()).collect() }
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

/// Tape handles for every parameter of a [`ParamStore`].
pub struct Bound(pub Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DenseLayer {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let weight = store.add(alloc::format!("{name}.weight"), xavier_init(&[outputs, inputs], rng));
        let bias = store.add(alloc::format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Self { weight, bias }
    }

    pub fn forward<F: Float>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        ctx.g.dense(x, ctx.var(self.weight), ctx.var(self.bias))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvLayer {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        inputs: usize,
        outputs: usize,
        kernel: usize,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add(alloc::format!("{name}.weight"), xavier_init(&[outputs, inputs, kernel], rng));
        let bias = store.add(alloc::format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Self { weight, bias }
    }

    pub fn forward<F: Float>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        ctx.g.conv1d(x, ctx.var(self.weight), ctx.var(self.bias))
    }
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Running estimates of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

impl<F: Float> RunningStats<F> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![F::zero(); channels], var: vec![F::one(); channels] }
    }

    pub fn cast<G: Float>(&self) -> RunningStats<G> {
        RunningStats {
            mean: self.mean.iter().map(|&x| G::from_f64(x.to_f64())).collect(),
            var: self.var.iter().map(|&x| G::from_f64(x.to_f64())).collect(),
        }
    }
}

/// Batch norm over the last axis; `stats` indexes the owner's running
/// statistics table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: usize,
}

impl BatchNormLayer {
    pub fn new<F: Float>(store: &mut ParamStore<F>, running: &mut Vec<RunningStats<F>>, name: &str, channels: usize) -> Self {
        let gamma = store.add(alloc::format!("{name}.gamma"), Tensor::full(&[channels], F::one()));
        let beta = store.add(alloc::format!("{name}.beta"), Tensor::zeros(&[channels]));
        running.push(RunningStats::new(channels));
        Self { gamma, beta, stats: running.len() - 1 }
    }

    /// Train mode normalizes with batch statistics and records them in
    /// `ctx.updates`; infer mode uses the running estimates.
    pub fn forward<F: Float>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let eps = F::from_f64(BN_EPS);
        let (gamma, beta) = (ctx.params.var(self.gamma), ctx.params.var(self.beta));
        match ctx.mode {
            Mode::Train => {
                let (y, batch) = ctx.g.batchnorm_train(x, gamma, beta, eps)?;
                ctx.updates.push((self.stats, batch));
                Ok(y)
            }
            Mode::Infer => {
                let rs = &ctx.running[self.stats];
                ctx.g.batchnorm_infer(x, gamma, beta, &rs.mean, &rs.var, eps)
            }
        }
    }
}

/// Everything a layer needs during one forward pass.
pub struct Ctx<'a, F> {
    pub g: &'a mut Graph<F>,
    pub params: &'a Bound,
    pub running: &'a [RunningStats<F>],
    pub mode: Mode,
    pub updates: Vec<(usize, BatchStats<F>)>,
}

impl<'a, F: Float> Ctx<'a, F> {
    pub fn new(g: &'a mut Graph<F>, params: &'a Bound, running: &'a [RunningStats<F>], mode: Mode) -> Self {
        Self { g, params, running, mode, updates: Vec::new() }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.params.var(id)
    }
}

/// Folds batch statistics into running estimates:
/// `running = m·running + (1−m)·batch`, with unbiased batch variance.
pub fn apply_running_updates<F: Float>(running: &mut [RunningStats<F>], updates: Vec<(usize, BatchStats<F>)>) {
    let m = F::from_f64(BN_MOMENTUM);
    let one_m = F::one() - m;
    for (i, batch) in updates {
        let rs = &mut running[i];
        let unbias = F::from_f64(batch.count as f64 / (batch.count - 1) as f64);
        for (r, &b) in rs.mean.iter_mut().zip(&batch.mean) {
            *r = m * *r + one_m * b;
        }
        for (r, &b) in rs.var.iter_mut().zip(&batch.var) {
            *r = m * *r + one_m * b * unbias;
        }
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub first: Vec<Tensor<F>>,
    pub second: Vec<Tensor<F>>,
}

impl<F: Float> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, step: 0, first: Vec::new(), second: Vec::new() }
    }

    /// Moments are allocated lazily on the first step.
    pub fn step(&mut self, params: &mut [Tensor<F>], grads: &[Option<&Tensor<F>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(shape_err("adam", alloc::format!("{} params, {} grads", params.len(), grads.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(shape_err("adam", alloc::format!("{:?} vs {:?}", p.shape(), g.shape())));
                }
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.second = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - libm::pow(b1, t);
        let c2 = 1.0 - libm::pow(b2, t);
        let (fb1, fb2) = (F::from_f64(b1), F::from_f64(b2));
        let (fc1, fc2) = (F::from_f64(c1), F::from_f64(c2));
        let (lr, eps) = (F::from_f64(self.lr), F::from_f64(self.epsilon));
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = fb1 * *m + (F::one() - fb1) * g;
                *v = fb2 * *v + (F::one() - fb2) * g * g;
                let mhat = *m / fc1;
                let vhat = *v / fc2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
