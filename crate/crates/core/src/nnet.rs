//! Conditional ε-predictor: a residual MLP over flattened latents with additive
//! time and condition embeddings, optional low-rank adapters on the hidden
//! dense layers, and hand-written reverse-mode gradients.

use std::collections::BTreeMap;

use log::debug;
use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// Anything that predicts the noise component of a batch of noised latents.
///
/// Rows of `x` and `cond` are batch items; `ts[i]` is the timestep of row `i`.
pub trait EpsModel {
    fn predict_batch(
        &self,
        x: ArrayView2<'_, f64>,
        cond: ArrayView2<'_, f64>,
        ts: &[usize],
    ) -> Result<Array2<f64>>;

    fn predict(&self, x: &[f64], cond: &[f64], t: usize) -> Result<Vec<f64>> {
        let xb = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let cb = ArrayView2::from_shape((1, cond.len()), cond).expect("row view");
        Ok(self.predict_batch(xb, cb, &[t])?.into_raw_vec_and_offset().0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    pub hidden: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub total_steps: usize,
    pub rank: usize,
    /// Indices of hidden dense layers (0..3) carrying adapters.
    pub adapted_layers: Vec<usize>,
}

impl DenoiserConfig {
    pub fn new(data_dim: usize, total_steps: usize) -> Self {
        Self {
            data_dim,
            hidden: 256,
            cond_dim: 32,
            time_dim: 32,
            total_steps,
            rank: 4,
            adapted_layers: vec![0, 1, 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("model.data_dim", self.data_dim),
            ("model.hidden", self.hidden),
            ("model.cond_dim", self.cond_dim),
            ("model.total_steps", self.total_steps),
            ("model.rank", self.rank),
        ] {
            if v == 0 {
                return Err(Error::param(field, "must be positive"));
            }
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::param("model.time_dim", "must be a positive even number"));
        }
        if let Some(l) = self.adapted_layers.iter().find(|l| **l >= HIDDEN_LAYERS) {
            return Err(Error::param(
                "model.adapted_layers",
                format!("layer {l} is not a hidden layer (0..{HIDDEN_LAYERS})"),
            ));
        }
        Ok(())
    }
}

const HIDDEN_LAYERS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn uniform(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: uniform_matrix(out_dim, in_dim, rng),
            bias: Array1::zeros(out_dim),
        }
    }
}

/// Low-rank update `up · down` added to a frozen dense weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    /// `out × r`, zero at initialization.
    pub up: Array2<f64>,
    /// `r × in`
    pub down: Array2<f64>,
}

impl Adapter {
    pub fn delta(&self) -> Array2<f64> {
        self.up.dot(&self.down)
    }
}

fn uniform_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let bound = 1.0 / (cols as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Sinusoidal features for timesteps `0..=total_steps`.
fn time_table(total_steps: usize, dim: usize) -> Array2<f64> {
    let half = dim / 2;
    Array2::from_shape_fn((total_steps + 1, dim), |(t, k)| {
        let j = k % half;
        let freq = (-(10_000f64).ln() * j as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        if k < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    /// Input, two hidden-to-hidden, and output dense layers.
    pub layers: Vec<Dense>,
    /// `hidden × time_dim`, applied to the fixed sinusoidal table.
    pub time_proj: Array2<f64>,
    /// `hidden × cond_dim`
    pub cond_proj: Array2<f64>,
    /// Keyed by hidden layer index.
    pub adapters: BTreeMap<usize, Adapter>,
    time_table: Array2<f64>,
    /// `sqrt(1 - abar[t])` per timestep: the output carries this multiple of
    /// the input, the best noise estimate under a standard-normal prior, so the
    /// network only learns the remainder.
    skip: Vec<f64>,
}

/// Which tensors receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Everything except adapters.
    Base,
    /// Adapters only (plus condition gradients); the base is frozen.
    Adapters,
}

impl DenoiserParams {
    pub fn init(config: DenoiserConfig, sched: &NoiseSchedule, seed: u64) -> Result<Self> {
        config.validate()?;
        if sched.total_steps() != config.total_steps {
            return Err(Error::param(
                "model.total_steps",
                format!("{} disagrees with the schedule's {}", config.total_steps, sched.total_steps()),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h) = (config.data_dim, config.hidden);
        let layers = vec![
            Dense::uniform(h, d, &mut rng),
            Dense::uniform(h, h, &mut rng),
            Dense::uniform(h, h, &mut rng),
            Dense::uniform(d, h, &mut rng),
        ];
        let time_proj = uniform_matrix(h, config.time_dim, &mut rng);
        let cond_proj = uniform_matrix(h, config.cond_dim, &mut rng);
        let mut params = Self {
            time_table: time_table(config.total_steps, config.time_dim),
            skip: (0..=config.total_steps).map(|t| sched.coefficients(t).1).collect(),
            config,
            layers,
            time_proj,
            cond_proj,
            adapters: BTreeMap::new(),
        };
        params.reset_adapters(seed ^ 0xada9_7e55);
        Ok(params)
    }

    /// Fresh adapters: `up` zero, `down` uniform in ±1/sqrt(fan_in).
    pub fn reset_adapters(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.adapters.clear();
        for &l in &self.config.adapted_layers {
            let w = &self.layers[l].weight;
            let (out_dim, in_dim) = w.dim();
            self.adapters.insert(
                l,
                Adapter {
                    up: Array2::zeros((out_dim, self.config.rank)),
                    down: uniform_matrix(self.config.rank, in_dim, &mut rng),
                },
            );
        }
    }

    pub fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.config.cond_dim
    }

    /// Folds every adapter into its base weight and removes the adapters.
    pub fn merged(&self) -> Self {
        let mut out = self.clone();
        for (l, a) in &self.adapters {
            out.layers[*l].weight = &out.layers[*l].weight + &a.delta();
        }
        out.adapters.clear();
        out
    }

    fn effective_weight(&self, l: usize) -> Array2<f64> {
        match self.adapters.get(&l) {
            Some(a) => &self.layers[l].weight + &a.delta(),
            None => self.layers[l].weight.clone(),
        }
    }

    /// Checksum over the base tensors only (layers and projections).
    pub fn base_checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            if !name.starts_with("adapter") {
                h.update(name.as_bytes());
                for v in t.iter() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    pub fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weight"), l.weight.view().into_dyn()));
            out.push((format!("layer{i}.bias"), l.bias.view().into_dyn()));
        }
        out.push(("time_proj".into(), self.time_proj.view().into_dyn()));
        out.push(("cond_proj".into(), self.cond_proj.view().into_dyn()));
        for (l, a) in &self.adapters {
            out.push((format!("adapter{l}.up"), a.up.view().into_dyn()));
            out.push((format!("adapter{l}.down"), a.down.view().into_dyn()));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.weight"), l.weight.view_mut().into_dyn()));
            out.push((format!("layer{i}.bias"), l.bias.view_mut().into_dyn()));
        }
        out.push(("time_proj".into(), self.time_proj.view_mut().into_dyn()));
        out.push(("cond_proj".into(), self.cond_proj.view_mut().into_dyn()));
        for (l, a) in self.adapters.iter_mut() {
            out.push((format!("adapter{l}.up"), a.up.view_mut().into_dyn()));
            out.push((format!("adapter{l}.down"), a.down.view_mut().into_dyn()));
        }
        out
    }

    /// Rebuilds parameters from named tensors; shapes are checked against `config`.
    pub fn from_named(
        config: DenoiserConfig,
        sched: &NoiseSchedule,
        tensors: &BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    ) -> Result<Self> {
        let mut params = Self::init(config, sched, 0)?;
        let adapted: Vec<usize> = params.adapters.keys().copied().collect();
        for l in adapted {
            if !tensors.contains_key(&format!("adapter{l}.up")) {
                params.adapters.remove(&l);
            }
        }
        for (name, mut view) in params.named_tensors_mut() {
            let (shape, data) = tensors
                .get(&name)
                .ok_or_else(|| Error::Container(format!("missing tensor `{name}`")))?;
            if shape.as_slice() != view.shape() {
                return Err(Error::Container(format!(
                    "tensor `{name}` has shape {shape:?}, expected {:?}",
                    view.shape()
                )));
            }
            for (dst, src) in view.iter_mut().zip(data) {
                *dst = *src;
            }
        }
        Ok(params)
    }

    fn check_batch(&self, x: &ArrayView2<'_, f64>, cond: &ArrayView2<'_, f64>, ts: &[usize]) -> Result<()> {
        if x.ncols() != self.config.data_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.data_dim,
                actual: x.ncols(),
            });
        }
        if cond.ncols() != self.config.cond_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.cond_dim,
                actual: cond.ncols(),
            });
        }
        if cond.nrows() != x.nrows() || ts.len() != x.nrows() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                actual: cond.nrows().min(ts.len()),
            });
        }
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > self.config.total_steps) {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.config.total_steps,
            });
        }
        Ok(())
    }

    fn forward(&self, x: ArrayView2<'_, f64>, cond: ArrayView2<'_, f64>, ts: &[usize]) -> (Array2<f64>, Cache) {
        let tau = self.time_table.select(Axis(0), ts);
        let embed = tau.dot(&self.time_proj.t()) + cond.dot(&self.cond_proj.t());
        let weights: Vec<Array2<f64>> = (0..HIDDEN_LAYERS).map(|l| self.effective_weight(l)).collect();

        let mut pre = Vec::with_capacity(HIDDEN_LAYERS);
        let mut acts = Vec::with_capacity(HIDDEN_LAYERS);
        let mut h = x.to_owned();
        for (l, w) in weights.iter().enumerate() {
            let mut z = h.dot(&w.t());
            z += &self.layers[l].bias;
            z += &embed;
            let a = z.mapv(silu);
            let next = if l == 0 { a } else { &h + &a };
            pre.push(z);
            acts.push(std::mem::replace(&mut h, next));
        }
        let mut out = h.dot(&self.layers[3].weight.t()) + &self.layers[3].bias;
        for ((mut row, xr), &t) in out.rows_mut().into_iter().zip(x.rows()).zip(ts) {
            row.scaled_add(self.skip[t], &xr);
        }
        acts.push(h);
        (
            out,
            Cache {
                tau,
                cond: cond.to_owned(),
                weights,
                pre,
                acts,
            },
        )
    }

    fn backward(&self, cache: &Cache, d_out: &Array2<f64>, mode: TrainMode) -> Gradients {
        let mut grads = Gradients::default();
        let base = mode == TrainMode::Base;
        let top = &cache.acts[HIDDEN_LAYERS];
        if base {
            grads.insert("layer3.weight", d_out.t().dot(top).into_dyn());
            grads.insert("layer3.bias", d_out.sum_axis(Axis(0)).into_dyn());
        }
        let mut dh = d_out.dot(&self.layers[3].weight);
        let mut d_embed = Array2::<f64>::zeros((d_out.nrows(), self.config.hidden));
        for l in (0..HIDDEN_LAYERS).rev() {
            let mut dz = dh.clone();
            Zip::from(&mut dz).and(&cache.pre[l]).for_each(|g, &z| *g *= silu_grad(z));
            let input = &cache.acts[l];
            let dw = dz.t().dot(input);
            if base {
                grads.insert(&format!("layer{l}.bias"), dz.sum_axis(Axis(0)).into_dyn());
            }
            if let Some(a) = self.adapters.get(&l) {
                if !base {
                    grads.insert(&format!("adapter{l}.up"), dw.dot(&a.down.t()).into_dyn());
                    grads.insert(&format!("adapter{l}.down"), a.up.t().dot(&dw).into_dyn());
                }
            }
            if base {
                grads.insert(&format!("layer{l}.weight"), dw.into_dyn());
            }
            d_embed += &dz;
            if l > 0 {
                // residual branch carries dh straight through
                dh += &dz.dot(&cache.weights[l]);
            }
        }
        if base {
            grads.insert("time_proj", d_embed.t().dot(&cache.tau).into_dyn());
            grads.insert("cond_proj", d_embed.t().dot(&cache.cond).into_dyn());
        }
        grads.cond = d_embed.dot(&self.cond_proj);
        grads
    }
}

impl EpsModel for DenoiserParams {
    fn predict_batch(
        &self,
        x: ArrayView2<'_, f64>,
        cond: ArrayView2<'_, f64>,
        ts: &[usize],
    ) -> Result<Array2<f64>> {
        self.check_batch(&x, &cond, ts)?;
        Ok(self.forward(x, cond, ts).0)
    }
}

struct Cache {
    tau: Array2<f64>,
    cond: Array2<f64>,
    weights: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    /// Inputs to each hidden layer, then the final hidden state.
    acts: Vec<Array2<f64>>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Gradients of the loss, keyed by tensor name, plus the per-item gradient
/// with respect to the condition vector (`batch × cond_dim`).
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub tensors: BTreeMap<String, ndarray::ArrayD<f64>>,
    pub cond: Array2<f64>,
}

impl Gradients {
    fn insert(&mut self, name: &str, g: ndarray::ArrayD<f64>) {
        self.tensors.insert(name.to_string(), g);
    }

    pub fn get(&self, name: &str) -> Option<&ndarray::ArrayD<f64>> {
        self.tensors.get(name)
    }
}

/// One training item: a clean latent and the condition it is paired with.
#[derive(Debug, Clone)]
pub struct TrainItem<'a> {
    pub x0: &'a [f64],
    pub cond: &'a [f64],
}

/// Noised batch drawn for one loss evaluation.
#[derive(Debug, Clone)]
pub struct NoisedBatch {
    pub xt: Array2<f64>,
    pub cond: Array2<f64>,
    pub eps: Array2<f64>,
    pub ts: Vec<usize>,
}

impl NoisedBatch {
    /// Draws `t ~ U{1..T}` then `eps ~ N(0, I)` per item, in batch order.
    pub fn sample(items: &[TrainItem<'_>], sched: &NoiseSchedule, rng: &mut impl Rng) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Empty("training batch".into()))?;
        let (d, c) = (first.x0.len(), first.cond.len());
        let b = items.len();
        let mut xt = Array2::zeros((b, d));
        let mut cond = Array2::zeros((b, c));
        let mut eps = Array2::zeros((b, d));
        let mut ts = Vec::with_capacity(b);
        for (i, item) in items.iter().enumerate() {
            if item.x0.len() != d {
                return Err(Error::DimensionMismatch { expected: d, actual: item.x0.len() });
            }
            if item.cond.len() != c {
                return Err(Error::DimensionMismatch { expected: c, actual: item.cond.len() });
            }
            let t = rng.random_range(1..=sched.total_steps());
            let (sa, sb) = sched.coefficients(t);
            for j in 0..d {
                let e: f64 = StandardNormal.sample(rng);
                eps[[i, j]] = e;
                xt[[i, j]] = sa * item.x0[j] + sb * e;
            }
            cond.row_mut(i).assign(&ndarray::aview1(item.cond));
            ts.push(t);
        }
        Ok(Self { xt, cond, eps, ts })
    }
}

/// Mean over the batch of `||eps - eps_hat||^2` for an arbitrary predictor.
pub fn batch_loss(model: &impl EpsModel, batch: &NoisedBatch) -> Result<f64> {
    let pred = model.predict_batch(batch.xt.view(), batch.cond.view(), &batch.ts)?;
    let diff = &pred - &batch.eps;
    Ok(diff.mapv(|v| v * v).sum() / batch.ts.len() as f64)
}

/// Loss and gradients on a pre-drawn noised batch.
pub fn batch_loss_and_grads(
    params: &DenoiserParams,
    batch: &NoisedBatch,
    mode: TrainMode,
) -> Result<(f64, Gradients)> {
    params.check_batch(&batch.xt.view(), &batch.cond.view(), &batch.ts)?;
    let (pred, cache) = params.forward(batch.xt.view(), batch.cond.view(), &batch.ts);
    let n = batch.ts.len() as f64;
    let diff = &pred - &batch.eps;
    let loss = diff.mapv(|v| v * v).sum() / n;
    if !loss.is_finite() {
        return Err(Error::Diverged { step: 0, loss });
    }
    let d_out = diff * (2.0 / n);
    Ok((loss, params.backward(&cache, &d_out, mode)))
}

/// Samples timesteps and noise for `items`, then returns the loss and its gradients.
pub fn loss_and_grads(
    params: &DenoiserParams,
    items: &[TrainItem<'_>],
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
    mode: TrainMode,
) -> Result<(f64, Gradients)> {
    let batch = NoisedBatch::sample(items, sched, rng)?;
    batch_loss_and_grads(params, &batch, mode)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Pretraining fails if the final running loss exceeds this.
    pub max_final_loss: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self, section: &str) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::param(format!("{section}.learning_rate"), "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::param(format!("{section}.batch_size"), "must be positive"));
        }
        Ok(())
    }
}

/// Applies gradient updates by tensor name. Adam moments are kept per name.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    step: i32,
    moments: BTreeMap<String, (ndarray::ArrayD<f64>, ndarray::ArrayD<f64>)>,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Call once per optimisation step before the `apply` calls of that step.
    pub fn tick(&mut self) {
        self.step += 1;
    }

    pub fn apply(&mut self, name: &str, mut param: ArrayViewMutD<'_, f64>, grad: &ndarray::ArrayD<f64>) {
        match self.kind {
            Optimizer::Sgd => param.scaled_add(-self.lr, grad),
            Optimizer::Adam { beta1, beta2, eps } => {
                let (m, v) = self
                    .moments
                    .entry(name.to_string())
                    .or_insert_with(|| (ndarray::ArrayD::zeros(grad.raw_dim()), ndarray::ArrayD::zeros(grad.raw_dim())));
                let c1 = 1.0 - beta1.powi(self.step);
                let c2 = 1.0 - beta2.powi(self.step);
                let lr = self.lr;
                Zip::from(&mut param).and(m).and(v).and(grad).for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Running loss sampled every `steps / 50` steps.
    pub curve: Vec<(usize, f64)>,
}

/// Exponential running mean used for training curves.
#[derive(Debug, Clone, Default)]
pub(crate) struct RunningLoss {
    value: Option<f64>,
    first: Vec<f64>,
}

impl RunningLoss {
    const WARMUP: usize = 20;
    const DECAY: f64 = 0.98;

    pub(crate) fn push(&mut self, loss: f64) {
        if self.first.len() < Self::WARMUP {
            self.first.push(loss);
        }
        self.value = Some(match self.value {
            None => loss,
            Some(v) => Self::DECAY * v + (1.0 - Self::DECAY) * loss,
        });
    }

    /// Mean of the first few losses.
    pub(crate) fn initial(&self) -> f64 {
        if self.first.is_empty() {
            f64::NAN
        } else {
            self.first.iter().sum::<f64>() / self.first.len() as f64
        }
    }

    pub(crate) fn current(&self) -> f64 {
        self.value.unwrap_or(f64::NAN)
    }
}

/// Trains every base tensor on `corpus` with the ε-prediction objective.
/// Adapters are left exactly as they were.
pub fn pretrain_base(
    params: &DenoiserParams,
    corpus: &[TrainItem<'_>],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(DenoiserParams, TrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Empty("pretraining corpus".into()));
    }
    cfg.validate("pretrain")?;
    let mut params = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate);
    let mut running = RunningLoss::default();
    let mut curve = Vec::new();
    let every = (cfg.steps / 50).max(1);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for step in 0..cfg.steps {
        batch.clear();
        batch.extend((0..cfg.batch_size).map(|_| corpus[rng.random_range(0..corpus.len())].clone()));
        let (loss, grads) = match loss_and_grads(&params, &batch, sched, &mut rng, TrainMode::Base) {
            Err(Error::Diverged { loss, .. }) => return Err(Error::Diverged { step, loss }),
            other => other?,
        };
        running.push(loss);
        opt.tick();
        for (name, view) in params.named_tensors_mut() {
            if let Some(g) = grads.get(&name) {
                opt.apply(&name, view, g);
            }
        }
        if (step + 1) % every == 0 {
            curve.push((step + 1, running.current()));
            debug!("pretrain step {} running loss {:.4}", step + 1, running.current());
        }
    }
    let report = TrainReport {
        initial_loss: running.initial(),
        final_loss: running.current(),
        curve,
    };
    if let Some(threshold) = cfg.max_final_loss {
        if cfg.steps > 0 && !(report.final_loss <= threshold) {
            return Err(Error::NotConverged {
                loss: report.final_loss,
                threshold,
            });
        }
    }
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            data_dim: 5,
            hidden: 6,
            cond_dim: 3,
            time_dim: 4,
            total_steps: 100,
            rank: 2,
            adapted_layers: vec![0, 1, 2],
        }
    }

    fn tiny_sched() -> NoiseSchedule {
        NoiseSchedule::linear(100, 1e-4, 0.02).unwrap()
    }

    fn with_random_adapters(seed: u64) -> DenoiserParams {
        let mut p = DenoiserParams::init(tiny(), &tiny_sched(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for a in p.adapters.values_mut() {
            a.up.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        }
        p
    }

    fn fixed_batch(seed: u64) -> NoisedBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let cond: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let items: Vec<TrainItem> = x0.iter().zip(&cond).map(|(x0, cond)| TrainItem { x0, cond }).collect();
        NoisedBatch::sample(&items, &NoiseSchedule::linear(100, 1e-4, 0.02).unwrap(), &mut rng).unwrap()
    }

    #[test]
    fn fresh_adapters_do_not_change_predictions() {
        let p = DenoiserParams::init(tiny(), &tiny_sched(), 3).unwrap();
        let mut bare = p.clone();
        bare.adapters.clear();
        let b = fixed_batch(1);
        let a = p.predict_batch(b.xt.view(), b.cond.view(), &b.ts).unwrap();
        let c = bare.predict_batch(b.xt.view(), b.cond.view(), &b.ts).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn merged_adapters_match_unmerged() {
        let p = with_random_adapters(5);
        let b = fixed_batch(2);
        let a = p.predict_batch(b.xt.view(), b.cond.view(), &b.ts).unwrap();
        let m = p.merged().predict_batch(b.xt.view(), b.cond.view(), &b.ts).unwrap();
        for (x, y) in a.iter().zip(&m) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-10);
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = DenoiserParams::init(tiny(), &tiny_sched(), 9).unwrap();
        let b = DenoiserParams::init(tiny(), &tiny_sched(), 9).unwrap();
        assert_eq!(a.base_checksum(), b.base_checksum());
        assert_ne!(a.base_checksum(), DenoiserParams::init(tiny(), &tiny_sched(), 10).unwrap().base_checksum());
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = DenoiserParams::init(tiny(), &tiny_sched(), 0).unwrap();
        assert!(p.predict(&[0.0; 4], &[0.0; 3], 1).is_err());
        assert!(p.predict(&[0.0; 5], &[0.0; 2], 1).is_err());
        assert!(matches!(p.predict(&[0.0; 5], &[0.0; 3], 101), Err(Error::TimestepOutOfRange { .. })));
        let mut cfg = tiny();
        cfg.adapted_layers = vec![3];
        assert!(DenoiserParams::init(cfg, &tiny_sched(), 0).is_err());
        assert!(DenoiserParams::init(tiny(), &NoiseSchedule::default(), 0).is_err());
    }

    fn loss_of(p: &DenoiserParams, b: &NoisedBatch) -> f64 {
        batch_loss(p, b).unwrap()
    }

    fn check_gradients(mode: TrainMode) {
        let p = with_random_adapters(11);
        let b = fixed_batch(4);
        let (loss, grads) = batch_loss_and_grads(&p, &b, mode).unwrap();
        assert_abs_diff_eq!(loss, loss_of(&p, &b), epsilon = 1e-12);
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        let h = 1e-6;
        let mut checked = 0;
        for name in names {
            let trainable = name.starts_with("adapter") == (mode == TrainMode::Adapters);
            let Some(g) = grads.get(&name) else {
                assert!(!trainable, "missing gradient for {name}");
                continue;
            };
            assert!(trainable, "unexpected gradient for {name}");
            let len = g.len();
            for idx in (0..len).step_by(len / 7 + 1) {
                let bump = |delta: f64| {
                    let mut q = p.clone();
                    for (n, mut v) in q.named_tensors_mut() {
                        if n == name {
                            *v.iter_mut().nth(idx).unwrap() += delta;
                        }
                    }
                    loss_of(&q, &b)
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                let analytic = *g.iter().nth(idx).unwrap();
                let scale = numeric.abs().max(analytic.abs()).max(1e-6);
                assert!((numeric - analytic).abs() / scale < 1e-4, "{name}[{idx}]: {analytic} vs {numeric}");
                checked += 1;
            }
        }
        assert!(checked > 10);
        // condition gradient
        for i in 0..b.cond.nrows() {
            for j in 0..b.cond.ncols() {
                let bump = |delta: f64| {
                    let mut c = b.clone();
                    c.cond[[i, j]] += delta;
                    loss_of(&p, &c)
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                let analytic = grads.cond[[i, j]];
                let scale = numeric.abs().max(analytic.abs()).max(1e-6);
                assert!((numeric - analytic).abs() / scale < 1e-4, "cond[{i},{j}]");
            }
        }
    }

    #[test]
    fn base_gradients_match_finite_differences() {
        check_gradients(TrainMode::Base);
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        check_gradients(TrainMode::Adapters);
    }

    struct Oracle<'a>(&'a Array2<f64>);

    impl EpsModel for Oracle<'_> {
        fn predict_batch(&self, _: ArrayView2<'_, f64>, _: ArrayView2<'_, f64>, _: &[usize]) -> Result<Array2<f64>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn perfect_and_zero_predictors() {
        let b = fixed_batch(6);
        assert_eq!(batch_loss(&Oracle(&b.eps), &b).unwrap(), 0.0);

        // zero output: expected loss equals the data dimension
        let sched = NoiseSchedule::default();
        let x0 = vec![0.2; 16];
        let cond = vec![0.0; 3];
        let items = vec![TrainItem { x0: &x0, cond: &cond }; 10_000];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = NoisedBatch::sample(&items, &sched, &mut rng).unwrap();
        let zeros = Array2::zeros(batch.eps.dim());
        let loss = batch_loss(&Oracle(&zeros), &batch).unwrap();
        assert!((loss - 16.0).abs() < 0.3, "{loss}");
    }

    #[test]
    fn zero_steps_leave_parameters_unchanged() {
        let p = DenoiserParams::init(tiny(), &tiny_sched(), 1).unwrap();
        let x0 = vec![0.1; 5];
        let cond = vec![0.0; 3];
        let corpus = [TrainItem { x0: &x0, cond: &cond }];
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            steps: 0,
            batch_size: 2,
            seed: 0,
            optimizer: Optimizer::Sgd,
            max_final_loss: Some(0.0),
        };
        let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let (q, _) = pretrain_base(&p, &corpus, &sched, &cfg).unwrap();
        assert_eq!(q.base_checksum(), p.base_checksum());
        assert!(pretrain_base(&p, &[], &sched, &cfg).is_err());
    }

    #[test]
    fn pretraining_reduces_loss_and_keeps_adapters() {
        let p = DenoiserParams::init(tiny(), &tiny_sched(), 2).unwrap();
        let x0 = vec![0.5, -0.5, 0.25, 0.0, 1.0];
        let cond = vec![1.0, 0.0, -1.0];
        let corpus = [TrainItem { x0: &x0, cond: &cond }];
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            steps: 600,
            batch_size: 16,
            seed: 4,
            optimizer: Optimizer::adam(),
            max_final_loss: None,
        };
        let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let (q, report) = pretrain_base(&p, &corpus, &sched, &cfg).unwrap();
        assert!(report.final_loss < report.initial_loss, "{report:?}");
        assert_eq!(q.adapters, p.adapters);
        assert_eq!(report.curve.len(), 50);
    }

    #[test]
    fn named_round_trip() {
        let p = with_random_adapters(8);
        let named: BTreeMap<String, (Vec<usize>, Vec<f64>)> = p
            .named_tensors()
            .into_iter()
            .map(|(n, v)| (n, (v.shape().to_vec(), v.iter().copied().collect())))
            .collect();
        let q = DenoiserParams::from_named(tiny(), &tiny_sched(), &named).unwrap();
        assert_eq!(q.base_checksum(), p.base_checksum());
        assert_eq!(q.adapters, p.adapters);
    }
}
