//! Maximum-likelihood training: per-sample losses are recorded fixed-step
//! integrations (discretize-then-optimize), gradients come from the tape,
//! and an Adam optimizer applies them under a stepped learning-rate decay.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Exec;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::flow::{AttrStats, AttributeVector, EmbeddingVector, FlowModel, T0, T1};
use crate::solver::{integrate_recorded, AugmentedState, SolverConfig, TraceMode};

/// Fixed RK4 step count used for recorded training integrations; the
/// adaptive solver stays reserved for inference.
pub const TRAIN_RK4_STEPS: usize = 20;

/// Trace evaluation choice during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceChoice {
    Exact,
    Hutchinson { probes: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub decay: f64,
    /// Epoch interval between decay steps.
    pub decay_every: usize,
    pub epochs: usize,
    pub trace: TraceChoice,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 200,
            lr0: 1e-4,
            decay: 0.98,
            decay_every: 100,
            epochs: 200,
            trace: TraceChoice::Exact,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0 {
            return Err(Error::InvalidInput("lr0 must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::InvalidInput("decay must lie in (0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch_size must be >= 1".into()));
        }
        if self.decay_every == 0 {
            return Err(Error::InvalidInput("decay_every must be >= 1".into()));
        }
        if let TraceChoice::Hutchinson { probes: 0 } = self.trace {
            return Err(Error::InvalidInput("probes must be >= 1".into()));
        }
        Ok(())
    }

    /// `lr0 · decay^⌊epoch / decay_every⌋`
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay.powi((epoch / self.decay_every) as i32)
    }
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub nll: Vec<f64>,
    pub learning_rates: Vec<f64>,
    pub wall_secs: f64,
    pub model: FlowModel,
}

/// Training aborted by numerical failure; carries the last good model so the
/// caller can persist it.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub epoch: usize,
    pub last_good: Box<FlowModel>,
}

impl std::fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "training aborted at epoch {}: {}",
            self.epoch, self.error
        )
    }
}

impl std::error::Error for TrainAbort {}

// ── Adam ────────────────────────────────────────────────────────────────

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grad[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

// ── loss ────────────────────────────────────────────────────────────────

fn training_solver() -> SolverConfig {
    SolverConfig::rk4(TRAIN_RK4_STEPS)
}

fn sample_trace_mode(trace: TraceChoice, seed: u64, sample_tag: u64) -> TraceMode {
    match trace {
        TraceChoice::Exact => TraceMode::Exact,
        TraceChoice::Hutchinson { probes } => TraceMode::Hutchinson {
            probes,
            seed: seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(sample_tag),
        },
    }
}

/// Negative log-likelihood and its parameter gradient for one sample.
fn sample_nll_grad(
    model: &FlowModel,
    s: &EmbeddingVector,
    a: &AttributeVector,
    trace: &TraceMode,
) -> Result<(f64, Vec<f64>)> {
    let cfg = training_solver();
    let mut rec = integrate_recorded(
        model.field(),
        &AugmentedState::new(s.values().to_vec()),
        T1,
        T0,
        a.values(),
        &cfg,
        trace,
    )?;
    // −log p = (d/2)·log 2π + |z₀|²/2 + δ
    let d = model.d() as f64;
    let sq = rec.tape.dot(&rec.z_end, &rec.z_end);
    let half = rec.tape.scale(&sq, 0.5);
    let with_delta = rec.tape.add_scaled(&half, &rec.delta_end, 1.0);
    let loss = rec
        .tape
        .add_const(&with_delta, 0.5 * d * (2.0 * std::f64::consts::PI).ln());
    rec.tape.finalize(loss);
    let value = rec.tape.value(loss)[0];
    if !value.is_finite() {
        return Err(Error::Instability {
            context: "non-finite sample loss".into(),
        });
    }
    let grads = rec.tape.backward(&[1.0])?;
    Ok((value, grads.flatten()))
}

/// Mean negative log-likelihood over a batch with its parameter gradient
/// (flat layout of the field's parameter set). Per-sample passes are
/// independent; accumulation runs in index order so results do not depend on
/// the thread count.
pub fn nll_batch(
    model: &FlowModel,
    batch: &[(EmbeddingVector, AttributeVector)],
    trace: TraceChoice,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let per_sample: Vec<Result<(f64, Vec<f64>)>> = {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            batch
                .par_iter()
                .enumerate()
                .map(|(i, (s, a))| {
                    sample_nll_grad(model, s, a, &sample_trace_mode(trace, seed, i as u64))
                })
                .collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            batch
                .iter()
                .enumerate()
                .map(|(i, (s, a))| {
                    sample_nll_grad(model, s, a, &sample_trace_mode(trace, seed, i as u64))
                })
                .collect()
        }
    };

    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad: Option<Vec<f64>> = None;
    for r in per_sample {
        let (l, g) = r?;
        loss += l;
        match &mut grad {
            None => grad = Some(g),
            Some(acc) => {
                for (ai, gi) in acc.iter_mut().zip(&g) {
                    *ai += gi;
                }
            }
        }
    }
    let mut grad = grad.expect("non-empty batch");
    for g in grad.iter_mut() {
        *g /= n;
    }
    Ok((loss / n, grad))
}

// ── attribute normalization ─────────────────────────────────────────────

/// Fits per-dimension (min, max) over the raw list and maps each vector
/// affinely onto [0, 1]. The returned statistics are stored in the model so
/// later inputs normalize identically.
pub fn normalize_attributes(raw: &[Vec<f64>]) -> Result<(Vec<AttributeVector>, AttrStats)> {
    let stats = AttrStats::from_data(raw)?;
    let normalized = apply_stats(&stats, raw)?;
    Ok((normalized, stats))
}

/// Applies existing statistics; bit-reproducible for the data that fit them.
pub fn apply_stats(stats: &AttrStats, raw: &[Vec<f64>]) -> Result<Vec<AttributeVector>> {
    raw.iter().map(|r| Ok(stats.normalize(r)?.0)).collect()
}

// ── the training loop ───────────────────────────────────────────────────

/// Incremental trainer: owns the model, optimizer state, and seeded
/// shuffling so training can be stepped one epoch at a time.
pub struct Trainer {
    model: FlowModel,
    data: Vec<(EmbeddingVector, AttributeVector)>,
    cfg: TrainConfig,
    adam: Adam,
    epoch: usize,
    nll: Vec<f64>,
    learning_rates: Vec<f64>,
}

impl Trainer {
    pub fn new(
        model: FlowModel,
        data: Vec<(EmbeddingVector, AttributeVector)>,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidInput("empty training set".into()));
        }
        for (s, a) in &data {
            if s.dim() != model.d() || a.dim() != model.k() {
                return Err(Error::DimensionMismatch {
                    what: "training sample",
                    expected: model.d(),
                    got: s.dim(),
                });
            }
        }
        let n_params = model.field().params().num_scalars();
        Ok(Self {
            model,
            data,
            cfg,
            adam: Adam::new(n_params),
            epoch: 0,
            nll: Vec::new(),
            learning_rates: Vec::new(),
        })
    }

    pub fn model(&self) -> &FlowModel {
        &self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn nll_history(&self) -> &[f64] {
        &self.nll
    }

    /// Batch index order for this epoch: a seeded shuffle, padded by
    /// wraparound when the dataset is smaller than one batch.
    fn epoch_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.cfg
                .seed
                .wrapping_mul(0xA076_1D64_78BD_642F)
                .wrapping_add(self.epoch as u64),
        );
        order.shuffle(&mut rng);
        if order.len() < self.cfg.batch_size {
            let n = order.len();
            for i in n..self.cfg.batch_size {
                order.push(order[i % n]);
            }
        }
        order
    }

    /// Runs one epoch; returns its mean NLL.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let lr = self.cfg.learning_rate(self.epoch);
        let order = self.epoch_order();
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let batch: Vec<(EmbeddingVector, AttributeVector)> =
                chunk.iter().map(|&i| self.data[i].clone()).collect();
            let batch_seed = self
                .cfg
                .seed
                .wrapping_add((self.epoch as u64) << 20)
                .wrapping_add(b as u64);
            let (loss, grad) = nll_batch(&self.model, &batch, self.cfg.trace, batch_seed).map_err(
                |e| match e {
                    Error::Instability { context } => Error::Instability {
                        context: format!("epoch {} batch {b}: {context}", self.epoch),
                    },
                    other => other,
                },
            )?;
            let params = self.model.field_mut().params_mut();
            let mut flat = params.flatten();
            self.adam.step(&mut flat, &grad, lr);
            params.assign_flat(&flat)?;
            epoch_loss += loss;
            batches += 1;
        }
        let mean = epoch_loss / batches as f64;
        if !mean.is_finite() {
            return Err(Error::Instability {
                context: format!("epoch {}: non-finite mean NLL", self.epoch),
            });
        }
        self.nll.push(mean);
        self.learning_rates.push(lr);
        self.epoch += 1;
        Ok(mean)
    }

    pub fn into_report(self, wall_secs: f64) -> TrainReport {
        TrainReport {
            nll: self.nll,
            learning_rates: self.learning_rates,
            wall_secs,
            model: self.model,
        }
    }
}

#[cfg(not(target_arch = "wasm32"))]
fn now() -> Option<std::time::Instant> {
    Some(std::time::Instant::now())
}

#[cfg(target_arch = "wasm32")]
fn now() -> Option<std::time::Instant> {
    None
}

/// Runs the full schedule. Deterministic given the seed (initialization is
/// the caller's, shuffling and probes are derived from `cfg.seed`). On
/// numerical failure the snapshot from the last completed decay interval is
/// returned inside the abort.
pub fn train(
    model: FlowModel,
    data: Vec<(EmbeddingVector, AttributeVector)>,
    cfg: TrainConfig,
) -> std::result::Result<TrainReport, TrainAbort> {
    let start = now();
    let epochs = cfg.epochs;
    let decay_every = cfg.decay_every;
    let mut trainer = match Trainer::new(model.clone(), data, cfg) {
        Ok(t) => t,
        Err(error) => {
            return Err(TrainAbort {
                error,
                epoch: 0,
                last_good: Box::new(model),
            })
        }
    };
    let mut last_good = model;
    for e in 0..epochs {
        if e > 0 && e % decay_every == 0 {
            last_good = trainer.model().clone();
        }
        if let Err(error) = trainer.run_epoch() {
            return Err(TrainAbort {
                error,
                epoch: e,
                last_good: Box::new(last_good),
            });
        }
    }
    let wall = start.map(|s| s.elapsed().as_secs_f64()).unwrap_or(0.0);
    Ok(trainer.into_report(wall))
}
