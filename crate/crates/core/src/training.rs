//! Mini-batch Adam training with a step-decay learning-rate schedule.
//!
//! Each epoch shuffles the dataset with an RNG derived from `(seed, epoch)`,
//! so a run can be resumed from any batch boundary and reproduce the same
//! trajectory. Per-graph gradients are computed in parallel and summed in a
//! fixed order, which keeps results bit-identical regardless of the number
//! of worker threads.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{argmax, bind_params, forward, forward_on_tape, ModelParams, ModelSpec};
use crate::tensor::{Scalar, Tensor};
use crate::text2graph::TextGraph;

/// Graphs per sequential gradient-summing chunk.
const GRAD_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_epochs: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout_keep: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Record elapsed seconds in the metrics log. When false the column is
    /// written as 0 so the log depends only on the inputs.
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.001,
            decay_factor: 0.1,
            decay_epochs: vec![30, 50],
            epochs: 60,
            batch_size: 256,
            dropout_keep: 0.55,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            wall_clock: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "decay epochs must be strictly increasing, got {:?}",
                self.decay_epochs
            )));
        }
        if self.lr0.is_nan() || self.lr0 <= 0.0 || self.decay_factor.is_nan() || self.decay_factor <= 0.0 {
            return Err(Error::Config("learning rate and decay factor must be positive".into()));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::Config(format!(
                "dropout keep rate must lie in (0, 1], got {}",
                self.dropout_keep
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Learning rate for a 0-based epoch: `lr0` times `decay_factor` once for
/// every decay epoch that has been reached.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let drops = cfg.decay_epochs.iter().filter(|&&d| epoch >= d).count();
    (0..drops).fold(cfg.lr0, |lr, _| lr * cfg.decay_factor)
}

/// Optimizer and loop position.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    /// Adam steps taken.
    pub step: u64,
    /// First-moment estimates, one per parameter tensor.
    pub m: Vec<Tensor<T>>,
    /// Second-moment estimates.
    pub v: Vec<Tensor<T>>,
    pub lr: f64,
    /// Epoch currently running (or next to run).
    pub epoch: usize,
    /// Batches of `epoch` already applied.
    pub batch_cursor: usize,
    pub epoch_loss_sum: f64,
    pub epoch_correct: usize,
    pub epoch_seen: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .iter()
            .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        TrainState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            lr: 0.0,
            epoch: 0,
            batch_cursor: 0,
            epoch_loss_sum: 0.0,
            epoch_correct: 0,
            epoch_seen: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
///
/// Fails without touching anything when a gradient entry is not finite.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &[Tensor<T>],
    state: &mut TrainState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradients / {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} for `{}` {:?}",
                g.shape(),
                p.name,
                p.value.shape()
            )));
        }
        if let Some((index, v)) = g
            .as_slice()
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite())
        {
            return Err(Error::NonFiniteGradient {
                param: p.name.clone(),
                index,
                value: v.as_f64(),
            });
        }
    }

    state.step += 1;
    state.lr = lr;
    let t = state.step as i32;
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let one = T::one();
    let bc1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t));
    let bc2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t));
    let lr = T::from_f64_lossy(lr);
    let eps = T::from_f64_lossy(cfg.epsilon);

    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for (((w, &gi), mi), vi) in p
            .value
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(m.as_mut_slice())
            .zip(v.as_mut_slice())
        {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_err: f64,
    pub val_err: Option<f64>,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_err,val_err,wall_seconds";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let val = self.val_err.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.lr, self.train_loss, self.train_err, val, self.wall_seconds
        )
    }
}

/// Append-only metrics CSV, flushed after every row.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl MetricsWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = MetricsWriter {
            out: BufWriter::new(file),
            path,
        };
        w.line(METRICS_HEADER)?;
        Ok(w)
    }

    /// Opens an existing log for appending (resumed runs).
    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if !path.exists() {
            return Self::create(path);
        }
        let file = std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(MetricsWriter {
            out: BufWriter::new(file),
            path,
        })
    }

    pub fn write(&mut self, m: &EpochMetrics) -> Result<()> {
        self.line(&m.csv_row())
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Deterministic 64-bit mixing of several words into one seed.
fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        // splitmix64 finalizer
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// Sample order for `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch as u64, 0x5348_5546]));
    order.shuffle(&mut rng);
    order
}

struct GraphGrad<T> {
    loss: f64,
    correct: bool,
    grads: Vec<Tensor<T>>,
}

/// Loss, prediction and parameter gradients for a single graph in train mode.
fn graph_gradient<T: Scalar>(
    params: &ModelParams<T>,
    spec: &ModelSpec,
    graph: &TextGraph,
    dropout_seed: u64,
) -> Result<GraphGrad<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, params);
    let trace = forward_on_tape(&mut tape, spec, &vars, graph, true, &mut rng)?;
    let correct = argmax(tape.value(trace.logits).as_slice()) == graph.label();
    let loss = tape.softmax_cross_entropy(trace.logits, &[graph.label()])?;
    let loss_value = tape.value(loss).get(0, 0).as_f64();
    tape.backward(loss)?;
    Ok(GraphGrad {
        loss: loss_value,
        correct,
        grads: vars.iter().map(|&v| tape.grad(v)).collect(),
    })
}

fn add_assign<T: Scalar>(acc: &mut [Tensor<T>], other: &[Tensor<T>]) {
    for (a, o) in acc.iter_mut().zip(other) {
        for (x, &y) in a.as_mut_slice().iter_mut().zip(o.as_slice()) {
            *x = *x + y;
        }
    }
}

struct BatchResult<T> {
    loss_sum: f64,
    correct: usize,
    grads: Vec<Tensor<T>>,
}

fn batch_gradient<T: Scalar>(
    params: &ModelParams<T>,
    spec: &ModelSpec,
    dataset: &[TextGraph],
    members: &[usize],
    seeds: &[u64],
) -> Result<BatchResult<T>> {
    let chunks: Vec<Result<BatchResult<T>>> = members
        .par_chunks(GRAD_CHUNK)
        .zip(seeds.par_chunks(GRAD_CHUNK))
        .map(|(ids, seeds)| {
            let mut acc: Option<BatchResult<T>> = None;
            for (&i, &s) in ids.iter().zip(seeds) {
                let g = graph_gradient(params, spec, &dataset[i], s)?;
                match acc.as_mut() {
                    None => {
                        acc = Some(BatchResult {
                            loss_sum: g.loss,
                            correct: usize::from(g.correct),
                            grads: g.grads,
                        })
                    }
                    Some(a) => {
                        a.loss_sum += g.loss;
                        a.correct += usize::from(g.correct);
                        add_assign(&mut a.grads, &g.grads);
                    }
                }
            }
            Ok(acc.expect("chunks are nonempty"))
        })
        .collect();
    let mut total: Option<BatchResult<T>> = None;
    for chunk in chunks {
        let chunk = chunk?;
        match total.as_mut() {
            None => total = Some(chunk),
            Some(t) => {
                t.loss_sum += chunk.loss_sum;
                t.correct += chunk.correct;
                add_assign(&mut t.grads, &chunk.grads);
            }
        }
    }
    Ok(total.expect("batches are nonempty"))
}

/// Error rate of `params` on `dataset` in eval mode. Empty datasets score 0.
pub fn evaluate<T: Scalar>(
    dataset: &[TextGraph],
    params: &ModelParams<T>,
    spec: &ModelSpec,
) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let wrong: Vec<Result<bool>> = dataset
        .par_iter()
        .map(|g| {
            // Eval mode draws nothing from the RNG.
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let logits = forward(params, spec, g, false, &mut rng)?;
            Ok(argmax(&logits) != g.label())
        })
        .collect();
    let mut errors = 0usize;
    for w in wrong {
        errors += usize::from(w?);
    }
    Ok(errors as f64 / dataset.len() as f64)
}

/// Checks that every graph fits the model before any work starts.
pub fn check_dataset(dataset: &[TextGraph], spec: &ModelSpec) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    for (i, g) in dataset.iter().enumerate() {
        if g.feature_dim() != spec.input_dim {
            return Err(Error::Config(format!(
                "graph {i} has {} feature channels, model input_dim is {}",
                g.feature_dim(),
                spec.input_dim
            )));
        }
        if g.label() >= spec.n_classes {
            return Err(Error::Config(format!(
                "graph {i} has label {} but the model has {} classes",
                g.label(),
                spec.n_classes
            )));
        }
        if g.is_degenerate() {
            return Err(Error::DegenerateGraph(format!("graph {i} has no nodes")));
        }
    }
    Ok(())
}

pub struct Trainer<'a, T> {
    spec: ModelSpec,
    cfg: TrainConfig,
    params: ModelParams<T>,
    state: TrainState<T>,
    stop: Option<&'a AtomicBool>,
    stop_at_step: Option<u64>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(spec: &ModelSpec, cfg: &TrainConfig, params: ModelParams<T>) -> Result<Self> {
        let state = TrainState::new(&params);
        Self::resume(spec, cfg, params, state)
    }

    pub fn resume(
        spec: &ModelSpec,
        cfg: &TrainConfig,
        params: ModelParams<T>,
        state: TrainState<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut spec = spec.clone();
        spec.dropout_keep = cfg.dropout_keep;
        spec.validate()?;
        ModelParams::from_params(&spec, params.iter().cloned().collect())?;
        if state.m.len() != params.len() || state.v.len() != params.len() {
            return Err(Error::Config("optimizer state does not match the parameters".into()));
        }
        Ok(Trainer {
            spec,
            cfg: cfg.clone(),
            params,
            state,
            stop: None,
            stop_at_step: None,
        })
    }

    /// Polls `flag` between batches; when it is set, training stops with
    /// [`Error::Interrupted`] and the trainer holds a resumable state.
    pub fn with_stop_flag(mut self, flag: &'a AtomicBool) -> Self {
        self.stop = Some(flag);
        self
    }

    /// Stops with [`Error::Interrupted`] once the optimizer has taken `step`
    /// steps in total, possibly in the middle of an epoch.
    pub fn stop_at_step(mut self, step: u64) -> Self {
        self.stop_at_step = Some(step);
        self
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn state(&self) -> &TrainState<T> {
        &self.state
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn into_parts(self) -> (ModelParams<T>, TrainState<T>) {
        (self.params, self.state)
    }

    pub fn finished(&self) -> bool {
        self.state.epoch >= self.cfg.epochs
    }

    /// Runs (or finishes) the current epoch.
    pub fn run_epoch(
        &mut self,
        train: &[TextGraph],
        val: Option<&[TextGraph]>,
    ) -> Result<EpochMetrics> {
        let started = Instant::now();
        let epoch = self.state.epoch;
        let lr = lr_at(epoch, &self.cfg);
        let order = epoch_order(train.len(), self.cfg.seed, epoch);
        let batches = order.chunks(self.cfg.batch_size).enumerate();

        for (b, members) in batches.skip(self.state.batch_cursor) {
            if self.stop.is_some_and(|f| f.load(Ordering::SeqCst))
                || self.stop_at_step.is_some_and(|s| self.state.step >= s)
            {
                return Err(Error::Interrupted {
                    epoch,
                    step: self.state.step,
                });
            }
            let seeds: Vec<u64> = (0..members.len())
                .map(|i| mix_seed(&[self.cfg.seed, epoch as u64, b as u64, i as u64]))
                .collect();
            let mut result = batch_gradient(&self.params, &self.spec, train, members, &seeds)?;
            let scale = T::from_f64_lossy(1.0 / members.len() as f64);
            for g in &mut result.grads {
                g.as_mut_slice().iter_mut().for_each(|v| *v = *v * scale);
            }
            adam_step(&mut self.params, &result.grads, &mut self.state, lr, &self.cfg)?;
            self.state.batch_cursor = b + 1;
            self.state.epoch_loss_sum += result.loss_sum;
            self.state.epoch_correct += result.correct;
            self.state.epoch_seen += members.len();
        }

        let seen = self.state.epoch_seen.max(1) as f64;
        let metrics = EpochMetrics {
            epoch,
            lr,
            train_loss: self.state.epoch_loss_sum / seen,
            train_err: 1.0 - self.state.epoch_correct as f64 / seen,
            val_err: match val {
                Some(v) => Some(evaluate(v, &self.params, &self.spec)?),
                None => None,
            },
            wall_seconds: if self.cfg.wall_clock {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        self.state.epoch += 1;
        self.state.batch_cursor = 0;
        self.state.epoch_loss_sum = 0.0;
        self.state.epoch_correct = 0;
        self.state.epoch_seen = 0;
        self.state.lr = lr;
        Ok(metrics)
    }

    /// Runs the remaining epochs, handing each epoch's metrics to `on_epoch`.
    pub fn fit(
        &mut self,
        train: &[TextGraph],
        val: Option<&[TextGraph]>,
        mut on_epoch: impl FnMut(&EpochMetrics, &Self) -> Result<()>,
    ) -> Result<Vec<EpochMetrics>> {
        check_dataset(train, &self.spec)?;
        if let Some(v) = val {
            for g in v {
                if g.feature_dim() != self.spec.input_dim {
                    return Err(Error::Config(
                        "validation graphs do not match the model input_dim".into(),
                    ));
                }
            }
        }
        let mut log = Vec::new();
        while !self.finished() {
            let m = self.run_epoch(train, val)?;
            on_epoch(&m, self)?;
            log.push(m);
        }
        Ok(log)
    }
}

/// Builds parameters from `cfg.seed` and trains for `cfg.epochs`.
pub fn train<T: Scalar>(
    dataset: &[TextGraph],
    spec: &ModelSpec,
    cfg: &TrainConfig,
) -> Result<(ModelParams<T>, Vec<EpochMetrics>)> {
    let params = crate::model::build(spec, cfg.seed)?;
    let mut trainer = Trainer::new(spec, cfg, params)?;
    let log = trainer.fit(dataset, None, |_, _| Ok(()))?;
    Ok((trainer.params, log))
}
