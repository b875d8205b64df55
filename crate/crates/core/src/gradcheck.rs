//! Central finite-difference checks of tape gradients.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::error::Result;
use crate::model::{bind_params, forward_on_tape, group_of, ModelParams, ModelSpec};
use crate::tensor::Tensor;
use crate::text2graph::TextGraph;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Denominator floor for [`relative_error`].
pub const REL_FLOOR: f64 = 1e-7;

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central difference of `f` with respect to every entry of `x`.
pub fn numeric_gradient(
    x: &Tensor<f64>,
    h: f64,
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
) -> Result<Tensor<f64>> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let plus = f(&probe)?;
        probe.as_mut_slice()[i] = orig - h;
        let minus = f(&probe)?;
        probe.as_mut_slice()[i] = orig;
        out.as_mut_slice()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(out)
}

/// Largest [`relative_error`] over paired entries.
pub fn max_relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupReport {
    pub group: String,
    pub entries: usize,
    pub max_rel_err: f64,
    /// L2 norm of the analytic gradient.
    pub grad_norm: f64,
    pub passed: bool,
    /// The group has no gradient path by construction (projection vectors
    /// with the gate disabled); it passes only if its gradient is exactly 0.
    pub expected_zero: bool,
}

/// Adds uniform noise in `[-scale, scale]` to every parameter.
pub fn jitter(params: &mut ModelParams<f64>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-scale, scale);
    for p in params.iter_mut() {
        for v in p.value.as_mut_slice() {
            *v += dist.sample(&mut rng);
        }
    }
}

/// Eval-mode cross-entropy of one graph.
pub fn model_loss(params: &ModelParams<f64>, spec: &ModelSpec, graph: &TextGraph) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|p| tape.constant(p.value.clone())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let trace = forward_on_tape(&mut tape, spec, &vars, graph, false, &mut rng)?;
    let loss = tape.softmax_cross_entropy(trace.logits, &[graph.label()])?;
    Ok(tape.value(loss).get(0, 0))
}

/// Analytic parameter gradients of [`model_loss`].
pub fn model_gradients(
    params: &ModelParams<f64>,
    spec: &ModelSpec,
    graph: &TextGraph,
) -> Result<Vec<Tensor<f64>>> {
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, params);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let trace = forward_on_tape(&mut tape, spec, &vars, graph, false, &mut rng)?;
    let loss = tape.softmax_cross_entropy(trace.logits, &[graph.label()])?;
    tape.backward(loss)?;
    Ok(vars.iter().map(|&v| tape.grad(v)).collect())
}

/// Compares analytic and finite-difference gradients for every parameter,
/// aggregated by parameter group.
pub fn check_model(
    params: &ModelParams<f64>,
    spec: &ModelSpec,
    graph: &TextGraph,
    h: f64,
    tolerance: f64,
) -> Result<Vec<GroupReport>> {
    let analytic = model_gradients(params, spec, graph)?;
    let mut reports: Vec<GroupReport> = Vec::new();
    for (k, (param, grad)) in params.iter().zip(&analytic).enumerate() {
        let numeric = numeric_gradient(&param.value, h, |probe| {
            let mut trial = params.clone();
            trial.iter_mut().nth(k).expect("index in range").value = probe.clone();
            model_loss(&trial, spec, graph)
        })?;
        let err = max_relative_error(grad, &numeric);
        let sq: f64 = grad.as_slice().iter().map(|g| g * g).sum();
        let expected_zero = !spec.gpool_gate && param.name.ends_with(".projection");
        let group = group_of(&param.name);
        match reports.last_mut() {
            Some(r) if r.group == group => {
                r.entries += grad.len();
                r.max_rel_err = r.max_rel_err.max(err);
                r.grad_norm = (r.grad_norm * r.grad_norm + sq).sqrt();
            }
            _ => reports.push(GroupReport {
                group: group.to_string(),
                entries: grad.len(),
                max_rel_err: err,
                grad_norm: sq.sqrt(),
                passed: false,
                expected_zero,
            }),
        }
    }
    for r in &mut reports {
        r.passed = if r.expected_zero {
            r.grad_norm == 0.0
        } else {
            r.max_rel_err <= tolerance
        };
    }
    Ok(reports)
}
