//! The four text-graph classifiers.
//!
//! Every architecture stacks four feature layers (GCN or hConv). Layers 2, 3
//! and 4 each feed a masked global max-pool; the three pooled vectors are
//! concatenated, passed through dropout and a dense classifier. The pooling
//! variants insert a gPool site after layers 2 and 3 that keeps half of the
//! remaining nodes (rounded up).

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::normalize_with_self_loops;
use crate::layers::{
    adjacency_constant, gcn_forward, gpool_forward, hconv_forward, pooled_size, ConvVars, GcnVars,
    HConvVars,
};
use crate::tensor::{Scalar, Tensor};
use crate::text2graph::TextGraph;

pub const DEFAULT_CHANNELS: [usize; 4] = [1024, 1024, 512, 256];
pub const DEFAULT_KERNEL_WIDTH: usize = 3;
pub const DEFAULT_DROPOUT_KEEP: f64 = 0.55;
const PROJECTION_INIT: f64 = 0.1;

/// Zero-based indices of the feature layers followed by a gPool site.
const POOL_AFTER: [usize; 2] = [1, 2];
/// Zero-based indices of the feature layers that feed the readout.
const READOUT_FROM: [usize; 3] = [1, 2, 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    GcnNet,
    GcnGpoolNet,
    HconvNet,
    HconvGpoolNet,
}

impl Arch {
    pub const ALL: [Arch; 4] = [
        Arch::GcnNet,
        Arch::GcnGpoolNet,
        Arch::HconvNet,
        Arch::HconvGpoolNet,
    ];

    pub fn uses_hconv(self) -> bool {
        matches!(self, Arch::HconvNet | Arch::HconvGpoolNet)
    }

    pub fn uses_gpool(self) -> bool {
        matches!(self, Arch::GcnGpoolNet | Arch::HconvGpoolNet)
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::GcnNet => "gcn_net",
            Arch::GcnGpoolNet => "gcn_gpool_net",
            Arch::HconvNet => "hconv_net",
            Arch::HconvGpoolNet => "hconv_gpool_net",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s.replace('-', "_").to_ascii_lowercase())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown architecture `{s}` (expected gcn_net, gcn_gpool_net, hconv_net or hconv_gpool_net)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub channels: Vec<usize>,
    pub kernel_width: usize,
    pub n_classes: usize,
    pub input_dim: usize,
    pub dropout_keep: f64,
    /// Re-derive the normalized adjacency from the pooled raw adjacency
    /// after each gPool site. When false, the normalized matrix is sliced.
    #[serde(default = "default_true")]
    pub renormalize_after_pool: bool,
    /// Scale pooled rows by `tanh(score)`. Disabling it cuts the only
    /// gradient path into the projection vectors.
    #[serde(default = "default_true")]
    pub gpool_gate: bool,
}

fn default_true() -> bool {
    true
}

impl ModelSpec {
    pub fn new(arch: Arch, input_dim: usize, n_classes: usize) -> Self {
        ModelSpec {
            arch,
            channels: DEFAULT_CHANNELS.to_vec(),
            kernel_width: DEFAULT_KERNEL_WIDTH,
            n_classes,
            input_dim,
            dropout_keep: DEFAULT_DROPOUT_KEEP,
            renormalize_after_pool: true,
            gpool_gate: true,
        }
    }

    pub fn with_channels(mut self, channels: &[usize]) -> Self {
        self.channels = channels.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 4 {
            return Err(Error::Config(format!(
                "exactly 4 channel widths are required, got {}",
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.arch.uses_hconv() {
            if let Some(c) = self.channels.iter().find(|c| *c % 2 == 1) {
                return Err(Error::Config(format!(
                    "hConv layers split their output in two halves; width {c} is odd"
                )));
            }
        }
        if self.kernel_width.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel width must be odd, got {}",
                self.kernel_width
            )));
        }
        if self.n_classes == 0 || self.input_dim == 0 {
            return Err(Error::Config(
                "n_classes and input_dim must be positive".into(),
            ));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::Config(format!(
                "dropout keep rate must lie in (0, 1], got {}",
                self.dropout_keep
            )));
        }
        Ok(())
    }

    pub fn readout_dim(&self) -> usize {
        READOUT_FROM.iter().map(|&l| self.channels[l]).sum()
    }

    /// 1-based layer numbers followed by a gPool site.
    pub fn pool_placement(&self) -> Vec<usize> {
        if self.arch.uses_gpool() {
            POOL_AFTER.iter().map(|l| l + 1).collect()
        } else {
            Vec::new()
        }
    }

    /// Parameter names and shapes in storage order.
    pub fn layout(&self) -> Vec<ParamSlot> {
        let mut slots = Vec::new();
        let mut c_in = self.input_dim;
        for (l, &c_out) in self.channels.iter().enumerate() {
            let layer = l + 1;
            if self.arch.uses_hconv() {
                let half = c_out / 2;
                let w = self.kernel_width;
                slots.push(ParamSlot::xavier(
                    format!("layer{layer}.conv.kernel"),
                    w * c_in,
                    half,
                    w * c_in,
                    w * half,
                ));
                slots.push(ParamSlot::zeros(format!("layer{layer}.conv.bias"), 1, half));
                slots.push(ParamSlot::xavier(
                    format!("layer{layer}.gcn.weight"),
                    c_in,
                    half,
                    c_in,
                    half,
                ));
                slots.push(ParamSlot::zeros(format!("layer{layer}.gcn.bias"), 1, half));
            } else {
                slots.push(ParamSlot::xavier(
                    format!("layer{layer}.gcn.weight"),
                    c_in,
                    c_out,
                    c_in,
                    c_out,
                ));
                slots.push(ParamSlot::zeros(format!("layer{layer}.gcn.bias"), 1, c_out));
            }
            if self.arch.uses_gpool() && POOL_AFTER.contains(&l) {
                slots.push(ParamSlot {
                    name: format!("pool{layer}.projection"),
                    rows: c_out,
                    cols: 1,
                    init: Init::Uniform(PROJECTION_INIT),
                });
            }
            c_in = c_out;
        }
        let r = self.readout_dim();
        slots.push(ParamSlot::xavier(
            "dense.weight".into(),
            r,
            self.n_classes,
            r,
            self.n_classes,
        ));
        slots.push(ParamSlot::zeros("dense.bias".into(), 1, self.n_classes));
        slots
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `uniform(-s, s)`, `s = sqrt(6 / (fan_in + fan_out))`.
    Xavier { fan_in: usize, fan_out: usize },
    Uniform(f64),
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl ParamSlot {
    fn xavier(name: String, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Self {
        ParamSlot {
            name,
            rows,
            cols,
            init: Init::Xavier { fan_in, fan_out },
        }
    }

    fn zeros(name: String, rows: usize, cols: usize) -> Self {
        ParamSlot {
            name,
            rows,
            cols,
            init: Init::Zeros,
        }
    }

    /// Group label used in reports: the first dotted segment of the name.
    pub fn group(&self) -> &str {
        group_of(&self.name)
    }
}

pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Trainable tensors in [`ModelSpec::layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn from_params(spec: &ModelSpec, params: Vec<Param<T>>) -> Result<Self> {
        let layout = spec.layout();
        if layout.len() != params.len() {
            return Err(Error::Config(format!(
                "{} parameter tensors for a layout of {}",
                params.len(),
                layout.len()
            )));
        }
        for (slot, p) in layout.iter().zip(&params) {
            if slot.name != p.name || (slot.rows, slot.cols) != p.value.shape() {
                return Err(Error::Config(format!(
                    "parameter `{}` {:?} does not match layout slot `{}` {}x{}",
                    p.name,
                    p.value.shape(),
                    slot.name,
                    slot.rows,
                    slot.cols
                )));
            }
        }
        Ok(ModelParams { params })
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Initializes parameters for `spec`, deterministically in `seed`.
pub fn build<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<ModelParams<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = spec
        .layout()
        .into_iter()
        .map(|slot| {
            let n = slot.rows * slot.cols;
            let data: Vec<T> = match slot.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Uniform(s) => sample_uniform(&mut rng, s, n),
                Init::Xavier { fan_in, fan_out } => {
                    sample_uniform(&mut rng, (6.0 / (fan_in + fan_out) as f64).sqrt(), n)
                }
            };
            Param {
                value: Tensor::from_vec(slot.rows, slot.cols, data).expect("sized by slot"),
                name: slot.name,
            }
        })
        .collect();
    Ok(ModelParams { params })
}

fn sample_uniform<T: Scalar>(rng: &mut ChaCha8Rng, s: f64, n: usize) -> Vec<T> {
    let dist = Uniform::new_inclusive(-s, s);
    (0..n)
        .map(|_| T::from_f64_lossy(dist.sample(rng)))
        .collect()
}

/// What a forward pass produced besides the logits.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: Var,
    /// Output shape of each feature layer.
    pub layer_shapes: Vec<(usize, usize)>,
    /// Node indices kept at each gPool site, relative to that site's input.
    pub pool_indices: Vec<Vec<usize>>,
    pub readout_dim: usize,
}

/// Records the forward pass on `tape`. `vars` are the parameter handles in
/// layout order (see [`bind_params`]).
pub fn forward_on_tape<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    spec: &ModelSpec,
    vars: &[Var],
    graph: &TextGraph,
    train: bool,
    rng: &mut R,
) -> Result<ForwardTrace> {
    if graph.feature_dim() != spec.input_dim {
        return Err(Error::Shape(format!(
            "graph features have {} channels, model expects {}",
            graph.feature_dim(),
            spec.input_dim
        )));
    }
    if graph.is_degenerate() {
        return Err(Error::DegenerateGraph(
            "document produced no term nodes".into(),
        ));
    }
    if vars.len() != spec.layout().len() {
        return Err(Error::Config(format!(
            "{} parameter handles for a layout of {}",
            vars.len(),
            spec.layout().len()
        )));
    }
    let mut next = vars.iter().copied();
    let mut take = || next.next().expect("length checked above");

    // Padding rows are dropped up front; every tensor below holds real nodes
    // only, so the masks are all-true.
    let mut adjacency = graph.real_adjacency();
    let mut normalized = graph.normalized().clone();
    let mut x = tape.constant(graph.real_features().cast());

    let mut trace = ForwardTrace {
        logits: x,
        layer_shapes: Vec::new(),
        pool_indices: Vec::new(),
        readout_dim: 0,
    };
    let mut readouts = Vec::new();

    for l in 0..spec.channels.len() {
        let a = adjacency_constant(tape, &normalized);
        x = if spec.arch.uses_hconv() {
            let conv = ConvVars {
                kernel: take(),
                bias: take(),
                width: spec.kernel_width,
            };
            let gcn = GcnVars {
                weight: take(),
                bias: take(),
            };
            hconv_forward(tape, a, x, HConvVars { gcn, conv })?
        } else {
            let gcn = GcnVars {
                weight: take(),
                bias: take(),
            };
            gcn_forward(tape, a, x, gcn)?
        };
        trace.layer_shapes.push(tape.value(x).shape());
        let n = tape.value(x).rows();
        let mask = vec![true; n];

        if READOUT_FROM.contains(&l) {
            readouts.push(tape.masked_global_max_pool(x, &mask)?);
        }
        if spec.arch.uses_gpool() && POOL_AFTER.contains(&l) {
            let p = take();
            let pooled = gpool_forward(
                tape,
                &adjacency,
                x,
                p,
                pooled_size(n),
                &mask,
                spec.gpool_gate,
            )?;
            normalized = if spec.renormalize_after_pool {
                normalize_with_self_loops(&pooled.adjacency)
            } else {
                normalized.extract(&pooled.idx)?
            };
            adjacency = pooled.adjacency;
            x = pooled.features;
            trace.pool_indices.push(pooled.idx);
        }
    }

    let mut readout = readouts[0];
    for &r in &readouts[1..] {
        readout = tape.concat_cols(readout, r)?;
    }
    trace.readout_dim = tape.value(readout).cols();
    let dropped = tape.dropout(readout, spec.dropout_keep, rng, train)?;
    let (w, b) = (take(), take());
    let z = tape.matmul(dropped, w)?;
    trace.logits = tape.add_row(z, b)?;
    Ok(trace)
}

/// Places every parameter on `tape` as a trainable leaf.
pub fn bind_params<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>) -> Vec<Var> {
    params.iter().map(|p| tape.param(p.value.clone())).collect()
}

/// Logits for one graph.
pub fn forward<T: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    spec: &ModelSpec,
    graph: &TextGraph,
    train: bool,
    rng: &mut R,
) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.constant(p.value.clone()))
        .collect();
    let trace = forward_on_tape(&mut tape, spec, &vars, graph, train, rng)?;
    Ok(tape.value(trace.logits).as_slice().to_vec())
}

/// Eval-mode logits; no randomness is involved.
pub fn infer<T: Scalar>(params: &ModelParams<T>, spec: &ModelSpec, graph: &TextGraph) -> Result<Vec<T>> {
    forward(params, spec, graph, false, &mut ChaCha8Rng::seed_from_u64(0))
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GroupCount {
    pub group: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCount {
    pub groups: Vec<GroupCount>,
    pub total: usize,
    /// Scalars held by gPool projection vectors.
    pub gpool_overhead: usize,
    /// `gpool_overhead / total`.
    pub gpool_ratio: f64,
}

/// Exact parameter counts by enumerating the built tensors.
pub fn param_count<T: Scalar>(params: &ModelParams<T>) -> ParamCount {
    let mut groups: Vec<GroupCount> = Vec::new();
    let mut overhead = 0;
    for p in params.iter() {
        let g = group_of(&p.name);
        if p.name.ends_with(".projection") {
            overhead += p.value.len();
        }
        match groups.last_mut() {
            Some(last) if last.group == g => last.count += p.value.len(),
            _ => groups.push(GroupCount {
                group: g.to_string(),
                count: p.value.len(),
            }),
        }
    }
    let total = params.scalar_count();
    ParamCount {
        groups,
        total,
        gpool_overhead: overhead,
        gpool_ratio: if total == 0 {
            0.0
        } else {
            overhead as f64 / total as f64
        },
    }
}
