//! Versioned JSON checkpoint.
//!
//! Layout:
//!
//! ```json
//! {
//!   "format": "gpoolnet-checkpoint",
//!   "version": 1,
//!   "spec": { ...ModelSpec... },
//!   "config": { ...TrainConfig... },
//!   "max_nodes": 100,
//!   "seed": 7,
//!   "step": 420,
//!   "progress": { "epoch": 3, "batch_cursor": 0, ... },
//!   "params": [ { "name": "layer1.gcn.weight", "shape": [400, 1024], "data": "<base64>" } ],
//!   "optimizer": { "m": [ ...blobs... ], "v": [ ...blobs... ] }
//! }
//! ```
//!
//! Every blob is float32, row-major, little-endian, base64 encoded.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelSpec, Param};
use crate::tensor::{Scalar, Tensor};
use crate::training::{TrainConfig, TrainState};

pub const FORMAT: &str = "gpoolnet-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub batch_cursor: usize,
    pub epoch_loss_sum: f64,
    pub epoch_correct: usize,
    pub epoch_seen: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Blob {
    name: String,
    shape: [usize; 2],
    data: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerBlobs {
    m: Vec<Blob>,
    v: Vec<Blob>,
}

#[derive(Serialize, Deserialize)]
struct Container {
    format: String,
    version: u32,
    spec: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max_nodes: Option<usize>,
    seed: u64,
    step: u64,
    #[serde(default)]
    progress: Progress,
    params: Vec<Blob>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer: Option<OptimizerBlobs>,
}

/// Everything needed to evaluate a model or resume its training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub config: Option<TrainConfig>,
    /// Node capacity the training graphs were converted with.
    pub max_nodes: Option<usize>,
    pub seed: u64,
    pub step: u64,
    pub progress: Progress,
    pub params: ModelParams<f32>,
    pub optimizer: Option<Moments>,
}

/// Adam first and second moments, one tensor per parameter.
pub type Moments = (Vec<Tensor<f32>>, Vec<Tensor<f32>>);

impl Checkpoint {
    /// Snapshot of a model with no optimizer state.
    pub fn from_params<T: Scalar>(spec: &ModelSpec, params: &ModelParams<T>, seed: u64) -> Self {
        Checkpoint {
            spec: spec.clone(),
            config: None,
            max_nodes: None,
            seed,
            step: 0,
            progress: Progress::default(),
            params: params.cast(),
            optimizer: None,
        }
    }

    /// Snapshot of a training run.
    pub fn from_training<T: Scalar>(
        spec: &ModelSpec,
        cfg: &TrainConfig,
        params: &ModelParams<T>,
        state: &TrainState<T>,
    ) -> Self {
        Checkpoint {
            spec: spec.clone(),
            config: Some(cfg.clone()),
            max_nodes: None,
            seed: cfg.seed,
            step: state.step,
            progress: Progress {
                epoch: state.epoch,
                batch_cursor: state.batch_cursor,
                epoch_loss_sum: state.epoch_loss_sum,
                epoch_correct: state.epoch_correct,
                epoch_seen: state.epoch_seen,
                lr: state.lr,
            },
            params: params.cast(),
            optimizer: Some((
                state.m.iter().map(Tensor::cast).collect(),
                state.v.iter().map(Tensor::cast).collect(),
            )),
        }
    }

    pub fn with_max_nodes(mut self, max_nodes: usize) -> Self {
        self.max_nodes = Some(max_nodes);
        self
    }

    /// Parameters converted to the working precision.
    pub fn params_as<T: Scalar>(&self) -> ModelParams<T> {
        self.params.cast()
    }

    /// Optimizer state converted to the working precision; fresh moments
    /// when the checkpoint carries none.
    pub fn train_state<T: Scalar>(&self) -> TrainState<T> {
        let params = self.params_as::<T>();
        let mut state = TrainState::new(&params);
        if let Some((m, v)) = &self.optimizer {
            state.m = m.iter().map(Tensor::cast).collect();
            state.v = v.iter().map(Tensor::cast).collect();
        }
        state.step = self.step;
        state.epoch = self.progress.epoch;
        state.batch_cursor = self.progress.batch_cursor;
        state.epoch_loss_sum = self.progress.epoch_loss_sum;
        state.epoch_correct = self.progress.epoch_correct;
        state.epoch_seen = self.progress.epoch_seen;
        state.lr = self.progress.lr;
        state
    }

    pub fn to_json(&self) -> Result<String> {
        let names: Vec<&str> = self.params.iter().map(|p| p.name.as_str()).collect();
        let container = Container {
            format: FORMAT.into(),
            version: VERSION,
            spec: self.spec.clone(),
            config: self.config.clone(),
            max_nodes: self.max_nodes,
            seed: self.seed,
            step: self.step,
            progress: self.progress.clone(),
            params: self.params.iter().map(|p| encode(&p.name, &p.value)).collect(),
            optimizer: self.optimizer.as_ref().map(|(m, v)| OptimizerBlobs {
                m: names.iter().zip(m).map(|(n, t)| encode(n, t)).collect(),
                v: names.iter().zip(v).map(|(n, t)| encode(n, t)).collect(),
            }),
        };
        Ok(serde_json::to_string_pretty(&container)?)
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let c: Container = serde_json::from_str(text)
            .map_err(|e| Error::format(path, format!("not a checkpoint: {e}")))?;
        if c.format != FORMAT {
            return Err(Error::format(path, format!("unexpected format tag `{}`", c.format)));
        }
        if c.version != VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint version {}", c.version),
            ));
        }
        c.spec.validate()?;
        let params = c
            .params
            .iter()
            .map(|b| {
                Ok(Param {
                    name: b.name.clone(),
                    value: decode(b, path)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let params = ModelParams::from_params(&c.spec, params)?;
        let optimizer = match &c.optimizer {
            None => None,
            Some(o) => {
                let m = o.m.iter().map(|b| decode(b, path)).collect::<Result<Vec<_>>>()?;
                let v = o.v.iter().map(|b| decode(b, path)).collect::<Result<Vec<_>>>()?;
                let shapes_match = |ts: &[Tensor<f32>]| {
                    ts.len() == params.len()
                        && ts.iter().zip(params.iter()).all(|(t, p)| t.shape() == p.value.shape())
                };
                if !shapes_match(&m) || !shapes_match(&v) {
                    return Err(Error::format(path, "optimizer moments do not match parameters"));
                }
                Some((m, v))
            }
        };
        Ok(Checkpoint {
            spec: c.spec,
            config: c.config,
            max_nodes: c.max_nodes,
            seed: c.seed,
            step: c.step,
            progress: c.progress,
            params,
            optimizer,
        })
    }

    /// Writes through a temporary file and a rename.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_json()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}

fn encode<T: Scalar>(name: &str, t: &Tensor<T>) -> Blob {
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for v in t.as_slice() {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    Blob {
        name: name.to_string(),
        shape: [t.rows(), t.cols()],
        data: B64.encode(bytes),
    }
}

fn decode(b: &Blob, path: &Path) -> Result<Tensor<f32>> {
    let bytes = B64
        .decode(&b.data)
        .map_err(|e| Error::format(path, format!("blob `{}`: {e}", b.name)))?;
    let [rows, cols] = b.shape;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::format(
            path,
            format!(
                "blob `{}` holds {} bytes, shape {rows}x{cols} needs {}",
                b.name,
                bytes.len(),
                rows * cols * 4
            ),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(rows, cols, data)
}
