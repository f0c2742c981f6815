//! Model configuration, trainable parameters, and the versioned model file.

use crate::tensor::{Tensor, TensorError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("task index {task} out of range for {tasks} tasks")]
    TaskRange { task: usize, tasks: usize },
    #[error("dense query length {got} != declared {expected}")]
    QueryDim { got: usize, expected: usize },
    #[error("node feature dimension {got} != declared {expected}")]
    FeatureDim { got: usize, expected: usize },
    #[error("model file {path}: {message}")]
    ModelFile { path: String, message: String },
    #[error("model/data schema mismatch: {0}")]
    SchemaMismatch(String),
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Query/controller dimension.
    pub d_q: usize,
    /// Memory cell dimension.
    pub d_m: usize,
    /// Input node feature dimension.
    pub d_x: usize,
    /// Reasoning hops T. 0 selects the structure-free pooling baseline:
    /// the classifier sees only mean-pooled node embeddings (no adjacency,
    /// no attention).
    pub hops: usize,
    /// Read heads K.
    pub heads: usize,
    /// Relation types R.
    pub relations: usize,
    /// Discrete task count; 0 means dense-query mode.
    pub n_tasks: usize,
    /// Dense query input size; 0 in discrete mode.
    pub query_dim: usize,
    pub n_classes: usize,
    pub dropout: f64,
    /// Attention score dimension d_a.
    pub attn_dim: usize,
    /// Hidden width of the decoder feedforward.
    pub decoder_hidden: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("d_q", self.d_q),
            ("d_m", self.d_m),
            ("d_x", self.d_x),
            ("heads", self.heads),
            ("relations", self.relations),
            ("attn_dim", self.attn_dim),
            ("decoder_hidden", self.decoder_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be >= 1")));
            }
        }
        if self.n_classes < 2 {
            return Err(ModelError::Config("n_classes must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        match (self.n_tasks, self.query_dim) {
            (0, 0) => {
                return Err(ModelError::Config(
                    "either n_tasks (discrete queries) or query_dim (dense queries) must be set"
                        .into(),
                ))
            }
            (t, q) if t > 0 && q > 0 => {
                return Err(ModelError::Config(
                    "n_tasks and query_dim are mutually exclusive".into(),
                ))
            }
            _ => {}
        }
        Ok(())
    }

    /// Number of decoder output logits: one for binary heads, else one per class.
    pub fn logit_count(&self) -> usize {
        if self.n_classes == 2 {
            1
        } else {
            self.n_classes
        }
    }

    /// Parameter names and shapes in canonical (initialization) order.
    /// Gate biases start at +1 so gates open near copy-through.
    fn layout(&self) -> Vec<(String, usize, usize, ParamInit)> {
        let mut out = Vec::new();
        if self.n_tasks > 0 {
            out.push(("query.embed".into(), self.n_tasks, self.d_q, ParamInit::Glorot));
        } else {
            out.push(("query.w".into(), self.d_q, self.query_dim, ParamInit::Glorot));
            out.push(("query.b".into(), self.d_q, 1, ParamInit::Zero));
        }
        out.push(("load.w".into(), self.d_m, self.d_x, ParamInit::Glorot));
        out.push(("load.b".into(), self.d_m, 1, ParamInit::Zero));
        for k in 0..self.heads {
            out.push((format!("head.{k}.v"), 1, self.attn_dim, ParamInit::Glorot));
            out.push((format!("head.{k}.wa"), self.attn_dim, self.d_m, ParamInit::Glorot));
            out.push((format!("head.{k}.ua"), self.attn_dim, self.d_q, ParamInit::Glorot));
        }
        out.push(("ctrl.wh".into(), self.d_q, self.d_q, ParamInit::Glorot));
        out.push(("ctrl.uh".into(), self.d_q, self.d_m, ParamInit::Glorot));
        out.push(("ctrl.gate.w".into(), self.d_q, self.d_q + self.d_m, ParamInit::Glorot));
        out.push(("ctrl.gate.b".into(), self.d_q, 1, ParamInit::One));
        out.push(("mem.um".into(), self.d_m, self.d_q, ParamInit::Glorot));
        out.push(("mem.wm".into(), self.d_m, self.d_m, ParamInit::Glorot));
        for r in 0..self.relations {
            out.push((format!("mem.rel.{r}"), self.d_m, self.d_m, ParamInit::Glorot));
        }
        out.push(("mem.gate.w".into(), self.d_m, self.d_m + self.d_q, ParamInit::Glorot));
        out.push(("mem.gate.b".into(), self.d_m, 1, ParamInit::One));
        out.push(("dec.w1".into(), self.decoder_hidden, 2 * self.d_q, ParamInit::Glorot));
        out.push(("dec.b1".into(), self.decoder_hidden, 1, ParamInit::Zero));
        out.push(("dec.w2".into(), self.logit_count(), self.decoder_hidden, ParamInit::Glorot));
        out.push(("dec.b2".into(), self.logit_count(), 1, ParamInit::Zero));
        out
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum ParamInit {
    Glorot,
    Zero,
    One,
}

/// One named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Every trainable matrix and vector of the model, in a fixed order.
#[derive(Debug, Clone)]
pub struct ModelParams {
    entries: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    /// Glorot-uniform initialization, deterministic for a fixed seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        for (name, rows, cols, init) in config.layout() {
            let values = match init {
                ParamInit::Glorot => {
                    let limit = (6.0 / (rows + cols) as f64).sqrt();
                    (0..rows * cols)
                        .map(|_| rng.gen_range(-limit..limit))
                        .collect()
                }
                ParamInit::Zero => vec![0.0; rows * cols],
                ParamInit::One => vec![1.0; rows * cols],
            };
            entries.push(Parameter {
                name,
                value: Tensor::new(rows, cols, values)?,
                grad: Tensor::zeros(rows, cols),
            });
        }
        Ok(Self::from_entries(entries))
    }

    fn from_entries(entries: Vec<Parameter>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        ModelParams { entries, index }
    }

    pub fn entries(&self) -> &[Parameter] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Parameter] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Value of a parameter that is guaranteed to exist by construction.
    pub fn tensor(&self, name: &str) -> &Tensor {
        &self.entries[self.index[name]].value
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.index[name];
        &mut self.entries[i].value
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad.values_mut().fill(0.0);
        }
    }

    /// Elementwise-adds `values` into the gradient of entry `idx`.
    pub fn accumulate_grad(&mut self, idx: usize, values: &[f64]) {
        let grad = self.entries[idx].grad.values_mut();
        debug_assert_eq!(grad.len(), values.len());
        for (g, v) in grad.iter_mut().zip(values) {
            *g += v;
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.entries {
            for g in p.grad.values_mut() {
                *g *= factor;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|p| p.value.all_finite())
    }
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: (usize, usize),
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    config: ModelConfig,
    params: Vec<ParamRecord>,
}

/// Writes config and parameters; `load_model(save_model(..))` reproduces
/// forward outputs bit-identically (JSON f64 round-trips exactly).
pub fn save_model(path: &Path, config: &ModelConfig, params: &ModelParams) -> Result<(), ModelError> {
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        config: config.clone(),
        params: params
            .entries()
            .iter()
            .map(|p| ParamRecord {
                name: p.name.clone(),
                shape: p.value.shape(),
                values: p.value.values().to_vec(),
            })
            .collect(),
    };
    let f = File::create(path).map_err(|e| ModelError::ModelFile {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer(&mut w, &file).map_err(|e| ModelError::ModelFile {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    w.flush().map_err(|e| ModelError::ModelFile {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_model(path: &Path) -> Result<(ModelConfig, ModelParams), ModelError> {
    let err = |message: String| ModelError::ModelFile {
        path: path.display().to_string(),
        message,
    };
    let f = File::open(path).map_err(|e| err(e.to_string()))?;
    let file: ModelFile =
        serde_json::from_reader(BufReader::new(f)).map_err(|e| err(e.to_string()))?;
    if file.format_version != MODEL_FORMAT_VERSION {
        return Err(err(format!(
            "unsupported format version {} (expected {})",
            file.format_version, MODEL_FORMAT_VERSION
        )));
    }
    file.config.validate()?;
    let layout = file.config.layout();
    if layout.len() != file.params.len() {
        return Err(err(format!(
            "expected {} parameters, found {}",
            layout.len(),
            file.params.len()
        )));
    }
    let mut entries = Vec::with_capacity(layout.len());
    for ((name, rows, cols, _), rec) in layout.into_iter().zip(file.params) {
        if rec.name != name || rec.shape != (rows, cols) {
            return Err(err(format!(
                "parameter {} with shape {:?} does not match expected {} {:?}",
                rec.name,
                rec.shape,
                name,
                (rows, cols)
            )));
        }
        entries.push(Parameter {
            name,
            value: Tensor::new(rows, cols, rec.values)?,
            grad: Tensor::zeros(rows, cols),
        });
    }
    Ok((file.config, ModelParams::from_entries(entries)))
}
