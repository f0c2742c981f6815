//! Loss, Adam optimizer, epoch loop with early stopping, and evaluation.
//!
//! Batches are gradient accumulation over individual variable-size
//! instances. Per-instance passes inside a batch run in parallel against
//! immutable parameters; gradients are merged by elementwise sum in
//! instance order before the single optimizer step, so training is
//! bit-deterministic for a fixed seed.

use crate::forward::{run_episode, Episode, Mode, PreparedInstance};
use crate::metrics::{classification_stats, predict_class, roc_auc, ClassStats};
use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::tape::{Tape, Var, PROB_FLOOR};
use crate::tensor::TensorError;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("label {label} outside class set 0..{classes}")]
    LabelRange { label: usize, classes: usize },
    #[error("{split} split is empty")]
    EmptySplit { split: &'static str },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
}

/// Optimization hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Gradient-accumulation count per step.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(TrainError::Config(format!(
                "learning rate {} must be finite and nonnegative",
                self.learning_rate
            )));
        }
        if self.patience == 0 {
            return Err(TrainError::Config("patience must be >= 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(TrainError::Config(
                "batch size and max epochs must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Negative log probability of the true class, floored at 1e-12.
pub fn nll_loss(probabilities: &[f64], label: usize) -> Result<f64, TrainError> {
    if label >= probabilities.len() {
        return Err(TrainError::LabelRange {
            label,
            classes: probabilities.len(),
        });
    }
    Ok(-probabilities[label].max(PROB_FLOOR).ln())
}

/// Same loss recorded on the tape for backpropagation.
pub fn nll_on_tape(tape: &mut Tape, probabilities: Var, label: usize) -> Result<Var, TensorError> {
    let p = tape.pick(probabilities, label)?;
    let lp = tape.log_clamped(p);
    Ok(tape.scale(lp, -1.0))
}

/// Per-parameter first/second moment accumulators and the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let first = params
            .entries()
            .iter()
            .map(|p| vec![0.0; p.value.len()])
            .collect::<Vec<_>>();
        OptimizerState {
            second: first.clone(),
            first,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Bias-corrected adaptive-moment update consuming the accumulated
/// gradients in `params`.
pub fn adam_step(params: &mut ModelParams, state: &mut OptimizerState, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (idx, p) in params.entries_mut().iter_mut().enumerate() {
        let m = &mut state.first[idx];
        let v = &mut state.second[idx];
        let grad = p.grad.values();
        let mut update = vec![0.0; grad.len()];
        for i in 0..grad.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            update[i] = cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        let values = p.value.values_mut();
        for i in 0..values.len() {
            values[i] -= update[i];
        }
    }
}

/// Loss and parameter gradients of one training-mode episode.
/// Gradients are keyed by parameter entry index.
pub fn instance_loss_and_grads(
    instance: &PreparedInstance,
    params: &ModelParams,
    config: &ModelConfig,
    dropout_seed: u64,
) -> Result<(f64, Vec<(usize, Vec<f64>)>), TrainError> {
    let mut rng = ChaCha20Rng::seed_from_u64(dropout_seed);
    let episode = run_episode(instance, params, config, Mode::Train, &mut rng)?;
    let Episode {
        mut tape,
        probabilities,
        bound,
        ..
    } = episode;
    if instance.label >= config.n_classes {
        return Err(TrainError::LabelRange {
            label: instance.label,
            classes: config.n_classes,
        });
    }
    let loss = nll_on_tape(&mut tape, probabilities, instance.label)?;
    let loss_value = tape.values(loss)[0];
    let grads = tape.backward(loss)?;
    let collected = bound
        .into_iter()
        .filter_map(|(idx, var)| {
            grads
                .values_wrt(var)
                .map(|g| (idx, g.to_vec()))
        })
        .collect();
    Ok((loss_value, collected))
}

/// One history row per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_auc: Option<f64>,
    pub valid_micro_f1: f64,
    pub valid_macro_f1: f64,
}

/// Training history in CSV form (the on-disk format).
pub fn history_to_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,valid_loss,valid_auc,valid_micro_f1,valid_macro_f1\n");
    for row in history {
        let auc = row
            .valid_auc
            .map(|a| a.to_string())
            .unwrap_or_else(|| "undefined".into());
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.epoch, row.train_loss, row.valid_loss, auc, row.valid_micro_f1, row.valid_macro_f1
        ));
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
}

fn dropout_seed(seed: u64, epoch: usize, position: usize) -> u64 {
    // splitmix64 over the (seed, epoch, position) triple
    let mut z = seed
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(epoch as u64 + 1))
        .wrapping_add(0x2545f4914f6cdd1du64.wrapping_mul(position as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Epoch loop with shuffled gradient-accumulation batches, validation
/// tracking, and early stopping. Returns the parameters of the best
/// validation epoch.
pub fn train(
    mut params: ModelParams,
    config: &ModelConfig,
    tcfg: &TrainConfig,
    train_data: &[PreparedInstance],
    valid_data: &[PreparedInstance],
) -> Result<TrainOutcome, TrainError> {
    tcfg.validate()?;
    config.validate()?;
    if train_data.is_empty() {
        return Err(TrainError::EmptySplit { split: "train" });
    }
    if valid_data.is_empty() {
        return Err(TrainError::EmptySplit { split: "valid" });
    }

    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(tcfg.seed);
    let mut opt = OptimizerState::new(&params);
    let mut history = Vec::new();
    let mut best_loss = f64::INFINITY;
    let mut best_params = params.clone();
    let mut best_epoch = 0;
    let mut since_improvement = 0;

    for epoch in 1..=tcfg.max_epochs {
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        for (batch_no, batch) in order.chunks(tcfg.batch_size).enumerate() {
            let results: Result<Vec<_>, TrainError> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &idx)| {
                    let seed = dropout_seed(tcfg.seed, epoch, batch_no * tcfg.batch_size + k);
                    instance_loss_and_grads(&train_data[idx], &params, config, seed)
                })
                .collect();
            let results = results?;
            params.zero_grads();
            for (loss, grads) in results {
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        batch: batch_no,
                    });
                }
                loss_sum += loss;
                for (idx, g) in grads {
                    params.accumulate_grad(idx, &g);
                }
            }
            params.scale_grads(1.0 / batch.len() as f64);
            adam_step(&mut params, &mut opt, tcfg);
        }
        let train_loss = loss_sum / train_data.len() as f64;

        let report = evaluate(&params, config, valid_data)?;
        history.push(EpochStats {
            epoch,
            train_loss,
            valid_loss: report.loss,
            valid_auc: report.auc,
            valid_micro_f1: report.micro_f1,
            valid_macro_f1: report.macro_f1,
        });

        if report.loss < best_loss {
            best_loss = report.loss;
            best_params = params.clone();
            best_epoch = epoch;
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= tcfg.patience {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        params: best_params,
        best_epoch,
        history,
    })
}

/// Evaluation metrics over a dataset split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `None` marks AUC undefined (single-class data).
    pub auc: Option<f64>,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassStats>,
    pub loss: f64,
    pub instances: usize,
}

/// Eval-mode metrics: pair-counting AUC, 0.5-threshold F1 family, mean loss.
pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    data: &[PreparedInstance],
) -> Result<EvalReport, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptySplit { split: "eval" });
    }
    let probs: Result<Vec<Vec<f64>>, TrainError> = data
        .par_iter()
        .map(|inst| {
            let mut rng = ChaCha20Rng::seed_from_u64(0);
            let ep = run_episode(inst, params, config, Mode::Eval, &mut rng)?;
            Ok(ep.probability_values().to_vec())
        })
        .collect();
    let probs = probs?;
    report_from_probabilities(&probs, data, config)
}

/// Builds the report from per-instance class probabilities.
pub fn report_from_probabilities(
    probs: &[Vec<f64>],
    data: &[PreparedInstance],
    config: &ModelConfig,
) -> Result<EvalReport, TrainError> {
    let labels: Vec<usize> = data.iter().map(|i| i.label).collect();
    let mut loss = 0.0;
    for (p, &label) in probs.iter().zip(&labels) {
        loss += nll_loss(p, label)?;
    }
    loss /= labels.len() as f64;

    let predictions: Vec<usize> = probs.iter().map(|p| predict_class(p)).collect();
    let summary = classification_stats(&predictions, &labels, config.n_classes);

    let auc = if config.n_classes == 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let bools: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        roc_auc(&scores, &bools)
    } else {
        // macro one-vs-rest over classes present with both outcomes
        let mut aucs = Vec::new();
        for c in 0..config.n_classes {
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let bools: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            if let Some(a) = roc_auc(&scores, &bools) {
                aucs.push(a);
            }
        }
        if aucs.is_empty() {
            None
        } else {
            Some(aucs.iter().sum::<f64>() / aucs.len() as f64)
        }
    };

    Ok(EvalReport {
        auc,
        micro_f1: summary.micro_f1,
        macro_f1: summary.macro_f1,
        per_class: summary.per_class,
        loss,
        instances: labels.len(),
    })
}
