//! Pretraining, fine-tuning with per-group rates, continual round updates and
//! few-shot adaptation of a single program embedding row.

mod ablation;
mod adapt;
mod context;
mod fit;

pub use ablation::{level_ablation, mean_auc, shared_head, AblationProtocol, AblationRow, ContextLevel, SHARED_TASK};
pub use adapt::{continual_update, few_shot_adapt_l1, FewShotResult};
pub use context::{task_specs, ContextLevels, ContextMap};
pub use fit::{evaluate, finetune, pretrain, train_phase, Prepared, TargetMetrics};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::DatasetError;
use crate::evalkit::{EvalError, MetricBundle};
use crate::nestmodel::{ModelError, TaskKind};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (grad norm before step {grad_norm})")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64, grad_norm: f64 },
    #[error("insufficient support: {0}")]
    InsufficientSupport(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("length mismatch: {0} predictions vs {1} labels")]
    Shape(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Pretrain,
    Finetune,
    Continual,
}

/// Hyperparameters for one training phase. `rates` maps parameter-group
/// prefixes ("backbone", "context", "context.l1", "film", "heads", ...) to
/// learning rates; groups not listed use `default_rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseConfig {
    pub phase: Phase,
    pub rates: BTreeMap<String, f64>,
    pub default_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub val_fraction: f64,
    /// Final learning-rate multiplier of the cosine schedule.
    pub min_lr_ratio: f64,
    pub clip_norm: Option<f64>,
    /// Context levels filled from the data; disabled levels use row 0.
    pub levels: ContextLevels,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig::finetune()
    }
}

impl PhaseConfig {
    /// One rate for every group and generic contexts.
    pub fn pretrain(lr: f64) -> PhaseConfig {
        PhaseConfig {
            phase: Phase::Pretrain,
            rates: BTreeMap::new(),
            default_rate: lr,
            weight_decay: 0.01,
            epochs: 30,
            batch_size: 32,
            patience: 20,
            seed: 0,
            val_fraction: 0.1,
            min_lr_ratio: 0.0,
            clip_norm: Some(5.0),
            levels: ContextLevels::NONE,
        }
    }

    /// Backbone 1e-5, context tables 1e-3, fusion 1e-3, heads 1e-4.
    pub fn finetune() -> PhaseConfig {
        PhaseConfig {
            phase: Phase::Finetune,
            rates: [("backbone", 1e-5), ("context", 1e-3), ("film", 1e-3), ("heads", 1e-4)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            default_rate: 0.0,
            levels: ContextLevels::ALL,
            ..PhaseConfig::pretrain(0.0)
        }
    }

    /// Round-level L3 adapts fastest, program-level L1 slower, the encoder
    /// barely: 1e-3 / 1e-4 / 1e-6; everything else is held fixed.
    pub fn continual() -> PhaseConfig {
        PhaseConfig {
            phase: Phase::Continual,
            rates: [("context.l3", 1e-3), ("context.l1", 1e-4), ("backbone", 1e-6)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            default_rate: 0.0,
            epochs: 1,
            patience: 1,
            val_fraction: 0.0,
            levels: ContextLevels::ALL,
            ..PhaseConfig::pretrain(0.0)
        }
    }

    pub fn with_rate(mut self, group: &str, lr: f64) -> PhaseConfig {
        self.rates.insert(group.to_string(), lr);
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.rates.values().chain([&self.default_rate]).any(|&r| !(r >= 0.0) || !r.is_finite()) {
            return Err(TrainError::Config("learning rates must be finite and >= 0".into()));
        }
        if self.patience == 0 {
            return Err(TrainError::Config("patience must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be >= 1".into()));
        }
        if !(0.0..0.5).contains(&self.val_fraction) {
            return Err(TrainError::Config("val_fraction must lie in [0, 0.5)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub phase: Phase,
    /// "val_loss" (lower is better) or "val_auc" (higher is better).
    pub selection: String,
    pub epochs: Vec<EpochStats>,
    pub selected_epoch: usize,
    pub early_stopped: bool,
    pub wall_time_s: f64,
    pub final_metrics: Option<MetricBundle>,
}

impl TrainReport {
    /// The report with wall time zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> TrainReport {
        TrainReport {
            wall_time_s: 0.0,
            ..self.clone()
        }
    }
}

/// Inverse-class-frequency weights scaled to mean 1: (positive, negative).
pub fn class_weights(labels: &[bool]) -> (f64, f64) {
    let n = labels.len() as f64;
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = n - pos;
    if pos == 0.0 || neg == 0.0 {
        return (1.0, 1.0);
    }
    (n / (2.0 * pos), n / (2.0 * neg))
}

/// Mean (optionally weighted) binary cross-entropy on logits, or mean squared
/// error for regression.
pub fn loss(predictions: &[f64], labels: &[f64], weights: Option<&[f64]>, kind: TaskKind) -> Result<f64, TrainError> {
    if predictions.len() != labels.len() {
        return Err(TrainError::Shape(predictions.len(), labels.len()));
    }
    if predictions.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut tape = Tape::inference();
    let z = tape.constant(Tensor::matrix(predictions.len(), 1, predictions.to_vec())?);
    let l = loss_on_tape(&mut tape, z, labels, weights, kind)?;
    Ok(tape.value(l).item())
}

/// Differentiable version of [`loss`] over a column of outputs.
pub fn loss_on_tape(
    tape: &mut Tape,
    outputs: Var,
    labels: &[f64],
    weights: Option<&[f64]>,
    kind: TaskKind,
) -> Result<Var, TrainError> {
    let n = labels.len();
    if tape.shape(outputs)[0] != n {
        return Err(TrainError::Shape(tape.shape(outputs)[0], n));
    }
    if n == 0 {
        return Err(TrainError::EmptyBatch);
    }
    let y = tape.constant(Tensor::matrix(n, 1, labels.to_vec())?);
    let per = match kind {
        TaskKind::Classification => {
            // softplus(z) - y z
            let sp = tape.softplus(outputs)?;
            let yz = tape.mul(y, outputs)?;
            tape.sub(sp, yz)?
        }
        TaskKind::Regression => {
            let d = tape.sub(outputs, y)?;
            tape.pow(d, 2.0)?
        }
    };
    let per = match weights {
        Some(w) => {
            if w.len() != n {
                return Err(TrainError::Shape(w.len(), n));
            }
            let w = tape.constant(Tensor::matrix(n, 1, w.to_vec())?);
            tape.mul(per, w)?
        }
        None => per,
    };
    Ok(tape.mean(per, None)?)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        assert_eq!(loss(&[1.0, 2.0], &[1.0, 2.0], None, TaskKind::Regression).unwrap(), 0.0);
        let l = loss(&[0.0; 4], &[1.0, 0.0, 1.0, 0.0], None, TaskKind::Classification).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(loss(&[], &[], None, TaskKind::Regression), Err(TrainError::EmptyBatch)));
        assert!(matches!(loss(&[1.0], &[], None, TaskKind::Regression), Err(TrainError::Shape(1, 0))));
    }

    #[test]
    fn inverse_frequency_weights() {
        let mut labels = vec![false; 50];
        labels.push(true);
        let (wp, wn) = class_weights(&labels);
        assert!((wp / wn - 50.0).abs() < 1e-12);
        let mean = (wp + 50.0 * wn) / 51.0;
        assert!((mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(PhaseConfig::finetune().validate().is_ok());
        let mut c = PhaseConfig::finetune();
        c.patience = 0;
        assert!(c.validate().is_err());
        assert!(PhaseConfig::finetune().with_rate("heads", -1.0).validate().is_err());
    }
}
