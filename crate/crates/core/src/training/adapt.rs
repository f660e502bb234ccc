use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::evalkit::roc_auc;
use crate::nestmodel::{ContextTuple, Mode, NestModel, TaskKind};
use crate::tensor::{adamw_step, OptimizerState, Tape};

use super::fit::{train_phase, Prepared};
use super::{loss_on_tape, ContextMap, PhaseConfig, TrainError, TrainReport};

/// Sequential updates, one short phase per round in the order given. Returns
/// one report per round.
pub fn continual_update(
    model: &mut NestModel,
    rounds: &[Dataset],
    map: &ContextMap,
    cfg: &PhaseConfig,
) -> Result<Vec<TrainReport>, TrainError> {
    let mut reports = Vec::with_capacity(rounds.len());
    for (i, round) in rounds.iter().enumerate() {
        if round.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let p = Prepared::new(model, round, map, cfg.levels)?;
        let round_cfg = PhaseConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..cfg.clone()
        };
        reports.push(train_phase(model, &p, None, &round_cfg)?);
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotResult {
    pub shots: usize,
    pub steps: usize,
    /// Program-table row that was reset and adapted.
    pub row: usize,
    pub embedding: Vec<f64>,
    pub zero_shot_auc: Option<f64>,
    pub adapted_auc: Option<f64>,
}

impl FewShotResult {
    pub fn delta(&self) -> Option<f64> {
        Some(self.adapted_auc? - self.zero_shot_auc?)
    }
}

/// Adapts a single fresh program embedding row on the first `shots` support
/// records with full-batch Adam, every other parameter frozen. Support and
/// query are scored under (row, 0, 0) on head `task`. The zero-shot score
/// uses the zero-initialized row, so `steps == 0` reproduces it exactly.
pub fn few_shot_adapt_l1(
    model: &NestModel,
    support: &Dataset,
    query: &Dataset,
    task: &str,
    shots: usize,
    steps: usize,
    lr: f64,
    row: usize,
) -> Result<(NestModel, FewShotResult), TrainError> {
    if shots == 0 || support.len() < shots {
        return Err(TrainError::InsufficientSupport(format!(
            "{shots} shots requested, {} support records available",
            support.len()
        )));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(TrainError::Config(format!("learning rate {lr}")));
    }
    let t = model.task_index(task)?;
    if model.task(t).kind != TaskKind::Classification {
        return Err(TrainError::Config(format!("task {task} is not a classification head")));
    }
    let ctx = ContextTuple::new(row, 0, 0);
    model.check_context(ctx)?;

    let mut m = model.clone();
    let table = m.layout.tables[0];
    let dim = m.config().l1_dim;
    m.params_mut().value_mut(table).data_mut()[row * dim..(row + 1) * dim].fill(0.0);

    let support_graphs = support.graphs()?;
    let support_graphs = &support_graphs[..shots];
    let y: Vec<f64> = support.records[..shots].iter().map(|r| f64::from(u8::from(r.is_active()))).collect();
    let query_graphs = query.graphs()?;
    let query_labels = query.labels();
    let score = |m: &NestModel| -> Result<Option<f64>, TrainError> {
        let s: Vec<_> = query_graphs
            .iter()
            .map(|g| crate::nestmodel::Sample { graph: g, context: ctx, task: t })
            .collect();
        let out = m.predict_batch(&s)?;
        Ok(roc_auc(&out, &query_labels).ok())
    };
    let zero_shot_auc = score(&m)?;

    let mut opt = OptimizerState::new(0.0, 0.0).with_group_lr("context.l1", lr);
    let samples: Vec<_> = support_graphs
        .iter()
        .map(|g| crate::nestmodel::Sample { graph: g, context: ctx, task: t })
        .collect();
    for _ in 0..steps {
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &samples, Mode::Eval)?;
        let l = loss_on_tape(&mut tape, out, &y, None, TaskKind::Classification)?;
        let value = tape.value(l).item();
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch: 0, batch: 0, loss: value, grad_norm: f64::NAN });
        }
        tape.backward(l)?;
        m.params_mut().zero_grads();
        tape.accumulate_param_grads(m.params_mut());
        adamw_step(m.params_mut(), &mut opt)?;
    }
    let embedding = m.params().value(table).row_slice(row).to_vec();
    let adapted_auc = if steps == 0 { zero_shot_auc } else { score(&m)? };
    let result = FewShotResult {
        shots,
        steps,
        row,
        embedding,
        zero_shot_auc,
        adapted_auc,
    };
    Ok((m, result))
}
