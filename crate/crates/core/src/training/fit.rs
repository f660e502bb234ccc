use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::evalkit::{roc_auc, MetricBundle};
use crate::molgraph::MolGraph;
use crate::nestmodel::{ContextTuple, Mode, ModelError, NestModel, Sample, TaskKind};
use crate::tensor::{adamw_step, cosine_lr, OptimizerState, Tape, Tensor};

use super::{class_weights, sigmoid, ContextLevels, ContextMap, EpochStats, Phase, PhaseConfig, TrainError, TrainReport};

/// Parsed molecules with their contexts, task indices and training targets.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub graphs: Vec<MolGraph>,
    pub contexts: Vec<ContextTuple>,
    pub tasks: Vec<usize>,
    pub kinds: Vec<TaskKind>,
    /// 0/1 for classification rows, per-target standardized pIC50 for
    /// regression rows.
    pub targets: Vec<f64>,
    pub labels: Vec<bool>,
    pub target_ids: Vec<u32>,
}

impl Prepared {
    /// Records of targets without a matching head go to the single head of a
    /// one-task model and are otherwise rejected.
    pub fn new(model: &NestModel, ds: &Dataset, map: &ContextMap, levels: ContextLevels) -> Result<Prepared, TrainError> {
        let graphs = ds.graphs()?;
        let z = ds.standardized_pic50();
        let single = model.config().tasks.len() == 1;
        let mut p = Prepared {
            graphs,
            contexts: Vec::with_capacity(ds.len()),
            tasks: Vec::with_capacity(ds.len()),
            kinds: Vec::with_capacity(ds.len()),
            targets: Vec::with_capacity(ds.len()),
            labels: Vec::with_capacity(ds.len()),
            target_ids: Vec::with_capacity(ds.len()),
        };
        for (i, r) in ds.records.iter().enumerate() {
            let task = match model.task_index(&r.target_id.to_string()) {
                Ok(t) => t,
                Err(_) if single => 0,
                Err(e) => return Err(e.into()),
            };
            let context = map.context(r, levels);
            model.check_context(context)?;
            let kind = model.task(task).kind;
            let target = match kind {
                TaskKind::Classification => f64::from(u8::from(r.is_active())),
                TaskKind::Regression => z[i].ok_or_else(|| {
                    TrainError::Config(format!("record {i} has no pIC50 for a regression head"))
                })?,
            };
            p.contexts.push(context);
            p.tasks.push(task);
            p.kinds.push(kind);
            p.targets.push(target);
            p.labels.push(r.is_active());
            p.target_ids.push(r.target_id);
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn samples(&self, rows: &[usize]) -> Vec<Sample<'_>> {
        rows.iter()
            .map(|&i| Sample {
                graph: &self.graphs[i],
                context: self.contexts[i],
                task: self.tasks[i],
            })
            .collect()
    }

    pub fn subset(&self, rows: &[usize]) -> Prepared {
        Prepared {
            graphs: rows.iter().map(|&i| self.graphs[i].clone()).collect(),
            contexts: rows.iter().map(|&i| self.contexts[i]).collect(),
            tasks: rows.iter().map(|&i| self.tasks[i]).collect(),
            kinds: rows.iter().map(|&i| self.kinds[i]).collect(),
            targets: rows.iter().map(|&i| self.targets[i]).collect(),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            target_ids: rows.iter().map(|&i| self.target_ids[i]).collect(),
        }
    }

    /// Evaluation-mode model outputs for every row.
    pub fn outputs(&self, model: &NestModel) -> Result<Vec<f64>, ModelError> {
        let rows: Vec<usize> = (0..self.len()).collect();
        model.predict_batch(&self.samples(&rows))
    }

    /// Per-row loss weights: inverse class frequency within each task for
    /// classification rows, 1 for regression rows.
    fn weights(&self) -> Vec<f64> {
        let mut per_task: BTreeMap<usize, Vec<bool>> = BTreeMap::new();
        for i in 0..self.len() {
            per_task.entry(self.tasks[i]).or_default().push(self.labels[i]);
        }
        let w: BTreeMap<usize, (f64, f64)> = per_task.into_iter().map(|(t, l)| (t, class_weights(&l))).collect();
        (0..self.len())
            .map(|i| match self.kinds[i] {
                TaskKind::Classification => {
                    let (p, n) = w[&self.tasks[i]];
                    if self.labels[i] {
                        p
                    } else {
                        n
                    }
                }
                TaskKind::Regression => 1.0,
            })
            .collect()
    }
}

/// Weighted mean loss over a batch that may mix classification and
/// regression rows.
fn batch_loss(
    tape: &mut Tape,
    out: crate::tensor::Var,
    kinds: &[TaskKind],
    targets: &[f64],
    weights: &[f64],
) -> Result<crate::tensor::Var, TrainError> {
    let n = kinds.len();
    let mut total = None;
    for kind in [TaskKind::Classification, TaskKind::Regression] {
        let idx: Vec<usize> = (0..n).filter(|&i| kinds[i] == kind).collect();
        if idx.is_empty() {
            continue;
        }
        let part = if idx.len() == n { out } else { tape.gather_rows(out, &idx)? };
        let t: Vec<f64> = idx.iter().map(|&i| targets[i]).collect();
        let w: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();
        let l = super::loss_on_tape(tape, part, &t, Some(&w), kind)?;
        let l = tape.scale(l, idx.len() as f64 / n as f64)?;
        total = Some(match total {
            Some(a) => tape.add(a, l)?,
            None => l,
        });
    }
    total.ok_or(TrainError::EmptyBatch)
}

fn mean_loss(p: &Prepared, outputs: &[f64], weights: &[f64]) -> Result<f64, TrainError> {
    let mut tape = Tape::inference();
    let out = tape.constant(Tensor::matrix(outputs.len(), 1, outputs.to_vec())?);
    let l = batch_loss(&mut tape, out, &p.kinds, &p.targets, weights)?;
    Ok(tape.value(l).item())
}

/// Mean ROC-AUC over classification tasks whose rows hold both classes.
fn mean_task_auc(p: &Prepared, outputs: &[f64]) -> Option<f64> {
    let mut per_task: BTreeMap<usize, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for i in 0..p.len() {
        if p.kinds[i] == TaskKind::Classification {
            let e = per_task.entry(p.tasks[i]).or_default();
            e.0.push(outputs[i]);
            e.1.push(p.labels[i]);
        }
    }
    let aucs: Vec<f64> = per_task.values().filter_map(|(s, l)| roc_auc(s, l).ok()).collect();
    if aucs.is_empty() {
        None
    } else {
        Some(aucs.iter().sum::<f64>() / aucs.len() as f64)
    }
}

fn pooled_metrics(p: &Prepared, outputs: &[f64]) -> Option<MetricBundle> {
    if p.kinds.iter().all(|&k| k == TaskKind::Classification) {
        let probs: Vec<f64> = outputs.iter().map(|&z| sigmoid(z)).collect();
        MetricBundle::classification(&probs, &p.labels).ok()
    } else if p.kinds.iter().all(|&k| k == TaskKind::Regression) {
        MetricBundle::regression(outputs, &p.targets).ok()
    } else {
        None
    }
}

fn optimizer(cfg: &PhaseConfig) -> OptimizerState {
    let mut opt = OptimizerState::new(cfg.default_rate, cfg.weight_decay);
    for (g, &lr) in &cfg.rates {
        opt = opt.with_group_lr(g, lr);
    }
    opt
}

/// Mini-batch AdamW with a cosine schedule and best-epoch restoration.
/// With a validation set the selected epoch maximizes mean validation
/// ROC-AUC for fine-tuning and minimizes validation loss otherwise; without
/// one it minimizes training loss.
pub fn train_phase(model: &mut NestModel, train: &Prepared, val: Option<&Prepared>, cfg: &PhaseConfig) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let start = Instant::now();
    let weights = train.weights();
    let val_weights = val.map(Prepared::weights);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = optimizer(cfg);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = (cfg.epochs * per_epoch).max(1);
    let use_auc = cfg.phase == Phase::Finetune
        && val.is_some_and(|v| {
            let o = vec![0.0; v.len()];
            mean_task_auc(v, &o).is_some()
        });
    let selection = if use_auc { "val_auc" } else { "val_loss" };

    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, Vec<(String, Tensor)>)> = None;
    let mut since_best = 0;
    let mut early_stopped = false;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(per_epoch);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples = train.samples(chunk);
            let kinds: Vec<TaskKind> = chunk.iter().map(|&i| train.kinds[i]).collect();
            let targets: Vec<f64> = chunk.iter().map(|&i| train.targets[i]).collect();
            let w: Vec<f64> = chunk.iter().map(|&i| weights[i]).collect();
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &samples, Mode::Train(&mut rng))?;
            let l = batch_loss(&mut tape, out, &kinds, &targets, &w)?;
            let value = tape.value(l).item();
            model.params_mut().zero_grads();
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b, loss: value, grad_norm: f64::NAN });
            }
            tape.backward(l)?;
            tape.accumulate_param_grads(model.params_mut());
            let grad_norm = model.params().grad_norm();
            if !grad_norm.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b, loss: value, grad_norm });
            }
            if let Some(c) = cfg.clip_norm {
                model.params_mut().clip_grad_norm(c);
            }
            opt.lr_scale = cosine_lr(step, total, 1.0, cfg.min_lr_ratio)?;
            adamw_step(model.params_mut(), &mut opt)?;
            step += 1;
            losses.push(value * chunk.len() as f64);
        }
        let train_loss = losses.iter().sum::<f64>() / train.len() as f64;
        let (val_loss, val_auc) = match (val, &val_weights) {
            (Some(v), Some(vw)) if !v.is_empty() => {
                let o = v.outputs(model)?;
                (Some(mean_loss(v, &o, vw)?), mean_task_auc(v, &o))
            }
            _ => (None, None),
        };
        // Scores where larger is better.
        let score = if use_auc {
            val_auc.unwrap_or(f64::NEG_INFINITY)
        } else {
            -val_loss.unwrap_or(train_loss)
        };
        epochs.push(EpochStats { epoch, train_loss, val_loss, val_auc });
        if best.as_ref().map_or(true, |(s, _, _)| score > *s) {
            best = Some((score, epoch, model.params().named_values()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                early_stopped = true;
                break;
            }
        }
    }
    let selected_epoch = match best {
        Some((_, e, snapshot)) => {
            if e != epochs.len() {
                model.params_mut().load_named(&snapshot)?;
            }
            e
        }
        None => 0,
    };
    let eval_set = val.filter(|v| !v.is_empty()).unwrap_or(train);
    let final_metrics = pooled_metrics(eval_set, &eval_set.outputs(model)?);
    Ok(TrainReport {
        phase: cfg.phase,
        selection: selection.to_string(),
        epochs,
        selected_epoch,
        early_stopped,
        wall_time_s: start.elapsed().as_secs_f64(),
        final_metrics,
    })
}

/// Stratified hold-out rows per (target, label) group.
pub(crate) fn stratified_holdout(p: &Prepared, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    if fraction <= 0.0 {
        return ((0..p.len()).collect(), Vec::new());
    }
    let mut groups: BTreeMap<(u32, bool), Vec<usize>> = BTreeMap::new();
    for i in 0..p.len() {
        groups.entry((p.target_ids[i], p.labels[i])).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5a11);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for rows in groups.values_mut() {
        rows.shuffle(&mut rng);
        let mut k = (fraction * rows.len() as f64).round() as usize;
        if k == 0 && rows.len() >= 2 {
            k = 1;
        }
        val.extend_from_slice(&rows[..k]);
        train.extend_from_slice(&rows[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Multi-task pretraining with every context id forced to the generic row.
pub fn pretrain(model: &mut NestModel, ds: &Dataset, cfg: &PhaseConfig) -> Result<TrainReport, TrainError> {
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let cfg = PhaseConfig {
        levels: ContextLevels::NONE,
        ..cfg.clone()
    };
    let all = Prepared::new(model, ds, &ContextMap::default(), ContextLevels::NONE)?;
    let (tr, va) = stratified_holdout(&all, cfg.val_fraction, cfg.seed);
    let val = all.subset(&va);
    train_phase(model, &all.subset(&tr), (!val.is_empty()).then_some(&val), &cfg)
}

/// Context-aware fine-tuning on a stratified train/validation split.
pub fn finetune(model: &mut NestModel, ds: &Dataset, map: &ContextMap, cfg: &PhaseConfig) -> Result<TrainReport, TrainError> {
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let all = Prepared::new(model, ds, map, cfg.levels)?;
    let (tr, va) = stratified_holdout(&all, cfg.val_fraction, cfg.seed);
    let val = all.subset(&va);
    train_phase(model, &all.subset(&tr), (!val.is_empty()).then_some(&val), cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    pub target: u32,
    pub metrics: MetricBundle,
}

/// Per-target metrics on `ds`, scored under the given context levels.
pub fn evaluate(model: &NestModel, ds: &Dataset, map: &ContextMap, levels: ContextLevels) -> Result<Vec<TargetMetrics>, TrainError> {
    let p = Prepared::new(model, ds, map, levels)?;
    let out = p.outputs(model)?;
    let mut by_target: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for i in 0..p.len() {
        by_target.entry(p.target_ids[i]).or_default().push(i);
    }
    let mut result = Vec::new();
    for (target, rows) in by_target {
        let metrics = match p.kinds[rows[0]] {
            TaskKind::Classification => {
                let s: Vec<f64> = rows.iter().map(|&i| sigmoid(out[i])).collect();
                let l: Vec<bool> = rows.iter().map(|&i| p.labels[i]).collect();
                MetricBundle::classification(&s, &l)?
            }
            TaskKind::Regression => {
                let s: Vec<f64> = rows.iter().map(|&i| out[i]).collect();
                let t: Vec<f64> = rows.iter().map(|&i| p.targets[i]).collect();
                MetricBundle::regression(&s, &t)?
            }
        };
        result.push(TargetMetrics { target, metrics });
    }
    Ok(result)
}
