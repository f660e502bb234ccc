//! Benchmark forensics: exact train/eval overlap, 1-NN Tanimoto structural
//! bias, and cross-target transfer of per-target forests.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{fingerprints, fit_forest, BaselineError, BinaryFeatures, RfExperimentConfig};
use crate::datasets::{Dataset, DatasetError};
use crate::evalkit::{roc_auc, EvalError};
use crate::fingerprint::{nn_similarity, one_nn_scores, Fingerprint, FingerprintError, DEFAULT_NBITS, DEFAULT_RADIUS};
use crate::molgraph::{canonical_form_with, CanonOptions, CanonicalForm};

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("empty set: {0}")]
    EmptySet(&'static str),
    #[error("cross-target audit needs at least 2 targets, got {0}")]
    TooFewTargets(usize),
    #[error(transparent)]
    Fingerprint(#[from] FingerprintError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub active_leakage_pct: f64,
    pub decoy_leakage_pct: Option<f64>,
    /// Indices into the evaluation actives / decoys found in the training set.
    pub leaked_actives: Vec<usize>,
    pub leaked_decoys: Vec<usize>,
}

fn pct(k: usize, n: usize) -> f64 {
    100.0 * k as f64 / n as f64
}

/// Exact canonical-form overlap of evaluation actives and decoys with the
/// training set. Decoy leakage is absent when there are no decoys.
pub fn leakage_report(
    train: &[CanonicalForm],
    eval_actives: &[CanonicalForm],
    eval_decoys: &[CanonicalForm],
) -> Result<LeakageReport, AuditError> {
    if train.is_empty() {
        return Err(AuditError::EmptySet("training set"));
    }
    if eval_actives.is_empty() {
        return Err(AuditError::EmptySet("evaluation actives"));
    }
    let seen: HashSet<&CanonicalForm> = train.iter().collect();
    let hits = |xs: &[CanonicalForm]| -> Vec<usize> { (0..xs.len()).filter(|&i| seen.contains(&xs[i])).collect() };
    let leaked_actives = hits(eval_actives);
    let leaked_decoys = hits(eval_decoys);
    Ok(LeakageReport {
        active_leakage_pct: pct(leaked_actives.len(), eval_actives.len()),
        decoy_leakage_pct: (!eval_decoys.is_empty()).then(|| pct(leaked_decoys.len(), eval_decoys.len())),
        leaked_actives,
        leaked_decoys,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructuralBias {
    pub one_nn_auc: f64,
    /// Mean nearest-train-active similarity of test actives.
    pub aa_sim: f64,
    /// Mean nearest-train-active similarity of decoys.
    pub da_sim: f64,
    pub gap: f64,
}

/// How well a zero-parameter 1-NN Tanimoto scorer separates test actives
/// from decoys.
pub fn structural_bias_audit(
    train_actives: &[Fingerprint],
    test_actives: &[Fingerprint],
    test_decoys: &[Fingerprint],
) -> Result<StructuralBias, AuditError> {
    for (set, name) in [(train_actives, "train actives"), (test_actives, "test actives"), (test_decoys, "test decoys")] {
        if set.is_empty() {
            return Err(AuditError::EmptySet(name));
        }
    }
    let mean_nn = |qs: &[Fingerprint]| -> Result<f64, AuditError> {
        let mut s = 0.0;
        for q in qs {
            s += nn_similarity(q, train_actives)?.0;
        }
        Ok(s / qs.len() as f64)
    };
    let aa_sim = mean_nn(test_actives)?;
    let da_sim = mean_nn(test_decoys)?;
    let test: Vec<Fingerprint> = test_actives.iter().chain(test_decoys).cloned().collect();
    let labels: Vec<bool> = (0..test.len()).map(|i| i < test_actives.len()).collect();
    let scores = one_nn_scores(train_actives, &test)?;
    Ok(StructuralBias {
        one_nn_auc: roc_auc(&scores, &labels)?,
        aa_sim,
        da_sim,
        gap: aa_sim - da_sim,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub targets: Vec<u32>,
    /// `auc[i][j]`: forest fit on target i, scored on target j; absent when
    /// target j's test rows hold one class.
    pub auc: Vec<Vec<Option<f64>>>,
    pub off_diagonal_mean: Option<f64>,
}

/// Fits one forest per target on its `train` records and scores every
/// target's `test` records.
pub fn cross_target_transfer_audit(train: &Dataset, test: &Dataset, cfg: &RfExperimentConfig) -> Result<TransferMatrix, AuditError> {
    let targets = train.target_ids();
    if targets.len() < 2 {
        return Err(AuditError::TooFewTargets(targets.len()));
    }
    let mut test_sets = Vec::with_capacity(targets.len());
    for &t in &targets {
        let te = test.for_target(t);
        let x = BinaryFeatures::from_fingerprints(&fingerprints(&te, cfg.radius, cfg.nbits)?, None)?;
        test_sets.push((x, te.labels()));
    }
    let mut auc = Vec::with_capacity(targets.len());
    for &t in &targets {
        let tr = train.for_target(t);
        let x = BinaryFeatures::from_fingerprints(&fingerprints(&tr, cfg.radius, cfg.nbits)?, None)?;
        let forest = fit_forest(&x, &tr.labels(), &cfg.forest)?;
        let mut row = Vec::with_capacity(targets.len());
        for (xt, yt) in &test_sets {
            row.push(if yt.is_empty() {
                None
            } else {
                roc_auc(&forest.predict_proba(xt)?, yt).ok()
            });
        }
        auc.push(row);
    }
    let off: Vec<f64> = (0..targets.len())
        .flat_map(|i| (0..targets.len()).filter(move |&j| j != i).map(move |j| (i, j)))
        .filter_map(|(i, j)| auc[i][j])
        .collect();
    Ok(TransferMatrix {
        targets,
        auc,
        off_diagonal_mean: (!off.is_empty()).then(|| off.iter().sum::<f64>() / off.len() as f64),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditConfig {
    pub radius: u32,
    pub nbits: usize,
    pub strip_stereo: bool,
    /// Active leakage (any activity level) above which the audit fails.
    pub leakage_threshold_pct: f64,
    /// Fit the cross-target forest matrix (needs ≥ 2 targets).
    pub cross_target: Option<RfExperimentConfig>,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            radius: DEFAULT_RADIUS,
            nbits: DEFAULT_NBITS,
            strip_stereo: false,
            leakage_threshold_pct: 25.0,
            cross_target: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub target: u32,
    pub n_train: usize,
    pub n_train_actives: usize,
    pub n_eval_actives: usize,
    pub n_eval_decoys: usize,
    /// Overlap with training records of the target at any activity level.
    pub active_leakage_pct: Option<f64>,
    /// Overlap with training actives only.
    pub active_leakage_pct_thresholded: Option<f64>,
    pub decoy_leakage_pct: Option<f64>,
    pub one_nn_auc: Option<f64>,
    pub mean_active_active_nn_sim: Option<f64>,
    pub mean_decoy_active_nn_sim: Option<f64>,
    pub gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub radius: u32,
    pub nbits: usize,
    pub strip_stereo: bool,
    pub leakage_threshold_pct: f64,
    pub rows: Vec<AuditRow>,
    pub cross_target: Option<TransferMatrix>,
}

pub const AUDIT_CSV_COLUMNS: [&str; 12] = [
    "target",
    "n_train",
    "n_train_actives",
    "n_eval_actives",
    "n_eval_decoys",
    "active_leakage_pct",
    "active_leakage_pct_thresholded",
    "decoy_leakage_pct",
    "one_nn_auc",
    "mean_active_active_nn_sim",
    "mean_decoy_active_nn_sim",
    "gap",
];

fn canon(ds: &Dataset, opts: CanonOptions) -> Result<Vec<CanonicalForm>, AuditError> {
    if !opts.strip_stereo {
        return Ok(ds.records.iter().map(|r| r.canonical.clone()).collect());
    }
    Ok(ds.graphs()?.iter().map(|g| canonical_form_with(g, opts)).collect())
}

/// Per-target leakage and structural-bias rows for an evaluation benchmark
/// (labelled actives and decoys) against a training corpus.
pub fn audit_benchmark(train: &Dataset, eval: &Dataset, cfg: &AuditConfig) -> Result<AuditReport, AuditError> {
    if eval.is_empty() {
        return Err(AuditError::EmptySet("evaluation set"));
    }
    let opts = CanonOptions { strip_stereo: cfg.strip_stereo };
    let mut rows = Vec::new();
    for target in eval.target_ids() {
        let tr = train.for_target(target);
        let tr_act = tr.filter(|r| r.is_active());
        let ev = eval.for_target(target);
        let act = ev.filter(|r| r.is_active());
        let dec = ev.filter(|r| !r.is_active());
        let (tr_c, tr_act_c, act_c, dec_c) = (canon(&tr, opts)?, canon(&tr_act, opts)?, canon(&act, opts)?, canon(&dec, opts)?);
        let any = leakage_report(&tr_c, &act_c, &dec_c).ok();
        let thresholded = leakage_report(&tr_act_c, &act_c, &dec_c).ok();
        let fp = |d: &Dataset| fingerprints(d, cfg.radius, cfg.nbits);
        let bias = structural_bias_audit(&fp(&tr_act)?, &fp(&act)?, &fp(&dec)?).ok();
        rows.push(AuditRow {
            target,
            n_train: tr.len(),
            n_train_actives: tr_act.len(),
            n_eval_actives: act.len(),
            n_eval_decoys: dec.len(),
            active_leakage_pct: any.as_ref().map(|l| l.active_leakage_pct),
            active_leakage_pct_thresholded: thresholded.map(|l| l.active_leakage_pct),
            decoy_leakage_pct: any.and_then(|l| l.decoy_leakage_pct),
            one_nn_auc: bias.map(|b| b.one_nn_auc),
            mean_active_active_nn_sim: bias.map(|b| b.aa_sim),
            mean_decoy_active_nn_sim: bias.map(|b| b.da_sim),
            gap: bias.map(|b| b.gap),
        });
    }
    let cross_target = match &cfg.cross_target {
        Some(rf) if train.target_ids().len() >= 2 => Some(cross_target_transfer_audit(train, eval, rf)?),
        _ => None,
    };
    Ok(AuditReport {
        radius: cfg.radius,
        nbits: cfg.nbits,
        strip_stereo: cfg.strip_stereo,
        leakage_threshold_pct: cfg.leakage_threshold_pct,
        rows,
        cross_target,
    })
}

impl AuditReport {
    /// True when any target's any-level active leakage exceeds the threshold.
    pub fn exceeds_threshold(&self) -> bool {
        self.rows
            .iter()
            .any(|r| r.active_leakage_pct.is_some_and(|p| p > self.leakage_threshold_pct))
    }

    pub fn to_json(&self) -> Result<String, AuditError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), AuditError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(AUDIT_CSV_COLUMNS)?;
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        let mut rows: Vec<&AuditRow> = self.rows.iter().collect();
        rows.sort_by_key(|r| r.target);
        for r in rows {
            out.write_record([
                r.target.to_string(),
                r.n_train.to_string(),
                r.n_train_actives.to_string(),
                r.n_eval_actives.to_string(),
                r.n_eval_decoys.to_string(),
                f(r.active_leakage_pct),
                f(r.active_leakage_pct_thresholded),
                f(r.decoy_leakage_pct),
                f(r.one_nn_auc),
                f(r.mean_active_active_nn_sim),
                f(r.mean_decoy_active_nn_sim),
                f(r.gap),
            ])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Records per target, keyed by target id.
pub fn by_target(ds: &Dataset) -> BTreeMap<u32, Dataset> {
    ds.target_ids().into_iter().map(|t| (t, ds.for_target(t))).collect()
}
