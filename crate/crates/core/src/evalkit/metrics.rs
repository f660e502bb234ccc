use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{check_len, EvalError};

/// Indices sorted by descending score; equal scores keep input order.
fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (Mann-Whitney U / (P N)).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check_len(scores.len(), labels.len())?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::OneClassOnly);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives keeps tied midranks integral
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u64;
        let p = idx[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        twice_rank_sum += p * twice_mid;
        i = j + 1;
    }
    let p = pos as u64;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / 2.0 / (pos as f64 * neg as f64))
}

/// Area under the precision-recall curve with right-step interpolation:
/// sum over distinct thresholds of (recall gain) x precision.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check_len(scores.len(), labels.len())?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(EvalError::NoPositives);
    }
    let idx = rank_desc(scores);
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        tp += idx[i..=j].iter().filter(|&&k| labels[k]).count();
        seen += j - i + 1;
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / seen as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(area)
}

/// Hit rate among the top ceil(fraction * n) compounds over the overall hit rate.
pub fn enrichment_factor(scores: &[f64], labels: &[bool], fraction: f64) -> Result<f64, EvalError> {
    check_len(scores.len(), labels.len())?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(EvalError::Parameter(format!("fraction {fraction} outside (0, 1]")));
    }
    let n = labels.len();
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(EvalError::NoPositives);
    }
    let cutoff = ((fraction * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let cutoff = cutoff.min(n);
    let idx = rank_desc(scores);
    let hits = idx[..cutoff].iter().filter(|&&k| labels[k]).count();
    Ok((hits as f64 / cutoff as f64) / (pos as f64 / n as f64))
}

/// (sensitivity, specificity) predicting positive when score >= threshold.
pub fn confusion_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<(f64, f64), EvalError> {
    check_len(scores.len(), labels.len())?;
    let (mut tp, mut fneg, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (false, true) => fneg += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
        }
    }
    if tp + fneg == 0 || tn + fp == 0 {
        return Err(EvalError::OneClassOnly);
    }
    Ok((tp as f64 / (tp + fneg) as f64, tn as f64 / (tn + fp) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub rmse: f64,
    pub r2: f64,
    /// Undefined when the predictions are constant.
    pub pearson: Option<f64>,
}

pub fn regression_metrics(preds: &[f64], targets: &[f64]) -> Result<RegressionMetrics, EvalError> {
    check_len(preds.len(), targets.len())?;
    let n = targets.len();
    if n < 2 {
        return Err(EvalError::TooFewSamples("regression metrics need n >= 2".into()));
    }
    let nf = n as f64;
    let mt = targets.iter().sum::<f64>() / nf;
    let mp = preds.iter().sum::<f64>() / nf;
    let ss_tot: f64 = targets.iter().map(|t| (t - mt) * (t - mt)).sum();
    if ss_tot == 0.0 {
        return Err(EvalError::DegenerateVariance);
    }
    let ss_res: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    let ss_p: f64 = preds.iter().map(|p| (p - mp) * (p - mp)).sum();
    let cov: f64 = preds.iter().zip(targets).map(|(p, t)| (p - mp) * (t - mt)).sum();
    Ok(RegressionMetrics {
        rmse: (ss_res / nf).sqrt(),
        r2: 1.0 - ss_res / ss_tot,
        pearson: if ss_p > 0.0 { Some(cov / (ss_p * ss_tot).sqrt()) } else { None },
    })
}

/// Metrics for one evaluation; fields are absent when the labels do not
/// support them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub n: usize,
    pub n_pos: usize,
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub ef_at_1pct: Option<f64>,
    pub ef_at_5pct: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub rmse: Option<f64>,
    pub r2: Option<f64>,
    pub pearson: Option<f64>,
}

impl MetricBundle {
    /// Ranking and confusion metrics; `scores` are probabilities for the
    /// 0.5 threshold.
    pub fn classification(scores: &[f64], labels: &[bool]) -> Result<MetricBundle, EvalError> {
        check_len(scores.len(), labels.len())?;
        let n_pos = labels.iter().filter(|&&l| l).count();
        let conf = confusion_metrics(scores, labels, 0.5).ok();
        Ok(MetricBundle {
            n: labels.len(),
            n_pos,
            roc_auc: roc_auc(scores, labels).ok(),
            pr_auc: pr_auc(scores, labels).ok(),
            ef_at_1pct: enrichment_factor(scores, labels, 0.01).ok(),
            ef_at_5pct: enrichment_factor(scores, labels, 0.05).ok(),
            sensitivity: conf.map(|c| c.0),
            specificity: conf.map(|c| c.1),
            ..MetricBundle::default()
        })
    }

    pub fn regression(preds: &[f64], targets: &[f64]) -> Result<MetricBundle, EvalError> {
        let r = regression_metrics(preds, targets)?;
        Ok(MetricBundle {
            n: targets.len(),
            rmse: Some(r.rmse),
            r2: Some(r.r2),
            pearson: r.pearson,
            ..MetricBundle::default()
        })
    }

    pub const CSV_COLUMNS: [&'static str; 11] = [
        "n",
        "n_pos",
        "roc_auc",
        "pr_auc",
        "ef_at_1pct",
        "ef_at_5pct",
        "sensitivity",
        "specificity",
        "rmse",
        "r2",
        "pearson",
    ];

    fn csv_values(&self) -> Vec<String> {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        vec![
            self.n.to_string(),
            self.n_pos.to_string(),
            f(self.roc_auc),
            f(self.pr_auc),
            f(self.ef_at_1pct),
            f(self.ef_at_5pct),
            f(self.sensitivity),
            f(self.specificity),
            f(self.rmse),
            f(self.r2),
            f(self.pearson),
        ]
    }
}

/// One CSV row: where the metrics came from and the metrics themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub target: String,
    pub fold: usize,
    pub seed: u64,
    pub variant: String,
    pub metrics: MetricBundle,
}

/// Writes rows sorted by (target, variant, fold, seed).
pub fn write_metric_csv<W: Write>(w: W, rows: &[MetricRow]) -> Result<(), csv::Error> {
    let mut sorted: Vec<&MetricRow> = rows.iter().collect();
    sorted.sort_by(|a, b| (&a.target, &a.variant, a.fold, a.seed).cmp(&(&b.target, &b.variant, b.fold, b.seed)));
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["target", "variant", "fold", "seed"];
    header.extend(MetricBundle::CSV_COLUMNS);
    out.write_record(&header)?;
    for r in sorted {
        let mut rec = vec![r.target.clone(), r.variant.clone(), r.fold.to_string(), r.seed.to_string()];
        rec.extend(r.metrics.csv_values());
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}
