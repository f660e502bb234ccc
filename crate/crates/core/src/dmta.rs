//! Replay of design-make-test-analyze campaigns: each round scores the
//! unrevealed pool, selects the top fraction, reveals labels and optionally
//! updates the scorer.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{fingerprints, BaselineError};
use crate::datasets::Dataset;
use crate::fingerprint::{nn_similarity, Fingerprint, FingerprintError, DEFAULT_NBITS, DEFAULT_RADIUS};
use crate::nestmodel::{NestModel, Sample};
use crate::training::{continual_update, ContextLevels, ContextMap, PhaseConfig, TrainError};

#[derive(Debug, Error)]
pub enum DmtaError {
    #[error("campaign pool is empty")]
    EmptyPool,
    #[error("scorer failure: {0}")]
    ScorerFailure(String),
    #[error("invalid campaign config: {0}")]
    Config(String),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Fingerprint(#[from] FingerprintError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Random,
    FingerprintNn,
    Model,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignConfig {
    pub rounds: usize,
    pub select_fraction: f64,
    pub scorer: ScorerKind,
    pub seed: u64,
    pub radius: u32,
    pub nbits: usize,
    /// Update applied to the model scorer after each reveal.
    pub retrain: Option<PhaseConfig>,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            rounds: 1,
            select_fraction: 0.30,
            scorer: ScorerKind::Random,
            seed: 0,
            radius: DEFAULT_RADIUS,
            nbits: DEFAULT_NBITS,
            retrain: None,
        }
    }
}

/// Model, context mapping and head used by the model scorer.
#[derive(Debug, Clone)]
pub struct ModelScorer {
    pub model: NestModel,
    pub map: ContextMap,
    pub task: String,
}

#[derive(Debug, Clone)]
pub struct Campaign {
    pub pool: Dataset,
    /// Records known before the first round; their actives seed the
    /// fingerprint-NN scorer.
    pub prior: Option<Dataset>,
    pub config: CampaignConfig,
    pub model: Option<ModelScorer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub round: usize,
    /// Pool indices in selection order.
    pub selected: Vec<usize>,
    pub hits: usize,
    pub hit_rate: f64,
    pub cumulative_selected: usize,
    pub cumulative_hits: usize,
    pub cumulative_hit_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub scorer: ScorerKind,
    pub pool_size: usize,
    pub pool_actives: usize,
    pub rounds: Vec<RoundResult>,
    /// Pool indices and outcomes in reveal order.
    pub reveal_order: Vec<usize>,
    pub reveal_hits: Vec<bool>,
    pub model_hit_rate: f64,
    /// Expected hit rate of uniform random selection (pool prevalence).
    pub random_hit_rate: f64,
    pub enrichment: Option<f64>,
}

fn scores(
    c: &mut Campaign,
    remaining: &[usize],
    fps: &Option<Vec<Fingerprint>>,
    known_actives: &[Fingerprint],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, DmtaError> {
    let out = match c.config.scorer {
        ScorerKind::Random => remaining.iter().map(|_| rng.gen::<f64>()).collect(),
        ScorerKind::Oracle => remaining.iter().map(|&i| f64::from(u8::from(c.pool.records[i].is_active()))).collect(),
        ScorerKind::FingerprintNn => {
            let fps = fps.as_ref().expect("fingerprints computed for this scorer");
            if known_actives.is_empty() {
                vec![0.0; remaining.len()]
            } else {
                remaining
                    .iter()
                    .map(|&i| nn_similarity(&fps[i], known_actives).map(|s| s.0))
                    .collect::<Result<_, _>>()?
            }
        }
        ScorerKind::Model => {
            let m = c
                .model
                .as_ref()
                .ok_or_else(|| DmtaError::ScorerFailure("model scorer without a model".into()))?;
            let graphs: Vec<_> = remaining
                .iter()
                .map(|&i| c.pool.records[i].graph())
                .collect::<Result<_, _>>()
                .map_err(|e| DmtaError::ScorerFailure(e.to_string()))?;
            let task = m.model.task_index(&m.task).map_err(|e| DmtaError::ScorerFailure(e.to_string()))?;
            let samples: Vec<Sample> = remaining
                .iter()
                .zip(&graphs)
                .map(|(&i, g)| Sample {
                    graph: g,
                    context: m.map.context(&c.pool.records[i], ContextLevels::ALL),
                    task,
                })
                .collect();
            m.model.predict_batch(&samples).map_err(|e| DmtaError::ScorerFailure(e.to_string()))?
        }
    };
    if let Some(bad) = out.iter().position(|s: &f64| !s.is_finite()) {
        return Err(DmtaError::ScorerFailure(format!("non-finite score for pool row {}", remaining[bad])));
    }
    Ok(out)
}

/// Runs the campaign to completion. Ties in score keep pool order.
pub fn replay_campaign(mut c: Campaign) -> Result<CampaignResult, DmtaError> {
    let cfg = c.config.clone();
    if !(cfg.select_fraction > 0.0 && cfg.select_fraction <= 1.0) {
        return Err(DmtaError::Config(format!("select fraction {} outside (0, 1]", cfg.select_fraction)));
    }
    if c.pool.is_empty() {
        return Err(DmtaError::EmptyPool);
    }
    if cfg.scorer == ScorerKind::Model && c.model.is_none() {
        return Err(DmtaError::ScorerFailure("model scorer without a model".into()));
    }
    let n = c.pool.len();
    let labels = c.pool.labels();
    let pool_actives = labels.iter().filter(|&&l| l).count();
    let fps = if cfg.scorer == ScorerKind::FingerprintNn {
        Some(fingerprints(&c.pool, cfg.radius, cfg.nbits)?)
    } else {
        None
    };
    let mut known_actives = match (&c.prior, cfg.scorer) {
        (Some(p), ScorerKind::FingerprintNn) => fingerprints(&p.filter(|r| r.is_active()), cfg.radius, cfg.nbits)?,
        _ => Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut revealed = vec![false; n];
    let mut rounds = Vec::new();
    let (mut reveal_order, mut reveal_hits) = (Vec::new(), Vec::new());
    for round in 1..=cfg.rounds {
        let remaining: Vec<usize> = (0..n).filter(|&i| !revealed[i]).collect();
        if remaining.is_empty() {
            break;
        }
        let s = scores(&mut c, &remaining, &fps, &known_actives, &mut rng)?;
        let mut order: Vec<usize> = (0..remaining.len()).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
        let k = ((cfg.select_fraction * remaining.len() as f64) - 1e-9).ceil().max(1.0) as usize;
        let selected: Vec<usize> = order[..k.min(remaining.len())].iter().map(|&j| remaining[j]).collect();
        let mut hits = 0;
        for &i in &selected {
            revealed[i] = true;
            reveal_order.push(i);
            reveal_hits.push(labels[i]);
            if labels[i] {
                hits += 1;
                if let Some(f) = &fps {
                    known_actives.push(f[i].clone());
                }
            }
        }
        if let (Some(m), Some(retrain)) = (c.model.as_mut(), &cfg.retrain) {
            let batch = c.pool.subset(&selected);
            let rc = PhaseConfig {
                seed: retrain.seed.wrapping_add(round as u64),
                ..retrain.clone()
            };
            continual_update(&mut m.model, &[batch], &m.map, &rc)?;
        }
        let cumulative_selected = reveal_order.len();
        let cumulative_hits = reveal_hits.iter().filter(|&&h| h).count();
        rounds.push(RoundResult {
            round,
            hits,
            hit_rate: hits as f64 / selected.len() as f64,
            selected,
            cumulative_selected,
            cumulative_hits,
            cumulative_hit_rate: cumulative_hits as f64 / cumulative_selected as f64,
        });
    }
    let model_hit_rate = rounds.last().map_or(0.0, |r| r.cumulative_hit_rate);
    let random_hit_rate = pool_actives as f64 / n as f64;
    Ok(CampaignResult {
        scorer: cfg.scorer,
        pool_size: n,
        pool_actives,
        rounds,
        reveal_order,
        reveal_hits,
        model_hit_rate,
        random_hit_rate,
        enrichment: (pool_actives > 0).then(|| model_hit_rate / random_hit_rate),
    })
}

/// Revealed compounds needed to reach the `n`-th hit; `None` when the
/// campaign found fewer hits.
pub fn experiments_to_n_hits(result: &CampaignResult, n: usize) -> Option<usize> {
    let mut hits = 0;
    for (i, &h) in result.reveal_hits.iter().enumerate() {
        hits += usize::from(h);
        if hits >= n.max(1) {
            return Some(i + 1);
        }
    }
    None
}

/// Expected random draws (without replacement) until the `n`-th of `actives`
/// hits in a pool of `pool`: n (N + 1) / (K + 1).
pub fn random_experiments_to_n_hits(pool: usize, actives: usize, n: usize) -> Option<f64> {
    (n >= 1 && n <= actives).then(|| n as f64 * (pool as f64 + 1.0) / (actives as f64 + 1.0))
}

/// Mean cumulative hit rate of `trials` random-scorer replays and its
/// standard error, for checking the analytic baseline.
pub fn paired_random_hit_rate(pool: &Dataset, config: &CampaignConfig, trials: usize) -> Result<(f64, f64), DmtaError> {
    let mut rates = Vec::with_capacity(trials);
    for t in 0..trials {
        let c = Campaign {
            pool: pool.clone(),
            prior: None,
            config: CampaignConfig {
                scorer: ScorerKind::Random,
                seed: config.seed.wrapping_add(t as u64),
                ..config.clone()
            },
            model: None,
        };
        rates.push(replay_campaign(c)?.model_hit_rate);
    }
    let n = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / n;
    let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok((mean, (var / n).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichmentRow {
    pub label: String,
    pub enrichment: Option<f64>,
    pub model_hit_rate: f64,
    pub random_hit_rate: f64,
    pub experiments_to_n: Option<usize>,
    pub random_experiments_to_n: Option<f64>,
    /// 1 − model / random experiments to the n-th hit.
    pub experiment_reduction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichmentSummary {
    pub n_hits: usize,
    pub rows: Vec<EnrichmentRow>,
    pub mean_enrichment: Option<f64>,
    pub mean_model_hit_rate: f64,
    pub mean_random_hit_rate: f64,
    pub mean_experiment_reduction: Option<f64>,
}

fn mean_of(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn enrichment_summary(results: &[(String, CampaignResult)], n_hits: usize) -> Option<EnrichmentSummary> {
    if results.is_empty() {
        return None;
    }
    let rows: Vec<EnrichmentRow> = results
        .iter()
        .map(|(label, r)| {
            let model = experiments_to_n_hits(r, n_hits);
            let random = random_experiments_to_n_hits(r.pool_size, r.pool_actives, n_hits);
            EnrichmentRow {
                label: label.clone(),
                enrichment: r.enrichment,
                model_hit_rate: r.model_hit_rate,
                random_hit_rate: r.random_hit_rate,
                experiments_to_n: model,
                random_experiments_to_n: random,
                experiment_reduction: model.zip(random).map(|(m, r)| 1.0 - m as f64 / r),
            }
        })
        .collect();
    Some(EnrichmentSummary {
        n_hits,
        mean_enrichment: mean_of(rows.iter().filter_map(|r| r.enrichment)),
        mean_model_hit_rate: mean_of(rows.iter().map(|r| r.model_hit_rate)).unwrap_or(0.0),
        mean_random_hit_rate: mean_of(rows.iter().map(|r| r.random_hit_rate)).unwrap_or(0.0),
        mean_experiment_reduction: mean_of(rows.iter().filter_map(|r| r.experiment_reduction)),
        rows,
    })
}

pub const ROUND_CSV_COLUMNS: [&str; 7] = [
    "round",
    "n_selected",
    "hits",
    "hit_rate",
    "cumulative_selected",
    "cumulative_hits",
    "cumulative_hit_rate",
];

impl CampaignResult {
    pub fn write_round_csv<W: Write>(&self, w: W) -> Result<(), DmtaError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(ROUND_CSV_COLUMNS)?;
        for r in &self.rounds {
            out.write_record([
                r.round.to_string(),
                r.selected.len().to_string(),
                r.hits.to_string(),
                format!("{:.6}", r.hit_rate),
                r.cumulative_selected.to_string(),
                r.cumulative_hits.to_string(),
                format!("{:.6}", r.cumulative_hit_rate),
            ])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}
