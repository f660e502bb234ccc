//! Run configuration: defaults, an optional JSON file merged on top, then
//! `--set key=value` overrides addressed by dotted paths.

use std::path::Path;

use nestdrug_core::audit::AuditConfig;
use nestdrug_core::datasets::IngestConfig;
use nestdrug_core::dmta::CampaignConfig;
use nestdrug_core::fingerprint::{DEFAULT_NBITS, DEFAULT_RADIUS};
use nestdrug_core::nestmodel::FusionVariant;
use nestdrug_core::training::{AblationProtocol, PhaseConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub targets: usize,
    pub per_target: usize,
    pub shift_strength: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            targets: 4,
            per_target: 500,
            shift_strength: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FingerprintSection {
    pub radius: u32,
    pub nbits: usize,
}

impl Default for FingerprintSection {
    fn default() -> Self {
        FingerprintSection {
            radius: DEFAULT_RADIUS,
            nbits: DEFAULT_NBITS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSection {
    /// 1 evaluates on the whole dataset.
    pub folds: usize,
    pub fold: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection { folds: 5, fold: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSection {
    pub seeds: usize,
    pub variants: Vec<FusionVariant>,
    /// Each seed also takes the next fold; false keeps `split.fold` fixed.
    pub vary_folds: bool,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            seeds: 1,
            variants: vec![
                FusionVariant::None,
                FusionVariant::ConcatFrozen,
                FusionVariant::Additive,
                FusionVariant::Film,
            ],
            vary_folds: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FewShotSection {
    pub shots: Vec<usize>,
    pub steps: usize,
    pub lr: f64,
}

impl Default for FewShotSection {
    fn default() -> Self {
        FewShotSection {
            shots: vec![10, 25, 50],
            steps: 100,
            lr: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributionSection {
    pub steps: usize,
    pub max_molecules: usize,
    pub top_atoms: usize,
}

impl Default for AttributionSection {
    fn default() -> Self {
        AttributionSection {
            steps: 50,
            max_molecules: 20,
            top_atoms: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Root seed; components derive theirs from it.
    pub seed: u64,
    /// Worker cap; NESTDRUG_THREADS lowers it further.
    pub threads: usize,
    pub synth: SynthSection,
    pub ingest: IngestConfig,
    pub fingerprint: FingerprintSection,
    pub audit: AuditConfig,
    pub split: SplitSection,
    pub protocol: AblationProtocol,
    pub continual: PhaseConfig,
    pub ablation: AblationSection,
    pub fewshot: FewShotSection,
    pub campaign: CampaignConfig,
    pub attribution: AttributionSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 1,
            synth: SynthSection::default(),
            ingest: IngestConfig::default(),
            fingerprint: FingerprintSection::default(),
            audit: AuditConfig::default(),
            split: SplitSection::default(),
            protocol: AblationProtocol::default(),
            continual: PhaseConfig::continual(),
            ablation: AblationSection::default(),
            fewshot: FewShotSection::default(),
            campaign: CampaignConfig::default(),
            attribution: AttributionSection::default(),
        }
    }
}

impl RunConfig {
    /// Effective worker count.
    pub fn workers(&self) -> usize {
        let cap = std::env::var("NESTDRUG_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or(usize::MAX);
        self.threads.max(1).min(cap)
    }

    pub fn resolve(file: Option<&Path>, sets: &[String]) -> CliResult<RunConfig> {
        let mut value = serde_json::to_value(RunConfig::default()).map_err(crate::error::internal)?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            let overlay: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config file {}: {e}", path.display())))?;
            merge(&mut value, overlay);
        }
        for s in sets {
            apply_set(&mut value, s)?;
        }
        serde_json::from_value(value).map_err(|e| CliError::Usage(format!("config: {e}")))
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `key=value`. The value is parsed as JSON and falls back to a
/// string. Path segments descend into existing objects; a key that is not
/// present (such as a rate group containing dots) is created from the
/// remaining segments.
pub fn apply_set(root: &mut Value, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got '{assignment}'")))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(CliError::Usage(format!("empty segment in key '{key}'")));
    }
    let mut node = root;
    let mut rest: &[&str] = &segments;
    let mut depth = 0;
    loop {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Usage(format!("'{}' is not a section", segments[..depth].join("."))))?;
        let whole = rest.join(".");
        let descend = rest.len() > 1 && matches!(obj.get(rest[0]), Some(Value::Object(_) | Value::Null));
        if obj.contains_key(&whole) || (!descend && depth > 0) {
            obj.insert(whole, value);
            return Ok(());
        }
        if !descend {
            return Err(CliError::Usage(format!("unknown config key '{key}'")));
        }
        let slot = obj.get_mut(rest[0]).expect("checked above");
        if slot.is_null() {
            *slot = Value::Object(Default::default());
        }
        node = slot;
        rest = &rest[1..];
        depth += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn defaults() -> Value {
        serde_json::to_value(RunConfig::default()).unwrap()
    }

    #[test]
    fn set_overrides_nested_numbers_and_strings() {
        let mut v = defaults();
        apply_set(&mut v, "seed=7").unwrap();
        apply_set(&mut v, "split.fold=3").unwrap();
        apply_set(&mut v, "campaign.scorer=oracle").unwrap();
        let c: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.split.fold, 3);
        assert_eq!(c.campaign.scorer, nestdrug_core::dmta::ScorerKind::Oracle);
    }

    #[test]
    fn dotted_rate_groups_are_created() {
        let mut v = defaults();
        apply_set(&mut v, "protocol.finetune.rates.context.l1=0.5").unwrap();
        apply_set(&mut v, "protocol.finetune.rates.heads=0").unwrap();
        let c: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(c.protocol.finetune.rates["context.l1"], 0.5);
        assert_eq!(c.protocol.finetune.rates["heads"], 0.0);
        assert_eq!(c.protocol.finetune.rates["context"], 1e-3);
    }

    #[test]
    fn unknown_top_level_keys_and_bad_syntax_are_usage_errors() {
        let mut v = defaults();
        assert!(matches!(apply_set(&mut v, "sede=1"), Err(CliError::Usage(_))));
        assert!(matches!(apply_set(&mut v, "seed"), Err(CliError::Usage(_))));
        assert!(matches!(apply_set(&mut v, "seed.x=1"), Err(CliError::Usage(_))));
        assert!(RunConfig::resolve(None, &["seed=\"x\"".into()]).is_err());
    }

    #[test]
    fn optional_sections_can_be_filled() {
        let c = RunConfig::resolve(None, &["audit.cross_target.min_actives=3".into()]).unwrap();
        assert_eq!(c.audit.cross_target.unwrap().min_actives, 3);
    }

    #[test]
    fn file_overlay_merges_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"synth": {"targets": 2}}"#).unwrap();
        let c = RunConfig::resolve(Some(&p), &["synth.per_target=10".into()]).unwrap();
        assert_eq!((c.synth.targets, c.synth.per_target, c.synth.shift_strength), (2, 10, 0.8));
    }
}
