use serde::{Deserialize, Serialize};

use super::{evaluate, finetune, pretrain, ContextLevels, ContextMap, PhaseConfig, TargetMetrics, TrainError};
use crate::datasets::Dataset;
use crate::nestmodel::{FusionVariant, ModelConfig, NestModel, TaskKind, TaskSpec};

/// Head id shared by every target when targets are told apart by context.
pub const SHARED_TASK: &str = "activity";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextLevel {
    L1,
    L2,
    L3,
}

impl ContextLevel {
    pub fn parse(s: &str) -> Option<ContextLevel> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l1" => Some(ContextLevel::L1),
            "l2" => Some(ContextLevel::L2),
            "l3" => Some(ContextLevel::L3),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ContextLevel::L1 => "l1",
            ContextLevel::L2 => "l2",
            ContextLevel::L3 => "l3",
        }
    }

    /// All levels on except this one.
    pub fn generic(self) -> ContextLevels {
        match self {
            ContextLevel::L1 => ContextLevels::ALL.without_l1(),
            ContextLevel::L2 => ContextLevels::ALL.without_l2(),
            ContextLevel::L3 => ContextLevels::ALL.without_l3(),
        }
    }
}

/// Pretrain a context-free backbone, then fine-tune each fusion variant from
/// it with identical rates and epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationProtocol {
    pub model: ModelConfig,
    pub pretrain: PhaseConfig,
    pub finetune: PhaseConfig,
    pub seed: u64,
}

impl Default for AblationProtocol {
    fn default() -> Self {
        let mut pre = PhaseConfig::pretrain(3e-3);
        pre.epochs = 10;
        let mut ft = PhaseConfig::finetune();
        ft.epochs = 10;
        AblationProtocol {
            model: shared_head(ModelConfig::desk()),
            pretrain: pre,
            finetune: ft,
            seed: 0,
        }
    }
}

/// `config` with one classification head shared by all targets.
pub fn shared_head(config: ModelConfig) -> ModelConfig {
    config.with_tasks(vec![TaskSpec {
        id: SHARED_TASK.into(),
        kind: TaskKind::Classification,
    }])
}

impl AblationProtocol {
    fn seeded(&self, mut c: PhaseConfig) -> PhaseConfig {
        c.seed = self.seed;
        c
    }

    fn config(&self, map: &ContextMap, fusion: FusionVariant) -> ModelConfig {
        let mut cfg = self.model.clone().with_fusion(fusion);
        map.fit_capacities(&mut cfg, 1);
        cfg
    }

    pub fn pretrain_backbone(&self, train: &Dataset, map: &ContextMap) -> Result<NestModel, TrainError> {
        let mut m = NestModel::init(self.config(map, FusionVariant::None), self.seed)?;
        pretrain(&mut m, train, &self.seeded(self.pretrain.clone()))?;
        Ok(m)
    }

    pub fn finetune_variant(
        &self,
        pretrained: &NestModel,
        train: &Dataset,
        map: &ContextMap,
        fusion: FusionVariant,
    ) -> Result<NestModel, TrainError> {
        let mut m = NestModel::init(self.config(map, fusion), self.seed)?;
        m.load_matching_from(pretrained)?;
        finetune(&mut m, train, map, &self.seeded(self.finetune.clone()))?;
        Ok(m)
    }

    /// Fine-tuned model per variant, in the order given.
    pub fn fusion_sweep(
        &self,
        train: &Dataset,
        map: &ContextMap,
        variants: &[FusionVariant],
    ) -> Result<Vec<(FusionVariant, NestModel)>, TrainError> {
        let pre = self.pretrain_backbone(train, map)?;
        variants
            .iter()
            .map(|&v| Ok((v, self.finetune_variant(&pre, train, map, v)?)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub target: u32,
    pub level: ContextLevel,
    pub n: usize,
    pub correct_auc: Option<f64>,
    pub generic_auc: Option<f64>,
    /// correct − generic.
    pub delta: Option<f64>,
}

/// Per-target ROC-AUC with all context levels versus the same model with
/// `level` replaced by its generic row at inference.
pub fn level_ablation(model: &NestModel, test: &Dataset, map: &ContextMap, level: ContextLevel) -> Result<Vec<AblationRow>, TrainError> {
    let correct = evaluate(model, test, map, ContextLevels::ALL)?;
    let generic = evaluate(model, test, map, level.generic())?;
    Ok(correct
        .into_iter()
        .zip(generic)
        .map(|(c, g)| AblationRow {
            target: c.target,
            level,
            n: c.metrics.n,
            correct_auc: c.metrics.roc_auc,
            generic_auc: g.metrics.roc_auc,
            delta: c.metrics.roc_auc.zip(g.metrics.roc_auc).map(|(a, b)| a - b),
        })
        .collect())
}

/// Mean ROC-AUC over targets that have one.
pub fn mean_auc(metrics: &[TargetMetrics]) -> Option<f64> {
    let v: Vec<f64> = metrics.iter().filter_map(|t| t.metrics.roc_auc).collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_names_round_trip() {
        for l in [ContextLevel::L1, ContextLevel::L2, ContextLevel::L3] {
            assert_eq!(ContextLevel::parse(l.name()), Some(l));
        }
        assert_eq!(ContextLevel::parse("l4"), None);
        assert_eq!(ContextLevel::L2.generic(), ContextLevels { l1: true, l2: false, l3: true });
    }

    #[test]
    fn default_protocol_uses_one_shared_head() {
        let p = AblationProtocol::default();
        assert_eq!(p.model.tasks.len(), 1);
        assert_eq!(p.model.tasks[0].id, SHARED_TASK);
        assert_eq!(p.pretrain.epochs, p.finetune.epochs);
    }
}
