use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::datasets::{ActivityRecord, Dataset};
use crate::nestmodel::{ContextTuple, ModelConfig, ModelError, TaskKind, TaskSpec};

/// Which context levels take their ids from the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextLevels {
    pub l1: bool,
    pub l2: bool,
    pub l3: bool,
}

impl ContextLevels {
    pub const ALL: ContextLevels = ContextLevels { l1: true, l2: true, l3: true };
    pub const NONE: ContextLevels = ContextLevels { l1: false, l2: false, l3: false };

    pub fn without_l1(self) -> ContextLevels {
        ContextLevels { l1: false, ..self }
    }

    pub fn without_l2(self) -> ContextLevels {
        ContextLevels { l2: false, ..self }
    }

    pub fn without_l3(self) -> ContextLevels {
        ContextLevels { l3: false, ..self }
    }
}

/// Dense table rows for raw target, assay and round ids; row 0 stays generic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContextMap {
    pub program: BTreeMap<u32, usize>,
    pub assay: BTreeMap<u32, usize>,
    pub round: BTreeMap<u32, usize>,
}

fn rows(ids: impl Iterator<Item = u32>) -> BTreeMap<u32, usize> {
    ids.collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i + 1))
        .collect()
}

impl ContextMap {
    pub fn from_dataset(ds: &Dataset) -> ContextMap {
        ContextMap {
            program: rows(ds.records.iter().map(|r| r.target_id)),
            assay: rows(ds.records.iter().map(|r| r.assay_id)),
            round: rows(ds.records.iter().map(|r| r.round_id)),
        }
    }

    /// Unknown ids and disabled levels map to the generic row.
    pub fn context(&self, r: &ActivityRecord, levels: ContextLevels) -> ContextTuple {
        let pick = |on: bool, map: &BTreeMap<u32, usize>, id: u32| if on { map.get(&id).copied().unwrap_or(0) } else { 0 };
        ContextTuple {
            program: pick(levels.l1, &self.program, r.target_id),
            assay: pick(levels.l2, &self.assay, r.assay_id),
            round: pick(levels.l3, &self.round, r.round_id),
        }
    }

    /// Raises the table capacities of `config` so every mapped id fits,
    /// keeping `spare` extra program rows (for few-shot adaptation).
    pub fn fit_capacities(&self, config: &mut ModelConfig, spare: usize) {
        config.l1_capacity = config.l1_capacity.max(self.program.len() + 1 + spare);
        config.l2_capacity = config.l2_capacity.max(self.assay.len() + 1);
        config.l3_capacity = config.l3_capacity.max(self.round.len() + 1);
    }

    pub fn check(&self, config: &ModelConfig) -> Result<(), ModelError> {
        for (level, n, capacity) in [
            ("program", self.program.len(), config.l1_capacity),
            ("assay", self.assay.len(), config.l2_capacity),
            ("round", self.round.len(), config.l3_capacity),
        ] {
            if n + 1 > capacity {
                return Err(ModelError::IdOutOfRange { level, id: n, capacity });
            }
        }
        Ok(())
    }
}

/// One head per target id, named by its decimal id.
pub fn task_specs(ds: &Dataset, kind: TaskKind) -> Vec<TaskSpec> {
    ds.target_ids()
        .into_iter()
        .map(|t| TaskSpec { id: t.to_string(), kind })
        .collect()
}
