use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::molgraph::{canonical_form, parse_smiles};

use super::{ActivityRecord, ActivityUnit, Dataset, DatasetError, Label, Provenance, ACTIVE_THRESHOLD};

/// Ring cores: atom symbols in ring order and the positions that may carry
/// substituents.
const CORES: &[(&[&str], &[usize])] = &[
    (&["c", "c", "c", "c", "c", "c"], &[0, 1, 2, 3, 4, 5]),
    (&["n", "c", "c", "c", "c", "c"], &[1, 2, 3, 4, 5]),
    (&["n", "c", "n", "c", "c", "c"], &[1, 3, 4, 5]),
    (&["s", "c", "c", "c", "c"], &[1, 2, 3, 4]),
    (&["o", "c", "c", "c", "c"], &[1, 2, 3, 4]),
    (&["C", "C", "C", "C", "C", "C"], &[0, 1, 2, 3, 4, 5]),
    (&["N", "C", "C", "C", "C", "C"], &[1, 2, 3, 4, 5]),
];

/// Substituents that realize the halogen motif.
const HALOGEN_GROUPS: &[&str] = &["F", "Cl", "Br", "I", "C(F)(F)F", "OC(F)(F)F", "C(Cl)(Cl)Cl"];

/// Substituents that realize the nitrogen-group motif.
const NITROGEN_GROUPS: &[&str] = &[
    "N",
    "NC",
    "N(C)C",
    "C(=O)N",
    "NC(C)=O",
    "CN",
    "C#N",
    "N2CCOCC2",
    "N2CCCC2",
    "S(=O)(=O)N",
];

/// Substituents without halogens or nitrogen.
const NEUTRAL_GROUPS: &[&str] = &[
    "C",
    "CC",
    "CCC",
    "C(C)C",
    "O",
    "OC",
    "OCC",
    "C(=O)O",
    "C(=O)OC",
    "C=O",
    "c2ccccc2",
    "C2CC2",
    "C2CCCC2",
    "SC",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthMotifs {
    /// Carries a halogen-bearing substituent.
    pub u: bool,
    /// Carries a nitrogen-bearing substituent.
    pub v: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_targets: usize,
    pub n_per_target: usize,
    pub shift_strength: f64,
    /// Probability that a planted label is flipped.
    pub flip_prob: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(n_targets: usize, n_per_target: usize, shift_strength: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            n_targets,
            n_per_target,
            shift_strength,
            flip_prob: 0.0,
            seed,
        }
    }
}

/// Ground truth of the planted rules. Target t scores a molecule with
/// cos(a_t)(2u - 1) + sin(a_t)(2v - 1), a_t = shift_strength * 2 pi t / n_targets,
/// and pIC50 = 6 + 1.5 * score, so the label is active iff the score is >= 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub config: SynthConfig,
    pub angles: Vec<f64>,
    /// Motifs of each record, aligned with the dataset.
    pub motifs: Vec<SynthMotifs>,
    /// Whether each record's label was flipped.
    pub flipped: Vec<bool>,
}

impl SynthMeta {
    pub fn rule_score(&self, target: usize, m: SynthMotifs) -> f64 {
        let a = self.angles[target];
        let s = a.cos() * if m.u { 1.0 } else { -1.0 } + a.sin() * if m.v { 1.0 } else { -1.0 };
        if s.abs() < 1e-9 {
            0.0
        } else {
            s
        }
    }

    pub fn rule_active(&self, target: usize, m: SynthMotifs) -> bool {
        self.rule_score(target, m) >= 0.0
    }

    /// P(active | molecule, target).
    pub fn contextual_probability(&self, target: usize, m: SynthMotifs) -> f64 {
        let p = self.config.flip_prob;
        if self.rule_active(target, m) {
            1.0 - p
        } else {
            p
        }
    }

    /// P(active | molecule) with the target marginalized out; targets are
    /// equally likely and independent of the motifs.
    pub fn static_probability(&self, m: SynthMotifs) -> f64 {
        let n = self.angles.len();
        (0..n).map(|t| self.contextual_probability(t, m)).sum::<f64>() / n as f64
    }

    /// Expected fraction of actives for a target.
    pub fn expected_active_rate(&self, target: usize) -> f64 {
        let mut s = 0.0;
        for u in [false, true] {
            for v in [false, true] {
                s += 0.25 * self.contextual_probability(target, SynthMotifs { u, v });
            }
        }
        s
    }
}

fn build_smiles(rng: &mut ChaCha8Rng, motifs: SynthMotifs) -> String {
    let (atoms, slots) = CORES[rng.gen_range(0..CORES.len())];
    let mut free: Vec<usize> = slots.to_vec();
    free.shuffle(rng);
    let mut subs: Vec<Option<&str>> = vec![None; atoms.len()];
    let mut place = |group: &'static str, free: &mut Vec<usize>| {
        if let Some(pos) = free.pop() {
            subs[pos] = Some(group);
        }
    };
    if motifs.u {
        let k = if rng.gen_bool(0.7) { 1 } else { 2 };
        for _ in 0..k {
            place(HALOGEN_GROUPS[rng.gen_range(0..HALOGEN_GROUPS.len())], &mut free);
        }
    }
    if motifs.v {
        place(NITROGEN_GROUPS[rng.gen_range(0..NITROGEN_GROUPS.len())], &mut free);
    }
    let neutral = rng.gen_range(0..=2usize).min(free.len());
    for _ in 0..neutral {
        place(NEUTRAL_GROUPS[rng.gen_range(0..NEUTRAL_GROUPS.len())], &mut free);
    }
    let last = atoms.len() - 1;
    let mut s = String::new();
    for (i, a) in atoms.iter().enumerate() {
        s.push_str(a);
        if i == 0 || i == last {
            s.push('1');
        }
        if let Some(g) = subs[i] {
            s.push('(');
            s.push_str(g);
            s.push(')');
        }
    }
    s
}

/// Molecules with two binary motifs whose label rule rotates across targets
/// by `shift_strength`; 0 gives one shared rule.
pub fn synth_structured_shift(config: &SynthConfig) -> Result<(Dataset, SynthMeta), DatasetError> {
    if config.n_targets == 0 || config.n_per_target == 0 {
        return Err(DatasetError::Parameter("n_targets and n_per_target must be positive".into()));
    }
    if !(config.shift_strength >= 0.0 && config.shift_strength.is_finite()) {
        return Err(DatasetError::Parameter("shift_strength must be finite and non-negative".into()));
    }
    if !(0.0..=0.5).contains(&config.flip_prob) {
        return Err(DatasetError::Parameter("flip_prob must lie in [0, 0.5]".into()));
    }
    let angles: Vec<f64> = (0..config.n_targets)
        .map(|t| config.shift_strength * 2.0 * std::f64::consts::PI * t as f64 / config.n_targets as f64)
        .collect();
    let mut meta = SynthMeta {
        config: config.clone(),
        angles,
        motifs: Vec::new(),
        flipped: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut records = Vec::with_capacity(config.n_targets * config.n_per_target);
    for t in 0..config.n_targets {
        let mut seen = BTreeSet::new();
        for j in 0..config.n_per_target {
            let motifs = SynthMotifs {
                u: rng.gen_bool(0.5),
                v: rng.gen_bool(0.5),
            };
            let mut attempt = 0;
            let (smiles, canonical) = loop {
                let s = build_smiles(&mut rng, motifs);
                let g = parse_smiles(&s).map_err(|e| DatasetError::Parameter(format!("generator produced {s}: {e}")))?;
                let c = canonical_form(&g);
                attempt += 1;
                if seen.insert(c.clone()) || attempt >= 50 {
                    break (s, c);
                }
            };
            let mut score = meta.rule_score(t, motifs);
            let flip = config.flip_prob > 0.0 && rng.gen_bool(config.flip_prob);
            if flip {
                score = if score >= 0.0 { -score.abs().max(0.1) } else { score.abs() };
            }
            let pic50 = ACTIVE_THRESHOLD + 1.5 * score;
            let round = 1 + (j * 5 / config.n_per_target) as u32;
            records.push(ActivityRecord {
                smiles,
                canonical,
                target_id: t as u32,
                assay_id: 1 + rng.gen_range(0..2),
                round_id: round,
                year: Some(2015 + round as i32),
                activity_value: pic50,
                activity_unit: ActivityUnit::Pic50,
                label: Some(if pic50 >= ACTIVE_THRESHOLD { Label::Active } else { Label::Inactive }),
                pic50: Some(pic50),
            });
            meta.motifs.push(motifs);
            meta.flipped.push(flip);
        }
    }
    let ds = Dataset {
        records,
        provenance: Provenance {
            source: format!(
                "synthetic structured shift (targets {}, per target {}, strength {}, seed {})",
                config.n_targets, config.n_per_target, config.shift_strength, config.seed
            ),
            threshold: ACTIVE_THRESHOLD,
            deduplicated: false,
            ..Provenance::default()
        },
        rejects: Vec::new(),
    };
    Ok((ds, meta))
}
