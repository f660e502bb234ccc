//! Built-in oracle and property checks.

use std::path::Path;

use nestdrug_core::attribution::integrated_gradients_with;
use nestdrug_core::audit::leakage_report;
use nestdrug_core::datasets::{synth_structured_shift, Dataset, SynthConfig};
use nestdrug_core::dmta::{replay_campaign, Campaign, CampaignConfig, ScorerKind};
use nestdrug_core::evalkit::{bonferroni, paired_t_test, roc_auc};
use nestdrug_core::fingerprint::{morgan_fingerprint, tanimoto};
use nestdrug_core::molgraph::{canonical_form, parse_smiles, CanonicalForm};
use nestdrug_core::nestmodel::{ContextTuple, FusionVariant, ModelConfig, NestModel};
use nestdrug_core::tensor::Tensor;
use nestdrug_core::training::{shared_head, SHARED_TASK};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CliResult, EXIT_INTERNAL, EXIT_OK};
use crate::manifest::OutputDir;

const MOLECULES: [&str; 5] = ["CCO", "c1ccccc1O", "CC(=O)Nc1ccc(O)cc1", "C1CCNCC1", "OC(=O)c1ccccc1C"];

#[derive(Serialize)]
struct Check {
    name: &'static str,
    passed: bool,
    detail: String,
}

type CheckResult = Result<String, String>;

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn auc_oracle() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..200 {
        let n = rng.gen_range(2..=60);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..8u8)) / 8.0).collect();
        let got = roc_auc(&scores, &labels).map_err(|e| e.to_string())?;
        let want = pairwise_auc(&scores, &labels);
        if got != want {
            return Err(format!("case {case}: {got} vs pairwise {want}"));
        }
    }
    Ok("200 tied instances match the pairwise oracle".into())
}

fn t_statistic() -> CheckResult {
    let t = paired_t_test(&[1.0, 2.0, 3.0, 4.0, 5.0], 1).map_err(|e| e.to_string())?;
    let want = 3.0 / (2.5f64.sqrt() / 5f64.sqrt());
    if (t.t - want).abs() > 1e-12 {
        return Err(format!("t = {}", t.t));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let p: f64 = rng.gen();
        let m = rng.gen_range(1..50);
        if bonferroni(p, m + 1) < bonferroni(p, m) || bonferroni(p, m) < p {
            return Err(format!("bonferroni not monotone at p={p}, m={m}"));
        }
    }
    Ok(format!("t = {:.4}", t.t))
}

fn linear_attribution() -> CheckResult {
    let x = Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 3.0]).map_err(|e| e.to_string())?;
    let w = [0.25, -1.5, 4.0, 0.125];
    let mut f = |xs: &[Tensor]| Ok(xs.iter().map(|t| (t.data().iter().zip(&w).map(|(a, b)| a * b).sum(), w.to_vec())).collect());
    for steps in [8, 13, 64] {
        let r = integrated_gradients_with(&x, &Tensor::zeros(2, 2), steps, &mut f).map_err(|e| e.to_string())?;
        for (i, a) in r.feature_attributions.iter().enumerate() {
            if (a - w[i] * x.data()[i]).abs() > 1e-12 {
                return Err(format!("{steps} steps: feature {i} attribution {a}"));
            }
        }
    }
    Ok("exact for 8, 13 and 64 steps".into())
}

fn film_identity() -> CheckResult {
    let graphs: Vec<_> = MOLECULES.iter().map(|s| parse_smiles(s)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    for seed in 0..5 {
        let base = shared_head(ModelConfig::desk());
        let film = NestModel::init(base.clone().with_fusion(FusionVariant::Film), seed).map_err(|e| e.to_string())?;
        let mut none = NestModel::init(base.with_fusion(FusionVariant::None), seed).map_err(|e| e.to_string())?;
        none.load_matching_from(&film).map_err(|e| e.to_string())?;
        for g in &graphs {
            for c in [ContextTuple::generic(), ContextTuple::new(3, 1, 2)] {
                let a = film.predict(g, c, SHARED_TASK).map_err(|e| e.to_string())?;
                let b = none.predict(g, c, SHARED_TASK).map_err(|e| e.to_string())?;
                if a.to_bits() != b.to_bits() {
                    return Err(format!("seed {seed}: {a} vs {b}"));
                }
            }
        }
    }
    Ok("FiLM equals no-context predictions bitwise at init".into())
}

fn leakage_half() -> CheckResult {
    let form = |s: &str| CanonicalForm { text: s.into() };
    let r = leakage_report(&[form("a"), form("b")], &[form("a"), form("c")], &[]).map_err(|e| e.to_string())?;
    if r.active_leakage_pct != 50.0 {
        return Err(format!("{}%", r.active_leakage_pct));
    }
    Ok("50.0% on a half-overlapping set".into())
}

fn oracle_enrichment() -> CheckResult {
    let ds = synth_structured_shift(&SynthConfig::new(1, 400, 0.0, 3)).map_err(|e| e.to_string())?.0;
    let actives = ds.filter(|r| r.is_active());
    let inactives = ds.filter(|r| !r.is_active());
    if actives.len() < 40 || inactives.len() < 60 {
        return Err("synthetic pool too small".into());
    }
    let mut records = actives.records[..40].to_vec();
    records.extend_from_slice(&inactives.records[..60]);
    let pool = Dataset { records, ..Dataset::default() };
    let config = CampaignConfig { scorer: ScorerKind::Oracle, ..CampaignConfig::default() };
    let r = replay_campaign(Campaign { pool, prior: None, config, model: None }).map_err(|e| e.to_string())?;
    match r.enrichment {
        Some(e) if e == 2.5 => Ok("oracle enrichment 2.5 on the 100/40 pool".into()),
        other => Err(format!("enrichment {other:?}")),
    }
}

fn checkpoint_round_trip() -> CheckResult {
    let m = NestModel::init(shared_head(ModelConfig::desk()), 4).map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    m.save(&mut buf).map_err(|e| e.to_string())?;
    let back = NestModel::load(&buf[..]).map_err(|e| e.to_string())?;
    if back.params().named_values() != m.params().named_values() {
        return Err("parameters differ after reload".into());
    }
    let mut again = Vec::new();
    back.save(&mut again).map_err(|e| e.to_string())?;
    if again != buf {
        return Err("re-saved checkpoint differs".into());
    }
    Ok(format!("{} bytes, byte-identical re-save", buf.len()))
}

fn fingerprint_identity() -> CheckResult {
    for s in MOLECULES {
        let a = parse_smiles(s).map_err(|e| e.to_string())?;
        let fa = morgan_fingerprint(&a, 2, 2048).map_err(|e| e.to_string())?;
        let again = parse_smiles(&canonical_form(&a).text).map_err(|e| e.to_string())?;
        let fb = morgan_fingerprint(&again, 2, 2048).map_err(|e| e.to_string())?;
        let sim = tanimoto(&fa, &fb).map_err(|e| e.to_string())?;
        if sim != 1.0 {
            return Err(format!("{s}: Tanimoto {sim} after canonical round trip"));
        }
    }
    Ok("canonical round trip keeps fingerprints".into())
}

pub(crate) fn run(out: Option<&Path>) -> CliResult<i32> {
    let checks: [(&'static str, fn() -> CheckResult); 8] = [
        ("roc_auc_pairwise_oracle", auc_oracle),
        ("paired_t_and_bonferroni", t_statistic),
        ("integrated_gradients_linear", linear_attribution),
        ("film_identity_at_init", film_identity),
        ("leakage_half_overlap", leakage_half),
        ("oracle_enrichment", oracle_enrichment),
        ("checkpoint_round_trip", checkpoint_round_trip),
        ("fingerprint_canonical_round_trip", fingerprint_identity),
    ];
    let results: Vec<Check> = checks
        .iter()
        .map(|(name, f)| {
            let r = f();
            let passed = r.is_ok();
            let detail = r.unwrap_or_else(|e| e);
            println!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
            Check { name, passed, detail }
        })
        .collect();
    if let Some(dir) = out {
        let mut o = OutputDir::create(dir)?;
        o.write_json("selftest.json", &results)?;
    }
    Ok(if results.iter().all(|c| c.passed) { EXIT_OK } else { EXIT_INTERNAL })
}
