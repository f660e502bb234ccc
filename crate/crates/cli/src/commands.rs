use std::collections::BTreeMap;
use std::io::BufReader;
use std::path::Path;

use nestdrug_core::attribution::{attribution_similarity, attribution_stats, integrated_gradients, AttributionError, AttributionResult};
use nestdrug_core::audit::audit_benchmark;
use nestdrug_core::datasets::{
    ingest_csv, read_jsonl, synth_structured_shift, write_csv, write_jsonl, write_rejects, Dataset, IngestConfig, SynthConfig,
};
use nestdrug_core::dmta::{replay_campaign, Campaign, ModelScorer, ScorerKind};
use nestdrug_core::evalkit::{paired_t_test, stratified_kfold, write_metric_csv, MetricRow, TTest};
use nestdrug_core::fingerprint::{morgan_fingerprint, write_fingerprint_file};
use nestdrug_core::molgraph::{featurize, ATOM_FEATURES, BOND_FEATURES};
use nestdrug_core::nestmodel::{ContextTuple, FusionVariant, NestModel};
use nestdrug_core::training::{
    continual_update, evaluate, few_shot_adapt_l1, finetune, level_ablation, pretrain, AblationRow, ContextLevel,
    ContextLevels, ContextMap, TrainReport, SHARED_TASK,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::charts::attribution_strips;
use crate::config::RunConfig;
use crate::error::{data, internal, CliError, CliResult, EXIT_GATE};
use crate::manifest::OutputDir;
use crate::{Command, Outcome};

pub(crate) fn run(cmd: &Command, cfg: &RunConfig, out: &mut OutputDir) -> CliResult<Outcome> {
    match cmd {
        Command::Synth { .. } => synth(cfg, out),
        Command::Ingest { input, .. } => ingest(input, cfg, out),
        Command::Featurize { data, .. } => featurize_stats(data, cfg, out),
        Command::Fp { data, .. } => fp(data, cfg, out),
        Command::Audit { train, eval, .. } => audit(train, eval, cfg, out),
        Command::Train { data, phase, init, .. } => train(data, phase, init.as_deref(), cfg, out),
        Command::Eval { model, data, .. } => eval(model, data, cfg, out),
        Command::Ablate { data, levels, fusion, .. } => ablate(data, levels, *fusion, cfg, out),
        Command::Fewshot { model, data, target, .. } => fewshot(model, data, *target, cfg, out),
        Command::Replay { data, model, .. } => replay(data, model.as_deref(), cfg, out),
        Command::Attribute { model, data, contexts, .. } => attribute(model, data, contexts, cfg, out),
        Command::Report { results, .. } => crate::report::run(results, out),
        Command::Selftest { .. } | Command::Rerun { .. } => Err(internal("not a data command")),
    }
}

fn seeds(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Reads a dataset from `.csv` (ingested with the configured rules) or
/// JSON lines.
pub(crate) fn load_dataset(path: &Path, cfg: &RunConfig) -> CliResult<Dataset> {
    let is_csv = path.extension().map_or(false, |e| e.eq_ignore_ascii_case("csv"));
    let ds = if is_csv {
        ingest_csv(path, &IngestConfig { rejects_path: None, ..cfg.ingest.clone() })?
    } else {
        let f = std::fs::File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        read_jsonl(BufReader::new(f))?
    };
    if ds.is_empty() {
        return Err(CliError::Data(format!("{}: no records", path.display())));
    }
    Ok(ds)
}

fn jsonl_bytes(ds: &Dataset) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, ds)?;
    Ok(buf)
}

pub(crate) const MODEL_FILE: &str = "model.ckpt";
pub(crate) const MAP_FILE: &str = "context_map.json";

fn load_model(dir: &Path) -> CliResult<(NestModel, ContextMap)> {
    let f = std::fs::File::open(dir.join(MODEL_FILE)).map_err(|e| CliError::Data(format!("{}: {e}", dir.join(MODEL_FILE).display())))?;
    let model = NestModel::load(BufReader::new(f))?;
    let text = std::fs::read_to_string(dir.join(MAP_FILE)).map_err(|e| CliError::Data(format!("{}: {e}", dir.join(MAP_FILE).display())))?;
    let map: ContextMap = serde_json::from_str(&text)?;
    map.check(model.config())?;
    Ok((model, map))
}

fn save_model(out: &mut OutputDir, model: &NestModel, map: &ContextMap) -> CliResult<()> {
    let mut buf = Vec::new();
    model.save(&mut buf)?;
    out.write(MODEL_FILE, &buf)?;
    out.write_json(MAP_FILE, map)
}

/// Head scored for `target`: the shared head when present, else the
/// target's own head, else the first head.
fn task_for(model: &NestModel, target: u32) -> String {
    for id in [SHARED_TASK.to_string(), target.to_string()] {
        if model.task_index(&id).is_ok() {
            return id;
        }
    }
    model.task(0).id.clone()
}

/// Runs `f` over `items` on up to `workers` threads; results keep item order.
fn par_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers.min(items.len()))
            .map(|w| {
                let f = &f;
                s.spawn(move || {
                    (w..items.len())
                        .step_by(workers)
                        .map(|i| (i, f(&items[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every item mapped")).collect()
}

fn synth(cfg: &RunConfig, out: &mut OutputDir) -> CliResult<Outcome> {
    let s = &cfg.synth;
    let (ds, meta) = synth_structured_shift(&SynthConfig::new(s.targets, s.per_target, s.shift_strength, cfg.seed))?;
    out.write("dataset.jsonl", &jsonl_bytes(&ds)?)?;
    let mut csv = Vec::new();
    write_csv(&mut csv, &ds)?;
    out.write("dataset.csv", &csv)?;
    out.write_json("synth_meta.json", &meta)?;
    println!("{} records, {} targets", ds.len(), ds.target_ids().len());
    Ok(Outcome::ok(seeds(&[("synth", cfg.seed)])))
}

#[derive(Serialize)]
struct IngestSummary {
    records: usize,
    rejects: usize,
    targets: Vec<u32>,
    actives: usize,
    warnings: Vec<String>,
}

fn ingest(input: &Path, cfg: &RunConfig, out: &mut OutputDir) -> CliResult<Outcome> {
    let ds = ingest_csv(input, &IngestConfig { rejects_path: None, ..cfg.ingest.clone() })?;
    out.write("dataset.jsonl", &jsonl_bytes(&ds)?)?;
    let mut rej = Vec::new();
    write_rejects(&mut rej, &ds.rejects)?;
    out.write("rejects.csv", &rej)?;
    let summary = IngestSummary {
        records: ds.len(),
        rejects: ds.rejects.len(),
        targets: ds.target_ids(),
        actives: ds.records.iter().filter(|r| r.is_active()).count(),
        warnings: ds.provenance.warnings.clone(),
    };
    out.write_json("ingest_summary.json", &summary)?;
    println!("{} records kept, {} rejected", summary.records, summary.rejects);
    Ok(Outcome::ok(BTreeMap::new()))
}

#[derive(Serialize)]
struct FeatureStats {
    molecules: usize,
    atoms: usize,
    bonds: usize,
    mean_atoms: f64,
    max_atoms: usize,
    atom_feature_means: Vec<f64>,
    bond_feature_means: Vec<f64>,
}

fn featurize_stats(path: &Path, cfg: &RunConfig, out: &mut OutputDir) -> CliResult<Outcome> {
    let ds = load_dataset(path, cfg)?;
    let mut atom_sum = vec![0.0; ATOM_FEATURES];
    let mut bond_sum = vec![0.0; BOND_FEATURES];
    let (mut atoms, mut bonds, mut max_atoms) = (0, 0, 0);
    for g in ds.graphs()? {
        let (a, b) = featurize(&g);
        for row in a.chunks(ATOM_FEATURES) {
            atom_sum.iter_mut().zip(row).for_each(|(s, v)| *s += v);
        }
        for row in b.chunks(BOND_FEATURES) {
            bond_sum.iter_mut().zip(row).for_each(|(s, v)| *s += v);
        }
        atoms += g.num_atoms();
        bonds += g.num_bonds();
        max_atoms = max_atoms.max(g.num_atoms());
    }
    let mean = |s: Vec<f64>, n: usize| s.into_iter().map(|v| if n > 0 { v / n as f64 } else { 0.0 }).collect();
    let stats = FeatureStats {
        molecules: ds.len(),
        atoms,
        bonds,
        mean_atoms: atoms as f64 / ds.len() as f64,
        max_atoms,
        atom_feature_means: mean(atom_sum, atoms),
        bond_feature_means: mean(bond_sum, bonds),
    };
    out.write_json("features.json", &stats)?;
    println!("{} molecules, {} atoms, {} bonds", stats.molecules, atoms, bonds);
    Ok(Outcome::ok(BTreeMap::new()))
}

fn fp(path: &Path, cfg: &RunConfig, out: &mut OutputDir) -> CliResult<Outcome> {
    let ds = load_dataset(path, cfg)?;
    let rows = ds
        .records
        .iter()
        .zip(ds.graphs()?)
        .map(|(r, g)| Ok((r.canonical.clone(), morgan_fingerprint(&g, cfg.fingerprint.radius, cfg.fingerprint.nbits)?)))
        .collect::<CliResult<Vec<_>>>()?;
    let mut buf = Vec::new();
    write_fingerprint_file(&mut buf, &rows)?;
    out.write("fingerprints.tsv", &buf)?;
    println!("{} fingerprints ({} bits, radius {})", rows.len(), cfg.fingerprint.nbits, cfg.fingerprint.radius);
    Ok(Outcome::ok(BTreeMap::new()))
}

fn audit(train: &Path, eval: &Path, cfg: &RunConfig, out: &mut OutputDir) -> CliResult<Outcome> {
    let train = load_dataset(train, cfg)?;
    let eval = load_dataset(eval, cfg)?;
    let mut acfg = cfg.audit.clone();
    if let Some(rf) = acfg.cross_target.as_mut() {
        rf.forest.threads = cfg.workers();
        rf.forest.seed = cfg.seed;
    }
    let report = audit_benchmark(&train, &eval, &acfg)?;
    let mut json = report.to_json()?;
    json.push('\n');
    out.write("audit.json", json.as_bytes())?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    out.write("audit.csv", &csv)?;
    for r in &report.rows {
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.1}%"));
        println!("target {}: active leakage {}", r.target, pct(r.active_leakage_pct));
    }
    let mut outcome = Outcome::ok(seeds(&[("forest", cfg.seed)]));
    if report.exceeds_threshold() {
        eprintln!("active leakage exceeds {}%", report.leakage_threshold_pct);
        outcome.exit_code = EXIT_GATE;
    }
    Ok(outcome)
}

/// Adds unseen ids of `ds` after the existing rows of `map`.
fn extend_map(map: &mut ContextMap, ds: &Dataset) {
    let add = |m: &mut BTreeMap<u32, usize>, ids: Vec<u32>| {
        for id in ids {
            let next = m.len() + 1;
            m.entry(id).or_insert(next);
        }
    };
    let fresh = ContextMap::from_dataset(ds);
    add(&mut map.program, fresh.program.into_keys().collect());
    add(&mut map.assay, fresh.assay.into_keys().collect());
    add(&mut map.round, fresh.round.into_keys().collect());
}

fn train(path: &Path, phase: &str, init: Option<&Path>, cfg: &RunConfig, out: &mut OutputDir) -> CliResult<Outcome> {
    let ds = load_dataset(path, cfg)?;
    let (start, mut map) = match init {
        Some(dir) => {
            let (m, map) = load_model(dir)?;
            (Some(m), map)
        }
        None => (None, ContextMap::default()),
    };
    extend_map(&mut map, &ds);
    let mut model_cfg = match &start {
        Some(m) => m.config().clone(),
        None => cfg.protocol.model.clone(),
    };
    map.fit_capacities(&mut model_cfg, 1);
    let mut model = NestModel::init(model_cfg, cfg.seed)?;
    if let Some(m) = &start {
        model.load_matching_from(m)?;
    }
    let reports: Vec<TrainReport> = match phase {
        "pretrain" => {
            let mut p = cfg.protocol.pretrain.clone();
            p.seed = cfg.seed;
            vec![pretrain(&mut model, &ds, &p)?]
        }
        "finetune" => {
            let mut p = cfg.protocol.finetune.clone();
            p.seed = cfg.seed;
            vec![finetune(&mut model, &ds, &map, &p)?]
        }
        "continual" => {
            if start.is_none() {
                return Err(CliError::Usage("continual training needs --init".into()));
            }
            let mut p = cfg.continual.clone();
            p.seed = cfg.seed;
            let mut ids: Vec<u32> = ds.records.iter().map(|r| r.round_id).collect();
            ids.sort_unstable();
            ids.dedup();
            let rounds: Vec<Dataset> = ids.iter().map(|&id| ds.filter(|r| r.round_id == id)).collect();
            continual_update(&mut model, &rounds, &map, &p)?
        }
        other => return Err(CliError::Usage(format!("unknown phase {other}"))),
    };
    save_model(out, &model, &map)?;
    let stable: Vec<TrainReport> = reports.iter().map(TrainReport::without_timing).collect();
    out.write_json("train_report.json", &stable)?;
    for r in &reports {
        println!(
            "{:?}: {} epochs, selected epoch {} by {}",
            r.phase,
            r.epochs.len(),
            r.selected_epoch,
            r.selection
        );
    }
    Ok(Outcome::ok(seeds(&[("init", cfg.seed), ("shuffle", cfg.seed)])))
}

/// Train and test rows of the configured fold; one fold means all rows.
fn split_rows(ds: &Dataset, cfg: &RunConfig, seed: u64, fold: usize) -> CliResult<(Vec<usize>, Vec<usize>)> {
    if cfg.split.folds <= 1 {
        let all: Vec<usize> = (0..ds.len()).collect();
        return Ok((all.clone(), all));
    }
    let plan = stratified_kfold(&ds.labels(), cfg.split.folds, seed).map_err(data)?;
    plan.fold(fold)
        .ok_or_else(|| CliError::Usage(format!("fold {fold} out of range for {} folds", cfg.split.folds)))
}

fn eval(model_dir: &Path, path: &Path, cfg: &RunConfig, out: &mut OutputDir) -> CliResult<Outcome> {
    let (model, map) = load_model(model_dir)?;
    let ds = load_dataset(path, cfg)?;
    let (_, test_rows) = split_rows(&ds, cfg, cfg.seed, cfg.split.fold)?;
    let test = ds.subset(&test_rows);
    let variants = [
        ("context", ContextLevels::ALL),
        ("generic_l1", ContextLevels::ALL.without_l1()),
        ("generic_l2", ContextLevels::ALL.without_l2()),
        ("generic_l3", ContextLevels::ALL.without_l3()),
        ("no_context", ContextLevels::NONE),
    ];
    let mut rows = Vec::new();
    for (name, levels) in variants {
        for t in evaluate(&model, &test, &map, levels)? {
            rows.push(MetricRow {
                target: t.target.to_string(),
                fold: cfg.split.fold,
                seed: cfg.seed,
                variant: name.to_string(),
                metrics: t.metrics,
            });
        }
    }
    let mut csv = Vec::new();
    write_metric_csv(&mut csv, &rows)?;
    out.write("metrics.csv", &csv)?;
    out.write_json("test_rows.json", &test_rows)?;
    println!("{} test records, {} metric rows", test.len(), rows.len());
    Ok(Outcome::ok(seeds(&[("split", cfg.seed)])))
}

#[derive(Serialize)]
struct LevelSummary {
    level: ContextLevel,
    mean_correct_auc: Option<f64>,
    mean_generic_auc: Option<f64>,
    mean_delta: Option<f64>,
    per_seed_delta: Vec<Option<f64>>,
    paired_t: Option<TTest>,
}

#[derive(Serialize)]
struct VariantSummary {
    variant: String,
    mean_auc: Option<f64>,
    per_seed_auc: Vec<Option<f64>>,
}

struct SeedRun {
    seed: u64,
    fold: usize,
    ablation: Vec<AblationRow>,
    fusion: Vec<(FusionVariant, Vec<(u32, Option<f64>)>)>,
}

fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn ablate(path: &Path, levels: &str, fusion: bool, cfg: &RunConfig, out: &mut OutputDir) -> CliResult<Outcome> {
    let levels: Vec<ContextLevel> = levels
        .split(',')
        .map(|s| ContextLevel::parse(s).ok_or_else(|| CliError::Usage(format!("unknown context level '{s}'"))))
        .collect::<CliResult<_>>()?;
    if cfg.split.folds < 2 {
        return Err(CliError::Usage("ablation needs split.folds >= 2".into()));
    }
    if cfg.ablation.seeds == 0 {
        return Err(CliError::Usage("ablation.seeds must be positive".into()));
    }
    let ds = load_dataset(path, cfg)?;
    let map = ContextMap::from_dataset(&ds);
    let mut variants = if fusion { cfg.ablation.variants.clone() } else { vec![] };
    if !variants.contains(&FusionVariant::Film) {
        variants.push(FusionVariant::Film);
    }
    let jobs: Vec<(u64, usize)> = (0..cfg.ablation.seeds)
        .map(|i| {
            let fold = if cfg.ablation.vary_folds { i % cfg.split.folds } else { cfg.split.fold };
            (cfg.seed + i as u64, fold)
        })
        .collect();
    let runs = par_map(&jobs, cfg.workers(), |&(seed, fold)| -> CliResult<SeedRun> {
        let (tr, te) = split_rows(&ds, cfg, seed, fold)?;
        let (train, test) = (ds.subset(&tr), ds.subset(&te));
        let mut proto = cfg.protocol.clone();
        proto.seed = seed;
        let models = proto.fusion_sweep(&train, &map, &variants)?;
        let film = &models.iter().find(|(v, _)| *v == FusionVariant::Film).expect("film variant present").1;
        let mut ablation = Vec::new();
        for &l in &levels {
            ablation.extend(level_ablation(film, &test, &map, l)?);
        }
        let mut fusion_rows = Vec::new();
        if fusion {
            for (v, m) in &models {
                let metrics = evaluate(m, &test, &map, ContextLevels::ALL)?;
                fusion_rows.push((*v, metrics.iter().map(|t| (t.target, t.metrics.roc_auc)).collect()));
            }
        }
        Ok(SeedRun { seed, fold, ablation, fusion: fusion_rows })
    })
    .into_iter()
    .collect::<CliResult<Vec<_>>>()?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["seed", "fold", "level", "target", "n", "correct_auc", "generic_auc", "delta"])?;
    for r in &runs {
        for a in &r.ablation {
            w.write_record([
                r.seed.to_string(),
                r.fold.to_string(),
                a.level.name().to_string(),
                a.target.to_string(),
                a.n.to_string(),
                fmt_opt(a.correct_auc),
                fmt_opt(a.generic_auc),
                fmt_opt(a.delta),
            ])?;
        }
    }
    out.write("ablation.csv", &w.into_inner().map_err(internal)?)?;

    let mut summaries = Vec::new();
    for &l in &levels {
        let rows: Vec<&AblationRow> = runs.iter().flat_map(|r| r.ablation.iter().filter(move |a| a.level == l)).collect();
        let per_seed: Vec<Option<f64>> = runs
            .iter()
            .map(|r| mean(&r.ablation.iter().filter(|a| a.level == l).filter_map(|a| a.delta).collect::<Vec<_>>()))
            .collect();
        let diffs: Vec<f64> = per_seed.iter().flatten().copied().collect();
        summaries.push(LevelSummary {
            level: l,
            mean_correct_auc: mean(&rows.iter().filter_map(|a| a.correct_auc).collect::<Vec<_>>()),
            mean_generic_auc: mean(&rows.iter().filter_map(|a| a.generic_auc).collect::<Vec<_>>()),
            mean_delta: mean(&diffs),
            paired_t: paired_t_test(&diffs, levels.len()).ok(),
            per_seed_delta: per_seed,
        });
    }
    out.write_json("ablation_summary.json", &summaries)?;
    for s in &summaries {
        println!(
            "{}: correct {} generic {} delta {}",
            s.level.name(),
            fmt_opt(s.mean_correct_auc),
            fmt_opt(s.mean_generic_auc),
            fmt_opt(s.mean_delta)
        );
    }

    if fusion {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["seed", "fold", "variant", "target", "roc_auc"])?;
        for r in &runs {
            for (v, rows) in &r.fusion {
                for (t, auc) in rows {
                    w.write_record([r.seed.to_string(), r.fold.to_string(), v.name().to_string(), t.to_string(), fmt_opt(*auc)])?;
                }
            }
        }
        out.write("fusion.csv", &w.into_inner().map_err(internal)?)?;
        let summary: Vec<VariantSummary> = variants
            .iter()
            .map(|&v| {
                let per_seed: Vec<Option<f64>> = runs
                    .iter()
                    .map(|r| {
                        r.fusion
                            .iter()
                            .find(|(x, _)| *x == v)
                            .and_then(|(_, rows)| mean(&rows.iter().filter_map(|(_, a)| *a).collect::<Vec<_>>()))
                    })
                    .collect();
                VariantSummary {
                    variant: v.name().to_string(),
                    mean_auc: mean(&per_seed.iter().flatten().copied().collect::<Vec<_>>()),
                    per_seed_auc: per_seed,
                }
            })
            .collect();
        out.write_json("fusion_summary.json", &summary)?;
        for s in &summary {
            println!("{}: mean AUC {}", s.variant, fmt_opt(s.mean_auc));
        }
    }
    let mut seed_map = BTreeMap::new();
    for (i, (s, _)) in jobs.iter().enumerate() {
        seed_map.insert(format!("run{i}"), *s);
    }
    Ok(Outcome::ok(seed_map))
}

#[derive(Serialize)]
struct FewShotRow {
    target: u32,
    shots: usize,
    steps: usize,
    row: usize,
    zero_shot_auc: Option<f64>,
    adapted_auc: Option<f64>,
    delta: Option<f64>,
}

fn fewshot(model_dir: &Path, path: &Path, target: u32, cfg: &RunConfig, out: &mut OutputDir) -> CliResult<Outcome> {
    let (model, map) = load_model(model_dir)?;
    let ds = load_dataset(path, cfg)?.for_target(target);
    if ds.is_empty() {
        return Err(CliError::Data(format!("no records for target {target}")));
    }
    let plan = stratified_kfold(&ds.labels(), 2, cfg.seed).map_err(data)?;
    let (mut support_rows, query_rows) = plan.fold(0).expect("two folds");
    support_rows.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let support = ds.subset(&support_rows);
    let query = ds.subset(&query_rows);
    let capacity = model.config().l1_capacity;
    let row = if map.program.len() + 1 < capacity { map.program.len() + 1 } else { capacity - 1 };
    let task = task_for(&model, target);
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for &shots in &cfg.fewshot.shots {
        if shots > support.len() {
            warnings.push(format!("{shots} shots skipped: {} support records", support.len()));
            continue;
        }
        let (_, r) = few_shot_adapt_l1(&model, &support, &query, &task, shots, cfg.fewshot.steps, cfg.fewshot.lr, row)?;
        rows.push(FewShotRow {
            target,
            shots,
            steps: r.steps,
            row: r.row,
            zero_shot_auc: r.zero_shot_auc,
            adapted_auc: r.adapted_auc,
            delta: r.delta(),
        });
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["target", "shots", "steps", "row", "zero_shot_auc", "adapted_auc", "delta"])?;
    for r in &rows {
        w.write_record([
            r.target.to_string(),
            r.shots.to_string(),
            r.steps.to_string(),
            r.row.to_string(),
            fmt_opt(r.zero_shot_auc),
            fmt_opt(r.adapted_auc),
            fmt_opt(r.delta),
        ])?;
        println!("{} shots: zero-shot {} adapted {}", r.shots, fmt_opt(r.zero_shot_auc), fmt_opt(r.adapted_auc));
    }
    out.write("fewshot.csv", &w.into_inner().map_err(internal)?)?;
    out.write_json("fewshot.json", &serde_json::json!({ "rows": rows, "warnings": warnings }))?;
    for wmsg in &warnings {
        eprintln!("warning: {wmsg}");
    }
    Ok(Outcome::ok(seeds(&[("split", cfg.seed)])))
}

fn replay(path: &Path, model_dir: Option<&Path>, cfg: &RunConfig, out: &mut OutputDir) -> CliResult<Outcome> {
    let ds = load_dataset(path, cfg)?;
    let mut config = cfg.campaign.clone();
    config.seed = cfg.seed;
    let model = match (config.scorer, model_dir) {
        (ScorerKind::Model, Some(dir)) => {
            let (model, map) = load_model(dir)?;
            let task = task_for(&model, ds.records[0].target_id);
            Some(ModelScorer { model, map, task })
        }
        (ScorerKind::Model, None) => return Err(CliError::Usage("the model scorer needs --model".into())),
        _ => None,
    };
    let result = replay_campaign(Campaign { pool: ds, prior: None, config, model })?;
    out.write_json("campaign.json", &result)?;
    let mut buf = Vec::new();
    result.write_round_csv(&mut buf)?;
    out.write("rounds.csv", &buf)?;
    println!(
        "{} rounds, hit rate {:.4} vs random {:.4}, enrichment {}",
        result.rounds.len(),
        result.model_hit_rate,
        result.random_hit_rate,
        fmt_opt(result.enrichment)
    );
    Ok(Outcome::ok(seeds(&[("campaign", cfg.seed)])))
}

fn parse_contexts(spec: &str) -> CliResult<Vec<(u32, u32, u32)>> {
    spec.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            let ids: Vec<u32> = s
                .split(',')
                .map(|x| x.trim().parse::<u32>())
                .collect::<Result<_, _>>()
                .map_err(|_| CliError::Usage(format!("context '{s}' is not target,assay,round")))?;
            match ids[..] {
                [t, a, r] => Ok((t, a, r)),
                _ => Err(CliError::Usage(format!("context '{s}' is not target,assay,round"))),
            }
        })
        .collect()
}

#[derive(Serialize)]
struct MoleculeAttribution<'a> {
    index: usize,
    smiles: &'a str,
    context_ids: (u32, u32, u32),
    context_rows: ContextTuple,
    task: String,
    attribution: AttributionResult,
}

fn attribute(model_dir: &Path, path: &Path, contexts: &str, cfg: &RunConfig, out: &mut OutputDir) -> CliResult<Outcome> {
    let (model, map) = load_model(model_dir)?;
    let ds = load_dataset(path, cfg)?;
    let ids = parse_contexts(contexts)?;
    if ids.is_empty() {
        return Err(CliError::Usage("at least one context is required".into()));
    }
    let rows: Vec<ContextTuple> = ids
        .iter()
        .map(|&(t, a, r)| ContextTuple {
            program: map.program.get(&t).copied().unwrap_or(0),
            assay: map.assay.get(&a).copied().unwrap_or(0),
            round: map.round.get(&r).copied().unwrap_or(0),
        })
        .collect();
    let steps = cfg.attribution.steps;
    let n = ds.len().min(cfg.attribution.max_molecules);
    let mut lines = Vec::new();
    let mut first = Vec::new();
    let mut similarity = Vec::new();
    for (i, rec) in ds.records.iter().take(n).enumerate() {
        let g = rec.graph()?;
        let task = task_for(&model, ids[0].0);
        for (k, (&ctx_ids, &ctx)) in ids.iter().zip(&rows).enumerate() {
            let res = integrated_gradients(&model, &g, ctx, &task, steps)?;
            if k == 0 {
                first.push((format!("{i}"), res.clone()));
            }
            let line = MoleculeAttribution {
                index: i,
                smiles: &rec.smiles,
                context_ids: ctx_ids,
                context_rows: ctx,
                task: task.clone(),
                attribution: res,
            };
            lines.push(serde_json::to_string(&line)?);
        }
        if rows.len() >= 2 {
            let entry = match attribution_similarity(&model, &g, &rows, &task, steps) {
                Ok(m) => serde_json::json!({ "index": i, "cosine": m }),
                Err(e @ AttributionError::ZeroVector(_)) => serde_json::json!({ "index": i, "cosine": null, "reason": e.to_string() }),
                Err(e) => return Err(e.into()),
            };
            similarity.push(entry);
        }
    }
    let mut body = lines.join("\n");
    body.push('\n');
    out.write("attributions.jsonl", body.as_bytes())?;
    if let Some(stats) = attribution_stats(&first, cfg.attribution.top_atoms) {
        out.write_json("attribution_stats.json", &stats)?;
        println!(
            "{} molecules: mean atom importance {:.6}, max {:.6}",
            stats.rows.len(),
            stats.pooled.mean,
            stats.pooled.max
        );
    }
    if !similarity.is_empty() {
        out.write_json("similarity.json", &similarity)?;
    }
    let strips: Vec<(String, Vec<f64>)> = first
        .iter()
        .zip(&ds.records)
        .map(|((_, r), rec)| (rec.smiles.chars().take(22).collect(), r.atom_importance.clone()))
        .collect();
    out.write("attributions.svg", attribution_strips(&strips).as_bytes())?;
    Ok(Outcome::ok(BTreeMap::new()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_keeps_order() {
        let items: Vec<u32> = (0..17).collect();
        assert_eq!(par_map(&items, 4, |x| x * 2), par_map(&items, 1, |x| x * 2));
    }

    #[test]
    fn contexts_parse_and_reject_bad_triples() {
        assert_eq!(parse_contexts("1,2,3;4,5,6").unwrap(), vec![(1, 2, 3), (4, 5, 6)]);
        assert!(matches!(parse_contexts("1,2"), Err(CliError::Usage(_))));
        assert!(matches!(parse_contexts("a,b,c"), Err(CliError::Usage(_))));
    }

    #[test]
    fn extend_map_appends_new_ids_only() {
        let mut map = ContextMap::default();
        map.program.insert(7, 1);
        let ds = synth_structured_shift(&SynthConfig::new(2, 10, 0.0, 1)).unwrap().0;
        extend_map(&mut map, &ds);
        assert_eq!(map.program[&7], 1);
        assert_eq!(map.program.len(), 3);
        let rows: Vec<usize> = map.program.values().copied().collect();
        let mut sorted = rows.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![1, 2, 3]);
    }
}
