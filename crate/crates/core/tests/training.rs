use nestdrug_core::datasets::{synth_structured_shift, Dataset, SynthConfig};
use nestdrug_core::evalkit::stratified_kfold;
use nestdrug_core::nestmodel::{ContextTuple, FusionVariant, ModelConfig, NestModel, TaskKind, TaskSpec};
use nestdrug_core::tensor::Tensor;
use nestdrug_core::training::{
    continual_update, evaluate, few_shot_adapt_l1, finetune, loss, pretrain, ContextLevels, ContextMap, PhaseConfig,
    Prepared, TrainError,
};

fn tiny(fusion: FusionVariant) -> ModelConfig {
    ModelConfig {
        hidden: 8,
        mp_layers: 2,
        l1_dim: 4,
        l2_dim: 3,
        l3_dim: 2,
        film_hidden: 8,
        head_hidden: vec![8, 4],
        hyper_rank: 2,
        fusion,
        tasks: vec![TaskSpec {
            id: "activity".into(),
            kind: TaskKind::Classification,
        }],
        ..ModelConfig::default()
    }
}

fn data(n_targets: usize, n: usize, s: f64, seed: u64) -> Dataset {
    synth_structured_shift(&SynthConfig::new(n_targets, n, s, seed)).unwrap().0
}

fn table(m: &NestModel, name: &str) -> Tensor {
    let id = m.params().id(name).unwrap();
    m.params().value(id).clone()
}

fn group_values(m: &NestModel, prefix: &str) -> Vec<(String, Tensor)> {
    let store = m.params();
    store
        .ids()
        .filter(|&id| {
            let g = &store.get(id).group;
            g == prefix || g.starts_with(&format!("{prefix}."))
        })
        .map(|id| (store.get(id).name.clone(), store.value(id).clone()))
        .collect()
}

fn quick(mut c: PhaseConfig, epochs: usize) -> PhaseConfig {
    c.epochs = epochs;
    c
}

#[test]
fn zero_rate_pretraining_leaves_parameters_unchanged() {
    let ds = data(2, 40, 0.5, 1);
    let mut m = NestModel::init(tiny(FusionVariant::None), 0).unwrap();
    let before = m.params().named_values();
    pretrain(&mut m, &ds, &quick(PhaseConfig::pretrain(0.0), 3)).unwrap();
    assert_eq!(before, m.params().named_values());
}

#[test]
fn pretraining_reduces_loss_on_separable_data() {
    for seed in 0..5 {
        let ds = data(1, 200, 0.0, seed);
        let mut m = NestModel::init(tiny(FusionVariant::None), seed).unwrap();
        let p = Prepared::new(&m, &ds, &ContextMap::default(), ContextLevels::NONE).unwrap();
        let labels: Vec<f64> = p.targets.clone();
        let initial = loss(&p.outputs(&m).unwrap(), &labels, None, TaskKind::Classification).unwrap();
        let mut cfg = quick(PhaseConfig::pretrain(3e-3), 8);
        cfg.seed = seed;
        cfg.clip_norm = None;
        let r = pretrain(&mut m, &ds, &cfg).unwrap();
        let after = loss(&p.outputs(&m).unwrap(), &labels, None, TaskKind::Classification).unwrap();
        assert!(after < initial, "seed {seed}: {initial} -> {after}");
        let sel = &r.epochs[r.selected_epoch - 1];
        let best = r.epochs.iter().filter_map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(sel.val_loss, Some(best));
    }
}

#[test]
fn training_is_deterministic() {
    let ds = data(2, 60, 0.8, 2);
    let map = ContextMap::from_dataset(&ds);
    let run = || {
        let mut m = NestModel::init(tiny(FusionVariant::Film), 3).unwrap();
        let r = finetune(&mut m, &ds, &map, &quick(PhaseConfig::finetune(), 3)).unwrap();
        (r.without_timing(), m.params().named_values())
    };
    assert_eq!(run(), run());
}

#[test]
fn group_rates_isolate_parameter_groups() {
    let ds = data(2, 40, 0.8, 3);
    let map = ContextMap::from_dataset(&ds);
    let base = NestModel::init(tiny(FusionVariant::Film), 4).unwrap();
    let mut m = base.clone();
    let cfg = quick(PhaseConfig::finetune().with_rate("backbone", 0.0).with_rate("context", 1e-2), 1);
    finetune(&mut m, &ds, &map, &cfg).unwrap();
    assert_eq!(group_values(&base, "backbone"), group_values(&m, "backbone"));
    assert_ne!(table(&base, "context.l1"), table(&m, "context.l1"));

    for group in ["backbone", "context", "film", "heads"] {
        let mut m = base.clone();
        finetune(&mut m, &ds, &map, &quick(PhaseConfig::finetune().with_rate(group, 0.0), 1)).unwrap();
        assert_eq!(group_values(&base, group), group_values(&m, group), "{group}");
    }
}

#[test]
fn early_stopping_triggers_on_flat_validation_metric() {
    let ds = data(2, 60, 0.8, 4);
    let map = ContextMap::from_dataset(&ds);
    let mut m = NestModel::init(tiny(FusionVariant::Film), 5).unwrap();
    let mut cfg = PhaseConfig::finetune();
    cfg.rates.values_mut().for_each(|r| *r = 0.0);
    cfg.epochs = 10;
    cfg.patience = 3;
    let r = finetune(&mut m, &ds, &map, &cfg).unwrap();
    assert!(r.early_stopped);
    assert_eq!(r.epochs.len(), 4);
    assert_eq!(r.selected_epoch, 1);
    assert_eq!(r.selection, "val_auc");
}

#[test]
fn errors_on_empty_data_and_bad_config() {
    let mut m = NestModel::init(tiny(FusionVariant::None), 0).unwrap();
    let empty = data(1, 10, 0.0, 0).filter(|_| false);
    assert!(matches!(
        pretrain(&mut m, &empty, &PhaseConfig::pretrain(1e-3)),
        Err(TrainError::EmptyDataset)
    ));
    let mut cfg = PhaseConfig::pretrain(1e-3);
    cfg.patience = 0;
    assert!(matches!(pretrain(&mut m, &data(1, 10, 0.0, 0), &cfg), Err(TrainError::Config(_))));
}

#[test]
fn correct_context_finetune_beats_generic_context_finetune() {
    let ds = data(4, 500, 0.8, 7);
    let plan = stratified_kfold(&ds.labels(), 5, 0).unwrap();
    let (tr, te) = plan.fold(0).unwrap();
    let (train, test) = (ds.subset(&tr), ds.subset(&te));
    let map = ContextMap::from_dataset(&ds);
    let mut cfg = ModelConfig::desk();
    cfg.tasks = tiny(FusionVariant::Film).tasks;
    let mut pre = NestModel::init(cfg.clone(), 0).unwrap();
    pretrain(&mut pre, &train, &quick(PhaseConfig::pretrain(3e-3), 10)).unwrap();
    let mean_auc = |levels: ContextLevels| {
        let mut m = NestModel::init(cfg.clone().with_fusion(FusionVariant::Film), 0).unwrap();
        m.load_matching_from(&pre).unwrap();
        let ft = PhaseConfig {
            levels,
            ..quick(PhaseConfig::finetune(), 10)
        };
        finetune(&mut m, &train, &map, &ft).unwrap();
        let ev = evaluate(&m, &test, &map, levels).unwrap();
        ev.iter().map(|t| t.metrics.roc_auc.unwrap()).sum::<f64>() / ev.len() as f64
    };
    let correct = mean_auc(ContextLevels::ALL);
    let generic = mean_auc(ContextLevels::ALL.without_l1());
    assert!(correct - generic >= 0.05, "correct {correct} generic {generic}");
}

#[test]
fn continual_updates_respect_rates_and_replay() {
    let ds = data(2, 60, 0.8, 8);
    let map = ContextMap::from_dataset(&ds);
    let rounds: Vec<Dataset> = (1..=3).map(|r| ds.filter(|x| x.round_id == r)).collect();
    let base = NestModel::init(tiny(FusionVariant::Film), 9).unwrap();

    let mut frozen = PhaseConfig::continual();
    frozen.rates.values_mut().for_each(|r| *r = 0.0);
    let mut m = base.clone();
    continual_update(&mut m, &rounds, &map, &frozen).unwrap();
    assert_eq!(base.params().named_values(), m.params().named_values());

    let mut l3_only = frozen.clone();
    l3_only.rates.insert("context.l3".into(), 1e-2);
    let mut m = base.clone();
    let reports = continual_update(&mut m, &rounds, &map, &l3_only).unwrap();
    assert_eq!(reports.len(), 3);
    let changed: Vec<String> = base
        .params()
        .named_values()
        .into_iter()
        .zip(m.params().named_values())
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0)
        .collect();
    assert_eq!(changed, vec!["context.l3".to_string()]);

    let run = || {
        let mut m = base.clone();
        continual_update(&mut m, &rounds, &map, &PhaseConfig::continual()).unwrap();
        m.params().named_values()
    };
    assert_eq!(run(), run());
}

#[test]
fn few_shot_adaptation_contract() {
    let ds = data(2, 80, 0.8, 10);
    let support = ds.for_target(1);
    let query = support.subset(&(50..support.len()).collect::<Vec<_>>());
    let mut m = NestModel::init(tiny(FusionVariant::Film), 11).unwrap();
    let mut warm = quick(PhaseConfig::finetune().with_rate("film", 1e-2), 2);
    warm.batch_size = 8;
    finetune(&mut m, &ds, &ContextMap::from_dataset(&ds), &warm).unwrap();
    let row = m.config().l1_capacity - 1;

    let (_, r0) = few_shot_adapt_l1(&m, &support, &query, "activity", 10, 0, 1e-2, row).unwrap();
    assert!(r0.embedding.iter().all(|&v| v == 0.0));
    assert_eq!(r0.adapted_auc, r0.zero_shot_auc);
    assert_eq!(r0.delta(), Some(0.0));

    let (adapted, r) = few_shot_adapt_l1(&m, &support, &query, "activity", 25, 20, 1e-2, row).unwrap();
    assert!(r.embedding.iter().map(|v| v * v).sum::<f64>() > 0.0);
    let changed: Vec<String> = m
        .params()
        .named_values()
        .into_iter()
        .zip(adapted.params().named_values())
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0)
        .collect();
    assert_eq!(changed, vec!["context.l1".to_string()]);
    let before = table(&m, "context.l1");
    let after = table(&adapted, "context.l1");
    for i in 0..row {
        assert_eq!(before.row_slice(i), after.row_slice(i));
    }

    assert!(matches!(
        few_shot_adapt_l1(&m, &support.subset(&[0, 1]), &query, "activity", 10, 5, 1e-2, row),
        Err(TrainError::InsufficientSupport(_))
    ));
}

#[test]
fn l1_update_makes_film_context_sensitive() {
    let ds = data(2, 40, 0.8, 12);
    let map = ContextMap::from_dataset(&ds);
    let mut m = NestModel::init(tiny(FusionVariant::Film), 13).unwrap();
    let before = table(&m, "context.l1");
    let mut cfg = quick(PhaseConfig::finetune(), 1);
    cfg.batch_size = 8;
    finetune(&mut m, &ds, &map, &cfg).unwrap();
    assert_ne!(before, table(&m, "context.l1"));
    let graphs = ds.graphs().unwrap();
    let differs = graphs.iter().any(|g| {
        let a = m.predict(g, ContextTuple::new(1, 0, 0), "activity").unwrap();
        let b = m.predict(g, ContextTuple::generic(), "activity").unwrap();
        a != b
    });
    assert!(differs);
}
