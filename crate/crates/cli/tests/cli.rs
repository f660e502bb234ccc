use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nestdrug_cli::manifest::read_manifest;

const SMALL: [&str; 8] = [
    "--set",
    "synth.targets=2",
    "--set",
    "synth.per_target=40",
    "--set",
    "protocol.pretrain.epochs=2",
    "--set",
    "protocol.finetune.epochs=2",
];

fn nestdrug(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nestdrug"))
        .args(args)
        .env("NESTDRUG_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn with_small<'a>(mut args: Vec<&'a str>) -> Vec<&'a str> {
    args.extend(SMALL);
    args
}

fn synth(dir: &Path) -> PathBuf {
    let out = dir.join("synth");
    let o = nestdrug(&with_small(vec!["synth", "--out", p(&out)]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn selftest_passes() {
    let o = nestdrug(&["selftest"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{text}");
    assert!(!text.contains("FAIL"));
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("x");
    assert_eq!(code(&nestdrug(&["frobnicate"])), 64);
    assert_eq!(code(&nestdrug(&["--help"])), 0);
    assert_eq!(code(&nestdrug(&["synth", "--out", p(&out), "--set", "nonsense=1"])), 64);
    assert_eq!(code(&nestdrug(&["fp", "--data", "/nonexistent/data.jsonl", "--out", p(&out)])), 65);
    let bad = d.path().join("bad.jsonl");
    std::fs::write(&bad, "{not json}\n").unwrap();
    assert_eq!(code(&nestdrug(&["fp", "--data", p(&bad), "--out", p(&out)])), 65);
}

#[test]
fn audit_of_identical_sets_reports_full_leakage_and_gates() {
    let d = tempfile::tempdir().unwrap();
    let s = synth(d.path());
    let data = s.join("dataset.jsonl");
    let out = d.path().join("audit");
    let o = nestdrug(&["audit", "--train", p(&data), "--eval", p(&data), "--out", p(&out), "--set", "nbits=512"]);
    assert_eq!(code(&o), 64, "unknown key is rejected before running");
    let o = nestdrug(&["audit", "--train", p(&data), "--eval", p(&data), "--out", p(&out), "--set", "audit.nbits=512"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("audit.json")).unwrap()).unwrap();
    for row in report["rows"].as_array().unwrap() {
        assert_eq!(row["active_leakage_pct"], 100.0);
    }
    let m = read_manifest(&out).unwrap();
    assert_eq!(m.exit_code, 2);
    assert_eq!(m.inputs.len(), 1, "same file listed once");
}

#[test]
fn ingest_round_trips_the_synthetic_csv() {
    let d = tempfile::tempdir().unwrap();
    let s = synth(d.path());
    let out = d.path().join("ingest");
    let o = nestdrug(&["ingest", "--input", p(&s.join("dataset.csv")), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("ingest_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["records"], 80);
    assert_eq!(summary["rejects"], 0);
    for cmd in ["featurize", "fp"] {
        let o = nestdrug(&[cmd, "--data", p(&out.join("dataset.jsonl")), "--out", p(&d.path().join(cmd))]);
        assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let fps = std::fs::read_to_string(d.path().join("fp").join("fingerprints.tsv")).unwrap();
    assert_eq!(fps.lines().count(), 80);
}

#[test]
fn ablate_emits_one_row_per_target_with_delta() {
    let d = tempfile::tempdir().unwrap();
    let s = synth(d.path());
    let out = d.path().join("ablate");
    let o = nestdrug(&with_small(vec!["ablate", "--data", p(&s.join("dataset.jsonl")), "--levels", "l1", "--out", p(&out)]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert!(header.contains(&"delta"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    let di = header.iter().position(|h| *h == "delta").unwrap();
    let ci = header.iter().position(|h| *h == "correct_auc").unwrap();
    let gi = header.iter().position(|h| *h == "generic_auc").unwrap();
    for r in &rows {
        let (c, g, dl): (f64, f64, f64) = (r[ci].parse().unwrap(), r[gi].parse().unwrap(), r[di].parse().unwrap());
        assert!((c - g - dl).abs() < 2e-6);
    }
    let o = nestdrug(&["ablate", "--data", p(&s.join("dataset.jsonl")), "--levels", "l9", "--out", p(&out)]);
    assert_eq!(code(&o), 64);
}

#[test]
fn report_on_empty_directory_warns_and_succeeds() {
    let d = tempfile::tempdir().unwrap();
    let empty = d.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = d.path().join("report");
    let o = nestdrug(&["report", "--results", p(&empty), "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["warnings"].as_array().unwrap().len(), 1);
    assert!(s["tables"].as_object().unwrap().is_empty());
}

fn assert_same_outputs(a: &Path, b: &Path) {
    let ma = read_manifest(a).unwrap();
    let mb = read_manifest(b).unwrap();
    assert_eq!(ma.outputs, mb.outputs);
    assert!(!ma.outputs.is_empty());
    for name in ma.outputs.keys() {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
}

fn rerun(dir: &Path, into: &Path) {
    let o = nestdrug(&["rerun", "--manifest", p(dir), "--out", p(into)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_same_outputs(dir, into);
}

#[test]
fn train_eval_attribute_report_rerun_byte_identically() {
    let d = tempfile::tempdir().unwrap();
    let s = synth(d.path());
    let data = s.join("dataset.jsonl");
    let pre = d.path().join("pre");
    let o = nestdrug(&with_small(vec!["train", "--phase", "pretrain", "--data", p(&data), "--out", p(&pre)]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ft = d.path().join("ft");
    let o = nestdrug(&with_small(vec!["train", "--phase", "finetune", "--init", p(&pre), "--data", p(&data), "--out", p(&ft)]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ev = d.path().join("eval");
    assert_eq!(code(&nestdrug(&["eval", "--model", p(&ft), "--data", p(&data), "--out", p(&ev)])), 0);
    let at = d.path().join("attr");
    let o = nestdrug(&[
        "attribute", "--model", p(&ft), "--data", p(&data), "--contexts", "0,0,1;1,0,1", "--out", p(&at), "--set",
        "attribution.max_molecules=3", "--set", "attribution.steps=16",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let fs = d.path().join("fewshot");
    let o = nestdrug(&["fewshot", "--model", p(&ft), "--data", p(&data), "--target", "1", "--out", p(&fs), "--set", "fewshot.shots=[5,10]", "--set", "fewshot.steps=3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rp = d.path().join("replay");
    let o = nestdrug(&["replay", "--data", p(&data), "--model", p(&ft), "--out", p(&rp), "--set", "campaign.scorer=model", "--set", "campaign.rounds=2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rep = d.path().join("report");
    assert_eq!(code(&nestdrug(&["report", "--results", p(d.path()), "--out", p(&rep)])), 0);
    let summary = std::fs::read_to_string(rep.join("summary.json")).unwrap();
    assert!(summary.contains("fewshot") && summary.contains("metrics"));
    assert!(rep.join("campaign.svg").is_file());

    let again = tempfile::tempdir().unwrap();
    for (i, dir) in [&s, &pre, &ft, &ev, &at, &fs, &rp, &rep].iter().enumerate() {
        rerun(dir, &again.path().join(i.to_string()));
    }

    std::fs::write(d.path().join("metrics.csv"), "variant,roc_auc\nx,0.5\n").unwrap();
    let o = nestdrug(&["rerun", "--manifest", p(&rep), "--out", p(&again.path().join("grown"))]);
    assert_eq!(code(&o), 65, "new file in a results directory is detected");
    std::fs::write(&data, "").unwrap();
    let o = nestdrug(&["rerun", "--manifest", p(&ev), "--out", p(&d.path().join("stale"))]);
    assert_eq!(code(&o), 65);
}

#[test]
fn continual_training_requires_init_and_updates_rounds() {
    let d = tempfile::tempdir().unwrap();
    let s = synth(d.path());
    let data = s.join("dataset.jsonl");
    let out = d.path().join("c");
    assert_eq!(code(&nestdrug(&["train", "--phase", "continual", "--data", p(&data), "--out", p(&out)])), 64);
    let pre = d.path().join("pre");
    assert_eq!(code(&nestdrug(&with_small(vec!["train", "--phase", "pretrain", "--data", p(&data), "--out", p(&pre)]))), 0);
    let o = nestdrug(&["train", "--phase", "continual", "--init", p(&pre), "--data", p(&data), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let reports: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("train_report.json")).unwrap()).unwrap();
    assert!(reports.as_array().unwrap().len() >= 2);
}
