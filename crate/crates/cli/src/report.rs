//! Aggregates result CSVs found in a results directory into summary tables
//! and charts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::charts::{bar_chart, line_chart};
use crate::error::{internal, CliError, CliResult};
use crate::manifest::OutputDir;
use crate::Outcome;

const KNOWN: [&str; 5] = ["ablation.csv", "fusion.csv", "fewshot.csv", "metrics.csv", "rounds.csv"];

type Record = BTreeMap<String, String>;

/// Known result files directly in `dir` or one level below, sorted by path.
fn find_sources(dir: &Path) -> CliResult<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(CliError::Data(format!("{} is not a directory", dir.display())));
    }
    let mut dirs = vec![dir.to_path_buf()];
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    dirs.extend(subdirs);
    let mut out = Vec::new();
    for d in dirs {
        for name in KNOWN {
            let p = d.join(name);
            if p.is_file() {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn read_records(path: &Path) -> CliResult<Vec<Record>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(headers.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        })
        .collect()
}

fn num(r: &Record, key: &str) -> Option<f64> {
    r.get(key).and_then(|v| v.trim().parse::<f64>().ok()).filter(|v| v.is_finite())
}

/// Running means keyed by group.
#[derive(Default)]
struct Means<K: Ord> {
    sums: BTreeMap<K, Vec<(f64, usize)>>,
}

impl<K: Ord + Clone> Means<K> {
    fn add(&mut self, key: K, values: &[Option<f64>]) {
        let e = self.sums.entry(key).or_insert_with(|| vec![(0.0, 0); values.len()]);
        for (slot, v) in e.iter_mut().zip(values) {
            if let Some(v) = v {
                slot.0 += v;
                slot.1 += 1;
            }
        }
    }

    fn rows(&self) -> Vec<(K, Vec<Option<f64>>, usize)> {
        self.sums
            .iter()
            .map(|(k, v)| {
                let n = v.iter().map(|s| s.1).max().unwrap_or(0);
                (k.clone(), v.iter().map(|&(s, c)| if c > 0 { Some(s / c as f64) } else { None }).collect(), n)
            })
            .collect()
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

#[derive(Serialize)]
struct TableRow {
    key: Vec<String>,
    n: usize,
    values: BTreeMap<String, Option<f64>>,
}

#[derive(Serialize, Default)]
struct Summary {
    sources: Vec<String>,
    tables: BTreeMap<String, Vec<TableRow>>,
    charts: Vec<String>,
    warnings: Vec<String>,
}

struct Table {
    name: &'static str,
    key_names: Vec<&'static str>,
    value_names: Vec<&'static str>,
    rows: Vec<(Vec<String>, Vec<Option<f64>>, usize)>,
}

impl Table {
    fn csv(&self) -> CliResult<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<&str> = self.key_names.clone();
        header.push("n");
        header.extend(&self.value_names);
        w.write_record(&header)?;
        for (k, v, n) in &self.rows {
            let mut rec = k.clone();
            rec.push(n.to_string());
            rec.extend(v.iter().map(|x| fmt(*x)));
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(internal)
    }

    fn summary_rows(&self) -> Vec<TableRow> {
        self.rows
            .iter()
            .map(|(k, v, n)| TableRow {
                key: k.clone(),
                n: *n,
                values: self.value_names.iter().map(|s| s.to_string()).zip(v.iter().copied()).collect(),
            })
            .collect()
    }
}

fn group(
    records: &[Record],
    name: &'static str,
    keys: &[&'static str],
    values: &[&'static str],
    key_sort_numeric: bool,
) -> Table {
    let mut m: Means<Vec<(i64, String)>> = Means::default();
    for r in records {
        let key: Vec<(i64, String)> = keys
            .iter()
            .map(|k| {
                let s = r.get(*k).cloned().unwrap_or_default();
                let n = if key_sort_numeric { s.parse::<i64>().unwrap_or(i64::MAX) } else { 0 };
                (n, s)
            })
            .collect();
        let vals: Vec<Option<f64>> = values.iter().map(|v| num(r, v)).collect();
        m.add(key, &vals);
    }
    Table {
        name,
        key_names: keys.to_vec(),
        value_names: values.to_vec(),
        rows: m
            .rows()
            .into_iter()
            .map(|(k, v, n)| (k.into_iter().map(|(_, s)| s).collect(), v, n))
            .collect(),
    }
}

pub(crate) fn run(results: &Path, out: &mut OutputDir) -> CliResult<Outcome> {
    let sources = find_sources(results)?;
    let mut summary = Summary::default();
    let mut by_kind: BTreeMap<&'static str, Vec<Record>> = BTreeMap::new();
    let mut rounds: Vec<(String, Vec<Record>)> = Vec::new();
    for p in &sources {
        let rel = p.strip_prefix(results).unwrap_or(p).display().to_string();
        let kind = KNOWN
            .iter()
            .find(|k| p.file_name().map_or(false, |n| n == **k))
            .copied()
            .expect("only known names are collected");
        match read_records(p) {
            Ok(recs) if kind == "rounds.csv" => rounds.push((rel.clone(), recs)),
            Ok(recs) => by_kind.entry(kind).or_default().extend(recs),
            Err(e) => summary.warnings.push(format!("{rel}: {e}")),
        }
        summary.sources.push(rel);
    }
    if sources.is_empty() {
        summary.warnings.push(format!("no result CSVs found in {}", results.display()));
    }

    let mut tables = Vec::new();
    if let Some(r) = by_kind.get("ablation.csv") {
        tables.push(group(r, "ablation", &["level", "target"], &["correct_auc", "generic_auc", "delta"], false));
    }
    if let Some(r) = by_kind.get("fusion.csv") {
        tables.push(group(r, "fusion", &["variant"], &["roc_auc"], false));
    }
    if let Some(r) = by_kind.get("fewshot.csv") {
        tables.push(group(r, "fewshot", &["shots"], &["zero_shot_auc", "adapted_auc", "delta"], true));
    }
    if let Some(r) = by_kind.get("metrics.csv") {
        tables.push(group(r, "metrics", &["variant"], &["roc_auc", "pr_auc", "ef_at_1pct"], false));
    }

    for t in &tables {
        out.write(&format!("{}_table.csv", t.name), &t.csv()?)?;
        let chart = match t.name {
            "fewshot" => {
                let xs: Vec<f64> = t.rows.iter().map(|(k, _, _)| k[0].parse::<f64>().unwrap_or(f64::NAN)).collect();
                let series = vec![
                    ("zero-shot".to_string(), t.rows.iter().map(|(_, v, _)| v[0].unwrap_or(f64::NAN)).collect()),
                    ("adapted".to_string(), t.rows.iter().map(|(_, v, _)| v[1].unwrap_or(f64::NAN)).collect()),
                ];
                line_chart("Few-shot adaptation", "ROC-AUC", &xs, &series)
            }
            name => {
                let (title, y, col) = match name {
                    "ablation" => ("Correct minus generic context", "delta ROC-AUC", 2),
                    "fusion" => ("Fusion variants", "mean ROC-AUC", 0),
                    _ => ("Evaluation variants", "mean ROC-AUC", 0),
                };
                let labels: Vec<String> = t.rows.iter().map(|(k, _, _)| k.join(" ")).collect();
                let values: Vec<f64> = t.rows.iter().map(|(_, v, _)| v[col].unwrap_or(f64::NAN)).collect();
                bar_chart(title, y, &labels, &values)
            }
        };
        let file = format!("{}.svg", t.name);
        out.write(&file, chart.as_bytes())?;
        summary.charts.push(file);
        summary.tables.insert(t.name.to_string(), t.summary_rows());
    }

    if !rounds.is_empty() {
        let max_rounds = rounds.iter().map(|(_, r)| r.len()).max().unwrap_or(0);
        let xs: Vec<f64> = (1..=max_rounds).map(|r| r as f64).collect();
        let series: Vec<(String, Vec<f64>)> = rounds
            .iter()
            .map(|(name, recs)| {
                let mut ys: Vec<f64> = recs.iter().map(|r| num(r, "cumulative_hit_rate").unwrap_or(f64::NAN)).collect();
                ys.resize(max_rounds, f64::NAN);
                (name.clone(), ys)
            })
            .collect();
        out.write("campaign.svg", line_chart("Campaign replay", "cumulative hit rate", &xs, &series).as_bytes())?;
        summary.charts.push("campaign.svg".into());
    }

    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    out.write_json("summary.json", &summary)?;
    println!("{} sources, {} tables, {} charts", summary.sources.len(), summary.tables.len(), summary.charts.len());
    Ok(Outcome::ok(BTreeMap::new()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn means_skip_missing_values() {
        let mut m: Means<u8> = Means::default();
        m.add(1, &[Some(1.0), None]);
        m.add(1, &[Some(3.0), Some(4.0)]);
        let rows = m.rows();
        assert_eq!(rows[0].1, vec![Some(2.0), Some(4.0)]);
        assert_eq!(rows[0].2, 2);
    }

    #[test]
    fn numeric_keys_sort_by_value() {
        let recs: Vec<Record> = ["50", "10", "25"]
            .iter()
            .map(|s| Record::from([("shots".to_string(), s.to_string()), ("delta".to_string(), "0.1".to_string())]))
            .collect();
        let t = group(&recs, "fewshot", &["shots"], &["delta"], true);
        let keys: Vec<&str> = t.rows.iter().map(|(k, _, _)| k[0].as_str()).collect();
        assert_eq!(keys, vec!["10", "25", "50"]);
    }
}
