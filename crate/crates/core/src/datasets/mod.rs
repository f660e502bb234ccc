//! Activity records: CSV ingestion with unit conversion and labeling, JSONL
//! interchange, and a synthetic generator with planted context-dependent
//! label rules.

mod synth;

pub use synth::{synth_structured_shift, SynthConfig, SynthMeta, SynthMotifs};

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::molgraph::{canonical_form_with, parse_smiles, CanonOptions, CanonicalForm, MolGraph, SmilesError};

pub const ACTIVE_THRESHOLD: f64 = 6.0;
pub const PIC50_MIN: f64 = 3.0;
pub const PIC50_MAX: f64 = 12.0;
pub const CSV_HEADER: [&str; 8] = [
    "smiles",
    "target_id",
    "assay_id",
    "round_id",
    "year",
    "activity_value",
    "activity_unit",
    "label",
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("activity value {0} must be positive")]
    NonPositive(f64),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("record {index}: {source}")]
    Smiles { index: usize, source: SmilesError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActivityUnit {
    #[serde(rename = "nM")]
    NanoMolar,
    #[serde(rename = "uM")]
    MicroMolar,
    #[serde(rename = "M")]
    Molar,
    #[serde(rename = "pIC50")]
    Pic50,
}

impl ActivityUnit {
    pub fn parse(s: &str) -> Option<ActivityUnit> {
        match s.trim() {
            "nM" => Some(ActivityUnit::NanoMolar),
            "uM" | "µM" | "μM" => Some(ActivityUnit::MicroMolar),
            "M" => Some(ActivityUnit::Molar),
            "pIC50" => Some(ActivityUnit::Pic50),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Active,
    Inactive,
}

impl Label {
    pub fn is_active(self) -> bool {
        self == Label::Active
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityRecord {
    pub smiles: String,
    pub canonical: CanonicalForm,
    pub target_id: u32,
    pub assay_id: u32,
    pub round_id: u32,
    pub year: Option<i32>,
    pub activity_value: f64,
    pub activity_unit: ActivityUnit,
    pub label: Option<Label>,
    pub pic50: Option<f64>,
}

impl ActivityRecord {
    pub fn is_active(&self) -> bool {
        self.label.map_or(false, Label::is_active)
    }

    pub fn graph(&self) -> Result<MolGraph, SmilesError> {
        parse_smiles(&self.smiles)
    }

    fn key(&self) -> (CanonicalForm, u32, u32, u32) {
        (self.canonical.clone(), self.target_id, self.assay_id, self.round_id)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub normalization: CanonOptions,
    pub threshold: f64,
    pub deduplicated: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    /// 1-based line number in the input file.
    pub line: usize,
    pub row: Vec<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<ActivityRecord>,
    pub provenance: Provenance,
    #[serde(skip)]
    pub rejects: Vec<Reject>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn target_ids(&self) -> Vec<u32> {
        self.records.iter().map(|r| r.target_id).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Records of one target, in input order.
    pub fn for_target(&self, target: u32) -> Dataset {
        self.filter(|r| r.target_id == target)
    }

    pub fn filter(&self, keep: impl Fn(&ActivityRecord) -> bool) -> Dataset {
        Dataset {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            provenance: self.provenance.clone(),
            rejects: Vec::new(),
        }
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            records: rows.iter().map(|&i| self.records[i].clone()).collect(),
            provenance: self.provenance.clone(),
            rejects: Vec::new(),
        }
    }

    pub fn labels(&self) -> Vec<bool> {
        self.records.iter().map(ActivityRecord::is_active).collect()
    }

    /// Parsed graphs for every record.
    pub fn graphs(&self) -> Result<Vec<MolGraph>, DatasetError> {
        self.records
            .iter()
            .enumerate()
            .map(|(index, r)| r.graph().map_err(|source| DatasetError::Smiles { index, source }))
            .collect()
    }

    /// pIC50 values z-scored within each target (regression targets only).
    pub fn standardized_pic50(&self) -> Vec<Option<f64>> {
        let mut by_target: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for r in &self.records {
            if let Some(p) = r.pic50 {
                by_target.entry(r.target_id).or_default().push(p);
            }
        }
        let stats: BTreeMap<u32, (f64, f64)> = by_target
            .into_iter()
            .map(|(t, v)| {
                let n = v.len() as f64;
                let m = v.iter().sum::<f64>() / n;
                let sd = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
                (t, (m, if sd > 0.0 { sd } else { 1.0 }))
            })
            .collect();
        self.records
            .iter()
            .map(|r| r.pic50.map(|p| (p - stats[&r.target_id].0) / stats[&r.target_id].1))
            .collect()
    }
}

/// Converts a potency to pIC50 = -log10(molar), clipped to [3, 12].
pub fn to_pic50(value: f64, unit: ActivityUnit) -> Result<f64, DatasetError> {
    let p = match unit {
        ActivityUnit::Pic50 => value,
        _ => {
            if !(value > 0.0) || !value.is_finite() {
                return Err(DatasetError::NonPositive(value));
            }
            let molar = match unit {
                ActivityUnit::NanoMolar => value * 1e-9,
                ActivityUnit::MicroMolar => value * 1e-6,
                _ => value,
            };
            -molar.log10()
        }
    };
    if !p.is_finite() {
        return Err(DatasetError::NonPositive(value));
    }
    Ok(p.clamp(PIC50_MIN, PIC50_MAX))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub threshold: f64,
    pub normalization: CanonOptions,
    pub deduplicate: bool,
    /// Where rejected rows are written; nothing is written when None.
    pub rejects_path: Option<PathBuf>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            threshold: ACTIVE_THRESHOLD,
            normalization: CanonOptions::default(),
            deduplicate: true,
            rejects_path: None,
        }
    }
}

fn parse_row(fields: &[String], config: &IngestConfig) -> Result<ActivityRecord, String> {
    let int = |i: usize, name: &str| -> Result<u32, String> {
        fields[i]
            .trim()
            .parse::<u32>()
            .map_err(|_| format!("{name} '{}' is not a non-negative integer", fields[i]))
    };
    let graph = parse_smiles(fields[0].trim()).map_err(|e| format!("SmilesError: {e}"))?;
    let canonical = canonical_form_with(&graph, config.normalization);
    let year = match fields[4].trim() {
        "" => None,
        y => Some(y.parse::<i32>().map_err(|_| format!("year '{y}' is not an integer"))?),
    };
    let value: f64 = fields[5]
        .trim()
        .parse()
        .map_err(|_| format!("activity_value '{}' is not a number", fields[5]))?;
    let unit = ActivityUnit::parse(&fields[6]).ok_or_else(|| format!("unknown activity_unit '{}'", fields[6]))?;
    let pic50 = to_pic50(value, unit).map_err(|e| e.to_string())?;
    let label = match fields[7].trim().to_ascii_lowercase().as_str() {
        "" => Some(if pic50 >= config.threshold { Label::Active } else { Label::Inactive }),
        "active" | "1" => Some(Label::Active),
        "inactive" | "0" => Some(Label::Inactive),
        other => return Err(format!("unknown label '{other}'")),
    };
    Ok(ActivityRecord {
        smiles: fields[0].trim().to_string(),
        canonical,
        target_id: int(1, "target_id")?,
        assay_id: int(2, "assay_id")?,
        round_id: int(3, "round_id")?,
        year,
        activity_value: value,
        activity_unit: unit,
        label,
        pic50: Some(pic50),
    })
}

/// Reads the strict eight-column CSV. Unparseable rows go to `rejects` (and
/// the rejects file when configured); duplicate keys keep the first row.
pub fn ingest_csv(path: &Path, config: &IngestConfig) -> Result<Dataset, DatasetError> {
    let file = std::fs::File::open(path)?;
    let mut ds = ingest_reader(file, config)?;
    ds.provenance.source = path.display().to_string();
    if let Some(rp) = &config.rejects_path {
        write_rejects(std::fs::File::create(rp)?, &ds.rejects)?;
    }
    Ok(ds)
}

pub fn ingest_reader<R: std::io::Read>(reader: R, config: &IngestConfig) -> Result<Dataset, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header != CSV_HEADER {
        let missing: Vec<&str> = CSV_HEADER.iter().copied().filter(|c| !header.iter().any(|h| h == c)).collect();
        return Err(DatasetError::Schema(if missing.is_empty() {
            format!("expected header {} but found {}", CSV_HEADER.join(","), header.join(","))
        } else {
            format!("missing column(s): {}", missing.join(","))
        }));
    }
    let mut ds = Dataset {
        provenance: Provenance {
            normalization: config.normalization,
            threshold: config.threshold,
            deduplicated: config.deduplicate,
            ..Provenance::default()
        },
        ..Dataset::default()
    };
    let mut seen: BTreeMap<(CanonicalForm, u32, u32, u32), usize> = BTreeMap::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row?;
        let fields: Vec<String> = row.iter().map(str::to_string).collect();
        if fields.len() != CSV_HEADER.len() {
            ds.rejects.push(Reject {
                line,
                row: fields.clone(),
                reason: format!("expected {} fields, found {}", CSV_HEADER.len(), fields.len()),
            });
            continue;
        }
        match parse_row(&fields, config) {
            Ok(rec) => {
                let key = rec.key();
                if let Some(&first) = seen.get(&key) {
                    if config.deduplicate {
                        ds.provenance
                            .warnings
                            .push(format!("line {line}: duplicate of line {first} ({}); kept first", rec.canonical));
                        continue;
                    }
                    ds.provenance
                        .warnings
                        .push(format!("line {line}: duplicate of line {first} ({}); kept both", rec.canonical));
                } else {
                    seen.insert(key, line);
                }
                ds.records.push(rec);
            }
            Err(reason) => ds.rejects.push(Reject { line, row: fields, reason }),
        }
    }
    if ds.records.is_empty() {
        ds.provenance.warnings.push("dataset is empty".into());
    }
    if !ds.rejects.is_empty() {
        ds.provenance.warnings.push(format!("{} row(s) rejected", ds.rejects.len()));
    }
    Ok(ds)
}

/// Rejected rows as CSV: line, original fields joined, reason.
pub fn write_rejects<W: Write>(w: W, rejects: &[Reject]) -> Result<(), DatasetError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["line", "row", "reason"])?;
    for r in rejects {
        out.write_record([r.line.to_string(), r.row.join(","), r.reason.clone()])?;
    }
    out.flush()?;
    Ok(())
}

/// Writes records in the input CSV schema.
pub fn write_csv<W: Write>(w: W, ds: &Dataset) -> Result<(), DatasetError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER)?;
    for r in &ds.records {
        let unit = match r.activity_unit {
            ActivityUnit::NanoMolar => "nM",
            ActivityUnit::MicroMolar => "uM",
            ActivityUnit::Molar => "M",
            ActivityUnit::Pic50 => "pIC50",
        };
        let label = match r.label {
            Some(Label::Active) => "active",
            Some(Label::Inactive) => "inactive",
            None => "",
        };
        out.write_record([
            r.smiles.clone(),
            r.target_id.to_string(),
            r.assay_id.to_string(),
            r.round_id.to_string(),
            r.year.map(|y| y.to_string()).unwrap_or_default(),
            format!("{}", r.activity_value),
            unit.to_string(),
            label.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// One JSON object per line: a provenance header line then records.
pub fn write_jsonl<W: Write>(mut w: W, ds: &Dataset) -> Result<(), DatasetError> {
    let json = |e| DatasetError::Json { line: 0, source: e };
    writeln!(w, "{}", serde_json::to_string(&ds.provenance).map_err(json)?)?;
    for r in &ds.records {
        writeln!(w, "{}", serde_json::to_string(r).map_err(json)?)?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Dataset, DatasetError> {
    let mut ds = Dataset::default();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |source| DatasetError::Json { line: i + 1, source };
        if i == 0 {
            ds.provenance = serde_json::from_str(&line).map_err(err)?;
        } else {
            ds.records.push(serde_json::from_str(&line).map_err(err)?);
        }
    }
    Ok(ds)
}
