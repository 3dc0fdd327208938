//! On-disk cohort layout.
//!
//! ```text
//! DIR/manifest.csv      patient_id,patch_file,time,event
//! DIR/expression.csv    patient_id,<gene 1>,<gene 2>,...
//! DIR/patches/<id>.txt  first line `d m`, then m rows of d space-separated reals
//! ```
//!
//! `patch_file` is relative to `DIR`; an empty field, or a patient absent
//! from the expression table, marks that modality as missing. `event` is
//! `1` for an observed event and `0` for censoring. Manifest order is the
//! patient order of the loaded [`Dataset`].

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use survfuse_core::cv::{Dataset, PatientData};
use survfuse_core::encoders::PatchFeatureSet;
use survfuse_core::head::SurvivalRecord;

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.csv";
pub const EXPRESSION: &str = "expression.csv";
pub const PATCH_DIR: &str = "patches";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    patient_id: String,
    patch_file: String,
    time: f64,
    event: u8,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

fn parse_f64(path: &Path, line: u64, field: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|e| Error::format(path, format!("line {line}: cannot parse {field:?} as a number: {e}")))
}

pub fn read_patch_file(path: &Path, patient_id: &str) -> Result<PatchFeatureSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, head) = lines.next().ok_or_else(|| Error::format(path, "empty patch file"))?;
    let dims: Vec<usize> = head
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(path, format!("line 1: expected `d m`, found {head:?}")))?;
    let [d, m] = dims[..] else {
        return Err(Error::format(path, format!("line 1: expected `d m`, found {head:?}")));
    };
    let mut rows = Vec::with_capacity(m);
    for (i, line) in lines {
        let line_no = i as u64 + 1;
        let row = line
            .split_whitespace()
            .map(|f| parse_f64(path, line_no, f))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != d {
            return Err(Error::format(path, format!("line {line_no}: {} values, expected {d}", row.len())));
        }
        rows.push(row);
    }
    if rows.len() != m {
        return Err(Error::format(path, format!("{} patch rows, header declares {m}", rows.len())));
    }
    PatchFeatureSet::new(patient_id, rows).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_patch_file(path: &Path, patches: &PatchFeatureSet) -> Result<()> {
    let d = patches.patches.first().map_or(0, Vec::len);
    let mut out = format!("{d} {}\n", patches.patches.len());
    for row in &patches.patches {
        let fields: Vec<String> = row.iter().map(f64::to_string).collect();
        out.push_str(&fields.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Gene names and per-patient rows of the expression table.
pub fn read_expression(path: &Path) -> Result<(Vec<String>, HashMap<String, Vec<f64>>)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.len() < 2 || header.get(0) != Some("patient_id") {
        return Err(Error::format(path, "header must be patient_id followed by gene names"));
    }
    let genes: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let mut rows = HashMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = i as u64 + 2;
        let id = rec.get(0).unwrap_or_default().to_owned();
        let values = rec.iter().skip(1).map(|f| parse_f64(path, line, f)).collect::<Result<Vec<_>>>()?;
        if rows.insert(id.clone(), values).is_some() {
            return Err(Error::format(path, format!("line {line}: duplicate patient {id}")));
        }
    }
    Ok((genes, rows))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST);
    let expression_path = dir.join(EXPRESSION);
    let (gene_names, mut expression) = read_expression(&expression_path)?;

    let mut reader = csv::Reader::from_path(&manifest_path).map_err(|e| csv_error(&manifest_path, e))?;
    let mut patients = Vec::new();
    let mut seen = HashMap::new();
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(|e| csv_error(&manifest_path, e))?;
        let line = i + 2;
        if seen.insert(row.patient_id.clone(), line).is_some() {
            return Err(Error::format(&manifest_path, format!("line {line}: duplicate patient {}", row.patient_id)));
        }
        let event = match row.event {
            0 => false,
            1 => true,
            other => {
                return Err(Error::format(&manifest_path, format!("line {line}: event must be 0 or 1, got {other}")));
            }
        };
        let record = SurvivalRecord::new(row.patient_id.clone(), row.time, event)
            .map_err(|e| Error::format(&manifest_path, format!("line {line}: {e}")))?;
        let patches = if row.patch_file.trim().is_empty() {
            None
        } else {
            Some(read_patch_file(&dir.join(row.patch_file.trim()), &row.patient_id)?)
        };
        patients.push(PatientData {
            record,
            patches,
            expression: expression.remove(&row.patient_id),
        });
    }
    Ok(Dataset { gene_names, patients })
}

fn patch_file_name(patient_id: &str) -> PathBuf {
    Path::new(PATCH_DIR).join(format!("{patient_id}.txt"))
}

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir.join(PATCH_DIR)).map_err(|e| Error::io(dir, e))?;

    let manifest_path = dir.join(MANIFEST);
    let mut manifest = csv::Writer::from_path(&manifest_path).map_err(|e| csv_error(&manifest_path, e))?;
    for p in &dataset.patients {
        let patch_file = match &p.patches {
            Some(set) => {
                let rel = patch_file_name(p.id());
                write_patch_file(&dir.join(&rel), set)?;
                rel.to_string_lossy().replace('\\', "/")
            }
            None => String::new(),
        };
        manifest
            .serialize(ManifestRow {
                patient_id: p.id().to_owned(),
                patch_file,
                time: p.record.time,
                event: u8::from(p.record.event),
            })
            .map_err(|e| csv_error(&manifest_path, e))?;
    }
    manifest.flush().map_err(|e| Error::io(&manifest_path, e))?;

    let expression_path = dir.join(EXPRESSION);
    let mut expr = csv::Writer::from_path(&expression_path).map_err(|e| csv_error(&expression_path, e))?;
    expr.write_record(std::iter::once("patient_id").chain(dataset.gene_names.iter().map(String::as_str)))
        .map_err(|e| csv_error(&expression_path, e))?;
    for p in &dataset.patients {
        if let Some(values) = &p.expression {
            expr.write_record(std::iter::once(p.id().to_owned()).chain(values.iter().map(|v| v.to_string())))
                .map_err(|e| csv_error(&expression_path, e))?;
        }
    }
    expr.flush().map_err(|e| Error::io(&expression_path, e))
}
