//! CSV ingestion driven by a per-dataset schema file, and the canonical task
//! bundle layout (`{task}/support.csv`, `query.csv`, `meta.json`).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use femloc_core::data::{FingerprintDataset, GroupLabel, LocalizationTask};
use femloc_core::preprocess::PreprocessReport;
use femloc_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

/// Column conventions of one CSV dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    /// Every column whose name starts with this prefix is an AP column.
    #[serde(default)]
    pub ap_prefix: Option<String>,
    /// Explicit AP columns; takes precedence over `ap_prefix`.
    #[serde(default)]
    pub ap_columns: Option<Vec<String>>,
    pub coord_columns: Vec<String>,
    /// Value that marks a missing reading.
    #[serde(default = "default_sentinel")]
    pub sentinel: f64,
    #[serde(default)]
    pub building_col: Option<String>,
    #[serde(default)]
    pub floor_col: Option<String>,
}

fn default_sentinel() -> f64 {
    100.0
}

impl CsvSchema {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        toml::from_str(&text).map_err(|e| AppError::format(path, e))
    }

    fn validate(&self, path: &Path) -> Result<()> {
        if self.ap_prefix.is_none() && self.ap_columns.is_none() {
            return Err(AppError::Config(format!("{}: schema needs ap_prefix or ap_columns", path.display())));
        }
        if self.coord_columns.is_empty() {
            return Err(AppError::Config(format!("{}: schema needs coord_columns", path.display())));
        }
        if self.building_col.is_some() != self.floor_col.is_some() {
            return Err(AppError::Config(format!(
                "{}: building_col and floor_col must be given together",
                path.display()
            )));
        }
        Ok(())
    }
}

fn column(header: &HashMap<&str, usize>, name: &str, path: &Path) -> Result<usize> {
    header
        .get(name)
        .copied()
        .ok_or_else(|| AppError::Parse { path: path.to_path_buf(), line: 1, message: format!("missing column {name:?}") })
}

fn parse_field(raw: &str, path: &Path, line: u64, name: &str) -> Result<f64> {
    raw.trim().parse::<f64>().map_err(|_| AppError::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("column {name:?}: cannot parse {raw:?} as a number"),
    })
}

fn parse_label(raw: &str, path: &Path, line: u64, name: &str) -> Result<i64> {
    let v = parse_field(raw, path, line, name)?;
    if v.fract() != 0.0 {
        return Err(AppError::Parse { path: path.to_path_buf(), line, message: format!("column {name:?}: {raw:?} is not an integer") });
    }
    Ok(v as i64)
}

/// Reads a fingerprint CSV. Sentinels are kept as-is; imputation happens
/// during preprocessing.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<FingerprintDataset> {
    schema.validate(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();

    let ap_names: Vec<String> = match (&schema.ap_columns, &schema.ap_prefix) {
        (Some(cols), _) => cols.clone(),
        (None, Some(prefix)) => headers.iter().map(str::trim).filter(|h| h.starts_with(prefix.as_str())).map(String::from).collect(),
        (None, None) => unreachable!("validated above"),
    };
    if ap_names.is_empty() {
        return Err(AppError::Parse { path: path.to_path_buf(), line: 1, message: "no AP columns found".into() });
    }
    let ap_idx = ap_names.iter().map(|n| column(&index, n, path)).collect::<Result<Vec<_>>>()?;
    let coord_idx = schema.coord_columns.iter().map(|n| column(&index, n, path)).collect::<Result<Vec<_>>>()?;
    let group_idx = match (&schema.building_col, &schema.floor_col) {
        (Some(b), Some(f)) => Some((column(&index, b, path)?, column(&index, f, path)?)),
        _ => None,
    };

    let mut rssi = Vec::new();
    let mut coords = Vec::new();
    let mut groups = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("");
        for (&i, name) in ap_idx.iter().zip(&ap_names) {
            rssi.push(parse_field(field(i), path, line, name)?);
        }
        for (&i, name) in coord_idx.iter().zip(&schema.coord_columns) {
            coords.push(parse_field(field(i), path, line, name)?);
        }
        if let (Some((b, f)), Some(bn), Some(fl)) = (group_idx, &schema.building_col, &schema.floor_col) {
            groups.push(GroupLabel { building: parse_label(field(b), path, line, bn)?, floor: parse_label(field(f), path, line, fl)? });
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(AppError::Core(femloc_core::Error::EmptyDataset));
    }
    let rssi = Matrix::from_vec(rows, ap_names.len(), rssi)?;
    let coords = Matrix::from_vec(rows, coord_idx.len(), coords)?;
    Ok(FingerprintDataset::new(rssi, coords, group_idx.map(|_| groups), ap_names)?)
}

fn csv_error(path: &Path, e: csv::Error) -> AppError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => AppError::io(path, io),
        other => AppError::Parse { path: path.to_path_buf(), line, message: format!("{other:?}") },
    }
}

/// Writes RSSI columns followed by coordinate columns. Floats use the
/// shortest representation that parses back to the same bits.
pub fn write_dataset_csv(path: &Path, ds: &FingerprintDataset, coord_names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let header: Vec<&str> = ds.ap_names().iter().chain(coord_names).map(String::as_str).collect();
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for r in 0..ds.len() {
        let row: Vec<String> = ds.rssi().row(r).iter().chain(ds.coords().row(r)).map(|v| v.to_string()).collect();
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

/// Metadata stored next to a task's support and query files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub id: String,
    pub ap_names: Vec<String>,
    pub coord_names: Vec<String>,
    pub support_rows: usize,
    pub query_rows: usize,
    pub source: String,
    pub preprocessing: Option<PreprocessReport>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| AppError::format(path, e))?;
    fs::write(path, text + "\n").map_err(|e| AppError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| AppError::format(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| AppError::io(path, e))
}

/// Writes `{root}/{task}/{support.csv, query.csv, meta.json}`.
pub fn write_task_bundle(root: &Path, task: &LocalizationTask, meta: &TaskMeta) -> Result<PathBuf> {
    let dir = root.join(&task.id);
    create_dir(&dir)?;
    write_dataset_csv(&dir.join("support.csv"), &task.support, &meta.coord_names)?;
    write_dataset_csv(&dir.join("query.csv"), &task.query, &meta.coord_names)?;
    write_json(&dir.join("meta.json"), meta)?;
    Ok(dir)
}

fn bundle_schema(meta: &TaskMeta) -> CsvSchema {
    CsvSchema {
        ap_prefix: None,
        ap_columns: Some(meta.ap_names.clone()),
        coord_columns: meta.coord_names.clone(),
        sentinel: default_sentinel(),
        building_col: None,
        floor_col: None,
    }
}

/// Loads a bundle written by [`write_task_bundle`].
pub fn read_task_bundle(dir: &Path) -> Result<(LocalizationTask, TaskMeta)> {
    let meta: TaskMeta = read_json(&dir.join("meta.json"))?;
    let schema = bundle_schema(&meta);
    let support = load_csv(&dir.join("support.csv"), &schema)?;
    let query = load_csv(&dir.join("query.csv"), &schema)?;
    for (ds, want, name) in [(&support, meta.support_rows, "support.csv"), (&query, meta.query_rows, "query.csv")] {
        if ds.len() != want {
            return Err(AppError::format(&dir.join(name), format!("expected {want} rows, found {}", ds.len())));
        }
    }
    Ok((LocalizationTask::new(meta.id.clone(), support, query)?, meta))
}
