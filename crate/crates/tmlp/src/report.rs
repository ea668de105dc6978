//! Experiment reports and the run manifest.
//!
//! Every report is written twice: `<name>.csv` holds the row table, and
//! `<name>.json` holds the rows plus column descriptions, summary values,
//! notes, the config snapshot and the runtime. Apart from `runtime_seconds`
//! the JSON is a pure function of the snapshot.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::weights::sha256_hex;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
}

impl Cell {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Int(i) => Some(*i as f64),
            Cell::Float(f) => Some(*f),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Cell::Text(s) => Some(s),
            _ => None,
        }
    }

    fn csv_field(&self) -> String {
        match self {
            Cell::Null => String::new(),
            Cell::Bool(b) => b.to_string(),
            Cell::Int(i) => i.to_string(),
            Cell::Float(f) => f.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }
}

macro_rules! cell_from_int {
    ($($t:ty),*) => {$(
        impl From<$t> for Cell {
            fn from(v: $t) -> Self {
                Cell::Int(v as i64)
            }
        }
    )*};
}
cell_from_int!(i64, i32, u64, u32, u8, usize);

/// Non-finite values become `Null`.
impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        if v.is_finite() {
            Cell::Float(v)
        } else {
            Cell::Null
        }
    }
}

impl From<f32> for Cell {
    fn from(v: f32) -> Self {
        (v as f64).into()
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(v: Option<T>) -> Self {
        v.map_or(Cell::Null, Into::into)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub unit: String,
    pub note: String,
}

/// Shorthand for a column list: `(name, unit, note)`.
pub fn columns(spec: &[(&str, &str, &str)]) -> Vec<Column> {
    spec.iter().map(|(n, u, d)| Column { name: n.to_string(), unit: u.to_string(), note: d.to_string() }).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<Cell>>,
    pub summary: BTreeMap<String, Cell>,
    pub notes: Vec<String>,
    pub config_snapshot: serde_json::Value,
    pub runtime_seconds: f64,
}

impl ExperimentReport {
    pub fn new(name: &str, columns: Vec<Column>) -> Self {
        Self {
            name: name.to_string(),
            columns,
            rows: Vec::new(),
            summary: BTreeMap::new(),
            notes: Vec::new(),
            config_snapshot: serde_json::Value::Null,
            runtime_seconds: 0.0,
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width for report {}", self.name);
        self.rows.push(row);
    }

    pub fn set(&mut self, key: &str, value: impl Into<Cell>) {
        self.summary.insert(key.to_string(), value.into());
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    pub fn summary_f64(&self, key: &str) -> Option<f64> {
        self.summary.get(key).and_then(Cell::as_f64)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    /// Values of one column, `None` if there is no such column.
    pub fn column(&self, name: &str) -> Option<Vec<&Cell>> {
        let i = self.column_index(name)?;
        Some(self.rows.iter().map(|r| &r[i]).collect())
    }

    /// First row whose `key` column holds `value`.
    pub fn row_where(&self, key: &str, value: &Cell) -> Option<&[Cell]> {
        let i = self.column_index(key)?;
        self.rows.iter().find(|r| &r[i] == value).map(Vec::as_slice)
    }

    pub fn cell(&self, row: &[Cell], column: &str) -> Option<Cell> {
        self.column_index(column).map(|i| row[i].clone())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// The JSON with the runtime zeroed, for reproducibility comparisons.
    pub fn cells_json(&self) -> String {
        Self { runtime_seconds: 0.0, ..self.clone() }.to_json()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.columns.iter().map(|c| c.name.as_str())).expect("in-memory csv");
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::csv_field)).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("report: {e}")))
    }

    /// Writes `<name>.csv` and `<name>.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<FileEntry>> {
        let mut out = Vec::new();
        for (ext, body) in [("csv", self.to_csv()), ("json", self.to_json())] {
            let file = format!("{}.{ext}", self.name);
            out.push(write_file(dir, &file, body.as_bytes())?);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

pub fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<FileEntry> {
    let path: PathBuf = dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(FileEntry { path: name.to_string(), sha256: sha256_hex(bytes) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub ok: bool,
    pub error: Option<String>,
    pub runtime_seconds: f64,
    pub files: Vec<FileEntry>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub config_snapshot: serde_json::Value,
    pub reports: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> Result<FileEntry> {
        let body = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_file(dir, "manifest.json", body.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_csv() {
        let mut r = ExperimentReport::new("demo", columns(&[("level", "", ""), ("dp", "prob", "mean"), ("tag", "", "")]));
        r.push(vec![0u8.into(), 0.187.into(), "a,b".into()]);
        r.push(vec![7u8.into(), Cell::Null, Option::<&str>::None.into()]);
        r.set("tokens", 12usize);
        r.runtime_seconds = 3.5;
        let back = ExperimentReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.to_csv(), "level,dp,tag\n0,0.187,\"a,b\"\n7,,\n");
        assert_eq!(r.column("dp").unwrap()[0].as_f64(), Some(0.187));
        let mut s = r.clone();
        s.runtime_seconds = 9.0;
        assert_eq!(s.cells_json(), r.cells_json());
    }
}
