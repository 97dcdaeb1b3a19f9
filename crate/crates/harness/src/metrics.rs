//! Per-step metrics CSV.

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{HarnessError, Result};

pub const COLUMNS: [&str; 15] = [
    "step",
    "samples_seen",
    "wall_ms",
    "train_loss",
    "test_accuracy",
    "l_p",
    "l_s",
    "dot_dg",
    "res_norm",
    "s_min",
    "s_max",
    "p_min",
    "p_max",
    "l_p_avg",
    "l_s_avg",
];

/// One CSV row; `None` fields are written empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: u64,
    pub samples_seen: u64,
    pub wall_ms: u64,
    pub train_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub l_p: Option<f64>,
    pub l_s: Option<f64>,
    pub dot_dg: Option<f64>,
    pub res_norm: Option<f64>,
    pub s_min: Option<f64>,
    pub s_max: Option<f64>,
    pub p_min: Option<f64>,
    pub p_max: Option<f64>,
    pub l_p_avg: Option<f64>,
    pub l_s_avg: Option<f64>,
}

impl MetricsRow {
    pub fn set_s(&mut self, range: Option<(f64, f64)>) {
        (self.s_min, self.s_max) = split(range);
    }

    pub fn set_p(&mut self, range: Option<(f64, f64)>) {
        (self.p_min, self.p_max) = split(range);
    }
}

fn split(r: Option<(f64, f64)>) -> (Option<f64>, Option<f64>) {
    r.map_or((None, None), |(a, b)| (Some(a), Some(b)))
}

/// Flushes after every row so a diverged run leaves its partial history.
pub struct MetricsWriter {
    path: PathBuf,
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        inner.write_record(COLUMNS)?;
        inner.flush().map_err(|e| HarnessError::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), inner })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush().map_err(|e| HarnessError::io(&self.path, e))
    }
}

/// A metrics file read back as named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub path: PathBuf,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            rows.push(rec.iter().map(|f| f.trim().parse().ok()).collect());
        }
        Ok(Self { path: path.to_path_buf(), headers, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let k = self.headers.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r.get(k).copied().flatten()).collect())
    }

    /// `(x, y)` pairs where both are present.
    pub fn series(&self, x: &str, y: &str) -> Option<Vec<(f64, f64)>> {
        let (xs, ys) = (self.column(x)?, self.column(y)?);
        Some(xs.into_iter().zip(ys).filter_map(|(a, b)| Some((a?, b?))).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_fields_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut w = MetricsWriter::create(&path).unwrap();
        let mut row = MetricsRow { step: 3, samples_seen: 384, wall_ms: 7, train_loss: Some(0.5), ..Default::default() };
        row.set_s(Some((0.1, 2.0)));
        w.write(&row).unwrap();
        drop(w);
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), COLUMNS.join(","));
        assert_eq!(lines.next().unwrap(), "3,384,7,0.5,,,,,,0.1,2.0,,,,");
        let t = Table::read(&path).unwrap();
        assert_eq!(t.series("samples_seen", "train_loss").unwrap(), vec![(384.0, 0.5)]);
        assert_eq!(t.series("samples_seen", "l_p").unwrap(), vec![]);
        assert!(t.column("missing").is_none());
    }
}
