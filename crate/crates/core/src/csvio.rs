//! Minimal CSV reading and writing for the pipeline artifacts.
//!
//! All files are comma separated with a header row and LF line endings.
//! Reals are written with 17 significant digits so they round-trip exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub fn fmt_real(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".to_string()
    } else if v > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

/// Builds CSV text in memory; written out in one go by [`CsvWriter::save`].
#[derive(Debug, Default)]
pub struct CsvWriter {
    buf: String,
}

impl CsvWriter {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        let mut w = CsvWriter::default();
        let cols: Vec<&str> = header.iter().map(|s| s.as_ref()).collect();
        w.buf.push_str(&cols.join(","));
        w.buf.push('\n');
        w
    }

    /// Appends a row of leading integer columns followed by real columns.
    pub fn row(&mut self, ints: &[i64], reals: &[f64]) {
        let mut first = true;
        for i in ints {
            if !first {
                self.buf.push(',');
            }
            first = false;
            let _ = write!(self.buf, "{i}");
        }
        for r in reals {
            if !first {
                self.buf.push(',');
            }
            first = false;
            self.buf.push_str(&fmt_real(*r));
        }
        self.buf.push('\n');
    }

    /// Appends pre-formatted fields.
    pub fn raw_row<S: AsRef<str>>(&mut self, fields: &[S]) {
        let cols: Vec<&str> = fields.iter().map(|s| s.as_ref()).collect();
        self.buf.push_str(&cols.join(","));
        self.buf.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, &self.buf)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

pub fn parse_real(s: &str) -> Option<f64> {
    match s.trim() {
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        "nan" => Some(f64::NAN),
        t => t.parse().ok(),
    }
}

pub fn read_table(path: &Path) -> Result<CsvTable> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let bad = |msg: String| Error::Parse { path: path.to_path_buf(), msg };
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| bad("empty file".into()))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Option<Vec<f64>> = line.split(',').map(parse_real).collect();
        let row = row.ok_or_else(|| bad(format!("unparsable value on data row {}", n + 1)))?;
        if row.len() != header.len() {
            return Err(bad(format!(
                "data row {} has {} fields, header has {}",
                n + 1,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok(CsvTable { header, rows })
}
