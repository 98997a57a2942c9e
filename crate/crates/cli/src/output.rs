//! CSV tables, the run manifest and atomic file writes.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Column {
    pub name: String,
    /// `1` for dimensionless quantities.
    pub unit: String,
}

impl Column {
    pub fn header(&self) -> String {
        format!("{}:{}", self.name, self.unit)
    }
}

/// Column-labelled numeric table, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(columns: &[(&str, &str)]) -> Self {
        Self {
            columns: columns
                .iter()
                .map(|(n, u)| Column {
                    name: n.to_string(),
                    unit: u.to_string(),
                })
                .collect(),
            rows: Vec::new(),
        }
    }

    /// Builds a table from equal-length columns.
    pub fn from_columns(columns: &[(&str, &str)], data: &[&[f64]]) -> Self {
        let mut t = Self::new(columns);
        assert_eq!(columns.len(), data.len());
        let n = data.first().map_or(0, |c| c.len());
        for i in 0..n {
            t.push(data.iter().map(|c| c[i]).collect());
        }
        t
    }

    pub fn push(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[i]).collect()
    }

    /// `#`-prefixed comment lines, a `name:unit` header, then one row per
    /// line with 17 significant digits.
    pub fn to_csv(&self, comments: &[String]) -> Vec<u8> {
        let mut out = Vec::new();
        for c in comments {
            writeln!(out, "# {c}").expect("write to Vec");
        }
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(self.columns.iter().map(Column::header))
                .expect("write to Vec");
            for r in &self.rows {
                w.write_record(r.iter().map(|v| format!("{v:.16e}")))
                    .expect("write to Vec");
            }
            w.flush().expect("write to Vec");
        }
        out
    }

    /// Inverse of [`Table::to_csv`]; returns the table and its comment lines.
    pub fn from_csv(bytes: &[u8]) -> Result<(Table, Vec<String>)> {
        let text = std::str::from_utf8(bytes).map_err(|e| CliError::Plot(format!("CSV is not UTF-8: {e}")))?;
        let comments = text
            .lines()
            .take_while(|l| l.starts_with('#'))
            .map(|l| l.trim_start_matches('#').trim_start().to_string())
            .collect();
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(bytes);
        let bad = |e: csv::Error| CliError::Plot(format!("malformed CSV: {e}"));
        let mut columns = Vec::new();
        for h in r.headers().map_err(bad)? {
            let (name, unit) = h
                .split_once(':')
                .ok_or_else(|| CliError::Plot(format!("header `{h}` is not name:unit")))?;
            columns.push(Column {
                name: name.trim().to_string(),
                unit: unit.trim().to_string(),
            });
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(bad)?;
            let row = rec
                .iter()
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|_| CliError::Plot(format!("`{f}` is not a number")))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Ok((Table { columns, rows }, comments))
    }
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: String,
    pub config_sha256: String,
    pub seed: u64,
    pub n_traj: usize,
    pub version: String,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_and_comments() {
        let t = Table::from_columns(
            &[("probe_frequency", "MHz"), ("contrast", "1")],
            &[&[2837.05, 2837.1], &[-0.1, 0.0]],
        );
        let text = String::from_utf8(t.to_csv(&["config_sha256: abc".into()])).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# config_sha256: abc");
        assert_eq!(lines[1], "probe_frequency:MHz,contrast:1");
        assert_eq!(lines[2], "2.8370500000000002e3,-1.0000000000000001e-1");
        let (back, comments) = Table::from_csv(text.as_bytes()).unwrap();
        assert_eq!(back, t);
        assert_eq!(comments, vec!["config_sha256: abc".to_string()]);
    }

    #[test]
    fn non_finite_values_survive() {
        let t = Table::from_columns(&[("x", "1")], &[&[f64::NAN, f64::INFINITY, -0.0]]);
        let (back, _) = Table::from_csv(&t.to_csv(&[])).unwrap();
        assert!(back.rows[0][0].is_nan());
        assert_eq!(back.rows[1][0], f64::INFINITY);
        assert!(back.rows[2][0] == 0.0 && back.rows[2][0].is_sign_negative());
    }

    #[test]
    fn rejects_headers_without_units() {
        assert!(Table::from_csv(b"x,y\n1,2\n").is_err());
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("a.csv");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_exact(rows in prop::collection::vec(prop::array::uniform3(any::<f64>()), 0..20)) {
            let mut t = Table::new(&[("a", "MHz"), ("b", "us"), ("c", "1")]);
            for r in &rows {
                t.push(r.to_vec());
            }
            let (back, _) = Table::from_csv(&t.to_csv(&["x".into()])).unwrap();
            prop_assert_eq!(back.rows.len(), t.rows.len());
            for (a, b) in back.rows.iter().flatten().zip(t.rows.iter().flatten()) {
                prop_assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
            }
        }
    }
}
