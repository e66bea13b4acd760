//! `results.csv` and `summary.json` writers.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::Result;

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Comma-separated table with a one-line header. Floats are written as
/// `{:.12e}` so reruns compare byte for byte.
#[derive(Debug, Clone)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn row(&mut self) -> RowBuilder<'_> {
        RowBuilder { table: self, cells: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn render(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }
}

pub struct RowBuilder<'a> {
    table: &'a mut Table,
    cells: Vec<String>,
}

impl RowBuilder<'_> {
    pub fn int(mut self, v: impl Into<i64>) -> Self {
        self.cells.push(v.into().to_string());
        self
    }

    pub fn index(mut self, v: usize) -> Self {
        self.cells.push(v.to_string());
        self
    }

    pub fn float(mut self, v: f64) -> Self {
        self.cells.push(format!("{v:.12e}"));
        self
    }

    pub fn floats(mut self, vs: impl IntoIterator<Item = f64>) -> Self {
        self.cells.extend(vs.into_iter().map(|v| format!("{v:.12e}")));
        self
    }

    pub fn text(mut self, v: &str) -> Self {
        if v.contains([',', '"', '\n']) {
            self.cells.push(format!("\"{}\"", v.replace('"', "\"\"")));
        } else {
            self.cells.push(v.to_string());
        }
        self
    }

    pub fn done(self) {
        debug_assert_eq!(self.cells.len(), self.table.header.len());
        self.table.rows.push(self.cells);
    }
}

/// Paths of the two files written by a task.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub results: PathBuf,
    pub summary: PathBuf,
}

pub fn write_bundle(dir: &Path, table: &Table, summary: &Value) -> Result<Bundle> {
    fs::create_dir_all(dir)?;
    let results = dir.join(RESULTS_FILE);
    let summary_path = dir.join(SUMMARY_FILE);
    fs::write(&results, table.render())?;
    let mut text = serde_json::to_string_pretty(summary).map_err(std::io::Error::other)?;
    text.push('\n');
    fs::write(&summary_path, text)?;
    Ok(Bundle { results, summary: summary_path })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_formatted_and_quoted() {
        let mut t = Table::new(["k", "x", "label"]);
        t.row().index(3).float(0.1).text("a, b").done();
        assert_eq!(t.render(), "k,x,label\n3,1.000000000000e-1,\"a, b\"\n");
    }
}
