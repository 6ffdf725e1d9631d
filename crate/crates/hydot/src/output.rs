//! Output directory bookkeeping: CSV, VTK and JSON files, recorded in the order written.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hydot_core::grid::Grid;

use crate::HarnessError;

pub struct OutputDir {
    root: PathBuf,
    files: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, HarnessError> {
        std::fs::create_dir_all(root).map_err(|source| HarnessError::Output { path: root.display().to_string(), source })?;
        Ok(Self { root: root.to_path_buf(), files: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn record(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<(), HarnessError> {
        let path = self.path(name);
        std::fs::write(&path, text).map_err(|source| HarnessError::Output { path: path.display().to_string(), source })?;
        self.record(name);
        Ok(())
    }

    pub fn write_csv(&mut self, name: &str, table: &Csv) -> Result<(), HarnessError> {
        self.write_text(name, &table.text)
    }

    pub fn write_vtk(&mut self, name: &str, grid: &Grid, title: &str, fields: &[(&str, &[f64])]) -> Result<(), HarnessError> {
        let path = self.path(name);
        hydot_core::vtk::write_file(&path, grid, title, fields).map_err(|source| HarnessError::Stage { stage: "output", source })?;
        self.record(name);
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &serde_json::Value) -> Result<(), HarnessError> {
        let mut text = serde_json::to_string_pretty(value).expect("JSON values serialise");
        text.push('\n');
        self.write_text(name, &text)
    }
}

/// Minimal CSV builder; cells are written with `Display`, so callers control
/// numeric formatting and no cell may contain a comma.
pub struct Csv {
    text: String,
    width: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self { text: format!("{}\n", header.join(",")), width: header.len() }
    }

    pub fn row(&mut self, cells: &[&dyn std::fmt::Display]) {
        assert_eq!(cells.len(), self.width, "CSV row width");
        for (i, c) in cells.iter().enumerate() {
            if i > 0 {
                self.text.push(',');
            }
            write!(self.text, "{c}").unwrap();
        }
        self.text.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}

/// Fixed-precision float for CSV cells; keeps files byte-stable.
pub struct Sci(pub f64);

impl std::fmt::Display for Sci {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.6e}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(&dir.path().join("nested")).unwrap();
        let mut t = Csv::new(&["a", "b"]);
        t.row(&[&1, &Sci(0.5)]);
        assert_eq!(t.as_str(), "a,b\n1,5.000000e-1\n");
        out.write_csv("t.csv", &t).unwrap();
        out.write_csv("t.csv", &t).unwrap();
        assert_eq!(out.files(), ["t.csv"]);
        assert_eq!(std::fs::read_to_string(out.path("t.csv")).unwrap(), t.as_str());
    }
}
