//! Manifest and CSV emission. Files are written single-threaded, floats in
//! shortest round-trip form, no timestamps.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{ExperimentConfig, ExperimentKind};

#[derive(Debug, thiserror::Error)]
pub enum OutputError {
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    Csv { path: String, source: csv::Error },
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    experiment: &'static str,
    seed: u64,
    outputs: &'a [&'a str],
    config: &'a ExperimentConfig,
}

pub struct OutputDir {
    root: PathBuf,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, OutputError> {
        fs::create_dir_all(root).map_err(|source| OutputError::Io { path: root.display().to_string(), source })?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_manifest(&self, kind: ExperimentKind, config: &ExperimentConfig, outputs: &[&str]) -> Result<(), OutputError> {
        let m = Manifest {
            tool: "mvdelay",
            version: env!("CARGO_PKG_VERSION"),
            experiment: kind.label(),
            seed: config.seed,
            outputs,
            config,
        };
        let path = self.path("manifest.json");
        let mut text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|source| OutputError::Io { path: path.display().to_string(), source })
    }

    pub fn write_rows<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<(), OutputError> {
        let path = self.path(name);
        let err = |source| OutputError::Csv { path: path.display().to_string(), source };
        let mut w = csv::Writer::from_path(&path).map_err(err)?;
        for r in rows {
            w.serialize(r).map_err(err)?;
        }
        w.flush().map_err(|source| OutputError::Io { path: path.display().to_string(), source })
    }

    /// Rows of raw records under an explicit header.
    pub fn write_records(&self, name: &str, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<(), OutputError> {
        let path = self.path(name);
        let err = |source| OutputError::Csv { path: path.display().to_string(), source };
        let mut w = csv::Writer::from_path(&path).map_err(err)?;
        w.write_record(header).map_err(err)?;
        for r in rows {
            w.write_record(&r).map_err(err)?;
        }
        w.flush().map_err(|source| OutputError::Io { path: path.display().to_string(), source })
    }
}

#[derive(Debug, Serialize)]
pub struct DistanceRow {
    pub t: f64,
    pub n_particles: usize,
    pub method: &'static str,
    pub w2: f64,
    pub converged: bool,
}

#[derive(Debug, Serialize)]
pub struct BoundRow {
    pub t: f64,
    pub bound: f64,
    pub eps_star: f64,
    pub delta_star: f64,
}

#[derive(Debug, Serialize)]
pub struct HarnackRow {
    #[serde(rename = "T")]
    pub t: f64,
    pub p: Option<f64>,
    pub lhs: f64,
    pub rhs: f64,
    pub entropy_term: f64,
    pub margin: f64,
    pub stderr: f64,
    pub n_samples: usize,
}

#[derive(Debug, Serialize)]
pub struct ShiftRow {
    #[serde(rename = "T")]
    pub t: f64,
    pub p: Option<f64>,
    pub eta_id: String,
    pub lhs: f64,
    pub rhs: f64,
    pub factor: Option<f64>,
    pub margin: f64,
    pub stderr: f64,
}

#[derive(Debug, Serialize)]
pub struct PicardRow {
    pub window: usize,
    pub n: usize,
    pub gap: f64,
    pub ratio: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct FpkeRow {
    pub t: f64,
    pub h: f64,
    pub residual: f64,
    pub stderr: f64,
    pub n_particles: usize,
}
