//! Experiment config: one JSON document per run, unknown keys rejected.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use mvdelay::bounds::{ContractionParams, EpsGrid};
use mvdelay::functionals::{FunctionalSpec, TestFunctionSpec};
use mvdelay::models::{make_linear_meanfield_delay, CoefficientModel, ConstantDrift};
use mvdelay::samplers::InitSampler;
use mvdelay::simulate::SimConfig;
use mvdelay::{CameronMartinVector, PathGrid, Segment};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl From<mvdelay::Error> for ConfigError {
    fn from(e: mvdelay::Error) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Simulate,
    Picard,
    Contract,
    Exo,
    Harnack,
    PowerHarnack,
    Ibp,
    ShiftHarnack,
    FpkeCheck,
}

impl ExperimentKind {
    pub fn label(self) -> &'static str {
        match self {
            ExperimentKind::Simulate => "simulate",
            ExperimentKind::Picard => "picard",
            ExperimentKind::Contract => "contract",
            ExperimentKind::Exo => "exo",
            ExperimentKind::Harnack => "harnack",
            ExperimentKind::PowerHarnack => "power-harnack",
            ExperimentKind::Ibp => "ibp",
            ExperimentKind::ShiftHarnack => "shift-harnack",
            ExperimentKind::FpkeCheck => "fpke-check",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// `b = A0 ξ(0) + A1 ξ(−r0) + B·E_μ ξ(0)`, `σ = σ0`; matrices as rows.
    LinearMeanfieldDelay { a0: Vec<Vec<f64>>, a1: Vec<Vec<f64>>, b: Vec<Vec<f64>>, sigma: Vec<Vec<f64>> },
    ConstantDrift { c: Vec<f64>, sigma: Vec<Vec<f64>> },
}

fn matrix(rows: &[Vec<f64>], d: usize, name: &str) -> Result<DMatrix<f64>, ConfigError> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(ConfigError::Invalid(format!("model.{name} must be {d}x{d}")));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

impl ModelSpec {
    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::LinearMeanfieldDelay { a0, .. } => a0.len(),
            ModelSpec::ConstantDrift { c, .. } => c.len(),
        }
    }

    pub fn build(&self, r0: f64) -> Result<Box<dyn CoefficientModel>, ConfigError> {
        let d = self.dim();
        if d == 0 {
            return Err(ConfigError::Invalid("model dimension must be positive".into()));
        }
        Ok(match self {
            ModelSpec::LinearMeanfieldDelay { a0, a1, b, sigma } => Box::new(make_linear_meanfield_delay(
                d,
                matrix(a0, d, "a0")?,
                matrix(a1, d, "a1")?,
                matrix(b, d, "b")?,
                matrix(sigma, d, "sigma")?,
                r0,
            )?),
            ModelSpec::ConstantDrift { c, sigma } => Box::new(ConstantDrift::new(c.clone(), matrix(sigma, d, "sigma")?)?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub r0: f64,
    pub m: usize,
}

/// Cameron–Martin directions by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum EtaSpec {
    /// `η(θ) = start + slope·(θ + r0)`
    Ramp { start: Vec<f64>, slope: Vec<f64> },
    /// `η(θ) = amp·sin(2π·freq·(θ + r0)/r0)`
    Sine { amp: Vec<f64>, freq: f64 },
}

impl EtaSpec {
    pub fn build(&self, grid: PathGrid, dim: usize) -> Result<CameronMartinVector, ConfigError> {
        let r0 = grid.r0();
        let seg = match self {
            EtaSpec::Ramp { start, slope } => {
                if start.len() != dim || slope.len() != dim {
                    return Err(ConfigError::Invalid(format!("eta.start and eta.slope need {dim} entries")));
                }
                Segment::from_fn(grid, dim, |s| start.iter().zip(slope).map(|(a, b)| a + b * (s + r0)).collect())?
            }
            EtaSpec::Sine { amp, freq } => {
                if amp.len() != dim {
                    return Err(ConfigError::Invalid(format!("eta.amp needs {dim} entries")));
                }
                let w = 2.0 * std::f64::consts::PI * freq / r0;
                Segment::from_fn(grid, dim, |s| amp.iter().map(|a| a * (w * (s + r0)).sin()).collect())?
            }
        };
        Ok(CameronMartinVector::from_values(&seg))
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentKind>,
    pub model: ModelSpec,
    pub grid: GridSpec,
    pub n: usize,
    pub horizon: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// `μ_0`; defaults to a standard normal constant segment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitSampler>,
    /// `ν_0` for two-law experiments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_nu: Option<InitSampler>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub snapshot_times: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checkpoints: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub picard_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub picard_window: Option<f64>,
    /// Overrides the constants derived from the model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contraction: Option<ContractionParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_grid: Option<EpsGrid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub functional: Option<FunctionalSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_function: Option<TestFunctionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<EtaSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_id: Option<String>,
    /// Repeat on the grid with half the step, sharing the Brownian path.
    #[serde(default, skip_serializing_if = "is_false")]
    pub halving: bool,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|source| ConfigError::Parse { path: origin.to_string(), source })
    }

    #[cfg(test)]
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn path_grid(&self) -> Result<PathGrid, ConfigError> {
        Ok(PathGrid::new(self.grid.r0, self.grid.m)?)
    }

    pub fn sim_config(&self, grid: PathGrid) -> SimConfig {
        let mut c = SimConfig::new(self.n, self.horizon, grid, self.seed);
        if let Some(k) = self.picard_iters {
            c.picard_iters = k;
        }
        c.picard_window = self.picard_window;
        c
    }

    pub fn mu_sampler(&self) -> InitSampler {
        self.init.clone().unwrap_or(InitSampler::ConstantPoint { mean: vec![0.0; self.model.dim()], std: 1.0 })
    }

    fn require<T>(&self, v: &Option<T>, field: &str, kind: ExperimentKind) -> Result<(), ConfigError> {
        if v.is_none() {
            return Err(ConfigError::Invalid(format!("experiment {} requires field `{field}`", kind.label())));
        }
        Ok(())
    }

    /// Checks fields the experiment needs; returns the resolved kind.
    pub fn validate(&self, kind: ExperimentKind) -> Result<(), ConfigError> {
        if let Some(k) = self.experiment {
            if k != kind {
                return Err(ConfigError::Invalid(format!("config is for {}, not {}", k.label(), kind.label())));
            }
        }
        let d = self.model.dim();
        let grid = self.path_grid()?;
        self.model.build(grid.r0())?;
        if self.n < 2 {
            return Err(ConfigError::Invalid("n must be at least 2".into()));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(ConfigError::Invalid("horizon must be positive".into()));
        }
        grid.steps_in(self.horizon)?;
        for s in self.init.iter().chain(&self.init_nu) {
            s.validate()?;
            if s.dim() != d {
                return Err(ConfigError::Invalid(format!("sampler dimension {} differs from model dimension {d}", s.dim())));
            }
        }
        if let Some(f) = &self.functional {
            f.validate(d)?;
        }
        if let Some(f) = &self.test_function {
            f.validate(d)?;
        }
        if let Some(g) = &self.eps_grid {
            g.validate()?;
        }
        if let Some(c) = &self.contraction {
            c.validate()?;
        }
        for t in self.snapshot_times.iter().chain(&self.checkpoints) {
            grid.steps_in(*t)?;
            if *t > self.horizon {
                return Err(ConfigError::Invalid(format!("time {t} beyond horizon {}", self.horizon)));
            }
        }
        use ExperimentKind::*;
        match kind {
            Contract | Exo | Harnack | PowerHarnack => self.require(&self.init_nu, "init_nu", kind)?,
            _ => {}
        }
        match kind {
            Harnack | PowerHarnack | ShiftHarnack | Ibp => self.require(&self.functional, "functional", kind)?,
            FpkeCheck => self.require(&self.test_function, "test_function", kind)?,
            _ => {}
        }
        match kind {
            PowerHarnack | ShiftHarnack => {
                self.require(&self.p, "p", kind)?;
                if !(self.p.unwrap_or(0.0) > 1.0) {
                    return Err(ConfigError::Invalid("p must exceed 1".into()));
                }
            }
            _ => {}
        }
        if matches!(kind, Ibp | ShiftHarnack) {
            self.require(&self.eta, "eta", kind)?;
            self.eta.as_ref().expect("checked").build(grid, d)?;
        }
        Ok(())
    }
}
