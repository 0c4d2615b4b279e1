//! Samplers for the initial segment law `μ0`.
//!
//! Each particle draws from its own counter-based stream, so the `i`-th
//! sample depends only on `(seed, role, i)`. Two samplers fed the same
//! stream share their underlying normals, which is how coupled initial
//! conditions are produced.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pathspace::{PathGrid, Segment};
use crate::rng::{NoiseSource, NoiseStream};
use crate::transport::EmpiricalPathMeasure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSampler {
    /// Constant segment at `mean + std·Z`.
    ConstantPoint { mean: Vec<f64>, std: f64 },
    /// `mean + std·Z` plus `bridge_scale` times a Brownian bridge pinned at
    /// both ends of `[−r0, 0]`.
    BrownianBridge { mean: Vec<f64>, std: f64, bridge_scale: f64 },
}

impl InitSampler {
    pub fn dim(&self) -> usize {
        match self {
            InitSampler::ConstantPoint { mean, .. } | InitSampler::BrownianBridge { mean, .. } => mean.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (mean, std, scale) = match self {
            InitSampler::ConstantPoint { mean, std } => (mean, *std, 0.0),
            InitSampler::BrownianBridge { mean, std, bridge_scale } => (mean, *std, *bridge_scale),
        };
        if mean.is_empty() {
            return Err(Error::InvalidArgument("sampler mean must be nonempty".into()));
        }
        if mean.iter().any(|v| !v.is_finite()) || !(std >= 0.0) || !(scale >= 0.0) || !std.is_finite() || !scale.is_finite() {
            return Err(Error::InvalidArgument("sampler parameters must be finite, std and scale nonnegative".into()));
        }
        Ok(())
    }

    /// One segment from `stream`. The endpoint is drawn first, so the point
    /// does not depend on the grid.
    pub fn sample_segment(&self, grid: PathGrid, stream: &mut NoiseStream) -> Segment {
        let d = self.dim();
        let mut z = vec![0.0; d];
        stream.next_normals(&mut z);
        match self {
            InitSampler::ConstantPoint { mean, std } => {
                let p: Vec<f64> = mean.iter().zip(&z).map(|(m, z)| m + std * z).collect();
                Segment::constant(grid, &p)
            }
            InitSampler::BrownianBridge { mean, std, bridge_scale } => {
                let p: Vec<f64> = mean.iter().zip(&z).map(|(m, z)| m + std * z).collect();
                let m = grid.m();
                let mut w = vec![0.0; (m + 1) * d];
                for k in 1..=m {
                    stream.next_increments(grid.dt(), &mut z);
                    for c in 0..d {
                        w[k * d + c] = w[(k - 1) * d + c] + z[c];
                    }
                }
                let mut values = vec![0.0; (m + 1) * d];
                for k in 0..=m {
                    let s = k as f64 / m as f64;
                    for c in 0..d {
                        values[k * d + c] = p[c] + bridge_scale * (w[k * d + c] - s * w[m * d + c]);
                    }
                }
                Segment::new(grid, d, values).expect("finite sampler output")
            }
        }
    }

    pub fn sample(&self, grid: PathGrid, n: usize, seed: u64, role: &str) -> Result<EmpiricalPathMeasure> {
        self.validate()?;
        if n == 0 {
            return Err(Error::InvalidArgument("sample size must be positive".into()));
        }
        let src = NoiseSource::new(seed, role, self.dim());
        let segs: Vec<Segment> = (0..n)
            .into_par_iter()
            .map(|i| self.sample_segment(grid, &mut src.stream(i as u64)))
            .collect();
        EmpiricalPathMeasure::from_segments(&segs)
    }
}
