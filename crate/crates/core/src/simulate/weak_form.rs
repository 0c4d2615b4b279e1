//! Weak-form checks along simulated particles: the Fokker–Planck residual
//! `Ê f(X(t)) − Ê f(X(0)) − Σ h·Ê (L_{s,μ̂_s} f)(X_s)` and conditional
//! increments of `M^f`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use super::{simulate_observed, Ensemble, SimConfig, Snapshot, StepObserver};
use crate::error::{Error, Result};
use crate::models::{generator_with, CoefficientModel, DiffusionKind, GeneratorScratch, MeasureFeatures, TestFunction};
use crate::pathspace::SegmentView;
use crate::stats::mean_stderr;
use crate::transport::{EmpiricalPathMeasure, PathMeasure};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FpkeReport {
    pub t: f64,
    pub h: f64,
    /// Signed residual; `|residual|` is the checked quantity.
    pub residual: f64,
    pub stderr: f64,
    pub n_particles: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MartingaleReport {
    pub mean: f64,
    pub stderr: f64,
    pub n_event: usize,
}

type Event<'a> = &'a (dyn Fn(SegmentView<'_>) -> bool + Sync);

fn diffusion_square(model: &dyn CoefficientModel, t: f64, x: &[f64]) -> DMatrix<f64> {
    let s = model.diffusion(t, x);
    &s * s.transpose()
}

/// Per-particle `f(X(t2)) − f(X(t1)) − Σ_{t1≤s<t2} h·(Lf)(X_s)`.
struct IncrementObserver<'a> {
    model: &'a dyn CoefficientModel,
    f: &'a dyn TestFunction,
    event: Option<Event<'a>>,
    k1: usize,
    k2: usize,
    h: f64,
    incr: Vec<f64>,
    flags: Vec<bool>,
}

impl StepObserver for IncrementObserver<'_> {
    fn observe(&mut self, ens: &Ensemble, feats: &MeasureFeatures) -> Result<()> {
        let k = ens.step_index();
        if k < self.k1 || k > self.k2 {
            return Ok(());
        }
        let (model, f) = (self.model, self.f);
        if k == self.k1 {
            if let Some(ev) = self.event {
                self.flags.par_iter_mut().enumerate().for_each(|(i, fl)| *fl = ev(ens.segment(i)));
            }
            self.incr.par_iter_mut().enumerate().for_each(|(i, v)| *v = -f.value(ens.segment(i).endpoint()));
        }
        if k == self.k2 {
            self.incr.par_iter_mut().enumerate().for_each(|(i, v)| *v += f.value(ens.segment(i).endpoint()));
            return Ok(());
        }
        let t = ens.time();
        let h = self.h;
        let d = model.dim();
        let shared = match model.diffusion_kind() {
            DiffusionKind::State => None,
            _ => Some(diffusion_square(model, t, &vec![0.0; d])),
        };
        self.incr.par_iter_mut().enumerate().for_each_init(
            || GeneratorScratch::new(d),
            |s, (i, v)| {
                let seg = ens.segment(i);
                let lf = match &shared {
                    Some(a) => generator_with(model, t, seg, feats, a, f, s),
                    None => {
                        let a = diffusion_square(model, t, seg.endpoint());
                        generator_with(model, t, seg, feats, &a, f, s)
                    }
                };
                *v -= h * lf;
            },
        );
        Ok(())
    }
}

fn run_increments(
    model: &dyn CoefficientModel,
    init: &EmpiricalPathMeasure,
    config: &SimConfig,
    f: &dyn TestFunction,
    t1: f64,
    t2: f64,
    event: Option<Event<'_>>,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let k1 = config.grid.steps_in(t1)?;
    let k2 = config.grid.steps_in(t2)?;
    let total = config.steps()?;
    if k1 > k2 || k2 > total {
        return Err(Error::OutOfRange { t: t2, lo: t1, hi: config.horizon });
    }
    let n = init.len();
    let mut obs = IncrementObserver {
        model,
        f,
        event,
        k1,
        k2,
        h: config.grid.dt(),
        incr: vec![0.0; n],
        flags: vec![true; n],
    };
    // Stop the simulation at t2.
    let mut cfg = config.clone();
    cfg.horizon = k2.max(1) as f64 * config.grid.dt();
    simulate_observed(model, init, &cfg, &mut obs)?;
    Ok((obs.incr, obs.flags))
}

/// Simulates from `init` and returns the weak-form residual at time `t`,
/// with left-endpoint quadrature of the generator term.
pub fn verify_fpke_weak_form(
    model: &dyn CoefficientModel,
    init: &EmpiricalPathMeasure,
    config: &SimConfig,
    f: &dyn TestFunction,
    t: f64,
) -> Result<FpkeReport> {
    let (incr, _) = run_increments(model, init, config, f, 0.0, t, None)?;
    let est = mean_stderr(&incr);
    Ok(FpkeReport { t, h: config.grid.dt(), residual: est.mean, stderr: est.stderr, n_particles: incr.len() })
}

/// Residual from stored snapshots, which must cover every grid time in
/// `[0, t]` with particles in a fixed order.
pub fn fpke_residual_from_snapshots(
    snapshots: &[Snapshot],
    model: &dyn CoefficientModel,
    f: &dyn TestFunction,
    t: f64,
) -> Result<FpkeReport> {
    let first = snapshots.first().ok_or(Error::MissingSnapshot(0))?;
    let grid = first.measure.grid();
    let h = grid.dt();
    let k_end = grid.steps_in(t)?;
    let by_step = |k: usize| {
        snapshots.iter().find(|s| s.step == k).map(|s| &s.measure).ok_or(Error::MissingSnapshot(k))
    };
    let n = first.measure.len();
    let d = model.dim();
    let m0 = by_step(0)?;
    let mut incr: Vec<f64> = (0..n).map(|i| -f.value(m0.segment(i).endpoint())).collect();
    for k in 0..k_end {
        let mu = by_step(k)?;
        let tk = k as f64 * h;
        let feats = model.measure_features(tk, mu);
        let mut s = GeneratorScratch::new(d);
        for (i, v) in incr.iter_mut().enumerate() {
            let seg = mu.segment(i);
            let a = diffusion_square(model, tk, seg.endpoint());
            *v -= h * generator_with(model, tk, seg, &feats, &a, f, &mut s);
        }
    }
    let end = by_step(k_end)?;
    for (i, v) in incr.iter_mut().enumerate() {
        *v += f.value(end.segment(i).endpoint());
    }
    let est = mean_stderr(&incr);
    Ok(FpkeReport { t, h, residual: est.mean, stderr: est.stderr, n_particles: n })
}

/// Mean of `M^f(t2) − M^f(t1)` over particles whose segment at `t1`
/// satisfies `event`.
pub fn martingale_increment_check(
    model: &dyn CoefficientModel,
    init: &EmpiricalPathMeasure,
    config: &SimConfig,
    f: &dyn TestFunction,
    t1: f64,
    t2: f64,
    event: &(dyn Fn(SegmentView<'_>) -> bool + Sync),
) -> Result<MartingaleReport> {
    let (incr, flags) = run_increments(model, init, config, f, t1, t2, Some(event))?;
    let kept: Vec<f64> = incr.iter().zip(&flags).filter(|(_, fl)| **fl).map(|(v, _)| *v).collect();
    let est = mean_stderr(&kept);
    Ok(MartingaleReport { mean: est.mean, stderr: est.stderr, n_event: kept.len() })
}
