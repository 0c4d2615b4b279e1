//! Picard iteration on short windows `[s, s + t0]`: iterate `n` solves the
//! classical path-dependent SDE whose measure argument is the frozen flow of
//! iterate `n − 1`. All iterates of a window read the same noise.

use rayon::prelude::*;
use serde::Serialize;

use super::{run_engine, validate_run, Ensemble, Flow, SimConfig, StepObserver};
use crate::error::{Error, Result};
use crate::models::{CoefficientModel, MeasureFeatures, RegularityConstants};
use crate::pathspace::PathGrid;
use crate::transport::{EmpiricalPathMeasure, PathMeasure};

/// Gaps of one window. `gaps[n]` estimates
/// `E sup_{s∈[0,t0]} |X^{(n+1)}(s) − X^{(n)}(s)|²` (grid max), with
/// `X^{(0)}` the stopped initial segment; `ratios[n] = gaps[n+1]/gaps[n]`,
/// `None` when `gaps[n] = 0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PicardWindow {
    pub start: f64,
    pub steps: usize,
    pub gaps: Vec<f64>,
    pub ratios: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PicardReport {
    pub window: f64,
    pub windows: Vec<PicardWindow>,
}

/// `K2` of the window criterion, assembled from the constants as in the
/// gap estimate: `K1 = max(β1+α1, β2+α2)` bounds the drift of `d|ξ|²`, the
/// martingale part contributes `8α` after the maximal inequality, and the
/// factor 2 absorbs the `½ E sup` term.
pub fn picard_k2(c: &RegularityConstants) -> f64 {
    let k1 = (c.beta1 + c.alpha1).max(c.beta2 + c.alpha2);
    2.0 * (k1 + 8.0 * c.alpha1).max(k1 + 8.0 * c.alpha2)
}

/// Root of `u·e^u = e^{−1}`.
fn lambert_inv_e() -> f64 {
    let target = (-1.0f64).exp();
    let mut u: f64 = 0.3;
    for _ in 0..50 {
        let g = u * u.exp() - target;
        u -= g / ((1.0 + u) * u.exp());
    }
    u
}

/// Largest grid-aligned `t0 ≤ horizon` with `t0·K2·e^{t0·K2} ≤ e^{−1}`.
/// Returns at least one grid step.
pub fn suggest_picard_window(constants: &RegularityConstants, grid: PathGrid, horizon: f64) -> f64 {
    let k2 = picard_k2(constants);
    let h = grid.dt();
    let max_steps = grid.steps_floor(horizon).max(1);
    if k2 == 0.0 {
        return max_steps as f64 * h;
    }
    let t_star = lambert_inv_e() / k2;
    let mut k = (t_star / h).floor() as usize;
    // Guard the floor against rounding just above the root.
    while k > 0 && {
        let t = k as f64 * h;
        t * k2 * (t * k2).exp() > (-1.0f64).exp()
    } {
        k -= 1;
    }
    if k == 0 {
        log::warn!("grid step {h} exceeds the suggested Picard window {t_star}; using one step");
        k = 1;
    }
    k.min(max_steps) as f64 * h
}

/// Records endpoints of every particle at every step of a window, and the
/// iterate's own measure features.
struct IterateRecorder<'a> {
    model: &'a dyn CoefficientModel,
    d: usize,
    width: usize,
    paths: Vec<f64>,
    feats: Vec<MeasureFeatures>,
    local: usize,
}

impl<'a> IterateRecorder<'a> {
    fn new(model: &'a dyn CoefficientModel, n: usize, steps: usize) -> Self {
        let d = model.dim();
        Self { model, d, width: (steps + 1) * d, paths: vec![0.0; n * (steps + 1) * d], feats: Vec::new(), local: 0 }
    }

    fn record(&mut self, ens: &Ensemble) {
        let (d, width, j) = (self.d, self.width, self.local);
        self.paths.par_chunks_mut(width).enumerate().for_each(|(i, row)| {
            row[j * d..(j + 1) * d].copy_from_slice(ens.segment(i).endpoint());
        });
        self.feats.push(self.model.measure_features(ens.time(), ens));
        self.local += 1;
    }
}

impl StepObserver for IterateRecorder<'_> {
    fn observe(&mut self, ens: &Ensemble, _feats: &MeasureFeatures) -> Result<()> {
        self.record(ens);
        Ok(())
    }
}

fn mean_sup_gap(a: &[f64], b: &[f64], width: usize, d: usize) -> f64 {
    let n = a.len() / width;
    let per: Vec<f64> = a
        .par_chunks(width)
        .zip(b.par_chunks(width))
        .map(|(x, y)| {
            x.chunks_exact(d)
                .zip(y.chunks_exact(d))
                .map(|(p, q)| p.iter().zip(q).map(|(u, v)| (u - v) * (u - v)).sum::<f64>())
                .fold(0.0, f64::max)
        })
        .collect();
    per.iter().sum::<f64>() / n as f64
}

/// Runs the Picard scheme over `[0, horizon]` window by window; the last
/// iterate of each window seeds the next.
pub fn picard_solve(
    model: &dyn CoefficientModel,
    init: &EmpiricalPathMeasure,
    config: &SimConfig,
) -> Result<(PicardReport, Ensemble)> {
    let total = validate_run(model, init, config)?;
    if config.picard_iters < 2 {
        return Err(Error::InvalidArgument(format!("picard_iters must be at least 2, got {}", config.picard_iters)));
    }
    let t0 = match config.picard_window {
        Some(t0) => t0,
        None => suggest_picard_window(model.constants(), config.grid, config.horizon),
    };
    let window_steps = config.grid.steps_in(t0)?;
    if window_steps == 0 {
        return Err(Error::InvalidArgument("Picard window must span at least one step".into()));
    }
    let noise = config.noise(model.dim());
    let n = init.len();
    let d = model.dim();
    let mut current = init.clone();
    let mut windows = Vec::new();
    let mut s0 = 0usize;
    let mut last: Option<Ensemble> = None;
    while s0 < total {
        let steps = window_steps.min(total - s0);
        // X^(0): the initial segment stopped at s0.
        let mut rec = IterateRecorder::new(model, n, steps);
        let mut ens0 = Ensemble::from_measure(&current, s0);
        let mut unit = vec![(); n];
        for j in 0..=steps {
            rec.record(&ens0);
            if j < steps {
                ens0.advance_with(&mut unit, |_, _, seg, out| out.copy_from_slice(seg.endpoint()));
            }
        }
        let mut prev_paths = rec.paths;
        let mut prev_feats = rec.feats;
        let mut gaps = Vec::with_capacity(config.picard_iters);
        let mut ens = ens0;
        for _ in 0..config.picard_iters {
            let mut rec = IterateRecorder::new(model, n, steps);
            ens = run_engine(
                model,
                &current,
                s0,
                steps,
                &noise,
                config.noise_refinement,
                Flow::Frozen(&prev_feats),
                &mut rec,
            )?;
            gaps.push(mean_sup_gap(&rec.paths, &prev_paths, rec.width, d));
            prev_paths = rec.paths;
            prev_feats = rec.feats;
        }
        let ratios = gaps.windows(2).map(|w| if w[0] > 0.0 { Some(w[1] / w[0]) } else { None }).collect();
        windows.push(PicardWindow { start: s0 as f64 * config.grid.dt(), steps, gaps, ratios });
        current = ens.measure();
        last = Some(ens);
        s0 += steps;
    }
    let ens = last.expect("horizon spans at least one step");
    Ok((PicardReport { window: window_steps as f64 * config.grid.dt(), windows }, ens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{make_linear_meanfield_delay, ConstantDrift};
    use crate::samplers::InitSampler;
    use nalgebra::DMatrix;

    fn consts(beta2: f64) -> RegularityConstants {
        RegularityConstants {
            alpha1: 0.0,
            alpha2: 0.0,
            beta1: 0.0,
            beta2,
            kappa: 0.0,
            k_growth: 0.0,
            kappa0: 0.0,
            kappa1: 0.0,
            kappa2: 0.0,
            kappa3: 0.0,
            lambda: 0.0,
            grad_b_sq: 0.0,
            invertible: false,
        }
    }

    #[test]
    fn window_examples() {
        let g = PathGrid::new(1.0, 1000).unwrap();
        assert_eq!(suggest_picard_window(&consts(0.0), g, 3.0), 3.0);
        // K2 = 2·β2 = 1: root of t·e^t = e^{-1}
        let t0 = suggest_picard_window(&consts(0.5), g, 3.0);
        let mut lo = 0.0f64;
        let mut hi = 1.0f64;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid * mid.exp() > (-1.0f64).exp() {
                hi = mid
            } else {
                lo = mid
            }
        }
        assert!((t0 - (lo * 1000.0).floor() / 1000.0).abs() < 1e-12, "{t0} vs {lo}");
        assert!((t0 - 0.278).abs() < 1e-12);
    }

    #[test]
    fn doubling_k2_at_least_halves_window() {
        let g = PathGrid::new(1.0, 256).unwrap();
        let mut prev = suggest_picard_window(&consts(0.05), g, 10.0);
        for k in 1..8 {
            let b = 0.05 * 2f64.powi(k);
            let t = suggest_picard_window(&consts(b), g, 10.0);
            assert!(t <= 0.5 * prev + g.dt() + 1e-12);
            prev = t;
        }
    }

    #[test]
    fn measure_free_model_second_gap_vanishes() {
        let model = make_linear_meanfield_delay(
            1,
            -DMatrix::identity(1, 1),
            0.3 * DMatrix::identity(1, 1),
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
            1.0,
        )
        .unwrap();
        let g = PathGrid::new(1.0, 8).unwrap();
        let init = InitSampler::ConstantPoint { mean: vec![1.0], std: 1.0 }.sample(g, 50, 1, "init").unwrap();
        let mut cfg = SimConfig::new(50, 1.0, g, 3);
        cfg.picard_iters = 3;
        cfg.picard_window = Some(0.5);
        let (rep, _) = picard_solve(&model, &init, &cfg).unwrap();
        assert_eq!(rep.windows.len(), 2);
        for w in &rep.windows {
            assert!(w.gaps[0] > 0.0);
            assert_eq!(w.gaps[1], 0.0);
            assert_eq!(w.gaps[2], 0.0);
            assert_eq!(w.ratios[1], None);
        }
    }

    #[test]
    fn converged_iterates_match_direct_simulation_and_repeat_bitwise() {
        let model = ConstantDrift::new(vec![0.2], DMatrix::identity(1, 1)).unwrap();
        let g = PathGrid::new(1.0, 4).unwrap();
        let init = InitSampler::ConstantPoint { mean: vec![0.0], std: 1.0 }.sample(g, 20, 1, "init").unwrap();
        let mut cfg = SimConfig::new(20, 2.0, g, 8);
        cfg.picard_iters = 2;
        cfg.picard_window = Some(0.75);
        let (rep, ens) = picard_solve(&model, &init, &cfg).unwrap();
        let direct = super::super::simulate_mckean(&model, &init, &cfg, &[2.0]).unwrap();
        assert_eq!(ens.measure(), direct.snapshots[0].measure);
        let (rep2, _) = picard_solve(&model, &init, &cfg).unwrap();
        assert_eq!(rep, rep2);
    }
}
