//! Coupling by change of measure for additive noise.
//!
//! `X` solves the SDE with the flow `μ_t` from `μ_0`. `Y` starts from `ν_0`,
//! uses the flow `ν_t` and the shifted noise `dW̃ = dW + (γ̄ + γ̃)dt`:
//!
//! ```text
//! γ̄ = σ⁻¹[b(t,X_t,μ_t) − b(t,X_t,ν_t)]
//! γ̃ = σ⁻¹[b(t,X_t,ν_t) − b(t,Y_t,ν_t) + (X(t)−Y(t))/(τ−t)]   t < τ = T − r0
//! γ̃ = σ⁻¹[b(t,X_t,ν_t) − b(t,Y_t,ν_t)]                        t ≥ τ
//! ```
//!
//! On the grid the feedback closes the gap linearly, so `X(τ) = Y(τ)` and
//! the segments agree at `T`. Under `R_T·P` with `R_T = exp ℓ`,
//! `ℓ = −Σ⟨γ, ΔW⟩ − ½Σ|γ|²h`, `W̃` is a Brownian motion and `Y` has the
//! law of the solution from `ν_0`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::functionals::PathFunctional;
use crate::models::{CoefficientModel, DiffusionKind, MeasureFeatures};
use crate::pathspace::{Segment, SegmentView};
use crate::rng::NoiseSource;
use crate::simulate::{record_flow_with_end, refined_increment, MeasureFlow, PathHistory, SimConfig};
use crate::stats::{mean_stderr, MeanEstimate};
use crate::transport::{mean_gap, EmpiricalPathMeasure, PathMeasure};

/// Noise role of the coupled samples.
pub const COUPLING_ROLE: &str = "coupling";

/// `σ⁻¹(t)·(b(t,ξ,μ) − b(t,ξ,ν))`.
pub fn gamma_bar(
    model: &dyn CoefficientModel,
    t: f64,
    xi: SegmentView<'_>,
    mu: &dyn PathMeasure,
    nu: &dyn PathMeasure,
) -> Result<Vec<f64>> {
    let inv = model.diffusion_inverse(t)?;
    let d = model.dim();
    let (fm, fn_) = (model.measure_features(t, mu), model.measure_features(t, nu));
    let mut a = vec![0.0; d];
    let mut b = vec![0.0; d];
    model.drift(t, xi, &fm, &mut a);
    model.drift(t, xi, &fn_, &mut b);
    let diff: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p - q).collect();
    let mut out = vec![0.0; d];
    mat_vec(inv.as_slice(), d, &diff, &mut out);
    Ok(out)
}

/// `out = M·x` for a column-major `d×d` matrix.
pub(crate) fn mat_vec(m: &[f64], d: usize, x: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = (0..d).map(|j| m[j * d + i] * x[j]).sum();
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Debug, Clone)]
pub struct CoupledSample {
    pub log_weight: f64,
    /// `Σ|γ̄ + γ̃|²h`
    pub energy: f64,
    pub x_end: Segment,
    /// `max_θ |X_T(θ) − Y_T(θ)|`; zero when the coupling succeeded.
    pub merge_gap: f64,
}

#[derive(Debug, Clone)]
pub struct CouplingOutput {
    pub horizon: f64,
    pub merge_time: f64,
    pub samples: Vec<CoupledSample>,
    /// Steps on which `|γ̄| > λ·κ2·Ŵ2(μ_t, ν_t)`, counted over all samples.
    /// The mean-gap lower bound stands in for `Ŵ2`.
    pub certificate_violations: usize,
    pub certificate_checks: usize,
    pub flow_mu: MeasureFlow,
    pub flow_nu: MeasureFlow,
    /// Particle system from `μ_0` at the horizon, independent of the
    /// coupled samples' noise.
    pub reference: EmpiricalPathMeasure,
}

impl CouplingOutput {
    pub fn weights(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.log_weight.exp()).collect()
    }

    /// `Ê exp ℓ`, which should be one.
    pub fn mean_weight(&self) -> MeanEstimate {
        mean_stderr(&self.weights())
    }

    pub fn all_merged(&self) -> bool {
        self.samples.iter().all(|s| s.merge_gap == 0.0)
    }
}

/// Precomputed `σ(t_k)`, `σ(t_k)⁻¹` (column-major).
pub(crate) struct NoiseMatrices {
    pub(crate) sigma: Vec<Vec<f64>>,
    pub(crate) inv: Vec<Vec<f64>>,
}

pub(crate) fn noise_matrices(model: &dyn CoefficientModel, h: f64, steps: usize) -> Result<NoiseMatrices> {
    let d = model.dim();
    let zero = vec![0.0; d];
    let mut sigma = Vec::with_capacity(steps);
    let mut inv = Vec::with_capacity(steps);
    for k in 0..steps {
        let t = k as f64 * h;
        let s: DMatrix<f64> = model.diffusion(t, &zero);
        sigma.push(s.as_slice().to_vec());
        inv.push(model.diffusion_inverse(t)?.as_slice().to_vec());
    }
    Ok(NoiseMatrices { sigma, inv })
}

pub(crate) fn require_additive(model: &dyn CoefficientModel) -> Result<()> {
    match model.diffusion_kind() {
        DiffusionKind::Additive => Ok(()),
        k => Err(Error::Refused(format!("additive noise required, model '{}' has {k:?}", model.name()))),
    }
}

/// Simulates `N` coupled pairs; sample `i` starts from segment `i` of `mu0`
/// and of `nu0`. The flows are recorded from the same initial particles.
pub fn coupled_simulate(
    model: &dyn CoefficientModel,
    mu0: &EmpiricalPathMeasure,
    nu0: &EmpiricalPathMeasure,
    config: &SimConfig,
) -> Result<CouplingOutput> {
    require_additive(model)?;
    let grid = config.grid;
    let r0 = grid.r0();
    let horizon = config.horizon;
    if !(horizon > r0) {
        return Err(Error::Refused(format!("horizon {horizon} must exceed the delay {r0}")));
    }
    if nu0.len() != mu0.len() {
        return Err(Error::SizeMismatch(format!("{} vs {} initial segments", mu0.len(), nu0.len())));
    }
    let steps = config.steps()?;
    let km = grid.steps_in(horizon - r0)?;
    let (flow_mu, ref_ens) = record_flow_with_end(model, mu0, config)?;
    let flow_nu = crate::simulate::record_flow(model, nu0, config)?;
    let d = model.dim();
    let h = grid.dt();
    let mats = noise_matrices(model, h, steps)?;
    let c = model.constants();
    let cert: Vec<f64> = (0..steps)
        .map(|k| c.lambda * c.kappa2 * mean_gap(&flow_mu.mean_segments[k], &flow_nu.mean_segments[k], d))
        .collect();
    let noise = NoiseSource::new(config.seed, &format!("{}/{COUPLING_ROLE}", config.role), d);
    let q = config.noise_refinement;
    let tau = km as f64 * h;

    let results: Vec<(CoupledSample, usize)> = (0..mu0.len())
        .into_par_iter()
        .map(|i| {
            let mut x = PathHistory::new(mu0.segment(i));
            let mut y = PathHistory::new(nu0.segment(i));
            let mut stream = noise.stream_at(i as u64, 0);
            let mut z = vec![0.0; d];
            let mut dw = vec![0.0; d];
            let (mut bxm, mut bxn, mut byn) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
            let (mut shift, mut gbar_drift) = (vec![0.0; d], vec![0.0; d]);
            let (mut gamma, mut gbar, mut sdw) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
            let (mut xn, mut yn) = (vec![0.0; d], vec![0.0; d]);
            let mut ell = 0.0;
            let mut energy = 0.0;
            let mut violations = 0usize;
            for k in 0..steps {
                let t = k as f64 * h;
                let (fm, fnu): (&MeasureFeatures, &MeasureFeatures) = (&flow_mu.features[k], &flow_nu.features[k]);
                model.drift(t, x.view(), fm, &mut bxm);
                model.drift(t, x.view(), fnu, &mut bxn);
                model.drift(t, y.view(), fnu, &mut byn);
                let (xe, ye) = (x.endpoint(), y.endpoint());
                let feedback = if k < km { 1.0 / (tau - t) } else { 0.0 };
                for j in 0..d {
                    gbar_drift[j] = bxm[j] - bxn[j];
                    shift[j] = bxm[j] - byn[j] + (xe[j] - ye[j]) * feedback;
                }
                mat_vec(&mats.inv[k], d, &gbar_drift, &mut gbar);
                mat_vec(&mats.inv[k], d, &shift, &mut gamma);
                if norm(&gbar) > cert[k] * (1.0 + 1e-9) + 1e-12 {
                    violations += 1;
                }
                refined_increment(&mut stream, h, q, &mut z, &mut dw);
                let g2: f64 = gamma.iter().map(|g| g * g).sum();
                let gdw: f64 = gamma.iter().zip(&dw).map(|(g, w)| g * w).sum();
                ell += -gdw - 0.5 * g2 * h;
                energy += g2 * h;
                mat_vec(&mats.sigma[k], d, &dw, &mut sdw);
                for j in 0..d {
                    xn[j] = xe[j] + bxm[j] * h + sdw[j];
                    yn[j] = ye[j] + byn[j] * h + sdw[j] + shift[j] * h;
                }
                x.push(&xn);
                // From the merge step on, Y is a copy of X.
                if k + 1 >= km {
                    y.push(&xn);
                } else {
                    y.push(&yn);
                }
            }
            let merge_gap = x.view().sup_dist_sq(&y.view()).sqrt();
            (CoupledSample { log_weight: ell, energy, x_end: x.view().to_owned(), merge_gap }, violations)
        })
        .collect();

    let mut samples = Vec::with_capacity(results.len());
    let mut certificate_violations = 0;
    for (s, v) in results {
        if !s.log_weight.is_finite() || s.x_end.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: steps, particle: samples.len() });
        }
        certificate_violations += v;
        samples.push(s);
    }
    Ok(CouplingOutput {
        horizon,
        merge_time: tau,
        certificate_checks: samples.len() * steps,
        samples,
        certificate_violations,
        flow_mu,
        flow_nu,
        reference: ref_ens.measure(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HarnackReport {
    pub t: f64,
    /// `Ê[R_T log f(X_T)]`, estimating `(P_T log f)(ν_0)`.
    pub lhs: f64,
    pub lhs_stderr: f64,
    /// `log Ê f` over the reference particles from `μ_0`.
    pub rhs_base: f64,
    pub rhs_stderr: f64,
    /// `½ Ê[R_T Σ|γ|²h]`
    pub entropy_term: f64,
    pub entropy_stderr: f64,
    /// `rhs_base + entropy_term − lhs`
    pub margin: f64,
    pub stderr: f64,
    pub n_samples: usize,
    pub mean_weight: f64,
    pub weight_stderr: f64,
}

fn eval_positive(f: &dyn PathFunctional, segs: impl Iterator<Item = Segment>, strict: bool) -> Result<Vec<f64>> {
    segs.map(|s| {
        let v = f.value(s.view());
        let ok = if strict { v > 0.0 } else { v >= 0.0 };
        if ok && v.is_finite() {
            Ok(v)
        } else {
            Err(Error::InvalidArgument(format!("functional must be {} and finite, got {v}", if strict { "positive" } else { "nonnegative" })))
        }
    })
    .collect()
}

/// Log-Harnack check: `(P_T log f)(ν_0) ≤ log (P_T f)(μ_0) + Ent`, with the
/// relative entropy estimated by the Girsanov energy.
pub fn log_harnack_check(
    model: &dyn CoefficientModel,
    mu0: &EmpiricalPathMeasure,
    nu0: &EmpiricalPathMeasure,
    f: &dyn PathFunctional,
    config: &SimConfig,
) -> Result<HarnackReport> {
    let out = coupled_simulate(model, mu0, nu0, config)?;
    harnack_from_coupling(&out, f)
}

pub fn harnack_from_coupling(out: &CouplingOutput, f: &dyn PathFunctional) -> Result<HarnackReport> {
    let fx = eval_positive(f, out.samples.iter().map(|s| s.x_end.clone()), true)?;
    let fref = eval_positive(f, out.reference.segments().map(|s| s.to_owned()), true)?;
    let w = out.weights();
    let lhs_i: Vec<f64> = w.iter().zip(&fx).map(|(r, v)| r * v.ln()).collect();
    let ent_i: Vec<f64> = w.iter().zip(&out.samples).map(|(r, s)| 0.5 * r * s.energy).collect();
    let d_i: Vec<f64> = ent_i.iter().zip(&lhs_i).map(|(e, l)| e - l).collect();
    let lhs = mean_stderr(&lhs_i);
    let ent = mean_stderr(&ent_i);
    let dd = mean_stderr(&d_i);
    let fr = mean_stderr(&fref);
    let rhs_base = fr.mean.ln();
    let rhs_stderr = fr.stderr / fr.mean;
    let mw = mean_stderr(&w);
    Ok(HarnackReport {
        t: out.horizon,
        lhs: lhs.mean,
        lhs_stderr: lhs.stderr,
        rhs_base,
        rhs_stderr,
        entropy_term: ent.mean,
        entropy_stderr: ent.stderr,
        margin: rhs_base + dd.mean,
        stderr: (dd.stderr * dd.stderr + rhs_stderr * rhs_stderr).sqrt(),
        n_samples: fx.len(),
        mean_weight: mw.mean,
        weight_stderr: mw.stderr,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerHarnackReport {
    pub t: f64,
    pub p: f64,
    /// `(Ê[R_T f(X_T)])^p`, estimating `(P_T f)^p(ν_0)`.
    pub lhs: f64,
    /// `(Ê R_T^{p/(p−1)})^{p−1} · Ê f(X_T)^p`
    pub rhs: f64,
    pub weight_moment: f64,
    pub entropy_term: f64,
    pub margin: f64,
    pub stderr: f64,
    pub n_samples: usize,
}

/// Power-Harnack check with `p > 1`, both sides from the same coupled runs.
pub fn power_harnack_check(
    model: &dyn CoefficientModel,
    mu0: &EmpiricalPathMeasure,
    nu0: &EmpiricalPathMeasure,
    f: &dyn PathFunctional,
    p: f64,
    config: &SimConfig,
) -> Result<PowerHarnackReport> {
    if !(p > 1.0) || !p.is_finite() {
        return Err(Error::Refused(format!("power-Harnack needs p > 1, got {p}")));
    }
    let out = coupled_simulate(model, mu0, nu0, config)?;
    power_harnack_from_coupling(&out, f, p)
}

pub fn power_harnack_from_coupling(out: &CouplingOutput, f: &dyn PathFunctional, p: f64) -> Result<PowerHarnackReport> {
    if !(p > 1.0) || !p.is_finite() {
        return Err(Error::Refused(format!("power-Harnack needs p > 1, got {p}")));
    }
    let fx = eval_positive(f, out.samples.iter().map(|s| s.x_end.clone()), false)?;
    let w = out.weights();
    let qexp = p / (p - 1.0);
    let rf: Vec<f64> = w.iter().zip(&fx).map(|(r, v)| r * v).collect();
    let rq: Vec<f64> = w.iter().map(|r| r.powf(qexp)).collect();
    let fp: Vec<f64> = fx.iter().map(|v| v.powf(p)).collect();
    let a = mean_stderr(&rf).mean;
    let b = mean_stderr(&rq).mean;
    let c = mean_stderr(&fp).mean;
    let lhs = a.powf(p);
    let rhs = b.powf(p - 1.0) * c;
    // Delta method on margin = B^{p−1}C − A^p.
    let lin: Vec<f64> = (0..fx.len())
        .map(|i| {
            (p - 1.0) * b.powf(p - 2.0) * c * (rq[i] - b) + b.powf(p - 1.0) * (fp[i] - c) - p * a.powf(p - 1.0) * (rf[i] - a)
        })
        .collect();
    let ent: Vec<f64> = w.iter().zip(&out.samples).map(|(r, s)| 0.5 * r * s.energy).collect();
    Ok(PowerHarnackReport {
        t: out.horizon,
        p,
        lhs,
        rhs,
        weight_moment: b,
        entropy_term: mean_stderr(&ent).mean,
        margin: rhs - lhs,
        stderr: mean_stderr(&lin).stderr,
        n_samples: fx.len(),
    })
}
