//! Shift-Harnack inequality and integration by parts for additive noise.
//!
//! For `η ∈ H¹` and `T > r0` the control
//!
//! ```text
//! Φ(t) = η(−r0)/(T−r0)   on [0, T−r0],     Φ(t) = η'(t−T)   on (T−r0, T]
//! Θ(t) = ∫_0^{t⁺} Φ(s) ds
//! ```
//!
//! moves the segment at `T` by exactly `η`, and
//! `E(∇_η f)(X_T) = E[f(X_T) M(T)]` with
//! `M(T) = Σ⟨σ⁻¹(Φ − ∇_{Θ_t} b(t,·,μ_t)(X_t)), ΔW⟩`.

use rayon::prelude::*;
use serde::Serialize;

use crate::coupling::{mat_vec, noise_matrices, require_additive};
use crate::error::{Error, Result};
use crate::functionals::PathFunctional;
use crate::models::{drift_directional_or_fd, CoefficientModel};
use crate::pathspace::{h1_norm_sq, CameronMartinVector, PathGrid, Segment, SegmentView};
use crate::rng::NoiseSource;
use crate::simulate::{record_flow, record_flow_with_end, refined_increment, MeasureFlow, PathHistory, SimConfig};
use crate::stats::{mean_stderr, MeanEstimate};
use crate::transport::{EmpiricalPathMeasure, PathMeasure};

/// Noise role of the weighted samples.
pub const IBP_ROLE: &str = "ibp";

#[derive(Debug, Clone)]
pub struct ShiftPlan {
    eta: CameronMartinVector,
    horizon: f64,
    steps: usize,
    /// `Φ` on step `k`, `steps·d` values.
    phi: Vec<f64>,
    /// `Θ` at `t_k − r0 + jh`: `m` leading zeros, then `Θ(t_0), …, Θ(t_K)`.
    theta: Vec<f64>,
}

impl ShiftPlan {
    pub fn eta(&self) -> &CameronMartinVector {
        &self.eta
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn grid(&self) -> PathGrid {
        self.eta.grid()
    }

    pub fn phi(&self, k: usize) -> &[f64] {
        let d = self.eta.dim();
        &self.phi[k * d..(k + 1) * d]
    }

    /// The segment `Θ_{t_k}`.
    pub fn theta_segment(&self, k: usize) -> SegmentView<'_> {
        let d = self.eta.dim();
        let pts = self.grid().points();
        SegmentView::new_unchecked(self.grid(), d, &self.theta[k * d..(k + pts) * d])
    }

    /// `|η(−r0)|²/(T−r0) + ‖η‖²_{H¹} = ∫_0^T |Φ|²`.
    pub fn energy(&self) -> f64 {
        let s = self.eta.start();
        s.iter().map(|v| v * v).sum::<f64>() / (self.horizon - self.grid().r0()) + h1_norm_sq(&self.eta)
    }
}

pub fn build_shift_plan(eta: &CameronMartinVector, horizon: f64) -> Result<ShiftPlan> {
    let grid = eta.grid();
    let r0 = grid.r0();
    if !(horizon > r0) {
        return Err(Error::Refused(format!("horizon {horizon} must exceed the delay {r0}")));
    }
    let steps = grid.steps_in(horizon)?;
    let m = grid.m();
    let d = eta.dim();
    let lead = steps - m;
    let tau = lead as f64 * grid.dt();
    let mut phi = Vec::with_capacity(steps * d);
    for k in 0..steps {
        if k < lead {
            phi.extend(eta.start().iter().map(|v| v / tau));
        } else {
            phi.extend_from_slice(eta.derivative_on(k - lead));
        }
    }
    let h = grid.dt();
    let mut theta = vec![0.0; (m + 1) * d];
    for k in 0..steps {
        let base = (m + k) * d;
        for c in 0..d {
            let next = theta[base + c] + h * phi[k * d + c];
            theta.push(next);
        }
    }
    Ok(ShiftPlan { eta: eta.clone(), horizon, steps, phi, theta })
}

/// `M(T)` along the path driven by `dw` (`steps·d` increments) from `x0`
/// under the frozen flow, and the segment `X_T`.
pub fn malliavin_weight(
    model: &dyn CoefficientModel,
    plan: &ShiftPlan,
    flow: &MeasureFlow,
    x0: SegmentView<'_>,
    dw: &[f64],
) -> Result<(f64, Segment)> {
    require_additive(model)?;
    let d = model.dim();
    if dw.len() != plan.steps * d || flow.features.len() < plan.steps {
        return Err(Error::SizeMismatch("increments or flow do not cover the plan".into()));
    }
    let mats = noise_matrices(model, plan.grid().dt(), plan.steps)?;
    let mut hist = PathHistory::new(x0);
    let mut s = WeightScratch::new(d);
    let mut weight = 0.0;
    for k in 0..plan.steps {
        weight += weight_step(model, plan, flow, &mats, &mut hist, k, &dw[k * d..(k + 1) * d], &mut s);
    }
    Ok((weight, hist.view().to_owned()))
}

struct WeightScratch {
    b: Vec<f64>,
    grad: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    sdw: Vec<f64>,
    next: Vec<f64>,
    z: Vec<f64>,
    dw: Vec<f64>,
}

impl WeightScratch {
    fn new(d: usize) -> Self {
        let z = || vec![0.0; d];
        Self { b: z(), grad: z(), u: z(), v: z(), sdw: z(), next: z(), z: z(), dw: z() }
    }
}

/// One Euler step of `X`; returns the weight increment.
#[allow(clippy::too_many_arguments)]
fn weight_step(
    model: &dyn CoefficientModel,
    plan: &ShiftPlan,
    flow: &MeasureFlow,
    mats: &crate::coupling::NoiseMatrices,
    hist: &mut PathHistory,
    k: usize,
    dw: &[f64],
    s: &mut WeightScratch,
) -> f64 {
    let d = model.dim();
    let h = plan.grid().dt();
    let t = k as f64 * h;
    let feats = &flow.features[k];
    let xi = hist.view();
    model.drift(t, xi, feats, &mut s.b);
    drift_directional_or_fd(model, t, xi, plan.theta_segment(k), feats, &mut s.grad);
    for (c, u) in s.u.iter_mut().enumerate() {
        *u = plan.phi(k)[c] - s.grad[c];
    }
    mat_vec(&mats.inv[k], d, &s.u, &mut s.v);
    mat_vec(&mats.sigma[k], d, dw, &mut s.sdw);
    let x = xi.endpoint();
    for c in 0..d {
        s.next[c] = x[c] + s.b[c] * h + s.sdw[c];
    }
    hist.push(&s.next);
    s.v.iter().zip(dw).map(|(a, b)| a * b).sum()
}

/// Weighted samples: `X` from segment `i` of `mu0` against the frozen flow
/// of the particle system from `mu0`, with independent noise.
pub fn weighted_paths(
    model: &dyn CoefficientModel,
    mu0: &EmpiricalPathMeasure,
    plan: &ShiftPlan,
    config: &SimConfig,
) -> Result<Vec<(f64, Segment)>> {
    require_additive(model)?;
    if (config.horizon - plan.horizon).abs() > 1e-12 * plan.horizon || config.grid != plan.grid() {
        return Err(Error::InvalidArgument("shift plan and run config disagree on horizon or grid".into()));
    }
    if plan.eta.dim() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: plan.eta.dim() });
    }
    let flow = record_flow(model, mu0, config)?;
    let d = model.dim();
    let h = config.grid.dt();
    let mats = noise_matrices(model, h, plan.steps)?;
    let noise = NoiseSource::new(config.seed, &format!("{}/{IBP_ROLE}", config.role), d);
    let q = config.noise_refinement;
    let out: Vec<(f64, Segment)> = (0..mu0.len())
        .into_par_iter()
        .map(|i| {
            let mut hist = PathHistory::new(mu0.segment(i));
            let mut stream = noise.stream_at(i as u64, 0);
            let mut s = WeightScratch::new(d);
            let mut dw = vec![0.0; d];
            let mut weight = 0.0;
            for k in 0..plan.steps {
                refined_increment(&mut stream, h, q, &mut s.z, &mut s.dw);
                dw.copy_from_slice(&s.dw);
                weight += weight_step(model, plan, &flow, &mats, &mut hist, k, &dw, &mut s);
            }
            (weight, hist.view().to_owned())
        })
        .collect();
    for (i, (w, x)) in out.iter().enumerate() {
        if !w.is_finite() || x.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: plan.steps, particle: i });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IbpReport {
    pub t: f64,
    /// `Ê(∇_η f)(X_T)`
    pub lhs: f64,
    pub lhs_stderr: f64,
    /// `Ê[f(X_T) M(T)]`
    pub rhs: f64,
    pub rhs_stderr: f64,
    /// Standard error of the paired difference `lhs − rhs`.
    pub stderr: f64,
    pub mean_weight: f64,
    pub weight_stderr: f64,
    pub n_samples: usize,
}

impl IbpReport {
    pub fn from_samples(t: f64, samples: &[(f64, Segment)], eta: &CameronMartinVector, f: &dyn PathFunctional) -> Result<Self> {
        let mut grads = Vec::with_capacity(samples.len());
        let mut prods = Vec::with_capacity(samples.len());
        for (m, x) in samples {
            let g = f
                .directional(x.view(), eta.as_segment())
                .ok_or_else(|| Error::Refused("functional has no directional derivative".into()))?;
            grads.push(g);
            prods.push(f.value(x.view()) * m);
        }
        let diff: Vec<f64> = grads.iter().zip(&prods).map(|(a, b)| a - b).collect();
        let weights: Vec<f64> = samples.iter().map(|s| s.0).collect();
        let (l, r, dd, w) = (mean_stderr(&grads), mean_stderr(&prods), mean_stderr(&diff), mean_stderr(&weights));
        Ok(Self {
            t,
            lhs: l.mean,
            lhs_stderr: l.stderr,
            rhs: r.mean,
            rhs_stderr: r.stderr,
            stderr: dd.stderr,
            mean_weight: w.mean,
            weight_stderr: w.stderr,
            n_samples: samples.len(),
        })
    }
}

pub fn ibp_check(
    model: &dyn CoefficientModel,
    mu0: &EmpiricalPathMeasure,
    eta: &CameronMartinVector,
    f: &dyn PathFunctional,
    config: &SimConfig,
) -> Result<IbpReport> {
    let plan = build_shift_plan(eta, config.horizon)?;
    let samples = weighted_paths(model, mu0, &plan, config)?;
    IbpReport::from_samples(config.horizon, &samples, eta, f)
}

/// `Λ(1 + K T²)·(|η(−r0)|²/(T−r0) + ‖η‖²_{H¹})` with `Λ = λ²`, `K` the
/// squared drift-gradient bound.
pub fn shift_cost(model: &dyn CoefficientModel, plan: &ShiftPlan) -> f64 {
    let c = model.constants();
    let t = plan.horizon;
    c.lambda * c.lambda * (1.0 + t * t * c.grad_b_sq) * plan.energy()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogShiftReport {
    /// `Ê log f(X_T)`
    pub lhs: f64,
    /// `log Ê f(η + X_T) + cost`
    pub rhs: f64,
    pub margin: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShiftHarnackReport {
    pub t: f64,
    pub p: f64,
    /// `(Ê f(X_T))^p`
    pub lhs: f64,
    /// `Ê f^p(η + X_T)`
    pub rhs_base: f64,
    pub factor: f64,
    /// `rhs_base · factor`
    pub rhs: f64,
    pub margin: f64,
    pub stderr: f64,
    /// Present when `f > 0` on every sample.
    pub log: Option<LogShiftReport>,
    pub n_samples: usize,
}

fn shifted(x: &Segment, eta: &CameronMartinVector) -> Segment {
    let v = x.values().iter().zip(eta.values()).map(|(a, b)| a + b).collect();
    Segment::new(x.grid(), x.dim(), v).expect("finite shifted segment")
}

pub fn shift_harnack_check(
    model: &dyn CoefficientModel,
    mu0: &EmpiricalPathMeasure,
    eta: &CameronMartinVector,
    f: &dyn PathFunctional,
    p: f64,
    config: &SimConfig,
) -> Result<ShiftHarnackReport> {
    if !(p > 1.0) || !p.is_finite() {
        return Err(Error::Refused(format!("shift-Harnack needs p > 1, got {p}")));
    }
    require_additive(model)?;
    let plan = build_shift_plan(eta, config.horizon)?;
    let (_, ens) = record_flow_with_end(model, mu0, config)?;
    let ends: Vec<Segment> = (0..ens.len()).map(|i| ens.segment(i).to_owned()).collect();
    shift_harnack_from_samples(model, &plan, f, p, &ends)
}

pub fn shift_harnack_from_samples(
    model: &dyn CoefficientModel,
    plan: &ShiftPlan,
    f: &dyn PathFunctional,
    p: f64,
    ends: &[Segment],
) -> Result<ShiftHarnackReport> {
    let eta = plan.eta();
    let mut fx = Vec::with_capacity(ends.len());
    let mut fs = Vec::with_capacity(ends.len());
    for x in ends {
        let (a, b) = (f.value(x.view()), f.value(shifted(x, eta).view()));
        if !(a >= 0.0 && b >= 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::InvalidArgument(format!("functional must be nonnegative and finite, got {a}, {b}")));
        }
        fx.push(a);
        fs.push(b);
    }
    let cost = shift_cost(model, plan);
    let factor = (p * cost / ((p - 1.0) * (p - 1.0))).exp();
    let fa = mean_stderr(&fx).mean;
    let gp: Vec<f64> = fs.iter().map(|v| v.powf(p)).collect();
    let ga = mean_stderr(&gp).mean;
    let lin: Vec<f64> = (0..fx.len()).map(|i| factor * (gp[i] - ga) - p * fa.powf(p - 1.0) * (fx[i] - fa)).collect();
    let lhs = fa.powf(p);
    let rhs = ga * factor;
    let log = if fx.iter().chain(&fs).all(|v| *v > 0.0) {
        let lf: Vec<f64> = fx.iter().map(|v| v.ln()).collect();
        let sm = mean_stderr(&fs).mean;
        let l = mean_stderr(&lf).mean;
        let r = sm.ln() + cost;
        let lin: Vec<f64> = (0..fx.len()).map(|i| (fs[i] - sm) / sm - (lf[i] - l)).collect();
        Some(LogShiftReport { lhs: l, rhs: r, margin: r - l, stderr: mean_stderr(&lin).stderr })
    } else {
        None
    };
    Ok(ShiftHarnackReport {
        t: plan.horizon,
        p,
        lhs,
        rhs_base: ga,
        factor,
        rhs,
        margin: rhs - lhs,
        stderr: mean_stderr(&lin).stderr,
        log,
        n_samples: fx.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinnedEstimate {
    pub bins: usize,
    pub estimate: MeanEstimate,
}

/// Second-moment estimates of the density ratio for the `η`-derivative of
/// the law at `T`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityBoundReport {
    /// `Λ(1 + K T²)(|η(−r0)|²/(T−r0) + ‖η‖²_{H¹})`
    pub bound: f64,
    /// `Ê M(T)²`
    pub weight_sq: MeanEstimate,
    /// `Ê[ĝ(X_T) M(T)]` with `ĝ` the binned regression of `M(T)` on the
    /// first coordinate of `X_T(0)`, equal-count bins.
    pub binned: Vec<BinnedEstimate>,
}

pub fn binned_regression_sq(samples: &[(f64, Segment)], bins: usize) -> Result<MeanEstimate> {
    let n = samples.len();
    if bins == 0 || bins > n {
        return Err(Error::InvalidArgument(format!("{bins} bins for {n} samples")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| samples[a].1.endpoint()[0].total_cmp(&samples[b].1.endpoint()[0]));
    let mut per = vec![0.0; n];
    for b in 0..bins {
        let (lo, hi) = (b * n / bins, (b + 1) * n / bins);
        let idx = &order[lo..hi];
        let g = idx.iter().map(|&i| samples[i].0).sum::<f64>() / idx.len() as f64;
        for &i in idx {
            per[i] = g * samples[i].0;
        }
    }
    Ok(mean_stderr(&per))
}

pub fn density_bound_check(
    model: &dyn CoefficientModel,
    mu0: &EmpiricalPathMeasure,
    eta: &CameronMartinVector,
    config: &SimConfig,
    bins: &[usize],
) -> Result<DensityBoundReport> {
    let plan = build_shift_plan(eta, config.horizon)?;
    let samples = weighted_paths(model, mu0, &plan, config)?;
    let sq: Vec<f64> = samples.iter().map(|s| s.0 * s.0).collect();
    let binned = bins
        .iter()
        .map(|&b| Ok(BinnedEstimate { bins: b, estimate: binned_regression_sq(&samples, b)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(DensityBoundReport { bound: shift_cost(model, &plan), weight_sq: mean_stderr(&sq), binned })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::FunctionalSpec;
    use crate::models::{make_linear_meanfield_delay, ConstantDrift, LinearMeanFieldDelay};
    use crate::samplers::InitSampler;
    use crate::simulate::record_flow;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn ou_delay() -> LinearMeanFieldDelay {
        let i = DMatrix::identity(1, 1);
        make_linear_meanfield_delay(1, -1.0 * &i, 0.3 * &i, 0.2 * &i, i.clone(), 1.0).unwrap()
    }

    fn ramp(g: PathGrid, slope: f64) -> CameronMartinVector {
        CameronMartinVector::from_values(&Segment::from_fn(g, 1, |s| vec![0.2 + slope * (s + 1.0)]).unwrap())
    }

    #[test]
    fn zero_eta_gives_zero_plan_and_weight() {
        let g = PathGrid::new(1.0, 4).unwrap();
        let plan = build_shift_plan(&CameronMartinVector::zeros(g, 1), 2.0).unwrap();
        assert!(plan.phi.iter().chain(&plan.theta).all(|v| *v == 0.0));
        let m = ou_delay();
        let init = InitSampler::ConstantPoint { mean: vec![0.0], std: 1.0 }.sample(g, 20, 1, "i").unwrap();
        let s = weighted_paths(&m, &init, &plan, &SimConfig::new(20, 2.0, g, 1)).unwrap();
        assert!(s.iter().all(|(w, _)| *w == 0.0));
        assert!(build_shift_plan(&CameronMartinVector::zeros(g, 1), 1.0).is_err());
    }

    #[test]
    fn theta_ends_at_eta() {
        let g = PathGrid::new(1.0, 8).unwrap();
        let eta = ramp(g, 0.7);
        let plan = build_shift_plan(&eta, 2.5).unwrap();
        let end = plan.theta_segment(plan.steps());
        for k in 0..=8 {
            assert!((end.point(k)[0] - eta.values()[k]).abs() < 1e-10 * 8.0);
        }
        assert!(plan.theta_segment(0).values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn weight_matches_hand_assembly_on_one_path() {
        let g = PathGrid::new(1.0, 4).unwrap();
        let m = ou_delay();
        let eta = ramp(g, -0.5);
        let plan = build_shift_plan(&eta, 2.0).unwrap();
        let init = InitSampler::ConstantPoint { mean: vec![0.3], std: 1.0 }.sample(g, 10, 1, "i").unwrap();
        let flow = record_flow(&m, &init, &SimConfig::new(10, 2.0, g, 2)).unwrap();
        let dw: Vec<f64> = (0..8).map(|k| 0.1 * (k as f64 - 3.5)).collect();
        let (w, _) = malliavin_weight(&m, &plan, &flow, init.segment(0), &dw).unwrap();
        // ∇_Θ b = A0 Θ(t) + A1 Θ(t − r0), σ = 1
        let mut expect = 0.0;
        for k in 0..8 {
            let th = plan.theta_segment(k);
            let grad = -1.0 * th.endpoint()[0] + 0.3 * th.start()[0];
            expect += (plan.phi(k)[0] - grad) * dw[k];
        }
        assert!((w - expect).abs() < 1e-14);
    }

    #[test]
    fn zero_drift_weight_isometry() {
        let g = PathGrid::new(1.0, 4).unwrap();
        let m = ConstantDrift::new(vec![0.0], DMatrix::identity(1, 1)).unwrap();
        let eta = ramp(g, 1.0);
        let plan = build_shift_plan(&eta, 2.0).unwrap();
        let n = 20_000;
        let init = InitSampler::ConstantPoint { mean: vec![0.0], std: 1.0 }.sample(g, n, 1, "i").unwrap();
        let s = weighted_paths(&m, &init, &plan, &SimConfig::new(n, 2.0, g, 5)).unwrap();
        let sq: Vec<f64> = s.iter().map(|(w, _)| w * w).collect();
        let est = mean_stderr(&sq);
        let exact = plan.energy();
        assert!((est.mean - exact).abs() < 3.0 * est.stderr, "{est:?} vs {exact}");
        let mean = mean_stderr(&s.iter().map(|x| x.0).collect::<Vec<_>>());
        assert!(mean.mean.abs() < 3.0 * mean.stderr);
    }

    #[test]
    fn ibp_linear_and_constant_functionals() {
        let g = PathGrid::new(1.0, 8).unwrap();
        let m = ou_delay();
        let eta = ramp(g, 0.5);
        let n = 20_000;
        let init = InitSampler::ConstantPoint { mean: vec![0.0], std: 1.0 }.sample(g, n, 1, "i").unwrap();
        let cfg = SimConfig::new(n, 2.0, g, 6);
        let lin = FunctionalSpec::LinearEndpoint { a: vec![1.5] };
        let r = ibp_check(&m, &init, &eta, &lin, &cfg).unwrap();
        assert!((r.lhs - 1.5 * eta.end()[0]).abs() < 1e-12);
        assert!((r.lhs - r.rhs).abs() < 3.0 * r.stderr, "{r:?}");
        let one = FunctionalSpec::Constant { value: 2.0 };
        let r = ibp_check(&m, &init, &eta, &one, &cfg).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert!(r.rhs.abs() < 3.0 * r.rhs_stderr);
    }

    #[test]
    fn shift_harnack_trivial_cases() {
        let g = PathGrid::new(1.0, 8).unwrap();
        let m = ou_delay();
        let init = InitSampler::ConstantPoint { mean: vec![0.0], std: 1.0 }.sample(g, 2000, 1, "i").unwrap();
        let cfg = SimConfig::new(2000, 2.0, g, 6);
        let f = FunctionalSpec::LogisticEndpoint { a: vec![1.0] };
        let zero = shift_harnack_check(&m, &init, &CameronMartinVector::zeros(g, 1), &f, 2.0, &cfg).unwrap();
        assert_eq!(zero.factor, 1.0);
        assert!(zero.margin >= -3.0 * zero.stderr);
        let one = FunctionalSpec::Constant { value: 1.0 };
        let r = shift_harnack_check(&m, &init, &ramp(g, 1.0), &one, 2.0, &cfg).unwrap();
        assert_eq!(r.lhs, 1.0);
        assert!(r.rhs >= 1.0 && r.factor > 1.0);
        assert!(shift_harnack_check(&m, &init, &ramp(g, 1.0), &one, 1.0, &cfg).is_err());
    }

    #[test]
    fn binned_estimates_bounded_by_second_moment() {
        let g = PathGrid::new(1.0, 8).unwrap();
        let m = ou_delay();
        let n = 4000;
        let init = InitSampler::ConstantPoint { mean: vec![0.0], std: 1.0 }.sample(g, n, 1, "i").unwrap();
        let r = density_bound_check(&m, &init, &ramp(g, 0.4), &SimConfig::new(n, 2.0, g, 3), &[8, 16, 32]).unwrap();
        for b in &r.binned {
            // Σ n_b ĝ_b² ≤ Σ M² by Cauchy–Schwarz within each bin
            assert!(b.estimate.mean <= r.weight_sq.mean + 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn theta_transport_random_eta(vals in prop::collection::vec(-3.0f64..3.0, 2 * 17), extra in 1usize..20) {
            let g = PathGrid::new(1.0, 16).unwrap();
            let eta = CameronMartinVector::from_values(&Segment::new(g, 2, vals).unwrap());
            let t = 1.0 + extra as f64 / 16.0;
            let plan = build_shift_plan(&eta, t).unwrap();
            let end = plan.theta_segment(plan.steps());
            for (a, b) in end.values().iter().zip(eta.values()) {
                prop_assert!((a - b).abs() <= 1e-10 * 16.0);
            }
        }
    }
}
