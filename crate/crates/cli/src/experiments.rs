//! One function per experiment kind. Each returns its summary line; files go
//! through [`OutputDir`] after the manifest.

use mvdelay::bounds::{contraction_bound_with, exo_criterion_with, ContractionParams};
use mvdelay::coupling::{coupled_simulate, harnack_from_coupling, power_harnack_from_coupling};
use mvdelay::functionals::FunctionalSpec;
use mvdelay::ibp::{binned_regression_sq, build_shift_plan, shift_cost, shift_harnack_check, weighted_paths, IbpReport};
use mvdelay::models::CoefficientModel;
use mvdelay::simulate::{picard_solve, simulate_mckean, verify_fpke_weak_form, SimConfig};
use mvdelay::stats::{halving_constant, linear_fit, mean_stderr};
use mvdelay::transport::{mean_gap_lower_bound, paired_cost, w2_exact, DEFAULT_EXACT_CAP};
use mvdelay::{EmpiricalPathMeasure, PathGrid, PathMeasure};
use serde::Serialize;

use crate::config::{ConfigError, ExperimentConfig, ExperimentKind};
use crate::output::{BoundRow, DistanceRow, FpkeRow, HarnackRow, OutputDir, OutputError, PicardRow, ShiftRow};

/// Role label of initial-condition sampling; `μ_0` and `ν_0` share it, so
/// sample `i` of both uses the same normals.
pub const INIT_ROLE: &str = "init";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("runtime abort: {0}")]
    Runtime(#[from] mvdelay::Error),
    #[error(transparent)]
    Output(#[from] OutputError),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            _ => 3,
        }
    }
}

pub fn outputs(kind: ExperimentKind, cfg: &ExperimentConfig) -> Vec<&'static str> {
    use ExperimentKind::*;
    let mut v = match kind {
        Simulate => vec!["snapshots.csv"],
        Picard => vec!["picard.csv"],
        Contract => vec!["distances.csv", "bound.csv"],
        Exo => vec!["exo.csv", "distances.csv"],
        Harnack | PowerHarnack => vec!["harnack.csv"],
        Ibp => vec!["ibp.csv"],
        ShiftHarnack => vec!["shift.csv", "density.csv"],
        FpkeCheck => vec!["fpke.csv"],
    };
    if cfg.halving && kind == Ibp {
        v.push("ibp_halving.csv");
    }
    v
}

struct Setup {
    grid: PathGrid,
    model: Box<dyn CoefficientModel>,
    sim: SimConfig,
    mu0: EmpiricalPathMeasure,
}

fn setup(cfg: &ExperimentConfig) -> Result<Setup, RunError> {
    let grid = cfg.path_grid()?;
    let model = cfg.model.build(grid.r0())?;
    let mu0 = cfg.mu_sampler().sample(grid, cfg.n, cfg.seed, INIT_ROLE)?;
    Ok(Setup { grid, model, sim: cfg.sim_config(grid), mu0 })
}

fn nu0(cfg: &ExperimentConfig, grid: PathGrid) -> Result<EmpiricalPathMeasure, RunError> {
    let s = cfg.init_nu.as_ref().ok_or_else(|| ConfigError::Invalid("init_nu is required".into()))?;
    Ok(s.sample(grid, cfg.n, cfg.seed, INIT_ROLE)?)
}

fn functional(cfg: &ExperimentConfig) -> Result<&FunctionalSpec, RunError> {
    Ok(cfg.functional.as_ref().ok_or_else(|| ConfigError::Invalid("functional is required".into()))?)
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

pub fn run(kind: ExperimentKind, cfg: &ExperimentConfig, out: &OutputDir) -> Result<String, RunError> {
    use ExperimentKind::*;
    match kind {
        Simulate => simulate(cfg, out),
        Picard => picard(cfg, out),
        Contract => contract(cfg, out),
        Exo => exo(cfg, out),
        Harnack => harnack(cfg, out, None),
        PowerHarnack => harnack(cfg, out, cfg.p),
        Ibp => ibp(cfg, out),
        ShiftHarnack => shift_harnack(cfg, out),
        FpkeCheck => fpke(cfg, out),
    }
}

fn simulate(cfg: &ExperimentConfig, out: &OutputDir) -> Result<String, RunError> {
    let s = setup(cfg)?;
    let times = if cfg.snapshot_times.is_empty() { vec![cfg.horizon] } else { cfg.snapshot_times.clone() };
    let res = simulate_mckean(s.model.as_ref(), &s.mu0, &s.sim, &times)?;
    let d = s.model.dim();
    let mut header = vec!["t".to_string(), "particle".into(), "t_offset".into()];
    header.extend((0..d).map(|c| format!("x_{c}")));
    let grid = s.grid;
    let rows = res.snapshots.iter().flat_map(|snap| {
        (0..snap.measure.len()).flat_map(move |i| {
            let seg = snap.measure.segment(i);
            (0..grid.points()).map(move |k| {
                let mut r = vec![fmt(snap.t), i.to_string(), fmt(grid.offset(k))];
                r.extend(seg.point(k).iter().map(|v| fmt(*v)));
                r
            })
        })
    });
    out.write_records("snapshots.csv", &header, rows)?;
    let last = res.snapshots.last().map(|s| s.measure.mean_endpoint()).unwrap_or_default();
    Ok(format!("simulate: n={} T={} snapshots={} mean_endpoint={:?}", cfg.n, cfg.horizon, res.snapshots.len(), last))
}

fn picard(cfg: &ExperimentConfig, out: &OutputDir) -> Result<String, RunError> {
    let s = setup(cfg)?;
    let (rep, _) = picard_solve(s.model.as_ref(), &s.mu0, &s.sim)?;
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for (w, win) in rep.windows.iter().enumerate() {
        for (n, g) in win.gaps.iter().enumerate() {
            let ratio = win.ratios.get(n).copied().flatten();
            if n >= 1 {
                worst = worst.max(ratio.unwrap_or(0.0));
            }
            rows.push(PicardRow { window: w, n, gap: *g, ratio });
        }
    }
    out.write_rows("picard.csv", &rows)?;
    Ok(format!("picard: window={} windows={} max_ratio_n>=1={worst}", rep.window, rep.windows.len()))
}

fn params(cfg: &ExperimentConfig, model: &dyn CoefficientModel, grid: PathGrid) -> ContractionParams {
    cfg.contraction.unwrap_or_else(|| ContractionParams::from_constants(grid.r0(), model.constants()))
}

/// Distances between `μ̂_t` and `ν̂_t` driven by the same noise.
fn distance_rows(t: f64, mu: &EmpiricalPathMeasure, nu: &EmpiricalPathMeasure) -> Result<Vec<DistanceRow>, RunError> {
    let n = mu.len();
    let mut rows = vec![
        DistanceRow { t, n_particles: n, method: "paired", w2: paired_cost(mu, nu)?, converged: true },
        DistanceRow { t, n_particles: n, method: "mean_gap", w2: mean_gap_lower_bound(mu, nu)?, converged: true },
    ];
    if n <= DEFAULT_EXACT_CAP {
        rows.push(DistanceRow { t, n_particles: n, method: "exact", w2: w2_exact(mu, nu)?, converged: true });
    }
    Ok(rows)
}

fn paired_runs(
    cfg: &ExperimentConfig,
    s: &Setup,
    times: &[f64],
) -> Result<Vec<(f64, EmpiricalPathMeasure, EmpiricalPathMeasure)>, RunError> {
    let nu0 = nu0(cfg, s.grid)?;
    let a = simulate_mckean(s.model.as_ref(), &s.mu0, &s.sim, times)?;
    let b = simulate_mckean(s.model.as_ref(), &nu0, &s.sim, times)?;
    Ok(a.snapshots.into_iter().zip(b.snapshots).map(|(x, y)| (x.t, x.measure, y.measure)).collect())
}

fn contract(cfg: &ExperimentConfig, out: &OutputDir) -> Result<String, RunError> {
    let s = setup(cfg)?;
    let mut times = vec![0.0];
    times.extend(if cfg.checkpoints.is_empty() { vec![cfg.horizon] } else { cfg.checkpoints.clone() });
    let runs = paired_runs(cfg, &s, &times)?;
    let p = params(cfg, s.model.as_ref(), s.grid);
    let eps = cfg.eps_grid.unwrap_or_default();
    let w0_sq = paired_cost(&runs[0].1, &runs[0].2)?.powi(2);
    let mut dist = Vec::new();
    let mut bounds = Vec::new();
    let mut worst: f64 = 0.0;
    for (t, mu, nu) in &runs {
        let rows = distance_rows(*t, mu, nu)?;
        let b = contraction_bound_with(&p, w0_sq, *t, &eps);
        if b.bound > 0.0 {
            worst = worst.max(rows[0].w2.powi(2) / b.bound);
        }
        bounds.push(BoundRow { t: *t, bound: b.bound, eps_star: b.eps_star, delta_star: b.delta_star });
        dist.extend(rows);
    }
    out.write_rows("distances.csv", &dist)?;
    out.write_rows("bound.csv", &bounds)?;
    Ok(format!("contract: w0_sq={w0_sq} max(paired^2/bound)={worst}"))
}

#[derive(Serialize)]
struct ExoRow {
    holds: bool,
    best_rate: f64,
    best_eps: f64,
    best_delta: f64,
    lhs_min: f64,
    rhs: f64,
    fitted_slope: Option<f64>,
}

fn exo(cfg: &ExperimentConfig, out: &OutputDir) -> Result<String, RunError> {
    let s = setup(cfg)?;
    let p = params(cfg, s.model.as_ref(), s.grid);
    let rep = exo_criterion_with(&p, &cfg.eps_grid.unwrap_or_default());
    let times: Vec<f64> = if cfg.checkpoints.is_empty() {
        (1..=cfg.horizon.floor() as usize).map(|k| k as f64).collect()
    } else {
        cfg.checkpoints.clone()
    };
    let runs = paired_runs(cfg, &s, &times)?;
    let mut dist = Vec::new();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (t, mu, nu) in &runs {
        let rows = distance_rows(*t, mu, nu)?;
        let w = rows.last().expect("at least one distance").w2;
        if *t >= 1.0 && w > 0.0 {
            xs.push(*t);
            ys.push((w * w).ln());
        }
        dist.extend(rows);
    }
    let slope = (xs.len() >= 2).then(|| linear_fit(&xs, &ys).0);
    out.write_rows(
        "exo.csv",
        &[ExoRow {
            holds: rep.holds,
            best_rate: rep.best_rate,
            best_eps: rep.best_eps,
            best_delta: rep.best_delta,
            lhs_min: rep.lhs_min,
            rhs: rep.rhs,
            fitted_slope: slope,
        }],
    )?;
    out.write_rows("distances.csv", &dist)?;
    Ok(format!("exo: holds={} best_rate={} fitted_slope={slope:?}", rep.holds, rep.best_rate))
}

fn harnack(cfg: &ExperimentConfig, out: &OutputDir, p: Option<f64>) -> Result<String, RunError> {
    let s = setup(cfg)?;
    let nu0 = nu0(cfg, s.grid)?;
    let f = functional(cfg)?;
    let c = coupled_simulate(s.model.as_ref(), &s.mu0, &nu0, &s.sim)?;
    let w = c.mean_weight();
    let row = match p {
        None => {
            let r = harnack_from_coupling(&c, f)?;
            HarnackRow {
                t: r.t,
                p: None,
                lhs: r.lhs,
                rhs: r.rhs_base,
                entropy_term: r.entropy_term,
                margin: r.margin,
                stderr: r.stderr,
                n_samples: r.n_samples,
            }
        }
        Some(p) => {
            let r = power_harnack_from_coupling(&c, f, p)?;
            HarnackRow {
                t: r.t,
                p: Some(p),
                lhs: r.lhs,
                rhs: r.rhs,
                entropy_term: r.entropy_term,
                margin: r.margin,
                stderr: r.stderr,
                n_samples: r.n_samples,
            }
        }
    };
    out.write_rows("harnack.csv", &[&row])?;
    Ok(format!(
        "harnack: p={:?} margin={} stderr={} mean_weight={}±{} merged={} certificate_violations={}",
        p,
        row.margin,
        row.stderr,
        w.mean,
        w.stderr,
        c.all_merged(),
        c.certificate_violations
    ))
}

fn eta_id(cfg: &ExperimentConfig) -> String {
    cfg.eta_id.clone().unwrap_or_else(|| "eta".into())
}

/// One IBP run on `grid` with noise refinement `q`.
fn ibp_once(cfg: &ExperimentConfig, grid: PathGrid, q: usize) -> Result<IbpReport, RunError> {
    let model = cfg.model.build(grid.r0())?;
    let mu0 = cfg.mu_sampler().sample(grid, cfg.n, cfg.seed, INIT_ROLE)?;
    let eta = cfg.eta.as_ref().expect("validated").build(grid, model.dim())?;
    let mut sim = cfg.sim_config(grid);
    sim.noise_refinement = q;
    let plan = build_shift_plan(&eta, cfg.horizon)?;
    let samples = weighted_paths(model.as_ref(), &mu0, &plan, &sim)?;
    Ok(IbpReport::from_samples(cfg.horizon, &samples, &eta, functional(cfg)?)?)
}

#[derive(Serialize)]
struct HalvingRow {
    h: f64,
    lhs: f64,
    rhs: f64,
    stderr: f64,
    constant: f64,
    pass: bool,
}

fn ibp(cfg: &ExperimentConfig, out: &OutputDir) -> Result<String, RunError> {
    let grid = cfg.path_grid()?;
    let q = if cfg.halving { 2 } else { 1 };
    let r = ibp_once(cfg, grid, q)?;
    out.write_rows(
        "ibp.csv",
        &[ShiftRow {
            t: r.t,
            p: None,
            eta_id: eta_id(cfg),
            lhs: r.lhs,
            rhs: r.rhs,
            factor: None,
            margin: r.lhs - r.rhs,
            stderr: r.stderr,
        }],
    )?;
    let mut summary = format!("ibp: lhs={} rhs={} stderr={} mean_weight={}", r.lhs, r.rhs, r.stderr, r.mean_weight);
    if cfg.halving {
        let fine = ibp_once(cfg, grid.refined(), 1)?;
        let h = grid.dt();
        let c = halving_constant(r.lhs - r.rhs, fine.lhs - fine.rhs, h);
        let pass = (r.lhs - r.rhs).abs() <= (3.0 * r.stderr).max(c * h);
        out.write_rows(
            "ibp_halving.csv",
            &[
                HalvingRow { h, lhs: r.lhs, rhs: r.rhs, stderr: r.stderr, constant: c, pass },
                HalvingRow { h: h / 2.0, lhs: fine.lhs, rhs: fine.rhs, stderr: fine.stderr, constant: c, pass },
            ],
        )?;
        summary.push_str(&format!(" halving_constant={c} pass={pass}"));
    }
    Ok(summary)
}

#[derive(Serialize)]
struct DensityRow {
    bins: usize,
    estimate: f64,
    stderr: f64,
    bound: f64,
}

fn shift_harnack(cfg: &ExperimentConfig, out: &OutputDir) -> Result<String, RunError> {
    let s = setup(cfg)?;
    let eta = cfg.eta.as_ref().expect("validated").build(s.grid, s.model.dim())?;
    let f = functional(cfg)?;
    let p = cfg.p.expect("validated");
    let r = shift_harnack_check(s.model.as_ref(), &s.mu0, &eta, f, p, &s.sim)?;
    let id = eta_id(cfg);
    let mut rows = vec![ShiftRow {
        t: r.t,
        p: Some(p),
        eta_id: id.clone(),
        lhs: r.lhs,
        rhs: r.rhs,
        factor: Some(r.factor),
        margin: r.margin,
        stderr: r.stderr,
    }];
    let plan = build_shift_plan(&eta, cfg.horizon)?;
    let cost = shift_cost(s.model.as_ref(), &plan);
    if let Some(l) = r.log {
        rows.push(ShiftRow {
            t: r.t,
            p: None,
            eta_id: format!("{id}:log"),
            lhs: l.lhs,
            rhs: l.rhs,
            factor: Some(cost),
            margin: l.margin,
            stderr: l.stderr,
        });
    }
    out.write_rows("shift.csv", &rows)?;
    let samples = weighted_paths(s.model.as_ref(), &s.mu0, &plan, &s.sim)?;
    let sq: Vec<f64> = samples.iter().map(|x| x.0 * x.0).collect();
    let m2 = mean_stderr(&sq);
    let mut dens = vec![DensityRow { bins: 0, estimate: m2.mean, stderr: m2.stderr, bound: cost }];
    for b in [8, 16, 32] {
        if b <= samples.len() {
            let e = binned_regression_sq(&samples, b)?;
            dens.push(DensityRow { bins: b, estimate: e.mean, stderr: e.stderr, bound: cost });
        }
    }
    out.write_rows("density.csv", &dens)?;
    Ok(format!("shift-harnack: p={p} margin={} stderr={} factor={} E[M^2]={}", r.margin, r.stderr, r.factor, m2.mean))
}

fn fpke(cfg: &ExperimentConfig, out: &OutputDir) -> Result<String, RunError> {
    let tf = cfg.test_function.as_ref().ok_or_else(|| ConfigError::Invalid("test_function is required".into()))?.build();
    let grid = cfg.path_grid()?;
    let run = |grid: PathGrid, q: usize| -> Result<_, RunError> {
        let model = cfg.model.build(grid.r0())?;
        let mu0 = cfg.mu_sampler().sample(grid, cfg.n, cfg.seed, INIT_ROLE)?;
        let mut sim = cfg.sim_config(grid);
        sim.noise_refinement = q;
        Ok(verify_fpke_weak_form(model.as_ref(), &mu0, &sim, tf.as_ref(), cfg.horizon)?)
    };
    let coarse = run(grid, if cfg.halving { 2 } else { 1 })?;
    let mut rows = vec![FpkeRow {
        t: coarse.t,
        h: coarse.h,
        residual: coarse.residual,
        stderr: coarse.stderr,
        n_particles: coarse.n_particles,
    }];
    let mut summary = format!("fpke-check: residual={} stderr={}", coarse.residual, coarse.stderr);
    if cfg.halving {
        let fine = run(grid.refined(), 1)?;
        let c = halving_constant(coarse.residual, fine.residual, coarse.h);
        let pass = coarse.residual.abs() <= (3.0 * coarse.stderr).max(c * coarse.h);
        rows.push(FpkeRow { t: fine.t, h: fine.h, residual: fine.residual, stderr: fine.stderr, n_particles: fine.n_particles });
        summary.push_str(&format!(" halving_constant={c} pass={pass}"));
    }
    out.write_rows("fpke.csv", &rows)?;
    Ok(summary)
}
