//! Interacting-particle Euler–Maruyama for the path-distribution dependent
//! SDE, Picard iteration against frozen measure flows, and weak-form
//! residual checks.
//!
//! Step size is the history grid step `h = r0/m`. Particle `i` at global
//! step `k` always receives the same Gaussian increment (see [`crate::rng`]),
//! so runs are reproducible across thread counts and Picard iterates share
//! their noise.

mod picard;
mod weak_form;

pub use picard::{picard_solve, picard_k2, suggest_picard_window, PicardReport, PicardWindow};
pub use weak_form::{
    fpke_residual_from_snapshots, martingale_increment_check, verify_fpke_weak_form, FpkeReport, MartingaleReport,
};

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::{CoefficientModel, DiffusionKind, MeasureFeatures};
use crate::pathspace::{PathGrid, SegmentView};
use crate::rng::{NoiseSource, NoiseStream};
use crate::transport::{EmpiricalPathMeasure, PathMeasure};

/// Role label for the particle noise of ordinary runs.
pub const PARTICLE_ROLE: &str = "particles";

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    pub horizon: f64,
    pub grid: PathGrid,
    pub seed: u64,
    pub picard_iters: usize,
    /// Picard window length; `None` means [`suggest_picard_window`].
    pub picard_window: Option<f64>,
    /// Each step's increment is assembled from this many finer increments.
    /// A run on grid `m` with refinement 2 sees the same Brownian path as a
    /// run on grid `2m` with refinement 1.
    pub noise_refinement: usize,
    pub role: String,
}

impl SimConfig {
    pub fn new(n: usize, horizon: f64, grid: PathGrid, seed: u64) -> Self {
        Self {
            n,
            horizon,
            grid,
            seed,
            picard_iters: 6,
            picard_window: None,
            noise_refinement: 1,
            role: PARTICLE_ROLE.to_string(),
        }
    }

    pub fn steps(&self) -> Result<usize> {
        self.grid.steps_in(self.horizon)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 particles, got {}", self.n)));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {}", self.horizon)));
        }
        if self.noise_refinement == 0 {
            return Err(Error::InvalidArgument("noise_refinement must be at least 1".into()));
        }
        self.steps()?;
        Ok(())
    }

    fn noise(&self, dim: usize) -> NoiseSource {
        NoiseSource::new(self.seed, &self.role, dim)
    }
}

/// The particle system at one grid time: every particle's current segment,
/// kept in a per-particle sliding buffer of `2(m+1)` points.
#[derive(Debug, Clone)]
pub struct Ensemble {
    grid: PathGrid,
    dim: usize,
    n: usize,
    cap: usize,
    start: usize,
    step: usize,
    data: Vec<f64>,
}

impl Ensemble {
    /// Ensemble whose segments are `init` at global step `step`.
    pub fn from_measure(init: &EmpiricalPathMeasure, step: usize) -> Self {
        let grid = init.grid();
        let dim = init.dim();
        let pts = grid.points();
        let cap = 2 * pts;
        let n = init.len();
        let mut data = vec![0.0; n * cap * dim];
        for (buf, seg) in data.chunks_exact_mut(cap * dim).zip(init.segments()) {
            buf[..pts * dim].copy_from_slice(seg.values());
        }
        Self { grid, dim, n, cap, start: 0, step, data }
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.grid.dt()
    }

    pub fn measure(&self) -> EmpiricalPathMeasure {
        EmpiricalPathMeasure::collect(self)
    }

    /// Appends one point per particle. `f(i, state, segment, out)` writes
    /// particle `i`'s next point from its current segment.
    pub(crate) fn advance_with<S, F>(&mut self, states: &mut [S], f: F)
    where
        S: Send,
        F: Fn(usize, &mut S, SegmentView<'_>, &mut [f64]) + Sync + Send,
    {
        self.advance_with_scratch(states, || (), |i, _, st, seg, out| f(i, st, seg, out));
    }

    /// As [`Ensemble::advance_with`], with per-worker scratch from `init`.
    pub(crate) fn advance_with_scratch<S, T, I, F>(&mut self, states: &mut [S], init: I, f: F)
    where
        S: Send,
        I: Fn() -> T + Sync + Send,
        F: Fn(usize, &mut T, &mut S, SegmentView<'_>, &mut [f64]) + Sync + Send,
    {
        debug_assert_eq!(states.len(), self.n);
        let d = self.dim;
        let pts = self.grid.points();
        let grid = self.grid;
        let shift = self.start + pts == self.cap;
        let base = if shift { 0 } else { self.start };
        let start = self.start;
        self.data
            .par_chunks_mut(self.cap * d)
            .zip(states.par_iter_mut())
            .enumerate()
            .for_each_init(init, |scratch, (i, (buf, st))| {
                if shift {
                    buf.copy_within(start * d..(start + pts) * d, 0);
                }
                let (head, tail) = buf.split_at_mut((base + pts) * d);
                let seg = SegmentView::new_unchecked(grid, d, &head[base * d..]);
                f(i, scratch, st, seg, &mut tail[..d]);
            });
        self.start = base + 1;
        self.step += 1;
    }
}

impl PathMeasure for Ensemble {
    fn grid(&self) -> PathGrid {
        self.grid
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        self.n
    }

    fn segment(&self, i: usize) -> SegmentView<'_> {
        let d = self.dim;
        let at = i * self.cap * d + self.start * d;
        SegmentView::new_unchecked(self.grid, d, &self.data[at..at + self.grid.points() * d])
    }
}

/// Hook called at every grid time of a run, including the first and last,
/// with the measure features in force at that time.
pub trait StepObserver {
    fn observe(&mut self, ens: &Ensemble, feats: &MeasureFeatures) -> Result<()>;
}

impl StepObserver for () {
    fn observe(&mut self, _ens: &Ensemble, _feats: &MeasureFeatures) -> Result<()> {
        Ok(())
    }
}

/// Where the measure argument of the drift comes from.
pub(crate) enum Flow<'a> {
    /// The live empirical law of the ensemble.
    Live,
    /// Precomputed features, entry `j` at local step `j`.
    Frozen(&'a [MeasureFeatures]),
}

struct Scratch {
    z: Vec<f64>,
    dw: Vec<f64>,
    b: Vec<f64>,
    sdw: Vec<f64>,
}

impl Scratch {
    fn new(d: usize) -> Self {
        Self { z: vec![0.0; d], dw: vec![0.0; d], b: vec![0.0; d], sdw: vec![0.0; d] }
    }
}

/// Draws one step's increment of variance `h` from `q` finer increments.
pub(crate) fn refined_increment(stream: &mut NoiseStream, h: f64, q: usize, z: &mut [f64], dw: &mut [f64]) {
    if q == 1 {
        stream.next_increments(h, dw);
        return;
    }
    dw.iter_mut().for_each(|v| *v = 0.0);
    let s = (h / q as f64).sqrt();
    for _ in 0..q {
        stream.next_normals(z);
        for (w, x) in dw.iter_mut().zip(z.iter()) {
            *w += s * x;
        }
    }
}

pub(crate) fn check_model_init(model: &dyn CoefficientModel, init: &dyn PathMeasure, grid: PathGrid) -> Result<()> {
    if init.dim() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: init.dim() });
    }
    if init.grid() != grid {
        return Err(Error::InvalidGrid("initial measure grid differs from configured grid".into()));
    }
    if let Some(r0) = model.delay() {
        if (grid.r0() - r0).abs() > 1e-12 * r0 {
            return Err(Error::InvalidGrid(format!("model delay {r0} but grid horizon {}", grid.r0())));
        }
    }
    Ok(())
}

/// Runs `steps` Euler–Maruyama steps from `init`, placed at global step
/// `first_step`.
pub(crate) fn run_engine(
    model: &dyn CoefficientModel,
    init: &EmpiricalPathMeasure,
    first_step: usize,
    steps: usize,
    noise: &NoiseSource,
    refinement: usize,
    flow: Flow<'_>,
    obs: &mut dyn StepObserver,
) -> Result<Ensemble> {
    let d = model.dim();
    let h = init.grid().dt();
    let mut ens = Ensemble::from_measure(init, first_step);
    let q = refinement;
    let mut streams: Vec<NoiseStream> =
        (0..ens.n).into_par_iter().map(|i| noise.stream_at(i as u64, (first_step * q) as u64)).collect();
    let bad = AtomicUsize::new(usize::MAX);
    let noisy = model.diffusion_kind() != DiffusionKind::None;
    for j in 0..=steps {
        let t = ens.time();
        let live;
        let feats = match flow {
            Flow::Live => {
                live = model.measure_features(t, &ens);
                &live
            }
            Flow::Frozen(f) => f.get(j).ok_or(Error::MissingSnapshot(first_step + j))?,
        };
        obs.observe(&ens, feats)?;
        if j == steps {
            break;
        }
        ens.advance_with_scratch(
            &mut streams,
            || Scratch::new(d),
            |i, sc, stream, seg, out| {
                model.drift(t, seg, feats, &mut sc.b);
                let x = seg.endpoint();
                if noisy {
                    refined_increment(stream, h, q, &mut sc.z, &mut sc.dw);
                    model.apply_diffusion(t, x, &sc.dw, &mut sc.sdw);
                }
                let mut finite = true;
                for c in 0..d {
                    out[c] = x[c] + sc.b[c] * h + if noisy { sc.sdw[c] } else { 0.0 };
                    finite &= out[c].is_finite();
                }
                if !finite {
                    bad.fetch_min(i, Ordering::Relaxed);
                }
            },
        );
        let particle = bad.load(Ordering::Relaxed);
        if particle != usize::MAX {
            return Err(Error::NonFinite { step: ens.step_index(), particle });
        }
    }
    Ok(ens)
}

/// Sliding history of a single path, for samples simulated one at a time.
#[derive(Debug, Clone)]
pub(crate) struct PathHistory {
    grid: PathGrid,
    d: usize,
    data: Vec<f64>,
    start: usize,
}

impl PathHistory {
    pub(crate) fn new(seg: SegmentView<'_>) -> Self {
        let pts = seg.grid().points();
        let d = seg.dim();
        let mut data = vec![0.0; 2 * pts * d];
        data[..pts * d].copy_from_slice(seg.values());
        Self { grid: seg.grid(), d, data, start: 0 }
    }

    pub(crate) fn view(&self) -> SegmentView<'_> {
        let w = self.grid.points() * self.d;
        SegmentView::new_unchecked(self.grid, self.d, &self.data[self.start * self.d..self.start * self.d + w])
    }

    pub(crate) fn endpoint(&self) -> &[f64] {
        self.view().endpoint()
    }

    pub(crate) fn push(&mut self, x: &[f64]) {
        let (pts, d) = (self.grid.points(), self.d);
        if self.start + pts == 2 * pts {
            self.data.copy_within(self.start * d.., 0);
            self.start = 0;
        }
        let at = (self.start + pts) * d;
        self.data[at..at + d].copy_from_slice(x);
        self.start += 1;
    }
}

/// Segment law at one grid time.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub t: f64,
    pub step: usize,
    pub measure: EmpiricalPathMeasure,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub snapshots: Vec<Snapshot>,
    pub ensemble: Ensemble,
}

struct SnapshotObserver {
    steps: Vec<usize>,
    out: Vec<Snapshot>,
}

impl StepObserver for SnapshotObserver {
    fn observe(&mut self, ens: &Ensemble, _feats: &MeasureFeatures) -> Result<()> {
        if self.steps.binary_search(&ens.step_index()).is_ok() {
            self.out.push(Snapshot { t: ens.time(), step: ens.step_index(), measure: ens.measure() });
        }
        Ok(())
    }
}

fn validate_run(model: &dyn CoefficientModel, init: &EmpiricalPathMeasure, config: &SimConfig) -> Result<usize> {
    config.validate()?;
    if init.len() != config.n {
        return Err(Error::SizeMismatch(format!("initial measure has {} particles, config says {}", init.len(), config.n)));
    }
    check_model_init(model, init, config.grid)?;
    config.steps()
}

/// Interacting-particle simulation on `[0, horizon]`, returning the segment
/// laws at `snapshot_times` (grid times) and the final ensemble.
pub fn simulate_mckean(
    model: &dyn CoefficientModel,
    init: &EmpiricalPathMeasure,
    config: &SimConfig,
    snapshot_times: &[f64],
) -> Result<SimOutput> {
    let steps = validate_run(model, init, config)?;
    let mut wanted = snapshot_times
        .iter()
        .map(|&t| {
            let k = config.grid.steps_in(t)?;
            if k > steps {
                Err(Error::OutOfRange { t, lo: 0.0, hi: config.horizon })
            } else {
                Ok(k)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    wanted.sort_unstable();
    wanted.dedup();
    let mut obs = SnapshotObserver { steps: wanted, out: Vec::new() };
    let ensemble = run_engine(
        model,
        init,
        0,
        steps,
        &config.noise(model.dim()),
        config.noise_refinement,
        Flow::Live,
        &mut obs,
    )?;
    Ok(SimOutput { snapshots: obs.out, ensemble })
}

/// Interacting-particle simulation with a caller-supplied observer.
pub fn simulate_observed(
    model: &dyn CoefficientModel,
    init: &EmpiricalPathMeasure,
    config: &SimConfig,
    obs: &mut dyn StepObserver,
) -> Result<Ensemble> {
    let steps = validate_run(model, init, config)?;
    run_engine(model, init, 0, steps, &config.noise(model.dim()), config.noise_refinement, Flow::Live, obs)
}

/// The measure flow `t ↦ μ_t` of one run, as seen by the drift, plus the
/// per-step mean segment (for W2 lower bounds).
#[derive(Debug, Clone)]
pub struct MeasureFlow {
    pub grid: PathGrid,
    pub features: Vec<MeasureFeatures>,
    pub mean_segments: Vec<Vec<f64>>,
    pub second_moments: Vec<f64>,
}

struct FlowRecorder(MeasureFlow);

impl StepObserver for FlowRecorder {
    fn observe(&mut self, ens: &Ensemble, feats: &MeasureFeatures) -> Result<()> {
        self.0.features.push(feats.clone());
        self.0.mean_segments.push(ens.mean_segment());
        self.0.second_moments.push(ens.second_moment());
        Ok(())
    }
}

/// Simulates from `init` and records the flow at every grid time.
pub fn record_flow(model: &dyn CoefficientModel, init: &EmpiricalPathMeasure, config: &SimConfig) -> Result<MeasureFlow> {
    Ok(record_flow_with_end(model, init, config)?.0)
}

/// As [`record_flow`], also returning the particle system at the horizon.
pub fn record_flow_with_end(
    model: &dyn CoefficientModel,
    init: &EmpiricalPathMeasure,
    config: &SimConfig,
) -> Result<(MeasureFlow, Ensemble)> {
    let mut rec = FlowRecorder(MeasureFlow {
        grid: config.grid,
        features: Vec::new(),
        mean_segments: Vec::new(),
        second_moments: Vec::new(),
    });
    let ens = simulate_observed(model, init, config, &mut rec)?;
    Ok((rec.0, ens))
}
