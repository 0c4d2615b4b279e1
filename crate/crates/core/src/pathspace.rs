//! Discretized path space `C([-r0, 0]; R^d)`.
//!
//! A [`PathGrid`] fixes the delay horizon `r0` and the number of grid
//! intervals `m`; every path object in the crate lives on such a grid with
//! spacing `r0 / m`, which is also the simulation step. Points are stored
//! row-major: point `k` of a `d`-dimensional path occupies `values[k*d..(k+1)*d]`.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack used when deciding whether a time lies on the grid.
const GRID_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathGrid {
    r0: f64,
    m: usize,
}

impl PathGrid {
    pub fn new(r0: f64, m: usize) -> Result<Self> {
        if !(r0 > 0.0) || !r0.is_finite() {
            return Err(Error::InvalidGrid(format!("r0 must be positive and finite, got {r0}")));
        }
        if m == 0 {
            return Err(Error::InvalidGrid("m must be at least 1".into()));
        }
        Ok(Self { r0, m })
    }

    pub fn r0(&self) -> f64 {
        self.r0
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Grid spacing `r0 / m`; also the simulation step.
    pub fn dt(&self) -> f64 {
        self.r0 / self.m as f64
    }

    /// Number of points in a segment, `m + 1`.
    pub fn points(&self) -> usize {
        self.m + 1
    }

    /// Offset `θ_k = -r0 + k·dt` of point `k`.
    pub fn offset(&self, k: usize) -> f64 {
        -self.r0 + k as f64 * self.dt()
    }

    /// Number of whole steps in `t`, or an error if `t` is not a grid multiple.
    pub fn steps_in(&self, t: f64) -> Result<usize> {
        let x = t / self.dt();
        let k = x.round();
        if k < 0.0 || (x - k).abs() > GRID_TOL * k.max(1.0) {
            return Err(Error::OffGrid(t));
        }
        Ok(k as usize)
    }

    /// Largest step count whose time does not exceed `t`.
    pub fn steps_floor(&self, t: f64) -> usize {
        let x = t / self.dt();
        let k = x.round();
        if (x - k).abs() <= GRID_TOL * k.max(1.0) {
            k.max(0.0) as usize
        } else {
            x.floor().max(0.0) as usize
        }
    }

    /// A grid with the same horizon and twice as many intervals.
    pub fn refined(&self) -> Self {
        Self { r0: self.r0, m: 2 * self.m }
    }
}

/// Borrowed segment: `m + 1` points in `R^d`.
#[derive(Debug, Clone, Copy)]
pub struct SegmentView<'a> {
    grid: PathGrid,
    dim: usize,
    values: &'a [f64],
}

impl<'a> SegmentView<'a> {
    pub fn new(grid: PathGrid, dim: usize, values: &'a [f64]) -> Result<Self> {
        if values.len() != grid.points() * dim {
            return Err(Error::SizeMismatch(format!(
                "segment needs {} values, got {}",
                grid.points() * dim,
                values.len()
            )));
        }
        Ok(Self { grid, dim, values })
    }

    pub(crate) fn new_unchecked(grid: PathGrid, dim: usize, values: &'a [f64]) -> Self {
        debug_assert_eq!(values.len(), grid.points() * dim);
        Self { grid, dim, values }
    }

    pub fn grid(&self) -> PathGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &'a [f64] {
        self.values
    }

    /// Point `k`, at offset `θ_k`.
    pub fn point(&self, k: usize) -> &'a [f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    /// `ξ(0)`.
    pub fn endpoint(&self) -> &'a [f64] {
        self.point(self.grid.m)
    }

    /// `ξ(-r0)`.
    pub fn start(&self) -> &'a [f64] {
        self.point(0)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values
            .chunks_exact(self.dim)
            .map(euclidean)
            .fold(0.0, f64::max)
    }

    /// `‖self - other‖_∞²` without allocating.
    pub fn sup_dist_sq(&self, other: &SegmentView<'_>) -> f64 {
        debug_assert_eq!(self.values.len(), other.values.len());
        self.values
            .chunks_exact(self.dim)
            .zip(other.values.chunks_exact(self.dim))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn to_owned(&self) -> Segment {
        Segment { grid: self.grid, dim: self.dim, values: self.values.to_vec() }
    }
}

pub(crate) fn euclidean(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// An element of the discretized path space.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    grid: PathGrid,
    dim: usize,
    values: Vec<f64>,
}

impl Segment {
    pub fn new(grid: PathGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        if values.len() != grid.points() * dim {
            return Err(Error::SizeMismatch(format!(
                "segment needs {} values, got {}",
                grid.points() * dim,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite segment entry at index {i}")));
        }
        Ok(Self { grid, dim, values })
    }

    pub fn constant(grid: PathGrid, point: &[f64]) -> Self {
        let values = point.iter().copied().cycle().take(grid.points() * point.len()).collect();
        Self { grid, dim: point.len(), values }
    }

    pub fn zeros(grid: PathGrid, dim: usize) -> Self {
        Self { grid, dim, values: vec![0.0; grid.points() * dim] }
    }

    /// Samples `f(θ_k)` at every grid offset.
    pub fn from_fn(grid: PathGrid, dim: usize, mut f: impl FnMut(f64) -> Vec<f64>) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.points() * dim);
        for k in 0..grid.points() {
            let p = f(grid.offset(k));
            if p.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: p.len() });
            }
            values.extend(p);
        }
        Self::new(grid, dim, values)
    }

    pub fn view(&self) -> SegmentView<'_> {
        SegmentView { grid: self.grid, dim: self.dim, values: &self.values }
    }

    pub fn grid(&self) -> PathGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn point(&self, k: usize) -> &[f64] {
        self.view().point(k)
    }

    pub fn endpoint(&self) -> &[f64] {
        self.view().endpoint()
    }

    /// Writes the segment as CSV rows `t_offset,x_0,..,x_{d-1}` (no header).
    pub fn write_csv_rows<W: Write>(&self, out: &mut W) -> io::Result<()> {
        for k in 0..self.grid.points() {
            write!(out, "{}", self.grid.offset(k))?;
            for v in self.point(k) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn csv_header(dim: usize) -> String {
        let mut h = String::from("t_offset");
        for c in 0..dim {
            h.push_str(&format!(",x_{c}"));
        }
        h
    }
}

/// Maximum Euclidean norm over the grid points.
pub fn sup_norm(seg: &Segment) -> f64 {
    seg.view().sup_norm()
}

/// A path on `[t0 - r0, t0 + T]` sampled with the grid step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    grid: PathGrid,
    dim: usize,
    t0: f64,
    points: Vec<f64>,
}

impl Trajectory {
    pub fn new(grid: PathGrid, dim: usize, t0: f64, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(Error::SizeMismatch("trajectory length is not a multiple of dim".into()));
        }
        if points.len() / dim < grid.points() {
            return Err(Error::SizeMismatch(format!(
                "trajectory needs at least {} points, got {}",
                grid.points(),
                points.len() / dim
            )));
        }
        Ok(Self { grid, dim, t0, points })
    }

    /// Starts a trajectory from an initial segment placed at time `t0`.
    pub fn from_segment(seg: &Segment, t0: f64) -> Self {
        Self { grid: seg.grid, dim: seg.dim, t0, points: seg.values.clone() }
    }

    pub fn grid(&self) -> PathGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn step(&self) -> f64 {
        self.grid.dt()
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Last time covered.
    pub fn end_time(&self) -> f64 {
        self.t0 + (self.len() - self.grid.points()) as f64 * self.step()
    }

    pub fn push(&mut self, point: &[f64]) {
        debug_assert_eq!(point.len(), self.dim);
        self.points.extend_from_slice(point);
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Point stored at index `j`, i.e. at time `t0 - r0 + j·dt`.
    pub fn point(&self, j: usize) -> &[f64] {
        &self.points[j * self.dim..(j + 1) * self.dim]
    }

    fn index_of(&self, t: f64) -> Result<usize> {
        let start = self.t0 - self.grid.r0();
        let rel = t - start;
        let lo = start;
        let hi = self.end_time();
        if rel < -GRID_TOL * self.step() || t > hi + GRID_TOL * self.step() {
            return Err(Error::OutOfRange { t, lo, hi });
        }
        self.grid.steps_in(rel.max(0.0))
    }

    /// Value at a grid time.
    pub fn value_at(&self, t: f64) -> Result<&[f64]> {
        let j = self.index_of(t)?;
        Ok(self.point(j))
    }

    pub fn segment_view_at(&self, t: f64) -> Result<SegmentView<'_>> {
        let start = self.t0 - self.grid.r0();
        if t - self.grid.r0() < start - GRID_TOL * self.step() || t > self.end_time() + GRID_TOL * self.step() {
            return Err(Error::OutOfRange { t, lo: self.t0, hi: self.end_time() });
        }
        let j = self.index_of(t)? - self.grid.m();
        let d = self.dim;
        Ok(SegmentView::new_unchecked(
            self.grid,
            d,
            &self.points[j * d..(j + self.grid.points()) * d],
        ))
    }
}

/// The segment `θ ↦ traj(t + θ)`.
pub fn segment_at(traj: &Trajectory, t: f64) -> Result<Segment> {
    traj.segment_view_at(t).map(|v| v.to_owned())
}

/// A Cameron–Martin direction: grid values and per-interval derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct CameronMartinVector {
    grid: PathGrid,
    dim: usize,
    values: Vec<f64>,
    derivative: Vec<f64>,
}

impl CameronMartinVector {
    /// Builds the vector from grid values; the derivative on interval `k` is
    /// the difference quotient `(η_{k+1} - η_k) / dt`.
    pub fn from_values(seg: &Segment) -> Self {
        let grid = seg.grid;
        let d = seg.dim;
        let h = grid.dt();
        let mut derivative = Vec::with_capacity(grid.m() * d);
        for k in 0..grid.m() {
            for c in 0..d {
                derivative.push((seg.values[(k + 1) * d + c] - seg.values[k * d + c]) / h);
            }
        }
        Self { grid, dim: d, values: seg.values.clone(), derivative }
    }

    /// Builds the vector from `η(-r0)` and interval derivatives.
    pub fn from_derivative(grid: PathGrid, start: &[f64], derivative: Vec<f64>) -> Result<Self> {
        let d = start.len();
        if derivative.len() != grid.m() * d {
            return Err(Error::SizeMismatch(format!(
                "derivative needs {} values, got {}",
                grid.m() * d,
                derivative.len()
            )));
        }
        let h = grid.dt();
        let mut values = start.to_vec();
        for k in 0..grid.m() {
            for c in 0..d {
                let prev = values[k * d + c];
                values.push(prev + derivative[k * d + c] * h);
            }
        }
        Ok(Self { grid, dim: d, values, derivative })
    }

    pub fn zeros(grid: PathGrid, dim: usize) -> Self {
        Self::from_values(&Segment::zeros(grid, dim))
    }

    pub fn grid(&self) -> PathGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn derivative(&self) -> &[f64] {
        &self.derivative
    }

    /// Derivative on interval `k` (between `θ_k` and `θ_{k+1}`).
    pub fn derivative_on(&self, k: usize) -> &[f64] {
        &self.derivative[k * self.dim..(k + 1) * self.dim]
    }

    pub fn as_segment(&self) -> SegmentView<'_> {
        SegmentView::new_unchecked(self.grid, self.dim, &self.values)
    }

    pub fn start(&self) -> &[f64] {
        &self.values[..self.dim]
    }

    pub fn end(&self) -> &[f64] {
        &self.values[self.grid.m() * self.dim..]
    }

    /// Largest mismatch between stored values and the derivative's
    /// cumulative reconstruction.
    pub fn consistency_error(&self) -> f64 {
        let h = self.grid.dt();
        let d = self.dim;
        let mut worst: f64 = 0.0;
        for k in 0..self.grid.m() {
            for c in 0..d {
                let step = self.values[(k + 1) * d + c] - self.values[k * d + c];
                worst = worst.max((step - self.derivative[k * d + c] * h).abs());
            }
        }
        worst
    }
}

/// `∫_{-r0}^0 |η'(s)|² ds` by the midpoint rule on the interval derivatives.
pub fn h1_norm_sq(eta: &CameronMartinVector) -> f64 {
    let h = eta.grid.dt();
    eta.derivative.iter().map(|v| v * v).sum::<f64>() * h
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn grid(r0: f64, m: usize) -> PathGrid {
        PathGrid::new(r0, m).unwrap()
    }

    #[test]
    fn grid_rejects_bad_parameters() {
        assert!(PathGrid::new(0.0, 4).is_err());
        assert!(PathGrid::new(-1.0, 4).is_err());
        assert!(PathGrid::new(1.0, 0).is_err());
        let g = grid(1.0, 4);
        assert_eq!(g.dt() * g.m() as f64, g.r0());
    }

    #[test]
    fn sup_norm_examples() {
        let g = grid(1.0, 10);
        assert_eq!(sup_norm(&Segment::constant(g, &[3.0, 4.0])), 5.0);
        assert_eq!(sup_norm(&Segment::zeros(g, 2)), 0.0);
        let lin = Segment::from_fn(g, 2, |th| vec![2.0 * (th + 1.0), 0.0]).unwrap();
        assert_relative_eq!(sup_norm(&lin), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn segment_rejects_nonfinite() {
        let g = grid(1.0, 1);
        assert!(Segment::new(g, 1, vec![0.0, f64::NAN]).is_err());
        assert!(Segment::new(g, 1, vec![0.0]).is_err());
    }

    #[test]
    fn h1_norm_examples() {
        let g = grid(1.0, 50);
        let ramp = Segment::from_fn(g, 1, |s| vec![s]).unwrap();
        assert_relative_eq!(h1_norm_sq(&CameronMartinVector::from_values(&ramp)), 1.0, epsilon = 1e-12);

        let flat = Segment::constant(g, &[2.5]);
        assert_eq!(h1_norm_sq(&CameronMartinVector::from_values(&flat)), 0.0);

        // ∫_{-1}^0 (2s)² ds = 4/3
        let g = grid(1.0, 1000);
        let sq = Segment::from_fn(g, 1, |s| vec![s * s]).unwrap();
        assert!((h1_norm_sq(&CameronMartinVector::from_values(&sq)) - 4.0 / 3.0).abs() < 1e-4);
    }

    #[test]
    fn cameron_martin_constructors_agree() {
        let g = grid(0.5, 20);
        let seg = Segment::from_fn(g, 2, |s| vec![s.sin(), s * s - 1.0]).unwrap();
        let a = CameronMartinVector::from_values(&seg);
        assert!(a.consistency_error() < 1e-12);
        let b = CameronMartinVector::from_derivative(g, a.start(), a.derivative().to_vec()).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn segment_at_examples() {
        let g = grid(1.0, 4);
        let init = Segment::from_fn(g, 1, |s| vec![s]).unwrap();
        let mut traj = Trajectory::from_segment(&init, 0.0);
        for j in 1..=12 {
            traj.push(&[j as f64 * g.dt()]);
        }
        assert_eq!(segment_at(&traj, 0.0).unwrap(), init);

        // traj(u) = u, t = 2, r0 = 1 -> values 1 + k·dt
        let seg = segment_at(&traj, 2.0).unwrap();
        for k in 0..g.points() {
            assert!((seg.point(k)[0] - (1.0 + k as f64 * g.dt())).abs() < 1e-12);
        }
        assert!(matches!(segment_at(&traj, 3.5), Err(Error::OutOfRange { .. })));
        assert!(matches!(segment_at(&traj, -0.25), Err(Error::OutOfRange { .. })));
        assert!(matches!(segment_at(&traj, 1.1), Err(Error::OffGrid(_))));

        let c = Segment::constant(g, &[7.0, -1.0]);
        let mut ct = Trajectory::from_segment(&c, 0.0);
        for _ in 0..8 {
            ct.push(&[7.0, -1.0]);
        }
        assert_eq!(segment_at(&ct, 1.5).unwrap(), c);
    }

    #[test]
    fn segment_csv_rows() {
        let g = grid(1.0, 2);
        let seg = Segment::constant(g, &[1.0, 2.5]);
        let mut buf = Vec::new();
        seg.write_csv_rows(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "-1,1,2.5\n-0.5,1,2.5\n0,1,2.5\n");
        assert_eq!(Segment::csv_header(2), "t_offset,x_0,x_1");
    }

    fn arb_segment(m: usize, d: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0..10.0f64, (m + 1) * d)
    }

    proptest! {
        #[test]
        fn sup_norm_is_a_norm(a in arb_segment(8, 2), b in arb_segment(8, 2), c in -5.0..5.0f64) {
            let g = grid(1.0, 8);
            let sa = Segment::new(g, 2, a.clone()).unwrap();
            let sb = Segment::new(g, 2, b.clone()).unwrap();
            let scaled = Segment::new(g, 2, a.iter().map(|v| c * v).collect()).unwrap();
            prop_assert!((sup_norm(&scaled) - c.abs() * sup_norm(&sa)).abs() <= 1e-12 * (1.0 + sup_norm(&sa)));
            let sum = Segment::new(g, 2, a.iter().zip(&b).map(|(x, y)| x + y).collect()).unwrap();
            prop_assert!(sup_norm(&sum) <= sup_norm(&sa) + sup_norm(&sb) + 1e-12);
        }

        #[test]
        fn segment_endpoint_matches_trajectory(vals in proptest::collection::vec(-3.0..3.0f64, 20)) {
            let g = grid(1.0, 4);
            let init = Segment::constant(g, &[0.0]);
            let mut traj = Trajectory::from_segment(&init, 0.0);
            for v in &vals {
                traj.push(&[*v]);
            }
            for j in 0..=vals.len() {
                let t = j as f64 * g.dt();
                let seg = segment_at(&traj, t).unwrap();
                prop_assert_eq!(seg.endpoint(), traj.value_at(t).unwrap());
            }
        }

        #[test]
        fn h1_norm_ignores_constant_shift(vals in arb_segment(10, 1), c in -4.0..4.0f64) {
            let g = grid(2.0, 10);
            let a = Segment::new(g, 1, vals.clone()).unwrap();
            let b = Segment::new(g, 1, vals.iter().map(|v| v + c).collect()).unwrap();
            let na = h1_norm_sq(&CameronMartinVector::from_values(&a));
            let nb = h1_norm_sq(&CameronMartinVector::from_values(&b));
            prop_assert!((na - nb).abs() <= 1e-9 * (1.0 + na));
        }
    }
}
