//! Wasserstein-2 distance between equal-size uniform empirical measures on
//! path space, with the sup-norm as ground metric.
//!
//! For two `N`-point uniform measures the optimal plan can be taken to be a
//! permutation, so the exact distance is an assignment problem. Three routes
//! are provided: [`w2_exact`] (shortest augmenting path), [`w2_bruteforce`]
//! (permutation enumeration, test oracle) and [`w2_sinkhorn`] (entropic,
//! log-domain, for large `N`).

mod assignment;
mod sinkhorn;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::pathspace::{PathGrid, Segment, SegmentView};

pub use assignment::solve_assignment;
pub use sinkhorn::{w2_sinkhorn, SinkhornReport};

/// Default particle count above which [`w2_auto`] falls back to Sinkhorn.
pub const DEFAULT_EXACT_CAP: usize = 2048;

/// Largest `N` accepted by [`w2_bruteforce`].
pub const BRUTEFORCE_CAP: usize = 8;

/// A finite collection of equally weighted segments on a common grid.
pub trait PathMeasure: Sync {
    fn grid(&self) -> PathGrid;
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn segment(&self, i: usize) -> SegmentView<'_>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Particle average of the segment, point by point.
    fn mean_segment(&self) -> Vec<f64> {
        let width = self.grid().points() * self.dim();
        let mut acc = vec![0.0; width];
        for i in 0..self.len() {
            for (a, v) in acc.iter_mut().zip(self.segment(i).values()) {
                *a += v;
            }
        }
        let n = self.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// Particle average of `ξ(0)`.
    fn mean_endpoint(&self) -> Vec<f64> {
        let d = self.dim();
        let mut acc = vec![0.0; d];
        for i in 0..self.len() {
            for (a, v) in acc.iter_mut().zip(self.segment(i).endpoint()) {
                *a += v;
            }
        }
        let n = self.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// `∫ ‖ξ‖_∞² μ(dξ)`.
    fn second_moment(&self) -> f64 {
        let n = self.len() as f64;
        (0..self.len()).map(|i| self.segment(i).sup_norm().powi(2)).sum::<f64>() / n
    }
}

/// `N` segments with uniform weights `1/N`, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalPathMeasure {
    grid: PathGrid,
    dim: usize,
    n: usize,
    data: Vec<f64>,
}

impl EmpiricalPathMeasure {
    pub fn from_segments(segments: &[Segment]) -> Result<Self> {
        let first = segments
            .first()
            .ok_or_else(|| Error::InvalidArgument("empirical measure needs at least one particle".into()))?;
        let grid = first.grid();
        let dim = first.dim();
        let mut data = Vec::with_capacity(segments.len() * grid.points() * dim);
        for s in segments {
            if s.grid() != grid {
                return Err(Error::InvalidGrid("segments on different grids".into()));
            }
            if s.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: s.dim() });
            }
            data.extend_from_slice(s.values());
        }
        Ok(Self { grid, dim, n: segments.len(), data })
    }

    pub fn from_flat(grid: PathGrid, dim: usize, data: Vec<f64>) -> Result<Self> {
        let width = grid.points() * dim;
        if dim == 0 || data.is_empty() || data.len() % width != 0 {
            return Err(Error::SizeMismatch(format!(
                "flat data of length {} is not a positive multiple of {width}",
                data.len()
            )));
        }
        Ok(Self { grid, dim, n: data.len() / width, data })
    }

    /// Copies any [`PathMeasure`] into owned storage.
    pub fn collect<M: PathMeasure + ?Sized>(mu: &M) -> Self {
        let mut data = Vec::with_capacity(mu.len() * mu.grid().points() * mu.dim());
        for i in 0..mu.len() {
            data.extend_from_slice(mu.segment(i).values());
        }
        Self { grid: mu.grid(), dim: mu.dim(), n: mu.len(), data }
    }

    pub fn dirac(seg: &Segment) -> Self {
        Self { grid: seg.grid(), dim: seg.dim(), n: 1, data: seg.values().to_vec() }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn segments(&self) -> impl Iterator<Item = SegmentView<'_>> {
        (0..self.n).map(move |i| self.segment(i))
    }
}

impl PathMeasure for EmpiricalPathMeasure {
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
        let w = self.grid.points() * self.dim;
        SegmentView::new_unchecked(self.grid, self.dim, &self.data[i * w..(i + 1) * w])
    }
}

/// Dense `N×N` matrix of squared sup-norm distances.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::SizeMismatch("cost matrix must be square".into()));
        }
        if rows.iter().flatten().any(|c| !(*c >= 0.0) || !c.is_finite()) {
            return Err(Error::InvalidArgument("costs must be finite and nonnegative".into()));
        }
        Ok(Self { n, data: rows.into_iter().flatten().collect() })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    pub fn median(&self) -> f64 {
        let mut v = self.data.clone();
        v.sort_by(f64::total_cmp);
        let k = v.len();
        if k % 2 == 1 {
            v[k / 2]
        } else {
            0.5 * (v[k / 2 - 1] + v[k / 2])
        }
    }

    /// Mean cost of the identity matching.
    pub fn diagonal_mean(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum::<f64>() / self.n as f64
    }
}

fn check_compatible<M: PathMeasure + ?Sized, V: PathMeasure + ?Sized>(mu: &M, nu: &V) -> Result<()> {
    if mu.len() != nu.len() {
        return Err(Error::SizeMismatch(format!(
            "measures have {} and {} particles",
            mu.len(),
            nu.len()
        )));
    }
    if mu.is_empty() {
        return Err(Error::InvalidArgument("empty measure".into()));
    }
    if mu.grid() != nu.grid() {
        return Err(Error::InvalidGrid("measures live on different grids".into()));
    }
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch { expected: mu.dim(), got: nu.dim() });
    }
    Ok(())
}

/// `c[i][j] = ‖ξ_i − η_j‖_∞²`, assembled in parallel over rows.
pub fn ground_cost_matrix<M, V>(mu: &M, nu: &V) -> Result<CostMatrix>
where
    M: PathMeasure + ?Sized,
    V: PathMeasure + ?Sized,
{
    check_compatible(mu, nu)?;
    let n = mu.len();
    let data: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let xi = mu.segment(i);
            (0..n).map(move |j| xi.sup_dist_sq(&nu.segment(j)))
        })
        .collect();
    Ok(CostMatrix { n, data })
}

/// Exact W2 via the assignment problem.
pub fn w2_exact<M, V>(mu: &M, nu: &V) -> Result<f64>
where
    M: PathMeasure + ?Sized,
    V: PathMeasure + ?Sized,
{
    w2_exact_capped(mu, nu, DEFAULT_EXACT_CAP)
}

pub fn w2_exact_capped<M, V>(mu: &M, nu: &V, cap: usize) -> Result<f64>
where
    M: PathMeasure + ?Sized,
    V: PathMeasure + ?Sized,
{
    check_compatible(mu, nu)?;
    if mu.len() > cap {
        return Err(Error::Refused(format!("exact solver cap is {cap}, got N = {}", mu.len())));
    }
    let cost = ground_cost_matrix(mu, nu)?;
    Ok(w2_from_cost(&cost))
}

/// `sqrt((1/N) min_σ Σ c[i][σ(i)])`.
pub fn w2_from_cost(cost: &CostMatrix) -> f64 {
    let (_, total) = solve_assignment(cost);
    (total / cost.n() as f64).max(0.0).sqrt()
}

/// Enumerates all `N!` matchings. Oracle for [`w2_exact`]; refuses `N > 8`.
pub fn w2_bruteforce<M, V>(mu: &M, nu: &V) -> Result<f64>
where
    M: PathMeasure + ?Sized,
    V: PathMeasure + ?Sized,
{
    check_compatible(mu, nu)?;
    let cost = ground_cost_matrix(mu, nu)?;
    w2_bruteforce_cost(&cost)
}

pub fn w2_bruteforce_cost(cost: &CostMatrix) -> Result<f64> {
    use itertools::Itertools;
    let n = cost.n();
    if n > BRUTEFORCE_CAP {
        return Err(Error::Refused(format!("brute force limited to N <= {BRUTEFORCE_CAP}, got {n}")));
    }
    let best = (0..n)
        .permutations(n)
        .map(|p| p.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    Ok((best / n as f64).sqrt())
}

/// `sqrt(mean_i ‖ξ_i − η_i‖_∞²)`: the cost of the index pairing, an upper
/// bound for W2.
pub fn paired_cost<M, V>(mu: &M, nu: &V) -> Result<f64>
where
    M: PathMeasure + ?Sized,
    V: PathMeasure + ?Sized,
{
    check_compatible(mu, nu)?;
    let n = mu.len();
    let s: f64 = (0..n).map(|i| mu.segment(i).sup_dist_sq(&nu.segment(i))).sum();
    Ok((s / n as f64).sqrt())
}

/// `max_θ |E_μ ξ(θ) − E_ν ξ(θ)|`, a lower bound for W2 that needs no
/// matching. Sizes may differ.
pub fn mean_gap_lower_bound<M, V>(mu: &M, nu: &V) -> Result<f64>
where
    M: PathMeasure + ?Sized,
    V: PathMeasure + ?Sized,
{
    if mu.grid() != nu.grid() {
        return Err(Error::InvalidGrid("measures live on different grids".into()));
    }
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch { expected: mu.dim(), got: nu.dim() });
    }
    Ok(mean_gap(&mu.mean_segment(), &nu.mean_segment(), mu.dim()))
}

pub(crate) fn mean_gap(a: &[f64], b: &[f64], dim: usize) -> f64 {
    a.chunks_exact(dim)
        .zip(b.chunks_exact(dim))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportMethod {
    Exact,
    Sinkhorn,
    Paired,
    MeanGap,
}

impl TransportMethod {
    pub fn label(&self) -> &'static str {
        match self {
            TransportMethod::Exact => "exact",
            TransportMethod::Sinkhorn => "sinkhorn",
            TransportMethod::Paired => "paired",
            TransportMethod::MeanGap => "mean_gap",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct W2Estimate {
    pub w2: f64,
    pub method: TransportMethod,
    pub converged: bool,
}

/// Exact solver up to `cap` particles, Sinkhorn above it with
/// `reg = 1e-3·median(cost)`.
pub fn w2_auto<M, V>(mu: &M, nu: &V, cap: usize, max_iter: usize) -> Result<W2Estimate>
where
    M: PathMeasure + ?Sized,
    V: PathMeasure + ?Sized,
{
    check_compatible(mu, nu)?;
    if mu.len() <= cap {
        return Ok(W2Estimate { w2: w2_exact_capped(mu, nu, cap)?, method: TransportMethod::Exact, converged: true });
    }
    let cost = ground_cost_matrix(mu, nu)?;
    let reg = (1e-3 * cost.median()).max(f64::MIN_POSITIVE);
    let rep = sinkhorn::sinkhorn_cost(&cost, reg, max_iter)?;
    Ok(W2Estimate { w2: rep.w2, method: TransportMethod::Sinkhorn, converged: rep.converged })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> PathGrid {
        PathGrid::new(1.0, 3).unwrap()
    }

    fn measure(points: &[[f64; 2]]) -> EmpiricalPathMeasure {
        let segs: Vec<_> = points.iter().map(|p| Segment::constant(grid(), p)).collect();
        EmpiricalPathMeasure::from_segments(&segs).unwrap()
    }

    #[test]
    fn cost_matrix_examples() {
        let mu = measure(&[[0.0, 0.0], [1.0, 2.0], [-1.0, 0.5]]);
        let c = ground_cost_matrix(&mu, &mu).unwrap();
        for i in 0..3 {
            assert_eq!(c.get(i, i), 0.0);
            for j in 0..3 {
                assert_eq!(c.get(i, j), c.get(j, i));
            }
        }
        let a = measure(&[[3.0, 0.0]]);
        let b = measure(&[[0.0, 4.0]]);
        assert_eq!(ground_cost_matrix(&a, &b).unwrap().get(0, 0), 25.0);
    }

    #[test]
    fn cost_matrix_rejects_mismatch() {
        let a = measure(&[[0.0, 0.0], [1.0, 1.0]]);
        let b = measure(&[[0.0, 0.0]]);
        assert!(matches!(ground_cost_matrix(&a, &b), Err(Error::SizeMismatch(_))));
        let other = EmpiricalPathMeasure::from_segments(&[
            Segment::constant(PathGrid::new(2.0, 3).unwrap(), &[0.0, 0.0]),
            Segment::constant(PathGrid::new(2.0, 3).unwrap(), &[0.0, 0.0]),
        ])
        .unwrap();
        assert!(matches!(ground_cost_matrix(&a, &other), Err(Error::InvalidGrid(_))));
        assert!(w2_exact(&a, &b).is_err());
    }

    #[test]
    fn exact_and_bruteforce_trivial_cases() {
        let mu = measure(&[[0.0, 0.0], [1.0, 2.0], [-1.0, 0.5]]);
        assert_eq!(w2_exact(&mu, &mu).unwrap(), 0.0);
        assert_eq!(w2_bruteforce(&mu, &mu).unwrap(), 0.0);
        let a = measure(&[[3.0, 0.0]]);
        let b = measure(&[[0.0, 4.0]]);
        assert_eq!(w2_exact(&a, &b).unwrap(), 5.0);
        assert_eq!(w2_bruteforce(&a, &b).unwrap(), 5.0);
    }

    #[test]
    fn bruteforce_refuses_large_n() {
        let pts: Vec<[f64; 2]> = (0..9).map(|i| [i as f64, 0.0]).collect();
        let mu = measure(&pts);
        assert!(matches!(w2_bruteforce(&mu, &mu), Err(Error::Refused(_))));
    }

    #[test]
    fn bruteforce_prefers_cheaper_off_diagonal() {
        // Diagonal costs 10 each; the cyclic shift costs 0 + 1 + 0 per row.
        let cost = CostMatrix::from_rows(vec![
            vec![10.0, 0.0, 1.0],
            vec![1.0, 10.0, 0.0],
            vec![0.0, 1.0, 10.0],
        ])
        .unwrap();
        // Enumerated by hand: identity 30; (1,2,0) 0; (2,0,1) 3; the three
        // transpositions 21 each. Minimum 0.
        assert_eq!(w2_bruteforce_cost(&cost).unwrap(), 0.0);
        assert_eq!(w2_from_cost(&cost), 0.0);
    }

    #[test]
    fn paired_and_mean_gap_bracket_exact() {
        let mu = measure(&[[0.0, 0.0], [2.0, 1.0], [-1.0, 3.0]]);
        let nu = measure(&[[2.5, 1.0], [0.1, -0.2], [-1.0, 2.0]]);
        let w = w2_exact(&mu, &nu).unwrap();
        assert!(w <= paired_cost(&mu, &nu).unwrap() + 1e-12);
        assert!(mean_gap_lower_bound(&mu, &nu).unwrap() <= w + 1e-12);
    }

    #[test]
    fn auto_labels_method() {
        let mu = measure(&[[0.0, 0.0], [2.0, 1.0], [-1.0, 3.0]]);
        let nu = measure(&[[2.5, 1.0], [0.1, -0.2], [-1.0, 2.0]]);
        let e = w2_auto(&mu, &nu, 8, 1000).unwrap();
        assert_eq!(e.method, TransportMethod::Exact);
        let s = w2_auto(&mu, &nu, 2, 5000).unwrap();
        assert_eq!(s.method, TransportMethod::Sinkhorn);
        assert!((s.w2 - e.w2).abs() < 0.02 * e.w2);
    }
}
