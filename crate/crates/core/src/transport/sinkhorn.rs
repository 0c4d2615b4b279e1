//! Entropic transport between uniform empirical measures, log-domain
//! Sinkhorn iterations with geometric ε-scaling.

use super::{ground_cost_matrix, CostMatrix, PathMeasure};
use crate::error::{Error, Result};

/// L1 marginal error at which the final level is declared converged.
const TOLERANCE: f64 = 1e-9;

/// Outcome of a Sinkhorn solve. `w2` is the square root of the transport
/// cost `Σ π_ij c_ij` of the entropic plan (the entropy term is excluded).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornReport {
    pub w2: f64,
    pub iterations: usize,
    pub converged: bool,
    pub marginal_error: f64,
    pub reg: f64,
}

pub fn w2_sinkhorn<M, V>(mu: &M, nu: &V, reg: f64, max_iter: usize) -> Result<SinkhornReport>
where
    M: PathMeasure + ?Sized,
    V: PathMeasure + ?Sized,
{
    let cost = ground_cost_matrix(mu, nu)?;
    sinkhorn_cost(&cost, reg, max_iter)
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + it.map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn sinkhorn_cost(cost: &CostMatrix, reg: f64, max_iter: usize) -> Result<SinkhornReport> {
    if !(reg > 0.0) || !reg.is_finite() {
        return Err(Error::InvalidArgument(format!("regularization must be positive, got {reg}")));
    }
    let n = cost.n();
    if n == 0 {
        return Err(Error::InvalidArgument("empty cost matrix".into()));
    }
    let log_w = -(n as f64).ln();
    let w = 1.0 / n as f64;
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n];

    let mut level = cost.max().max(reg);
    let mut iterations = 0usize;
    let mut err = f64::INFINITY;
    let mut converged = false;

    loop {
        let last = level <= reg;
        let eps = if last { reg } else { level };
        let level_tol = if last { TOLERANCE } else { 1e-3 };
        let mut inner = 0usize;
        loop {
            if iterations >= max_iter {
                break;
            }
            for i in 0..n {
                let row = cost.row(i);
                f[i] = eps * log_w - eps * log_sum_exp((0..n).map(|j| (g[j] - row[j]) / eps));
            }
            for j in 0..n {
                g[j] = eps * log_w - eps * log_sum_exp((0..n).map(|i| (f[i] - cost.get(i, j)) / eps));
            }
            iterations += 1;
            inner += 1;
            // Columns are exact after the g-update; measure the row error.
            err = (0..n)
                .map(|i| {
                    let row = cost.row(i);
                    let s: f64 = (0..n).map(|j| ((f[i] + g[j] - row[j]) / eps).exp()).sum();
                    (s - w).abs()
                })
                .sum();
            if err < level_tol || (!last && inner >= 200) {
                break;
            }
        }
        if last {
            converged = err < TOLERANCE;
            break;
        }
        if iterations >= max_iter {
            break;
        }
        level = (level * 0.5).max(reg);
    }

    let eps = reg;
    let mut total = 0.0;
    for i in 0..n {
        let row = cost.row(i);
        for j in 0..n {
            total += ((f[i] + g[j] - row[j]) / eps).exp() * row[j];
        }
    }
    Ok(SinkhornReport { w2: total.max(0.0).sqrt(), iterations, converged, marginal_error: err, reg })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nonpositive_reg() {
        let c = CostMatrix::from_rows(vec![vec![1.0]]).unwrap();
        assert!(sinkhorn_cost(&c, 0.0, 10).is_err());
        assert!(sinkhorn_cost(&c, -1.0, 10).is_err());
    }

    #[test]
    fn flags_non_convergence() {
        let c = CostMatrix::from_rows(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let r = sinkhorn_cost(&c, 1e-4, 1).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 1);
    }

    #[test]
    fn one_point_is_exact_for_any_reg() {
        let c = CostMatrix::from_rows(vec![vec![6.25]]).unwrap();
        for reg in [1e-3, 1.0, 100.0] {
            let r = sinkhorn_cost(&c, reg, 100).unwrap();
            assert!((r.w2 - 2.5).abs() < 1e-9);
            assert!(r.converged);
        }
    }
}
