//! Closed-form W2 contraction bound, the exponential-contraction
//! criterion, and entropy / total-variation utilities on finite alphabets.
//!
//! With time-constant coefficients the contraction bound reads
//!
//! ```text
//! W2(μ_t, ν_t)² ≤ inf_{ε,δ} W0²/(1−ε) · exp[(r0−t)δ + e^{δ r0}/(1−ε) · t · (4(α1+α2)/ε + β1+β2)]
//! ```
//!
//! with `ε ∈ (0,1)` and `δ ∈ [0, κ]`. The infimum over `ε` is taken on a
//! geometric grid, the one over `δ` by golden-section search.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::RegularityConstants;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionParams {
    pub r0: f64,
    pub kappa: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl ContractionParams {
    pub fn from_constants(r0: f64, c: &RegularityConstants) -> Self {
        Self { r0, kappa: c.kappa, alpha1: c.alpha1, alpha2: c.alpha2, beta1: c.beta1, beta2: c.beta2 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.kappa, self.alpha1, self.alpha2, self.beta1, self.beta2];
        if !(self.r0 > 0.0) || all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid contraction parameters {self:?}")));
        }
        Ok(())
    }

    fn alpha(&self) -> f64 {
        self.alpha1 + self.alpha2
    }

    fn beta(&self) -> f64 {
        self.beta1 + self.beta2
    }

    /// `4(α1+α2)/ε + β1+β2`
    fn rate_integrand(&self, eps: f64) -> f64 {
        let a = self.alpha();
        let a_term = if a == 0.0 { 0.0 } else { 4.0 * a / eps };
        a_term + self.beta()
    }
}

/// Geometric grid of `ε` values in `[lo, hi] ⊂ (0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsGrid {
    pub points: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for EpsGrid {
    fn default() -> Self {
        Self { points: 128, lo: 1e-6, hi: 1.0 - 1e-6 }
    }
}

impl EpsGrid {
    pub fn values(&self) -> Vec<f64> {
        if self.points <= 1 {
            return vec![self.lo];
        }
        let ratio = (self.hi / self.lo).ln();
        (0..self.points)
            .map(|i| {
                if i + 1 == self.points {
                    self.hi
                } else {
                    self.lo * (ratio * i as f64 / (self.points - 1) as f64).exp()
                }
            })
            .collect()
    }

    /// The nested grid with `2n − 1` points; it contains every point of
    /// `self`, so minima over it never increase.
    pub fn doubled(&self) -> Self {
        Self { points: 2 * self.points - 1, ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points == 0 || !(self.lo > 0.0) || !(self.hi < 1.0) || self.lo > self.hi {
            return Err(Error::InvalidArgument(format!("invalid eps grid {self:?}")));
        }
        Ok(())
    }
}

/// Minimizer of a convex function on `[lo, hi]` by golden-section search,
/// compared against both endpoints.
fn golden_min(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> (f64, f64) {
    if hi <= lo {
        return (lo, f(lo));
    }
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a) <= 1e-13 * (1.0 + hi.abs()) {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    [(lo, f(lo)), (hi, f(hi)), (mid, f(mid))]
        .into_iter()
        .fold((lo, f64::INFINITY), |best, cand| if cand.1 < best.1 { cand } else { best })
}

/// Value of the bound with the grid point and `δ` achieving it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundValue {
    pub bound: f64,
    pub eps_star: f64,
    pub delta_star: f64,
}

pub fn contraction_bound_with(params: &ContractionParams, w0_sq: f64, t: f64, grid: &EpsGrid) -> BoundValue {
    // Compare in log space so the argmin is well defined when w0_sq = 0.
    let mut best_log = f64::INFINITY;
    let mut best = BoundValue { bound: f64::INFINITY, eps_star: grid.lo, delta_star: 0.0 };
    for eps in grid.values() {
        let c = t * params.rate_integrand(eps) / (1.0 - eps);
        let exponent = |delta: f64| (params.r0 - t) * delta + c * (delta * params.r0).exp();
        let (delta, e) = golden_min(exponent, 0.0, params.kappa);
        let log_b = e - (1.0 - eps).ln();
        if log_b < best_log {
            best_log = log_b;
            let bound = if w0_sq == 0.0 { 0.0 } else { w0_sq * log_b.exp() };
            best = BoundValue { bound, eps_star: eps, delta_star: delta };
        }
    }
    best
}

/// The bound on `W2(μ_t, ν_t)²` given `W2(μ_0, ν_0)² = w0_sq`, on the
/// default grid.
pub fn contraction_bound(params: &ContractionParams, w0_sq: f64, t: f64) -> f64 {
    contraction_bound_with(params, w0_sq, t, &EpsGrid::default()).bound
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExoReport {
    pub holds: bool,
    /// Asymptotic decay rate of the bound, `sup_{ε,δ} δ − e^{δ r0}(4(α1+α2)/ε + β1+β2)/(1−ε)`;
    /// positive exactly when `holds`.
    pub best_rate: f64,
    pub best_eps: f64,
    pub best_delta: f64,
    /// `min_ε 4(α1+α2)/(ε(1−ε)) + (β1+β2)/(1−ε)` on the grid.
    pub lhs_min: f64,
    /// `sup_{δ∈[0,κ]} δ e^{−δ r0}`.
    pub rhs: f64,
}

pub fn exo_criterion_with(params: &ContractionParams, grid: &EpsGrid) -> ExoReport {
    let (r0, kappa) = (params.r0, params.kappa);
    let rhs = if kappa <= 1.0 / r0 { kappa * (-kappa * r0).exp() } else { (-1.0f64).exp() / r0 };
    let mut lhs_min = f64::INFINITY;
    let (mut best_rate, mut best_eps, mut best_delta) = (f64::NEG_INFINITY, grid.lo, 0.0);
    for eps in grid.values() {
        let c = params.rate_integrand(eps) / (1.0 - eps);
        lhs_min = lhs_min.min(c);
        let delta = if c == 0.0 { kappa } else { (((1.0 - eps) / (r0 * params.rate_integrand(eps))).ln() / r0).clamp(0.0, kappa) };
        let rate = delta - (delta * r0).exp() * c;
        if rate > best_rate {
            best_rate = rate;
            best_eps = eps;
            best_delta = delta;
        }
    }
    ExoReport { holds: lhs_min < rhs, best_rate, best_eps, best_delta, lhs_min, rhs }
}

pub fn exo_criterion(params: &ContractionParams) -> ExoReport {
    exo_criterion_with(params, &EpsGrid::default())
}

/// Probability weights on a finite alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure(Vec<f64>);

impl DiscreteMeasure {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("weights sum to {s}, not 1")));
        }
        Ok(Self(weights))
    }

    /// Normalizes nonnegative weights.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        let s: f64 = weights.iter().sum();
        if !(s > 0.0) {
            return Err(Error::InvalidArgument("weights must have positive mass".into()));
        }
        Self::new(weights.into_iter().map(|w| w / s).collect())
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }
}

fn same_alphabet(a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<()> {
    if a.0.len() != b.0.len() {
        return Err(Error::SizeMismatch(format!("alphabets of size {} and {}", a.0.len(), b.0.len())));
    }
    Ok(())
}

/// `Ent(ν|μ) = Σ ν_i log(ν_i/μ_i)`, `+∞` if `ν` charges a `μ`-null atom.
pub fn relative_entropy(nu: &DiscreteMeasure, mu: &DiscreteMeasure) -> Result<f64> {
    same_alphabet(nu, mu)?;
    let mut s = 0.0;
    for (&p, &q) in nu.0.iter().zip(&mu.0) {
        if p == 0.0 {
            continue;
        }
        if q == 0.0 {
            return Ok(f64::INFINITY);
        }
        s += p * (p / q).ln();
    }
    // Rounding can leave a tiny negative sum for ν ≈ μ.
    Ok(s.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PinskerReport {
    pub tv: f64,
    pub ent: f64,
    pub satisfied: bool,
}

pub fn pinsker_check(nu: &DiscreteMeasure, mu: &DiscreteMeasure) -> Result<PinskerReport> {
    let ent = relative_entropy(nu, mu)?;
    let tv = 0.5 * nu.0.iter().zip(&mu.0).map(|(p, q)| (p - q).abs()).sum::<f64>();
    Ok(PinskerReport { tv, ent, satisfied: tv * tv <= 0.5 * ent + 1e-12 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(kappa: f64, a: f64, b: f64) -> ContractionParams {
        ContractionParams { r0: 1.0, kappa, alpha1: a, alpha2: 0.0, beta1: b, beta2: 0.0 }
    }

    #[test]
    fn zero_initial_distance() {
        assert_eq!(contraction_bound(&params(1.0, 0.1, 0.2), 0.0, 3.0), 0.0);
    }

    #[test]
    fn free_case_reaches_w0() {
        let p = params(0.0, 0.0, 0.0);
        for t in [0.0, 1.0, 7.5] {
            let b = contraction_bound(&p, 2.0, t);
            assert!((b - 2.0).abs() / 2.0 < 1e-5, "{b}");
        }
    }

    #[test]
    fn bound_decays_when_criterion_holds() {
        let p = ContractionParams { r0: 1.0, kappa: 1.0, alpha1: 0.0, alpha2: 0.0, beta1: 0.05, beta2: 0.05 };
        assert!(exo_criterion(&p).holds);
        assert!(contraction_bound(&p, 1.0, 5.0) < contraction_bound(&p, 1.0, 1.0));
    }

    #[test]
    fn golden_section_matches_closed_form_delta() {
        // For fixed ε the exponent (r0−t)δ + c e^{δ r0} has its stationary
        // point at δ = ln((t−r0)/(c r0))/r0, clamped to [0, κ].
        let p = ContractionParams { r0: 0.5, kappa: 3.0, alpha1: 0.02, alpha2: 0.01, beta1: 0.1, beta2: 0.05 };
        let grid = EpsGrid { points: 1, lo: 0.3, hi: 0.3 };
        for t in [0.2, 1.0, 4.0, 20.0] {
            let v = contraction_bound_with(&p, 1.0, t, &grid);
            let c = t * (4.0 * 0.03 / 0.3 + 0.15) / 0.7;
            let d = if t > p.r0 { ((t - p.r0) / (c * p.r0)).ln() / p.r0 } else { 0.0 };
            let d = d.clamp(0.0, p.kappa);
            assert!((v.delta_star - d).abs() < 1e-6, "t={t}: {} vs {d}", v.delta_star);
            let exact = ((p.r0 - t) * d + c * (d * p.r0).exp()).exp() / 0.7;
            assert!((v.bound - exact).abs() <= 1e-10 * exact);
        }
    }

    #[test]
    fn exo_examples() {
        assert!(!exo_criterion(&params(0.0, 0.0, 0.0)).holds);
        let r = exo_criterion(&params(1.0, 0.0, 0.0));
        assert!(r.holds);
        assert!((r.rhs - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(r.lhs_min, 0.0);
        // α1 = 1: min_ε 4/(ε(1−ε)) = 16 > e^{-1}
        let big = exo_criterion(&params(1.0, 1.0, 0.0));
        let brute = (1..100_000).map(|i| i as f64 / 100_000.0).map(|e| 4.0 / (e * (1.0 - e))).fold(f64::INFINITY, f64::min);
        assert!(brute > big.rhs);
        assert!(!big.holds);
        assert!(big.best_rate < 0.0);
    }

    #[test]
    fn best_rate_matches_dense_search() {
        let p = ContractionParams { r0: 1.0, kappa: 0.8, alpha1: 0.001, alpha2: 0.0, beta1: 0.05, beta2: 0.02 };
        let r = exo_criterion(&p);
        let mut best = f64::NEG_INFINITY;
        for e in EpsGrid::default().values() {
            let c = (4.0 * 0.001 / e + 0.07) / (1.0 - e);
            for k in 0..=8000 {
                let d = 0.8 * k as f64 / 8000.0;
                best = best.max(d - (d * 1.0f64).exp() * c);
            }
        }
        assert!(r.best_rate >= best - 1e-9 && r.best_rate - best < 1e-6);
        assert!(r.holds && r.best_rate > 0.0);
    }

    #[test]
    fn entropy_examples() {
        let m = |w: Vec<f64>| DiscreteMeasure::new(w).unwrap();
        assert_eq!(relative_entropy(&m(vec![0.3, 0.7]), &m(vec![0.3, 0.7])).unwrap(), 0.0);
        let e = relative_entropy(&m(vec![1.0, 0.0]), &m(vec![0.5, 0.5])).unwrap();
        assert!((e - 2f64.ln()).abs() < 1e-15);
        assert_eq!(relative_entropy(&m(vec![0.5, 0.5]), &m(vec![1.0, 0.0])).unwrap(), f64::INFINITY);
        let r = pinsker_check(&m(vec![0.25, 0.75]), &m(vec![0.5, 0.5])).unwrap();
        assert!((r.tv - 0.25).abs() < 1e-15);
        let half_ent = 0.5 * (0.25 * 0.5f64.ln() + 0.75 * 1.5f64.ln());
        assert!((0.5 * r.ent - half_ent).abs() < 1e-15);
        assert!(r.satisfied);
        assert!(relative_entropy(&m(vec![1.0]), &m(vec![0.5, 0.5])).is_err());
    }

    proptest! {
        #[test]
        fn homogeneous_in_w0(w in 0.01f64..10.0, c in 0.1f64..10.0, t in 0.0f64..8.0) {
            let p = ContractionParams { r0: 1.0, kappa: 0.7, alpha1: 0.01, alpha2: 0.02, beta1: 0.1, beta2: 0.1 };
            let a = contraction_bound(&p, c * w, t);
            let b = c * contraction_bound(&p, w, t);
            prop_assert!((a - b).abs() <= 1e-12 * b.abs());
        }

        #[test]
        fn doubling_never_increases(t in 0.0f64..10.0, a in 0.0f64..0.2, b in 0.0f64..0.5, k in 0.0f64..2.0) {
            let p = ContractionParams { r0: 0.5, kappa: k, alpha1: a, alpha2: 0.0, beta1: b, beta2: 0.0 };
            let g = EpsGrid { points: 17, ..EpsGrid::default() };
            let coarse = contraction_bound_with(&p, 1.0, t, &g).bound;
            let fine = contraction_bound_with(&p, 1.0, t, &g.doubled()).bound;
            prop_assert!(fine <= coarse);
        }

        #[test]
        fn time_zero_bracket(w in 0.01f64..10.0, a in 0.0f64..1.0, k in 0.0f64..3.0) {
            let p = ContractionParams { r0: 1.0, kappa: k, alpha1: a, alpha2: 0.0, beta1: 0.0, beta2: 0.0 };
            let b = contraction_bound(&p, w, 0.0);
            prop_assert!(b >= w * (1.0 - 1e-12));
            prop_assert!(b <= w / (1.0 - 1e-6) * (1.0 + 1e-12));
        }

        #[test]
        fn entropy_nonnegative_zero_iff_equal(
            a in prop::collection::vec(0.0f64..1.0, 1..50),
            seed in prop::collection::vec(0.0f64..1.0, 50),
        ) {
            prop_assume!(a.iter().sum::<f64>() > 0.0);
            let nu = DiscreteMeasure::normalized(a.clone()).unwrap();
            let b: Vec<f64> = seed[..a.len()].iter().map(|x| x + 1e-3).collect();
            let mu = DiscreteMeasure::normalized(b).unwrap();
            let e = relative_entropy(&nu, &mu).unwrap();
            prop_assert!(e >= 0.0);
            prop_assert_eq!(relative_entropy(&nu, &nu).unwrap(), 0.0);
            prop_assert!(pinsker_check(&nu, &mu).unwrap().satisfied);
        }
    }
}
