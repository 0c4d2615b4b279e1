//! Coefficient models `b(t, ξ, μ)`, `σ(t, x)` with their regularity
//! constants, test functions, and the generator `L_{t,μ}`.
//!
//! A model sees the measure argument only through [`MeasureFeatures`], a
//! vector of statistics it extracts once per time step. This keeps the
//! per-particle drift evaluation `O(1)` in the particle count.

use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pathspace::{Segment, SegmentView};
use crate::transport::PathMeasure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionKind {
    /// `σ(t)` only.
    Additive,
    /// `σ(t, x)`.
    State,
    /// `σ ≡ 0`.
    None,
}

/// Declared constants, all constant in time.
///
/// `alpha*`, `beta*`, `kappa` enter the W2 contraction estimate,
/// `kappa0..kappa2`, `lambda` the invertibility/Lipschitz assumption used by
/// the coupling, `k_growth` the linear growth condition, and `grad_b_sq`
/// bounds `‖∇_ξ b‖²` in sup-norm (the shift-Harnack constant).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularityConstants {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub kappa: f64,
    pub k_growth: f64,
    pub kappa0: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub kappa3: f64,
    pub lambda: f64,
    pub grad_b_sq: f64,
    /// Whether `σ` is invertible with `‖σ⁻¹‖ ≤ lambda`.
    pub invertible: bool,
}

impl RegularityConstants {
    pub fn validate(&self, kind: DiffusionKind) -> Result<()> {
        let all = [
            self.alpha1, self.alpha2, self.beta1, self.beta2, self.kappa, self.k_growth, self.kappa0,
            self.kappa1, self.kappa2, self.kappa3, self.lambda, self.grad_b_sq,
        ];
        if all.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
            return Err(Error::InvalidArgument("regularity constants must be finite and nonnegative".into()));
        }
        if kind == DiffusionKind::Additive && (self.kappa1 != 0.0 || self.kappa3 != 0.0) {
            return Err(Error::InvalidArgument("additive noise requires kappa1 = kappa3 = 0".into()));
        }
        Ok(())
    }
}

/// Statistics of a path measure that a model's drift depends on.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeasureFeatures(pub Vec<f64>);

impl MeasureFeatures {
    pub fn empty() -> Self {
        Self(Vec::new())
    }
}

/// Drift, diffusion and declared constants of a path-distribution
/// dependent SDE. Implementations must be pure.
pub trait CoefficientModel: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn diffusion_kind(&self) -> DiffusionKind;
    fn constants(&self) -> &RegularityConstants;

    /// Delay horizon the drift assumes, if any; segments fed to the model
    /// must live on a grid with this `r0`.
    fn delay(&self) -> Option<f64> {
        None
    }

    fn measure_features(&self, _t: f64, _mu: &dyn PathMeasure) -> MeasureFeatures {
        MeasureFeatures::empty()
    }

    fn drift(&self, t: f64, xi: SegmentView<'_>, mu: &MeasureFeatures, out: &mut [f64]);

    fn diffusion(&self, t: f64, x: &[f64]) -> DMatrix<f64>;

    /// `out = σ(t, x)·dw`.
    fn apply_diffusion(&self, t: f64, x: &[f64], dw: &[f64], out: &mut [f64]) {
        let s = self.diffusion(t, x);
        let d = self.dim();
        for i in 0..d {
            out[i] = (0..d).map(|j| s[(i, j)] * dw[j]).sum();
        }
    }

    /// `σ(t)⁻¹` for additive noise.
    fn diffusion_inverse(&self, t: f64) -> Result<DMatrix<f64>> {
        if self.diffusion_kind() == DiffusionKind::None {
            return Err(Error::Singular("model has no diffusion".into()));
        }
        let x = vec![0.0; self.dim()];
        self.diffusion(t, &x)
            .try_inverse()
            .ok_or_else(|| Error::Singular("diffusion matrix is not invertible".into()))
    }

    /// Directional derivative `∇_dir b(t, ·, μ)(ξ)`. Returns `false` when the
    /// model does not supply one.
    fn drift_directional(
        &self,
        _t: f64,
        _xi: SegmentView<'_>,
        _dir: SegmentView<'_>,
        _mu: &MeasureFeatures,
        _out: &mut [f64],
    ) -> bool {
        false
    }
}

static FD_WARNED: AtomicBool = AtomicBool::new(false);

/// Model-supplied directional derivative, or a central finite difference
/// with step `1e-5·scale` when the model has none (logged once).
pub fn drift_directional_or_fd(
    model: &dyn CoefficientModel,
    t: f64,
    xi: SegmentView<'_>,
    dir: SegmentView<'_>,
    mu: &MeasureFeatures,
    out: &mut [f64],
) {
    if model.drift_directional(t, xi, dir, mu, out) {
        return;
    }
    if !FD_WARNED.swap(true, Ordering::Relaxed) {
        log::warn!("model '{}' has no drift derivative; using finite differences", model.name());
    }
    let dn = dir.sup_norm();
    if dn == 0.0 {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let s = 1e-5 * xi.sup_norm().max(1.0) / dn;
    let plus: Vec<f64> = xi.values().iter().zip(dir.values()).map(|(a, b)| a + s * b).collect();
    let minus: Vec<f64> = xi.values().iter().zip(dir.values()).map(|(a, b)| a - s * b).collect();
    let d = model.dim();
    let mut bp = vec![0.0; d];
    let mut bm = vec![0.0; d];
    model.drift(t, SegmentView::new_unchecked(xi.grid(), d, &plus), mu, &mut bp);
    model.drift(t, SegmentView::new_unchecked(xi.grid(), d, &minus), mu, &mut bm);
    for c in 0..d {
        out[c] = (bp[c] - bm[c]) / (2.0 * s);
    }
}

/// Convenience: `b(t, ξ, μ)` with the features extracted on the spot.
pub fn drift_at(model: &dyn CoefficientModel, t: f64, xi: SegmentView<'_>, mu: &dyn PathMeasure) -> Result<Vec<f64>> {
    check_dims(model, xi, mu)?;
    let feats = model.measure_features(t, mu);
    let mut out = vec![0.0; model.dim()];
    model.drift(t, xi, &feats, &mut out);
    Ok(out)
}

fn check_dims(model: &dyn CoefficientModel, xi: SegmentView<'_>, mu: &dyn PathMeasure) -> Result<()> {
    let d = model.dim();
    if xi.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: xi.dim() });
    }
    if mu.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: mu.dim() });
    }
    if let Some(r0) = model.delay() {
        if (xi.grid().r0() - r0).abs() > 1e-12 * r0 {
            return Err(Error::InvalidGrid(format!("model delay {r0} but segment horizon {}", xi.grid().r0())));
        }
    }
    Ok(())
}

fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// `b(t, ξ, μ) = A0·ξ(0) + A1·ξ(−r0) + B·∫ζ(0) μ(dζ)`, `σ ≡ sigma0`.
#[derive(Debug, Clone)]
pub struct LinearMeanFieldDelay {
    dim: usize,
    r0: f64,
    a0: DMatrix<f64>,
    a1: DMatrix<f64>,
    b: DMatrix<f64>,
    sigma0: DMatrix<f64>,
    kind: DiffusionKind,
    constants: RegularityConstants,
    // Row-major copies used by the per-particle evaluations.
    flat: [Vec<f64>; 4],
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Builds the linear mean-field delay model and certifies its constants.
///
/// With `u = ξ(0) − η(0)`, `v = ξ(−r0) − η(−r0)` and Young's inequality
/// `2|⟨Mw, u⟩| ≤ ‖M‖(|u|²/2 + 2|w|²)` for the `A1` and `B` terms:
/// `κ = λ_min(−(A0+A0ᵀ)) − ‖A1‖/2 − ‖B‖/2` (clamped at 0, the deficit moved
/// into `β1`), `β1 = 2‖A1‖`, `β2 = 2‖B‖`.
pub fn make_linear_meanfield_delay(
    dim: usize,
    a0: DMatrix<f64>,
    a1: DMatrix<f64>,
    b: DMatrix<f64>,
    sigma0: DMatrix<f64>,
    r0: f64,
) -> Result<LinearMeanFieldDelay> {
    for (name, m) in [("A0", &a0), ("A1", &a1), ("B", &b), ("sigma0", &sigma0)] {
        if m.nrows() != dim || m.ncols() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: m.nrows().max(m.ncols()) })
                .map_err(|e| Error::InvalidArgument(format!("{name}: {e}")));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("{name} has non-finite entries")));
        }
    }
    if !(r0 > 0.0) {
        return Err(Error::InvalidArgument(format!("r0 must be positive, got {r0}")));
    }
    let zero_noise = sigma0.iter().all(|v| *v == 0.0);
    let kind = if zero_noise { DiffusionKind::None } else { DiffusionKind::Additive };
    let (lambda, invertible) = if zero_noise {
        (0.0, false)
    } else {
        let inv = sigma0
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singular("sigma0 is not invertible".into()))?;
        if op_norm(&sigma0) / op_norm(&inv).recip() > 1e12 {
            return Err(Error::Singular("sigma0 is numerically singular".into()));
        }
        (op_norm(&inv), true)
    };

    let n_a0 = op_norm(&a0);
    let n_a1 = op_norm(&a1);
    let n_b = op_norm(&b);
    let sym = -(&a0 + a0.transpose());
    let lam_min = SymmetricEigen::new(sym).eigenvalues.min();
    let raw = lam_min - 0.5 * n_a1 - 0.5 * n_b;
    let kappa = raw.max(0.0);
    let beta1 = 2.0 * n_a1 + (-raw).max(0.0);
    let beta2 = 2.0 * n_b;
    let sigma_hs_sq = sigma0.iter().map(|v| v * v).sum::<f64>();
    let growth = (n_b * n_b).max(sigma_hs_sq);

    let constants = RegularityConstants {
        alpha1: 0.0,
        alpha2: 0.0,
        beta1,
        beta2,
        kappa,
        k_growth: growth,
        kappa0: growth,
        kappa1: 0.0,
        kappa2: n_a0 + n_a1 + n_b,
        kappa3: 0.0,
        lambda,
        grad_b_sq: (n_a0 + n_a1).powi(2),
        invertible,
    };
    constants.validate(kind)?;
    let flat = [row_major(&a0), row_major(&a1), row_major(&b), row_major(&sigma0)];
    Ok(LinearMeanFieldDelay { dim, r0, a0, a1, b, sigma0, kind, constants, flat })
}

impl LinearMeanFieldDelay {
    pub fn a0(&self) -> &DMatrix<f64> {
        &self.a0
    }

    pub fn a1(&self) -> &DMatrix<f64> {
        &self.a1
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn sigma0(&self) -> &DMatrix<f64> {
        &self.sigma0
    }

    pub fn r0(&self) -> f64 {
        self.r0
    }
}

/// `out += M·x` for a row-major square `M`.
fn mat_vec_acc(m: &[f64], x: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(m.chunks_exact(x.len())) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

impl CoefficientModel for LinearMeanFieldDelay {
    fn name(&self) -> &str {
        "linear_meanfield_delay"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn diffusion_kind(&self) -> DiffusionKind {
        self.kind
    }

    fn constants(&self) -> &RegularityConstants {
        &self.constants
    }

    fn delay(&self) -> Option<f64> {
        Some(self.r0)
    }

    fn measure_features(&self, _t: f64, mu: &dyn PathMeasure) -> MeasureFeatures {
        MeasureFeatures(mu.mean_endpoint())
    }

    fn drift(&self, _t: f64, xi: SegmentView<'_>, mu: &MeasureFeatures, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        mat_vec_acc(&self.flat[0], xi.endpoint(), out);
        mat_vec_acc(&self.flat[1], xi.start(), out);
        if !mu.0.is_empty() {
            mat_vec_acc(&self.flat[2], &mu.0, out);
        }
    }

    fn diffusion(&self, _t: f64, _x: &[f64]) -> DMatrix<f64> {
        self.sigma0.clone()
    }

    fn apply_diffusion(&self, _t: f64, _x: &[f64], dw: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        mat_vec_acc(&self.flat[3], dw, out);
    }

    fn drift_directional(
        &self,
        _t: f64,
        _xi: SegmentView<'_>,
        dir: SegmentView<'_>,
        _mu: &MeasureFeatures,
        out: &mut [f64],
    ) -> bool {
        // The mean-field term does not depend on ξ.
        out.iter_mut().for_each(|v| *v = 0.0);
        mat_vec_acc(&self.flat[0], dir.endpoint(), out);
        mat_vec_acc(&self.flat[1], dir.start(), out);
        true
    }
}

/// `b ≡ c`, `σ ≡ sigma` (possibly zero). Measure- and state-independent.
#[derive(Debug, Clone)]
pub struct ConstantDrift {
    c: Vec<f64>,
    sigma: DMatrix<f64>,
    kind: DiffusionKind,
    constants: RegularityConstants,
}

impl ConstantDrift {
    pub fn new(c: Vec<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = c.len();
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: sigma.nrows() });
        }
        let zero = sigma.iter().all(|v| *v == 0.0);
        let kind = if zero { DiffusionKind::None } else { DiffusionKind::Additive };
        let (lambda, invertible) = match (zero, sigma.clone().try_inverse()) {
            (false, Some(inv)) => (op_norm(&inv), true),
            _ => (0.0, false),
        };
        let c_sq: f64 = c.iter().map(|v| v * v).sum();
        let s_sq: f64 = sigma.iter().map(|v| v * v).sum();
        let constants = RegularityConstants {
            alpha1: 0.0,
            alpha2: 0.0,
            beta1: 0.0,
            beta2: 0.0,
            kappa: 0.0,
            k_growth: c_sq + s_sq,
            kappa0: c_sq + s_sq,
            kappa1: 0.0,
            kappa2: 0.0,
            kappa3: 0.0,
            lambda,
            grad_b_sq: 0.0,
            invertible,
        };
        Ok(Self { c, sigma, kind, constants })
    }
}

impl CoefficientModel for ConstantDrift {
    fn name(&self) -> &str {
        "constant_drift"
    }

    fn dim(&self) -> usize {
        self.c.len()
    }

    fn diffusion_kind(&self) -> DiffusionKind {
        self.kind
    }

    fn constants(&self) -> &RegularityConstants {
        &self.constants
    }

    fn drift(&self, _t: f64, _xi: SegmentView<'_>, _mu: &MeasureFeatures, out: &mut [f64]) {
        out.copy_from_slice(&self.c);
    }

    fn diffusion(&self, _t: f64, _x: &[f64]) -> DMatrix<f64> {
        self.sigma.clone()
    }

    fn drift_directional(
        &self,
        _t: f64,
        _xi: SegmentView<'_>,
        _dir: SegmentView<'_>,
        _mu: &MeasureFeatures,
        out: &mut [f64],
    ) -> bool {
        out.iter_mut().for_each(|v| *v = 0.0);
        true
    }
}

/// A smooth function on `R^d` with analytic first and second derivatives.
/// The Hessian is written row-major into a `d·d` slice.
pub trait TestFunction: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], out: &mut [f64]);
    fn hessian(&self, x: &[f64], out: &mut [f64]);
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantFn(pub f64);

impl TestFunction for ConstantFn {
    fn value(&self, _x: &[f64]) -> f64 {
        self.0
    }
    fn gradient(&self, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
    fn hessian(&self, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// `x ↦ x_i`.
#[derive(Debug, Clone, Copy)]
pub struct Coordinate(pub usize);

impl TestFunction for Coordinate {
    fn value(&self, x: &[f64]) -> f64 {
        x[self.0]
    }
    fn gradient(&self, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        out[self.0] = 1.0;
    }
    fn hessian(&self, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// `x ↦ |x|²`.
#[derive(Debug, Clone, Copy)]
pub struct SquaredNorm;

impl TestFunction for SquaredNorm {
    fn value(&self, x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(x) {
            *o = 2.0 * v;
        }
    }
    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..d {
            out[i * d + i] = 2.0;
        }
    }
}

/// `x ↦ cos⟨a, x⟩`.
#[derive(Debug, Clone)]
pub struct CosineWave(pub Vec<f64>);

impl CosineWave {
    fn phase(&self, x: &[f64]) -> f64 {
        self.0.iter().zip(x).map(|(a, v)| a * v).sum()
    }
}

impl TestFunction for CosineWave {
    fn value(&self, x: &[f64]) -> f64 {
        self.phase(x).cos()
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let s = -self.phase(x).sin();
        for (o, a) in out.iter_mut().zip(&self.0) {
            *o = s * a;
        }
    }
    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        let c = -self.phase(x).cos();
        let d = self.0.len();
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = c * self.0[i] * self.0[j];
            }
        }
    }
}

/// Scratch buffers for repeated generator evaluations.
pub(crate) struct GeneratorScratch {
    grad: Vec<f64>,
    hess: Vec<f64>,
    drift: Vec<f64>,
}

impl GeneratorScratch {
    pub(crate) fn new(d: usize) -> Self {
        Self { grad: vec![0.0; d], hess: vec![0.0; d * d], drift: vec![0.0; d] }
    }
}

/// `(L_{t,μ} f)(ξ)` given precomputed `a = σσ*` at `(t, ξ(0))`.
pub(crate) fn generator_with(
    model: &dyn CoefficientModel,
    t: f64,
    xi: SegmentView<'_>,
    feats: &MeasureFeatures,
    a: &DMatrix<f64>,
    f: &dyn TestFunction,
    s: &mut GeneratorScratch,
) -> f64 {
    let d = model.dim();
    let x = xi.endpoint();
    f.gradient(x, &mut s.grad);
    f.hessian(x, &mut s.hess);
    model.drift(t, xi, feats, &mut s.drift);
    let mut second = 0.0;
    for i in 0..d {
        for j in 0..d {
            second += a[(i, j)] * s.hess[i * d + j];
        }
    }
    let first: f64 = s.drift.iter().zip(&s.grad).map(|(b, g)| b * g).sum();
    0.5 * second + first
}

/// `½ Σ (σσ*)_{ij} ∂_i∂_j f(ξ(0)) + Σ b_i ∂_i f(ξ(0))`.
pub fn generator_apply(
    model: &dyn CoefficientModel,
    t: f64,
    xi: &Segment,
    mu: &dyn PathMeasure,
    f: &dyn TestFunction,
) -> Result<f64> {
    check_dims(model, xi.view(), mu)?;
    let feats = model.measure_features(t, mu);
    let sigma = model.diffusion(t, xi.endpoint());
    let a = &sigma * sigma.transpose();
    let mut s = GeneratorScratch::new(model.dim());
    Ok(generator_with(model, t, xi.view(), &feats, &a, f, &mut s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pathspace::PathGrid;
    use crate::transport::{w2_exact, EmpiricalPathMeasure};
    use crate::rng::NoiseSource;

    fn grid() -> PathGrid {
        PathGrid::new(1.0, 4).unwrap()
    }

    fn eye(d: usize) -> DMatrix<f64> {
        DMatrix::identity(d, d)
    }

    fn zeros(d: usize) -> DMatrix<f64> {
        DMatrix::zeros(d, d)
    }

    #[test]
    fn dissipative_identity_constants() {
        // 2⟨-u, u⟩ = -2|u|²: κ = 2 with β1 = β2 = 0.
        let m = make_linear_meanfield_delay(2, -eye(2), zeros(2), zeros(2), eye(2), 1.0).unwrap();
        let c = m.constants();
        assert!((c.kappa - 2.0).abs() < 1e-12);
        assert_eq!(c.beta1, 0.0);
        assert_eq!(c.beta2, 0.0);
        assert!((c.lambda - 1.0).abs() < 1e-12);
        assert!((c.kappa2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_sigma_is_rejected() {
        let mut s = eye(2);
        s[(1, 1)] = 0.0;
        assert!(matches!(
            make_linear_meanfield_delay(2, -eye(2), zeros(2), zeros(2), s, 1.0),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn zero_model_has_zero_drift() {
        let m = make_linear_meanfield_delay(2, zeros(2), zeros(2), zeros(2), eye(2), 1.0).unwrap();
        let xi = Segment::constant(grid(), &[1.0, -2.0]);
        let mu = EmpiricalPathMeasure::dirac(&Segment::constant(grid(), &[3.0, 3.0]));
        assert_eq!(drift_at(&m, 0.0, xi.view(), &mu).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn centered_measure_removes_meanfield_term() {
        let b = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, -0.2, 0.3]);
        let a1 = DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 0.2]);
        let with_b = make_linear_meanfield_delay(2, -eye(2), a1.clone(), b, eye(2), 1.0).unwrap();
        let without = make_linear_meanfield_delay(2, -eye(2), a1, zeros(2), eye(2), 1.0).unwrap();
        let xi = Segment::from_fn(grid(), 2, |s| vec![s, 1.0 + s]).unwrap();
        let delta0 = EmpiricalPathMeasure::dirac(&Segment::zeros(grid(), 2));
        assert_eq!(
            drift_at(&with_b, 0.0, xi.view(), &delta0).unwrap(),
            drift_at(&without, 0.0, xi.view(), &delta0).unwrap()
        );
    }

    #[test]
    fn monotonicity_holds_on_random_samples() {
        let a0 = DMatrix::from_row_slice(2, 2, &[-1.5, 0.4, -0.2, -1.0]);
        let a1 = DMatrix::from_row_slice(2, 2, &[0.3, -0.1, 0.2, 0.1]);
        let b = DMatrix::from_row_slice(2, 2, &[0.4, 0.2, 0.0, -0.3]);
        let m = make_linear_meanfield_delay(2, a0, a1, b, eye(2), 1.0).unwrap();
        let c = *m.constants();
        let g = grid();
        let noise = NoiseSource::new(11, "h2-samples", 2);
        let mut rng = noise.stream(0);
        let mut draw_seg = |scale: f64| {
            let mut v = Vec::with_capacity(g.points() * 2);
            for _ in 0..g.points() {
                let (a, b) = rng.normal_pair();
                v.push(scale * a);
                v.push(scale * b);
            }
            Segment::new(g, 2, v).unwrap()
        };
        for _ in 0..10_000 {
            let xi = draw_seg(2.0);
            let eta = draw_seg(2.0);
            let mu = EmpiricalPathMeasure::from_segments(&[draw_seg(1.0), draw_seg(1.0), draw_seg(1.0)]).unwrap();
            let nu = EmpiricalPathMeasure::from_segments(&[draw_seg(1.0), draw_seg(1.0), draw_seg(1.0)]).unwrap();
            let w2 = w2_exact(&mu, &nu).unwrap();
            let bx = drift_at(&m, 0.0, xi.view(), &mu).unwrap();
            let by = drift_at(&m, 0.0, eta.view(), &nu).unwrap();
            let u: Vec<f64> = xi.endpoint().iter().zip(eta.endpoint()).map(|(a, b)| a - b).collect();
            let lhs: f64 = 2.0 * bx.iter().zip(&by).zip(&u).map(|((p, q), w)| (p - q) * w).sum::<f64>();
            let dsq = xi.view().sup_dist_sq(&eta.view());
            let usq: f64 = u.iter().map(|v| v * v).sum();
            let rhs = c.beta1 * dsq + c.beta2 * w2 * w2 - c.kappa * usq;
            assert!(lhs <= rhs + 1e-9, "lhs {lhs} > rhs {rhs}");
            // Lipschitz bound used by the coupling
            let diff: f64 = bx.iter().zip(&by).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            assert!(diff <= c.kappa2 * (dsq.sqrt() + w2) + 1e-9);
        }
    }

    fn fd_check(f: &dyn TestFunction, x: &[f64]) {
        let d = x.len();
        let h = 1e-5;
        let mut g = vec![0.0; d];
        let mut hs = vec![0.0; d * d];
        f.gradient(x, &mut g);
        f.hessian(x, &mut hs);
        for i in 0..d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let fd = (f.value(&xp) - f.value(&xm)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-5, "gradient {i}: {fd} vs {}", g[i]);
            let mut gp = vec![0.0; d];
            let mut gm = vec![0.0; d];
            f.gradient(&xp, &mut gp);
            f.gradient(&xm, &mut gm);
            for j in 0..d {
                let fdh = (gp[j] - gm[j]) / (2.0 * h);
                assert!((fdh - hs[j * d + i]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn test_functions_match_finite_differences() {
        let pts = [[0.3, -1.2], [2.0, 0.5], [-0.7, 0.0]];
        for x in pts {
            fd_check(&ConstantFn(3.0), &x);
            fd_check(&Coordinate(1), &x);
            fd_check(&SquaredNorm, &x);
            fd_check(&CosineWave(vec![0.7, -1.3]), &x);
        }
    }

    #[test]
    fn generator_examples() {
        let a0 = DMatrix::from_row_slice(2, 2, &[-1.0, 0.3, 0.0, -0.5]);
        let b = DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.1, 0.2]);
        let m = make_linear_meanfield_delay(2, a0, 0.1 * eye(2), b, eye(2), 1.0).unwrap();
        let xi = Segment::from_fn(grid(), 2, |s| vec![1.0 + s, -0.5 * s]).unwrap();
        let mu = EmpiricalPathMeasure::from_segments(&[
            Segment::constant(grid(), &[1.0, 2.0]),
            Segment::constant(grid(), &[-0.5, 0.0]),
        ])
        .unwrap();
        assert_eq!(generator_apply(&m, 0.0, &xi, &mu, &ConstantFn(4.0)).unwrap(), 0.0);
        let bvec = drift_at(&m, 0.0, xi.view(), &mu).unwrap();
        for i in 0..2 {
            let v = generator_apply(&m, 0.0, &xi, &mu, &Coordinate(i)).unwrap();
            assert!((v - bvec[i]).abs() < 1e-14);
        }
        // |x|² with σ = I: d + 2⟨b, ξ(0)⟩
        let v = generator_apply(&m, 0.0, &xi, &mu, &SquaredNorm).unwrap();
        let expect = 2.0 + 2.0 * (bvec[0] * xi.endpoint()[0] + bvec[1] * xi.endpoint()[1]);
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn generator_is_linear_and_second_order_term_is_state_free() {
        struct Combo(f64, CosineWave, f64);
        impl TestFunction for Combo {
            fn value(&self, x: &[f64]) -> f64 {
                self.0 * self.1.value(x) + self.2 * SquaredNorm.value(x)
            }
            fn gradient(&self, x: &[f64], out: &mut [f64]) {
                let mut g1 = vec![0.0; x.len()];
                let mut g2 = vec![0.0; x.len()];
                self.1.gradient(x, &mut g1);
                SquaredNorm.gradient(x, &mut g2);
                for i in 0..x.len() {
                    out[i] = self.0 * g1[i] + self.2 * g2[i];
                }
            }
            fn hessian(&self, x: &[f64], out: &mut [f64]) {
                let n = x.len() * x.len();
                let mut h1 = vec![0.0; n];
                let mut h2 = vec![0.0; n];
                self.1.hessian(x, &mut h1);
                SquaredNorm.hessian(x, &mut h2);
                for i in 0..n {
                    out[i] = self.0 * h1[i] + self.2 * h2[i];
                }
            }
        }
        let m = make_linear_meanfield_delay(2, -eye(2), 0.2 * eye(2), 0.3 * eye(2), 0.7 * eye(2), 1.0).unwrap();
        let mu = EmpiricalPathMeasure::from_segments(&[Segment::constant(grid(), &[1.0, 0.0])]).unwrap();
        let xi = Segment::from_fn(grid(), 2, |s| vec![s.cos(), s]).unwrap();
        let wave = CosineWave(vec![0.4, 1.1]);
        let (a, c) = (1.7, -0.6);
        let lhs = generator_apply(&m, 0.0, &xi, &mu, &Combo(a, wave.clone(), c)).unwrap();
        let rhs = a * generator_apply(&m, 0.0, &xi, &mu, &wave).unwrap()
            + c * generator_apply(&m, 0.0, &xi, &mu, &SquaredNorm).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);

        // For |x|² the second-order part is tr(σσ*) whatever ξ and μ are.
        let zero_drift = make_linear_meanfield_delay(2, zeros(2), zeros(2), zeros(2), 0.7 * eye(2), 1.0).unwrap();
        for p in [[0.0, 0.0], [5.0, -3.0]] {
            let x = Segment::constant(grid(), &p);
            let v = generator_apply(&zero_drift, 0.0, &x, &mu, &SquaredNorm).unwrap();
            assert!((v - 2.0 * 0.49).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = make_linear_meanfield_delay(2, -eye(2), zeros(2), zeros(2), eye(2), 1.0).unwrap();
        let xi = Segment::constant(grid(), &[1.0]);
        let mu = EmpiricalPathMeasure::dirac(&Segment::constant(grid(), &[0.0, 0.0]));
        assert!(matches!(
            generator_apply(&m, 0.0, &xi, &mu, &SquaredNorm),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn finite_difference_fallback_matches_analytic() {
        struct NoDeriv(LinearMeanFieldDelay);
        impl CoefficientModel for NoDeriv {
            fn name(&self) -> &str {
                "no-deriv"
            }
            fn dim(&self) -> usize {
                self.0.dim()
            }
            fn diffusion_kind(&self) -> DiffusionKind {
                self.0.diffusion_kind()
            }
            fn constants(&self) -> &RegularityConstants {
                self.0.constants()
            }
            fn drift(&self, t: f64, xi: SegmentView<'_>, mu: &MeasureFeatures, out: &mut [f64]) {
                self.0.drift(t, xi, mu, out)
            }
            fn diffusion(&self, t: f64, x: &[f64]) -> DMatrix<f64> {
                self.0.diffusion(t, x)
            }
        }
        let a0 = DMatrix::from_row_slice(2, 2, &[-1.0, 0.3, 0.2, -0.5]);
        let lin = make_linear_meanfield_delay(2, a0, 0.4 * eye(2), 0.3 * eye(2), eye(2), 1.0).unwrap();
        let wrapped = NoDeriv(lin.clone());
        let xi = Segment::from_fn(grid(), 2, |s| vec![s.sin(), 2.0 + s]).unwrap();
        let dir = Segment::from_fn(grid(), 2, |s| vec![1.0 + s, -s * s]).unwrap();
        let feats = MeasureFeatures(vec![0.5, -0.5]);
        let mut a = vec![0.0; 2];
        let mut b = vec![0.0; 2];
        drift_directional_or_fd(&lin, 0.0, xi.view(), dir.view(), &feats, &mut a);
        drift_directional_or_fd(&wrapped, 0.0, xi.view(), dir.view(), &feats, &mut b);
        for i in 0..2 {
            assert!((a[i] - b[i]).abs() < 1e-6);
        }
    }
}
