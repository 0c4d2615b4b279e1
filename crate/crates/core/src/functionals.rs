//! Registry of path functionals `f: C → R` and point test functions, as
//! named in experiment configs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ConstantFn, Coordinate, CosineWave, SquaredNorm, TestFunction};
use crate::pathspace::SegmentView;

/// A functional of a segment, optionally differentiable along a direction.
pub trait PathFunctional: Send + Sync {
    fn value(&self, xi: SegmentView<'_>) -> f64;

    /// `(∇_dir f)(ξ)`, or `None` when not available.
    fn directional(&self, _xi: SegmentView<'_>, _dir: SegmentView<'_>) -> Option<f64> {
        None
    }
}

fn dot(a: &[f64], x: &[f64]) -> f64 {
    a.iter().zip(x).map(|(p, q)| p * q).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionalSpec {
    Constant { value: f64 },
    /// `⟨a, ξ(0)⟩`
    LinearEndpoint { a: Vec<f64> },
    /// `exp(min(⟨a, ξ(0)⟩, cap))`
    ExpCappedLinear { a: Vec<f64>, cap: f64 },
    /// `tanh⟨a, ξ(0)⟩`
    TanhEndpoint { a: Vec<f64> },
    /// `1 / (1 + exp(−⟨a, ξ(0)⟩))`
    LogisticEndpoint { a: Vec<f64> },
    /// `exp(min(avg_k ⟨a, ξ(θ_k)⟩, cap))`, the average over grid points.
    ExpCappedPathMean { a: Vec<f64>, cap: f64 },
}

impl FunctionalSpec {
    pub fn label(&self) -> &'static str {
        match self {
            FunctionalSpec::Constant { .. } => "constant",
            FunctionalSpec::LinearEndpoint { .. } => "linear_endpoint",
            FunctionalSpec::ExpCappedLinear { .. } => "exp_capped_linear",
            FunctionalSpec::TanhEndpoint { .. } => "tanh_endpoint",
            FunctionalSpec::LogisticEndpoint { .. } => "logistic_endpoint",
            FunctionalSpec::ExpCappedPathMean { .. } => "exp_capped_path_mean",
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let a = match self {
            FunctionalSpec::Constant { value } => {
                return if value.is_finite() {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument("constant functional must be finite".into()))
                }
            }
            FunctionalSpec::LinearEndpoint { a }
            | FunctionalSpec::TanhEndpoint { a }
            | FunctionalSpec::LogisticEndpoint { a }
            | FunctionalSpec::ExpCappedLinear { a, .. }
            | FunctionalSpec::ExpCappedPathMean { a, .. } => a,
        };
        if a.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: a.len() });
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("functional coefficients must be finite".into()));
        }
        Ok(())
    }

    /// Bounded on `C`.
    pub fn is_bounded(&self) -> bool {
        !matches!(self, FunctionalSpec::LinearEndpoint { .. })
    }

    fn path_mean(a: &[f64], xi: SegmentView<'_>) -> f64 {
        let pts = xi.grid().points();
        (0..pts).map(|k| dot(a, xi.point(k))).sum::<f64>() / pts as f64
    }
}

impl PathFunctional for FunctionalSpec {
    fn value(&self, xi: SegmentView<'_>) -> f64 {
        match self {
            FunctionalSpec::Constant { value } => *value,
            FunctionalSpec::LinearEndpoint { a } => dot(a, xi.endpoint()),
            FunctionalSpec::ExpCappedLinear { a, cap } => dot(a, xi.endpoint()).min(*cap).exp(),
            FunctionalSpec::TanhEndpoint { a } => dot(a, xi.endpoint()).tanh(),
            FunctionalSpec::LogisticEndpoint { a } => 1.0 / (1.0 + (-dot(a, xi.endpoint())).exp()),
            FunctionalSpec::ExpCappedPathMean { a, cap } => Self::path_mean(a, xi).min(*cap).exp(),
        }
    }

    fn directional(&self, xi: SegmentView<'_>, dir: SegmentView<'_>) -> Option<f64> {
        Some(match self {
            FunctionalSpec::Constant { .. } => 0.0,
            FunctionalSpec::LinearEndpoint { a } => dot(a, dir.endpoint()),
            FunctionalSpec::ExpCappedLinear { a, cap } => {
                let s = dot(a, xi.endpoint());
                if s < *cap {
                    s.exp() * dot(a, dir.endpoint())
                } else {
                    0.0
                }
            }
            FunctionalSpec::TanhEndpoint { a } => {
                let c = dot(a, xi.endpoint()).cosh();
                dot(a, dir.endpoint()) / (c * c)
            }
            FunctionalSpec::LogisticEndpoint { a } => {
                let p = 1.0 / (1.0 + (-dot(a, xi.endpoint())).exp());
                p * (1.0 - p) * dot(a, dir.endpoint())
            }
            FunctionalSpec::ExpCappedPathMean { a, cap } => {
                let s = Self::path_mean(a, xi);
                if s < *cap {
                    s.exp() * Self::path_mean(a, dir)
                } else {
                    0.0
                }
            }
        })
    }
}

/// Named point test functions for weak-form checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestFunctionSpec {
    Constant { value: f64 },
    Coordinate { index: usize },
    SquaredNorm,
    Cosine { a: Vec<f64> },
}

impl TestFunctionSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            TestFunctionSpec::Coordinate { index } if *index >= dim => {
                Err(Error::InvalidArgument(format!("coordinate {index} out of range for dimension {dim}")))
            }
            TestFunctionSpec::Cosine { a } if a.len() != dim => {
                Err(Error::DimensionMismatch { expected: dim, got: a.len() })
            }
            _ => Ok(()),
        }
    }

    pub fn build(&self) -> Box<dyn TestFunction> {
        match self {
            TestFunctionSpec::Constant { value } => Box::new(ConstantFn(*value)),
            TestFunctionSpec::Coordinate { index } => Box::new(Coordinate(*index)),
            TestFunctionSpec::SquaredNorm => Box::new(SquaredNorm),
            TestFunctionSpec::Cosine { a } => Box::new(CosineWave(a.clone())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pathspace::{PathGrid, Segment};

    #[test]
    fn directional_matches_finite_difference() {
        let g = PathGrid::new(1.0, 5).unwrap();
        let xi = Segment::from_fn(g, 2, |s| vec![0.3 + s, -0.2 * s]).unwrap();
        let dir = Segment::from_fn(g, 2, |s| vec![1.0 - s * s, 0.5]).unwrap();
        let a = vec![0.7, -1.1];
        let specs = [
            FunctionalSpec::Constant { value: 2.0 },
            FunctionalSpec::LinearEndpoint { a: a.clone() },
            FunctionalSpec::ExpCappedLinear { a: a.clone(), cap: 5.0 },
            FunctionalSpec::TanhEndpoint { a: a.clone() },
            FunctionalSpec::LogisticEndpoint { a: a.clone() },
            FunctionalSpec::ExpCappedPathMean { a: a.clone(), cap: 5.0 },
        ];
        let e = 1e-6;
        let shifted = |sign: f64| {
            let v: Vec<f64> = xi.values().iter().zip(dir.values()).map(|(x, d)| x + sign * e * d).collect();
            Segment::new(g, 2, v).unwrap()
        };
        let (p, m) = (shifted(1.0), shifted(-1.0));
        for f in &specs {
            let fd = (f.value(p.view()) - f.value(m.view())) / (2.0 * e);
            let an = f.directional(xi.view(), dir.view()).unwrap();
            assert!((fd - an).abs() < 1e-6, "{}: {fd} vs {an}", f.label());
        }
    }

    #[test]
    fn registry_rejects_wrong_dimension() {
        assert!(FunctionalSpec::LinearEndpoint { a: vec![1.0] }.validate(2).is_err());
        assert!(TestFunctionSpec::Coordinate { index: 2 }.validate(2).is_err());
        let f: FunctionalSpec = serde_json::from_str(r#"{"name":"tanh_endpoint","a":[1.0]}"#).unwrap();
        assert_eq!(f.label(), "tanh_endpoint");
    }
}
