//! Continuum jump kernels `k(x, y)` on `ℝ^d × ℝ^d`.

use crate::error::{Error, Result};
use evalexpr::{
    build_operator_tree, ContextWithMutableVariables, DefaultNumericTypes, HashMapContext, Node,
    Value,
};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

/// A symmetric, nonnegative kernel. Symmetry is a contract, not enforced.
pub trait Kernel: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn alpha(&self) -> f64;
    fn eval(&self, x: &[f64], y: &[f64]) -> f64;

    /// `k(x, y)` depends only on `y - x`.
    fn is_stationary(&self) -> bool {
        false
    }

    /// For stationary planar kernels: polar angles in `[0, 2π)` where the
    /// kernel may be discontinuous. Quadrature splits panels there.
    fn angular_breaks(&self) -> Vec<f64> {
        Vec::new()
    }

    /// `Λ₁` with `k ≤ Λ₁|x-y|^{-d-α}`, when known.
    fn upper_constant(&self) -> Option<f64> {
        None
    }

    fn describe(&self) -> String;
}

fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// `c·|x-y|^{-d-α}`.
#[derive(Clone, Debug)]
pub struct IsotropicKernel {
    pub d: usize,
    pub alpha: f64,
    pub coefficient: f64,
}

impl Kernel for IsotropicKernel {
    fn dim(&self) -> usize {
        self.d
    }
    fn alpha(&self) -> f64 {
        self.alpha
    }
    fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let r = dist(x, y);
        if r == 0.0 {
            return 0.0;
        }
        self.coefficient * r.powf(-(self.d as f64) - self.alpha)
    }
    fn is_stationary(&self) -> bool {
        true
    }
    fn upper_constant(&self) -> Option<f64> {
        Some(self.coefficient)
    }
    fn describe(&self) -> String {
        format!("isotropic d={} alpha={} c={}", self.d, self.alpha, self.coefficient)
    }
}

/// `c·𝟙{|h₂| ≤ γ|h₁|}·|h|^{-2-α}` on `ℝ²`, `h = y - x`.
#[derive(Clone, Debug)]
pub struct ConeKernel {
    pub gamma: f64,
    pub alpha: f64,
    pub coefficient: f64,
}

impl Kernel for ConeKernel {
    fn dim(&self) -> usize {
        2
    }
    fn alpha(&self) -> f64 {
        self.alpha
    }
    fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let h1 = y[0] - x[0];
        let h2 = y[1] - x[1];
        if h2.abs() > self.gamma * h1.abs() {
            return 0.0;
        }
        let r2 = h1 * h1 + h2 * h2;
        if r2 == 0.0 {
            return 0.0;
        }
        self.coefficient * r2.powf(-(2.0 + self.alpha) / 2.0)
    }
    fn is_stationary(&self) -> bool {
        true
    }
    fn angular_breaks(&self) -> Vec<f64> {
        let phi = self.gamma.atan();
        let mut v = vec![phi, PI - phi, PI + phi, 2.0 * PI - phi];
        v.sort_by(f64::total_cmp);
        v
    }
    fn upper_constant(&self) -> Option<f64> {
        Some(self.coefficient)
    }
    fn describe(&self) -> String {
        format!("double cone gamma={} alpha={}", self.gamma, self.alpha)
    }
}

/// The kernel carried by the coordinate axes. Its support is a null set, so
/// the a.e. representative is identically zero.
#[derive(Clone, Debug)]
pub struct AxesKernel {
    pub d: usize,
    pub alpha: f64,
}

impl Kernel for AxesKernel {
    fn dim(&self) -> usize {
        self.d
    }
    fn alpha(&self) -> f64 {
        self.alpha
    }
    fn eval(&self, _x: &[f64], _y: &[f64]) -> f64 {
        0.0
    }
    fn is_stationary(&self) -> bool {
        true
    }
    fn upper_constant(&self) -> Option<f64> {
        Some(1.0)
    }
    fn describe(&self) -> String {
        format!("axes (a.e. zero) d={} alpha={}", self.d, self.alpha)
    }
}

/// `k ≡ value`.
#[derive(Clone, Debug)]
pub struct ConstantKernel {
    pub d: usize,
    pub alpha: f64,
    pub value: f64,
}

impl Kernel for ConstantKernel {
    fn dim(&self) -> usize {
        self.d
    }
    fn alpha(&self) -> f64 {
        self.alpha
    }
    fn eval(&self, _x: &[f64], _y: &[f64]) -> f64 {
        self.value
    }
    fn is_stationary(&self) -> bool {
        true
    }
    fn describe(&self) -> String {
        format!("constant {}", self.value)
    }
}

/// A kernel given by an arithmetic expression in `x1..xd`, `y1..yd`, `r`,
/// `d` and `alpha`.
pub struct ExprKernel {
    d: usize,
    alpha: f64,
    source: String,
    node: Node<DefaultNumericTypes>,
    stationary: bool,
}

impl fmt::Debug for ExprKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExprKernel")
            .field("d", &self.d)
            .field("alpha", &self.alpha)
            .field("expr", &self.source)
            .finish()
    }
}

impl ExprKernel {
    pub fn new(d: usize, alpha: f64, expr: &str, stationary: bool) -> Result<Self> {
        let node = build_operator_tree::<DefaultNumericTypes>(expr)
            .map_err(|e| Error::config(format!("kernel expression: {e}")))?;
        let k = ExprKernel {
            d,
            alpha,
            source: expr.to_string(),
            node,
            stationary,
        };
        // Evaluate once so syntax-valid but ill-typed expressions fail early.
        let x = vec![0.0; d];
        let mut y = vec![0.0; d];
        y[0] = 1.0;
        k.try_eval(&x, &y)?;
        Ok(k)
    }

    pub fn try_eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let mut ctx = HashMapContext::<DefaultNumericTypes>::new();
        let mut set = |name: String, v: f64| {
            ctx.set_value(name, Value::Float(v))
                .map_err(|e| Error::config(format!("kernel expression: {e}")))
        };
        for i in 0..self.d {
            set(format!("x{}", i + 1), x[i])?;
            set(format!("y{}", i + 1), y[i])?;
        }
        set("r".into(), dist(x, y))?;
        set("d".into(), self.d as f64)?;
        set("alpha".into(), self.alpha)?;
        self.node
            .eval_number_with_context(&ctx)
            .map_err(|e| Error::config(format!("kernel expression: {e}")))
    }
}

impl Kernel for ExprKernel {
    fn dim(&self) -> usize {
        self.d
    }
    fn alpha(&self) -> f64 {
        self.alpha
    }
    fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        self.try_eval(x, y).unwrap_or(f64::NAN)
    }
    fn is_stationary(&self) -> bool {
        self.stationary
    }
    fn describe(&self) -> String {
        format!("expr `{}`", self.source)
    }
}

/// JSON description of a kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    Isotropic {
        d: usize,
        alpha: f64,
        #[serde(default = "one")]
        coefficient: f64,
    },
    Cone {
        gamma: f64,
        alpha: f64,
        #[serde(default = "one")]
        coefficient: f64,
    },
    Axes {
        d: usize,
        alpha: f64,
    },
    Constant {
        d: usize,
        alpha: f64,
        value: f64,
    },
    Expr {
        d: usize,
        alpha: f64,
        expr: String,
        #[serde(default)]
        stationary: bool,
    },
}

fn one() -> f64 {
    1.0
}

impl KernelSpec {
    pub fn build(&self) -> Result<Arc<dyn Kernel>> {
        let check = |d: usize, alpha: f64| -> Result<()> {
            if !(1..=3).contains(&d) {
                return Err(Error::config(format!("kernel dimension {d} outside 1..=3")));
            }
            if !(alpha > 0.0 && alpha < 2.0) {
                return Err(Error::config(format!("alpha must lie in (0,2), got {alpha}")));
            }
            Ok(())
        };
        Ok(match self {
            KernelSpec::Isotropic { d, alpha, coefficient } => {
                check(*d, *alpha)?;
                Arc::new(IsotropicKernel {
                    d: *d,
                    alpha: *alpha,
                    coefficient: *coefficient,
                })
            }
            KernelSpec::Cone { gamma, alpha, coefficient } => {
                check(2, *alpha)?;
                if !(*gamma > 0.0 && gamma.is_finite()) {
                    return Err(Error::config("cone opening gamma must be positive"));
                }
                Arc::new(ConeKernel {
                    gamma: *gamma,
                    alpha: *alpha,
                    coefficient: *coefficient,
                })
            }
            KernelSpec::Axes { d, alpha } => {
                check(*d, *alpha)?;
                Arc::new(AxesKernel { d: *d, alpha: *alpha })
            }
            KernelSpec::Constant { d, alpha, value } => {
                check(*d, *alpha)?;
                Arc::new(ConstantKernel {
                    d: *d,
                    alpha: *alpha,
                    value: *value,
                })
            }
            KernelSpec::Expr { d, alpha, expr, stationary } => {
                check(*d, *alpha)?;
                Arc::new(ExprKernel::new(*d, *alpha, expr, *stationary)?)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cone_membership_and_breaks() {
        let k = ConeKernel { gamma: 1.0, alpha: 1.0, coefficient: 1.0 };
        assert!(k.eval(&[0.0, 0.0], &[3.0, 1.0]) > 0.0);
        assert_eq!(k.eval(&[0.0, 0.0], &[1.0, 3.0]), 0.0);
        let b = k.angular_breaks();
        assert_eq!(b.len(), 4);
        assert!((b[0] - PI / 4.0).abs() < 1e-15);
    }

    #[test]
    fn expression_kernel_matches_isotropic() {
        let e = ExprKernel::new(2, 1.0, "math::pow(r, -3.0)", true).unwrap();
        let iso = IsotropicKernel { d: 2, alpha: 1.0, coefficient: 1.0 };
        let (x, y) = ([0.1, 0.2], [1.3, -0.4]);
        assert!((e.eval(&x, &y) - iso.eval(&x, &y)).abs() < 1e-14);
        assert!(ExprKernel::new(1, 1.0, "r +", false).is_err());
    }

    #[test]
    fn spec_round_trip() {
        let s: KernelSpec =
            serde_json::from_str(r#"{"type":"cone","gamma":1.0,"alpha":1.0}"#).unwrap();
        assert_eq!(s.build().unwrap().dim(), 2);
        assert!(serde_json::from_str::<KernelSpec>(r#"{"type":"cone","gamma":1,"alpha":1,"bogus":2}"#).is_err());
    }
}
