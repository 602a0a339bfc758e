//! Conductivity fields `C(x, y)` on scaled lattices and their builders.
//!
//! Rates are in units of 1/time; the chain on `ℤ^d/ρ` jumps `x → y` at rate
//! `C(x, y)·ρ^{-d}` (see [`ConductivityField::jump_rate_factor`]).

use crate::error::{Error, Result};
use crate::kernel::{Kernel, KernelSpec};
use crate::lattice::{cube_offsets, GridPoint, ScaledLattice, MAX_DIM};
use crate::numerics::{lattice_zeta, linf_tail, GaussRule};
use dashmap::DashMap;
use lru::LruCache;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

/// Pointwise rate law on integer coordinates of the field's lattice.
pub trait RateFunction: Send + Sync {
    fn rate(&self, x: &GridPoint, y: &GridPoint) -> Result<f64>;

    /// `C(x, y)` depends only on `y - x`.
    fn is_stationary(&self) -> bool {
        false
    }

    /// `|x - y|_∞` (lattice steps) beyond which every rate vanishes.
    fn finite_range(&self) -> Option<i64> {
        None
    }

    /// `Σ_y C(x, y)` when it is known exactly and independent of `x`.
    fn closed_form_total(&self) -> Option<f64> {
        None
    }
}

/// Bound constants attached to a field.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConductivityMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa3: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa4: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa5: Option<f64>,
    #[serde(default, rename = "N0", skip_serializing_if = "Option::is_none")]
    pub n0: Option<u32>,
    #[serde(default, rename = "M0", skip_serializing_if = "Option::is_none")]
    pub m0: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda2: Option<f64>,
}

impl ConductivityMeta {
    pub fn validate(&self) -> Result<()> {
        let reals = [
            ("kappa1", self.kappa1),
            ("kappa2", self.kappa2),
            ("kappa3", self.kappa3),
            ("kappa4", self.kappa4),
            ("kappa5", self.kappa5),
            ("theta1", self.theta1),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ];
        for (name, v) in reals {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::config(format!("{name} must be positive, got {v}")));
                }
            }
        }
        if self.n0 == Some(0) || self.m0 == Some(0) {
            return Err(Error::config("N0 and M0 must be positive"));
        }
        if let (Some(k4), Some(k5)) = (self.kappa4, self.kappa5) {
            if k4 > k5 {
                return Err(Error::config("kappa4 must not exceed kappa5"));
            }
        }
        Ok(())
    }
}

/// How to sum the infinite tail of `Σ_y C(x, y)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TailPolicy {
    /// Exact when possible, otherwise truncate at [`default_tail_radius`].
    #[default]
    Auto,
    /// Require an exact closed form.
    ClosedForm,
    /// Sum `|x-y|_∞ ≤ radius` (lattice steps) and certify the rest by `κ₁`.
    Truncate { radius: i64 },
}

/// Truncation radius used by [`TailPolicy::Auto`]; keeps the enumerated cube
/// below roughly 10⁷ points.
pub fn default_tail_radius(d: usize) -> i64 {
    match d {
        1 | 2 => 1000,
        _ => 100,
    }
}

/// A sum together with a certified absolute error bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSum {
    pub value: f64,
    pub error_bound: f64,
}

/// A symmetric conductivity on a scaled lattice.
#[derive(Clone)]
pub struct ConductivityField {
    lattice: ScaledLattice,
    alpha: f64,
    meta: ConductivityMeta,
    label: String,
    rates: Arc<dyn RateFunction>,
    /// Truncated `C_x` of a stationary field, which does not depend on `x`.
    stationary_total: Arc<OnceLock<RateSum>>,
}

impl fmt::Debug for ConductivityField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConductivityField")
            .field("label", &self.label)
            .field("lattice", &self.lattice)
            .field("alpha", &self.alpha)
            .field("meta", &self.meta)
            .finish()
    }
}

impl ConductivityField {
    pub fn new(
        lattice: ScaledLattice,
        alpha: f64,
        meta: ConductivityMeta,
        label: impl Into<String>,
        rates: Arc<dyn RateFunction>,
    ) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 2.0) {
            return Err(Error::config(format!("alpha must lie in (0,2), got {alpha}")));
        }
        meta.validate()?;
        Ok(ConductivityField {
            lattice,
            alpha,
            meta,
            label: label.into(),
            rates,
            stationary_total: Arc::new(OnceLock::new()),
        })
    }

    pub fn lattice(&self) -> &ScaledLattice {
        &self.lattice
    }

    pub fn dim(&self) -> usize {
        self.lattice.dim()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn meta(&self) -> &ConductivityMeta {
        &self.meta
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_meta(mut self, meta: ConductivityMeta) -> Result<Self> {
        meta.validate()?;
        self.meta = meta;
        self.stationary_total = Arc::new(OnceLock::new());
        Ok(self)
    }

    pub fn rates(&self) -> &Arc<dyn RateFunction> {
        &self.rates
    }

    /// `C(x, y)`.
    pub fn evaluate(&self, x: &GridPoint, y: &GridPoint) -> Result<f64> {
        self.rates.rate(x, y)
    }

    pub fn is_stationary(&self) -> bool {
        self.rates.is_stationary()
    }

    pub fn finite_range(&self) -> Option<i64> {
        self.rates.finite_range()
    }

    pub fn closed_form_total(&self) -> Option<f64> {
        self.rates.closed_form_total()
    }

    /// `ρ^{-d}`: multiply a conductivity by this to get a jump rate.
    pub fn jump_rate_factor(&self) -> f64 {
        self.lattice.point_weight()
    }

    /// `|x-y|^{-d-α}` in real units.
    pub fn stable_weight(&self, x: &GridPoint, y: &GridPoint) -> f64 {
        self.lattice
            .distance(x, y)
            .powf(-(self.dim() as f64) - self.alpha)
    }

    /// `κ₁ ρ^{d+α}`: the (A2) bound per unit `|k|^{-d-α}` in lattice steps.
    pub fn step_bound(&self) -> Option<f64> {
        self.meta
            .kappa1
            .map(|k| k * self.lattice.rho().powf(self.dim() as f64 + self.alpha))
    }

    /// `Σ_z C(x, z)` with a certified error bound.
    pub fn total_rate(&self, x: &GridPoint, tail: TailPolicy) -> Result<RateSum> {
        let d = self.dim();
        match tail {
            TailPolicy::ClosedForm => self
                .closed_form_total()
                .map(|v| RateSum { value: v, error_bound: 0.0 })
                .ok_or_else(|| Error::config("no closed-form total rate for this field")),
            TailPolicy::Auto => {
                if let Some(r) = self.finite_range() {
                    let value = self.sum_cube(x, r)?;
                    Ok(RateSum { value, error_bound: 0.0 })
                } else if let Some(v) = self.closed_form_total() {
                    Ok(RateSum { value: v, error_bound: 0.0 })
                } else if self.is_stationary() {
                    if let Some(v) = self.stationary_total.get() {
                        return Ok(*v);
                    }
                    let v = self.total_rate(x, TailPolicy::Truncate { radius: default_tail_radius(d) })?;
                    Ok(*self.stationary_total.get_or_init(|| v))
                } else {
                    self.total_rate(x, TailPolicy::Truncate { radius: default_tail_radius(d) })
                }
            }
            TailPolicy::Truncate { radius } => {
                if radius < 0 {
                    return Err(Error::invalid("truncation radius must be nonnegative"));
                }
                let value = self.sum_cube(x, radius)?;
                // The κ₁ tail is inflated slightly so the bound also covers
                // rounding in the truncated sum.
                let error_bound = match self.finite_range() {
                    Some(r) if r <= radius => 0.0,
                    _ => self.tail_bound(radius)? * (1.0 + 1e-10) + value * 1e-14,
                };
                Ok(RateSum { value, error_bound })
            }
        }
    }

    /// Certified bound on `Σ_{|z-x|_∞ > radius} C(x, z)` from `κ₁`.
    pub fn tail_bound(&self, radius: i64) -> Result<f64> {
        let b = self.step_bound().ok_or_else(|| {
            Error::config("kappa1 is required to bound the tail of an infinite-range field")
        })?;
        Ok(b * linf_tail(self.dim(), self.dim() as f64 + self.alpha, radius))
    }

    fn sum_cube(&self, x: &GridPoint, radius: i64) -> Result<f64> {
        let mut acc = 0.0;
        for h in cube_offsets(self.dim(), radius) {
            if h.is_origin() {
                continue;
            }
            acc += self.evaluate(x, &x.add(&h))?;
        }
        Ok(acc)
    }
}

// ---------------------------------------------------------------------------
// Built-in families

/// `c·ρ^{d+α}|k|^{-d-α}` for integer offset `k`.
struct IsotropicRates {
    d: usize,
    exponent: f64,
    scaled_coefficient: f64,
    total: f64,
}

impl RateFunction for IsotropicRates {
    fn rate(&self, x: &GridPoint, y: &GridPoint) -> Result<f64> {
        let h = y.sub(x);
        if h.is_origin() {
            return Ok(0.0);
        }
        // Integer-exact norm keeps C(x,y) and C(y,x) bit-identical.
        Ok(self.scaled_coefficient * (h.norm_sq() as f64).powf(-self.exponent / 2.0))
    }
    fn is_stationary(&self) -> bool {
        true
    }
    fn closed_form_total(&self) -> Option<f64> {
        Some(self.total)
    }
}

/// Normalising constant of the rotationally invariant α-stable law with
/// symbol `|ξ|^α`: `αΓ((d+α)/2) / (2^{1-α} π^{d/2} Γ(1-α/2))`.
pub fn stable_constant(d: usize, alpha: f64) -> f64 {
    let d = d as f64;
    alpha * gamma((d + alpha) / 2.0)
        / (2f64.powf(1.0 - alpha) * PI.powf(d / 2.0) * gamma(1.0 - alpha / 2.0))
}

/// Coefficient choice for the isotropic family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coefficient {
    Number(f64),
    Named(String),
}

impl Default for Coefficient {
    fn default() -> Self {
        Coefficient::Named("stable".into())
    }
}

impl Coefficient {
    pub fn resolve(&self, d: usize, alpha: f64) -> Result<f64> {
        match self {
            Coefficient::Number(c) if *c > 0.0 && c.is_finite() => Ok(*c),
            Coefficient::Number(c) => Err(Error::config(format!("coefficient must be positive, got {c}"))),
            Coefficient::Named(s) if s == "stable" => Ok(stable_constant(d, alpha)),
            Coefficient::Named(s) => Err(Error::config(format!("unknown coefficient `{s}`"))),
        }
    }
}

/// `C(x,y) = c|x-y|^{-d-α}` on `lattice`.
pub fn isotropic_stable(lattice: ScaledLattice, alpha: f64, coefficient: f64) -> Result<ConductivityField> {
    if !(alpha > 0.0 && alpha < 2.0) {
        return Err(Error::config(format!("alpha must lie in (0,2), got {alpha}")));
    }
    if !(coefficient > 0.0 && coefficient.is_finite()) {
        return Err(Error::config("coefficient must be positive"));
    }
    let d = lattice.dim();
    let exponent = d as f64 + alpha;
    let scaled_coefficient = coefficient * lattice.rho().powf(exponent);
    let rates = IsotropicRates {
        d,
        exponent,
        scaled_coefficient,
        total: scaled_coefficient * lattice_zeta(d, exponent),
    };
    let _ = rates.d;
    let meta = ConductivityMeta {
        kappa1: Some(coefficient),
        kappa2: Some(coefficient),
        kappa3: Some(coefficient),
        n0: Some(1),
        theta1: Some(1.0),
        lambda1: Some(coefficient),
        ..Default::default()
    };
    ConductivityField::new(lattice, alpha, meta, "isotropic_stable", Arc::new(rates))
}

/// Symmetric bounded modulation `g(x, y)` of the cone family, evaluated at
/// real coordinates.
pub type Modulation = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

struct ConeRates {
    gamma: f64,
    exponent: f64,
    g: Option<Modulation>,
}

impl RateFunction for ConeRates {
    fn rate(&self, x: &GridPoint, y: &GridPoint) -> Result<f64> {
        let h = y.sub(x);
        if h.is_origin() || !in_cone(&h, self.gamma) {
            return Ok(0.0);
        }
        let base = (h.norm_sq() as f64).powf(-self.exponent / 2.0);
        Ok(match &self.g {
            None => base,
            Some(g) => {
                let xs = [x.coords()[0] as f64, x.coords()[1] as f64];
                let ys = [y.coords()[0] as f64, y.coords()[1] as f64];
                g(&xs, &ys) * base
            }
        })
    }
    fn is_stationary(&self) -> bool {
        self.g.is_none()
    }
}

/// `|h₂| ≤ γ|h₁|`.
pub fn in_cone(h: &GridPoint, gamma: f64) -> bool {
    let c = h.coords();
    (c[1].abs() as f64) <= gamma * (c[0].abs() as f64)
}

/// Intermediate point of the explicit cone routing:
/// `z = (x₁ + ⌊(2 + 1/γ)|x-y|⌋, x₂)` (the bracket is a floor).
pub fn cone_routing_point(x: &GridPoint, y: &GridPoint, gamma: f64) -> GridPoint {
    let dist = y.sub(x).norm();
    let step = ((2.0 + 1.0 / gamma) * dist).floor() as i64;
    GridPoint::new(&[x.coords()[0] + step, x.coords()[1]])
}

/// `C(x,y) = 𝟙_V(x-y) g(x,y) |x-y|^{-2-α}` on `ℤ²` with the double cone
/// `V = {|h₂| ≤ γ|h₁|}` and `a ≤ g ≤ b`. `g = None` means `g ≡ 1`.
pub fn double_cone(gamma: f64, alpha: f64, a: f64, b: f64, g: Option<Modulation>) -> Result<ConductivityField> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::config(format!("cone opening gamma must be positive, got {gamma}")));
    }
    if !(a > 0.0 && a <= b && b.is_finite()) {
        return Err(Error::config(format!("need 0 < a <= b, got a={a}, b={b}")));
    }
    if g.is_none() && !(a <= 1.0 && 1.0 <= b) {
        return Err(Error::config("default g = 1 must lie in [a, b]"));
    }
    let d = 2.0;
    // Both routing edges have length at most 2(4 + 1/γ)|x - y|.
    let kappa2 = a * (2.0 * (4.0 + 1.0 / gamma)).powf(-(d + alpha));
    let meta = ConductivityMeta {
        kappa1: Some(b),
        kappa2: Some(kappa2),
        n0: Some(2),
        ..Default::default()
    };
    let rates = ConeRates {
        gamma,
        exponent: d + alpha,
        g,
    };
    ConductivityField::new(ScaledLattice::integer(2), alpha, meta, "double_cone", Arc::new(rates))
}

struct AxesRates {
    exponent: f64,
    total: f64,
}

impl RateFunction for AxesRates {
    fn rate(&self, x: &GridPoint, y: &GridPoint) -> Result<f64> {
        let h = y.sub(x);
        let nonzero = h.coords().iter().filter(|&&c| c != 0).count();
        if nonzero != 1 {
            return Ok(0.0);
        }
        Ok((h.linf() as f64).powf(-self.exponent))
    }
    fn is_stationary(&self) -> bool {
        true
    }
    fn closed_form_total(&self) -> Option<f64> {
        Some(self.total)
    }
}

/// `C(x,y) = |x-y|^{-d-α}` when `x - y` lies on a coordinate axis, else 0.
pub fn axes_counterexample(d: usize, alpha: f64) -> Result<ConductivityField> {
    let lattice = ScaledLattice::new(d, 1.0)?;
    let exponent = d as f64 + alpha;
    let total = 2.0 * d as f64 * crate::numerics::zeta(exponent);
    let meta = ConductivityMeta {
        kappa1: Some(1.0),
        ..Default::default()
    };
    ConductivityField::new(lattice, alpha, meta, "axes_counterexample", Arc::new(AxesRates { exponent, total }))
}

// ---------------------------------------------------------------------------
// Tables

/// Explicit pair weights with an optional fallback for unlisted pairs.
pub struct TableRates {
    entries: HashMap<(GridPoint, GridPoint), f64>,
    fallback: Option<Arc<dyn RateFunction>>,
    range: i64,
}

impl TableRates {
    pub fn new(entries: HashMap<(GridPoint, GridPoint), f64>, fallback: Option<Arc<dyn RateFunction>>) -> Self {
        let range = entries.keys().map(|(x, y)| y.sub(x).linf()).max().unwrap_or(0);
        TableRates { entries, fallback, range }
    }
}

impl RateFunction for TableRates {
    fn rate(&self, x: &GridPoint, y: &GridPoint) -> Result<f64> {
        if let Some(v) = self.entries.get(&(*x, *y)) {
            return Ok(*v);
        }
        match &self.fallback {
            Some(f) => f.rate(x, y),
            None => Ok(0.0),
        }
    }
    fn finite_range(&self) -> Option<i64> {
        match &self.fallback {
            None => Some(self.range),
            Some(f) => f.finite_range().map(|r| r.max(self.range)),
        }
    }
}

/// A table field. Entries are used as given (no symmetrisation).
pub fn table_field(
    lattice: ScaledLattice,
    alpha: f64,
    entries: HashMap<(GridPoint, GridPoint), f64>,
    fallback: Option<&ConductivityField>,
    meta: ConductivityMeta,
) -> Result<ConductivityField> {
    for ((x, y), v) in &entries {
        if x.dim() != lattice.dim() || y.dim() != lattice.dim() {
            return Err(Error::config("table entry dimension mismatch"));
        }
        if !(v.is_finite() && *v >= 0.0) {
            return Err(Error::config(format!("table entry {x:?}->{y:?} must be nonnegative, got {v}")));
        }
    }
    let rates = TableRates::new(entries, fallback.map(|f| f.rates.clone()));
    ConductivityField::new(lattice, alpha, meta, "table", Arc::new(rates))
}

/// Read `x_1..x_d, y_1..y_d, value` rows (integer coordinates, header row
/// required). With `symmetrize`, each row also sets the reversed pair.
pub fn read_table_csv(path: &Path, d: usize, symmetrize: bool) -> Result<HashMap<(GridPoint, GridPoint), f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut out = HashMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 * d + 1 {
            return Err(Error::config(format!(
                "{}: row {} has {} columns, expected {}",
                path.display(),
                line + 2,
                rec.len(),
                2 * d + 1
            )));
        }
        let parse_i = |s: &str| {
            s.parse::<i64>()
                .map_err(|e| Error::config(format!("{}: row {}: {e}", path.display(), line + 2)))
        };
        let mut xc = [0i64; MAX_DIM];
        let mut yc = [0i64; MAX_DIM];
        for i in 0..d {
            xc[i] = parse_i(&rec[i])?;
            yc[i] = parse_i(&rec[d + i])?;
        }
        let v: f64 = rec[2 * d]
            .parse()
            .map_err(|e| Error::config(format!("{}: row {}: {e}", path.display(), line + 2)))?;
        let (x, y) = (GridPoint::new(&xc[..d]), GridPoint::new(&yc[..d]));
        out.insert((x, y), v);
        if symmetrize {
            out.insert((y, x), v);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Scaling

struct ScaledRates {
    base: Arc<dyn RateFunction>,
    factor: f64,
}

impl RateFunction for ScaledRates {
    fn rate(&self, x: &GridPoint, y: &GridPoint) -> Result<f64> {
        Ok(self.factor * self.base.rate(x, y)?)
    }
    fn is_stationary(&self) -> bool {
        self.base.is_stationary()
    }
    fn finite_range(&self) -> Option<i64> {
        self.base.finite_range()
    }
    fn closed_form_total(&self) -> Option<f64> {
        self.base.closed_form_total().map(|t| self.factor * t)
    }
}

/// `C^ρ(x,y) = ρ^{d+α} C(ρx, ρy)` on the lattice refined by `ρ`.
///
/// Integer coordinates are shared between `x ∈ ℤ^d/(sρ)` and `ρx ∈ ℤ^d/s`,
/// so the scaled field reuses the base rates with a constant factor. `κ₁` is
/// preserved; `Θ₁` shrinks by `ρ`.
pub fn scale_conductivity(c: &ConductivityField, rho: f64) -> Result<ConductivityField> {
    let lattice = c.lattice.refined(rho)?;
    if rho == 1.0 {
        return Ok(c.clone());
    }
    let factor = rho.powf(c.dim() as f64 + c.alpha);
    let mut meta = c.meta.clone();
    meta.theta1 = meta.theta1.map(|t| t / rho);
    let rates = ScaledRates {
        base: c.rates.clone(),
        factor,
    };
    ConductivityField::new(lattice, c.alpha, meta, format!("{} scaled by {rho}", c.label), Arc::new(rates))
}

// ---------------------------------------------------------------------------
// Kernel-cell averaging

/// Tensor Gauss–Legendre settings for cell averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureConfig {
    /// Nodes per axis.
    pub order: usize,
    /// Relative error target per entry.
    pub tolerance: f64,
    /// Maximum number of bisection refinements.
    pub max_refinements: u32,
    /// Memory cap for the per-pair cache of non-stationary kernels.
    pub cache_bytes: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig {
            order: 8,
            tolerance: 1e-12,
            max_refinements: 4,
            cache_bytes: 2 << 30,
        }
    }
}

type PairCache = Mutex<LruCache<(GridPoint, GridPoint), f64>>;

struct KernelCellRates {
    kernel: Arc<dyn Kernel>,
    n: f64,
    rule: GaussRule,
    quad: QuadratureConfig,
    by_offset: DashMap<GridPoint, f64>,
    by_pair: Option<PairCache>,
}

impl KernelCellRates {
    fn sample(&self, x: &[f64], y: &[f64], pair: (&GridPoint, &GridPoint)) -> Result<f64> {
        let v = self.kernel.eval(x, y);
        if v.is_nan() || v.is_infinite() {
            return Err(Error::numeric(
                format!("cell pair {:?}-{:?}", pair.0, pair.1),
                format!("kernel returned {v} at {x:?}, {y:?}"),
            ));
        }
        if v < 0.0 {
            return Err(Error::Contract(format!(
                "negative kernel sample {v} at {x:?}, {y:?} (cell pair {:?}-{:?})",
                pair.0, pair.1
            )));
        }
        Ok(v)
    }

    /// Nodes/weights on `[a, b]` split into `2^level` panels.
    fn axis_nodes(&self, a: f64, b: f64, level: u32) -> Vec<(f64, f64)> {
        let panels = 1usize << level;
        let w = (b - a) / panels as f64;
        let mut out = Vec::with_capacity(panels * self.rule.order());
        for p in 0..panels {
            let lo = a + p as f64 * w;
            out.extend(self.rule.mapped(lo, lo + w));
        }
        out
    }

    /// Stationary case: `n^{2d}∫ k(h) T(h) dh` with the tent
    /// `T(h) = ∏ (1/n - |h_i - c_i|)_+`, split at the kinks `c_i`.
    fn offset_average(&self, h: &GridPoint, level: u32) -> Result<f64> {
        let d = h.dim();
        let n = self.n;
        let axes: Vec<Vec<(f64, f64)>> = (0..d)
            .map(|i| {
                let c = h.coords()[i] as f64 / n;
                let mut v = self.axis_nodes(c - 1.0 / n, c, level);
                v.extend(self.axis_nodes(c, c + 1.0 / n, level));
                v.into_iter()
                    .map(|(t, w)| (t, w * (1.0 / n - (t - c).abs())))
                    .collect()
            })
            .collect();
        let zero = [0.0; MAX_DIM];
        let origin = GridPoint::origin(d);
        let norm = n.powi(2 * d as i32);
        let mut first: Option<f64> = None;
        let mut acc = 0.0;
        let mut idx = vec![0usize; d];
        let mut pt = [0.0; MAX_DIM];
        loop {
            let mut w = 1.0;
            for i in 0..d {
                let (t, wi) = axes[i][idx[i]];
                pt[i] = t;
                w *= wi;
            }
            let v = self.sample(&zero[..d], &pt[..d], (&origin, h))?;
            let k0 = *first.get_or_insert(v);
            acc += w * (v - k0);
            if !advance(&mut idx, &axes) {
                break;
            }
        }
        Ok(first.unwrap_or(0.0) + norm * acc)
    }

    /// General case: average of `k(ξ, ζ)` over the product of the two cells.
    fn pair_average(&self, x: &GridPoint, y: &GridPoint, level: u32) -> Result<f64> {
        let d = x.dim();
        let n = self.n;
        let half = 0.5 / n;
        let mut axes: Vec<Vec<(f64, f64)>> = Vec::with_capacity(2 * d);
        for p in [x, y] {
            for i in 0..d {
                let c = p.coords()[i] as f64 / n;
                axes.push(self.axis_nodes(c - half, c + half, level));
            }
        }
        let norm = n.powi(2 * d as i32);
        let mut first: Option<f64> = None;
        let mut acc = 0.0;
        let mut idx = vec![0usize; 2 * d];
        let mut xi = [0.0; MAX_DIM];
        let mut zeta = [0.0; MAX_DIM];
        loop {
            let mut w = 1.0;
            for i in 0..d {
                let (t, wi) = axes[i][idx[i]];
                xi[i] = t;
                w *= wi;
                let (t, wi) = axes[d + i][idx[d + i]];
                zeta[i] = t;
                w *= wi;
            }
            let v = self.sample(&xi[..d], &zeta[..d], (x, y))?;
            let k0 = *first.get_or_insert(v);
            acc += w * (v - k0);
            if !advance(&mut idx, &axes) {
                break;
            }
        }
        Ok(first.unwrap_or(0.0) + norm * acc)
    }

    fn converge(&self, mut at: impl FnMut(u32) -> Result<f64>, pair: (&GridPoint, &GridPoint)) -> Result<f64> {
        let mut prev = at(0)?;
        for level in 1..=self.quad.max_refinements {
            let next = at(level)?;
            let err = (next - prev).abs();
            if err <= self.quad.tolerance * next.abs() || next.abs() < 1e-300 {
                return Ok(next);
            }
            prev = next;
        }
        Err(Error::numeric(
            format!("cell pair {:?}-{:?}", pair.0, pair.1),
            format!(
                "quadrature did not reach relative tolerance {} after {} refinements",
                self.quad.tolerance, self.quad.max_refinements
            ),
        ))
    }
}

fn advance(idx: &mut [usize], axes: &[Vec<(f64, f64)>]) -> bool {
    for i in (0..idx.len()).rev() {
        idx[i] += 1;
        if idx[i] < axes[i].len() {
            return true;
        }
        idx[i] = 0;
    }
    false
}

impl RateFunction for KernelCellRates {
    fn rate(&self, x: &GridPoint, y: &GridPoint) -> Result<f64> {
        let h = y.sub(x);
        if h.linf() <= 1 {
            return Ok(0.0);
        }
        if self.kernel.is_stationary() {
            let key = h.canonical_sign();
            if let Some(v) = self.by_offset.get(&key) {
                return Ok(*v);
            }
            let v = self.converge(|l| self.offset_average(&key, l), (x, y))?;
            self.by_offset.insert(key, v);
            return Ok(v);
        }
        let key = if x <= y { (*x, *y) } else { (*y, *x) };
        let cache = self.by_pair.as_ref().expect("pair cache for non-stationary kernels");
        if let Some(v) = cache.lock().expect("cache lock").get(&key) {
            return Ok(*v);
        }
        let v = self.converge(|l| self.pair_average(&key.0, &key.1, l), (x, y))?;
        cache.lock().expect("cache lock").put(key, v);
        Ok(v)
    }
    fn is_stationary(&self) -> bool {
        self.kernel.is_stationary()
    }
}

/// `Cⁿ(x,y) = n^{2d} ∫∫ k` over the cells of side `1/n` centred at `x`, `y`
/// when `|x-y|_∞ ≥ 2/n`, and `0` otherwise.
pub fn build_from_kernel(kernel: Arc<dyn Kernel>, n: f64, quad: QuadratureConfig) -> Result<ConductivityField> {
    let d = kernel.dim();
    let lattice = ScaledLattice::new(d, n)?;
    if quad.order == 0 || !(quad.tolerance > 0.0) {
        return Err(Error::config("quadrature order and tolerance must be positive"));
    }
    let by_pair = if kernel.is_stationary() {
        None
    } else {
        let entries = (quad.cache_bytes / 96).max(1);
        Some(Mutex::new(LruCache::new(NonZeroUsize::new(entries).expect("nonzero"))))
    };
    let alpha = kernel.alpha();
    let meta = ConductivityMeta {
        kappa1: kernel
            .upper_constant()
            .map(|l| l * (4.0 * d as f64).powf((d as f64 + alpha) / 2.0)),
        ..Default::default()
    };
    let label = format!("kernel cells n={n}: {}", kernel.describe());
    let rates = KernelCellRates {
        rule: GaussRule::new(quad.order),
        kernel,
        n,
        quad,
        by_offset: DashMap::new(),
        by_pair,
    };
    ConductivityField::new(lattice, alpha, meta, label, Arc::new(rates))
}

// ---------------------------------------------------------------------------
// JSON field specs

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsotropicParams {
    #[serde(default)]
    pub coefficient: Coefficient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConeParams {
    pub gamma: f64,
    #[serde(default = "unit")]
    pub a: f64,
    #[serde(default = "unit")]
    pub b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableParams {
    pub csv: PathBuf,
    #[serde(default)]
    pub symmetrize: bool,
    #[serde(default)]
    pub meta: ConductivityMeta,
}

fn unit() -> f64 {
    1.0
}

fn two() -> usize {
    2
}

/// JSON description of a conductivity field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    IsotropicStable {
        d: usize,
        alpha: f64,
        #[serde(default)]
        params: IsotropicParams,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rho: Option<f64>,
    },
    DoubleCone {
        #[serde(default = "two")]
        d: usize,
        alpha: f64,
        params: ConeParams,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rho: Option<f64>,
    },
    AxesCounterexample {
        #[serde(default = "two")]
        d: usize,
        alpha: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rho: Option<f64>,
    },
    Table {
        d: usize,
        alpha: f64,
        params: TableParams,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rho: Option<f64>,
    },
    KernelCells {
        n: f64,
        kernel: KernelSpec,
        #[serde(default)]
        quadrature: QuadratureConfig,
    },
}

impl FieldSpec {
    /// Build the field; relative CSV paths resolve against `base_dir`.
    pub fn build(&self, base_dir: &Path) -> Result<ConductivityField> {
        let (field, rho) = match self {
            FieldSpec::IsotropicStable { d, alpha, params, rho } => {
                let c = params.coefficient.resolve(*d, *alpha)?;
                (isotropic_stable(ScaledLattice::new(*d, 1.0).map_err(to_config)?, *alpha, c)?, *rho)
            }
            FieldSpec::DoubleCone { d, alpha, params, rho } => {
                if *d != 2 {
                    return Err(Error::config("double_cone is defined in d = 2"));
                }
                (double_cone(params.gamma, *alpha, params.a, params.b, None)?, *rho)
            }
            FieldSpec::AxesCounterexample { d, alpha, rho } => {
                if !(2..=3).contains(d) {
                    return Err(Error::config("axes_counterexample needs d in 2..=3"));
                }
                (axes_counterexample(*d, *alpha)?, *rho)
            }
            FieldSpec::Table { d, alpha, params, rho } => {
                let path = base_dir.join(&params.csv);
                let entries = read_table_csv(&path, *d, params.symmetrize)?;
                let lattice = ScaledLattice::new(*d, 1.0).map_err(to_config)?;
                (table_field(lattice, *alpha, entries, None, params.meta.clone())?, *rho)
            }
            FieldSpec::KernelCells { n, kernel, quadrature } => {
                (build_from_kernel(kernel.build()?, *n, quadrature.clone())?, None)
            }
        };
        match rho {
            Some(r) => scale_conductivity(&field, r).map_err(to_config),
            None => Ok(field),
        }
    }
}

fn to_config(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::Config(m),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{ConstantKernel, IsotropicKernel};

    fn p(c: &[i64]) -> GridPoint {
        GridPoint::new(c)
    }

    #[test]
    fn stable_constant_d1_alpha1_is_one_over_pi() {
        assert!((stable_constant(1, 1.0) - 1.0 / PI).abs() < 1e-15);
    }

    #[test]
    fn cone_membership() {
        let c = double_cone(1.0, 1.0, 1.0, 1.0, None).unwrap();
        assert!(c.evaluate(&p(&[0, 0]), &p(&[3, 1])).unwrap() > 0.0);
        assert_eq!(c.evaluate(&p(&[0, 0]), &p(&[1, 3])).unwrap(), 0.0);
        let a = axes_counterexample(2, 1.0).unwrap();
        assert_eq!(a.evaluate(&p(&[0, 0]), &p(&[1, 1])).unwrap(), 0.0);
        assert_eq!(a.evaluate(&p(&[0, 0]), &p(&[0, 2])).unwrap(), 1.0 / 8.0);
        assert!(double_cone(-1.0, 1.0, 1.0, 1.0, None).is_err());
        assert!(double_cone(1.0, 1.0, 2.0, 1.0, None).is_err());
    }

    #[test]
    fn scaling_substitution() {
        let l = ScaledLattice::integer(1);
        let c = isotropic_stable(l, 1.0, 1.0).unwrap();
        assert_eq!(c.evaluate(&p(&[1]), &p(&[3])).unwrap(), 0.25);
        let s = scale_conductivity(&c, 2.0).unwrap();
        // real points 0.5 and 1.5 have integer coordinates 1 and 3 at ρ = 2
        assert_eq!(s.evaluate(&p(&[1]), &p(&[3])).unwrap(), 1.0);
        let same = scale_conductivity(&c, 1.0).unwrap();
        assert_eq!(same.evaluate(&p(&[0]), &p(&[5])).unwrap(), c.evaluate(&p(&[0]), &p(&[5])).unwrap());
    }

    #[test]
    fn basel_total_rate() {
        let c = isotropic_stable(ScaledLattice::integer(1), 1.0, 1.0).unwrap();
        let exact = c.total_rate(&p(&[0]), TailPolicy::ClosedForm).unwrap();
        assert!((exact.value - PI * PI / 3.0).abs() < 1e-12);
        let trunc = c.total_rate(&p(&[0]), TailPolicy::Truncate { radius: 100 }).unwrap();
        assert!(trunc.value < exact.value);
        assert!(exact.value - trunc.value <= trunc.error_bound);
    }

    #[test]
    fn finite_table_total() {
        let l = ScaledLattice::integer(1);
        let mut e = HashMap::new();
        e.insert((p(&[0]), p(&[1])), 1.0);
        e.insert((p(&[0]), p(&[-2])), 2.5);
        let t = table_field(l, 1.0, e, None, ConductivityMeta::default()).unwrap();
        let s = t.total_rate(&p(&[0]), TailPolicy::Auto).unwrap();
        assert_eq!(s.value, 3.5);
        assert_eq!(s.error_bound, 0.0);
    }

    #[test]
    fn missing_kappa1_is_a_configuration_error() {
        let k = Arc::new(ConstantKernel { d: 1, alpha: 1.0, value: 1.0 });
        let c = build_from_kernel(k, 1.0, QuadratureConfig::default()).unwrap();
        assert!(matches!(
            c.total_rate(&p(&[0]), TailPolicy::Truncate { radius: 3 }),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn kernel_cells_closed_form() {
        let k = Arc::new(IsotropicKernel { d: 1, alpha: 1.0, coefficient: 1.0 });
        let c = build_from_kernel(k, 1.0, QuadratureConfig::default()).unwrap();
        let v = c.evaluate(&p(&[0]), &p(&[3])).unwrap();
        assert!((v - (9.0f64 / 8.0).ln()).abs() < 1e-12, "{v}");
        assert_eq!(c.evaluate(&p(&[0]), &p(&[1])).unwrap(), 0.0);
    }

    #[test]
    fn field_spec_parsing() {
        let s: FieldSpec = serde_json::from_str(r#"{"family":"isotropic_stable","d":1,"alpha":1.0}"#).unwrap();
        let f = s.build(Path::new(".")).unwrap();
        assert!((f.meta().kappa1.unwrap() - 1.0 / PI).abs() < 1e-15);
        let s: FieldSpec = serde_json::from_str(
            r#"{"family":"isotropic_stable","d":1,"alpha":1.0,"params":{"coefficient":1.0},"rho":2.0}"#,
        )
        .unwrap();
        assert_eq!(s.build(Path::new(".")).unwrap().lattice().rho(), 2.0);
        assert!(serde_json::from_str::<FieldSpec>(r#"{"family":"double_cone","alpha":1.0,"params":{"gamma":1},"x":1}"#).is_err());
    }
}
