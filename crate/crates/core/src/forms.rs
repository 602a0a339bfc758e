//! Discrete and continuum Dirichlet forms, the chain comparison inequality,
//! cube chains for continuum kernels, and norm-equivalence checks.

use crate::chain::stream_rng;
use crate::conductivity::{isotropic_stable, ConductivityField, TailPolicy};
use crate::error::{Error, Result};
use crate::exec::{map_range, map_slice, Execution};
use crate::kernel::{IsotropicKernel, Kernel};
use crate::lattice::{ball_offsets, for_each_in_box, GridFunction, GridPoint, ScaledLattice, Window, DEFAULT_BALL_CAP, MAX_DIM};
use crate::numerics::GaussRule;
use dashmap::DashMap;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormKind {
    Discrete,
    DiscreteTruncated,
    Continuum,
    SobolevAlpha,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormEvaluation {
    pub value: f64,
    pub kind: FormKind,
    /// `λ` for discrete forms, `ε` for continuum forms.
    pub cutoff: Option<f64>,
    pub descriptor: String,
    pub error_bound: f64,
}

// ---------------------------------------------------------------------------
// Discrete forms

fn sorted_points(set: &[GridPoint]) -> Vec<GridPoint> {
    let mut v = set.to_vec();
    v.sort();
    v.dedup();
    v
}

/// `ℰ(f,g)` on the whole lattice for `f, g` supported in `set`, in units of
/// `ρ^{-2d}`:
///
/// `½Σ_{x,y∈S}(f(x)−f(y))(g(x)−g(y))C(x,y) + Σ_{x∈S} f(x)g(x) Σ_{y∉S} C(x,y)`,
///
/// with all pairs restricted to `|x−y| ≤ λ` when given. The second sum is
/// omitted when `include_outside` is false (the form of the chain restricted
/// to `S`). Without `λ` the outside sum uses `C_x`, and its uncertainty goes
/// into the error bound.
pub fn bilinear_on_set(
    c: &ConductivityField,
    f: &GridFunction,
    g: &GridFunction,
    set: &[GridPoint],
    lambda: Option<f64>,
    include_outside: bool,
    exec: Execution,
) -> Result<FormEvaluation> {
    let lat = *c.lattice();
    let pts = sorted_points(set);
    if f.support().chain(g.support()).any(|p| pts.binary_search(p).is_err()) {
        return Err(Error::invalid("functions must be supported in the given set"));
    }
    let fv: Vec<f64> = pts.iter().map(|p| f.get(p)).collect();
    let gv: Vec<f64> = pts.iter().map(|p| g.get(p)).collect();
    let ball = match lambda {
        Some(l) => {
            if !(l > 0.0) {
                return Err(Error::invalid("form truncation must be positive"));
            }
            let mut b = ball_offsets(c.dim(), l * lat.rho(), DEFAULT_BALL_CAP)?;
            b.retain(|h| !h.is_origin());
            Some(b)
        }
        None => None,
    };
    let rows: Vec<Result<(f64, f64)>> = map_range(exec, pts.len(), |i| {
        let x = pts[i];
        let mut inner = 0.0;
        let mut out = 0.0;
        let mut err = 0.0;
        match &ball {
            Some(b) => {
                for h in b {
                    let y = x.add(h);
                    match pts.binary_search(&y) {
                        Ok(j) => {
                            let w = (fv[i] - fv[j]) * (gv[i] - gv[j]);
                            if w != 0.0 {
                                inner += w * c.evaluate(&x, &y)?;
                            }
                        }
                        Err(_) => {
                            if include_outside && fv[i] * gv[i] != 0.0 {
                                out += c.evaluate(&x, &y)?;
                            }
                        }
                    }
                }
                out *= fv[i] * gv[i];
            }
            None => {
                let mut in_set = 0.0;
                for (j, y) in pts.iter().enumerate() {
                    if j == i {
                        continue;
                    }
                    let cxy = c.evaluate(&x, y)?;
                    in_set += cxy;
                    inner += (fv[i] - fv[j]) * (gv[i] - gv[j]) * cxy;
                }
                let fg = fv[i] * gv[i];
                if include_outside && fg != 0.0 {
                    let total = c.total_rate(&x, TailPolicy::Auto)?;
                    out = fg * (total.value - in_set).max(0.0);
                    err = fg.abs() * total.error_bound;
                }
            }
        }
        Ok((0.5 * inner + out, err))
    });
    let w2 = lat.point_weight() * lat.point_weight();
    let mut value = 0.0;
    let mut err = 0.0;
    for r in rows {
        let (v, e) = r?;
        value += v;
        err += e;
    }
    Ok(FormEvaluation {
        value: value * w2,
        kind: if lambda.is_some() { FormKind::DiscreteTruncated } else { FormKind::Discrete },
        cutoff: lambda,
        descriptor: format!("{} on {} points", c.label(), pts.len()),
        error_bound: err * w2 * (1.0 + 1e-12) + value.abs() * w2 * 1e-14 * pts.len() as f64,
    })
}

/// `ℰ^{ρ,λ}(f,f)` summed over all pairs with an endpoint in `supp f`.
pub fn discrete_form(c: &ConductivityField, f: &GridFunction, lambda: Option<f64>, exec: Execution) -> Result<FormEvaluation> {
    let support: Vec<GridPoint> = f.support().copied().collect();
    bilinear_on_set(c, f, f, &support, lambda, true, exec)
}

/// Polarised `ℰ^{ρ,λ}(f,g)`.
pub fn discrete_bilinear(
    c: &ConductivityField,
    f: &GridFunction,
    g: &GridFunction,
    lambda: Option<f64>,
    exec: Execution,
) -> Result<FormEvaluation> {
    let support: Vec<GridPoint> = f.support().chain(g.support()).copied().collect();
    bilinear_on_set(c, f, g, &support, lambda, true, exec)
}

/// I.i.d. uniform values in `[-1, 1]` on the integer box `[-r, r]^d`.
pub fn random_grid_function(lattice: ScaledLattice, r: i64, seed: u64, stream: u64) -> GridFunction {
    let d = lattice.dim();
    let mut rng = stream_rng(seed, stream);
    let mut g = GridFunction::new(lattice);
    for_each_in_box(&GridPoint::new(&vec![-r; d]), &GridPoint::new(&vec![r; d]), |p| {
        g.values.insert(p, rng.random_range(-1.0..1.0));
    });
    g
}

/// Window-certified chain constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainConstants {
    pub n0: f64,
    pub kappa2: f64,
    pub theta2: f64,
}

impl ChainConstants {
    /// `N₀³/κ₂`.
    pub fn comparison_constant(&self) -> f64 {
        self.n0.powi(3) / self.kappa2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub function_id: usize,
    /// `ℰ_α^{ρ,λ}(f,f)`.
    pub e_alpha: f64,
    /// `ℰ^{ρ,λΘ₂}(f,f)`.
    pub e_field: f64,
    pub ratio: f64,
    pub pass: bool,
    /// Interactions of `f` leave the certified window.
    pub coverage_gap: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub lambda: f64,
    pub constants: ChainConstants,
    pub bound: f64,
    pub rows: Vec<ComparisonRow>,
    pub max_ratio: f64,
    pub violations: usize,
    pub coverage_gaps: usize,
}

/// `ℰ_α^{ρ,λ}(f,f) ≤ N₀³/κ₂ · ℰ^{ρ,λΘ₂}(f,f)` for each function.
///
/// `ℰ_α` uses `C_α(x,y) = |x−y|^{-d-α}` on the same lattice. If `certified`
/// is given, functions whose `λ`-interactions leave that window are skipped
/// and reported as coverage gaps.
pub fn form_comparison(
    c: &ConductivityField,
    constants: ChainConstants,
    corpus: &[GridFunction],
    lambda: f64,
    certified: Option<&Window>,
    exec: Execution,
) -> Result<ComparisonReport> {
    let stable = isotropic_stable(*c.lattice(), c.alpha(), 1.0)?;
    let bound = constants.comparison_constant();
    let reach = ball_offsets(c.dim(), lambda * c.lattice().rho(), DEFAULT_BALL_CAP)?;
    let rows: Vec<Result<ComparisonRow>> = map_range(exec, corpus.len(), |i| {
        let f = &corpus[i];
        let gap = certified.is_some_and(|w| f.support().any(|x| reach.iter().any(|h| !w.contains(&x.add(h)))));
        if gap {
            return Ok(ComparisonRow {
                function_id: i,
                e_alpha: f64::NAN,
                e_field: f64::NAN,
                ratio: f64::NAN,
                pass: true,
                coverage_gap: true,
            });
        }
        let ea = discrete_form(&stable, f, Some(lambda), Execution::Sequential)?.value;
        let ef = discrete_form(c, f, Some(lambda * constants.theta2), Execution::Sequential)?.value;
        let ratio = if ea == 0.0 { 0.0 } else { ea / ef };
        Ok(ComparisonRow {
            function_id: i,
            e_alpha: ea,
            e_field: ef,
            ratio,
            pass: ea <= bound * ef * (1.0 + 1e-12),
            coverage_gap: false,
        })
    });
    let rows: Vec<ComparisonRow> = rows.into_iter().collect::<Result<_>>()?;
    let max_ratio = rows.iter().filter(|r| !r.coverage_gap).map(|r| r.ratio).fold(0.0, f64::max);
    Ok(ComparisonReport {
        lambda,
        constants,
        bound,
        violations: rows.iter().filter(|r| !r.pass).count(),
        coverage_gaps: rows.iter().filter(|r| r.coverage_gap).count(),
        max_ratio,
        rows,
    })
}

// ---------------------------------------------------------------------------
// Test functions on ℝ^d

fn bump(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        let v = 1.0 - u * u;
        v * v
    }
}

/// Compactly supported test functions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TestFunction {
    /// `Π max(0, 1 − |x_i − c_i|/w)`.
    TensorHat { center: Vec<f64>, width: f64 },
    /// `exp(−|x−c|²/2σ²) Π (1 − ((x_i−c_i)/R)²)²`.
    GaussBump { center: Vec<f64>, sigma: f64, radius: f64 },
    /// `Σ a cos(⟨ω,x⟩ + φ)` times the same bump.
    TrigBump {
        center: Vec<f64>,
        radius: f64,
        terms: Vec<(f64, Vec<f64>, f64)>,
    },
    /// `f(x/s)`.
    Dilated { inner: Box<TestFunction>, s: f64 },
}

impl TestFunction {
    pub fn dim(&self) -> usize {
        match self {
            TestFunction::TensorHat { center, .. }
            | TestFunction::GaussBump { center, .. }
            | TestFunction::TrigBump { center, .. } => center.len(),
            TestFunction::Dilated { inner, .. } => inner.dim(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TestFunction::TensorHat { center, width } => center
                .iter()
                .zip(x)
                .map(|(c, xi)| (1.0 - (xi - c).abs() / width).max(0.0))
                .product(),
            TestFunction::GaussBump { center, sigma, radius } => {
                let mut b = 1.0;
                let mut r2 = 0.0;
                for (c, xi) in center.iter().zip(x) {
                    let u = xi - c;
                    b *= bump(u / radius);
                    r2 += u * u;
                }
                if b == 0.0 {
                    0.0
                } else {
                    b * (-r2 / (2.0 * sigma * sigma)).exp()
                }
            }
            TestFunction::TrigBump { center, radius, terms } => {
                let b: f64 = center.iter().zip(x).map(|(c, xi)| bump((xi - c) / radius)).product();
                if b == 0.0 {
                    return 0.0;
                }
                let s: f64 = terms
                    .iter()
                    .map(|(a, w, ph)| a * (w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + ph).cos())
                    .sum();
                b * s
            }
            TestFunction::Dilated { inner, s } => {
                let mut y = [0.0; MAX_DIM];
                for (yi, xi) in y.iter_mut().zip(x) {
                    *yi = xi / s;
                }
                inner.eval(&y[..x.len()])
            }
        }
    }

    /// Closed box containing the support.
    pub fn support_box(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            TestFunction::TensorHat { center, width } => (
                center.iter().map(|c| c - width).collect(),
                center.iter().map(|c| c + width).collect(),
            ),
            TestFunction::GaussBump { center, radius, .. } | TestFunction::TrigBump { center, radius, .. } => (
                center.iter().map(|c| c - radius).collect(),
                center.iter().map(|c| c + radius).collect(),
            ),
            TestFunction::Dilated { inner, s } => {
                let (lo, hi) = inner.support_box();
                (lo.iter().map(|v| v * s).collect(), hi.iter().map(|v| v * s).collect())
            }
        }
    }

    pub fn is_smooth(&self) -> bool {
        match self {
            TestFunction::TensorHat { .. } => false,
            TestFunction::Dilated { inner, .. } => inner.is_smooth(),
            _ => true,
        }
    }
}

/// Seeded corpus cycling through hats, Gaussian bumps and trigonometric
/// bumps. With `smooth_only`, hats are left out.
pub fn test_corpus(d: usize, count: usize, seed: u64, smooth_only: bool) -> Vec<TestFunction> {
    let mut rng = stream_rng(seed, 0);
    let kinds: &[u8] = if smooth_only { &[1, 2] } else { &[0, 1, 2] };
    (0..count)
        .map(|i| {
            let center: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
            let radius = rng.random_range(1.0..2.0);
            match kinds[i % kinds.len()] {
                0 => TestFunction::TensorHat { center, width: radius },
                1 => TestFunction::GaussBump {
                    center,
                    sigma: rng.random_range(0.3..1.0),
                    radius,
                },
                _ => {
                    let terms = (0..3)
                        .map(|_| {
                            (
                                rng.random_range(-1.0..1.0),
                                (0..d).map(|_| rng.random_range(-3.0..3.0)).collect(),
                                rng.random_range(0.0..2.0 * PI),
                            )
                        })
                        .collect();
                    TestFunction::TrigBump { center, radius, terms }
                }
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Continuum forms

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuumConfig {
    /// Midpoint cells per unit length in each coordinate.
    pub mesh: usize,
    /// Cutoffs, ascending powers of two are assumed for Richardson.
    pub epsilons: Vec<f64>,
    pub radial_order: usize,
    pub angular_order: usize,
    /// Minimum number of angular panels on the circle.
    pub angular_panels: usize,
}

impl Default for ContinuumConfig {
    fn default() -> Self {
        ContinuumConfig {
            mesh: 16,
            epsilons: vec![0.0625, 0.125, 0.25],
            radial_order: 8,
            angular_order: 8,
            angular_panels: 8,
        }
    }
}

/// Continuum form of one kernel at several cutoffs plus its `ε → 0` limit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuumForm {
    pub kernel: String,
    /// `(ε, ½∬_{|x−y|≥ε}(f(y)−f(x))² k)`.
    pub at_cutoff: Vec<(f64, f64)>,
    /// Limit from integrating the remainder panel directly.
    pub direct_limit: f64,
    /// Richardson extrapolation of the two smallest cutoffs with exponent `2−α`.
    pub richardson: f64,
    pub error_bound: f64,
}

impl ContinuumForm {
    pub fn evaluation(&self, kind: FormKind) -> FormEvaluation {
        FormEvaluation {
            value: self.richardson,
            kind,
            cutoff: None,
            descriptor: self.kernel.clone(),
            error_bound: self.error_bound,
        }
    }
}

/// Unit directions with weights integrating over `S^{d-1}`.
fn sphere_rule(d: usize, breaks: &[f64], cfg: &ContinuumConfig) -> Vec<([f64; MAX_DIM], f64)> {
    let rule = GaussRule::new(cfg.angular_order);
    match d {
        1 => vec![([1.0, 0.0, 0.0], 1.0), ([-1.0, 0.0, 0.0], 1.0)],
        2 => {
            let mut cuts: Vec<f64> = (0..=cfg.angular_panels)
                .map(|i| 2.0 * PI * i as f64 / cfg.angular_panels as f64)
                .chain(breaks.iter().copied().filter(|b| *b > 0.0 && *b < 2.0 * PI))
                .collect();
            cuts.sort_by(f64::total_cmp);
            cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
            let mut out = Vec::new();
            for w in cuts.windows(2) {
                for (t, wt) in rule.mapped(w[0], w[1]) {
                    out.push(([t.cos(), t.sin(), 0.0], wt));
                }
            }
            out
        }
        _ => {
            let mut out = Vec::new();
            let panels = cfg.angular_panels.max(4);
            for i in 0..panels / 2 {
                let (a, b) = (PI * i as f64 / (panels / 2) as f64, PI * (i + 1) as f64 / (panels / 2) as f64);
                for (phi, wp) in rule.mapped(a, b) {
                    for j in 0..panels {
                        let (c0, c1) = (2.0 * PI * j as f64 / panels as f64, 2.0 * PI * (j + 1) as f64 / panels as f64);
                        for (psi, wq) in rule.mapped(c0, c1) {
                            out.push((
                                [phi.sin() * psi.cos(), phi.sin() * psi.sin(), phi.cos()],
                                wp * wq * phi.sin(),
                            ));
                        }
                    }
                }
            }
            out
        }
    }
}

/// Midpoint grid over the support box of `f`.
struct Mesh {
    d: usize,
    points: Vec<[f64; MAX_DIM]>,
    values: Vec<f64>,
    lo: [f64; MAX_DIM],
    hi: [f64; MAX_DIM],
    cell: f64,
    diameter: f64,
}

impl Mesh {
    fn new(f: &TestFunction, per_unit: usize) -> Result<Self> {
        let d = f.dim();
        let (lo_v, hi_v) = f.support_box();
        let mut lo = [0.0; MAX_DIM];
        let mut hi = [0.0; MAX_DIM];
        let mut counts = [1usize; MAX_DIM];
        let mut h = [0.0; MAX_DIM];
        for i in 0..d {
            lo[i] = lo_v[i];
            hi[i] = hi_v[i];
            counts[i] = (((hi[i] - lo[i]) * per_unit as f64).ceil() as usize).max(1);
            h[i] = (hi[i] - lo[i]) / counts[i] as f64;
        }
        let total: usize = counts[..d].iter().product();
        if total > 4_000_000 {
            return Err(Error::resource("continuum mesh points", 4_000_000));
        }
        let mut points = Vec::with_capacity(total);
        let mut idx = [0usize; MAX_DIM];
        for _ in 0..total {
            let mut p = [0.0; MAX_DIM];
            for i in 0..d {
                p[i] = lo[i] + (idx[i] as f64 + 0.5) * h[i];
            }
            points.push(p);
            for i in (0..d).rev() {
                idx[i] += 1;
                if idx[i] < counts[i] {
                    break;
                }
                idx[i] = 0;
            }
        }
        let values = points.iter().map(|p| f.eval(&p[..d])).collect();
        let diameter = (0..d).map(|i| (hi[i] - lo[i]).powi(2)).sum::<f64>().sqrt();
        Ok(Mesh {
            d,
            points,
            values,
            lo,
            hi,
            cell: h[..d].iter().product(),
            diameter,
        })
    }

    fn in_box(&self, p: &[f64; MAX_DIM]) -> bool {
        (0..self.d).all(|i| p[i] >= self.lo[i] && p[i] <= self.hi[i])
    }

    /// `∫ (f(x+h)−f(x))² k(x,x+h) dx` over all `x`, split into `x ∈ B` and
    /// `x+h ∈ B, x ∉ B`.
    fn increment(&self, f: &TestFunction, kernels: &[&dyn Kernel], h: &[f64; MAX_DIM], out: &mut [f64]) {
        let d = self.d;
        let stationary: Vec<Option<f64>> = kernels
            .iter()
            .map(|k| k.is_stationary().then(|| k.eval(&[0.0; MAX_DIM][..d], &h[..d])))
            .collect();
        for o in out.iter_mut() {
            *o = 0.0;
        }
        let mut xh = [0.0; MAX_DIM];
        let mut xm = [0.0; MAX_DIM];
        for (p, fx) in self.points.iter().zip(&self.values) {
            for i in 0..d {
                xh[i] = p[i] + h[i];
                xm[i] = p[i] - h[i];
            }
            let a = f.eval(&xh[..d]) - fx;
            let a2 = a * a;
            // y = p as the right endpoint of a pair whose left end is outside B.
            let b2 = if *fx != 0.0 && !self.in_box(&xm) { fx * fx } else { 0.0 };
            if a2 == 0.0 && b2 == 0.0 {
                continue;
            }
            for (j, k) in kernels.iter().enumerate() {
                let (ka, kb) = match stationary[j] {
                    Some(v) => (v, v),
                    None => (k.eval(&p[..d], &xh[..d]), k.eval(&xm[..d], &p[..d])),
                };
                out[j] += a2 * ka + b2 * kb;
            }
        }
        for o in out.iter_mut() {
            *o *= self.cell;
        }
    }
}

/// `½∬(f(y)−f(x))² k(x,y) 𝟙{|x−y| ≥ ε}` for several kernels sharing the same
/// quadrature, at every cutoff in `cfg.epsilons` and extrapolated to `ε → 0`.
pub fn continuum_forms(
    kernels: &[&dyn Kernel],
    f: &TestFunction,
    cfg: &ContinuumConfig,
    exec: Execution,
) -> Result<Vec<ContinuumForm>> {
    let d = f.dim();
    if kernels.iter().any(|k| k.dim() != d) {
        return Err(Error::config("kernel and test function dimensions differ"));
    }
    let alpha = kernels.first().map_or(1.0, |k| k.alpha());
    if kernels.iter().any(|k| k.alpha() != alpha) {
        return Err(Error::config("kernels compared on one quadrature must share alpha"));
    }
    let mut eps = cfg.epsilons.clone();
    eps.sort_by(f64::total_cmp);
    if eps.is_empty() || eps[0] <= 0.0 {
        return Err(Error::config("continuum cutoffs must be positive"));
    }
    let mesh = Mesh::new(f, cfg.mesh)?;
    let big_h = mesh.diameter.max(2.0 * eps[eps.len() - 1]);
    let mut breaks: Vec<f64> = kernels.iter().flat_map(|k| k.angular_breaks()).collect();
    breaks.sort_by(f64::total_cmp);
    let dirs = sphere_rule(d, &breaks, cfg);
    let rule = GaussRule::new(cfg.radial_order);
    let m = kernels.len();
    let dm = d as f64;

    // Radial panels: [0,ε₀], [ε_i, ε_{i+1}], doubling up to H, then [H, ∞).
    let mut cuts = eps.clone();
    while cuts[cuts.len() - 1] * 2.0 < big_h {
        let next = cuts[cuts.len() - 1] * 2.0;
        cuts.push(next);
    }
    cuts.push(big_h);
    // Each node: (r, radial weight, panel index); panel 0 is the remainder.
    let mut nodes: Vec<(f64, f64, usize)> = Vec::new();
    let p = 2.0 - alpha;
    for (s, w) in rule.mapped(0.0, 1.0) {
        // r = ε₀ s^{1/p}: the integrand r^{1-α} becomes constant in s.
        let r = eps[0] * s.powf(1.0 / p);
        let jac = eps[0] / p * s.powf(1.0 / p - 1.0);
        nodes.push((r, w * jac, 0));
    }
    for (i, win) in cuts.windows(2).enumerate() {
        for (r, w) in rule.mapped(win[0], win[1]) {
            nodes.push((r, w, i + 1));
        }
    }
    let far_panel = cuts.len();
    for (u, w) in rule.mapped(0.0, 1.0) {
        let r = big_h * u.powf(-1.0 / alpha);
        let jac = big_h / alpha * u.powf(-1.0 / alpha - 1.0);
        nodes.push((r, w * jac, far_panel));
    }
    let panels = far_panel + 1;
    let jobs: Vec<(usize, usize)> = (0..nodes.len()).flat_map(|a| (0..dirs.len()).map(move |b| (a, b))).collect();
    let contributions = map_slice(exec, &jobs, |&(a, b)| {
        let (r, wr, _) = nodes[a];
        let (dir, wd) = dirs[b];
        let mut h = [0.0; MAX_DIM];
        for i in 0..d {
            h[i] = r * dir[i];
        }
        let mut out = vec![0.0; m];
        mesh.increment(f, kernels, &h, &mut out);
        let w = 0.5 * wr * wd * r.powf(dm - 1.0);
        out.iter().map(|v| v * w).collect::<Vec<f64>>()
    });
    // Deterministic accumulation per (kernel, panel).
    let mut per_panel = vec![vec![0.0; panels]; m];
    for (&(a, _), vals) in jobs.iter().zip(&contributions) {
        let panel = nodes[a].2;
        for j in 0..m {
            per_panel[j][panel] += vals[j];
        }
    }
    let q = 2f64.powf(p);
    Ok(kernels
        .iter()
        .enumerate()
        .map(|(j, k)| {
            let pp = &per_panel[j];
            let total: f64 = pp.iter().sum();
            // Panel i+1 covers [cuts[i], cuts[i+1]]; value at ε_i drops panels ≤ i.
            let at_cutoff: Vec<(f64, f64)> = eps
                .iter()
                .enumerate()
                .map(|(i, e)| (*e, total - pp[..=i].iter().sum::<f64>()))
                .collect();
            let richardson = if at_cutoff.len() >= 2 {
                let (e_fine, e_coarse) = (at_cutoff[0].1, at_cutoff[1].1);
                (q * e_fine - e_coarse) / (q - 1.0)
            } else {
                total
            };
            ContinuumForm {
                kernel: k.describe(),
                at_cutoff,
                direct_limit: total,
                richardson,
                error_bound: (richardson - total).abs(),
            }
        })
        .collect())
}

/// One kernel at one cutoff; the error bound estimates the `[0, ε]` remainder.
pub fn continuum_form(k: &dyn Kernel, f: &TestFunction, epsilon: f64, mesh: usize) -> Result<FormEvaluation> {
    let cfg = ContinuumConfig {
        mesh,
        epsilons: vec![epsilon],
        ..Default::default()
    };
    let r = continuum_forms(&[k], f, &cfg, Execution::Parallel)?.remove(0);
    Ok(FormEvaluation {
        value: r.at_cutoff[0].1,
        kind: FormKind::Continuum,
        cutoff: Some(epsilon),
        descriptor: r.kernel,
        error_bound: r.direct_limit - r.at_cutoff[0].1,
    })
}

// ---------------------------------------------------------------------------
// Cube chains

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CubeChainConfig {
    /// Cubes have side `1/n`.
    pub n: f64,
    /// Anchor box (integer cube indices, inclusive).
    pub lo: Vec<i64>,
    pub hi: Vec<i64>,
    pub epsilons: Vec<f64>,
    pub m0: usize,
    pub lambda2: f64,
    /// Midpoints per axis per cube; the estimate is refined once at twice this.
    pub points_per_axis: usize,
}

impl Default for CubeChainConfig {
    fn default() -> Self {
        CubeChainConfig {
            n: 1.0,
            lo: vec![-4, -4],
            hi: vec![3, 3],
            epsilons: vec![0.0625, 0.125, 0.25],
            m0: 4,
            lambda2: 0.1,
            points_per_axis: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CubeChainCertificate {
    pub from: GridPoint,
    pub to: GridPoint,
    pub cubes: Vec<GridPoint>,
    /// Per edge, the smallest `∫∫k𝟙 / ∫∫_{𝒪×𝒬}𝟙|x−y|^{-d-α}` over the cutoffs.
    pub edge_ratios: Vec<f64>,
}

impl CubeChainCertificate {
    pub fn length(&self) -> usize {
        self.cubes.len() - 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CubeChainReport {
    pub n: f64,
    pub lambda2: f64,
    pub m0_bound: usize,
    pub pairs: usize,
    pub certificates: Vec<CubeChainCertificate>,
    pub missing: Vec<(GridPoint, GridPoint)>,
    pub max_length: usize,
    pub max_multiplicity: usize,
    /// `max(chain length, multiplicity)` when every pair is covered.
    pub certified_m0: Option<usize>,
    /// Largest midpoint-refinement change of any cube-pair integral, relative.
    pub quadrature_error: f64,
}

impl CubeChainReport {
    pub fn passed(&self) -> bool {
        self.certified_m0.is_some_and(|m| m <= self.m0_bound)
    }
}

struct CubeIntegrals<'a> {
    k: &'a dyn Kernel,
    stable: IsotropicKernel,
    n: f64,
    eps: Vec<f64>,
    ppa: usize,
    /// Key: (first cube, second cube) or, for stationary kernels, (origin, diff).
    cache: DashMap<(GridPoint, GridPoint, bool), (Vec<f64>, f64)>,
}

impl CubeIntegrals<'_> {
    fn midpoints(&self, anchor: &GridPoint, m: usize) -> Vec<[f64; MAX_DIM]> {
        let d = anchor.dim();
        let total = m.pow(d as u32);
        (0..total)
            .map(|mut idx| {
                let mut p = [0.0; MAX_DIM];
                for i in (0..d).rev() {
                    p[i] = (anchor.coords()[i] as f64 + ((idx % m) as f64 + 0.5) / m as f64) / self.n;
                    idx /= m;
                }
                p
            })
            .collect()
    }

    fn raw(&self, a: &GridPoint, b: &GridPoint, isotropic: bool, m: usize) -> Vec<f64> {
        let d = a.dim();
        let pa = self.midpoints(a, m);
        let pb = self.midpoints(b, m);
        let cell = (1.0 / (self.n * m as f64)).powi(d as i32);
        let mut acc = vec![0.0; self.eps.len()];
        for x in &pa {
            for y in &pb {
                let r = (0..d).map(|i| (x[i] - y[i]).powi(2)).sum::<f64>().sqrt();
                let v = if isotropic {
                    self.stable.eval(&x[..d], &y[..d])
                } else {
                    self.k.eval(&x[..d], &y[..d])
                };
                if v == 0.0 {
                    continue;
                }
                for (e, slot) in self.eps.iter().zip(acc.iter_mut()) {
                    if r >= *e {
                        *slot += v;
                    }
                }
            }
        }
        acc.iter().map(|v| v * cell * cell).collect()
    }

    /// Per-cutoff integrals over `a × b`, with a relative refinement error.
    fn get(&self, a: &GridPoint, b: &GridPoint, isotropic: bool) -> (Vec<f64>, f64) {
        let stationary = isotropic || self.k.is_stationary();
        let key = if stationary {
            (GridPoint::origin(a.dim()), b.sub(a), isotropic)
        } else if a <= b {
            (*a, *b, false)
        } else {
            (*b, *a, false)
        };
        if let Some(v) = self.cache.get(&key) {
            return v.clone();
        }
        let (ka, kb) = (key.0, key.1);
        let coarse = self.raw(&ka, &kb, isotropic, self.ppa);
        let fine = self.raw(&ka, &kb, isotropic, 2 * self.ppa);
        let err = coarse
            .iter()
            .zip(&fine)
            .map(|(c, f)| if *f > 0.0 { (c - f).abs() / f } else { 0.0 })
            .fold(0.0, f64::max);
        let v = (fine, err);
        self.cache.insert(key, v.clone());
        v
    }
}

/// Search cube chains for every ordered pair of distinct cubes in the anchor
/// box, breadth first with lexicographic tie-breaking, and certify `M₀`.
pub fn cube_chain_check(k: &dyn Kernel, cfg: &CubeChainConfig, exec: Execution) -> Result<CubeChainReport> {
    let d = k.dim();
    if cfg.lo.len() != d || cfg.hi.len() != d {
        return Err(Error::config("cube box dimension differs from the kernel"));
    }
    if cfg.epsilons.iter().any(|e| !(*e > 0.0)) || cfg.epsilons.is_empty() {
        return Err(Error::config("cube-chain cutoffs must be positive"));
    }
    let lat = ScaledLattice::new(d, cfg.n)?;
    let window = Window::from_bounds(lat, &cfg.lo, &cfg.hi)?;
    let cubes = window.points();
    let ints = CubeIntegrals {
        k,
        stable: IsotropicKernel { d, alpha: k.alpha(), coefficient: 1.0 },
        n: cfg.n,
        eps: cfg.epsilons.clone(),
        ppa: cfg.points_per_axis.max(1),
        cache: DashMap::new(),
    };
    let mut pairs = Vec::new();
    for (i, a) in cubes.iter().enumerate() {
        for b in &cubes[i + 1..] {
            pairs.push((*a, *b));
        }
    }
    let found: Vec<Option<CubeChainCertificate>> = map_slice(exec, &pairs, |(o, q)| {
        let (target, _) = ints.get(o, q, true);
        let thresholds: Vec<f64> = target.iter().map(|t| cfg.lambda2 * t).collect();
        let ratio = |a: &GridPoint, b: &GridPoint| -> f64 {
            let (v, _) = ints.get(a, b, false);
            v.iter()
                .zip(&target)
                .map(|(x, t)| if *t > 0.0 { x / t } else { f64::INFINITY })
                .fold(f64::INFINITY, f64::min)
        };
        let ok = |a: &GridPoint, b: &GridPoint| {
            let (v, _) = ints.get(a, b, false);
            v.iter().zip(&thresholds).all(|(x, t)| *x >= t * (1.0 - 1e-12))
        };
        let mut prev: HashMap<GridPoint, GridPoint> = HashMap::new();
        let mut depth: HashMap<GridPoint, usize> = HashMap::new();
        depth.insert(*o, 0);
        let mut queue = VecDeque::from([*o]);
        while let Some(u) = queue.pop_front() {
            let du = depth[&u];
            if du >= cfg.m0 {
                continue;
            }
            for v in &cubes {
                if depth.contains_key(v) || !ok(&u, v) {
                    continue;
                }
                depth.insert(*v, du + 1);
                prev.insert(*v, u);
                if v == q {
                    let mut path = vec![*q];
                    while let Some(p) = prev.get(path.last().expect("nonempty")) {
                        path.push(*p);
                    }
                    path.reverse();
                    let edge_ratios = path.windows(2).map(|w| ratio(&w[0], &w[1])).collect();
                    return Some(CubeChainCertificate { from: *o, to: *q, cubes: path, edge_ratios });
                }
                queue.push_back(*v);
            }
        }
        None
    });
    let mut certificates = Vec::new();
    let mut missing = Vec::new();
    for ((o, q), cert) in pairs.iter().zip(found) {
        match cert {
            Some(c) => {
                let mut rev = c.clone();
                rev.from = c.to;
                rev.to = c.from;
                rev.cubes.reverse();
                rev.edge_ratios.reverse();
                certificates.push(c);
                certificates.push(rev);
            }
            None => {
                missing.push((*o, *q));
                missing.push((*q, *o));
            }
        }
    }
    let mut uses: BTreeMap<(GridPoint, GridPoint), usize> = BTreeMap::new();
    for c in &certificates {
        for w in c.cubes.windows(2) {
            *uses.entry((w[0], w[1])).or_insert(0) += 1;
        }
    }
    let max_length = certificates.iter().map(|c| c.length()).max().unwrap_or(0);
    let max_multiplicity = uses.values().copied().max().unwrap_or(0);
    let quadrature_error = ints.cache.iter().map(|e| e.value().1).fold(0.0, f64::max);
    Ok(CubeChainReport {
        n: cfg.n,
        lambda2: cfg.lambda2,
        m0_bound: cfg.m0,
        pairs: 2 * pairs.len(),
        certified_m0: missing.is_empty().then_some(max_length.max(max_multiplicity)),
        certificates,
        missing,
        max_length,
        max_multiplicity,
        quadrature_error,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRow {
    pub function_id: usize,
    pub e_kernel: f64,
    pub e_alpha: f64,
    pub ratio: f64,
    pub error_bound: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormEquivalenceReport {
    pub lower: f64,
    pub upper: f64,
    pub tolerance: f64,
    pub rows: Vec<NormRow>,
    pub all_pass: bool,
}

/// `ℰ(f,f)/ℰ_α(f,f) ∈ [Λ₂/M₀³ − tol, Λ₁ + tol]` over a corpus.
#[allow(clippy::too_many_arguments)]
pub fn norm_equivalence(
    k: &dyn Kernel,
    corpus: &[TestFunction],
    m0: usize,
    lambda2: f64,
    lambda1: f64,
    tolerance: f64,
    cfg: &ContinuumConfig,
    exec: Execution,
) -> Result<NormEquivalenceReport> {
    let stable = IsotropicKernel { d: k.dim(), alpha: k.alpha(), coefficient: 1.0 };
    let lower = lambda2 / (m0 as f64).powi(3);
    let upper = lambda1;
    let mut rows = Vec::with_capacity(corpus.len());
    for (i, f) in corpus.iter().enumerate() {
        let r = continuum_forms(&[k, &stable], f, cfg, exec)?;
        let (ek, ea) = (r[0].richardson, r[1].richardson);
        let ratio = if ea > 0.0 { ek / ea } else { 0.0 };
        let error_bound = if ea > 0.0 { (r[0].error_bound + ratio * r[1].error_bound) / ea } else { 0.0 };
        rows.push(NormRow {
            function_id: i,
            e_kernel: ek,
            e_alpha: ea,
            ratio,
            error_bound,
            pass: ratio >= lower - tolerance && ratio <= upper + tolerance,
        });
    }
    Ok(NormEquivalenceReport {
        lower,
        upper,
        tolerance,
        all_pass: rows.iter().all(|r| r.pass),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conductivity::isotropic_stable;
    use crate::kernel::{AxesKernel, ConeKernel};

    fn p(c: &[i64]) -> GridPoint {
        GridPoint::new(c)
    }

    #[test]
    fn basel_delta_energy() {
        let lat = ScaledLattice::integer(1);
        let c = isotropic_stable(lat, 1.0, 1.0).unwrap();
        let f = GridFunction::delta(lat, p(&[0]));
        let e = discrete_form(&c, &f, None, Execution::Sequential).unwrap();
        assert!((e.value - PI * PI / 3.0).abs() < 1e-12);
    }

    #[test]
    fn constants_have_zero_energy_inside() {
        let lat = ScaledLattice::integer(2);
        let c = isotropic_stable(lat, 1.0, 1.0).unwrap();
        let pts = Window::centered(lat, 3.0).unwrap().points();
        let f = GridFunction::from_fn(lat, &pts, |_| 2.5);
        let e = bilinear_on_set(&c, &f, &f, &pts, None, false, Execution::Sequential).unwrap();
        assert_eq!(e.value, 0.0);
    }

    #[test]
    fn polarisation_identity() {
        let lat = ScaledLattice::integer(2);
        let c = isotropic_stable(lat, 1.2, 1.0).unwrap();
        let f = random_grid_function(lat, 3, 1, 0);
        let g = random_grid_function(lat, 3, 1, 1);
        let fg = f.add(&g);
        let e = |a: &GridFunction, b: &GridFunction| discrete_bilinear(&c, a, b, Some(4.0), Execution::Sequential).unwrap().value;
        let lhs = e(&fg, &fg);
        let rhs = e(&f, &f) + 2.0 * e(&f, &g) + e(&g, &g);
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs());
        assert!((e(&f, &g) - e(&g, &f)).abs() < 1e-12 * lhs.abs());
    }

    #[test]
    fn one_edge_chains_make_comparison_an_identity() {
        let lat = ScaledLattice::integer(1);
        let c = isotropic_stable(lat, 1.0, 1.0 / PI).unwrap();
        let consts = ChainConstants { n0: 1.0, kappa2: 1.0 / PI, theta2: 1.0 };
        let corpus = vec![random_grid_function(lat, 4, 3, 0), GridFunction::new(lat)];
        let r = form_comparison(&c, consts, &corpus, 3.0, None, Execution::Sequential).unwrap();
        assert!((r.rows[0].ratio - PI).abs() < 1e-12);
        assert_eq!(r.rows[1].ratio, 0.0);
        assert_eq!(r.violations, 0);
    }

    #[test]
    fn dilation_scales_sobolev_energy() {
        let k = IsotropicKernel { d: 1, alpha: 0.5, coefficient: 1.0 };
        let f = TestFunction::GaussBump { center: vec![0.1], sigma: 0.5, radius: 1.0 };
        let g = TestFunction::Dilated { inner: Box::new(f.clone()), s: 2.0 };
        let cfg = ContinuumConfig { mesh: 64, ..Default::default() };
        let a = continuum_forms(&[&k], &f, &cfg, Execution::Sequential).unwrap()[0].richardson;
        let b = continuum_forms(&[&k], &g, &cfg, Execution::Sequential).unwrap()[0].richardson;
        assert!((b / a - 2f64.sqrt()).abs() < 1e-3, "{a} {b}");
    }

    #[test]
    fn cone_is_dominated_and_zero_function_vanishes() {
        let cone = ConeKernel { gamma: 1.0, alpha: 1.0, coefficient: 1.0 };
        let iso = IsotropicKernel { d: 2, alpha: 1.0, coefficient: 1.0 };
        let f = test_corpus(2, 3, 5, true).remove(1);
        let cfg = ContinuumConfig { mesh: 8, ..Default::default() };
        let r = continuum_forms(&[&cone, &iso], &f, &cfg, Execution::Sequential).unwrap();
        assert!(r[0].richardson > 0.0 && r[0].richardson <= r[1].richardson);
        let zero = TestFunction::TrigBump { center: vec![0.0, 0.0], radius: 1.0, terms: vec![] };
        assert_eq!(continuum_forms(&[&cone], &zero, &cfg, Execution::Sequential).unwrap()[0].richardson, 0.0);
    }

    #[test]
    fn isotropic_cubes_need_direct_edges_only() {
        let iso = IsotropicKernel { d: 1, alpha: 1.0, coefficient: 1.0 };
        let cfg = CubeChainConfig { lo: vec![-3], hi: vec![2], lambda2: 1.0, m0: 1, ..Default::default() };
        let r = cube_chain_check(&iso, &cfg, Execution::Sequential).unwrap();
        assert_eq!(r.certified_m0, Some(1));
        assert!(r.passed());
    }

    #[test]
    fn axes_kernel_has_no_cube_chains() {
        let axes = AxesKernel { d: 2, alpha: 1.0 };
        let cfg = CubeChainConfig { lo: vec![-1, -1], hi: vec![0, 0], ..Default::default() };
        let r = cube_chain_check(&axes, &cfg, Execution::Sequential).unwrap();
        assert_eq!(r.missing.len(), r.pairs);
        assert!(!r.passed());
    }
}
