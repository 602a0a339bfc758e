//! Generators on finite windows, uniformized heat kernels and resolvents.
//!
//! Kernel values use the `μ^ρ`-density convention: `p(t,x,y)` is `ρ^d` times
//! the transition probability. Multiply by `ρ^{-d}` for raw probabilities.

use crate::conductivity::{scale_conductivity, ConductivityField, TailPolicy};
use crate::error::{Error, Result};
use crate::exec::{fill_indexed, map_range, map_slice, Execution};
use crate::forms::bilinear_on_set;
use crate::lattice::{ball_offsets, cube_offsets, GridFunction, GridPoint, Window, DEFAULT_BALL_CAP};
use crate::numerics::linear_fit;
use serde::{Deserialize, Serialize};

/// Default certified truncation error of the Poisson series (probability units).
pub const DEFAULT_UNIFORMIZATION_TOL: f64 = 1e-12;
/// Largest `Λt` handled by a single Poisson series.
const MAX_SERIES_LOAD: f64 = 2000.0;
/// Stored off-diagonal entries allowed by default.
pub const DEFAULT_ENTRY_CAP: usize = 50_000_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Jumps leaving the window are suppressed; rows sum to zero.
    #[default]
    Killed,
    /// The full rate `C_x` is kept on the diagonal, so mass that would leave
    /// the window dies. Gives a lower bound for the whole-lattice kernel.
    FullRateKilled,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorOptions {
    /// Drop jumps longer than this (real units).
    pub lambda: Option<f64>,
    /// Only store pairs with `|x-y|_∞` at most this many lattice steps.
    pub interaction_radius: Option<i64>,
    pub entry_cap: Option<usize>,
}

/// Sparse generator on a window: `q(x,y) = C(x,y)` off the diagonal; the
/// generator in time units is `ρ^{-d}` times this matrix.
#[derive(Clone, Debug)]
pub struct GeneratorMatrix {
    pub window: Window,
    pub points: Vec<GridPoint>,
    pub boundary: Boundary,
    pub lambda: Option<f64>,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
    diag: Vec<f64>,
    /// Largest certified error of a diagonal entry (conductivity units).
    pub diag_error: f64,
    rate_factor: f64,
}

pub fn generator_matrix(
    c: &ConductivityField,
    window: &Window,
    boundary: Boundary,
    opts: GeneratorOptions,
    exec: Execution,
) -> Result<GeneratorMatrix> {
    let lat = *c.lattice();
    if window.lattice != lat {
        return Err(Error::config("window and field live on different lattices"));
    }
    let n = window.len();
    if n > u32::MAX as usize {
        return Err(Error::resource("window points", u32::MAX as u64));
    }
    let cap = opts.entry_cap.unwrap_or(DEFAULT_ENTRY_CAP);
    let d = c.dim();
    let lam_steps = opts.lambda.map(|l| l * lat.rho());
    let mut radius = opts.interaction_radius.or(c.finite_range());
    if let Some(ls) = lam_steps {
        let r = (ls * (1.0 + 1e-12)).floor() as i64;
        radius = Some(radius.map_or(r, |q| q.min(r)));
    }
    let span = (0..d)
        .map(|i| window.hi.coords()[i] - window.lo.coords()[i])
        .max()
        .unwrap_or(0);
    let offsets: Option<Vec<GridPoint>> = match radius {
        Some(r) if r < span => Some(cube_offsets(d, r).into_iter().filter(|h| !h.is_origin()).collect()),
        _ => None,
    };
    let per_row = offsets.as_ref().map_or(n.saturating_sub(1), |o| o.len());
    if per_row.saturating_mul(n) > cap {
        return Err(Error::resource("generator entries", cap as u64));
    }
    let points = window.points();
    let keep = |h: &GridPoint| match lam_steps {
        Some(ls) => (h.norm_sq() as f64) <= ls * ls * (1.0 + 1e-12),
        None => true,
    };
    let rows: Vec<Result<(Vec<(u32, f64)>, f64, f64)>> = map_range(exec, n, |i| {
        let x = points[i];
        let mut row = Vec::with_capacity(per_row);
        let mut visit = |y: GridPoint, j: usize| -> Result<()> {
            if !keep(&y.sub(&x)) {
                return Ok(());
            }
            let v = c.evaluate(&x, &y)?;
            if v > 0.0 {
                row.push((j as u32, v));
            }
            Ok(())
        };
        match &offsets {
            Some(offs) => {
                for h in offs {
                    let y = x.add(h);
                    if let Some(j) = window.index_of(&y) {
                        visit(y, j)?;
                    }
                }
            }
            None => {
                for (j, y) in points.iter().enumerate() {
                    if j != i {
                        visit(*y, j)?;
                    }
                }
            }
        }
        let inside: f64 = row.iter().map(|e| e.1).sum();
        let (total, err) = match boundary {
            Boundary::Killed => (inside, 0.0),
            Boundary::FullRateKilled => match lam_steps {
                Some(ls) => {
                    let mut s = 0.0;
                    for h in ball_offsets(d, ls, DEFAULT_BALL_CAP)? {
                        if !h.is_origin() {
                            s += c.evaluate(&x, &x.add(&h))?;
                        }
                    }
                    (s.max(inside), 0.0)
                }
                None => {
                    let r = c.total_rate(&x, TailPolicy::Auto)?;
                    (r.value.max(inside), r.error_bound)
                }
            },
        };
        Ok((row, -total, err))
    });
    let mut row_ptr = Vec::with_capacity(n + 1);
    row_ptr.push(0);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    let mut diag = Vec::with_capacity(n);
    let mut diag_error: f64 = 0.0;
    for r in rows {
        let (row, dg, err) = r?;
        for (j, v) in row {
            cols.push(j);
            vals.push(v);
        }
        row_ptr.push(cols.len());
        diag.push(dg);
        diag_error = diag_error.max(err);
    }
    Ok(GeneratorMatrix {
        window: window.clone(),
        points,
        boundary,
        lambda: opts.lambda,
        row_ptr,
        cols,
        vals,
        diag,
        diag_error,
        rate_factor: c.jump_rate_factor(),
    })
}

impl GeneratorMatrix {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn rho(&self) -> f64 {
        self.window.lattice.rho()
    }

    /// `ρ^{-d}`.
    pub fn rate_factor(&self) -> f64 {
        self.rate_factor
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Off-diagonal `(column, q)` entries of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.cols[a..b].iter().zip(&self.vals[a..b]).map(|(j, v)| (*j as usize, *v))
    }

    pub fn diagonal(&self, i: usize) -> f64 {
        self.diag[i]
    }

    /// Row sum in conductivity units (`0` for killed, `≤ 0` otherwise).
    pub fn row_sum(&self, i: usize) -> f64 {
        self.row(i).map(|e| e.1).sum::<f64>() + self.diag[i]
    }

    /// Entry `(i, j)` in conductivity units.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return self.diag[i];
        }
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        match self.cols[a..b].binary_search(&(j as u32)) {
            Ok(k) => self.vals[a + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| (0..self.len()).map(|j| self.entry(i, j)).collect()).collect()
    }

    /// Uniformization rate `Λ = max_x |G_xx|` in time units.
    pub fn max_rate(&self) -> f64 {
        self.diag.iter().fold(0.0f64, |m, v| m.max(-v)) * self.rate_factor
    }

    /// `out = G v` in time units.
    pub fn apply(&self, v: &[f64], out: &mut [f64], exec: Execution) {
        let w = self.rate_factor;
        fill_indexed(exec, out, |i| {
            let mut s = self.diag[i] * v[i];
            for (j, q) in self.row(i) {
                s += q * v[j];
            }
            s * w
        });
    }

    pub fn index_of(&self, p: &GridPoint) -> Option<usize> {
        self.window.index_of(p)
    }
}

// ---------------------------------------------------------------------------
// Uniformization

/// Poisson weights `e^{-a} a^k / k!` until the remaining mass is `≤ tol`.
fn poisson_weights(a: f64, tol: f64) -> (Vec<f64>, f64) {
    if a == 0.0 {
        return (vec![1.0], 0.0);
    }
    let la = a.ln();
    let mut logw = -a;
    let mut w = Vec::new();
    let mut cum = 0.0;
    let mut k = 0usize;
    loop {
        let wk = logw.exp();
        w.push(wk);
        cum += wk;
        let tail = (1.0 - cum).max(0.0);
        if (k as f64) >= a && tail <= tol {
            // Rounding in `cum` is at most a few ulps per term.
            return (w, tail + (k as f64 + 1.0) * 2.0 * f64::EPSILON);
        }
        k += 1;
        logw += la - (k as f64).ln();
    }
}

/// `exp(tG)v` for several times sharing one series of powers of
/// `P = I + G/Λ`. Returns per-time vectors and sup-norm error bounds.
pub fn propagate_many(
    g: &GeneratorMatrix,
    times: &[f64],
    v: &[f64],
    tol: f64,
    exec: Execution,
) -> Result<Vec<(Vec<f64>, f64)>> {
    if times.iter().any(|t| !(*t >= 0.0)) {
        return Err(Error::invalid("times must be nonnegative"));
    }
    let lam = g.max_rate();
    let vmax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tmax = times.iter().copied().fold(0.0, f64::max);
    if lam * tmax > MAX_SERIES_LOAD {
        // Sub-step each time separately; errors add up over steps.
        return times
            .iter()
            .map(|&t| {
                let steps = (lam * t / MAX_SERIES_LOAD).ceil().max(1.0) as usize;
                let dt = t / steps as f64;
                let mut cur = v.to_vec();
                let mut err = 0.0;
                for _ in 0..steps {
                    let mut r = propagate_many(g, &[dt], &cur, tol / steps as f64, exec)?;
                    let (next, e) = r.pop().expect("one time");
                    cur = next;
                    err += e;
                }
                Ok((cur, err))
            })
            .collect();
    }
    let series: Vec<(Vec<f64>, f64)> = times.iter().map(|&t| poisson_weights(lam * t, tol)).collect();
    let kmax = series.iter().map(|s| s.0.len()).max().unwrap_or(1);
    let n = v.len();
    let mut acc: Vec<Vec<f64>> = vec![vec![0.0; n]; times.len()];
    let mut cur = v.to_vec();
    let mut gv = vec![0.0; n];
    for k in 0..kmax {
        for (a, (w, _)) in acc.iter_mut().zip(&series) {
            if let Some(&wk) = w.get(k) {
                for (ai, ci) in a.iter_mut().zip(&cur) {
                    *ai += wk * ci;
                }
            }
        }
        if k + 1 == kmax || lam == 0.0 {
            break;
        }
        g.apply(&cur, &mut gv, exec);
        for (ci, gi) in cur.iter_mut().zip(&gv) {
            *ci += gi / lam;
        }
    }
    Ok(acc
        .into_iter()
        .zip(series)
        .map(|(a, (w, tail))| (a, (tail + w.len() as f64 * 4.0 * f64::EPSILON) * vmax))
        .collect())
}

pub fn propagate(g: &GeneratorMatrix, t: f64, v: &[f64], exec: Execution) -> Result<(Vec<f64>, f64)> {
    let mut r = propagate_many(g, &[t], v, DEFAULT_UNIFORMIZATION_TOL, exec)?;
    Ok(r.pop().expect("one time"))
}

/// `p(t, source, ·)` on the window for each `t`, in the `μ^ρ` convention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatKernelColumn {
    pub source: GridPoint,
    pub points: Vec<GridPoint>,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub error_bounds: Vec<f64>,
    pub rho: f64,
    pub dim: usize,
}

impl HeatKernelColumn {
    /// `Σ_y p(t_k, x, y) ρ^{-d}`.
    pub fn mass(&self, k: usize) -> f64 {
        self.values[k].iter().sum::<f64>() * self.rho.powi(-(self.dim as i32))
    }

    pub fn at(&self, k: usize, y: &GridPoint) -> Option<f64> {
        self.points.binary_search(y).ok().map(|i| self.values[k][i])
    }
}

pub fn heat_kernel(g: &GeneratorMatrix, times: &[f64], source: &GridPoint, exec: Execution) -> Result<HeatKernelColumn> {
    let i = g
        .index_of(source)
        .ok_or_else(|| Error::Domain(format!("source {source:?} outside {}", g.window.describe())))?;
    let mut v = vec![0.0; g.len()];
    v[i] = 1.0;
    let scale = g.window.lattice.rho().powi(g.window.dim() as i32);
    let res = propagate_many(g, times, &v, DEFAULT_UNIFORMIZATION_TOL, exec)?;
    let (values, error_bounds) = res
        .into_iter()
        .map(|(vals, e)| (vals.into_iter().map(|p| p * scale).collect(), e * scale))
        .unzip();
    Ok(HeatKernelColumn {
        source: *source,
        points: g.points.clone(),
        times: times.to_vec(),
        values,
        error_bounds,
        rho: g.window.lattice.rho(),
        dim: g.window.dim(),
    })
}

// ---------------------------------------------------------------------------
// Resolvent

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolventCheck {
    /// `ℰ(U_λ f, g)`.
    pub lhs: f64,
    /// `(f,g) − λ(U_λ f, g)`.
    pub rhs: f64,
    pub residual: f64,
    pub relative_residual: f64,
    pub solver_residual: f64,
    pub iterations: usize,
    /// Bound on `|lhs|` error from the tail of `C_x`.
    pub form_error_bound: f64,
}

/// Conjugate gradients for `(λ − G)u = f` (time units).
pub fn solve_resolvent(g: &GeneratorMatrix, lambda: f64, f: &[f64], exec: Execution) -> Result<(Vec<f64>, f64, usize)> {
    if !(lambda > 0.0) {
        return Err(Error::invalid("resolvent parameter must be positive"));
    }
    let n = f.len();
    let apply = |v: &[f64], out: &mut [f64]| {
        g.apply(v, out, exec);
        for (o, vi) in out.iter_mut().zip(v) {
            *o = lambda * vi - *o;
        }
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let fnorm = dot(f, f).sqrt();
    let mut u = vec![0.0; n];
    if fnorm == 0.0 {
        return Ok((u, 0.0, 0));
    }
    let mut r = f.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    let max_iter = 10 * n + 100;
    for it in 1..=max_iter {
        apply(&p, &mut ap);
        let alpha = rr / dot(&p, &ap);
        for i in 0..n {
            u[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= 1e-14 * fnorm {
            // Report the true residual, not the recursive one.
            let mut au = vec![0.0; n];
            apply(&u, &mut au);
            let res = au.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / fnorm;
            return Ok((u, res, it));
        }
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    Err(Error::numeric(
        "conjugate gradient",
        format!("no convergence after {max_iter} iterations, residual {}", rr.sqrt() / fnorm),
    ))
}

/// Both sides of `ℰ(U_λ f, g) = (f,g) − λ(U_λ f, g)` on the window.
///
/// The form is evaluated from the conductivities, independently of the
/// matrix: over window pairs for [`Boundary::Killed`], and on the whole
/// lattice for [`Boundary::FullRateKilled`], where the identity is exact for
/// the window-killed resolvent.
pub fn resolvent_check(
    g: &GeneratorMatrix,
    c: &ConductivityField,
    f: &GridFunction,
    h: &GridFunction,
    lambda: f64,
    margin: f64,
    exec: Execution,
) -> Result<ResolventCheck> {
    let lat = g.window.lattice;
    let m = (margin * lat.rho()).round() as i64;
    let inner = |p: &GridPoint| {
        (0..p.dim()).all(|i| {
            p.coords()[i] - g.window.lo.coords()[i] >= m && g.window.hi.coords()[i] - p.coords()[i] >= m
        })
    };
    if f.support().chain(h.support()).any(|p| !inner(p)) {
        return Err(Error::invalid("test functions must keep the margin to the window boundary"));
    }
    let fv: Vec<f64> = g.points.iter().map(|p| f.get(p)).collect();
    let (u, solver_residual, iterations) = solve_resolvent(g, lambda, &fv, exec)?;
    let ug = GridFunction::from_fn(lat, &g.points, |p| u[g.index_of(p).expect("window point")]);
    let include_outside = g.boundary == Boundary::FullRateKilled;
    let form = bilinear_on_set(c, &ug, h, &g.points, g.lambda, include_outside, exec)?;
    let rhs = f.inner(h) - lambda * ug.inner(h);
    let residual = form.value - rhs;
    let scale = form.value.abs() + rhs.abs();
    Ok(ResolventCheck {
        lhs: form.value,
        rhs,
        residual,
        relative_residual: if scale > 0.0 { residual.abs() / scale } else { 0.0 },
        solver_residual,
        iterations,
        form_error_bound: form.error_bound,
    })
}

// ---------------------------------------------------------------------------
// Diagnostics

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub rho_list: Vec<f64>,
    pub times: Vec<f64>,
    /// Real half-width of every window.
    pub window_radius: f64,
    /// Sources for the on-diagonal supremum lie within this real radius.
    pub probe_radius: f64,
    /// Truncation for the off-diagonal probe.
    pub lambda: Option<f64>,
    /// Largest `|x-y|` used by the off-diagonal probe.
    pub offdiag_max_distance: f64,
    pub holder_time: Option<f64>,
    pub theta1: f64,
    /// Compare against the ρ = 1 kernel on matching integer windows.
    pub scaling: bool,
    pub interaction_radius: Option<i64>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            rho_list: vec![1.0, 2.0, 4.0],
            times: vec![0.1, 0.3, 1.0],
            window_radius: 32.0,
            probe_radius: 0.0,
            lambda: None,
            offdiag_max_distance: 8.0,
            holder_time: Some(0.5),
            theta1: 1.0,
            scaling: true,
            interaction_radius: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnDiagonal {
    pub rho: f64,
    pub t: f64,
    /// `sup_x p(t,x,x) t^{d/α}` over the probed sources.
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolderEstimate {
    pub rho: f64,
    pub t: f64,
    pub beta: f64,
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelDiagnostics {
    pub on_diagonal: Vec<OnDiagonal>,
    /// max/min of the on-diagonal values.
    pub on_diagonal_spread: f64,
    /// `max p(t,x,y) t^{d/α} e^{|x-y|}` for the truncated field, `t ≤ 1`.
    pub off_diagonal: Option<f64>,
    pub holder: Vec<HolderEstimate>,
    /// `max |p_{Y^ρ}(t,x,y) − ρ^d p_Y(ρ^α t, ρx, ρy)|`.
    pub scaling_violation: Option<f64>,
}

/// Numerical probes of the on/off-diagonal bounds, Hölder regularity and
/// the scaling identity. Windows use [`Boundary::FullRateKilled`], so every
/// computed kernel is below the whole-lattice kernel.
pub fn kernel_diagnostics(c: &ConductivityField, cfg: &DiagnosticsConfig, exec: Execution) -> Result<KernelDiagnostics> {
    if c.lattice().rho() != 1.0 {
        return Err(Error::config("diagnostics expect the unscaled (rho = 1) field"));
    }
    if cfg.rho_list.is_empty() || cfg.times.is_empty() {
        return Err(Error::config("rho_list and times must be nonempty"));
    }
    let d = c.dim() as f64;
    let alpha = c.alpha();
    let opts = GeneratorOptions {
        interaction_radius: cfg.interaction_radius,
        ..Default::default()
    };
    let mut on_diagonal = Vec::new();
    let mut holder = Vec::new();
    for &rho in &cfg.rho_list {
        let cr = scale_conductivity(c, rho)?;
        let window = Window::centered(*cr.lattice(), cfg.window_radius)?;
        let g = generator_matrix(&cr, &window, Boundary::FullRateKilled, opts, exec)?;
        let origin = GridPoint::origin(c.dim());
        let sources: Vec<GridPoint> = if cfg.probe_radius > 0.0 {
            cr.lattice().ball(&origin, cfg.probe_radius, DEFAULT_BALL_CAP)?
        } else {
            vec![origin]
        };
        let cols = map_slice(exec, &sources, |s| heat_kernel(&g, &cfg.times, s, Execution::Sequential));
        let cols: Vec<HeatKernelColumn> = cols.into_iter().collect::<Result<_>>()?;
        for (k, &t) in cfg.times.iter().enumerate() {
            let sup = cols
                .iter()
                .map(|col| col.at(k, &col.source).unwrap_or(0.0))
                .fold(0.0, f64::max);
            on_diagonal.push(OnDiagonal { rho, t, value: sup * t.powf(d / alpha) });
        }
        if let Some(t0) = cfg.holder_time {
            holder.push(holder_estimate(&g, &cr, t0, cfg, exec)?);
        }
    }
    let hi = on_diagonal.iter().map(|o| o.value).fold(0.0, f64::max);
    let lo = on_diagonal.iter().map(|o| o.value).fold(f64::INFINITY, f64::min);
    let off_diagonal = match cfg.lambda {
        None => None,
        Some(lam) => Some(off_diagonal_probe(c, lam, cfg, exec)?),
    };
    let scaling_violation = if cfg.scaling {
        Some(scaling_violation(c, cfg, exec)?)
    } else {
        None
    };
    Ok(KernelDiagnostics {
        on_diagonal,
        on_diagonal_spread: if lo > 0.0 { hi / lo } else { f64::INFINITY },
        off_diagonal,
        holder,
        scaling_violation,
    })
}

fn holder_estimate(
    g: &GeneratorMatrix,
    c: &ConductivityField,
    t0: f64,
    cfg: &DiagnosticsConfig,
    exec: Execution,
) -> Result<HolderEstimate> {
    let lat = *c.lattice();
    let rho = lat.rho();
    let dim = c.dim();
    let y = GridPoint::origin(dim);
    let col = heat_kernel(g, &[t0], &y, exec)?;
    // Base point off the peak, increments along the first axis.
    let r = cfg.window_radius;
    let base_steps = (r / 8.0 * rho).round() as i64;
    let mut e = [0i64; 3];
    e[0] = base_steps;
    let x1 = GridPoint::new(&e[..dim]);
    let p1 = col.at(0, &x1).unwrap_or(0.0);
    let lo = (2.0 * cfg.theta1).ceil() as i64;
    let hi = (r / 4.0 * rho).floor() as i64;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for k in lo.max(1)..=hi {
        let mut c2 = e;
        c2[0] = base_steps + k;
        let Some(p2) = col.at(0, &GridPoint::new(&c2[..dim])) else { continue };
        let diff = (p1 - p2).abs();
        if diff > 10.0 * col.error_bounds[0] {
            xs.push((k as f64 / rho).ln());
            ys.push(diff.ln());
        }
    }
    let beta = if xs.len() >= 2 { linear_fit(&xs, &ys).0 } else { f64::NAN };
    Ok(HolderEstimate { rho, t: t0, beta, pairs: xs.len() })
}

fn off_diagonal_probe(c: &ConductivityField, lambda: f64, cfg: &DiagnosticsConfig, exec: Execution) -> Result<f64> {
    let d = c.dim() as f64;
    let mut worst: f64 = 0.0;
    let times: Vec<f64> = cfg.times.iter().copied().filter(|t| *t <= 1.0).collect();
    if times.is_empty() {
        return Ok(0.0);
    }
    for &rho in &cfg.rho_list {
        let cr = scale_conductivity(c, rho)?;
        let window = Window::centered(*cr.lattice(), cfg.window_radius)?;
        let opts = GeneratorOptions { lambda: Some(lambda), ..Default::default() };
        let g = generator_matrix(&cr, &window, Boundary::FullRateKilled, opts, exec)?;
        let x = GridPoint::origin(c.dim());
        let col = heat_kernel(&g, &times, &x, exec)?;
        for (k, &t) in times.iter().enumerate() {
            for (i, y) in col.points.iter().enumerate() {
                let dist = cr.lattice().distance(&x, y);
                if dist > cfg.offdiag_max_distance {
                    continue;
                }
                worst = worst.max(col.values[k][i] * t.powf(d / c.alpha()) * dist.exp());
            }
        }
    }
    Ok(worst)
}

fn scaling_violation(c: &ConductivityField, cfg: &DiagnosticsConfig, exec: Execution) -> Result<f64> {
    let d = c.dim() as i32;
    let base_window = Window::centered(*c.lattice(), cfg.window_radius)?;
    let opts = GeneratorOptions {
        interaction_radius: cfg.interaction_radius,
        ..Default::default()
    };
    let g1 = generator_matrix(c, &base_window, Boundary::FullRateKilled, opts, exec)?;
    let x = GridPoint::origin(c.dim());
    let mut worst: f64 = 0.0;
    for &rho in &cfg.rho_list {
        let cr = scale_conductivity(c, rho)?;
        let window = Window {
            lattice: *cr.lattice(),
            lo: base_window.lo,
            hi: base_window.hi,
        };
        let gr = generator_matrix(&cr, &window, Boundary::FullRateKilled, opts, exec)?;
        let scaled_times: Vec<f64> = cfg.times.iter().map(|t| rho.powf(c.alpha()) * t).collect();
        let a = heat_kernel(&gr, &cfg.times, &x, exec)?;
        let b = heat_kernel(&g1, &scaled_times, &x, exec)?;
        for k in 0..cfg.times.len() {
            for (pa, pb) in a.values[k].iter().zip(&b.values[k]) {
                worst = worst.max((pa - rho.powi(d) * pb).abs());
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conductivity::{isotropic_stable, table_field, ConductivityMeta};
    use crate::lattice::ScaledLattice;
    use std::collections::HashMap;

    fn p(c: &[i64]) -> GridPoint {
        GridPoint::new(c)
    }

    fn two_state(c: f64) -> (ConductivityField, Window) {
        let l = ScaledLattice::integer(1);
        let mut e = HashMap::new();
        e.insert((p(&[0]), p(&[1])), c);
        e.insert((p(&[1]), p(&[0])), c);
        let f = table_field(l, 1.0, e, None, ConductivityMeta::default()).unwrap();
        (f, Window::from_bounds(l, &[0], &[1]).unwrap())
    }

    #[test]
    fn two_point_generator_and_kernel() {
        let (c, w) = two_state(0.7);
        let g = generator_matrix(&c, &w, Boundary::Killed, Default::default(), Execution::Sequential).unwrap();
        assert_eq!(g.to_dense(), vec![vec![-0.7, 0.7], vec![0.7, -0.7]]);
        let times = [0.0, 0.3, 2.0];
        let col = heat_kernel(&g, &times, &p(&[0]), Execution::Sequential).unwrap();
        assert_eq!(col.values[0], vec![1.0, 0.0]);
        for (k, t) in times.iter().enumerate() {
            let exact = (1.0 - (-2.0 * 0.7 * t).exp()) / 2.0;
            assert!((col.values[k][1] - exact).abs() < 1e-10);
        }
    }

    #[test]
    fn full_rate_rows_lose_mass() {
        let c = isotropic_stable(ScaledLattice::integer(1), 1.0, 1.0).unwrap();
        let w = Window::centered(ScaledLattice::integer(1), 4.0).unwrap();
        let g = generator_matrix(&c, &w, Boundary::FullRateKilled, Default::default(), Execution::Sequential).unwrap();
        let k = generator_matrix(&c, &w, Boundary::Killed, Default::default(), Execution::Sequential).unwrap();
        for i in 0..g.len() {
            assert!(g.row_sum(i) < 0.0);
            assert!(k.row_sum(i).abs() < 1e-14);
        }
        let col = heat_kernel(&g, &[0.1, 0.5, 1.0], &p(&[0]), Execution::Sequential).unwrap();
        assert!(col.mass(0) > col.mass(1) && col.mass(1) > col.mass(2));
    }

    #[test]
    fn substepped_series_matches_single_series() {
        let (c, w) = two_state(600.0);
        let g = generator_matrix(&c, &w, Boundary::Killed, Default::default(), Execution::Sequential).unwrap();
        let (v, err) = propagate(&g, 5.0, &[1.0, 0.0], Execution::Sequential).unwrap();
        assert!((v[1] - 0.5).abs() < 1e-10 && err < 1e-10);
    }

    #[test]
    fn two_point_resolvent_by_hand() {
        // (λ − G)u = δ_0 with λ = 1, c = 1: u = (2/3, 1/3).
        let (c, w) = two_state(1.0);
        let g = generator_matrix(&c, &w, Boundary::Killed, Default::default(), Execution::Sequential).unwrap();
        let (u, _, _) = solve_resolvent(&g, 1.0, &[1.0, 0.0], Execution::Sequential).unwrap();
        assert!((u[0] - 2.0 / 3.0).abs() < 1e-14 && (u[1] - 1.0 / 3.0).abs() < 1e-14);
        let f = GridFunction::delta(w.lattice, p(&[0]));
        let r = resolvent_check(&g, &c, &f, &f, 1.0, 0.0, Execution::Sequential).unwrap();
        assert!((r.lhs - 1.0 / 3.0).abs() < 1e-14 && r.residual.abs() < 1e-14);
    }
}
