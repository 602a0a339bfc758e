//! Finite-window checks of the bound, chain and density assumptions.
//!
//! Every verdict holds on the inspected window only; reports say so.

use crate::conductivity::{cone_routing_point, ConductivityField};
use crate::error::{Error, Result};
use crate::exec::{map_slice, Execution};
use crate::lattice::{GridPoint, Window, DEFAULT_BALL_CAP};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, VecDeque};

/// Relative slack for bound comparisons, covering rounding when a field
/// attains its bound with equality.
pub const BOUND_SLACK: f64 = 1e-12;

pub const DEFAULT_NODE_CAP: usize = 1_000_000;

pub const SCOPE_NOTE: &str = "verified on the stated window only";

/// A concrete pair backing a verdict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub x: GridPoint,
    pub y: GridPoint,
    pub value: f64,
    pub bound: f64,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub assumption: String,
    pub passed: bool,
    /// Counterexample on failure; the tightest pair on success, if any.
    pub witness: Option<Witness>,
    pub constants: BTreeMap<String, f64>,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub window: String,
    pub checks: Vec<CheckResult>,
    pub scope_note: String,
}

impl ValidationReport {
    pub fn new(window: &Window) -> Self {
        ValidationReport {
            window: window.describe(),
            checks: Vec::new(),
            scope_note: SCOPE_NOTE.to_string(),
        }
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, assumption: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.assumption == assumption)
    }
}

#[derive(Default)]
struct PairScan {
    asym: Option<Witness>,
    diag: Option<Witness>,
    a2: Option<Witness>,
    tightest: Option<Witness>,
}

/// Symmetry, zero diagonal and `C(x,y) ≤ κ₁|x-y|^{-d-α}` on all window pairs.
pub fn check_bounds_a1_a2(
    c: &ConductivityField,
    window: &Window,
    kappa1: Option<f64>,
    exec: Execution,
) -> Result<ValidationReport> {
    let pts = window.points();
    let kappa1 = kappa1.or(c.meta().kappa1);
    let rows: Vec<Result<PairScan>> = map_slice(exec, &pts, |x| {
        let mut s = PairScan::default();
        let cxx = c.evaluate(x, x)?;
        if cxx != 0.0 {
            s.diag = Some(Witness { x: *x, y: *x, value: cxx, bound: 0.0, note: "nonzero diagonal".into() });
        }
        for y in &pts {
            if y == x {
                continue;
            }
            let cxy = c.evaluate(x, y)?;
            if s.asym.is_none() {
                let cyx = c.evaluate(y, x)?;
                if cxy != cyx {
                    s.asym = Some(Witness { x: *x, y: *y, value: cxy, bound: cyx, note: "C(x,y) != C(y,x)".into() });
                }
            }
            if let Some(k1) = kappa1 {
                let bound = k1 * c.stable_weight(x, y);
                if cxy > bound * (1.0 + BOUND_SLACK) {
                    if s.a2.is_none() {
                        s.a2 = Some(Witness { x: *x, y: *y, value: cxy, bound, note: "exceeds kappa1 bound".into() });
                    }
                } else {
                    let ratio = cxy / bound;
                    if s.tightest.as_ref().is_none_or(|w| ratio > w.value / w.bound) {
                        s.tightest = Some(Witness { x: *x, y: *y, value: cxy, bound, note: "tightest pair".into() });
                    }
                }
            }
        }
        Ok(s)
    });
    let mut asym = None;
    let mut diag = None;
    let mut a2 = None;
    let mut tight: Option<Witness> = None;
    for r in rows {
        let s = r?;
        asym = asym.or(s.asym);
        diag = diag.or(s.diag);
        a2 = a2.or(s.a2);
        if let Some(w) = s.tightest {
            if tight.as_ref().is_none_or(|t| w.value / w.bound > t.value / t.bound) {
                tight = Some(w);
            }
        }
    }
    let mut report = ValidationReport::new(window);
    let a1_fail = asym.or(diag);
    report.checks.push(CheckResult {
        assumption: "A1".into(),
        passed: a1_fail.is_none(),
        witness: a1_fail,
        constants: BTreeMap::new(),
        detail: format!("{} points, all ordered pairs", pts.len()),
    });
    let mut constants = BTreeMap::new();
    match kappa1 {
        Some(k1) => {
            constants.insert("kappa1".into(), k1);
            report.checks.push(CheckResult {
                assumption: "A2".into(),
                passed: a2.is_none(),
                witness: a2.or(tight),
                constants,
                detail: "C(x,y) <= kappa1 |x-y|^(-d-alpha)".into(),
            });
        }
        None => report.checks.push(CheckResult {
            assumption: "A2".into(),
            passed: false,
            witness: None,
            constants,
            detail: "no kappa1 supplied or recorded".into(),
        }),
    }
    Ok(report)
}

/// An (A3) chain `x = z₀, …, z_l = y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainCertificate {
    pub x: GridPoint,
    pub y: GridPoint,
    pub points: Vec<GridPoint>,
    /// `C(zᵢ, zᵢ₊₁)·|x-y|^{d+α}` per edge.
    pub edge_bounds: Vec<f64>,
    /// `max |zᵢ - zᵢ₊₁| / |x - y|`.
    pub theta2: f64,
}

impl ChainCertificate {
    pub fn length(&self) -> usize {
        self.points.len() - 1
    }

    /// Build from explicit points, evaluating every edge.
    pub fn from_points(c: &ConductivityField, points: Vec<GridPoint>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::invalid("a chain needs at least two points"));
        }
        let x = points[0];
        let y = *points.last().expect("nonempty");
        let lat = c.lattice();
        let dxy = lat.distance(&x, &y);
        let scale = dxy.powf(c.dim() as f64 + c.alpha());
        let mut edge_bounds = Vec::with_capacity(points.len() - 1);
        let mut theta2: f64 = 0.0;
        for e in points.windows(2) {
            edge_bounds.push(c.evaluate(&e[0], &e[1])? * scale);
            theta2 = theta2.max(lat.distance(&e[0], &e[1]) / dxy);
        }
        Ok(ChainCertificate { x, y, points, edge_bounds, theta2 })
    }

    pub fn min_edge_bound(&self) -> f64 {
        self.edge_bounds.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Re-evaluate the field on every edge and compare with `κ₂`.
    pub fn revalidate(&self, c: &ConductivityField, kappa2: f64) -> Result<bool> {
        let again = ChainCertificate::from_points(c, self.points.clone())?;
        Ok(again.edge_bounds == self.edge_bounds && self.edge_bounds.iter().all(|&b| b >= kappa2 * (1.0 - BOUND_SLACK)))
    }
}

/// Breadth-first search for a shortest chain whose edges all satisfy
/// `C ≥ κ₂|x-y|^{-d-α}`, among grid points within `factor·|x-y|` of `x`.
///
/// `search_radius_factor` defaults to `(κ₁/κ₂)^{1/(d+α)}·N₀`. `None` means no
/// chain of length `≤ n0` exists inside that ball.
pub fn find_chain_a3(
    c: &ConductivityField,
    x: &GridPoint,
    y: &GridPoint,
    n0: u32,
    kappa2: f64,
    search_radius_factor: Option<f64>,
    node_cap: usize,
) -> Result<Option<ChainCertificate>> {
    if x == y {
        return Err(Error::invalid("chain endpoints must differ"));
    }
    if !(kappa2 > 0.0) || n0 == 0 {
        return Err(Error::invalid("kappa2 and N0 must be positive"));
    }
    let d = c.dim() as f64;
    let factor = match search_radius_factor {
        Some(f) => f,
        None => {
            let k1 = c
                .meta()
                .kappa1
                .ok_or_else(|| Error::config("default search radius needs kappa1"))?;
            (k1 / kappa2).powf(1.0 / (d + c.alpha())) * n0 as f64
        }
    };
    let lat = c.lattice();
    let dxy = lat.distance(x, y);
    // Relative slack so rounding never rejects an edge sitting exactly on the bound.
    let threshold = kappa2 * dxy.powf(-d - c.alpha()) * (1.0 - BOUND_SLACK);
    let radius = factor * dxy;
    let nodes = lat.ball(x, radius, node_cap.min(DEFAULT_BALL_CAP)).map_err(|e| match e {
        Error::ResourceLimit { .. } => Error::resource("chain search nodes", node_cap as u64),
        other => other,
    })?;
    if nodes.len() > node_cap {
        return Err(Error::resource("chain search nodes", node_cap as u64));
    }
    let index: HashMap<GridPoint, usize> = nodes.iter().enumerate().map(|(i, p)| (*p, i)).collect();
    let Some(&target) = index.get(y) else {
        return Ok(None);
    };
    let start = index[x];
    let mut parent = vec![usize::MAX; nodes.len()];
    let mut depth = vec![u32::MAX; nodes.len()];
    depth[start] = 0;
    let mut queue = VecDeque::from([start]);
    while let Some(u) = queue.pop_front() {
        if depth[u] >= n0 {
            continue;
        }
        for (v, pv) in nodes.iter().enumerate() {
            if depth[v] != u32::MAX {
                continue;
            }
            if c.evaluate(&nodes[u], pv)? >= threshold {
                depth[v] = depth[u] + 1;
                parent[v] = u;
                if v == target {
                    let mut path = vec![target];
                    let mut cur = target;
                    while cur != start {
                        cur = parent[cur];
                        path.push(cur);
                    }
                    path.reverse();
                    let pts = path.into_iter().map(|i| nodes[i]).collect();
                    return ChainCertificate::from_points(c, pts).map(Some);
                }
                queue.push_back(v);
            }
        }
    }
    Ok(None)
}

/// How chains are produced for a window check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChainRouter {
    /// Shortest chains by breadth-first search.
    Search {
        #[serde(default)]
        radius_factor: Option<f64>,
    },
    /// The explicit cone routing `x → (x₁ + ⌊(2+1/γ)|x-y|⌋, x₂) → y`, or the
    /// direct edge when it already meets the threshold.
    Cone { gamma: f64 },
}

/// Result of [`check_multiplicity`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiplicityReport {
    pub max_count: u32,
    pub worst_edge: Option<(GridPoint, GridPoint)>,
    pub passed: bool,
}

/// Count, per directed edge, the certificates that traverse it.
pub fn check_multiplicity(certificates: &[ChainCertificate], n0: u32) -> MultiplicityReport {
    let mut counts: HashMap<(GridPoint, GridPoint), u32> = HashMap::new();
    for cert in certificates {
        for e in cert.points.windows(2) {
            *counts.entry((e[0], e[1])).or_insert(0) += 1;
        }
    }
    // Deterministic worst edge: highest count, then smallest edge.
    let worst = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(e, n)| (*e, *n));
    let max_count = worst.map(|w| w.1).unwrap_or(0);
    MultiplicityReport {
        max_count,
        worst_edge: worst.map(|w| w.0),
        passed: max_count <= n0,
    }
}

/// Chains for every ordered pair of distinct window points.
pub fn window_chains(
    c: &ConductivityField,
    window: &Window,
    n0: u32,
    kappa2: f64,
    router: ChainRouter,
    node_cap: usize,
    exec: Execution,
) -> Result<(Vec<ChainCertificate>, Vec<(GridPoint, GridPoint)>)> {
    let pts = window.points();
    let rows: Vec<Result<Vec<(GridPoint, GridPoint, Option<ChainCertificate>)>>> = map_slice(exec, &pts, |x| {
        let mut out = Vec::with_capacity(pts.len());
        for y in &pts {
            if x == y {
                continue;
            }
            let cert = match router {
                ChainRouter::Search { radius_factor } => {
                    find_chain_a3(c, x, y, n0, kappa2, radius_factor, node_cap)?
                }
                ChainRouter::Cone { gamma } => {
                    let direct = ChainCertificate::from_points(c, vec![*x, *y])?;
                    if direct.edge_bounds[0] >= kappa2 * (1.0 - BOUND_SLACK) {
                        Some(direct)
                    } else {
                        let z = cone_routing_point(x, y, gamma);
                        let routed = ChainCertificate::from_points(c, vec![*x, z, *y])?;
                        (routed.min_edge_bound() >= kappa2 * (1.0 - BOUND_SLACK)).then_some(routed)
                    }
                }
            };
            out.push((*x, *y, cert));
        }
        Ok(out)
    });
    let mut certs = Vec::new();
    let mut missing = Vec::new();
    for row in rows {
        for (x, y, cert) in row? {
            match cert {
                Some(cc) => certs.push(cc),
                None => missing.push((x, y)),
            }
        }
    }
    Ok((certs, missing))
}

/// How `N₀` is chosen for the window (A3) check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum N0Policy {
    /// Use the supplied value for both chain length and multiplicity.
    Given(u32),
    /// Chains of length ≤ `max_length`; certify `N₀` as the larger of the
    /// longest chain and the largest edge multiplicity on the window.
    Certify { max_length: u32 },
}

/// Window check of (A3): every ordered pair has a chain, and edge
/// multiplicity is bounded by `N₀`.
pub fn check_chains_a3(
    c: &ConductivityField,
    window: &Window,
    kappa2: f64,
    n0: N0Policy,
    router: ChainRouter,
    node_cap: usize,
    exec: Execution,
) -> Result<(CheckResult, Vec<ChainCertificate>)> {
    let max_len = match n0 {
        N0Policy::Given(n) => n,
        N0Policy::Certify { max_length } => max_length,
    };
    let (certs, missing) = window_chains(c, window, max_len, kappa2, router, node_cap, exec)?;
    let longest = certs.iter().map(|c| c.length()).max().unwrap_or(0) as u32;
    let mult = check_multiplicity(&certs, u32::MAX);
    let certified_n0 = longest.max(mult.max_count);
    let n0_value = match n0 {
        N0Policy::Given(n) => n,
        N0Policy::Certify { .. } => certified_n0,
    };
    let kappa2_certified = certs.iter().map(|c| c.min_edge_bound()).fold(f64::INFINITY, f64::min);
    let theta2 = certs.iter().map(|c| c.theta2).fold(0.0, f64::max);
    let mut constants = BTreeMap::new();
    constants.insert("kappa2".into(), kappa2);
    constants.insert("kappa2_certified".into(), kappa2_certified);
    constants.insert("N0".into(), n0_value as f64);
    constants.insert("max_chain_length".into(), longest as f64);
    constants.insert("max_multiplicity".into(), mult.max_count as f64);
    constants.insert("theta2_empirical".into(), theta2);
    let lat = c.lattice();
    let (passed, witness, detail) = if let Some(&(x, y)) = missing.first() {
        let bound = kappa2 * lat.distance(&x, &y).powf(-(c.dim() as f64) - c.alpha());
        (
            false,
            Some(Witness { x, y, value: 0.0, bound, note: format!("no chain of length <= {max_len}") }),
            format!("{} of {} pairs lack a chain", missing.len(), missing.len() + certs.len()),
        )
    } else if mult.max_count > n0_value {
        let (a, b) = mult.worst_edge.expect("edge exists when count > 0");
        (
            false,
            Some(Witness {
                x: a,
                y: b,
                value: mult.max_count as f64,
                bound: n0_value as f64,
                note: "edge used by more endpoint pairs than N0".into(),
            }),
            format!("multiplicity {} exceeds N0 = {}", mult.max_count, n0_value),
        )
    } else {
        (true, None, format!("{} chains, longest {}", certs.len(), longest))
    };
    Ok((
        CheckResult { assumption: "A3".into(), passed, witness, constants, detail },
        certs,
    ))
}

/// `μ({y ∈ B(x,r) : C(x,y) ≥ κ₃|x-y|^{-d-α}}) / μ(B(x,r))`. The centre is
/// counted in the ball and is never good.
pub fn density_check_a4(c: &ConductivityField, x: &GridPoint, r: f64, kappa3: f64) -> Result<f64> {
    let lat = c.lattice();
    if r < lat.spacing() {
        return Err(Error::invalid("radius must be at least one grid spacing"));
    }
    let ball = lat.ball(x, r, DEFAULT_BALL_CAP)?;
    let mut good = 0usize;
    for y in &ball {
        if y == x {
            continue;
        }
        if c.evaluate(x, y)? >= kappa3 * c.stable_weight(x, y) * (1.0 - BOUND_SLACK) {
            good += 1;
        }
    }
    Ok(good as f64 / ball.len() as f64)
}

/// (A4) at the given centres and radii against `threshold` (default 5/6).
pub fn check_density_a4(
    c: &ConductivityField,
    window: &Window,
    centers: &[GridPoint],
    radii: &[f64],
    kappa3: f64,
    threshold: f64,
) -> Result<CheckResult> {
    let mut worst: Option<(GridPoint, f64, f64)> = None;
    for x in centers {
        for &r in radii {
            let f = density_check_a4(c, x, r, kappa3)?;
            if worst.is_none_or(|w| f < w.2) {
                worst = Some((*x, r, f));
            }
        }
    }
    let mut constants = BTreeMap::new();
    constants.insert("kappa3".into(), kappa3);
    constants.insert("threshold".into(), threshold);
    let Some((x, r, f)) = worst else {
        return Ok(CheckResult {
            assumption: "A4".into(),
            passed: true,
            witness: None,
            constants,
            detail: "no centres tested".into(),
        });
    };
    constants.insert("min_fraction".into(), f);
    let _ = window;
    Ok(CheckResult {
        assumption: "A4".into(),
        passed: f >= threshold,
        witness: Some(Witness {
            x,
            y: x,
            value: f,
            bound: threshold,
            note: format!("good-point fraction in ball of radius {r}"),
        }),
        constants,
        detail: format!("{} centres x {} radii", centers.len(), radii.len()),
    })
}

/// Constants of the necessary density condition implied by (A2)+(A3).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NecessaryConstants {
    /// `(κ₁/κ₂)^{1/(d+α)}`: bound on a chain's first step relative to `|x-y|`.
    pub c1: f64,
    /// Lattice-count ratio `μ(B(r/c₁))·c₁^d / μ(B(r))` at the probe radius.
    pub c2: f64,
    pub c3: f64,
    pub kappa3: f64,
    pub gamma: f64,
}

/// `κ₃ = κ₂(c₂/(2N₀))^{(d+α)/d}` and `γ = c₂/(4c₁^d N₀)` with `c₂` counted
/// on the lattice at radius `r`.
pub fn necessary_constants(c: &ConductivityField, kappa1: f64, kappa2: f64, n0: u32, r: f64) -> Result<NecessaryConstants> {
    let d = c.dim() as f64;
    let c1 = (kappa1 / kappa2).powf(1.0 / (d + c.alpha())).max(1.0);
    let lat = c.lattice();
    let o = GridPoint::origin(c.dim());
    let inner = lat.ball(&o, r / c1, DEFAULT_BALL_CAP)?.len() as f64;
    let outer = lat.ball(&o, r, DEFAULT_BALL_CAP)?.len() as f64;
    let c2 = (inner * c1.powf(d) / outer).min(1.0);
    let n0 = n0 as f64;
    Ok(NecessaryConstants {
        c1,
        c2,
        c3: c2 / (4.0 * c1.powf(d) * n0),
        kappa3: kappa2 * (c2 / (2.0 * n0)).powf((d + c.alpha()) / d),
        gamma: c2 / (4.0 * c1.powf(d) * n0),
    })
}
