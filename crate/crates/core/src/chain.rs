//! Exact simulation of the jump chain and Monte Carlo functionals.
//!
//! The continuous-time chain on `ℤ^d/ρ` jumps `x → y` at rate
//! `C(x,y)·ρ^{-d}`. Nearby targets come from an alias table; far targets are
//! proposed from the dominating law `κ₁ρ^{d+α}|k|_∞^{-d-α}` and accepted by
//! thinning, so every path is exact in law without truncating the support.

use crate::conductivity::{ConductivityField, TailPolicy};
use crate::error::{Error, Result};
use crate::exec::{map_range, Execution};
use crate::lattice::{ball_offsets, cube_offsets, GridPoint, ScaledLattice, DEFAULT_BALL_CAP, MAX_DIM};
use crate::numerics::{linf_tail, mean_se, wilson_interval, GaussRule};
use crate::validators::BOUND_SLACK;
use dashmap::DashMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Arc;

/// Default certified tail mass for [`step_distribution`].
pub const DEFAULT_TAIL_EPSILON: f64 = 1e-6;

/// Offsets beyond this `|k|_∞` are re-proposed; their total dominating mass
/// is below `2^{-52α}` of the far mass.
const MAX_FAR_SHELL: f64 = 4.503_599_627_370_496e15;

// ---------------------------------------------------------------------------
// Seeding

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child master seed for a labelled sub-experiment.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    splitmix64(master ^ splitmix64(tag.wrapping_add(0xD1B5_4A32_D192_ED03)))
}

/// Independent counter-based stream `index` of `master`.
pub fn stream_rng(master: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng
}

/// `Exp(rate)` by inverse CDF.
pub fn exponential<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> f64 {
    let u: f64 = rng.random();
    -(1.0 - u).ln() / rate
}

// ---------------------------------------------------------------------------
// Discrete-time step law

/// The law of one step of the embedded discrete-time chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpDistribution {
    pub source: GridPoint,
    /// Targets with positive probability, lexicographic.
    pub support: Vec<(GridPoint, f64)>,
    /// `C_x = Σ_z C(x,z)`.
    pub total_rate: f64,
    pub total_rate_error: f64,
    /// Certified bound on the probability of targets outside `support`.
    pub tail_mass_bound: f64,
}

/// `P(x → y) = C(x,y)/C_x`, enumerated until the omitted mass is `≤ epsilon`.
///
/// With an exact `C_x` the listed probabilities sum to one minus the omitted
/// mass. Otherwise the truncated sum is used as `C_x`, which renormalises the
/// listed targets, and the omitted mass is bounded through `κ₁`.
pub fn step_distribution(c: &ConductivityField, x: &GridPoint, tail: TailPolicy, epsilon: f64) -> Result<JumpDistribution> {
    let d = c.dim();
    let enumerate = |radius: i64| -> Result<(Vec<(GridPoint, f64)>, f64)> {
        let mut out = Vec::new();
        let mut sum = 0.0;
        for h in cube_offsets(d, radius) {
            if h.is_origin() {
                continue;
            }
            let y = x.add(&h);
            let v = c.evaluate(x, &y)?;
            if v > 0.0 {
                out.push((y, v));
                sum += v;
            }
        }
        Ok((out, sum))
    };
    let exact = match tail {
        TailPolicy::Truncate { .. } => None,
        TailPolicy::ClosedForm => Some(c.total_rate(x, TailPolicy::ClosedForm)?.value),
        TailPolicy::Auto => c.closed_form_total(),
    };
    let (support, partial, radius_bound) = if let Some(r) = c.finite_range() {
        let (s, sum) = enumerate(r)?;
        (s, sum, 0.0)
    } else {
        let mut radius = match tail {
            TailPolicy::Truncate { radius } => radius,
            _ => 8,
        };
        loop {
            let (s, sum) = enumerate(radius)?;
            let bound = c.tail_bound(radius)?;
            let denom = exact.unwrap_or(sum);
            let fixed = matches!(tail, TailPolicy::Truncate { .. });
            if fixed || (denom > 0.0 && bound / denom <= epsilon) {
                break (s, sum, bound);
            }
            if (2 * radius + 1) as f64 > (DEFAULT_BALL_CAP as f64).powf(1.0 / d as f64) {
                return Err(Error::resource("step distribution support", DEFAULT_BALL_CAP as u64));
            }
            radius *= 2;
        }
    };
    let total = exact.unwrap_or(partial);
    if total <= 0.0 {
        return Err(Error::Absorbing(x.coords().to_vec()));
    }
    let support: Vec<(GridPoint, f64)> = support.into_iter().map(|(y, v)| (y, v / total)).collect();
    let tail_mass_bound = match exact {
        Some(e) => ((e - partial) / e).max(0.0),
        None => radius_bound / partial,
    };
    Ok(JumpDistribution {
        source: *x,
        support,
        total_rate: total,
        total_rate_error: if exact.is_some() { 0.0 } else { radius_bound },
        tail_mass_bound,
    })
}

// ---------------------------------------------------------------------------
// Sampler

/// Targets within the near radius of one state.
struct NearTable {
    offsets: Vec<GridPoint>,
    alias: Option<WeightedAliasIndex<f64>>,
    /// `Σ C(x, x+k)` over the table.
    total: f64,
}

impl NearTable {
    fn build(c: &ConductivityField, x: &GridPoint, offsets: &[GridPoint]) -> Result<Self> {
        let mut keep = Vec::with_capacity(offsets.len());
        let mut weights = Vec::with_capacity(offsets.len());
        for h in offsets {
            let v = c.evaluate(x, &x.add(h))?;
            if v > 0.0 {
                keep.push(*h);
                weights.push(v);
            }
        }
        let total: f64 = weights.iter().sum();
        let alias = if keep.is_empty() {
            None
        } else {
            Some(WeightedAliasIndex::new(weights).map_err(|e| Error::numeric("alias table", e.to_string()))?)
        };
        Ok(NearTable { offsets: keep, alias, total })
    }
}

/// Dominating proposal for targets with `|k|_∞ > radius`.
#[derive(Clone, Copy, Debug)]
struct FarProposal {
    d: usize,
    alpha: f64,
    radius: i64,
    /// `κ₁ρ^{d+α}`.
    bound: f64,
    /// Total dominating conductivity beyond `radius`.
    total: f64,
}

impl FarProposal {
    /// `m ≥ radius+1` with probability `∝ S_d(m) m^{-d-α}`.
    fn sample_shell<R: Rng + ?Sized>(&self, rng: &mut R) -> i64 {
        let a = self.alpha;
        let x_m = self.radius as f64 + 0.5;
        loop {
            let u: f64 = 1.0 - rng.random::<f64>();
            let cont = x_m * u.powf(-1.0 / a);
            if !(cont < MAX_FAR_SHELL) {
                continue;
            }
            let m = (cont + 0.5).floor();
            // m^{-1-α} against the envelope mass of [m-½, m+½).
            let lo = m - 0.5;
            let cell = lo.powf(-a) * (-(-a * (1.0 / lo).ln_1p()).exp_m1()) / a;
            let mut accept = m.powf(-1.0 - a) / cell;
            if self.d == 3 {
                let r1 = (self.radius + 1) as f64;
                accept *= (24.0 + 2.0 / (m * m)) / (24.0 + 2.0 / (r1 * r1));
            }
            if rng.random::<f64>() < accept {
                return m as i64;
            }
        }
    }

    /// Uniform point on `{|k|_∞ = m}`.
    fn sample_on_shell<R: Rng + ?Sized>(&self, m: i64, rng: &mut R) -> GridPoint {
        let d = self.d;
        loop {
            let mut c = [0i64; MAX_DIM];
            let face = rng.random_range(0..d);
            let sign = if rng.random::<bool>() { 1 } else { -1 };
            for (i, ci) in c.iter_mut().enumerate().take(d) {
                *ci = if i == face { sign * m } else { rng.random_range(-m..=m) };
            }
            let maximal = c[..d].iter().filter(|v| v.abs() == m).count();
            if maximal == 1 || rng.random_range(0..maximal) == 0 {
                return GridPoint::new(&c[..d]);
            }
        }
    }
}

/// Knobs for [`JumpSampler`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// `|k|_∞` radius of the alias tables; `None` picks by dimension.
    pub near_radius: Option<i64>,
    /// Maximum number of cached per-state tables (non-stationary fields).
    pub cache_states: Option<usize>,
}

enum NearSource {
    Shared(Arc<NearTable>),
    PerState {
        offsets: Vec<GridPoint>,
        cache: DashMap<GridPoint, Arc<NearTable>>,
        cap: usize,
    },
}

/// One transition of the chain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    /// Time to the next (possibly fictitious) event; infinite when absorbed.
    pub dt: f64,
    /// `None` for a rejected far proposal.
    pub target: Option<GridPoint>,
}

/// Exact event sampler for a field, optionally with jumps longer than `λ`
/// (real units) removed.
pub struct JumpSampler {
    field: ConductivityField,
    /// `(λρ)²` in lattice steps.
    lambda_sq: Option<f64>,
    lambda: Option<f64>,
    near: NearSource,
    far: Option<FarProposal>,
    rate_factor: f64,
}

impl JumpSampler {
    pub fn new(c: &ConductivityField, lambda: Option<f64>, cfg: SamplerConfig) -> Result<Self> {
        let d = c.dim();
        if let Some(l) = lambda {
            if !(l > 0.0) {
                return Err(Error::invalid("truncation lambda must be positive"));
            }
        }
        let rho = c.lattice().rho();
        let lambda_steps = lambda.map(|l| l * rho);
        let stationary = c.is_stationary();
        let default_radius = match (stationary, d) {
            (true, 1) => 256,
            (true, 2) => 32,
            (true, _) => 8,
            (false, 1) => 64,
            (false, 2) => 8,
            (false, _) => 3,
        };
        let mut radius = cfg.near_radius.unwrap_or(default_radius).max(1);
        let mut needs_far = true;
        if let Some(r) = c.finite_range() {
            radius = r.max(1);
            needs_far = false;
        }
        if let Some(ls) = lambda_steps {
            let lr = (ls * (1.0 + 1e-12)).floor() as i64;
            if lr <= radius {
                radius = lr.max(0);
                needs_far = false;
            }
        }
        let mut offsets = match lambda_steps {
            Some(ls) if !needs_far => ball_offsets(d, ls, DEFAULT_BALL_CAP)?,
            _ => cube_offsets(d, radius),
        };
        offsets.retain(|h| !h.is_origin());
        if let Some(ls) = lambda_steps {
            let lim = ls * ls * (1.0 + 1e-12);
            offsets.retain(|h| h.norm_sq() as f64 <= lim);
        }
        let far = if needs_far {
            let bound = c
                .step_bound()
                .ok_or_else(|| Error::config("kappa1 is required to simulate an infinite-range field"))?;
            let s = d as f64 + c.alpha();
            Some(FarProposal {
                d,
                alpha: c.alpha(),
                radius,
                bound,
                total: bound * linf_tail(d, s, radius),
            })
        } else {
            None
        };
        let near = if stationary {
            NearSource::Shared(Arc::new(NearTable::build(c, &GridPoint::origin(d), &offsets)?))
        } else {
            NearSource::PerState {
                offsets,
                cache: DashMap::new(),
                cap: cfg.cache_states.unwrap_or(1 << 20),
            }
        };
        Ok(JumpSampler {
            field: c.clone(),
            lambda_sq: lambda_steps.map(|l| l * l * (1.0 + 1e-12)),
            lambda,
            near,
            far,
            rate_factor: c.jump_rate_factor(),
        })
    }

    pub fn field(&self) -> &ConductivityField {
        &self.field
    }

    pub fn lattice(&self) -> &ScaledLattice {
        self.field.lattice()
    }

    pub fn lambda(&self) -> Option<f64> {
        self.lambda
    }

    fn table(&self, x: &GridPoint) -> Result<Arc<NearTable>> {
        match &self.near {
            NearSource::Shared(t) => Ok(t.clone()),
            NearSource::PerState { offsets, cache, cap } => {
                if let Some(t) = cache.get(x) {
                    return Ok(t.clone());
                }
                let t = Arc::new(NearTable::build(&self.field, x, offsets)?);
                if cache.len() < *cap {
                    cache.insert(*x, t.clone());
                }
                Ok(t)
            }
        }
    }

    /// Event rate (near + dominating far) at `x`, in 1/time.
    pub fn event_rate(&self, x: &GridPoint) -> Result<f64> {
        let near = self.table(x)?.total;
        Ok((near + self.far.map_or(0.0, |f| f.total)) * self.rate_factor)
    }

    /// Draw the next event from state `x`.
    pub fn step<R: Rng + ?Sized>(&self, x: &GridPoint, rng: &mut R) -> Result<Transition> {
        let table = self.table(x)?;
        let far_total = self.far.map_or(0.0, |f| f.total);
        let total = table.total + far_total;
        if total <= 0.0 {
            return Ok(Transition { dt: f64::INFINITY, target: None });
        }
        let dt = exponential(rng, total * self.rate_factor);
        let pick: f64 = rng.random::<f64>() * total;
        if pick < table.total {
            let alias = table.alias.as_ref().expect("positive total has a table");
            let h = table.offsets[alias.sample(rng)];
            return Ok(Transition { dt, target: Some(x.add(&h)) });
        }
        let far = self.far.expect("far mass implies a far proposal");
        let m = far.sample_shell(rng);
        let h = far.sample_on_shell(m, rng);
        if let Some(l2) = self.lambda_sq {
            if h.norm_sq() as f64 > l2 {
                return Ok(Transition { dt, target: None });
            }
        }
        let y = x.add(&h);
        let v = self.field.evaluate(x, &y)?;
        let dominating = far.bound * (m as f64).powf(-(far.d as f64) - far.alpha);
        if v > dominating * (1.0 + BOUND_SLACK) {
            return Err(Error::Contract(format!(
                "C({:?},{:?}) = {v} exceeds the kappa1 bound {dominating}",
                x, y
            )));
        }
        if rng.random::<f64>() * dominating < v {
            Ok(Transition { dt, target: Some(y) })
        } else {
            Ok(Transition { dt, target: None })
        }
    }

    /// Run from `x0` until `t_max`, calling `on_jump(time, from, to)` per real
    /// jump. Returns the state at `t_max`.
    pub fn run<R: Rng + ?Sized>(
        &self,
        x0: &GridPoint,
        t_max: f64,
        rng: &mut R,
        mut on_jump: impl FnMut(f64, &GridPoint, &GridPoint) -> Result<bool>,
    ) -> Result<GridPoint> {
        let mut t = 0.0;
        let mut x = *x0;
        loop {
            let tr = self.step(&x, rng)?;
            t += tr.dt;
            if t > t_max {
                return Ok(x);
            }
            if let Some(y) = tr.target {
                let keep_going = on_jump(t, &x, &y)?;
                x = y;
                if !keep_going {
                    return Ok(x);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Paths

/// One càdlàg trajectory: the state is `start` until the first event time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSample {
    pub start: GridPoint,
    pub events: Vec<(f64, GridPoint)>,
    pub horizon: f64,
    pub seed: u64,
    pub stream: u64,
    pub truncation_lambda: Option<f64>,
}

impl PathSample {
    /// State at time `t` (right-continuous).
    pub fn state_at(&self, t: f64) -> GridPoint {
        let i = self.events.partition_point(|(s, _)| *s <= t);
        if i == 0 {
            self.start
        } else {
            self.events[i - 1].1
        }
    }

    /// Little-endian binary log: per record an `f64` time and `d` `i64`
    /// coordinates, starting with a time-zero record of the start state.
    pub fn encode(&self, out: &mut Vec<u8>) {
        let mut put = |t: f64, p: &GridPoint| {
            out.extend_from_slice(&t.to_le_bytes());
            for c in p.coords() {
                out.extend_from_slice(&c.to_le_bytes());
            }
        };
        put(0.0, &self.start);
        for (t, p) in &self.events {
            put(*t, p);
        }
    }
}

pub fn sample_path_with(sampler: &JumpSampler, x0: &GridPoint, t_max: f64, seed: u64, stream: u64) -> Result<PathSample> {
    if !(t_max > 0.0) {
        return Err(Error::invalid("t_max must be positive"));
    }
    let mut rng = stream_rng(seed, stream);
    let mut events = Vec::new();
    sampler.run(x0, t_max, &mut rng, |t, _, y| {
        events.push((t, *y));
        Ok(true)
    })?;
    Ok(PathSample {
        start: *x0,
        events,
        horizon: t_max,
        seed,
        stream,
        truncation_lambda: sampler.lambda(),
    })
}

/// A path of the (optionally λ-truncated) chain, deterministic in `seed`.
pub fn sample_path(c: &ConductivityField, x0: &GridPoint, t_max: f64, lambda: Option<f64>, seed: u64) -> Result<PathSample> {
    let sampler = JumpSampler::new(c, lambda, SamplerConfig::default())?;
    sample_path_with(&sampler, x0, t_max, seed, 0)
}

/// Closed ball in real coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallDomain {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl BallDomain {
    pub fn contains(&self, lat: &ScaledLattice, p: &GridPoint) -> bool {
        let r = lat.real(p);
        let d2: f64 = self.center.iter().zip(r.iter()).map(|(c, x)| (x - c) * (x - c)).sum();
        d2 <= self.radius * self.radius * (1.0 + 1e-12)
    }
}

/// A time, or the horizon with `censored` set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Censored {
    pub value: f64,
    pub censored: bool,
}

/// First exit time `τ` from `domain` and first entrance time `σ` into
/// `target` (zero when the start already qualifies).
pub fn exit_and_hit(
    path: &PathSample,
    lat: &ScaledLattice,
    domain: &BallDomain,
    target: Option<&dyn Fn(&GridPoint) -> bool>,
) -> (Censored, Option<Censored>) {
    let censor = Censored { value: path.horizon, censored: true };
    let tau = if !domain.contains(lat, &path.start) {
        Censored { value: 0.0, censored: false }
    } else {
        path.events
            .iter()
            .find(|(_, p)| !domain.contains(lat, p))
            .map(|(t, _)| Censored { value: *t, censored: false })
            .unwrap_or(censor)
    };
    let sigma = target.map(|hit| {
        if hit(&path.start) {
            Censored { value: 0.0, censored: false }
        } else {
            path.events
                .iter()
                .find(|(_, p)| hit(p))
                .map(|(t, _)| Censored { value: *t, censored: false })
                .unwrap_or(censor)
        }
    });
    (tau, sigma)
}

// ---------------------------------------------------------------------------
// Exit probabilities

/// First exit times from the closed ball `B(x, radius)`, censored at `horizon`.
/// Also records, for each path, the distance from `x` of the exit position.
pub fn exit_samples(
    sampler: &JumpSampler,
    x: &GridPoint,
    radius: f64,
    horizon: f64,
    paths: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<(Censored, f64)>> {
    let lat = *sampler.lattice();
    let rows = map_range(exec, paths, |i| {
        let mut rng = stream_rng(seed, i as u64);
        let mut out = (Censored { value: horizon, censored: true }, 0.0);
        let mut t_exit = None;
        sampler.run(x, horizon, &mut rng, |t, _, y| {
            let dist = lat.distance(x, y);
            if dist > radius * (1.0 + 1e-12) {
                t_exit = Some((t, dist));
                return Ok(false);
            }
            Ok(true)
        })?;
        if let Some((t, dist)) = t_exit {
            out = (Censored { value: t, censored: false }, dist);
        }
        Ok(out)
    });
    rows.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BigJumpSplit {
    pub inner_radius: f64,
    pub outer_radius: f64,
    /// Fraction of paths whose exit from the inner ball lands outside the
    /// outer ball.
    pub fraction: f64,
    pub ci: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitEstimate {
    pub p_hat: f64,
    pub ci: (f64, f64),
    pub ci_halfwidth: f64,
    pub paths: usize,
    pub big_jump: Option<BigJumpSplit>,
}

/// `P^x(τ(B(x, aR)) < γR^α)` with a Wilson interval; optionally the fraction
/// of exits from `B(x, r)` that jump straight out of `B(x, s)`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_exit_prob(
    c: &ConductivityField,
    x: &GridPoint,
    r_big: f64,
    gamma: f64,
    a: f64,
    paths: usize,
    seed: u64,
    big_jump: Option<(f64, f64)>,
    exec: Execution,
) -> Result<ExitEstimate> {
    if paths < 100 {
        return Err(Error::invalid("exit estimates need at least 100 paths"));
    }
    let sampler = JumpSampler::new(c, None, SamplerConfig::default())?;
    let horizon = gamma * r_big.powf(c.alpha());
    let hits = if horizon > 0.0 {
        exit_samples(&sampler, x, a * r_big, horizon, paths, seed, exec)?
            .iter()
            .filter(|(t, _)| !t.censored && t.value < horizon)
            .count()
    } else {
        0
    };
    let ci = wilson_interval(hits as u64, paths as u64);
    let big_jump = match big_jump {
        None => None,
        Some((r, s)) => {
            // Exit from the small ball is a.s. finite; the cap only guards
            // against pathological fields.
            let cap = 1e3 * r.powf(c.alpha()).max(1.0);
            let ex = exit_samples(&sampler, x, r, cap, paths, derive_seed(seed, 1), exec)?;
            let direct = ex.iter().filter(|(t, dist)| !t.censored && *dist > s).count();
            Some(BigJumpSplit {
                inner_radius: r,
                outer_radius: s,
                fraction: direct as f64 / paths as f64,
                ci: wilson_interval(direct as u64, paths as u64),
            })
        }
    };
    Ok(ExitEstimate {
        p_hat: hits as f64 / paths as f64,
        ci,
        ci_halfwidth: 0.5 * (ci.1 - ci.0),
        paths,
        big_jump,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaTilde {
    pub gamma: Option<f64>,
    pub grid: Vec<(f64, f64)>,
}

/// Largest `γ` on `grid` whose estimated `P^x(τ(B(x,R)) < γR^α)` is at most
/// 1/2. All grid values share the same simulated exit times.
pub fn estimate_gamma_tilde(
    c: &ConductivityField,
    x: &GridPoint,
    r_big: f64,
    grid: &[f64],
    paths: usize,
    seed: u64,
    exec: Execution,
) -> Result<GammaTilde> {
    let sampler = JumpSampler::new(c, None, SamplerConfig::default())?;
    let gmax = grid.iter().copied().fold(0.0, f64::max);
    let scale = r_big.powf(c.alpha());
    let ex = exit_samples(&sampler, x, r_big, gmax * scale, paths, seed, exec)?;
    let mut rows = Vec::new();
    let mut best = None;
    for &g in grid {
        let h = g * scale;
        let p = ex.iter().filter(|(t, _)| !t.censored && t.value < h).count() as f64 / paths as f64;
        rows.push((g, p));
        if p <= 0.5 && best.is_none_or(|b| g > b) {
            best = Some(g);
        }
    }
    Ok(GammaTilde { gamma: best, grid: rows })
}

// ---------------------------------------------------------------------------
// Lévy system

type NearFn = dyn Fn(f64, &GridPoint, &GridPoint) -> f64 + Send + Sync;
type FarFn = dyn Fn(f64, &GridPoint) -> f64 + Send + Sync;

/// A bounded jump functional `f(s, from, to)`, vanishing on the diagonal.
///
/// Jumps with real length `≤ near_radius` use `near`; longer jumps take the
/// value `far(s, from)`, which lets the rate integral use `C_x`.
#[derive(Clone)]
pub struct JumpFunctional {
    pub name: String,
    pub near_radius: f64,
    pub near: Arc<NearFn>,
    pub far: Option<Arc<FarFn>>,
    /// `sup |f|`; samples above it are contract violations.
    pub bound: f64,
    pub time_dependent: bool,
}

impl JumpFunctional {
    pub fn zero() -> Self {
        JumpFunctional {
            name: "zero".into(),
            near_radius: 0.0,
            near: Arc::new(|_, _, _| 0.0),
            far: None,
            bound: 0.0,
            time_dependent: false,
        }
    }

    fn value(&self, lat: &ScaledLattice, s: f64, x: &GridPoint, y: &GridPoint) -> Result<f64> {
        let v = if lat.distance(x, y) <= self.near_radius * (1.0 + 1e-12) {
            (self.near)(s, x, y)
        } else {
            self.far.as_ref().map_or(0.0, |f| f(s, x))
        };
        if !(v.abs() <= self.bound * (1.0 + 1e-12)) {
            return Err(Error::Contract(format!("functional `{}` sample {v} exceeds bound {}", self.name, self.bound)));
        }
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevyCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub lhs_se: f64,
    pub rhs_se: f64,
    /// Standard error of the paired difference.
    pub combined_se: f64,
    /// Certified bias of the rate side from tail truncation.
    pub rhs_bias_bound: f64,
    pub paths: usize,
}

impl LevyCheck {
    pub fn agrees(&self, sigmas: f64) -> bool {
        (self.lhs - self.rhs).abs() <= sigmas * self.combined_se + self.rhs_bias_bound
    }
}

/// Per-state rate integrand `Σ_y f(s,x,y) C(x,y) ρ^{-d}`.
struct RateIntegrand<'a> {
    c: &'a ConductivityField,
    f: &'a JumpFunctional,
    near_offsets: Vec<GridPoint>,
    far_policy: TailPolicy,
}

impl RateIntegrand<'_> {
    fn eval(&self, s: f64, x: &GridPoint) -> Result<(f64, f64)> {
        let lat = self.c.lattice();
        let mut acc = 0.0;
        let mut near_total = 0.0;
        for h in &self.near_offsets {
            let y = x.add(h);
            let cxy = self.c.evaluate(x, &y)?;
            if cxy == 0.0 {
                continue;
            }
            near_total += cxy;
            acc += self.f.value(lat, s, x, &y)? * cxy;
        }
        let mut bias = 0.0;
        if let Some(far) = &self.f.far {
            let fv = far(s, x);
            if fv != 0.0 {
                let total = self.c.total_rate(x, self.far_policy)?;
                acc += fv * (total.value - near_total);
                bias = fv.abs() * total.error_bound;
            }
        }
        let w = self.c.jump_rate_factor();
        Ok((acc * w, bias * w))
    }
}

/// Estimate both sides of `E Σ_{s≤T} f(s,Y_{s-},Y_s) = E ∫_0^T Σ_y f(s,Y_s,y) C(Y_s,y) ρ^{-d} ds`
/// for each functional, on common paths.
pub fn levy_system_check(
    c: &ConductivityField,
    functionals: &[JumpFunctional],
    x0: &GridPoint,
    horizon: f64,
    paths: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<LevyCheck>> {
    if !(horizon > 0.0) {
        return Err(Error::invalid("horizon must be positive"));
    }
    let sampler = JumpSampler::new(c, None, SamplerConfig::default())?;
    let lat = *c.lattice();
    let integrands: Vec<RateIntegrand> = functionals
        .iter()
        .map(|f| {
            let mut near_offsets = ball_offsets(c.dim(), f.near_radius * lat.rho(), DEFAULT_BALL_CAP)?;
            near_offsets.retain(|h| !h.is_origin());
            Ok(RateIntegrand { c, f, near_offsets, far_policy: TailPolicy::Auto })
        })
        .collect::<Result<_>>()?;
    let rule = GaussRule::new(8);
    let k = functionals.len();
    let rows: Vec<Result<(Vec<f64>, Vec<f64>, Vec<f64>)>> = map_range(exec, paths, |i| {
        let mut rng = stream_rng(seed, i as u64);
        let mut lhs = vec![0.0; k];
        let mut rhs = vec![0.0; k];
        let mut bias = vec![0.0; k];
        let mut cache: Vec<HashMap<GridPoint, (f64, f64)>> = vec![HashMap::new(); k];
        let mut holding = |from: f64, to: f64, x: &GridPoint, rhs: &mut [f64], bias: &mut [f64]| -> Result<()> {
            for j in 0..k {
                if functionals[j].time_dependent {
                    for (s, w) in rule.mapped(from, to) {
                        let (v, b) = integrands[j].eval(s, x)?;
                        rhs[j] += w * v;
                        bias[j] += w * b;
                    }
                } else {
                    let (v, b) = match cache[j].get(x) {
                        Some(e) => *e,
                        None => {
                            let e = integrands[j].eval(0.0, x)?;
                            cache[j].insert(*x, e);
                            e
                        }
                    };
                    rhs[j] += (to - from) * v;
                    bias[j] += (to - from) * b;
                }
            }
            Ok(())
        };
        let mut last_t = 0.0;
        let end = sampler.run(x0, horizon, &mut rng, |t, from, to| {
            holding(last_t, t, from, &mut rhs, &mut bias)?;
            for j in 0..k {
                lhs[j] += functionals[j].value(&lat, t, from, to)?;
            }
            last_t = t;
            Ok(true)
        })?;
        holding(last_t, horizon, &end, &mut rhs, &mut bias)?;
        Ok((lhs, rhs, bias))
    });
    let mut per = vec![(Vec::with_capacity(paths), Vec::with_capacity(paths), Vec::with_capacity(paths), 0.0f64); k];
    for row in rows {
        let (l, r, b) = row?;
        for j in 0..k {
            per[j].0.push(l[j]);
            per[j].1.push(r[j]);
            per[j].2.push(l[j] - r[j]);
            per[j].3 = per[j].3.max(b[j]);
        }
    }
    Ok(functionals
        .iter()
        .zip(per)
        .map(|(f, (l, r, diff, b))| {
            let (lm, lse) = mean_se(&l);
            let (rm, rse) = mean_se(&r);
            let (_, dse) = mean_se(&diff);
            LevyCheck {
                name: f.name.clone(),
                lhs: lm,
                rhs: rm,
                lhs_se: lse,
                rhs_se: rse,
                combined_se: dse,
                rhs_bias_bound: b,
                paths,
            }
        })
        .collect())
}

/// Positions at time `t` of independent paths started at `x0`.
pub fn sample_marginals(
    sampler: &JumpSampler,
    x0: &GridPoint,
    t: f64,
    paths: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<GridPoint>> {
    map_range(exec, paths, |i| {
        let mut rng = stream_rng(seed, i as u64);
        sampler.run(x0, t, &mut rng, |_, _, _| Ok(true))
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conductivity::{isotropic_stable, table_field, ConductivityMeta};
    use std::f64::consts::PI;

    fn p(c: &[i64]) -> GridPoint {
        GridPoint::new(c)
    }

    fn nearest_neighbour() -> ConductivityField {
        let l = ScaledLattice::integer(1);
        let mut e = HashMap::new();
        for x in -50..50 {
            e.insert((p(&[x]), p(&[x + 1])), 1.0);
            e.insert((p(&[x + 1]), p(&[x])), 1.0);
        }
        table_field(l, 1.0, e, None, ConductivityMeta::default()).unwrap()
    }

    #[test]
    fn symmetric_two_neighbour_step() {
        let c = nearest_neighbour();
        let s = step_distribution(&c, &p(&[0]), TailPolicy::Auto, 1e-6).unwrap();
        assert_eq!(s.support, vec![(p(&[-1]), 0.5), (p(&[1]), 0.5)]);
        assert_eq!(s.tail_mass_bound, 0.0);
    }

    #[test]
    fn basel_normalised_step() {
        let c = isotropic_stable(ScaledLattice::integer(1), 1.0, 1.0).unwrap();
        let s = step_distribution(&c, &p(&[0]), TailPolicy::Auto, 1e-6).unwrap();
        let p1 = s.support.iter().find(|(y, _)| *y == p(&[1])).unwrap().1;
        assert!((p1 - 3.0 / (PI * PI)).abs() < 1e-12);
        let mass: f64 = s.support.iter().map(|e| e.1).sum();
        assert!((mass + s.tail_mass_bound - 1.0).abs() < 1e-12);
        assert!(s.tail_mass_bound <= 1e-6);
    }

    #[test]
    fn paths_are_reproducible_and_cadlag() {
        let c = isotropic_stable(ScaledLattice::integer(1), 1.0, 1.0).unwrap();
        let a = sample_path(&c, &p(&[0]), 5.0, None, 42).unwrap();
        let b = sample_path(&c, &p(&[0]), 5.0, None, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.events.windows(2).all(|w| w[0].0 < w[1].0));
        assert!(a.events.first().is_none_or(|e| e.0 > 0.0));
        let mut prev = a.start;
        for (_, s) in &a.events {
            assert_ne!(*s, prev);
            prev = *s;
        }
        assert_eq!(a.state_at(0.0), a.start);
    }

    #[test]
    fn far_shell_sampler_matches_target_law() {
        // d = 2, α = 1, R = 4: P(m = 5) ∝ 8·5·5^{-3} against the tail sum.
        let f = FarProposal { d: 2, alpha: 1.0, radius: 4, bound: 1.0, total: 0.0 };
        let mut rng = stream_rng(7, 0);
        let n = 200_000;
        let hits = (0..n).filter(|_| f.sample_shell(&mut rng) == 5).count();
        let expect = 8.0 * 5f64.powi(-2) / linf_tail(2, 3.0, 4);
        let se = (expect * (1.0 - expect) / n as f64).sqrt();
        assert!(((hits as f64 / n as f64) - expect).abs() < 4.0 * se);
    }

    #[test]
    fn planted_path_functionals() {
        let lat = ScaledLattice::integer(1);
        let path = PathSample {
            start: p(&[0]),
            events: vec![(0.5, p(&[1])), (1.0, p(&[4])), (2.0, p(&[2]))],
            horizon: 3.0,
            seed: 0,
            stream: 0,
            truncation_lambda: None,
        };
        let dom = BallDomain { center: vec![0.0], radius: 2.0 };
        let target = |q: &GridPoint| *q == p(&[1]);
        let (tau, sigma) = exit_and_hit(&path, &lat, &dom, Some(&target));
        assert_eq!(tau, Censored { value: 1.0, censored: false });
        assert_eq!(sigma.unwrap(), Censored { value: 0.5, censored: false });
        let whole = BallDomain { center: vec![0.0], radius: 100.0 };
        assert!(exit_and_hit(&path, &lat, &whole, None).0.censored);
    }

    #[test]
    fn zero_functional_is_exactly_zero() {
        let c = isotropic_stable(ScaledLattice::integer(1), 1.0, 1.0).unwrap();
        let r = levy_system_check(&c, &[JumpFunctional::zero()], &p(&[0]), 1.0, 50, 3, Execution::Sequential).unwrap();
        assert_eq!((r[0].lhs, r[0].rhs), (0.0, 0.0));
    }
}
