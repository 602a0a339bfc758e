//! Scaling-limit diagnostics: the multilinear extension operator, marginal
//! CLT comparisons and Aldous-type tightness probes.

use crate::chain::{derive_seed, sample_path_with, stream_rng, JumpSampler, SamplerConfig};
use crate::conductivity::ConductivityField;
use crate::error::{Error, Result};
use crate::exec::{map_range, Execution};
use crate::kernel::Kernel;
use crate::lattice::{GridFunction, GridPoint, ScaledLattice, MAX_DIM};
use crate::numerics::{cauchy_cdf, ks_distance, wilson_interval, GaussRule};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::time::Instant;

// ---------------------------------------------------------------------------
// Extension operator

/// Multilinear interpolation of a grid function on `ℤ^d/n` over each cube.
#[derive(Clone, Debug)]
pub struct ExtensionFunction {
    pub base: GridFunction,
}

/// `E_n f`.
pub fn extend_to_continuum(f: &GridFunction) -> ExtensionFunction {
    ExtensionFunction { base: f.clone() }
}

impl ExtensionFunction {
    fn lattice(&self) -> &ScaledLattice {
        &self.base.lattice
    }

    /// Cube anchor and fractional position of `x`.
    fn locate(&self, x: &[f64]) -> Result<(GridPoint, [f64; MAX_DIM])> {
        let lat = self.lattice();
        if x.len() != lat.dim() {
            return Err(Error::invalid("query dimension differs from the lattice"));
        }
        let n = lat.rho();
        let mut a = [0i64; MAX_DIM];
        let mut t = [0.0; MAX_DIM];
        for i in 0..x.len() {
            let s = x[i] * n;
            let fl = s.floor();
            a[i] = fl as i64;
            t[i] = s - fl;
        }
        Ok((GridPoint::new(&a[..x.len()]), t))
    }

    /// Cube vertices with their multilinear weights; zero-weight vertices
    /// are skipped so exact grid queries need only that point.
    fn vertices(&self, x: &[f64]) -> Result<Vec<(GridPoint, f64)>> {
        let (a, t) = self.locate(x)?;
        let d = x.len();
        let mut out = Vec::with_capacity(1 << d);
        for mask in 0..(1usize << d) {
            let mut w = 1.0;
            let mut c = [0i64; MAX_DIM];
            for i in 0..d {
                let up = mask >> i & 1 == 1;
                w *= if up { t[i] } else { 1.0 - t[i] };
                c[i] = a.coords()[i] + up as i64;
            }
            if w != 0.0 {
                let v = GridPoint::new(&c[..d]);
                if !self.base.values.contains_key(&v) {
                    return Err(Error::Domain(format!("extension queried at {x:?}: vertex {v:?} undefined")));
                }
                out.push((v, w));
            }
        }
        Ok(out)
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        Ok(self.vertices(x)?.iter().map(|(v, w)| w * self.base.get(v)).sum())
    }

    /// Gradient inside the cube containing `x` (one-sided on faces).
    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (a, t) = self.locate(x)?;
        let d = x.len();
        let n = self.lattice().rho();
        let mut g = vec![0.0; d];
        for mask in 0..(1usize << d) {
            let mut c = [0i64; MAX_DIM];
            for i in 0..d {
                c[i] = a.coords()[i] + (mask >> i & 1) as i64;
            }
            let v = GridPoint::new(&c[..d]);
            let Some(&fv) = self.base.values.get(&v) else {
                return Err(Error::Domain(format!("extension gradient at {x:?}: vertex {v:?} undefined")));
            };
            for (k, gk) in g.iter_mut().enumerate() {
                let mut w = n * if mask >> k & 1 == 1 { 1.0 } else { -1.0 };
                for i in (0..d).filter(|i| *i != k) {
                    w *= if mask >> i & 1 == 1 { t[i] } else { 1.0 - t[i] };
                }
                *gk += w * fv;
            }
        }
        Ok(g)
    }

    /// Min and max of the base over the closed cube containing `x`.
    pub fn cube_range(&self, x: &[f64]) -> Result<(f64, f64)> {
        let (a, _) = self.locate(x)?;
        let d = x.len();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for mask in 0..(1usize << d) {
            let mut c = [0i64; MAX_DIM];
            for i in 0..d {
                c[i] = a.coords()[i] + (mask >> i & 1) as i64;
            }
            let v = self.base.get(&GridPoint::new(&c[..d]));
            lo = lo.min(v);
            hi = hi.max(v);
        }
        Ok((lo, hi))
    }
}

// ---------------------------------------------------------------------------
// Lévy symbols

/// `∫_0^∞ (1 − cos u) u^{-1-α} du`.
pub fn stable_radial_constant(alpha: f64) -> f64 {
    if (alpha - 1.0).abs() < 1e-12 {
        PI / 2.0
    } else {
        statrs::function::gamma::gamma(1.0 - alpha) * (PI * alpha / 2.0).cos() / alpha
    }
}

/// `ψ(ξ) = ∫(1 − cos⟨ξ,h⟩) k(h) dh` for a stationary kernel homogeneous of
/// degree `−d−α`, by angular quadrature of `k` on the unit sphere.
pub fn kernel_symbol(k: &dyn Kernel, xi: &[f64]) -> Result<f64> {
    if !k.is_stationary() {
        return Err(Error::config("symbols need a stationary kernel"));
    }
    let d = k.dim();
    let alpha = k.alpha();
    let c = stable_radial_constant(alpha);
    let zero = [0.0; MAX_DIM];
    let ang = |th: &[f64]| {
        let dot: f64 = th.iter().zip(xi).map(|(a, b)| a * b).sum();
        k.eval(&zero[..d], th) * dot.abs().powf(alpha)
    };
    let rule = GaussRule::new(16);
    let s = match d {
        1 => ang(&[1.0]) + ang(&[-1.0]),
        2 => {
            let mut cuts: Vec<f64> = (0..=16).map(|i| 2.0 * PI * i as f64 / 16.0).collect();
            cuts.extend(k.angular_breaks());
            let phi = xi[1].atan2(xi[0]);
            for off in [PI / 2.0, 3.0 * PI / 2.0] {
                cuts.push((phi + off).rem_euclid(2.0 * PI));
            }
            cuts.sort_by(f64::total_cmp);
            cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
            cuts.windows(2)
                .map(|w| rule.integrate(w[0], w[1], |t| ang(&[t.cos(), t.sin()])))
                .sum()
        }
        _ => {
            let mut acc = 0.0;
            for i in 0..8 {
                let (a, b) = (PI * i as f64 / 8.0, PI * (i + 1) as f64 / 8.0);
                acc += rule.integrate(a, b, |p| {
                    let mut row = 0.0;
                    for j in 0..16 {
                        let (c0, c1) = (2.0 * PI * j as f64 / 16.0, 2.0 * PI * (j + 1) as f64 / 16.0);
                        row += rule.integrate(c0, c1, |q| ang(&[p.sin() * q.cos(), p.sin() * q.sin(), p.cos()]));
                    }
                    row * p.sin()
                });
            }
            acc
        }
    };
    Ok(c * s)
}

// ---------------------------------------------------------------------------
// CLT

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// Cauchy law with scale `t` (d = 1, α = 1).
    CauchyStandard,
    /// Characteristic function `e^{−tψ(ξ)}` only.
    AlphaStableCf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CltConfig {
    pub n_list: Vec<f64>,
    pub t: f64,
    pub x0: Vec<f64>,
    pub reference: Reference,
    pub paths: usize,
    pub seed: u64,
    /// `Ξ` in `sup_{|ξ| ≤ Ξ}`.
    pub cf_radius: f64,
    pub cf_points: usize,
    pub record_timing: bool,
}

impl Default for CltConfig {
    fn default() -> Self {
        CltConfig {
            n_list: vec![2.0, 4.0, 8.0, 16.0],
            t: 1.0,
            x0: vec![0.0],
            reference: Reference::CauchyStandard,
            paths: 100_000,
            seed: 1,
            cf_radius: 4.0,
            cf_points: 81,
            record_timing: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n: f64,
    pub paths: usize,
    pub ks: Option<f64>,
    /// 95% DKW half-width for the KS distance.
    pub ks_ci: f64,
    pub cf_distance: f64,
    /// 95% Hoeffding half-width per frequency.
    pub cf_ci: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    /// Distances nonincreasing in `n` up to one CI width.
    pub ks_decreasing: Option<bool>,
    pub cf_decreasing: bool,
    pub ks_strictly_decreasing: Option<bool>,
    pub verdict: String,
}

/// Frequencies with `0 < |ξ| ≤ Ξ`; by conjugate symmetry half the ball
/// suffices for a real symbol.
fn frequencies(d: usize, radius: f64, points: usize) -> Vec<Vec<f64>> {
    let m = points.max(2);
    match d {
        1 => (1..=m).map(|i| vec![radius * i as f64 / m as f64]).collect(),
        2 => {
            let mut out = Vec::new();
            let rs = (m as f64).sqrt().ceil() as usize;
            for i in 1..=rs {
                let r = radius * i as f64 / rs as f64;
                for j in 0..2 * rs {
                    let a = PI * j as f64 / (2 * rs) as f64;
                    out.push(vec![r * a.cos(), r * a.sin()]);
                }
            }
            out
        }
        _ => {
            let mut out = Vec::new();
            let rs = (m as f64).cbrt().ceil() as usize;
            for i in 1..=rs {
                let r = radius * i as f64 / rs as f64;
                for j in 0..rs {
                    let p = PI * (j as f64 + 0.5) / rs as f64;
                    for k in 0..rs {
                        let q = PI * k as f64 / rs as f64;
                        out.push(vec![r * p.sin() * q.cos(), r * p.sin() * q.sin(), r * p.cos()]);
                    }
                }
            }
            out
        }
    }
}

fn cf_distance(samples: &[Vec<f64>], freqs: &[Vec<f64>], reference: impl Fn(&[f64]) -> f64) -> f64 {
    let n = samples.len() as f64;
    freqs
        .iter()
        .map(|xi| {
            let (mut re, mut im) = (0.0, 0.0);
            for s in samples {
                let ph: f64 = s.iter().zip(xi).map(|(a, b)| a * b).sum();
                re += ph.cos();
                im += ph.sin();
            }
            let target = reference(xi);
            ((re / n - target).powi(2) + (im / n).powi(2)).sqrt()
        })
        .fold(0.0, f64::max)
}

/// Compare the law of `Y^n_t − x0` with the reference for each `n`.
///
/// `family(n)` must return the conductivity on `ℤ^d/n`; `symbol(ξ)` is the
/// Lévy symbol `ψ` of the limit.
pub fn clt_diagnostic(
    family: &dyn Fn(f64) -> Result<ConductivityField>,
    symbol: &dyn Fn(&[f64]) -> f64,
    cfg: &CltConfig,
    exec: Execution,
) -> Result<ConvergenceReport> {
    if cfg.paths == 0 || cfg.n_list.is_empty() {
        return Err(Error::config("clt needs paths and a nonempty n_list"));
    }
    let mut rows = Vec::new();
    let mut d_seen = None;
    for &n in &cfg.n_list {
        let started = Instant::now();
        let c = family(n)?;
        let d = c.dim();
        if c.lattice().rho() != n {
            return Err(Error::config(format!("family({n}) returned a field on the wrong lattice")));
        }
        if cfg.x0.len() != d {
            return Err(Error::config("x0 dimension differs from the field"));
        }
        let want_ks = match cfg.reference {
            Reference::CauchyStandard => {
                if d != 1 || (c.alpha() - 1.0).abs() > 1e-12 {
                    return Err(Error::config("the Cauchy reference needs d = 1 and alpha = 1"));
                }
                true
            }
            Reference::AlphaStableCf => false,
        };
        d_seen = Some(d);
        let sampler = JumpSampler::new(&c, None, SamplerConfig::default())?;
        let start = c.lattice().round(&cfg.x0)?;
        let seed = derive_seed(cfg.seed, n.to_bits());
        let lat = *c.lattice();
        let ends: Vec<Result<Vec<f64>>> = map_range(exec, cfg.paths, |i| {
            let mut rng = stream_rng(seed, i as u64);
            let y = sampler.run(&start, cfg.t, &mut rng, |_, _, _| Ok(true))?;
            let r = lat.real(&y);
            Ok((0..d).map(|k| r[k] - cfg.x0[k]).collect())
        });
        let samples: Vec<Vec<f64>> = ends.into_iter().collect::<Result<_>>()?;
        let np = samples.len() as f64;
        let ks = want_ks.then(|| {
            let mut xs: Vec<f64> = samples.iter().map(|s| s[0]).collect();
            xs.sort_by(f64::total_cmp);
            ks_distance(&xs, |x| cauchy_cdf(x, cfg.t))
        });
        let freqs = frequencies(d, cfg.cf_radius, cfg.cf_points);
        let cf = cf_distance(&samples, &freqs, |xi| (-cfg.t * symbol(xi)).exp());
        rows.push(ConvergenceRow {
            n,
            paths: cfg.paths,
            ks,
            ks_ci: ((2.0f64 / 0.05).ln() / (2.0 * np)).sqrt(),
            cf_ci: 2f64.sqrt() * (2.0 * (4.0f64 / 0.05).ln() / np).sqrt(),
            cf_distance: cf,
            seconds: if cfg.record_timing { started.elapsed().as_secs_f64() } else { 0.0 },
        });
    }
    let _ = d_seen;
    let ks: Option<Vec<f64>> = rows.iter().map(|r| r.ks).collect();
    let ks_decreasing = ks.as_ref().map(|v| v.windows(2).zip(&rows).all(|(w, r)| w[1] <= w[0] + r.ks_ci));
    let ks_strictly_decreasing = ks.as_ref().map(|v| v.windows(2).all(|w| w[1] < w[0]));
    let cf_decreasing = rows.windows(2).all(|w| w[1].cf_distance <= w[0].cf_distance + w[0].cf_ci);
    let verdict = match (ks_decreasing, cf_decreasing) {
        (Some(true), true) | (None, true) => "decreasing",
        (Some(false), false) => "not decreasing",
        _ => "inconclusive",
    }
    .to_string();
    Ok(ConvergenceReport {
        rows,
        ks_decreasing,
        cf_decreasing,
        ks_strictly_decreasing,
        verdict,
    })
}

// ---------------------------------------------------------------------------
// Tightness

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TightnessConfig {
    pub n_list: Vec<f64>,
    pub t0: f64,
    pub x0: Vec<f64>,
    /// `σ` is the first exit from `B(x0, exit_radius)`, capped at `t0`.
    pub exit_radius: f64,
    pub eta_list: Vec<f64>,
    pub delta_list: Vec<f64>,
    pub paths: usize,
    pub seed: u64,
    /// Use `sup_{s∈[σ,σ+δ]}|Y_s − Y_σ|` instead of the endpoint displacement.
    pub sup_displacement: bool,
    pub bound: f64,
}

impl Default for TightnessConfig {
    fn default() -> Self {
        TightnessConfig {
            n_list: vec![2.0, 4.0, 8.0, 16.0],
            t0: 1.0,
            x0: vec![0.0],
            exit_radius: 1.0,
            eta_list: vec![1.0],
            delta_list: vec![0.01],
            paths: 100_000,
            seed: 1,
            sup_displacement: false,
            bound: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TightnessRow {
    pub n: f64,
    pub eta: f64,
    pub delta: f64,
    pub probability: f64,
    pub ci: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TightnessReport {
    pub rows: Vec<TightnessRow>,
    /// Per `n`, the fraction of paths leaving the exit ball before `t0`.
    pub exit_fraction: Vec<(f64, f64)>,
    pub passed: bool,
}

pub fn tightness_diagnostic(
    family: &dyn Fn(f64) -> Result<ConductivityField>,
    cfg: &TightnessConfig,
    exec: Execution,
) -> Result<TightnessReport> {
    if cfg.delta_list.iter().any(|d| !(*d >= 0.0)) {
        return Err(Error::config("delta values must be nonnegative"));
    }
    let dmax = cfg.delta_list.iter().copied().fold(0.0, f64::max);
    let mut rows = Vec::new();
    let mut exit_fraction = Vec::new();
    for &n in &cfg.n_list {
        let c = family(n)?;
        let lat = *c.lattice();
        let sampler = JumpSampler::new(&c, None, SamplerConfig::default())?;
        let start = lat.round(&cfg.x0)?;
        let seed = derive_seed(cfg.seed, n.to_bits() ^ 0x7167);
        let per_path: Vec<Result<(bool, Vec<f64>)>> = map_range(exec, cfg.paths, |i| {
            let path = sample_path_with(&sampler, &start, cfg.t0 + dmax.max(f64::MIN_POSITIVE), seed, i as u64)?;
            let exit = path
                .events
                .iter()
                .find(|(t, p)| *t <= cfg.t0 && lat.distance(&start, p) > cfg.exit_radius * (1.0 + 1e-12))
                .map(|e| e.0);
            let sigma = exit.unwrap_or(cfg.t0);
            let at_sigma = path.state_at(sigma);
            let disp = cfg
                .delta_list
                .iter()
                .map(|&delta| {
                    if cfg.sup_displacement {
                        path.events
                            .iter()
                            .filter(|(t, _)| *t > sigma && *t <= sigma + delta)
                            .map(|(_, p)| lat.distance(&at_sigma, p))
                            .fold(0.0, f64::max)
                    } else {
                        lat.distance(&at_sigma, &path.state_at(sigma + delta))
                    }
                })
                .collect();
            Ok((exit.is_some(), disp))
        });
        let per_path: Vec<(bool, Vec<f64>)> = per_path.into_iter().collect::<Result<_>>()?;
        let exits = per_path.iter().filter(|p| p.0).count();
        exit_fraction.push((n, exits as f64 / cfg.paths as f64));
        for &eta in &cfg.eta_list {
            for (k, &delta) in cfg.delta_list.iter().enumerate() {
                let hits = per_path.iter().filter(|p| p.1[k] > eta).count() as u64;
                rows.push(TightnessRow {
                    n,
                    eta,
                    delta,
                    probability: hits as f64 / cfg.paths as f64,
                    ci: wilson_interval(hits, cfg.paths as u64),
                });
            }
        }
    }
    let nmax = cfg.n_list.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let dmin = cfg.delta_list.iter().copied().fold(f64::INFINITY, f64::min);
    let passed = rows
        .iter()
        .filter(|r| r.n == nmax && r.delta == dmin)
        .all(|r| r.probability < cfg.bound);
    Ok(TightnessReport { rows, exit_fraction, passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conductivity::isotropic_stable;
    use crate::kernel::{ConeKernel, IsotropicKernel};
    use crate::numerics::ks_two_sample;

    #[test]
    fn extension_interpolates() {
        let lat = ScaledLattice::integer(1);
        let mut f = GridFunction::new(lat);
        f.values.insert(GridPoint::new(&[0]), 0.0);
        f.values.insert(GridPoint::new(&[1]), 1.0);
        let e = extend_to_continuum(&f);
        assert_eq!(e.eval(&[0.25]).unwrap(), 0.25);
        assert_eq!(e.eval(&[1.0]).unwrap(), 1.0);
        assert!(matches!(e.eval(&[1.5]), Err(Error::Domain(_))));
        assert_eq!(e.gradient(&[0.5]).unwrap(), vec![1.0]);
    }

    #[test]
    fn stable_constant_symbol_is_modulus() {
        let k = IsotropicKernel { d: 1, alpha: 1.0, coefficient: 1.0 / PI };
        assert!((kernel_symbol(&k, &[2.5]).unwrap() - 2.5).abs() < 1e-12);
        let c2 = crate::conductivity::stable_constant(2, 1.3);
        let k2 = IsotropicKernel { d: 2, alpha: 1.3, coefficient: c2 };
        let psi = kernel_symbol(&k2, &[0.6, -0.8]).unwrap();
        assert!((psi - 1.0).abs() < 1e-8, "{psi}");
    }

    #[test]
    fn cone_symbol_is_below_isotropic() {
        let cone = ConeKernel { gamma: 1.0, alpha: 1.0, coefficient: 1.0 };
        let iso = IsotropicKernel { d: 2, alpha: 1.0, coefficient: 1.0 };
        let a = kernel_symbol(&cone, &[1.0, 0.3]).unwrap();
        let b = kernel_symbol(&iso, &[1.0, 0.3]).unwrap();
        assert!(a > 0.0 && a < b);
    }

    #[test]
    fn half_samples_agree() {
        let c = isotropic_stable(ScaledLattice::new(1, 4.0).unwrap(), 1.0, 1.0 / PI).unwrap();
        let s = JumpSampler::new(&c, None, SamplerConfig::default()).unwrap();
        let x0 = GridPoint::origin(1);
        let ends = crate::chain::sample_marginals(&s, &x0, 1.0, 4000, 9, Execution::Sequential).unwrap();
        let mut a: Vec<f64> = ends[..2000].iter().map(|p| c.lattice().real(p)[0]).collect();
        let mut b: Vec<f64> = ends[2000..].iter().map(|p| c.lattice().real(p)[0]).collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert!(ks_two_sample(&a, &b) < 1.63 * (2.0f64 / 2000.0).sqrt());
    }

    #[test]
    fn zero_delta_has_zero_displacement() {
        let fam = |n: f64| isotropic_stable(ScaledLattice::new(1, n)?, 1.0, 1.0 / PI);
        let cfg = TightnessConfig {
            n_list: vec![2.0],
            delta_list: vec![0.0, 0.05],
            paths: 300,
            ..Default::default()
        };
        let r = tightness_diagnostic(&fam, &cfg, Execution::Sequential).unwrap();
        assert_eq!(r.rows[0].probability, 0.0);
    }
}
