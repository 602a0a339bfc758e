//! Special functions, quadrature rules and small statistics helpers.

use statrs::function::gamma::{gamma, gamma_ur};
use std::f64::consts::PI;

/// Gauss–Legendre rule on `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussRule {
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "quadrature order must be positive");
        let n = order;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            // Chebyshev-like initial guess, refined by Newton on P_n.
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        GaussRule { nodes, weights }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// Nodes and weights mapped to `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (mid + half * x, half * w))
    }

    /// ∫_a^b f.
    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.mapped(a, b).map(|(x, w)| w * f(x)).sum()
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let dp = n as f64 * (x * p - p0) / (x * x - 1.0);
    (p, dp)
}

const BERNOULLI_OVER_FACT: [f64; 7] = [
    1.0 / 6.0 / 2.0,
    -1.0 / 30.0 / 24.0,
    1.0 / 42.0 / 720.0,
    -1.0 / 30.0 / 40320.0,
    5.0 / 66.0 / 3628800.0,
    -691.0 / 2730.0 / 479001600.0,
    7.0 / 6.0 / 87178291200.0,
];

/// Hurwitz zeta `Σ_{k≥0} (a+k)^{-s}` for `s > 1`, `a > 0`, by Euler–Maclaurin.
pub fn hurwitz_zeta(s: f64, a: f64) -> f64 {
    assert!(s > 1.0 && a > 0.0, "hurwitz_zeta needs s > 1, a > 0");
    const N: usize = 24;
    let mut sum = 0.0;
    for k in 0..N {
        sum += (a + k as f64).powf(-s);
    }
    let b = a + N as f64;
    sum += b.powf(1.0 - s) / (s - 1.0) + 0.5 * b.powf(-s);
    let mut rising = s; // s (s+1) … (s+2j-2)
    let mut power = b.powf(-s - 1.0);
    for (j, c) in BERNOULLI_OVER_FACT.iter().enumerate() {
        sum += c * rising * power;
        let j2 = 2.0 * j as f64;
        rising *= (s + j2 + 1.0) * (s + j2 + 2.0);
        power /= b * b;
    }
    sum
}

/// Riemann zeta for `s > 1`.
pub fn zeta(s: f64) -> f64 {
    hurwitz_zeta(s, 1.0)
}

/// Non-normalised upper incomplete gamma `Γ(a, x)` for `a > -1`, `x > 0`.
pub fn upper_gamma(a: f64, x: f64) -> f64 {
    if a > 0.0 {
        gamma_ur(a, x) * gamma(a)
    } else if a < 0.0 {
        (upper_gamma(a + 1.0, x) - x.powf(a) * (-x).exp()) / a
    } else {
        // E1(x); not needed for a = -α/2 with α ∈ (0,2) but kept total.
        let rule = GaussRule::new(32);
        rule.integrate(0.0, 1.0, |u| {
            // ∫_x^∞ e^{-t}/t dt with t = x / u
            let t = x / u;
            (-t).exp() / u
        })
    }
}

/// Epstein zeta of the square lattice, `Σ_{h∈ℤ^d∖0} |h|^{-s}` for `s > d`,
/// by the theta-function (Ewald) splitting.
pub fn lattice_zeta(d: usize, s: f64) -> f64 {
    assert!((1..=3).contains(&d) && s > d as f64);
    let df = d as f64;
    const M: i64 = 6;
    let mut acc = 0.0;
    let mut k = [0i64; 3];
    let span = (2 * M + 1) as usize;
    let total = span.pow(d as u32);
    for idx in 0..total {
        let mut rem = idx;
        let mut n2 = 0i64;
        for c in k.iter_mut().take(d) {
            *c = (rem % span) as i64 - M;
            rem /= span;
            n2 += *c * *c;
        }
        if n2 == 0 {
            continue;
        }
        let x = PI * n2 as f64;
        acc += x.powf(-s / 2.0) * upper_gamma(s / 2.0, x)
            + x.powf((s - df) / 2.0) * upper_gamma((df - s) / 2.0, x);
    }
    acc += 2.0 / (s - df) - 2.0 / s;
    PI.powf(s / 2.0) / gamma(s / 2.0) * acc
}

/// Number of lattice points with `|k|_∞ = m` in dimension `d`.
pub fn linf_shell_size(d: usize, m: i64) -> f64 {
    if m == 0 {
        return 1.0;
    }
    let m = m as f64;
    ((2.0 * m + 1.0).powi(d as i32)) - ((2.0 * m - 1.0).powi(d as i32))
}

/// `Σ_{|k|_∞ > r} |k|_∞^{-s}` over `ℤ^d`, exact via Hurwitz zeta.
pub fn linf_tail(d: usize, s: f64, r: i64) -> f64 {
    let a = (r + 1) as f64;
    match d {
        1 => 2.0 * hurwitz_zeta(s, a),
        2 => 8.0 * hurwitz_zeta(s - 1.0, a),
        3 => 24.0 * hurwitz_zeta(s - 2.0, a) + 2.0 * hurwitz_zeta(s, a),
        _ => panic!("unsupported dimension {d}"),
    }
}

/// Sum in order, pairwise; deterministic and accurate.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = pairwise_sum(xs) / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Wilson score interval at 95%.
pub fn wilson_interval(successes: u64, trials: u64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959963984540054;
    let n = trials as f64;
    let p = successes as f64 / n;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Standard Cauchy CDF with scale `t`.
pub fn cauchy_cdf(x: f64, t: f64) -> f64 {
    0.5 + (x / t).atan() / PI
}

/// One-sample Kolmogorov–Smirnov distance. `sorted` must be ascending.
pub fn ks_distance(sorted: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    d
}

/// Two-sample Kolmogorov–Smirnov distance on ascending inputs.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Ordinary least squares slope and intercept of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gauss_rule_is_exact_for_polynomials() {
        let rule = GaussRule::new(8);
        let v = rule.integrate(0.0, 2.0, |x| x.powi(15));
        assert_relative_eq!(v, 2f64.powi(16) / 16.0, max_relative = 1e-13);
        let w: f64 = rule.weights.iter().sum();
        assert_relative_eq!(w, 2.0, max_relative = 1e-14);
    }

    #[test]
    fn zeta_values() {
        assert_relative_eq!(zeta(2.0), PI * PI / 6.0, max_relative = 1e-14);
        assert_relative_eq!(zeta(4.0), PI.powi(4) / 90.0, max_relative = 1e-14);
        // ζ(2, 1/2) = (2² - 1) ζ(2)
        assert_relative_eq!(hurwitz_zeta(2.0, 0.5), 3.0 * PI * PI / 6.0, max_relative = 1e-13);
    }

    #[test]
    fn lattice_zeta_matches_one_dimensional_sum() {
        assert_relative_eq!(lattice_zeta(1, 2.0), PI * PI / 3.0, max_relative = 1e-12);
        assert_relative_eq!(lattice_zeta(1, 2.5), 2.0 * zeta(2.5), max_relative = 1e-12);
    }

    #[test]
    fn lattice_zeta_two_dimensional_against_direct_sum() {
        // Σ |h|^{-4} over ℤ²∖0 = 4 ζ(2) β(2) (Catalan's constant).
        let catalan = 0.915_965_594_177_219;
        let expect = 4.0 * zeta(2.0) * catalan;
        assert_relative_eq!(lattice_zeta(2, 4.0), expect, max_relative = 1e-12);
    }

    #[test]
    fn linf_tail_matches_partial_sums() {
        for d in 1..=3 {
            let s = d as f64 + 1.0;
            let r = 3;
            let mut direct = 0.0;
            for m in (r + 1)..20000 {
                direct += linf_shell_size(d, m) * (m as f64).powf(-s);
            }
            let tail = linf_tail(d, s, r);
            assert!(tail > direct);
            assert!(tail - direct < 30.0 / 20000.0, "d={d}");
        }
    }

    #[test]
    fn wilson_contains_estimate() {
        let (lo, hi) = wilson_interval(30, 100);
        assert!(lo < 0.3 && 0.3 < hi);
        assert_eq!(wilson_interval(0, 10).0, 0.0);
    }

    #[test]
    fn ks_with_ties() {
        // Uniform reference on [-0.5, 1.5]; the sup is attained on both
        // sides of each tied atom.
        let s = [0.0, 0.0, 1.0, 1.0];
        let d = ks_distance(&s, |x| ((x + 0.5) / 2.0).clamp(0.0, 1.0));
        assert!((d - 0.25).abs() < 1e-15);
    }
}
