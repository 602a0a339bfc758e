//! Scaled grids `ℤ^d/ρ`: points, rounding, balls, windows and cubes.
//!
//! Points store integer coordinates; the real position is `coords / ρ`.
//! Equality and hashing are therefore exact.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

pub const MAX_DIM: usize = 3;

/// Default cap on the number of points returned by a ball enumeration.
pub const DEFAULT_BALL_CAP: usize = 10_000_000;

/// An integer lattice point. Unused trailing coordinates are zero, so the
/// derived ordering is lexicographic on the used coordinates.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridPoint {
    dim: u8,
    coords: [i64; MAX_DIM],
}

impl GridPoint {
    /// Panics if `coords` is empty or longer than [`MAX_DIM`].
    pub fn new(coords: &[i64]) -> Self {
        assert!(
            (1..=MAX_DIM).contains(&coords.len()),
            "grid points have 1..={MAX_DIM} coordinates"
        );
        let mut c = [0; MAX_DIM];
        c[..coords.len()].copy_from_slice(coords);
        GridPoint {
            dim: coords.len() as u8,
            coords: c,
        }
    }

    pub fn origin(d: usize) -> Self {
        GridPoint::new(&[0; MAX_DIM][..d])
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn coords(&self) -> &[i64] {
        &self.coords[..self.dim()]
    }

    pub fn add(&self, other: &GridPoint) -> GridPoint {
        let mut out = *self;
        for i in 0..self.dim() {
            out.coords[i] += other.coords[i];
        }
        out
    }

    pub fn sub(&self, other: &GridPoint) -> GridPoint {
        let mut out = *self;
        for i in 0..self.dim() {
            out.coords[i] -= other.coords[i];
        }
        out
    }

    pub fn neg(&self) -> GridPoint {
        let mut out = *self;
        for i in 0..self.dim() {
            out.coords[i] = -out.coords[i];
        }
        out
    }

    /// Exact squared Euclidean norm in lattice steps.
    pub fn norm_sq(&self) -> i128 {
        self.coords().iter().map(|&c| (c as i128) * (c as i128)).sum()
    }

    /// Euclidean norm in lattice steps.
    pub fn norm(&self) -> f64 {
        self.coords()
            .iter()
            .map(|&c| (c as f64) * (c as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn linf(&self) -> i64 {
        self.coords().iter().map(|c| c.abs()).max().unwrap_or(0)
    }

    pub fn is_origin(&self) -> bool {
        self.coords().iter().all(|&c| c == 0)
    }

    /// Canonical representative of `{h, -h}`: the lexicographically larger.
    pub fn canonical_sign(&self) -> GridPoint {
        let n = self.neg();
        if n > *self {
            n
        } else {
            *self
        }
    }
}

impl fmt::Debug for GridPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.coords())
    }
}

impl Serialize for GridPoint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.coords().serialize(s)
    }
}

impl<'de> Deserialize<'de> for GridPoint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<i64>::deserialize(d)?;
        if !(1..=MAX_DIM).contains(&v.len()) {
            return Err(serde::de::Error::custom("grid point needs 1..=3 coordinates"));
        }
        Ok(GridPoint::new(&v))
    }
}

/// The grid `ℤ^d/ρ` with counting-measure weight `ρ^{-d}` per point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaledLattice {
    d: usize,
    rho: f64,
}

impl ScaledLattice {
    pub fn new(d: usize, rho: f64) -> Result<Self> {
        if !(1..=MAX_DIM).contains(&d) {
            return Err(Error::invalid(format!("dimension {d} outside 1..={MAX_DIM}")));
        }
        if !(rho.is_finite() && rho > 0.0) {
            return Err(Error::invalid(format!("scale must be positive and finite, got {rho}")));
        }
        Ok(ScaledLattice { d, rho })
    }

    /// `ℤ^d` itself.
    pub fn integer(d: usize) -> Self {
        ScaledLattice::new(d, 1.0).expect("valid dimension")
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.rho
    }

    /// Measure of a single point, `ρ^{-d}`.
    pub fn point_weight(&self) -> f64 {
        self.rho.powi(-(self.d as i32))
    }

    /// The lattice refined by `factor`: `ℤ^d/(ρ·factor)`.
    pub fn refined(&self, factor: f64) -> Result<Self> {
        ScaledLattice::new(self.d, self.rho * factor)
    }

    pub fn point(&self, coords: &[i64]) -> Result<GridPoint> {
        if coords.len() != self.d {
            return Err(Error::invalid(format!(
                "expected {} coordinates, got {}",
                self.d,
                coords.len()
            )));
        }
        Ok(GridPoint::new(coords))
    }

    pub fn real(&self, p: &GridPoint) -> [f64; MAX_DIM] {
        let mut out = [0.0; MAX_DIM];
        for (o, &c) in out.iter_mut().zip(p.coords()) {
            *o = c as f64 / self.rho;
        }
        out
    }

    pub fn real_vec(&self, p: &GridPoint) -> Vec<f64> {
        self.real(p)[..self.d].to_vec()
    }

    /// Euclidean distance in real units.
    pub fn distance(&self, p: &GridPoint, q: &GridPoint) -> f64 {
        p.sub(q).norm() / self.rho
    }

    /// `[x]_ρ`: componentwise `ρ^{-1}⌊ρ x_i⌋`.
    pub fn round(&self, x: &[f64]) -> Result<GridPoint> {
        round_to_grid(x, self.rho).and_then(|p| {
            if p.dim() == self.d {
                Ok(p)
            } else {
                Err(Error::invalid("dimension mismatch in rounding"))
            }
        })
    }

    /// Grid points within Euclidean distance `r` of `center`, lexicographic.
    pub fn ball(&self, center: &GridPoint, r: f64, cap: usize) -> Result<Vec<GridPoint>> {
        let offsets = ball_offsets(self.d, r * self.rho, cap)?;
        Ok(offsets.iter().map(|h| center.add(h)).collect())
    }
}

/// `[x]_n` with the floor convention (half-open cubes `[x, x+1/n)`).
pub fn round_to_grid(x: &[f64], n: f64) -> Result<GridPoint> {
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::invalid(format!("scale must be positive, got {n}")));
    }
    if x.is_empty() || x.len() > MAX_DIM {
        return Err(Error::invalid("point dimension outside 1..=3"));
    }
    let mut c = [0i64; MAX_DIM];
    for (ci, &xi) in c.iter_mut().zip(x) {
        if !xi.is_finite() {
            return Err(Error::invalid("non-finite coordinate"));
        }
        let v = (n * xi).floor();
        if v.abs() > 9.0e15 {
            return Err(Error::invalid("coordinate too large for the integer grid"));
        }
        *ci = v as i64;
    }
    Ok(GridPoint::new(&c[..x.len()]))
}

/// Offsets `h ∈ ℤ^d` with `|h| ≤ radius` (in lattice steps), lexicographic.
///
/// A relative slack of `1e-12` keeps boundary points that rounding in
/// `radius` would otherwise lose.
pub fn ball_offsets(d: usize, radius: f64, cap: usize) -> Result<Vec<GridPoint>> {
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(Error::invalid(format!("radius must be nonnegative, got {radius}")));
    }
    let r = radius.floor() as i64;
    let side = (2 * r + 1) as f64;
    let cube = side.powi(d as i32);
    if cube > 2.0 * cap as f64 && r >= 4 {
        return Err(Error::resource("ball point count", cap as u64));
    }
    let limit = radius * radius * (1.0 + 1e-12);
    let mut out = Vec::new();
    let lo = GridPoint::new(&vec![-r; d]);
    let hi = GridPoint::new(&vec![r; d]);
    for_each_in_box(&lo, &hi, |h| {
        if (h.norm_sq() as f64) <= limit {
            out.push(h);
        }
    });
    if out.len() > cap {
        return Err(Error::resource("ball point count", cap as u64));
    }
    Ok(out)
}

/// Offsets with `|h|_∞ ≤ r`, lexicographic.
pub fn cube_offsets(d: usize, r: i64) -> Vec<GridPoint> {
    let mut out = Vec::with_capacity(((2 * r + 1) as usize).pow(d as u32));
    for_each_in_box(
        &GridPoint::new(&vec![-r; d]),
        &GridPoint::new(&vec![r; d]),
        |h| out.push(h),
    );
    out
}

/// Visit every point of the integer box `[lo, hi]` in lexicographic order.
pub fn for_each_in_box(lo: &GridPoint, hi: &GridPoint, mut f: impl FnMut(GridPoint)) {
    let d = lo.dim();
    if (0..d).any(|i| lo.coords[i] > hi.coords[i]) {
        return;
    }
    let mut cur = *lo;
    loop {
        f(cur);
        let mut i = d;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if cur.coords[i] < hi.coords[i] {
                cur.coords[i] += 1;
                break;
            }
            cur.coords[i] = lo.coords[i];
        }
    }
}

/// The cube `Q_n(anchor) = ∏ [a_i, a_i + 1/n)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cube {
    /// Integer anchor coordinates on the grid `ℤ^d/n`.
    pub anchor: GridPoint,
}

impl Cube {
    pub fn lower(&self, n: f64) -> [f64; MAX_DIM] {
        let mut out = [0.0; MAX_DIM];
        for (o, &c) in out.iter_mut().zip(self.anchor.coords()) {
            *o = c as f64 / n;
        }
        out
    }

    pub fn center(&self, n: f64) -> [f64; MAX_DIM] {
        let mut out = self.lower(n);
        for o in out.iter_mut().take(self.anchor.dim()) {
            *o += 0.5 / n;
        }
        out
    }

    pub fn contains(&self, x: &[f64], n: f64) -> bool {
        let lo = self.lower(n);
        x.iter()
            .zip(lo.iter())
            .all(|(&xi, &l)| xi >= l && xi < l + 1.0 / n)
    }
}

/// The cube of the partition `𝔔_n` containing `x`.
pub fn cube_partition_index(x: &[f64], n: f64) -> Result<Cube> {
    Ok(Cube {
        anchor: round_to_grid(x, n)?,
    })
}

/// A finite box of grid points, `lo ≤ coords ≤ hi` componentwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub lattice: ScaledLattice,
    pub lo: GridPoint,
    pub hi: GridPoint,
}

impl Window {
    /// All grid points of `[-r, r]^d` (real units) around the origin.
    pub fn centered(lattice: ScaledLattice, r: f64) -> Result<Self> {
        let d = lattice.dim();
        let k = (r * lattice.rho() * (1.0 + 1e-12)).floor() as i64;
        if k < 0 {
            return Err(Error::invalid("window radius must be nonnegative"));
        }
        Ok(Window {
            lattice,
            lo: GridPoint::new(&vec![-k; d]),
            hi: GridPoint::new(&vec![k; d]),
        })
    }

    /// Box given directly in integer coordinates.
    pub fn from_bounds(lattice: ScaledLattice, lo: &[i64], hi: &[i64]) -> Result<Self> {
        let lo = lattice.point(lo)?;
        let hi = lattice.point(hi)?;
        if lo.coords().iter().zip(hi.coords()).any(|(a, b)| a > b) {
            return Err(Error::invalid("window lower corner exceeds upper corner"));
        }
        Ok(Window { lattice, lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lattice.dim()
    }

    fn side(&self, i: usize) -> i64 {
        self.hi.coords()[i] - self.lo.coords()[i] + 1
    }

    pub fn len(&self) -> usize {
        (0..self.dim()).map(|i| self.side(i) as usize).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, p: &GridPoint) -> bool {
        p.coords()
            .iter()
            .zip(self.lo.coords().iter().zip(self.hi.coords()))
            .all(|(c, (l, h))| l <= c && c <= h)
    }

    /// Position of `p` in [`Window::points`] order.
    pub fn index_of(&self, p: &GridPoint) -> Option<usize> {
        if !self.contains(p) {
            return None;
        }
        let mut idx = 0usize;
        for i in 0..self.dim() {
            idx = idx * self.side(i) as usize + (p.coords()[i] - self.lo.coords()[i]) as usize;
        }
        Some(idx)
    }

    pub fn point_at(&self, mut idx: usize) -> GridPoint {
        let d = self.dim();
        let mut c = [0i64; MAX_DIM];
        for i in (0..d).rev() {
            let s = self.side(i) as usize;
            c[i] = self.lo.coords()[i] + (idx % s) as i64;
            idx /= s;
        }
        GridPoint::new(&c[..d])
    }

    /// Lexicographically ordered points.
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::with_capacity(self.len());
        for_each_in_box(&self.lo, &self.hi, |p| out.push(p));
        out
    }

    pub fn describe(&self) -> String {
        format!(
            "box {:?}..{:?} on Z^{}/{}",
            self.lo.coords(),
            self.hi.coords(),
            self.dim(),
            self.lattice.rho()
        )
    }
}

/// A finitely supported function on a scaled lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    pub lattice: ScaledLattice,
    pub values: BTreeMap<GridPoint, f64>,
}

impl GridFunction {
    pub fn new(lattice: ScaledLattice) -> Self {
        GridFunction {
            lattice,
            values: BTreeMap::new(),
        }
    }

    pub fn from_fn(lattice: ScaledLattice, support: &[GridPoint], f: impl Fn(&GridPoint) -> f64) -> Self {
        let values = support.iter().map(|p| (*p, f(p))).collect();
        GridFunction { lattice, values }
    }

    pub fn delta(lattice: ScaledLattice, at: GridPoint) -> Self {
        let mut g = GridFunction::new(lattice);
        g.values.insert(at, 1.0);
        g
    }

    pub fn get(&self, p: &GridPoint) -> f64 {
        self.values.get(p).copied().unwrap_or(0.0)
    }

    pub fn support(&self) -> impl Iterator<Item = &GridPoint> {
        self.values.iter().filter(|(_, v)| **v != 0.0).map(|(p, _)| p)
    }

    /// `Σ f g ρ^{-d}`.
    pub fn inner(&self, other: &GridFunction) -> f64 {
        let w = self.lattice.point_weight();
        self.values
            .iter()
            .map(|(p, v)| v * other.get(p))
            .sum::<f64>()
            * w
    }

    pub fn add(&self, other: &GridFunction) -> GridFunction {
        let mut out = self.clone();
        for (p, v) in &other.values {
            *out.values.entry(*p).or_insert(0.0) += v;
        }
        out
    }

    pub fn scaled(&self, c: f64) -> GridFunction {
        let mut out = self.clone();
        for v in out.values.values_mut() {
            *v *= c;
        }
        out
    }
}
