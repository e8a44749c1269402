//! Geometry of `Z^d` under the sup norm: points, cubes, finite regions,
//! set distances, and certified lattice tail sums.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point of `Z^d`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LatticePoint(pub Vec<i64>);

impl LatticePoint {
    pub fn new(coords: Vec<i64>) -> Self {
        assert!(!coords.is_empty(), "lattice points need d >= 1");
        Self(coords)
    }

    pub fn origin(d: usize) -> Self {
        Self::new(vec![0; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[i64] {
        &self.0
    }

    /// `|n| = max_i |n_i|`.
    pub fn sup_norm(&self) -> u64 {
        self.0.iter().map(|c| c.unsigned_abs()).max().unwrap_or(0)
    }

    /// Translate by an integer vector of the same length.
    pub fn offset(&self, by: &[i64]) -> Self {
        Self(self.0.iter().zip(by).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }
}

impl fmt::Debug for LatticePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl From<Vec<i64>> for LatticePoint {
    fn from(v: Vec<i64>) -> Self {
        Self::new(v)
    }
}

/// Sup-norm distance `max_i |a_i - b_i|`.
pub fn sup_distance(a: &LatticePoint, b: &LatticePoint) -> Result<u64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(a.dim(), b.dim()));
    }
    Ok(sup_distance_unchecked(a.coords(), b.coords()))
}

#[inline]
pub(crate) fn sup_distance_unchecked(a: &[i64], b: &[i64]) -> u64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).unsigned_abs())
        .max()
        .unwrap_or(0)
}

/// `<k> = max(1, |k|)`.
#[inline]
pub fn japanese(k: u64) -> f64 {
    k.max(1) as f64
}

/// A finite subset of `Z^d` with a fixed index map into matrix coordinates.
#[derive(Clone, Debug)]
pub struct Region {
    dim: usize,
    points: Vec<LatticePoint>,
    index: HashMap<LatticePoint, usize>,
}

impl Region {
    /// Build a region from points, keeping the given order as the index map.
    pub fn from_points(dim: usize, points: Vec<LatticePoint>) -> Result<Self> {
        let mut index = HashMap::with_capacity(points.len());
        for (i, p) in points.iter().enumerate() {
            if p.dim() != dim {
                return Err(Error::DimensionMismatch(dim, p.dim()));
            }
            if index.insert(p.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate point {p:?}")));
            }
        }
        Ok(Self { dim, points, index })
    }

    /// Build a region from points in lexicographic order, dropping duplicates.
    pub fn from_point_set(dim: usize, mut points: Vec<LatticePoint>) -> Result<Self> {
        points.sort();
        points.dedup();
        Self::from_points(dim, points)
    }

    pub fn empty(dim: usize) -> Self {
        Self { dim, points: Vec::new(), index: HashMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[LatticePoint] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &LatticePoint {
        &self.points[i]
    }

    pub fn index_of(&self, p: &LatticePoint) -> Option<usize> {
        self.index.get(p).copied()
    }

    pub fn contains(&self, p: &LatticePoint) -> bool {
        self.index.contains_key(p)
    }

    pub fn is_subset_of(&self, other: &Region) -> bool {
        self.points.iter().all(|p| other.contains(p))
    }

    /// Points of `self` not in `other`, in `self`'s order.
    pub fn difference(&self, other: &Region) -> Region {
        let pts = self.points.iter().filter(|p| !other.contains(p)).cloned().collect();
        Region::from_points(self.dim, pts).expect("subset of a valid region")
    }

    /// Points of `self` also in `other`, in `self`'s order.
    pub fn intersection(&self, other: &Region) -> Region {
        let pts = self.points.iter().filter(|p| other.contains(p)).cloned().collect();
        Region::from_points(self.dim, pts).expect("subset of a valid region")
    }

    /// Sup-norm distance from `p` to the nearest point of the region
    /// (`u64::MAX` for an empty region).
    pub fn distance_to_point(&self, p: &LatticePoint) -> u64 {
        self.points
            .iter()
            .map(|q| sup_distance_unchecked(q.coords(), p.coords()))
            .min()
            .unwrap_or(u64::MAX)
    }
}

/// The cube `Λ_L(n) = { k : |k - n| <= L }`.
#[derive(Clone, Debug)]
pub struct Cube {
    center: LatticePoint,
    radius: u64,
    region: Region,
}

impl Cube {
    pub fn center(&self) -> &LatticePoint {
        &self.center
    }

    pub fn radius(&self) -> u64 {
        self.radius
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn len(&self) -> usize {
        self.region.len()
    }

    pub fn is_empty(&self) -> bool {
        self.region.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.center.dim()
    }

    /// Whether `p` lies in the cube, without a hash lookup.
    pub fn contains(&self, p: &LatticePoint) -> bool {
        sup_distance_unchecked(p.coords(), self.center.coords()) <= self.radius
    }

    /// Whether `other` is contained in `self`.
    pub fn contains_cube(&self, other: &Cube) -> bool {
        sup_distance_unchecked(other.center.coords(), self.center.coords()) + other.radius
            <= self.radius
    }
}

/// Enumerate `Λ_L(center)` in lexicographic order (last coordinate fastest).
pub fn cube_points(center: &LatticePoint, radius: u64) -> Result<Cube> {
    if radius == 0 {
        return Err(Error::InvalidArgument("cube radius must be >= 1".into()));
    }
    let region = Region::from_points(center.dim(), box_points(center, radius))?;
    Ok(Cube { center: center.clone(), radius, region })
}

/// All points within sup distance `radius` of `center` (radius 0 allowed).
pub(crate) fn box_points(center: &LatticePoint, radius: u64) -> Vec<LatticePoint> {
    let d = center.dim();
    let r = radius as i64;
    let side = (2 * radius + 1) as usize;
    let mut out = Vec::with_capacity(side.pow(d as u32));
    let mut offset = vec![-r; d];
    loop {
        out.push(center.offset(&offset));
        let mut axis = d;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            if offset[axis] < r {
                offset[axis] += 1;
                break;
            }
            offset[axis] = -r;
        }
    }
}

/// `min_{a∈A, b∈B} |a - b|`.
pub fn set_distance(a: &Region, b: &Region) -> Result<u64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("set_distance needs nonempty regions"));
    }
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(a.dim(), b.dim()));
    }
    Ok(a.points()
        .iter()
        .flat_map(|p| b.points().iter().map(move |q| sup_distance_unchecked(p.coords(), q.coords())))
        .min()
        .expect("nonempty"))
}

/// `max_{a,a'∈A} |a - a'|`.
pub fn set_diameter(a: &Region) -> Result<u64> {
    if a.is_empty() {
        return Err(Error::Empty("set_diameter needs a nonempty region"));
    }
    let pts = a.points();
    let mut best = 0;
    for (i, p) in pts.iter().enumerate() {
        for q in &pts[i + 1..] {
            best = best.max(sup_distance_unchecked(p.coords(), q.coords()));
        }
    }
    Ok(best)
}

/// Number of points at sup norm exactly `j`: `(2j+1)^d - (2j-1)^d` (1 at `j = 0`).
pub fn shell_count(j: u64, d: usize) -> u64 {
    if j == 0 {
        return 1;
    }
    (2 * j + 1).pow(d as u32) - (2 * j - 1).pow(d as u32)
}

/// Result of [`tail_sum`].
#[derive(Clone, Copy, Debug, Serialize)]
pub struct TailSum {
    /// `Σ_{|n| >= L} |n|^{-Θ}`.
    pub exact: f64,
    /// Certified bound on the truncation error in `exact`.
    pub remainder_bound: f64,
    /// `C(Θ,d) = 2d Σ_{l>=1} l^{-(Θ-d+1)/2}`.
    pub constant: f64,
    /// `C(Θ,d) L^{-(Θ-d+1)/2}`.
    pub bound: f64,
}

/// Tail sum over `|n| >= L` and its power-law bound.
pub fn tail_sum(theta: f64, l: u64, d: usize) -> Result<TailSum> {
    if !(theta - d as f64 > 1.0) {
        return Err(Error::InvalidArgument(format!(
            "tail sum needs Θ - d > 1 (got Θ = {theta}, d = {d})"
        )));
    }
    if l < 3 || d == 0 {
        return Err(Error::InvalidArgument("tail sum needs L >= 3 and d >= 1".into()));
    }
    let (exact, remainder_bound) = lattice_power_tail(theta, d, l)?;
    let sigma = (theta - d as f64 + 1.0) / 2.0;
    let constant = 2.0 * d as f64 * hurwitz_zeta(sigma, 1).0;
    let bound = constant * (l as f64).powf(-sigma);
    Ok(TailSum { exact, remainder_bound, constant, bound })
}

/// `Σ_{n∈Z^d, |n| >= L} |n|^{-Θ}` for `Θ > d`, `L >= 1`, returning the value
/// and a bound on the truncation error.
///
/// Shells `j < J` are summed directly; the remainder `Σ_{j>=J}` is expanded
/// into Hurwitz zeta values of the shell-count polynomial, each evaluated by
/// Euler–Maclaurin. Completely monotone summands make the first omitted
/// Euler–Maclaurin term a rigorous error bound. `J` is raised until that
/// bound drops below `1e-12` of the partial sum.
pub fn lattice_power_tail(theta: f64, d: usize, l: u64) -> Result<(f64, f64)> {
    if !(theta > d as f64) || l == 0 {
        return Err(Error::InvalidArgument(format!(
            "lattice power tail needs Θ > d and L >= 1 (got Θ = {theta}, d = {d}, L = {l})"
        )));
    }
    // (2j+1)^d - (2j-1)^d = Σ_{i: d-i odd} 2·C(d,i)·2^i · j^i
    let coeffs: Vec<(f64, f64)> = (0..d)
        .filter(|i| (d - i) % 2 == 1)
        .map(|i| (2.0 * binomial(d, i) * 2f64.powi(i as i32), i as f64))
        .collect();
    let mut cut = l.max(16);
    loop {
        let direct: f64 = (l..cut)
            .map(|j| shell_count(j, d) as f64 * (j as f64).powf(-theta))
            .sum();
        let mut rem = 0.0;
        let mut err = 0.0;
        for &(c, i) in &coeffs {
            let (z, e) = hurwitz_zeta(theta - i, cut);
            rem += c * z;
            err += c * e;
        }
        let total = direct + rem;
        if err < 1e-12 * total || cut > 1 << 20 {
            return Ok((total, err));
        }
        cut *= 4;
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Hurwitz zeta `Σ_{j>=a} j^{-σ}` for `σ > 1`, `a >= 1`, with an error bound.
pub fn hurwitz_zeta(sigma: f64, a: u64) -> (f64, f64) {
    // B_{2k} for k = 1..=8
    const BERNOULLI: [f64; 8] = [
        1.0 / 6.0,
        -1.0 / 30.0,
        1.0 / 42.0,
        -1.0 / 30.0,
        5.0 / 66.0,
        -691.0 / 2730.0,
        7.0 / 6.0,
        -3617.0 / 510.0,
    ];
    assert!(sigma > 1.0 && a >= 1);
    let start = a.max(24);
    let direct: f64 = (a..start).map(|j| (j as f64).powf(-sigma)).sum();
    let n = start as f64;
    let mut tail = n.powf(1.0 - sigma) / (sigma - 1.0) + 0.5 * n.powf(-sigma);
    // term_k = B_{2k}/(2k)! · σ(σ+1)…(σ+2k-2) · n^{-σ-2k+1}
    let mut rising = sigma; // σ(σ+1)…(σ+2k-2)
    let mut fact = 2.0; // (2k)!
    let mut last = 0.0;
    for (k, b) in BERNOULLI.iter().enumerate() {
        let k = k + 1;
        let term = b / fact * rising * n.powf(-sigma - 2.0 * k as f64 + 1.0);
        if k == BERNOULLI.len() {
            last = term.abs();
            break;
        }
        tail += term;
        rising *= (sigma + 2.0 * k as f64 - 1.0) * (sigma + 2.0 * k as f64);
        fact *= (2 * k + 1) as f64 * (2 * k + 2) as f64;
    }
    (direct + tail, last)
}

/// `Σ_{k∈Z^d} <k>^{-θ}` for `θ > d`.
pub fn japanese_sum(theta: f64, d: usize) -> f64 {
    1.0 + lattice_power_tail(theta, d, 1).expect("θ > d").0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(c: &[i64]) -> LatticePoint {
        LatticePoint::new(c.to_vec())
    }

    #[test]
    fn sup_distance_examples() {
        assert_eq!(sup_distance(&p(&[0, 0]), &p(&[3, -4])).unwrap(), 4);
        assert_eq!(sup_distance(&p(&[1]), &p(&[1])).unwrap(), 0);
        assert_eq!(sup_distance(&p(&[2, 2]), &p(&[2, 5])).unwrap(), 3);
        assert!(matches!(
            sup_distance(&p(&[1]), &p(&[1, 2])),
            Err(Error::DimensionMismatch(1, 2))
        ));
    }

    #[test]
    fn cube_enumeration() {
        let c = cube_points(&p(&[0]), 2).unwrap();
        let xs: Vec<i64> = c.region().points().iter().map(|q| q.0[0]).collect();
        assert_eq!(xs, vec![-2, -1, 0, 1, 2]);
        assert_eq!(cube_points(&p(&[1, 1]), 1).unwrap().len(), 9);
        assert_eq!(cube_points(&p(&[0, 0, 0]), 2).unwrap().len(), 125);
        assert!(cube_points(&p(&[0]), 0).is_err());

        let c = cube_points(&p(&[1, -1]), 2).unwrap();
        let pts = c.region().points();
        assert!(pts.windows(2).all(|w| w[0] < w[1]), "lexicographic order");
        for (i, q) in pts.iter().enumerate() {
            assert_eq!(c.region().index_of(q), Some(i));
            assert!(sup_distance(q, c.center()).unwrap() <= 2);
        }
    }

    #[test]
    fn distance_and_diameter() {
        let a = Region::from_points(1, vec![p(&[0]), p(&[5])]).unwrap();
        assert_eq!(set_diameter(&a).unwrap(), 5);
        let s = Region::from_points(1, vec![p(&[0])]).unwrap();
        let b = Region::from_points(1, vec![p(&[3]), p(&[4])]).unwrap();
        assert_eq!(set_distance(&s, &b).unwrap(), 3);
        assert_eq!(set_diameter(&s).unwrap(), 0);
        assert!(set_diameter(&Region::empty(1)).is_err());
        assert!(set_distance(&s, &Region::empty(1)).is_err());
    }

    #[test]
    fn duplicate_points_rejected() {
        assert!(Region::from_points(1, vec![p(&[1]), p(&[1])]).is_err());
    }

    #[test]
    fn shell_counts() {
        for d in 1..=3 {
            for j in 1..10u64 {
                let c = cube_points(&LatticePoint::origin(d), j).unwrap();
                let on_shell = c.region().points().iter().filter(|q| q.sup_norm() == j).count();
                assert_eq!(on_shell as u64, shell_count(j, d));
                assert!(shell_count(j, d) <= 2 * d as u64 * (2 * j + 1).pow(d as u32 - 1));
            }
        }
        // the crude bound 2d j^{d-1} fails in d = 2
        assert!(shell_count(2, 2) > 2 * 2 * 2);
    }

    /// Direct shell sum to a large cutoff plus the integral bracket for the rest.
    fn tail_oracle(theta: f64, l: u64, d: usize) -> f64 {
        let cut = 200_000u64;
        let mut s = 0.0;
        for j in (l..cut).rev() {
            s += shell_count(j, d) as f64 * (j as f64).powf(-theta);
        }
        // shell(j) ≈ 2d (2j)^{d-1} for large j
        let lead = 2.0 * d as f64 * 2f64.powi(d as i32 - 1);
        let e = theta - (d as f64 - 1.0);
        s + lead * (cut as f64 - 0.5).powf(1.0 - e) / (e - 1.0)
    }

    #[test]
    fn tail_sum_examples() {
        let t = tail_sum(3.0, 4, 1).unwrap();
        assert!((t.exact - 0.080040).abs() < 5e-6, "{}", t.exact);
        let t = tail_sum(4.0, 3, 2).unwrap();
        assert!((t.exact - 0.61646).abs() < 5e-5, "{}", t.exact);
        assert!(t.exact <= t.bound);
        assert!(tail_sum(3.0, 4, 2).is_err());
        assert!(tail_sum(5.0, 2, 1).is_err());
    }

    #[test]
    fn tail_sum_matches_oracle() {
        for &(theta, l, d) in &[(3.0, 4, 1), (4.5, 2, 2), (6.0, 8, 2), (5.0, 3, 3), (2.5, 1, 1)] {
            let t = lattice_power_tail(theta, d, l).unwrap();
            let o = tail_oracle(theta, l, d);
            assert!(((t.0 - o) / o).abs() < 1e-8, "Θ={theta} L={l} d={d}: {} vs {o}", t.0);
            assert!(t.1 <= 1e-12 * t.0);
        }
    }

    #[test]
    fn zeta_values() {
        let (z2, _) = hurwitz_zeta(2.0, 1);
        assert!((z2 - std::f64::consts::PI.powi(2) / 6.0).abs() < 1e-13);
        let (z3, _) = hurwitz_zeta(3.0, 1);
        assert!((z3 - 1.202_056_903_159_594).abs() < 1e-13);
        // slowly convergent case near σ = 1
        let (z, _) = hurwitz_zeta(1.02, 1);
        assert!((z - 50.578_670_041_015_6).abs() < 1e-8, "{z}");
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn sup_distance_is_metric(
            a in proptest::collection::vec(-50i64..50, 3),
            b in proptest::collection::vec(-50i64..50, 3),
            c in proptest::collection::vec(-50i64..50, 3),
        ) {
            let (a, b, c) = (p(&a), p(&b), p(&c));
            let ab = sup_distance(&a, &b).unwrap();
            prop_assert_eq!(ab, sup_distance(&b, &a).unwrap());
            prop_assert!(ab <= sup_distance(&a, &c).unwrap() + sup_distance(&c, &b).unwrap());
            prop_assert_eq!(ab == 0, a == b);
        }

        #[test]
        fn tail_within_bound(theta in 2.05f64..9.0, l in 3u64..40, d in 1usize..=3) {
            prop_assume!(theta - d as f64 > 1.0);
            let t = tail_sum(theta, l, d).unwrap();
            prop_assert!(t.exact <= t.bound, "{:?}", t);
        }
    }
}
