//! Sobolev norms of vectors and finite matrices indexed by lattice regions,
//! and the matrix-calculus inequalities built on them.
//!
//! For `M` with rows in `X1` and columns in `X2`,
//!
//! ```text
//! ||M||_s^2 = C0 Σ_{k ∈ X1 - X2} ( sup_{k1 - k2 = k} |M(k1,k2)| )^2 <k>^{2s},   <k> = max(1, |k|)
//! ```
//!
//! Norms are evaluated in log space: the regularity exponents used by the
//! multi-scale parameters reach the hundreds, where `<k>^{2s}` overflows.

use std::sync::Arc;

use nalgebra::{ComplexField, DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::{japanese_sum, sup_distance_unchecked, LatticePoint, Region};

/// Relative slack allowed on inequalities that hold exactly in real arithmetic.
pub const FP_SLACK: f64 = 1e-12;

/// Regularity data shared by every norm evaluation.
#[derive(Clone, Debug, Serialize)]
pub struct SobolevParams {
    pub d: usize,
    pub s0: f64,
    pub r1: f64,
    /// Normalization `C0(s0)`.
    pub c0: f64,
    /// Exponents used for norm profiles; always contains `s0` and `r1`.
    pub s_grid: Vec<f64>,
}

impl SobolevParams {
    /// `C0 = 4^{max(s0,1)} Σ_{k∈Z^d} <k>^{-2 s0}`, which makes the `s0` norm
    /// submultiplicative with constant 1.
    pub fn new(d: usize, s0: f64, r1: f64) -> Result<Self> {
        if d == 0 || !(s0 > d as f64 / 2.0) || !(r1 >= s0) {
            return Err(Error::InvalidArgument(format!(
                "Sobolev parameters need d >= 1 and d/2 < s0 <= r1 (d = {d}, s0 = {s0}, r1 = {r1})"
            )));
        }
        let c0 = 4f64.powf(s0.max(1.0)) * japanese_sum(2.0 * s0, d);
        let s_grid = if r1 > s0 { vec![s0, 0.5 * (s0 + r1), r1] } else { vec![s0] };
        Ok(Self { d, s0, r1, c0, s_grid })
    }

    /// `C(s)` in the interpolation inequalities: 1 at `s0`, `2^{s+1}` above.
    pub fn interp_constant(&self, s: f64) -> f64 {
        if s <= self.s0 {
            1.0
        } else {
            2f64.powf(s + 1.0)
        }
    }

    /// `C(s0,d)` in the columns estimate: `(Σ_k <k>^{-2 s0})^{1/2}`.
    pub fn columns_constant(&self) -> f64 {
        japanese_sum(2.0 * self.s0, self.d).sqrt()
    }

    /// Smallest band width `N` from which `||M||_s <= N^{s+s0} ||M||` holds for
    /// every matrix supported on `|k - k'| <= N`: the first `N` with
    /// `C0 (2N+1)^d <= N^{2 s0}`. `None` if it exceeds `2^40`.
    pub fn smoothing_n0(&self) -> Option<u64> {
        let ok = |n: u64| {
            let n = n as f64;
            self.c0.ln() + self.d as f64 * (2.0 * n + 1.0).ln() <= 2.0 * self.s0 * n.ln()
        };
        let mut hi = 1u64;
        while !ok(hi) {
            if hi > 1 << 40 {
                return None;
            }
            hi *= 2;
        }
        let mut lo = hi / 2;
        while lo + 1 < hi {
            let mid = (lo + hi) / 2;
            if ok(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Some(if lo >= 1 && ok(lo) { lo } else { hi })
    }
}

/// A finite matrix whose rows and columns are indexed by lattice regions.
#[derive(Clone, Debug)]
pub struct SobolevMatrix<T: ComplexField<RealField = f64> + Copy = f64> {
    rows: Arc<Region>,
    cols: Arc<Region>,
    data: DMatrix<T>,
}

impl<T: ComplexField<RealField = f64> + Copy> SobolevMatrix<T> {
    pub fn new(rows: Arc<Region>, cols: Arc<Region>, data: DMatrix<T>) -> Result<Self> {
        if data.nrows() != rows.len() || data.ncols() != cols.len() {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} entries for {}x{} index sets",
                data.nrows(),
                data.ncols(),
                rows.len(),
                cols.len()
            )));
        }
        if rows.dim() != cols.dim() {
            return Err(Error::DimensionMismatch(rows.dim(), cols.dim()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: Arc<Region>, cols: Arc<Region>) -> Self {
        let data = DMatrix::zeros(rows.len(), cols.len());
        Self { rows, cols, data }
    }

    pub fn identity(region: Arc<Region>) -> Self {
        let data = DMatrix::identity(region.len(), region.len());
        Self { rows: region.clone(), cols: region, data }
    }

    pub fn rows(&self) -> &Arc<Region> {
        &self.rows
    }

    pub fn cols(&self) -> &Arc<Region> {
        &self.cols
    }

    pub fn data(&self) -> &DMatrix<T> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut DMatrix<T> {
        &mut self.data
    }

    pub fn into_data(self) -> DMatrix<T> {
        self.data
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.shape()
    }

    /// Entry at lattice coordinates, if both points are indexed.
    pub fn get(&self, row: &LatticePoint, col: &LatticePoint) -> Option<T> {
        Some(self.data[(self.rows.index_of(row)?, self.cols.index_of(col)?)])
    }

    /// `M^{Y1}_{Y2}`: restriction to sub-index sets.
    pub fn restrict(&self, rows: &Arc<Region>, cols: &Arc<Region>) -> Result<Self> {
        let ri = indices_in(&self.rows, rows)?;
        let ci = indices_in(&self.cols, cols)?;
        let data = DMatrix::from_fn(ri.len(), ci.len(), |i, j| self.data[(ri[i], ci[j])]);
        Ok(Self { rows: rows.clone(), cols: cols.clone(), data })
    }

    /// Matrix product; the column set of `self` must equal the row set of `rhs`.
    pub fn mul(&self, rhs: &Self) -> Result<Self> {
        if !same_region(&self.cols, &rhs.rows) {
            return Err(Error::ShapeMismatch("product of non-composable index sets".into()));
        }
        Ok(Self { rows: self.rows.clone(), cols: rhs.cols.clone(), data: &self.data * &rhs.data })
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.check_same_shape(rhs)?;
        Ok(Self { rows: self.rows.clone(), cols: self.cols.clone(), data: &self.data + &rhs.data })
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.check_same_shape(rhs)?;
        Ok(Self { rows: self.rows.clone(), cols: self.cols.clone(), data: &self.data - &rhs.data })
    }

    pub fn scale(&self, a: T) -> Self {
        Self { rows: self.rows.clone(), cols: self.cols.clone(), data: &self.data * a }
    }

    fn check_same_shape(&self, rhs: &Self) -> Result<()> {
        if same_region(&self.rows, &rhs.rows) && same_region(&self.cols, &rhs.cols) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch("sum of differently indexed matrices".into()))
        }
    }

    /// Column sub-matrix `M_{{k}}` for the column at index `j`.
    pub fn column(&self, j: usize) -> Self {
        let col = Region::from_points(self.cols.dim(), vec![self.cols.point(j).clone()])
            .expect("single point");
        Self { rows: self.rows.clone(), cols: Arc::new(col), data: self.data.columns(j, 1).into_owned() }
    }

    /// Keep only entries where `keep(row_point, col_point)` holds.
    pub fn mask(&self, keep: impl Fn(&LatticePoint, &LatticePoint) -> bool) -> Self {
        let mut data = self.data.clone();
        for j in 0..data.ncols() {
            let cp = self.cols.point(j);
            for i in 0..data.nrows() {
                if !keep(self.rows.point(i), cp) {
                    data[(i, j)] = T::zero();
                }
            }
        }
        Self { rows: self.rows.clone(), cols: self.cols.clone(), data }
    }

    /// Largest `|k - k'|` over nonzero entries (`None` for the zero matrix).
    pub fn max_offset_of_support(&self) -> Option<u64> {
        self.support_offsets().max()
    }

    /// Smallest `|k - k'|` over nonzero entries (`None` for the zero matrix).
    pub fn min_offset_of_support(&self) -> Option<u64> {
        self.support_offsets().min()
    }

    fn support_offsets(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.data.ncols()).flat_map(move |j| {
            (0..self.data.nrows()).filter_map(move |i| {
                (self.data[(i, j)].modulus() != 0.0).then(|| {
                    sup_distance_unchecked(self.rows.point(i).coords(), self.cols.point(j).coords())
                })
            })
        })
    }

    /// Operator (spectral) norm.
    pub fn spectral_norm(&self) -> f64 {
        spectral_norm(&self.data)
    }

    /// Per-diagonal suprema, the input to every Sobolev norm.
    pub fn diagonal_sups(&self) -> DiagonalSups {
        DiagonalSups::of(&self.rows, &self.cols, |i, j| self.data[(i, j)].modulus())
    }

    /// `||M||_s`.
    pub fn norm(&self, s: f64, params: &SobolevParams) -> f64 {
        self.diagonal_sups().norm(s, params)
    }

    /// `ln ||M||_s`.
    pub fn log_norm(&self, s: f64, params: &SobolevParams) -> f64 {
        self.diagonal_sups().log_norm(s, params)
    }

    /// Norms on the parameter grid plus the operator norm.
    pub fn profile(&self, params: &SobolevParams) -> NormProfile {
        let sups = self.diagonal_sups();
        NormProfile {
            s: params.s_grid.clone(),
            log_values: params.s_grid.iter().map(|&s| sups.log_norm(s, params)).collect(),
            spectral: self.spectral_norm(),
        }
    }
}

pub(crate) fn same_region(a: &Arc<Region>, b: &Arc<Region>) -> bool {
    Arc::ptr_eq(a, b) || a.points() == b.points()
}

fn indices_in(parent: &Region, sub: &Region) -> Result<Vec<usize>> {
    sub.points()
        .iter()
        .map(|p| {
            parent
                .index_of(p)
                .ok_or_else(|| Error::ShapeMismatch(format!("point {p:?} not in parent index set")))
        })
        .collect()
}

pub(crate) fn spectral_norm<T: ComplexField<RealField = f64> + Copy>(m: &DMatrix<T>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// `ln Σ exp(t)`, `-inf` for no terms.
pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return top;
    }
    top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln()
}

/// Suprema of `|M(k1,k2)|` grouped by diagonal `k = k1 - k2`.
#[derive(Clone, Debug)]
pub struct DiagonalSups {
    /// `(|k|, sup)` per occupied diagonal.
    entries: Vec<(u64, f64)>,
}

impl DiagonalSups {
    pub(crate) fn of(rows: &Region, cols: &Region, abs: impl Fn(usize, usize) -> f64) -> Self {
        OffsetTable::new(rows, cols).sups(abs)
    }

    /// `ln ||M||_s`; `-inf` for the zero matrix.
    pub fn log_norm(&self, s: f64, params: &SobolevParams) -> f64 {
        // ln Σ exp(2 ln sup + 2 s ln<k>), evaluated stably
        let terms: Vec<f64> = self
            .entries
            .iter()
            .filter(|(_, a)| *a > 0.0)
            .map(|&(k, a)| 2.0 * a.ln() + 2.0 * s * (k.max(1) as f64).ln())
            .collect();
        0.5 * (params.c0.ln() + log_sum_exp(&terms))
    }

    pub fn norm(&self, s: f64, params: &SobolevParams) -> f64 {
        self.log_norm(s, params).exp()
    }

    /// `(|k|, sup)` per occupied diagonal.
    pub fn entries(&self) -> &[(u64, f64)] {
        &self.entries
    }
}

/// Diagonal index `k1 - k2` of every entry of a `|X1| x |X2|` matrix, for
/// repeated norm evaluations on the same index sets.
#[derive(Clone, Debug)]
pub struct OffsetTable {
    rows: usize,
    /// Diagonal slot per entry, column-major.
    slot: Vec<u32>,
    /// `|k|` per slot.
    radius: Vec<u64>,
}

impl OffsetTable {
    pub fn new(rows: &Region, cols: &Region) -> Self {
        let d = rows.dim();
        if rows.is_empty() || cols.is_empty() {
            return Self { rows: rows.len(), slot: Vec::new(), radius: Vec::new() };
        }
        let bounds = |r: &Region, axis: usize| {
            let it = r.points().iter().map(|p| p.coords()[axis]);
            (it.clone().min().unwrap(), it.max().unwrap())
        };
        // mixed-radix code for k1 - k2 over the bounding box of X1 - X2
        let mut lo = vec![0i64; d];
        let mut stride = vec![0usize; d];
        let mut size = 1usize;
        for axis in (0..d).rev() {
            let (rmin, rmax) = bounds(rows, axis);
            let (cmin, cmax) = bounds(cols, axis);
            lo[axis] = rmin - cmax;
            stride[axis] = size;
            size *= (rmax - cmin - lo[axis] + 1) as usize;
        }
        let mut compact = vec![u32::MAX; size];
        let mut radius = Vec::new();
        let mut slot = Vec::with_capacity(rows.len() * cols.len());
        for q in cols.points() {
            for p in rows.points() {
                let (p, q) = (p.coords(), q.coords());
                let code: usize = (0..d).map(|a| (p[a] - q[a] - lo[a]) as usize * stride[a]).sum();
                if compact[code] == u32::MAX {
                    compact[code] = radius.len() as u32;
                    radius.push(sup_distance_unchecked(p, q));
                }
                slot.push(compact[code]);
            }
        }
        Self { rows: rows.len(), slot, radius }
    }

    /// Per-diagonal suprema of `abs(i, j)`.
    pub fn sups(&self, abs: impl Fn(usize, usize) -> f64) -> DiagonalSups {
        let mut sup = vec![0.0f64; self.radius.len()];
        if self.rows > 0 {
            for (e, &c) in self.slot.iter().enumerate() {
                let a = abs(e % self.rows, e / self.rows);
                let s = &mut sup[c as usize];
                if a > *s {
                    *s = a;
                }
            }
        }
        DiagonalSups { entries: self.radius.iter().copied().zip(sup).collect() }
    }

    /// Sups of a dense matrix laid out like the table.
    pub fn sups_of(&self, m: &DMatrix<f64>) -> DiagonalSups {
        let mut sup = vec![0.0f64; self.radius.len()];
        for (&c, a) in self.slot.iter().zip(m.iter()) {
            let s = &mut sup[c as usize];
            *s = s.max(a.abs());
        }
        DiagonalSups { entries: self.radius.iter().copied().zip(sup).collect() }
    }

    /// `ln ||M||_s` from entrywise logarithms `ln |M(i,j)|` laid out like the
    /// table, for matrices whose entries leave the range of `f64`.
    pub fn log_norm_from_logs(&self, logs: &[f64], s: f64, params: &SobolevParams) -> f64 {
        let mut sup = vec![f64::NEG_INFINITY; self.radius.len()];
        for (&c, &a) in self.slot.iter().zip(logs) {
            let v = &mut sup[c as usize];
            *v = v.max(a);
        }
        let terms: Vec<f64> = sup
            .iter()
            .zip(&self.radius)
            .filter(|(a, _)| a.is_finite())
            .map(|(&a, &k)| 2.0 * a + 2.0 * s * (k.max(1) as f64).ln())
            .collect();
        0.5 * (params.c0.ln() + log_sum_exp(&terms))
    }

    /// `ln` of `sqrt(C0 Σ_{k∈X1-X2} <k>^{2s})`, the Sobolev norm of the all-ones matrix.
    pub fn log_ones_norm(&self, s: f64, params: &SobolevParams) -> f64 {
        DiagonalSups { entries: self.radius.iter().map(|&r| (r, 1.0)).collect() }.log_norm(s, params)
    }
}

/// Sobolev norms of one matrix on a grid of exponents.
#[derive(Clone, Debug, Serialize)]
pub struct NormProfile {
    pub s: Vec<f64>,
    pub log_values: Vec<f64>,
    pub spectral: f64,
}

impl NormProfile {
    pub fn values(&self) -> Vec<f64> {
        self.log_values.iter().map(|v| v.exp()).collect()
    }
}

/// `||u||_s` for a vector indexed by a region.
pub fn vector_norm<T: ComplexField<RealField = f64> + Copy>(
    region: &Region,
    u: &DVector<T>,
    s: f64,
    params: &SobolevParams,
) -> Result<f64> {
    if u.len() != region.len() {
        return Err(Error::ShapeMismatch(format!("vector of length {} on {} points", u.len(), region.len())));
    }
    let sum: f64 = region
        .points()
        .iter()
        .zip(u.iter())
        .map(|(k, x)| x.modulus().powi(2) * (k.sup_norm().max(1) as f64).powf(2.0 * s))
        .sum();
    Ok((params.c0 * sum).sqrt())
}

/// One side-by-side comparison `lhs <= rhs`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Inequality {
    pub lhs: f64,
    pub rhs: f64,
}

impl Inequality {
    pub fn new(lhs: f64, rhs: f64) -> Self {
        Self { lhs, rhs }
    }

    /// Holds up to [`FP_SLACK`] relative slack.
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs * (1.0 + FP_SLACK) || self.lhs <= f64::MIN_POSITIVE
    }

    pub fn ratio(&self) -> f64 {
        if self.rhs > 0.0 {
            self.lhs / self.rhs
        } else if self.lhs > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    }
}

/// Interpolation (product) inequalities for one pair of matrices.
#[derive(Clone, Debug, Serialize)]
pub struct InterpolationReport {
    pub s: f64,
    /// `||M1 M2||_{s0} <= ||M1||_{s0} ||M2||_{s0}`.
    pub algebra: Inequality,
    /// `||M1 M2||_s <= ½||M1||_{s0}||M2||_s + (C(s)/2)||M1||_s||M2||_{s0}`.
    pub tame: Inequality,
    /// `||M1 M2||_s <= C(s) ||M1||_s ||M2||_s`.
    pub product: Inequality,
}

pub fn interpolation_check<T: ComplexField<RealField = f64> + Copy>(
    m1: &SobolevMatrix<T>,
    m2: &SobolevMatrix<T>,
    s: f64,
    params: &SobolevParams,
) -> Result<InterpolationReport> {
    let prod = m1.mul(m2)?;
    let s0 = params.s0;
    let (a0, as_) = (m1.norm(s0, params), m1.norm(s, params));
    let (b0, bs) = (m2.norm(s0, params), m2.norm(s, params));
    let cs = params.interp_constant(s);
    Ok(InterpolationReport {
        s,
        algebra: Inequality::new(prod.norm(s0, params), a0 * b0),
        tame: Inequality::new(prod.norm(s, params), 0.5 * a0 * bs + 0.5 * cs * as_ * b0),
        product: Inequality::new(prod.norm(s, params), cs * as_ * bs),
    })
}

/// Power inequalities for a square matrix.
#[derive(Clone, Debug, Serialize)]
pub struct PowerReport {
    pub n: u32,
    /// `||M^n||_{s0} <= ||M||_{s0}^n`.
    pub power_s0: Inequality,
    /// `||M|| <= ||M||_{s0}`.
    pub spectral: Inequality,
    /// `||M^n||_s <= C(s) ||M||_{s0}^{n-1} ||M||_s`, at `s = r1`.
    pub power_s: Inequality,
}

pub fn power_check<T: ComplexField<RealField = f64> + Copy>(
    m: &SobolevMatrix<T>,
    n: u32,
    params: &SobolevParams,
) -> Result<PowerReport> {
    if n == 0 {
        return Err(Error::InvalidArgument("power must be >= 1".into()));
    }
    let mut p = m.clone();
    for _ in 1..n {
        p = p.mul(m)?;
    }
    let (s0, r1) = (params.s0, params.r1);
    let m0 = m.norm(s0, params);
    Ok(PowerReport {
        n,
        power_s0: Inequality::new(p.norm(s0, params), m0.powi(n as i32)),
        spectral: Inequality::new(m.spectral_norm(), m0),
        power_s: Inequality::new(
            p.norm(r1, params),
            params.interp_constant(r1) * m0.powi(n as i32 - 1) * m.norm(r1, params),
        ),
    })
}

/// Which support hypothesis of the smoothing inequalities a matrix meets.
#[derive(Clone, Debug, Serialize)]
pub struct SmoothingReport {
    pub n: u64,
    pub s: f64,
    pub s_prime: f64,
    /// `M = 0` on `|k-k'| < N` ⇒ `||M||_{s'} <= N^{-(s-s')} ||M||_s`.
    pub far: Option<Inequality>,
    /// `M = 0` on `|k-k'| > N` ⇒ `||M||_s <= N^{s-s'} ||M||_{s'}`.
    pub banded: Option<Inequality>,
    /// `M = 0` on `|k-k'| > N` ⇒ `||M||_s <= N^{s+s0} ||M||`; only claimed for `N >= N0`.
    pub banded_spectral: Option<Inequality>,
    /// Whether `N >= N0(s0,d)`, i.e. `banded_spectral` is a claim rather than a probe.
    pub spectral_claimed: bool,
}

impl SmoothingReport {
    /// All claimed inequalities hold.
    pub fn holds(&self) -> bool {
        self.far.map_or(true, |i| i.holds())
            && self.banded.map_or(true, |i| i.holds())
            && (!self.spectral_claimed || self.banded_spectral.map_or(true, |i| i.holds()))
    }
}

pub fn smoothing_check<T: ComplexField<RealField = f64> + Copy>(
    m: &SobolevMatrix<T>,
    n: u64,
    s: f64,
    s_prime: f64,
    params: &SobolevParams,
) -> Result<SmoothingReport> {
    if !(s >= s_prime && s_prime >= 0.0) || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "smoothing needs s >= s' >= 0 and N >= 1 (s = {s}, s' = {s_prime}, N = {n})"
        )));
    }
    let min_off = m.min_offset_of_support();
    let max_off = m.max_offset_of_support();
    let is_far = min_off.map_or(true, |o| o >= n);
    let is_banded = max_off.map_or(true, |o| o <= n);
    if !is_far && !is_banded {
        return Err(Error::Precondition(format!(
            "matrix support meets neither |k-k'| >= {n} nor |k-k'| <= {n}"
        )));
    }
    let nf = n as f64;
    let far = is_far.then(|| {
        Inequality::new(m.norm(s_prime, params), nf.powf(-(s - s_prime)) * m.norm(s, params))
    });
    let banded = is_banded
        .then(|| Inequality::new(m.norm(s, params), nf.powf(s - s_prime) * m.norm(s_prime, params)));
    let banded_spectral = is_banded
        .then(|| Inequality::new(m.norm(s, params), nf.powf(s + params.s0) * m.spectral_norm()));
    let spectral_claimed = params.smoothing_n0().is_some_and(|n0| n >= n0);
    Ok(SmoothingReport { n, s, s_prime, far, banded, banded_spectral, spectral_claimed })
}

/// `||M||_s <= C(s0,d) max_k ||M_{{k}}||_{s+s0}`.
pub fn columns_check<T: ComplexField<RealField = f64> + Copy>(
    m: &SobolevMatrix<T>,
    s: f64,
    params: &SobolevParams,
) -> Inequality {
    let max_col = (0..m.shape().1)
        .map(|j| m.column(j).norm(s + params.s0, params))
        .fold(0.0, f64::max);
    Inequality::new(m.norm(s, params), params.columns_constant() * max_col)
}

/// Which smallness hypothesis gates a left-inverse perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Smallness {
    /// `||P||_{s0} ||N||_{s0} <= 1/2`.
    Sobolev,
    /// `||P|| ||N|| <= 1/2`.
    Spectral,
}

/// Output of [`perturb_left_inverse`].
#[derive(Clone, Debug)]
pub struct PerturbedLeftInverse<T: ComplexField<RealField = f64> + Copy = f64> {
    pub inverse: SobolevMatrix<T>,
    /// The smallness product that was checked.
    pub smallness_product: f64,
    /// `||N_P (M+P) - I||_max / (||N_P|| ||M+P||)`.
    pub identity_residual: f64,
    /// `||N_P||_{s0} <= 2 ||N||_{s0}`; claimed under Sobolev smallness.
    pub sobolev_bound: Inequality,
    /// `||N_P|| <= 2 ||N||`; claimed whenever `||P|| ||N|| <= 1/2`.
    pub spectral_bound: Inequality,
    pub spectral_small: bool,
    pub sobolev_small: bool,
    /// `(s, ||N_P||_s, C(s)(||N||_s + ||N||_{s0}^2 ||P||_s))` on the grid above `s0`.
    pub tame_bounds: Vec<(f64, Inequality)>,
}

/// Left inverse of `M + P` from a left inverse `N` of `M`:
/// `N_P = (I + N P)^{-1} N`.
pub fn perturb_left_inverse<T: ComplexField<RealField = f64> + Copy>(
    m: &SobolevMatrix<T>,
    n: &SobolevMatrix<T>,
    p: &SobolevMatrix<T>,
    smallness: Smallness,
    identity_tol: f64,
    params: &SobolevParams,
) -> Result<PerturbedLeftInverse<T>> {
    if !same_region(n.cols(), m.rows()) || !same_region(n.rows(), m.cols()) {
        return Err(Error::ShapeMismatch("N must be indexed as a left inverse of M".into()));
    }
    m.check_same_shape(p)?;
    let left_res = identity_residual(n.data(), m.data());
    if !(left_res <= identity_tol) {
        return Err(Error::Precondition(format!(
            "N is not a left inverse of M (relative residual {left_res:e})"
        )));
    }
    let s0 = params.s0;
    let (n_s0, p_s0) = (n.norm(s0, params), p.norm(s0, params));
    let (n_sp, p_sp) = (n.spectral_norm(), p.spectral_norm());
    let sobolev_product = n_s0 * p_s0;
    let spectral_product = n_sp * p_sp;
    let smallness_product = match smallness {
        Smallness::Sobolev => sobolev_product,
        Smallness::Spectral => spectral_product,
    };
    if smallness_product > 0.5 {
        return Err(Error::Smallness { what: format!("{smallness:?} left-inverse perturbation"), product: smallness_product });
    }
    let np = n.data() * p.data();
    let dim = np.nrows();
    let lhs = DMatrix::<T>::identity(dim, dim) + np;
    let inv = lhs.lu().try_inverse().ok_or(Error::NeumannDivergence(0))?;
    let np_data = inv * n.data();
    let inverse = SobolevMatrix::new(n.rows().clone(), n.cols().clone(), np_data)?;
    let mp = m.add(p)?;
    let identity_residual = identity_residual(inverse.data(), mp.data());
    if !(identity_residual <= identity_tol) {
        return Err(Error::Reconstruction {
            what: "perturbed left inverse".into(),
            residual: identity_residual,
        });
    }
    let tame_bounds = params
        .s_grid
        .iter()
        .filter(|&&s| s > s0)
        .map(|&s| {
            let rhs = params.interp_constant(s) * (n.norm(s, params) + n_s0 * n_s0 * p.norm(s, params));
            (s, Inequality::new(inverse.norm(s, params), rhs))
        })
        .collect();
    Ok(PerturbedLeftInverse {
        sobolev_bound: Inequality::new(inverse.norm(s0, params), 2.0 * n_s0),
        spectral_bound: Inequality::new(inverse.spectral_norm(), 2.0 * n_sp),
        spectral_small: spectral_product <= 0.5,
        sobolev_small: sobolev_product <= 0.5,
        smallness_product,
        identity_residual,
        tame_bounds,
        inverse,
    })
}

/// `||L R - I||_max / max(1, ||L|| ||R||)`: size of the left-inverse defect
/// relative to the conditioning of the factors.
pub fn identity_residual<T: ComplexField<RealField = f64> + Copy>(left: &DMatrix<T>, right: &DMatrix<T>) -> f64 {
    let prod = left * right;
    let n = prod.nrows();
    let mut worst = 0.0f64;
    for j in 0..prod.ncols() {
        for i in 0..n {
            let target = if i == j { T::one() } else { T::zero() };
            worst = worst.max((prod[(i, j)] - target).modulus());
        }
    }
    worst / (spectral_norm(left) * spectral_norm(right)).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::cube_points;
    use nalgebra::Complex;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(l: u64) -> Arc<Region> {
        Arc::new(cube_points(&LatticePoint::origin(1), l).unwrap().region().clone())
    }

    fn params() -> SobolevParams {
        SobolevParams::new(1, 1.0, 3.0).unwrap()
    }

    /// Brute force over all pairs, grouping by offset with a linear scan.
    fn norm_oracle(m: &SobolevMatrix, s: f64, c0: f64) -> f64 {
        let mut offsets: Vec<(Vec<i64>, f64)> = Vec::new();
        for (i, p) in m.rows().points().iter().enumerate() {
            for (j, q) in m.cols().points().iter().enumerate() {
                let k = p.sub(q).0;
                let a = m.data()[(i, j)].abs();
                match offsets.iter_mut().find(|(o, _)| *o == k) {
                    Some((_, v)) => *v = v.max(a),
                    None => offsets.push((k, a)),
                }
            }
        }
        let sum: f64 = offsets
            .iter()
            .map(|(k, a)| {
                let r = k.iter().map(|x| x.abs()).max().unwrap().max(1) as f64;
                a * a * r.powf(2.0 * s)
            })
            .sum();
        (c0 * sum).sqrt()
    }

    #[test]
    fn c0_matches_definition() {
        let p = params();
        let zeta2 = std::f64::consts::PI.powi(2) / 6.0;
        assert!((p.c0 - 4.0 * (1.0 + 2.0 * zeta2)).abs() < 1e-10);
        assert_eq!(p.interp_constant(p.s0), 1.0);
        assert_eq!(p.interp_constant(2.0), 8.0);
        assert!(SobolevParams::new(2, 1.0, 2.0).is_err());
        assert!(SobolevParams::new(1, 1.0, 0.9).is_err());
    }

    #[test]
    fn vector_norm_examples() {
        let p = params();
        let reg = line(5);
        let mut u = DVector::zeros(reg.len());
        u[5] = 1.0; // k = 0
        assert!((vector_norm(&reg, &u, 2.0, &p).unwrap() - p.c0.sqrt()).abs() < 1e-12);
        let mut u = DVector::zeros(reg.len());
        u[8] = 1.0; // k = 3
        assert!((vector_norm(&reg, &u, 2.0, &p).unwrap() - p.c0.sqrt() * 9.0).abs() < 1e-10);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reg = line(10);
        let u = DVector::from_fn(reg.len(), |_, _| rng.gen_range(-1.0..1.0));
        let direct: f64 = reg
            .points()
            .iter()
            .zip(u.iter())
            .map(|(k, x)| x * x * (k.0[0].abs().max(1) as f64).powf(3.0))
            .sum::<f64>();
        let got = vector_norm(&reg, &u, 1.5, &p).unwrap();
        assert!(((got - (p.c0 * direct).sqrt()) / got).abs() < 1e-14);
    }

    #[test]
    fn matrix_norm_examples() {
        let p = params();
        let reg = line(3);
        let id = SobolevMatrix::<f64>::identity(reg.clone());
        assert!((id.norm(2.5, &p) - p.c0.sqrt()).abs() < 1e-12);

        let mut m = SobolevMatrix::<f64>::zeros(reg.clone(), reg.clone());
        m.data_mut()[(5, 1)] = -0.7; // offset 2 - (-2) = 4
        assert!((m.norm(2.0, &p) - p.c0.sqrt() * 0.7 * 16.0).abs() < 1e-10);

        let reg = line(5);
        let t = DMatrix::from_fn(11, 11, |i, j| {
            if i == j {
                0.0
            } else {
                ((i as f64) - (j as f64)).abs().powf(-4.0)
            }
        });
        let t = SobolevMatrix::new(reg.clone(), reg, t).unwrap();
        let o = norm_oracle(&t, 1.0, p.c0);
        assert!(((t.norm(1.0, &p) - o) / o).abs() < 1e-14);
    }

    #[test]
    fn rectangular_and_2d_norms_match_oracle() {
        let p = SobolevParams::new(2, 1.2, 2.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Arc::new(cube_points(&LatticePoint::new(vec![0, 0]), 2).unwrap().region().clone());
        let b = Arc::new(cube_points(&LatticePoint::new(vec![3, -1]), 1).unwrap().region().clone());
        let m = SobolevMatrix::new(a.clone(), b, DMatrix::from_fn(25, 9, |_, _| rng.gen_range(-1.0..1.0))).unwrap();
        for s in [0.0, 1.2, 2.5] {
            let o = norm_oracle(&m, s, p.c0);
            assert!(((m.norm(s, &p) - o) / o).abs() < 1e-13);
        }
    }

    #[test]
    fn complex_entries() {
        let p = params();
        let reg = line(1);
        let mut data = DMatrix::<Complex<f64>>::zeros(3, 3);
        data[(0, 0)] = Complex::new(3.0, 4.0);
        let m = SobolevMatrix::new(reg.clone(), reg, data).unwrap();
        assert!((m.norm(1.0, &p) - 5.0 * p.c0.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn huge_exponents_stay_finite_in_log_space() {
        let p = SobolevParams::new(1, 0.51, 323.0).unwrap();
        let reg = line(20);
        let m = SobolevMatrix::new(reg.clone(), reg, DMatrix::from_element(41, 41, 0.5)).unwrap();
        let ln = m.log_norm(323.0, &p);
        assert!(ln.is_finite());
        // offsets +40 and -40 dominate, 39 is down by (39/40)^646
        let expect = 0.5 * p.c0.ln() + 0.5f64.ln() + 323.0 * 40f64.ln() + 0.5 * 2f64.ln();
        assert!((ln - expect).abs() < 1e-3, "{ln} vs {expect}");
    }

    #[test]
    fn interpolation_identity_case() {
        let p = params();
        let id = SobolevMatrix::<f64>::identity(line(2));
        let r = interpolation_check(&id, &id, 2.0, &p).unwrap();
        assert!((r.algebra.lhs - p.c0.sqrt()).abs() < 1e-12);
        assert!((r.algebra.rhs - p.c0).abs() < 1e-10);
        assert!(r.algebra.holds());
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: Arc<Region>, cols: Arc<Region>, decay: f64) -> SobolevMatrix {
        let data = DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
            let k = sup_distance_unchecked(rows.point(i).coords(), cols.point(j).coords());
            rng.gen_range(-1.0..1.0) * (k.max(1) as f64).powf(-decay)
        });
        SobolevMatrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn algebra_and_power_bounds_on_random_pairs() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let (a, b, c) = (rng.gen_range(1..8), rng.gen_range(1..8), rng.gen_range(1..8));
            let ra = Arc::new(cube_points(&LatticePoint::new(vec![rng.gen_range(-3..3)]), a).unwrap().region().clone());
            let rb = Arc::new(cube_points(&LatticePoint::new(vec![rng.gen_range(-3..3)]), b).unwrap().region().clone());
            let rc = Arc::new(cube_points(&LatticePoint::new(vec![rng.gen_range(-3..3)]), c).unwrap().region().clone());
            let decay = rng.gen_range(0.0..4.0);
            let m1 = random_matrix(&mut rng, ra, rb.clone(), decay);
            let m2 = random_matrix(&mut rng, rb, rc, decay);
            let r = interpolation_check(&m1, &m2, 2.0, &p).unwrap();
            assert!(r.algebra.holds(), "{:?}", r.algebra);
        }
        for _ in 0..50 {
            let reg = line(rng.gen_range(1..7));
            let m = random_matrix(&mut rng, reg.clone(), reg, 1.0);
            let r = power_check(&m, 3, &p).unwrap();
            assert!(r.power_s0.holds() && r.spectral.holds(), "{r:?}");
        }
    }

    #[test]
    fn smoothing_single_far_entry() {
        let p = params();
        let reg = line(5);
        let mut m = SobolevMatrix::<f64>::zeros(reg.clone(), reg);
        m.data_mut()[(9, 2)] = 1.3; // offset 7
        let r = smoothing_check(&m, 7, 2.0, 1.0, &p).unwrap();
        let far = r.far.unwrap();
        assert!((far.lhs / m.norm(2.0, &p) - 1.0 / 7.0).abs() < 1e-14);
        assert!(far.holds());
        // also banded at N = 7
        assert!(r.banded.unwrap().holds());
    }

    #[test]
    fn smoothing_banded_equal_exponents() {
        let p = params();
        let reg = line(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_matrix(&mut rng, reg.clone(), reg, 0.0).mask(|a, b| {
            sup_distance_unchecked(a.coords(), b.coords()) <= 2
        });
        let r = smoothing_check(&m, 2, 1.5, 1.5, &p).unwrap();
        let b = r.banded.unwrap();
        assert!((b.lhs - b.rhs).abs() < 1e-12 * b.rhs);
    }

    #[test]
    fn smoothing_rejects_unsupported_shape() {
        let p = params();
        let reg = line(4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_matrix(&mut rng, reg.clone(), reg, 0.0);
        assert!(matches!(smoothing_check(&m, 3, 2.0, 1.0, &p), Err(Error::Precondition(_))));
        assert!(smoothing_check(&m, 3, 1.0, 2.0, &p).is_err());
    }

    #[test]
    fn columns_examples() {
        let p = params();
        let id = SobolevMatrix::<f64>::identity(line(3));
        let c = columns_check(&id, 1.0, &p);
        assert!(c.holds());
        let reg = line(3);
        let one = Arc::new(Region::from_points(1, vec![LatticePoint::new(vec![1])]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let col = random_matrix(&mut rng, reg, one, 0.5);
        let c = columns_check(&col, 2.0, &p);
        assert!(c.holds() && c.ratio() <= 1.0);
    }

    #[test]
    fn perturbation_scalar() {
        let p = params();
        let one = Arc::new(Region::from_points(1, vec![LatticePoint::new(vec![0])]).unwrap());
        let m = SobolevMatrix::new(one.clone(), one.clone(), DMatrix::from_element(1, 1, 2.0)).unwrap();
        let n = SobolevMatrix::new(one.clone(), one.clone(), DMatrix::from_element(1, 1, 0.5)).unwrap();
        let zero = SobolevMatrix::zeros(one.clone(), one.clone());
        let r = perturb_left_inverse(&m, &n, &zero, Smallness::Spectral, 1e-12, &p).unwrap();
        assert_eq!(r.inverse.data()[(0, 0)], 0.5);

        let pert = SobolevMatrix::new(one.clone(), one.clone(), DMatrix::from_element(1, 1, 0.1)).unwrap();
        let r = perturb_left_inverse(&m, &n, &pert, Smallness::Spectral, 1e-12, &p).unwrap();
        assert!((r.inverse.data()[(0, 0)] - 1.0 / 2.1).abs() < 1e-15);
        assert!(r.spectral_bound.holds());

        let big = SobolevMatrix::new(one.clone(), one.clone(), DMatrix::from_element(1, 1, 1.5)).unwrap();
        assert!(matches!(
            perturb_left_inverse(&m, &n, &big, Smallness::Spectral, 1e-12, &p),
            Err(Error::Smallness { .. })
        ));
    }

    #[test]
    fn perturbation_random_against_direct_inverse() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<LatticePoint> = (0..10).map(|i| LatticePoint::new(vec![i])).collect();
        let reg10 = Arc::new(Region::from_points(1, pts).unwrap());
        for _ in 0..20 {
            let m = SobolevMatrix::new(
                reg10.clone(),
                reg10.clone(),
                DMatrix::from_fn(10, 10, |i, j| if i == j { 3.0 + rng.gen::<f64>() } else { rng.gen_range(-0.2..0.2) }),
            )
            .unwrap();
            let n_data = m.data().clone().try_inverse().unwrap();
            let n = SobolevMatrix::new(reg10.clone(), reg10.clone(), n_data).unwrap();
            let raw = random_matrix(&mut rng, reg10.clone(), reg10.clone(), 1.0);
            let scale = 0.3 / (raw.norm(p.s0, &p) * n.norm(p.s0, &p));
            let pert = raw.scale(scale);
            let r = perturb_left_inverse(&m, &n, &pert, Smallness::Sobolev, 1e-10, &p).unwrap();
            let direct = m.add(&pert).unwrap().into_data().try_inverse().unwrap();
            let diff = (r.inverse.data() - &direct).abs().max();
            assert!(diff < 1e-10 * direct.abs().max(), "{diff}");
            assert!(r.identity_residual < 1e-10);
            assert!(r.sobolev_bound.holds() && r.spectral_bound.holds());
        }
    }
}
