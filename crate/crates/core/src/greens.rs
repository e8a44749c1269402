//! Finite-volume Green's functions, (E,δ)-good/bad classification, off-diagonal
//! decay checks and certification of whole energy intervals.
//!
//! A cube `Λ_L` is (E,δ)-good when `||G_Λ(E)||_s <= L^{τ'+δs}` for all
//! `s ∈ [s0, r1]`. Since `ln ||G||_s` is convex in `s` and the threshold
//! exponent is affine, the two endpoint checks decide the whole range.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::disorder::{build_hamiltonian, HoppingKernel, OperatorSample};
use crate::error::{Error, Result};
use crate::lattice::{sup_distance_unchecked, Cube, Region};
use crate::sobolev::{log_sum_exp, NormProfile, OffsetTable, SobolevMatrix, SobolevParams};

/// Thresholds of the good-cube test.
#[derive(Clone, Debug, Serialize)]
pub struct ClassifierConfig {
    pub tau_prime: f64,
    pub delta: f64,
    /// Decay parameter `ζ` of the off-diagonal bound.
    pub zeta: f64,
    pub sobolev: SobolevParams,
    /// Smallest scale at which decay bounds are claimed.
    pub decay_min_scale: u64,
}

impl ClassifierConfig {
    pub fn new(tau_prime: f64, delta: f64, zeta: f64, sobolev: SobolevParams) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) || !(tau_prime > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "classifier needs τ' > 0 and 0 < δ < 1 (τ' = {tau_prime}, δ = {delta})"
            )));
        }
        Ok(Self { tau_prime, delta, zeta, sobolev, decay_min_scale: 1 })
    }

    /// `r1 < r - d/2`.
    pub fn check_kernel(&self, kernel: &HoppingKernel) -> Result<()> {
        if kernel.d != self.sobolev.d {
            return Err(Error::DimensionMismatch(kernel.d, self.sobolev.d));
        }
        if !(self.sobolev.r1 < kernel.r - kernel.d as f64 / 2.0) {
            return Err(Error::InvalidArgument(format!(
                "need r1 < r - d/2 (r1 = {}, r = {}, d = {})",
                self.sobolev.r1, kernel.r, kernel.d
            )));
        }
        Ok(())
    }

    /// `ln L^{τ'+δs}`.
    pub fn log_threshold(&self, l: u64, s: f64, delta: f64) -> f64 {
        (self.tau_prime + delta * s) * (l as f64).ln()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Good,
    Bad,
    Singular,
}

/// Classification of one cube at one energy.
#[derive(Clone, Debug, Serialize)]
pub struct GreenResult {
    pub energy: f64,
    pub scale: u64,
    pub delta: f64,
    #[serde(skip)]
    pub matrix: Option<SobolevMatrix>,
    pub profile: Option<NormProfile>,
    pub verdict: Verdict,
    /// `min_s (ln threshold - ln ||G||_s)` over `{s0, r1}`; `-inf` when singular.
    pub log_margin: f64,
    /// `dist(E, σ(H_Λ))`.
    pub distance_to_spectrum: f64,
}

/// Symmetric eigendecomposition of `H_Λ` reused across energies.
#[derive(Clone, Debug)]
pub struct CubeSpectrum {
    region: Arc<Region>,
    eigenvalues: DVector<f64>,
    vectors: DMatrix<f64>,
    table: OffsetTable,
}

impl CubeSpectrum {
    pub fn new(h: &SobolevMatrix) -> Result<Self> {
        let (n, m) = h.shape();
        if n != m || n == 0 {
            return Err(Error::ShapeMismatch(format!("Hamiltonian must be square and nonempty, got {n}x{m}")));
        }
        if h.data() != &h.data().transpose() {
            return Err(Error::Precondition("Hamiltonian is not symmetric".into()));
        }
        // nalgebra's tridiagonal QR loses orthogonality when the hopping is tiny
        // next to the potential; the real Schur form stays backward stable.
        let (q, t) = h
            .data()
            .clone()
            .try_schur(f64::EPSILON, 0)
            .ok_or_else(|| Error::Eigensolver("Schur iteration did not converge".into()))?
            .unpack();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| t[(i, i)].total_cmp(&t[(j, j)]));
        let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| t[(i, i)]));
        if eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(Error::Eigensolver("non-finite eigenvalue".into()));
        }
        let vectors = q.select_columns(&order);
        let table = OffsetTable::new(h.rows(), h.cols());
        Ok(Self { region: h.rows().clone(), eigenvalues, vectors, table })
    }

    pub fn of_sample(sample: &OperatorSample, kernel: &HoppingKernel) -> Result<Self> {
        Self::new(&build_hamiltonian(sample, kernel)?)
    }

    pub fn region(&self) -> &Arc<Region> {
        &self.region
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Orthonormal eigenvectors, one column per eigenvalue.
    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn distance_to_spectrum(&self, e: f64) -> f64 {
        self.eigenvalues.iter().map(|v| (v - e).abs()).fold(f64::INFINITY, f64::min)
    }

    /// `||H - E||`.
    pub fn shifted_norm(&self, e: f64) -> f64 {
        self.eigenvalues.iter().map(|v| (v - e).abs()).fold(0.0, f64::max)
    }

    /// `dist(E, σ) < sqrt(eps) ||H - E||`.
    pub fn is_singular(&self, e: f64) -> bool {
        self.distance_to_spectrum(e) < f64::EPSILON.sqrt() * self.shifted_norm(e)
    }

    /// `Q diag(1/(λ-E)) Qᵀ`, without the singularity test.
    pub fn resolvent_data(&self, e: f64) -> DMatrix<f64> {
        let mut scaled = self.vectors.clone();
        for (j, v) in self.eigenvalues.iter().enumerate() {
            let f = 1.0 / (v - e);
            scaled.column_mut(j).scale_mut(f);
        }
        scaled * self.vectors.transpose()
    }

    /// `(ln ||G(E)||_{s0}, ln ||G(E)||_{r1})`.
    pub fn log_endpoint_norms(&self, e: f64, params: &SobolevParams) -> (f64, f64) {
        let sups = self.table.sups_of(&self.resolvent_data(e));
        (sups.log_norm(params.s0, params), sups.log_norm(params.r1, params))
    }

    pub(crate) fn table(&self) -> &OffsetTable {
        &self.table
    }
}

/// `G_Λ(E) = (H_Λ - E)^{-1}` and its relative residual.
#[derive(Clone, Debug)]
pub struct Resolvent {
    pub energy: f64,
    pub matrix: SobolevMatrix,
    /// `||(H-E)G - I||_max / (||H-E|| ||G||)`.
    pub residual: f64,
}

/// Computes the resolvent through the eigendecomposition. Fails with
/// [`Error::Singular`] when `dist(E, σ(H)) < sqrt(eps) ||H - E||`.
pub fn green_function(h: &SobolevMatrix, e: f64) -> Result<Resolvent> {
    let spec = CubeSpectrum::new(h)?;
    green_from_spectrum(h, &spec, e)
}

fn green_from_spectrum(h: &SobolevMatrix, spec: &CubeSpectrum, e: f64) -> Result<Resolvent> {
    if spec.is_singular(e) {
        return Err(Error::Singular { energy: e, sigma_min: spec.distance_to_spectrum(e) });
    }
    let g = spec.resolvent_data(e);
    let n = g.nrows();
    let shifted = h.data() - DMatrix::identity(n, n) * e;
    let prod = &shifted * &g;
    let defect = (prod - DMatrix::<f64>::identity(n, n)).abs().max();
    let residual = defect / (spec.shifted_norm(e) / spec.distance_to_spectrum(e));
    if !(residual <= 1e-10) {
        return Err(Error::Reconstruction { what: "resolvent".into(), residual });
    }
    let matrix = SobolevMatrix::new(h.rows().clone(), h.cols().clone(), g)?;
    Ok(Resolvent { energy: e, matrix, residual })
}

/// Endpoint verdict for a matrix viewed as `G` on a cube of scale `l`.
pub fn classify_matrix(g: &SobolevMatrix, l: u64, delta: f64, config: &ClassifierConfig) -> (Verdict, f64, NormProfile) {
    let p = &config.sobolev;
    let profile = g.profile(p);
    let (l0, l1) = (profile.log_values[0], *profile.log_values.last().unwrap());
    let margin = (config.log_threshold(l, p.s0, delta) - l0).min(config.log_threshold(l, p.r1, delta) - l1);
    let verdict = if margin >= 0.0 { Verdict::Good } else { Verdict::Bad };
    (verdict, margin, profile)
}

/// The same verdict decided on `points` equally spaced exponents in `[s0, r1]`.
pub fn classify_matrix_dense(g: &SobolevMatrix, l: u64, delta: f64, config: &ClassifierConfig, points: usize) -> Verdict {
    let p = &config.sobolev;
    let sups = g.diagonal_sups();
    let all = (0..points).all(|i| {
        let s = if points == 1 { p.s0 } else { p.s0 + (p.r1 - p.s0) * i as f64 / (points - 1) as f64 };
        sups.log_norm(s, p) <= config.log_threshold(l, s, delta)
    });
    if all {
        Verdict::Good
    } else {
        Verdict::Bad
    }
}

/// Classification of an explicit Hamiltonian on a cube of scale `l` at exponent `delta`.
pub fn classify_hamiltonian(h: &SobolevMatrix, l: u64, e: f64, delta: f64, config: &ClassifierConfig) -> Result<GreenResult> {
    let spec = CubeSpectrum::new(h)?;
    classify_with_spectrum(h, &spec, l, e, delta, config)
}

pub(crate) fn classify_with_spectrum(
    h: &SobolevMatrix,
    spec: &CubeSpectrum,
    l: u64,
    e: f64,
    delta: f64,
    config: &ClassifierConfig,
) -> Result<GreenResult> {
    let distance_to_spectrum = spec.distance_to_spectrum(e);
    match green_from_spectrum(h, spec, e) {
        Ok(res) => {
            let (verdict, log_margin, profile) = classify_matrix(&res.matrix, l, delta, config);
            Ok(GreenResult {
                energy: e,
                scale: l,
                delta,
                matrix: Some(res.matrix),
                profile: Some(profile),
                verdict,
                log_margin,
                distance_to_spectrum,
            })
        }
        Err(Error::Singular { .. }) => Ok(GreenResult {
            energy: e,
            scale: l,
            delta,
            matrix: None,
            profile: None,
            verdict: Verdict::Singular,
            log_margin: f64::NEG_INFINITY,
            distance_to_spectrum,
        }),
        Err(other) => Err(other),
    }
}

/// Classifies `cube` for the realization in `sample` (which must cover it).
pub fn classify_cube(
    sample: &OperatorSample,
    kernel: &HoppingKernel,
    cube: &Cube,
    e: f64,
    config: &ClassifierConfig,
) -> Result<GreenResult> {
    config.check_kernel(kernel)?;
    let sub = sample.restrict(Arc::new(cube.region().clone()))?;
    let h = build_hamiltonian(&sub, kernel)?;
    classify_hamiltonian(&h, cube.radius(), e, config.delta, config)
}

/// Result of [`decay_check`].
#[derive(Clone, Debug, Serialize)]
pub struct DecayReport {
    pub exponent: f64,
    pub pairs_checked: usize,
    pub violations: usize,
    /// Largest `|G(n',n'')| / |n'-n''|^{-(1-ζ) r1}` over checked pairs.
    pub worst_ratio: f64,
    /// The scale is below `decay_min_scale`, where the bound is not claimed.
    pub below_claimed_scale: bool,
}

impl DecayReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// `|G(n',n'')| <= |n'-n''|^{-(1-ζ) r1}` for all pairs with `|n'-n''| >= L/2`.
pub fn decay_check(result: &GreenResult, config: &ClassifierConfig) -> Result<DecayReport> {
    let (zeta, delta, r1) = (config.zeta, result.delta, config.sobolev.r1);
    if result.verdict != Verdict::Good {
        return Err(Error::Precondition("decay check needs a good cube".into()));
    }
    if !(zeta > delta && zeta < 1.0) {
        return Err(Error::Precondition(format!("need δ < ζ < 1 (δ = {delta}, ζ = {zeta})")));
    }
    if !(config.tau_prime - (zeta - delta) * r1 < 0.0) {
        return Err(Error::Precondition("need τ' - (ζ-δ) r1 < 0".into()));
    }
    let g = result.matrix.as_ref().ok_or(Error::Precondition("resolvent not stored".into()))?;
    let exponent = (1.0 - zeta) * r1;
    let (rows, cols) = (g.rows(), g.cols());
    let (mut pairs_checked, mut violations, mut worst_ratio) = (0, 0, 0.0f64);
    for j in 0..cols.len() {
        for i in 0..rows.len() {
            let k = sup_distance_unchecked(rows.point(i).coords(), cols.point(j).coords());
            if 2 * k < result.scale {
                continue;
            }
            pairs_checked += 1;
            let ratio = g.data()[(i, j)].abs() * (k as f64).powf(exponent);
            worst_ratio = worst_ratio.max(ratio);
            if ratio > 1.0 {
                violations += 1;
            }
        }
    }
    Ok(DecayReport {
        exponent,
        pairs_checked,
        violations,
        worst_ratio,
        below_claimed_scale: result.scale < config.decay_min_scale,
    })
}

/// Outcome of [`certify_interval`].
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "verdict", rename_all = "lowercase")]
pub enum IntervalVerdict {
    /// Good for every `E` in the interval.
    Good { evaluations: usize },
    /// Bad (or singular) at `energy`, which lies in the interval.
    Bad { energy: f64, singular: bool },
    /// Refinement budget exhausted; `uncertified` is the total width left open.
    Unknown { uncertified: f64, evaluations: usize },
}

impl IntervalVerdict {
    pub fn is_good(&self) -> bool {
        matches!(self, IntervalVerdict::Good { .. })
    }

    pub fn is_bad(&self) -> bool {
        matches!(self, IntervalVerdict::Bad { .. })
    }
}

/// Refinement limits for [`certify_interval`].
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CertifyBudget {
    pub initial_cells: usize,
    pub max_evaluations: usize,
}

impl Default for CertifyBudget {
    fn default() -> Self {
        Self { initial_cells: 8, max_evaluations: 2048 }
    }
}

/// Certifies a cube as (E,δ)-good for every `E ∈ [a, b]`, or finds a bad energy.
///
/// Each cell `[E_i - h/2, E_i + h/2]` is certified when `||G(E_i)||_s` is within
/// half the threshold and the resolvent-identity bound
/// `||G(E) - G(E_i)||_s <= W_s (h/2) / (d_i (d_i - h/2))` covers the other half,
/// where `d_i = dist(E_i, σ)` and `W_s` is the `s`-norm of the all-ones matrix
/// on the cube. Undecided cells are bisected.
pub fn certify_spectrum(
    spec: &CubeSpectrum,
    l: u64,
    (a, b): (f64, f64),
    delta: f64,
    config: &ClassifierConfig,
    budget: CertifyBudget,
) -> Result<IntervalVerdict> {
    if !(b >= a) || b - a > 1.0 {
        return Err(Error::InvalidArgument(format!("interval [{a}, {b}] must have 0 <= length <= 1")));
    }
    if let Some(&ev) = spec.eigenvalues.iter().find(|&&v| a <= v && v <= b) {
        return Ok(IntervalVerdict::Bad { energy: ev, singular: true });
    }
    let p = &config.sobolev;
    let half = 2f64.ln();
    let ends = [p.s0, p.r1];
    let thr = ends.map(|s| config.log_threshold(l, s, delta));
    let log_w = ends.map(|s| spec.table().log_ones_norm(s, p));
    let n0 = budget.initial_cells.max(1);
    let h0 = (b - a) / n0 as f64;
    let mut cells: Vec<(f64, f64)> = (0..n0).map(|i| (a + h0 * (i as f64 + 0.5), h0)).collect();
    let mut evaluations = 0;
    while !cells.is_empty() {
        let mut next = Vec::new();
        for (c, h) in cells {
            if evaluations >= budget.max_evaluations {
                let open = next.iter().map(|&(_, w)| w).sum::<f64>() + h;
                return Ok(IntervalVerdict::Unknown { uncertified: open, evaluations });
            }
            evaluations += 1;
            let dist = spec.distance_to_spectrum(c);
            if spec.is_singular(c) {
                return Ok(IntervalVerdict::Bad { energy: c, singular: true });
            }
            let (n_s0, n_r1) = spec.log_endpoint_norms(c, p);
            let norms = [n_s0, n_r1];
            if norms[0] > thr[0] || norms[1] > thr[1] {
                return Ok(IntervalVerdict::Bad { energy: c, singular: false });
            }
            let gap = dist - 0.5 * h;
            let certified = gap > 0.0
                && (0..2).all(|i| {
                    let pert = log_w[i] + (0.5 * h).ln() - dist.ln() - gap.ln();
                    norms[i] <= thr[i] - half && pert <= thr[i] - half
                });
            if !certified {
                next.push((c - 0.25 * h, 0.5 * h));
                next.push((c + 0.25 * h, 0.5 * h));
            }
        }
        cells = next;
    }
    Ok(IntervalVerdict::Good { evaluations })
}

/// [`certify_spectrum`] for the sub-cube `cube` of a sample, at the configured `δ`.
pub fn certify_interval(
    sample: &OperatorSample,
    kernel: &HoppingKernel,
    cube: &Cube,
    interval: (f64, f64),
    config: &ClassifierConfig,
    budget: CertifyBudget,
) -> Result<IntervalVerdict> {
    config.check_kernel(kernel)?;
    let sub = sample.restrict(Arc::new(cube.region().clone()))?;
    let spec = CubeSpectrum::of_sample(&sub, kernel)?;
    certify_spectrum(&spec, cube.radius(), interval, config.delta, config, budget)
}

/// Entrywise Neumann majorant of `G_Λ(E)`, valid for every `E` in an interval.
#[derive(Clone, Debug, Serialize)]
pub struct MajorantBound {
    /// Largest row sum of `|D⁻¹| λ⁻¹|T|`, with `|D⁻¹|_i = 1/dist(V_i, [a, b])`.
    pub contraction: f64,
    /// Neumann terms summed before the geometric tail bound takes over.
    pub terms: usize,
    /// Bounds on `ln ||G(E)||_s` at `s0` and `r1`.
    pub log_norms: (f64, f64),
    /// `min_s (ln threshold - bound)`; the cube is good on the interval when `>= 0`.
    pub log_margin: f64,
}

impl MajorantBound {
    pub fn is_good(&self) -> bool {
        self.log_margin >= 0.0
    }
}

/// Bounds `|G(E)| <= Σ_n (|D⁻¹||P|)^n |D⁻¹|` entrywise for `H = D + P`,
/// `D = V - E`, `P = λ⁻¹T`, uniformly in `E ∈ [a, b]`.
///
/// The sum runs in log space: all terms are nonnegative, so there is no
/// cancellation and entries far below `f64` range keep their relative
/// accuracy. Dense resolvents cannot do this, since rounding leaves an
/// absolute floor near `1e-16 ||G||` that large `s` weights amplify. Terms
/// past `terms` are bounded by `ρ^n max|D⁻¹|` with `ρ` the contraction.
/// Returns `None` when a potential value lies in the interval or `ρ >= 1`.
pub fn majorant_certificate(
    sample: &OperatorSample,
    kernel: &HoppingKernel,
    (a, b): (f64, f64),
    l: u64,
    delta: f64,
    config: &ClassifierConfig,
) -> Result<Option<MajorantBound>> {
    let region = &sample.region;
    let n = region.len();
    let pts = region.points();
    let log_dinv: Vec<f64> = sample
        .potential
        .iter()
        .map(|&v| {
            let dist = if v < a { a - v } else if v > b { v - b } else { 0.0 };
            -dist.ln()
        })
        .collect();
    if log_dinv.iter().any(|x| !x.is_finite()) {
        return Ok(None);
    }
    let log_lambda_inv = -sample.lambda.ln();
    // row-major ln(|D⁻¹||P|)
    let mut log_a = vec![f64::NEG_INFINITY; n * n];
    let mut diam = 1u64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let k = sup_distance_unchecked(pts[i].coords(), pts[j].coords());
                diam = diam.max(k);
                log_a[i * n + j] = log_dinv[i] + log_lambda_inv - kernel.r * (k as f64).ln();
            }
        }
    }
    let log_rho = (0..n).map(|i| log_sum_exp(&log_a[i * n..(i + 1) * n])).fold(f64::NEG_INFINITY, f64::max);
    if !(log_rho < 0.0) {
        return Ok(None);
    }
    let p = &config.sobolev;
    let log_dmax = log_dinv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let want = p.r1 * (diam as f64).ln() + log_dmax.abs() + 60.0;
    let terms = if log_rho == f64::NEG_INFINITY { 1 } else { ((want / -log_rho).ceil() as usize).clamp(1, 4096) };
    // X_0 = |D⁻¹|, X_{m+1} = (|D⁻¹||P|) X_m, S = Σ X_m, all row-major logs
    let mut x = vec![f64::NEG_INFINITY; n * n];
    for i in 0..n {
        x[i * n + i] = log_dinv[i];
    }
    let mut sum = x.clone();
    let mut buf = vec![0.0; n];
    for _ in 1..terms {
        let mut next = vec![f64::NEG_INFINITY; n * n];
        for i in 0..n {
            for j in 0..n {
                for (m, t) in buf.iter_mut().enumerate() {
                    *t = log_a[i * n + m] + x[m * n + j];
                }
                next[i * n + j] = log_sum_exp(&buf);
            }
        }
        x = next;
        for (s, &v) in sum.iter_mut().zip(&x) {
            *s = log_sum_exp(&[*s, v]);
        }
    }
    let log_tail = terms as f64 * log_rho - (-log_rho.exp()).ln_1p() + log_dmax;
    let table = OffsetTable::new(region, region);
    let mut col_major = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            col_major[j * n + i] = log_sum_exp(&[sum[i * n + j], log_tail]);
        }
    }
    let log_norms = (table.log_norm_from_logs(&col_major, p.s0, p), table.log_norm_from_logs(&col_major, p.r1, p));
    let log_margin = (config.log_threshold(l, p.s0, delta) - log_norms.0).min(config.log_threshold(l, p.r1, delta) - log_norms.1);
    Ok(Some(MajorantBound { contraction: log_rho.exp(), terms, log_norms, log_margin }))
}

/// Majorant shared by every cube `Λ_l` whose potential stays at distance
/// `>= gap` from the energy interval: `|G(E)(x, x+k)| <= g(k)` with
/// `g = Σ_n gap⁻¹ (gap⁻¹λ⁻¹|T|)^{*n}`, the convolution powers taken over the
/// offset window `[-2l, 2l]^d` that contains every path inside the cube.
pub fn uniform_majorant(
    kernel: &HoppingKernel,
    lambda: f64,
    gap: f64,
    l: u64,
    delta: f64,
    config: &ClassifierConfig,
) -> Result<MajorantBound> {
    if !(gap > 0.0 && lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("need gap > 0 and λ > 0 (gap = {gap}, λ = {lambda})")));
    }
    let d = kernel.d;
    let w = 2 * l as i64;
    let side = (2 * w + 1) as usize;
    let size = side.pow(d as u32);
    let coords = |mut idx: usize| -> Vec<i64> {
        let mut c = vec![0i64; d];
        for a in (0..d).rev() {
            c[a] = (idx % side) as i64 - w;
            idx /= side;
        }
        c
    };
    let index = |c: &[i64]| -> Option<usize> {
        let mut idx = 0usize;
        for &x in c {
            if x.abs() > w {
                return None;
            }
            idx = idx * side + (x + w) as usize;
        }
        Some(idx)
    };
    let radius: Vec<u64> = (0..size).map(|i| coords(i).iter().map(|x| x.unsigned_abs()).max().unwrap_or(0)).collect();
    let log_step = -gap.ln() - lambda.ln();
    let log_t: Vec<f64> = radius.iter().map(|&k| if k == 0 { f64::NEG_INFINITY } else { log_step - kernel.r * (k as f64).ln() }).collect();
    let log_rho = log_step + kernel.schur_bound().ln();
    if !(log_rho < 0.0) {
        return Err(Error::Smallness { what: "uniform Neumann majorant".into(), product: log_rho.exp() });
    }
    let p = &config.sobolev;
    let want = p.r1 * (2.0 * l as f64).max(1.0).ln() + gap.ln().abs() + 60.0;
    let terms = ((want / -log_rho).ceil() as usize).clamp(1, 4096);
    // pairs (j, k - j) inside the window, per k
    let shifts: Vec<Vec<(usize, usize)>> = (0..size)
        .map(|k| {
            let ck = coords(k);
            (0..size)
                .filter(|&j| radius[j] > 0)
                .filter_map(|j| {
                    let cj = coords(j);
                    let diff: Vec<i64> = ck.iter().zip(&cj).map(|(a, b)| a - b).collect();
                    index(&diff).map(|m| (j, m))
                })
                .collect()
        })
        .collect();
    let centre = index(&vec![0; d]).expect("origin in window");
    let mut g = vec![f64::NEG_INFINITY; size];
    g[centre] = -gap.ln();
    let mut sum = g.clone();
    let mut buf = Vec::new();
    for _ in 1..terms {
        let next: Vec<f64> = shifts
            .iter()
            .map(|pairs| {
                buf.clear();
                buf.extend(pairs.iter().map(|&(j, m)| log_t[j] + g[m]).filter(|v| v.is_finite()));
                log_sum_exp(&buf)
            })
            .collect();
        g = next;
        for (s, &v) in sum.iter_mut().zip(&g) {
            *s = log_sum_exp(&[*s, v]);
        }
    }
    let log_tail = terms as f64 * log_rho - (-log_rho.exp()).ln_1p() - gap.ln();
    let log_norm = |s: f64| {
        let terms: Vec<f64> = sum
            .iter()
            .zip(&radius)
            .map(|(&v, &k)| 2.0 * log_sum_exp(&[v, log_tail]) + 2.0 * s * (k.max(1) as f64).ln())
            .collect();
        0.5 * (p.c0.ln() + log_sum_exp(&terms))
    };
    let log_norms = (log_norm(p.s0), log_norm(p.r1));
    let log_margin = (config.log_threshold(l, p.s0, delta) - log_norms.0).min(config.log_threshold(l, p.r1, delta) - log_norms.1);
    Ok(MajorantBound { contraction: log_rho.exp(), terms, log_norms, log_margin })
}
