//! Coupling-lemma machinery: good-site reduction, bad-site reduction, the left
//! inverse of the reduced operator, block reconstruction of `A⁻¹`, and the
//! clustering of bad small cubes (Vitali cover and chaining).
//!
//! Matrices act on column vectors: `u_G = 𝓝 u_B + 𝓜 h` means `𝓝` has rows
//! indexed by `G` and columns by `B`. In particular the entries of `Γ` and `𝓛`
//! attached to a good site `k` form row `k`, taken from `G_{F_k}(E)`.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::disorder::{build_hamiltonian, HoppingKernel, OperatorSample};
use crate::error::{Error, Result};
use crate::greens::{classify_matrix, ClassifierConfig, CubeSpectrum, Verdict};
use crate::lattice::{box_points, cube_points, set_diameter, set_distance, sup_distance_unchecked, Cube, LatticePoint, Region};
use crate::sobolev::{identity_residual, perturb_left_inverse, same_region, Smallness, SobolevMatrix};

/// Verdicts of every `l`-cube inside a big cube, at one energy.
#[derive(Clone, Debug)]
pub struct SmallCubeSurvey {
    pub l: u64,
    /// Centers `m` with `Λ_l(m) ⊂ Λ`, lexicographic.
    pub centers: Vec<LatticePoint>,
    cubes: HashMap<LatticePoint, SmallCube>,
}

#[derive(Clone, Debug)]
pub struct SmallCube {
    pub cube: Cube,
    pub verdict: Verdict,
    pub green: Option<SobolevMatrix>,
}

impl SmallCubeSurvey {
    pub fn get(&self, m: &LatticePoint) -> Option<&SmallCube> {
        self.cubes.get(m)
    }

    pub fn is_good(&self, m: &LatticePoint) -> bool {
        self.cubes.get(m).is_some_and(|c| c.verdict == Verdict::Good)
    }

    pub fn bad_centers(&self) -> Vec<LatticePoint> {
        self.centers.iter().filter(|m| !self.is_good(m)).cloned().collect()
    }
}

/// Classifies all `l`-cubes contained in `big` at energy `e`.
pub fn survey_small_cubes(
    sample: &OperatorSample,
    kernel: &HoppingKernel,
    big: &Cube,
    l: u64,
    e: f64,
    config: &ClassifierConfig,
) -> Result<SmallCubeSurvey> {
    if l == 0 || l >= big.radius() {
        return Err(Error::InvalidArgument(format!("need 1 <= l < L (l = {l}, L = {})", big.radius())));
    }
    config.check_kernel(kernel)?;
    let centers = box_points(big.center(), big.radius() - l);
    let mut cubes = HashMap::with_capacity(centers.len());
    for m in &centers {
        let cube = cube_points(m, l)?;
        let sub = sample.restrict(Arc::new(cube.region().clone()))?;
        let h = build_hamiltonian(&sub, kernel)?;
        let r = crate::greens::classify_hamiltonian(&h, l, e, config.delta, config)?;
        cubes.insert(m.clone(), SmallCube { cube, verdict: r.verdict, green: r.matrix });
    }
    Ok(SmallCubeSurvey { l, centers, cubes })
}

/// `dist(k, Λ ∖ Λ_l(m))` for `Λ_l(m) ⊂ Λ = big`, `k ∈ Λ_l(m)`; `None` when the
/// difference is empty.
pub fn distance_to_complement(k: &LatticePoint, m: &LatticePoint, l: u64, big: &Cube) -> Option<u64> {
    let (l, bl) = (l as i64, big.radius() as i64);
    let mut best: Option<u64> = None;
    for ((&ki, &mi), &ni) in k.coords().iter().zip(m.coords()).zip(big.center().coords()) {
        if mi + l < ni + bl {
            let d = (mi + l + 1 - ki) as u64;
            best = Some(best.map_or(d, |b| b.min(d)));
        }
        if mi - l > ni - bl {
            let d = (ki - (mi - l - 1)) as u64;
            best = Some(best.map_or(d, |b| b.min(d)));
        }
    }
    best
}

/// Center of the `l`-cube `F_k` witnessing that `k` is `(l,E,δ)`-good w.r.t.
/// `big`: `Λ_l(m) ⊂ Λ` good, `k ∈ Λ_l(m)`, `dist(k, Λ∖Λ_l(m)) >= l/2`.
/// Among all witnesses the one with smallest `|m-k|` is returned, ties broken
/// lexicographically.
pub fn good_site_test(
    k: &LatticePoint,
    big: &Cube,
    l: u64,
    is_good: impl Fn(&LatticePoint) -> bool,
) -> Option<LatticePoint> {
    let reach = big.radius().checked_sub(l)?;
    let mut best: Option<(u64, LatticePoint)> = None;
    for m in box_points(k, l) {
        if sup_distance_unchecked(m.coords(), big.center().coords()) > reach {
            continue;
        }
        let far_enough = distance_to_complement(k, &m, l, big).map_or(true, |d| 2 * d >= l);
        if !far_enough || !is_good(&m) {
            continue;
        }
        let dist = sup_distance_unchecked(m.coords(), k.coords());
        if best.as_ref().map_or(true, |(b, _)| dist < *b) {
            best = Some((dist, m));
        }
    }
    best.map(|(_, m)| m)
}

/// Greedy cover: each center is kept unless it lies within `2l` of an already
/// kept one. Kept centers are pairwise more than `2l` apart and every input
/// center is within `2l` of one of them.
pub fn vitali_cover(centers: &[LatticePoint], l: u64) -> Vec<LatticePoint> {
    let mut kept: Vec<LatticePoint> = Vec::new();
    for c in centers {
        if kept.iter().all(|m| sup_distance_unchecked(m.coords(), c.coords()) > 2 * l) {
            kept.push(c.clone());
        }
    }
    kept
}

/// Size of a largest family of pairwise disjoint `l`-cubes among `centers`,
/// capped at `cap` (the search stops once `cap` is reached).
pub fn max_disjoint_cubes(centers: &[LatticePoint], l: u64, cap: usize) -> usize {
    if centers.is_empty() || cap == 0 {
        return 0;
    }
    let disjoint = |a: &LatticePoint, b: &LatticePoint| sup_distance_unchecked(a.coords(), b.coords()) > 2 * l;
    if centers[0].dim() == 1 {
        // interval scheduling: greedy by right end is optimal
        let mut xs: Vec<i64> = centers.iter().map(|c| c.coords()[0]).collect();
        xs.sort_unstable();
        let mut count = 0;
        let mut last: Option<i64> = None;
        for x in xs {
            if last.map_or(true, |p| x - p > 2 * l as i64) {
                count += 1;
                last = Some(x);
                if count >= cap {
                    break;
                }
            }
        }
        return count;
    }
    fn search(
        rest: &[usize],
        centers: &[LatticePoint],
        chosen: usize,
        best: &mut usize,
        cap: usize,
        disjoint: &dyn Fn(&LatticePoint, &LatticePoint) -> bool,
    ) {
        if chosen > *best {
            *best = chosen;
        }
        if *best >= cap || chosen + rest.len() <= *best {
            return;
        }
        let (first, tail) = (rest[0], &rest[1..]);
        let compatible: Vec<usize> = tail.iter().copied().filter(|&j| disjoint(&centers[first], &centers[j])).collect();
        search(&compatible, centers, chosen + 1, best, cap, disjoint);
        search(tail, centers, chosen, best, cap, disjoint);
    }
    let all: Vec<usize> = (0..centers.len()).collect();
    let mut best = 0;
    search(&all, centers, 0, &mut best, cap, &disjoint);
    best.min(cap)
}

/// Bad clusters `Ω_j` and good set `G` of a big cube.
#[derive(Clone, Debug, Serialize)]
pub struct ClusterDecomposition {
    #[serde(skip)]
    pub omegas: Vec<Arc<Region>>,
    #[serde(skip)]
    pub good_set: Arc<Region>,
    #[serde(skip)]
    pub bad_set: Arc<Region>,
    /// Cover centers grouped into chaining classes.
    pub classes: Vec<Vec<LatticePoint>>,
    pub l: u64,
    pub xi: f64,
    pub j_budget: usize,
    /// `C_⋆ = 10 J`.
    pub c_star: f64,
    pub max_diameter: u64,
    pub min_separation: Option<u64>,
    /// `diam(Ω_j) <= 10 J l^{1+ξ}` for all `j`.
    pub diameter_ok: bool,
    /// `dist(Ω_i, Ω_j) > l^{1+ξ}` for all `i ≠ j`.
    pub separation_ok: bool,
}

impl ClusterDecomposition {
    pub fn scale(&self) -> f64 {
        (self.l as f64).powf(1.0 + self.xi)
    }

    pub fn certified(&self) -> bool {
        self.diameter_ok && self.separation_ok
    }

    /// Index of the cluster containing `p`.
    pub fn cluster_of(&self, p: &LatticePoint) -> Option<usize> {
        self.omegas.iter().position(|o| o.contains(p))
    }
}

/// Chains cover centers closer than `2 l^{1+ξ}` into classes and inflates
/// each class to `Ω_j = ∪_y Λ_{3l}(y) ∩ Λ`.
pub fn cluster_bad(cover: &[LatticePoint], big: &Cube, l: u64, xi: f64, j_budget: usize) -> Result<ClusterDecomposition> {
    if cover.len() >= j_budget {
        return Err(Error::BudgetExceeded(format!(
            "{} separated bad cubes with budget J = {j_budget}",
            cover.len()
        )));
    }
    let link = 2.0 * (l as f64).powf(1.0 + xi);
    let n = cover.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while parent[r] != r {
            r = parent[r];
        }
        let mut i = i;
        while parent[i] != r {
            let next = parent[i];
            parent[i] = r;
            i = next;
        }
        r
    }
    for i in 0..n {
        for j in i + 1..n {
            if sup_distance_unchecked(cover[i].coords(), cover[j].coords()) as f64 <= link {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut classes: Vec<Vec<LatticePoint>> = Vec::new();
    let mut root_index: HashMap<usize, usize> = HashMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        let idx = *root_index.entry(r).or_insert_with(|| {
            classes.push(Vec::new());
            classes.len() - 1
        });
        classes[idx].push(cover[i].clone());
    }
    let d = big.dim();
    let mut omegas = Vec::with_capacity(classes.len());
    for class in &classes {
        let pts: Vec<LatticePoint> = class
            .iter()
            .flat_map(|y| box_points(y, 3 * l))
            .filter(|p| big.contains(p))
            .collect();
        omegas.push(Arc::new(Region::from_point_set(d, pts)?));
    }
    let bad_pts: Vec<LatticePoint> = omegas.iter().flat_map(|o| o.points().iter().cloned()).collect();
    let bad_set = Arc::new(Region::from_point_set(d, bad_pts)?);
    let good_set = Arc::new(big.region().difference(&bad_set));
    let scale = (l as f64).powf(1.0 + xi);
    let c_star = 10.0 * j_budget as f64;
    let max_diameter = omegas.iter().map(|o| set_diameter(o)).collect::<Result<Vec<_>>>()?.into_iter().max().unwrap_or(0);
    let mut min_separation: Option<u64> = None;
    for i in 0..omegas.len() {
        for j in i + 1..omegas.len() {
            let s = set_distance(&omegas[i], &omegas[j])?;
            min_separation = Some(min_separation.map_or(s, |m| m.min(s)));
        }
    }
    Ok(ClusterDecomposition {
        diameter_ok: max_diameter as f64 <= c_star * scale,
        separation_ok: min_separation.map_or(true, |s| s as f64 > scale),
        omegas,
        good_set,
        bad_set,
        classes,
        l,
        xi,
        j_budget,
        c_star,
        max_diameter,
        min_separation,
    })
}

/// `A = H_X - E` on the big cube together with its direct inverse, which
/// serves both as `(A⁻¹)_B^X` in the left-inverse construction and as the
/// oracle for the reconstructions.
#[derive(Clone, Debug)]
pub struct CouplingWorkspace {
    pub x: Arc<Region>,
    pub scale: u64,
    pub energy: f64,
    pub lambda: f64,
    pub kernel: HoppingKernel,
    pub a: SobolevMatrix,
    pub a_inv: SobolevMatrix,
    /// `||A⁻¹||`.
    pub a_inv_norm: f64,
    /// Random right-hand sides `h` and solutions `u = A⁻¹h`.
    pub tests: Vec<(DVector<f64>, DVector<f64>)>,
}

impl CouplingWorkspace {
    pub fn new(sample: &OperatorSample, kernel: &HoppingKernel, big: &Cube, e: f64, test_vectors: usize, seed: u64) -> Result<Self> {
        let x = Arc::new(big.region().clone());
        let sub = sample.restrict(x.clone())?;
        let h = build_hamiltonian(&sub, kernel)?;
        let spec = CubeSpectrum::new(&h)?;
        if spec.is_singular(e) {
            return Err(Error::Singular { energy: e, sigma_min: spec.distance_to_spectrum(e) });
        }
        let n = x.len();
        let a_data = h.data() - DMatrix::identity(n, n) * e;
        let a_inv_data = spec.resolvent_data(e);
        let a_inv_norm = 1.0 / spec.distance_to_spectrum(e);
        let a = SobolevMatrix::new(x.clone(), x.clone(), a_data)?;
        let a_inv = SobolevMatrix::new(x.clone(), x.clone(), a_inv_data)?;
        let lu = a.data().clone().lu();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tests = (0..test_vectors)
            .map(|_| {
                let hv = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
                let u = lu.solve(&hv).ok_or(Error::Singular { energy: e, sigma_min: 0.0 })?;
                Ok((hv, u))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { x, scale: big.radius(), energy: e, lambda: sample.lambda, kernel: *kernel, a, a_inv, a_inv_norm, tests })
    }

    fn restrict_vec(&self, v: &DVector<f64>, sub: &Region) -> DVector<f64> {
        DVector::from_iterator(sub.len(), sub.points().iter().map(|p| v[self.x.index_of(p).expect("sub-region")]))
    }
}

/// `||a - b||_∞ / max(||a||_∞, ||b||_∞, floor)`.
fn relative_gap(a: &DVector<f64>, b: &DVector<f64>, floor: f64) -> f64 {
    let scale = a.amax().max(b.amax()).max(floor);
    if scale == 0.0 {
        0.0
    } else {
        (a - b).amax() / scale
    }
}

/// Outputs of the good-site reduction.
#[derive(Clone, Debug)]
pub struct GoodReduction {
    /// `F_k` center for each site of `G`, in `G`'s index order.
    pub f_centers: Vec<LatticePoint>,
    pub gamma: SobolevMatrix,
    pub lmat: SobolevMatrix,
    pub nmat: SobolevMatrix,
    pub mmat: SobolevMatrix,
    pub gamma_norm_s0: f64,
    /// Worst relative defect of `u_G = 𝓝 u_B + 𝓜 h` over the test vectors.
    pub identity_residual: f64,
}

/// Step 1: eliminate the good sites, `u_G = 𝓝 u_B + 𝓜 h`.
pub fn reduce_good_sites(
    ws: &CouplingWorkspace,
    decomposition: &ClusterDecomposition,
    survey: &SmallCubeSurvey,
    big: &Cube,
    config: &ClassifierConfig,
) -> Result<GoodReduction> {
    let g = &decomposition.good_set;
    let b = &decomposition.bad_set;
    let l = survey.l;
    let x = &ws.x;
    let (ng, nx) = (g.len(), x.len());
    let mut gamma = DMatrix::zeros(ng, nx);
    let mut lmat = DMatrix::zeros(ng, nx);
    let mut f_centers = Vec::with_capacity(ng);
    let inv_lambda = 1.0 / ws.lambda;
    for (row, k) in g.points().iter().enumerate() {
        let m = good_site_test(k, big, l, |m| survey.is_good(m))
            .ok_or_else(|| Error::Precondition(format!("site {k:?} of G is not (l,E,δ)-good")))?;
        let small = survey.get(&m).expect("surveyed center");
        let gf = small.green.as_ref().expect("good cube stores its resolvent");
        let f = small.cube.region();
        let kf = f.index_of(k).expect("k ∈ F_k");
        // Q_k(k, k') = λ⁻¹ Σ_{m'∈F_k} G_{F_k}(k, m') T(m', k') for k' ∉ F_k
        for (col, kp) in x.points().iter().enumerate() {
            if let Some(j) = f.index_of(kp) {
                lmat[(row, col)] = gf.data()[(kf, j)];
            } else {
                let mut acc = 0.0;
                for (j, mp) in f.points().iter().enumerate() {
                    let t = ws.kernel.entry_at_distance(sup_distance_unchecked(mp.coords(), kp.coords()));
                    acc += gf.data()[(kf, j)] * t;
                }
                gamma[(row, col)] = inv_lambda * acc;
            }
        }
        f_centers.push(m);
    }
    let gamma = SobolevMatrix::new(g.clone(), x.clone(), gamma)?;
    let lmat = SobolevMatrix::new(g.clone(), x.clone(), lmat)?;
    let p = &config.sobolev;
    let gamma_norm_s0 = gamma.norm(p.s0, p);
    if gamma_norm_s0 > 0.5 {
        return Err(Error::Smallness { what: "Γ in the good-site reduction".into(), product: gamma_norm_s0 });
    }
    let gamma_gg = gamma.restrict(g, g)?;
    let gamma_gb = gamma.restrict(g, b)?;
    let lhs = DMatrix::identity(ng, ng) + gamma_gg.data();
    let inv = lhs.lu().try_inverse().ok_or(Error::NeumannDivergence(0))?;
    let nmat = SobolevMatrix::new(g.clone(), b.clone(), -(&inv * gamma_gb.data()))?;
    let mmat = SobolevMatrix::new(g.clone(), x.clone(), &inv * lmat.data())?;
    let mut identity_residual = 0.0f64;
    for (h, u) in &ws.tests {
        let ug = ws.restrict_vec(u, g);
        let ub = ws.restrict_vec(u, b);
        let rhs = nmat.data() * ub + mmat.data() * h;
        identity_residual = identity_residual.max(relative_gap(&ug, &rhs, 0.0));
    }
    if !(identity_residual <= 1e-9) {
        return Err(Error::Reconstruction { what: "u_G = N u_B + M h".into(), residual: identity_residual });
    }
    Ok(GoodReduction { f_centers, gamma, lmat, nmat, mmat, gamma_norm_s0, identity_residual })
}

/// Outputs of the bad-site reduction.
#[derive(Clone, Debug)]
pub struct BadReduction {
    /// `A' = A_X^B + A_X^G 𝓝`, rows `X`, columns `B`.
    pub aprime: SobolevMatrix,
    /// `𝓩 = I - A_X^G 𝓜`.
    pub zmat: SobolevMatrix,
    /// Worst relative defect of `A' u_B = 𝓩 h`.
    pub identity_residual: f64,
    /// Defect of `(A⁻¹)_B^X A' = I`.
    pub left_inverse_residual: f64,
}

/// Step 2: the reduced equation `A' u_B = 𝓩 h`.
pub fn reduce_bad_sites(ws: &CouplingWorkspace, decomposition: &ClusterDecomposition, step1: &GoodReduction) -> Result<BadReduction> {
    let (g, b, x) = (&decomposition.good_set, &decomposition.bad_set, &ws.x);
    let a_xb = ws.a.restrict(x, b)?;
    let a_xg = ws.a.restrict(x, g)?;
    let aprime = SobolevMatrix::new(x.clone(), b.clone(), a_xb.data() + a_xg.data() * step1.nmat.data())?;
    let n = x.len();
    let zmat = SobolevMatrix::new(x.clone(), x.clone(), DMatrix::identity(n, n) - a_xg.data() * step1.mmat.data())?;
    let mut identity_residual = 0.0f64;
    for (h, u) in &ws.tests {
        let ub = ws.restrict_vec(u, b);
        identity_residual = identity_residual.max(relative_gap(&(aprime.data() * ub), &(zmat.data() * h), h.amax()));
    }
    let a_inv_bx = ws.a_inv.restrict(b, x)?;
    let left_inverse_residual = if b.is_empty() { 0.0 } else { identity_residual_of(&a_inv_bx, &aprime) };
    if !(identity_residual <= 1e-9) {
        return Err(Error::Reconstruction { what: "A' u_B = Z h".into(), residual: identity_residual });
    }
    if !(left_inverse_residual <= 1e-9) {
        return Err(Error::Reconstruction { what: "(A⁻¹)_B^X A' = I".into(), residual: left_inverse_residual });
    }
    Ok(BadReduction { aprime, zmat, identity_residual, left_inverse_residual })
}

fn identity_residual_of(left: &SobolevMatrix, right: &SobolevMatrix) -> f64 {
    identity_residual(left.data(), right.data())
}

/// Outputs of the left-inverse construction for `A'`.
#[derive(Clone, Debug)]
pub struct LeftInverseAssembly {
    /// `Ω̃_j ∩ X`.
    pub neighborhoods: Vec<Arc<Region>>,
    pub dmat: SobolevMatrix,
    pub rmat: SobolevMatrix,
    pub w: SobolevMatrix,
    pub w0: SobolevMatrix,
    pub vmat: SobolevMatrix,
    /// `||𝓡|| ||(A⁻¹)_B^X||`.
    pub spectral_product: f64,
    /// `||𝓡||_{s0} ||𝓦0||_{s0}`.
    pub sobolev_product: f64,
    /// `||𝓦|| <= 2 L^τ`.
    pub w_bound_ok: bool,
    pub w_norm: f64,
    /// Largest `|k-k'|` in the support of `𝓦0`.
    pub w0_reach: u64,
    /// `2 C_⋆ l^{1+ξ}`.
    pub w0_reach_bound: f64,
    /// Smallest `|k-k'|` in the support of `𝓡`.
    pub r_min_offset: Option<u64>,
    pub w0_left_residual: f64,
    pub v_left_residual: f64,
}

/// Builds `𝓓`, `𝓡`, `𝓦`, `𝓦0` and the left inverse `𝓥` of `A'`.
pub fn assemble_left_inverse(
    ws: &CouplingWorkspace,
    decomposition: &ClusterDecomposition,
    step2: &BadReduction,
    tau: f64,
    config: &ClassifierConfig,
) -> Result<LeftInverseAssembly> {
    let (b, x) = (&decomposition.bad_set, &ws.x);
    let bound = (ws.scale as f64).powf(tau);
    if ws.a_inv_norm > bound {
        return Err(Error::Precondition(format!("||A⁻¹|| = {:e} exceeds L^τ = {bound:e}", ws.a_inv_norm)));
    }
    if b.is_empty() {
        return Err(Error::Precondition("no bad sites: nothing to invert".into()));
    }
    let radius = decomposition.scale() / 4.0;
    let neighborhoods: Vec<Arc<Region>> = decomposition
        .omegas
        .iter()
        .map(|o| {
            let pts = x.points().iter().filter(|p| o.distance_to_point(p) as f64 <= radius).cloned().collect();
            Region::from_points(x.dim(), pts).map(Arc::new)
        })
        .collect::<Result<_>>()?;
    // cluster index of every site of X inside some Ω̃_j
    let mut hood_of: HashMap<&LatticePoint, usize> = HashMap::new();
    for (j, hood) in neighborhoods.iter().enumerate() {
        for p in hood.points() {
            if hood_of.insert(p, j).is_some() {
                return Err(Error::Precondition(format!("neighborhoods of two clusters meet at {p:?}")));
            }
        }
    }
    let cluster_of: HashMap<&LatticePoint, usize> = decomposition
        .omegas
        .iter()
        .enumerate()
        .flat_map(|(j, o)| o.points().iter().map(move |p| (p, j)))
        .collect();
    let in_pattern = |xp: &LatticePoint, bp: &LatticePoint| match (hood_of.get(xp), cluster_of.get(bp)) {
        (Some(i), Some(j)) => i == j,
        _ => false,
    };
    let dmat = step2.aprime.mask(|xp, bp| in_pattern(xp, bp));
    let rmat = step2.aprime.sub(&dmat)?;
    let a_inv_bx = ws.a_inv.restrict(b, x)?;
    let spectral_product = rmat.spectral_norm() * a_inv_bx.spectral_norm();
    let w_res = perturb_left_inverse(&step2.aprime, &a_inv_bx, &rmat.scale(-1.0), Smallness::Spectral, 1e-9, &config.sobolev)?;
    let w = w_res.inverse;
    let w_norm = w.spectral_norm();
    let w0 = w.mask(|bp, xp| in_pattern(xp, bp));
    let w0_left_residual = identity_residual_of(&w0, &dmat);
    if !(w0_left_residual <= 1e-9) {
        return Err(Error::Reconstruction { what: "W0 D = I".into(), residual: w0_left_residual });
    }
    let v_res = perturb_left_inverse(&dmat, &w0, &rmat, Smallness::Sobolev, 1e-9, &config.sobolev)?;
    let sobolev_product = v_res.smallness_product;
    let vmat = v_res.inverse;
    let v_left_residual = identity_residual_of(&vmat, &step2.aprime);
    if !(v_left_residual <= 1e-9) {
        return Err(Error::Reconstruction { what: "V A' = I".into(), residual: v_left_residual });
    }
    Ok(LeftInverseAssembly {
        w0_reach: w0.max_offset_of_support().unwrap_or(0),
        w0_reach_bound: 2.0 * decomposition.c_star * decomposition.scale(),
        r_min_offset: rmat.min_offset_of_support(),
        w_bound_ok: w_norm <= 2.0 * bound,
        neighborhoods,
        dmat,
        rmat,
        w,
        w0,
        vmat,
        spectral_product,
        sobolev_product,
        w_norm,
        w0_left_residual,
        v_left_residual,
    })
}

/// Step 3: block reconstruction of `A⁻¹` and the large-scale verdict.
#[derive(Clone, Debug, Serialize)]
pub struct CouplingConclusion {
    /// `max |𝓥𝓩 - (A⁻¹)_B^X| / max |A⁻¹|`.
    pub bad_block_error: f64,
    /// `max |𝓜 + 𝓝(A⁻¹)_B^X - (A⁻¹)_G^X| / max |A⁻¹|`.
    pub good_block_error: f64,
    /// Verdict at exponent `(1+ξ)/α` from the reconstructed inverse.
    pub verdict: Verdict,
    pub log_margin: f64,
    /// Verdict from the directly inverted `A`.
    pub direct_verdict: Verdict,
}

pub fn coupling_conclusion(
    ws: &CouplingWorkspace,
    decomposition: &ClusterDecomposition,
    step1: &GoodReduction,
    step2: &BadReduction,
    left: Option<&LeftInverseAssembly>,
    delta_large: f64,
    config: &ClassifierConfig,
) -> Result<CouplingConclusion> {
    let (g, b, x) = (&decomposition.good_set, &decomposition.bad_set, &ws.x);
    let scale = ws.a_inv.data().amax();
    let bad_block = match left {
        Some(left) => left.vmat.mul(&step2.zmat)?,
        None if b.is_empty() => SobolevMatrix::zeros(b.clone(), x.clone()),
        None => return Err(Error::Precondition("bad sites present but no left inverse".into())),
    };
    let good_block = step1.mmat.add(&step1.nmat.mul(&bad_block)?)?;
    let bad_block_error = if b.is_empty() {
        0.0
    } else {
        (bad_block.data() - ws.a_inv.restrict(b, x)?.data()).amax() / scale
    };
    let good_block_error = (good_block.data() - ws.a_inv.restrict(g, x)?.data()).amax() / scale;
    for (what, err) in [("(A⁻¹)_B^X = V Z", bad_block_error), ("(A⁻¹)_G^X = M + N (A⁻¹)_B^X", good_block_error)] {
        if !(err <= 1e-8) {
            return Err(Error::Reconstruction { what: what.into(), residual: err });
        }
    }
    // reassemble in X's index order
    let n = x.len();
    let mut full = DMatrix::zeros(n, n);
    for (block, rows) in [(&bad_block, b), (&good_block, g)] {
        for (i, p) in rows.points().iter().enumerate() {
            full.row_mut(x.index_of(p).expect("subset")).copy_from(&block.data().row(i));
        }
    }
    let full = SobolevMatrix::new(x.clone(), x.clone(), full)?;
    let (verdict, log_margin, _) = classify_matrix(&full, ws.scale, delta_large, config);
    let (direct_verdict, _, _) = classify_matrix(&ws.a_inv, ws.scale, delta_large, config);
    Ok(CouplingConclusion { bad_block_error, good_block_error, verdict, log_margin, direct_verdict })
}

/// Scale data for [`jlem_check`].
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CouplingScales {
    pub l: u64,
    pub xi: f64,
    pub alpha: f64,
    pub tau: f64,
    pub j_budget: usize,
}

impl CouplingScales {
    /// `(1+ξ)/α`.
    pub fn large_delta(&self) -> f64 {
        (1.0 + self.xi) / self.alpha
    }
}

/// Everything the full deterministic pipeline produced for one cube.
#[derive(Clone, Debug, Serialize)]
pub struct JlemReport {
    pub bad_cubes: usize,
    pub max_disjoint_bad: usize,
    pub cover: Vec<LatticePoint>,
    pub decomposition: ClusterDecomposition,
    pub good_identity_residual: f64,
    pub bad_identity_residual: f64,
    pub left_inverse_residual: Option<f64>,
    pub gamma_norm_s0: f64,
    pub conclusion: CouplingConclusion,
}

impl JlemReport {
    pub fn agrees_with_direct(&self) -> bool {
        self.conclusion.verdict == self.conclusion.direct_verdict
    }
}

/// Runs survey → cover → clustering → Steps 1–3 on `Λ_L = big` at energy `e`.
pub fn jlem_check(
    sample: &OperatorSample,
    kernel: &HoppingKernel,
    big: &Cube,
    e: f64,
    scales: CouplingScales,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<JlemReport> {
    let ws = CouplingWorkspace::new(sample, kernel, big, e, 4, seed)?;
    let bound = (big.radius() as f64).powf(scales.tau);
    if ws.a_inv_norm > bound {
        return Err(Error::Precondition(format!("||G_Λ(E)|| = {:e} exceeds L^τ = {bound:e}", ws.a_inv_norm)));
    }
    let survey = survey_small_cubes(sample, kernel, big, scales.l, e, config)?;
    let bad = survey.bad_centers();
    let max_disjoint_bad = max_disjoint_cubes(&bad, scales.l, scales.j_budget);
    if max_disjoint_bad >= scales.j_budget {
        return Err(Error::BudgetExceeded(format!(
            "{max_disjoint_bad} pairwise disjoint bad {}-cubes with J = {}",
            scales.l, scales.j_budget
        )));
    }
    let cover = vitali_cover(&bad, scales.l);
    let decomposition = cluster_bad(&cover, big, scales.l, scales.xi, scales.j_budget)?;
    let step1 = reduce_good_sites(&ws, &decomposition, &survey, big, config)?;
    let step2 = reduce_bad_sites(&ws, &decomposition, &step1)?;
    let left = if decomposition.bad_set.is_empty() {
        None
    } else {
        Some(assemble_left_inverse(&ws, &decomposition, &step2, scales.tau, config)?)
    };
    let conclusion = coupling_conclusion(&ws, &decomposition, &step1, &step2, left.as_ref(), scales.large_delta(), config)?;
    debug_assert!(same_region(&ws.x, &ws.a.rows().clone()));
    Ok(JlemReport {
        bad_cubes: bad.len(),
        max_disjoint_bad,
        cover,
        good_identity_residual: step1.identity_residual,
        bad_identity_residual: step2.identity_residual,
        left_inverse_residual: left.as_ref().map(|l| l.v_left_residual),
        gamma_norm_s0: step1.gamma_norm_s0,
        conclusion,
        decomposition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disorder::DisorderModel;
    use crate::sobolev::SobolevParams;
    use std::collections::VecDeque;

    fn p1(x: i64) -> LatticePoint {
        LatticePoint::new(vec![x])
    }

    #[test]
    fn vitali_examples() {
        assert_eq!(vitali_cover(&[p1(0), p1(1), p1(10)], 1), vec![p1(0), p1(10)]);
        assert_eq!(vitali_cover(&[p1(4)], 3), vec![p1(4)]);
        assert!(vitali_cover(&[], 3).is_empty());
    }

    #[test]
    fn complement_distance_matches_brute_force() {
        let big = cube_points(&LatticePoint::new(vec![0, 0]), 6).unwrap();
        for l in 1..6u64 {
            for m in box_points(big.center(), 6 - l) {
                let small = cube_points(&m, l).unwrap();
                for k in small.region().points() {
                    let brute = big
                        .region()
                        .points()
                        .iter()
                        .filter(|q| !small.contains(q))
                        .map(|q| sup_distance_unchecked(q.coords(), k.coords()))
                        .min();
                    assert_eq!(distance_to_complement(k, &m, l, &big), brute);
                }
            }
        }
    }

    #[test]
    fn good_site_examples() {
        let big = cube_points(&p1(0), 10).unwrap();
        assert_eq!(good_site_test(&p1(0), &big, 3, |_| true), Some(p1(0)));
        // boundary site: only cubes hugging the boundary qualify
        assert_eq!(good_site_test(&p1(10), &big, 3, |_| true), Some(p1(7)));
        assert_eq!(good_site_test(&p1(10), &big, 3, |m| *m != p1(7)), None);
    }

    #[test]
    fn good_site_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let d = rng.gen_range(1..=2);
            let big_l = rng.gen_range(3..8u64);
            let l = rng.gen_range(1..big_l);
            let big = cube_points(&LatticePoint::origin(d), big_l).unwrap();
            let good: HashMap<LatticePoint, bool> =
                big.region().points().iter().map(|m| (m.clone(), rng.gen_bool(0.6))).collect();
            let k = big.region().point(rng.gen_range(0..big.len())).clone();
            // oracle: every center in Λ, every condition checked by brute force
            let mut expect: Option<(u64, LatticePoint)> = None;
            for m in big.region().points() {
                let Ok(small) = cube_points(m, l) else { continue };
                if !small.region().is_subset_of(big.region()) || !small.contains(&k) || !good[m] {
                    continue;
                }
                let dist = big
                    .region()
                    .points()
                    .iter()
                    .filter(|q| !small.contains(q))
                    .map(|q| sup_distance_unchecked(q.coords(), k.coords()))
                    .min()
                    .unwrap_or(u64::MAX);
                if 2 * dist < l {
                    continue;
                }
                let dm = sup_distance_unchecked(m.coords(), k.coords());
                if expect.as_ref().map_or(true, |(b, _)| dm < *b) {
                    expect = Some((dm, m.clone()));
                }
            }
            assert_eq!(good_site_test(&k, &big, l, |m| good[m]), expect.map(|(_, m)| m));
        }
    }

    fn components_oracle(centers: &[LatticePoint], link: f64) -> Vec<Vec<LatticePoint>> {
        let n = centers.len();
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for s in 0..n {
            if seen[s] {
                continue;
            }
            let mut comp = Vec::new();
            let mut q = VecDeque::from([s]);
            seen[s] = true;
            while let Some(i) = q.pop_front() {
                comp.push(centers[i].clone());
                for j in 0..n {
                    if !seen[j] && sup_distance_unchecked(centers[i].coords(), centers[j].coords()) as f64 <= link {
                        seen[j] = true;
                        q.push_back(j);
                    }
                }
            }
            comp.sort();
            out.push(comp);
        }
        out.sort();
        out
    }

    #[test]
    fn clustering_chain_and_oracle() {
        let (l, xi, j) = (2u64, 1.0, 8usize);
        let link = 2 * l.pow(2);
        let big = cube_points(&p1(0), 200).unwrap();
        let chain: Vec<LatticePoint> = (0..(j as i64 - 1)).map(|i| p1(-50 + i * link as i64)).collect();
        let dec = cluster_bad(&chain, &big, l, xi, j).unwrap();
        assert_eq!(dec.classes.len(), 1);
        assert!(dec.max_diameter as f64 <= (2 * (j as u64 - 2) * l.pow(2) + 6 * l) as f64);
        assert!(dec.diameter_ok);

        let two = [p1(0), p1(link as i64 + 6 * l as i64 + 1)];
        assert_eq!(cluster_bad(&two, &big, l, xi, j).unwrap().classes.len(), 2);
        let one = cluster_bad(&[p1(3)], &big, l, xi, j).unwrap();
        assert!(one.max_diameter <= 6 * l);
        assert!(matches!(cluster_bad(&chain, &big, l, xi, 7), Err(Error::BudgetExceeded(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let pts: Vec<LatticePoint> = (0..rng.gen_range(1..7)).map(|_| p1(rng.gen_range(-150..150))).collect();
            let cover = vitali_cover(&pts, l);
            let dec = cluster_bad(&cover, &big, l, xi, j).unwrap();
            let mut classes: Vec<Vec<LatticePoint>> = dec.classes.iter().map(|c| {
                let mut c = c.clone();
                c.sort();
                c
            }).collect();
            classes.sort();
            assert_eq!(classes, components_oracle(&cover, link as f64));
        }
    }

    #[test]
    fn disjoint_counting_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let d = rng.gen_range(1..=2);
            let l = rng.gen_range(1..3u64);
            let n = rng.gen_range(0..10);
            let pts: Vec<LatticePoint> = (0..n)
                .map(|_| LatticePoint::new((0..d).map(|_| rng.gen_range(-8..8)).collect()))
                .collect();
            let mut brute = 0;
            for mask in 0u32..(1 << n) {
                let chosen: Vec<&LatticePoint> = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| &pts[i]).collect();
                let ok = chosen.iter().enumerate().all(|(i, a)| {
                    chosen[i + 1..].iter().all(|b| sup_distance_unchecked(a.coords(), b.coords()) > 2 * l)
                });
                if ok {
                    brute = brute.max(chosen.len());
                }
            }
            assert_eq!(max_disjoint_cubes(&pts, l, usize::MAX), brute);
            assert_eq!(max_disjoint_cubes(&pts, l, 2), brute.min(2));
        }
    }

    fn resonant_instance(seed: u64) -> (OperatorSample, HoppingKernel, Cube, f64, ClassifierConfig, CouplingScales) {
        let model = DisorderModel::uniform(1.0, 1.0).unwrap();
        let big = cube_points(&p1(0), 20).unwrap();
        let mut s = OperatorSample::draw(&model, Arc::new(big.region().clone()), 1e4, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k0 = p1(rng.gen_range(-20..=20));
        let mut others: Vec<f64> = big.region().points().iter().filter(|p| **p != k0).map(|p| s.value(p).unwrap()).collect();
        others.sort_by(f64::total_cmp);
        let (gap, e) = others.windows(2).map(|w| (w[1] - w[0], 0.5 * (w[0] + w[1]))).fold((0.0, 0.0), |a, b| if b.0 > a.0 { b } else { a });
        assert!(gap > 0.0);
        s.set_value(&k0, e + 1e-3).unwrap();
        let kernel = HoppingKernel::new(6.0, 1).unwrap();
        let cfg = ClassifierConfig::new(4.0, 0.7, 0.95, SobolevParams::new(1, 0.75, 2.0).unwrap()).unwrap();
        let scales = CouplingScales { l: 4, xi: 0.5, alpha: 20f64.ln() / 4f64.ln(), tau: 3.0, j_budget: 4 };
        (s, kernel, big, e, cfg, scales)
    }

    #[test]
    fn resonant_cluster_pipeline() {
        for seed in 0..10 {
            let (s, kernel, big, e, cfg, scales) = resonant_instance(seed);
            let r = jlem_check(&s, &kernel, &big, e, scales, &cfg, seed).unwrap();
            assert!(r.bad_cubes >= 1);
            assert!(r.good_identity_residual <= 1e-9 && r.bad_identity_residual <= 1e-9);
            assert!(r.left_inverse_residual.unwrap() <= 1e-9);
            assert!(r.conclusion.bad_block_error <= 1e-8 && r.conclusion.good_block_error <= 1e-8);
            assert!(r.agrees_with_direct());
            // good-set completeness
            let survey = survey_small_cubes(&s, &kernel, &big, scales.l, e, &cfg).unwrap();
            for k in r.decomposition.good_set.points() {
                assert!(good_site_test(k, &big, scales.l, |m| survey.is_good(m)).is_some());
            }
        }
    }

    #[test]
    fn no_bad_cubes_reduces_to_step_one() {
        let model = DisorderModel::uniform(1.0, 1.0).unwrap();
        let big = cube_points(&p1(0), 12).unwrap();
        let mut s = OperatorSample::draw(&model, Arc::new(big.region().clone()), 1e5, 1).unwrap();
        for (i, p) in big.region().points().to_vec().iter().enumerate() {
            s.set_value(p, if i % 2 == 0 { 0.8 } else { -0.8 }).unwrap();
        }
        let kernel = HoppingKernel::new(6.0, 1).unwrap();
        let cfg = ClassifierConfig::new(4.0, 0.7, 0.95, SobolevParams::new(1, 0.75, 2.0).unwrap()).unwrap();
        let scales = CouplingScales { l: 3, xi: 0.5, alpha: 2.5, tau: 3.0, j_budget: 4 };
        let r = jlem_check(&s, &kernel, &big, 0.0, scales, &cfg, 2).unwrap();
        assert_eq!(r.bad_cubes, 0);
        assert!(r.decomposition.bad_set.is_empty());
        assert_eq!(r.conclusion.verdict, Verdict::Good);
        assert!(r.agrees_with_direct());
    }

    #[test]
    fn many_resonances_exceed_budget() {
        let (mut s, kernel, big, e, cfg, scales) = resonant_instance(3);
        for x in [-18, -6, 6, 18] {
            s.set_value(&p1(x), e + 2e-3).unwrap();
        }
        assert!(matches!(jlem_check(&s, &kernel, &big, e, scales, &cfg, 0), Err(Error::BudgetExceeded(_))));
    }

    #[test]
    fn step_matrices_have_stated_supports() {
        let (s, kernel, big, e, cfg, scales) = resonant_instance(7);
        let ws = CouplingWorkspace::new(&s, &kernel, &big, e, 3, 1).unwrap();
        let survey = survey_small_cubes(&s, &kernel, &big, scales.l, e, &cfg).unwrap();
        let cover = vitali_cover(&survey.bad_centers(), scales.l);
        let dec = cluster_bad(&cover, &big, scales.l, scales.xi, scales.j_budget).unwrap();
        let step1 = reduce_good_sites(&ws, &dec, &survey, &big, &cfg).unwrap();
        // row k of Γ vanishes on F_k and row k of 𝓛 vanishes off F_k
        for (row, k) in dec.good_set.points().iter().enumerate() {
            let f = cube_points(&step1.f_centers[row], scales.l).unwrap();
            assert!(f.contains(k));
            for (col, q) in ws.x.points().iter().enumerate() {
                if f.contains(q) {
                    assert_eq!(step1.gamma.data()[(row, col)], 0.0);
                } else {
                    assert_eq!(step1.lmat.data()[(row, col)], 0.0);
                }
            }
        }
        let step2 = reduce_bad_sites(&ws, &dec, &step1).unwrap();
        let left = assemble_left_inverse(&ws, &dec, &step2, scales.tau, &cfg).unwrap();
        assert!(left.w_bound_ok);
        assert!(left.w0_reach as f64 <= left.w0_reach_bound);
        if let Some(off) = left.r_min_offset {
            assert!(off as f64 >= dec.scale() / 4.0);
        }
    }
}
