//! Direct localization measurements on finite cubes: eigenpairs, decay
//! exponents around the localization center, the Poisson identity and
//! participation ratios.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use rayon::prelude::*;

use crate::disorder::{build_hamiltonian, derive_seed, DisorderModel, HoppingKernel, OperatorSample};
use crate::error::{Error, Result};
use crate::greens::CubeSpectrum;
use crate::lattice::{cube_points, sup_distance_unchecked, Cube, LatticePoint, Region};
use crate::sobolev::SobolevMatrix;

#[derive(Clone, Debug)]
pub struct EigenPair {
    pub energy: f64,
    /// Unit vector, indexed like the Hamiltonian's region.
    pub vector: DVector<f64>,
    /// `||Hψ - Eψ||`.
    pub residual: f64,
}

impl EigenPair {
    /// Inverse participation ratio `Σ |ψ(n)|⁴`.
    pub fn ipr(&self) -> f64 {
        ipr(&self.vector)
    }
}

pub fn ipr(v: &DVector<f64>) -> f64 {
    let n2 = v.norm_squared();
    v.iter().map(|x| x.powi(4)).sum::<f64>() / (n2 * n2)
}

/// Full eigendecomposition with per-pair residual and orthonormality checks.
pub fn diagonalize(h: &SobolevMatrix) -> Result<Vec<EigenPair>> {
    let spec = CubeSpectrum::new(h)?;
    let q = spec.vectors();
    let n = q.ncols();
    let gram = (q.transpose() * q - DMatrix::<f64>::identity(n, n)).amax();
    if gram > 1e-9 {
        return Err(Error::Eigensolver(format!("eigenvectors deviate from orthonormal by {gram:e}")));
    }
    let h_norm = spec.eigenvalues().amax();
    let hq = h.data() * q;
    let mut pairs = Vec::with_capacity(n);
    for (j, &e) in spec.eigenvalues().iter().enumerate() {
        let v = q.column(j).into_owned();
        let residual = (hq.column(j) - &v * e).norm();
        if residual > 1e-9 * h_norm.max(f64::MIN_POSITIVE) {
            return Err(Error::Eigensolver(format!(
                "eigenpair {j} has residual {residual:e} (||H|| = {h_norm:e})"
            )));
        }
        pairs.push(EigenPair { energy: e, vector: v, residual });
    }
    Ok(pairs)
}

/// Pairs with energy in the central half of the spectral range.
pub fn mid_spectrum(pairs: &[EigenPair]) -> Vec<&EigenPair> {
    let lo = pairs.iter().map(|p| p.energy).fold(f64::INFINITY, f64::min);
    let hi = pairs.iter().map(|p| p.energy).fold(f64::NEG_INFINITY, f64::max);
    let (a, b) = (lo + 0.25 * (hi - lo), hi - 0.25 * (hi - lo));
    pairs.iter().filter(|p| a <= p.energy && p.energy <= b).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct DecayFit {
    /// Localization center, `argmax |ψ|`.
    pub center: LatticePoint,
    /// `radius -> max_{|n-c| = radius} |ψ(n)| / |ψ(c)|`.
    pub shell_maxima: BTreeMap<u64, f64>,
    /// `-slope` of the log-log least squares over the window; `inf` when all
    /// shells in the window vanish.
    pub beta: f64,
    pub fit_window: (u64, u64),
    pub r_over_600: f64,
    /// Every shell in the window satisfies `max <= radius^{-r/600}`.
    pub envelope_pass: bool,
    /// Largest `max / radius^{-r/600}` over the window.
    pub worst_envelope_ratio: f64,
    pub ipr: f64,
}

impl DecayFit {
    pub fn passed(&self) -> bool {
        self.envelope_pass
    }
}

/// Fits the decay of `ψ` around its localization center on the cube `region`.
pub fn decay_fit(vector: &DVector<f64>, region: &Cube, r: f64) -> Result<DecayFit> {
    if region.radius() < 20 {
        return Err(Error::Precondition(format!("decay fits need a cube of radius >= 20, got {}", region.radius())));
    }
    if vector.len() != region.len() {
        return Err(Error::ShapeMismatch(format!("{} amplitudes for {} sites", vector.len(), region.len())));
    }
    let pts = region.region().points();
    let (ci, peak) = vector.iter().map(|x| x.abs()).enumerate().fold((0, 0.0), |b, (i, x)| if x > b.1 { (i, x) } else { b });
    if peak == 0.0 {
        return Err(Error::Precondition("zero vector".into()));
    }
    let center = pts[ci].clone();
    let mut shell_maxima: BTreeMap<u64, f64> = BTreeMap::new();
    for (p, x) in pts.iter().zip(vector.iter()) {
        let k = sup_distance_unchecked(p.coords(), center.coords());
        let e = shell_maxima.entry(k).or_insert(0.0);
        *e = e.max(x.abs() / peak);
    }
    let r_max = *shell_maxima.keys().last().unwrap();
    let fit_window = (1, ((0.8 * r_max as f64).floor() as u64).max(1));
    let r_over_600 = r / 600.0;
    let mut worst_envelope_ratio = 0.0f64;
    let (mut sx, mut sy, mut sxx, mut sxy, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&k, &m) in shell_maxima.range(fit_window.0..=fit_window.1) {
        let x = (k as f64).ln();
        worst_envelope_ratio = worst_envelope_ratio.max(m / (k as f64).powf(-r_over_600));
        if m > 0.0 {
            let y = m.ln();
            sx += x;
            sy += y;
            sxx += x * x;
            sxy += x * y;
            n += 1.0;
        }
    }
    let beta = if n >= 2.0 {
        -(n * sxy - sx * sy) / (n * sxx - sx * sx)
    } else if n == 0.0 {
        f64::INFINITY
    } else {
        f64::NAN
    };
    Ok(DecayFit {
        center,
        shell_maxima,
        beta,
        fit_window,
        r_over_600,
        envelope_pass: worst_envelope_ratio <= 1.0,
        worst_envelope_ratio,
        ipr: ipr(vector),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct PoissonReport {
    /// `max_{n∈Λ} |ψ(n) + Σ λ⁻¹ G_Λ(E)(n,n') T(n',n'') ψ(n'')|`.
    pub max_residual: f64,
    pub psi_max: f64,
    /// `dist(E, σ(H_Λ))`.
    pub distance_to_sub_spectrum: f64,
    /// `||Hψ - Eψ|| / dist(E, σ(H_Λ))`: the residual that rounding in the
    /// eigenpair alone can produce.
    pub error_floor: f64,
}

impl PoissonReport {
    pub fn relative(&self) -> f64 {
        self.max_residual / self.psi_max
    }
}

/// Evaluates the Poisson identity for an eigenpair of `H_big` on `sub ⊊ big`.
/// Fails with [`Error::Singular`] when `E` is resonant with `H_sub`.
pub fn poisson_identity_check(
    sample: &OperatorSample,
    sub: &Arc<Region>,
    pair: &EigenPair,
    kernel: &HoppingKernel,
) -> Result<PoissonReport> {
    let big = &sample.region;
    if !sub.is_subset_of(big) {
        return Err(Error::Precondition("sub-region must lie in the sample region".into()));
    }
    if sub.len() >= big.len() {
        return Err(Error::Precondition("sub-region must be a proper subset".into()));
    }
    let outside = Arc::new(big.difference(sub));
    let sub_sample = sample.restrict(sub.clone())?;
    let h_sub = build_hamiltonian(&sub_sample, kernel)?;
    let spec = CubeSpectrum::new(&h_sub)?;
    let dist = spec.distance_to_spectrum(pair.energy);
    if spec.is_singular(pair.energy) {
        return Err(Error::Singular { energy: pair.energy, sigma_min: dist });
    }
    let g = spec.resolvent_data(pair.energy);
    let t = kernel.matrix(sub, &outside);
    let psi_out = DVector::from_iterator(outside.len(), outside.points().iter().map(|p| pair.vector[big.index_of(p).unwrap()]));
    let psi_in = DVector::from_iterator(sub.len(), sub.points().iter().map(|p| pair.vector[big.index_of(p).unwrap()]));
    let coupled = &g * (t.data() * psi_out) / sample.lambda;
    let max_residual = (psi_in + coupled).amax();
    Ok(PoissonReport {
        max_residual,
        psi_max: pair.vector.amax(),
        distance_to_sub_spectrum: dist,
        error_floor: pair.residual / dist,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeReport {
    pub epsilon1: f64,
    /// `max_n |ψ(n)/ψ(0)| / (1+|n|)^{d/2+ε1}`.
    pub worst_ratio: f64,
    pub qualifies: bool,
}

/// Checks `|ψ(n)| <= (1+|n|)^{d/2+ε1}` after normalizing `ψ(0) = 1`, where
/// `0` is the center of `region`.
pub fn generalized_eigenvalue_probe(region: &Cube, epsilon1: f64, vector: &DVector<f64>, r: f64) -> Result<ProbeReport> {
    let d = region.dim() as f64;
    if !(epsilon1 > 0.0 && epsilon1 < r - 2.0 * d) {
        return Err(Error::Precondition(format!("need 0 < ε1 < r - 2d (ε1 = {epsilon1}, r = {r}, d = {d})")));
    }
    if vector.len() != region.len() {
        return Err(Error::ShapeMismatch(format!("{} amplitudes for {} sites", vector.len(), region.len())));
    }
    let origin = region.region().index_of(region.center()).expect("center in cube");
    let anchor = vector[origin];
    if anchor == 0.0 {
        return Err(Error::Precondition("ψ vanishes at the center; cannot normalize".into()));
    }
    let expo = d / 2.0 + epsilon1;
    let worst_ratio = region
        .region()
        .points()
        .iter()
        .zip(vector.iter())
        .map(|(p, x)| {
            let k = sup_distance_unchecked(p.coords(), region.center().coords()) as f64;
            (x / anchor).abs() / (1.0 + k).powf(expo)
        })
        .fold(0.0, f64::max);
    Ok(ProbeReport { epsilon1, worst_ratio, qualifies: worst_ratio <= 1.0 })
}

/// One mid-spectrum state of a decay experiment.
#[derive(Clone, Debug, Serialize)]
pub struct StateRecord {
    pub sample: u64,
    pub energy: f64,
    pub center: LatticePoint,
    pub beta: f64,
    pub envelope_pass: bool,
    pub worst_envelope_ratio: f64,
    pub ipr: f64,
}

/// Shell maximum of one state, for plotting.
#[derive(Clone, Debug, Serialize)]
pub struct ShellRow {
    pub sample: u64,
    pub state: usize,
    pub radius: u64,
    pub max: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DecayExperiment {
    pub samples: u64,
    pub beta_threshold: f64,
    pub states: Vec<StateRecord>,
    #[serde(skip)]
    pub shells: Vec<ShellRow>,
}

impl DecayExperiment {
    pub fn envelope_failures(&self) -> usize {
        self.states.iter().filter(|s| !s.envelope_pass).count()
    }

    pub fn min_beta(&self) -> f64 {
        self.states.iter().map(|s| s.beta).fold(f64::INFINITY, f64::min)
    }

    pub fn passed(&self) -> bool {
        !self.states.is_empty() && self.envelope_failures() == 0 && self.min_beta() >= self.beta_threshold
    }
}

/// Decay fits for every mid-spectrum state of `samples` independent samples
/// on `Λ_L(0)`. States must reach `β >= r/2`.
pub fn decay_experiment(
    model: &DisorderModel,
    kernel: &HoppingKernel,
    l: u64,
    lambda: f64,
    samples: u64,
    seed: u64,
) -> Result<DecayExperiment> {
    let cube = cube_points(&LatticePoint::origin(kernel.d), l)?;
    let region = Arc::new(cube.region().clone());
    let per_sample: Vec<Result<(Vec<StateRecord>, Vec<ShellRow>)>> = (0..samples)
        .into_par_iter()
        .map(|t| {
            let sample = OperatorSample::draw(model, region.clone(), lambda, derive_seed(seed, &[t]))?;
            let pairs = diagonalize(&build_hamiltonian(&sample, kernel)?)?;
            let mut states = Vec::new();
            let mut shells = Vec::new();
            for (state, pair) in mid_spectrum(&pairs).into_iter().enumerate() {
                let fit = decay_fit(&pair.vector, &cube, kernel.r)?;
                shells.extend(fit.shell_maxima.iter().map(|(&radius, &max)| ShellRow { sample: t, state, radius, max }));
                states.push(StateRecord {
                    sample: t,
                    energy: pair.energy,
                    center: fit.center,
                    beta: fit.beta,
                    envelope_pass: fit.envelope_pass,
                    worst_envelope_ratio: fit.worst_envelope_ratio,
                    ipr: fit.ipr,
                });
            }
            Ok((states, shells))
        })
        .collect();
    let mut out = DecayExperiment { samples, beta_threshold: kernel.r / 2.0, states: vec![], shells: vec![] };
    for r in per_sample {
        let (states, shells) = r?;
        out.states.extend(states);
        out.shells.extend(shells);
    }
    Ok(out)
}

/// Outcome of [`poisson_experiment`].
#[derive(Clone, Debug, Serialize)]
pub struct PoissonExperiment {
    pub instances: u64,
    /// Eigenpairs whose identity was evaluated.
    pub checked: usize,
    /// Pairs with `E` resonant with `H_Λ`.
    pub resonant: usize,
    /// Pairs whose rounding floor exceeds `1e-10 ||ψ||_∞`.
    pub unresolved: usize,
    /// Instances without a single evaluated pair.
    pub empty_instances: usize,
    /// Largest `residual / ||ψ||_∞`.
    pub max_relative_residual: f64,
}

impl PoissonExperiment {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.empty_instances == 0 && self.max_relative_residual <= 1e-9
    }
}

/// The Poisson identity on `Λ_sub(0) ⊊ Λ_L(0)` for every eigenpair of
/// `instances` samples whose identity is numerically resolvable.
pub fn poisson_experiment(
    model: &DisorderModel,
    kernel: &HoppingKernel,
    l: u64,
    sub: u64,
    lambda: f64,
    instances: u64,
    seed: u64,
) -> Result<PoissonExperiment> {
    if sub >= l {
        return Err(Error::Precondition(format!("sub-cube radius {sub} must be below {l}")));
    }
    let origin = LatticePoint::origin(kernel.d);
    let region = Arc::new(cube_points(&origin, l)?.region().clone());
    let sub_region = Arc::new(cube_points(&origin, sub)?.region().clone());
    let per: Vec<Result<(usize, usize, usize, f64)>> = (0..instances)
        .into_par_iter()
        .map(|t| {
            let sample = OperatorSample::draw(model, region.clone(), lambda, derive_seed(seed, &[t]))?;
            let pairs = diagonalize(&build_hamiltonian(&sample, kernel)?)?;
            let (mut checked, mut resonant, mut unresolved, mut worst) = (0, 0, 0, 0.0f64);
            for pair in &pairs {
                match poisson_identity_check(&sample, &sub_region, pair, kernel) {
                    Ok(rep) if rep.error_floor <= 1e-10 * rep.psi_max => {
                        checked += 1;
                        worst = worst.max(rep.relative());
                    }
                    Ok(_) => unresolved += 1,
                    Err(Error::Singular { .. }) => resonant += 1,
                    Err(e) => return Err(e),
                }
            }
            Ok((checked, resonant, unresolved, worst))
        })
        .collect();
    let mut out = PoissonExperiment {
        instances,
        checked: 0,
        resonant: 0,
        unresolved: 0,
        empty_instances: 0,
        max_relative_residual: 0.0,
    };
    for r in per {
        let (c, res, u, w) = r?;
        out.checked += c;
        out.resonant += res;
        out.unresolved += u;
        out.empty_instances += usize::from(c == 0);
        out.max_relative_residual = out.max_relative_residual.max(w);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(l: u64) -> Cube {
        cube_points(&LatticePoint::origin(1), l).unwrap()
    }

    fn matrix(region: &Cube, data: DMatrix<f64>) -> SobolevMatrix {
        let r = Arc::new(region.region().clone());
        SobolevMatrix::new(r.clone(), r, data).unwrap()
    }

    #[test]
    fn diagonal_and_two_by_two() {
        let c = line(2);
        let pairs = diagonalize(&matrix(&c, DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, -1.0, 0.5, 2.0, -2.0])))).unwrap();
        let es: Vec<f64> = pairs.iter().map(|p| p.energy).collect();
        assert_eq!(es, vec![-2.0, -1.0, 0.5, 2.0, 3.0]);
        for p in &pairs {
            assert_eq!(p.vector.iter().filter(|x| x.abs() > 0.0).count(), 1);
        }
        let two = Region::from_points(1, vec![LatticePoint::new(vec![0]), LatticePoint::new(vec![1])]).unwrap();
        let two = Arc::new(two);
        let h = SobolevMatrix::new(two.clone(), two, DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, -0.5])).unwrap();
        let pairs = diagonalize(&h).unwrap();
        assert!((pairs[0].energy + 0.5f64.sqrt()).abs() < 1e-14 && (pairs[1].energy - 0.5f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn trace_identity() {
        let c = line(24);
        let model = DisorderModel::uniform(1.0, 1.0).unwrap();
        let s = OperatorSample::draw(&model, Arc::new(c.region().clone()), 2.0, 9).unwrap();
        let h = build_hamiltonian(&s, &HoppingKernel::new(3.0, 1).unwrap()).unwrap();
        let sum: f64 = diagonalize(&h).unwrap().iter().map(|p| p.energy).sum();
        let tr = h.data().trace();
        assert!((sum - tr).abs() <= 1e-9 * tr.abs().max(1.0));
    }

    #[test]
    fn decay_detector_controls() {
        let c = line(30);
        let mut e = DVector::zeros(c.len());
        e[7] = 1.0;
        let fit = decay_fit(&e, &c, 5.0).unwrap();
        assert!(fit.passed());
        assert!(fit.beta.is_infinite());
        let flat = DVector::from_element(c.len(), 1.0);
        assert!(!decay_fit(&flat, &c, 5.0).unwrap().passed());
        // |n|^{-3} around a peak at the origin fits β = 3
        let pl = DVector::from_iterator(c.len(), c.region().points().iter().map(|p| match p.sup_norm() {
            0 => 2.0,
            k => (k as f64).powi(-3),
        }));
        let fit = decay_fit(&pl, &c, 5.0).unwrap();
        assert!((fit.beta - 3.0).abs() < 1e-9 && fit.passed());
        assert!(decay_fit(&flat.rows(0, 21).into_owned(), &line(10), 5.0).is_err());
    }

    #[test]
    fn poisson_identity_holds() {
        let big = line(40);
        let sub = Arc::new(line(10).region().clone());
        let kernel = HoppingKernel::new(4.0, 1).unwrap();
        let model = DisorderModel::uniform(1.0, 1.0).unwrap();
        let s = OperatorSample::draw(&model, Arc::new(big.region().clone()), 5.0, 4).unwrap();
        let pairs = diagonalize(&build_hamiltonian(&s, &kernel).unwrap()).unwrap();
        let mut checked = 0;
        for p in &pairs {
            match poisson_identity_check(&s, &sub, p, &kernel) {
                Ok(rep) if rep.error_floor <= 1e-10 * rep.psi_max => {
                    assert!(rep.relative() <= 1e-9, "{rep:?}");
                    checked += 1;
                }
                Ok(_) | Err(Error::Singular { .. }) => {}
                Err(e) => panic!("{e}"),
            }
        }
        assert!(checked > 40);
        assert!(poisson_identity_check(&s, &s.region.clone(), &pairs[0], &kernel).is_err());
    }

    #[test]
    fn experiments_small() {
        let model = DisorderModel::uniform(1.0, 1.0).unwrap();
        let kernel = HoppingKernel::new(5.0, 1).unwrap();
        let dec = decay_experiment(&model, &kernel, 30, 100.0, 2, 1).unwrap();
        assert!(dec.passed(), "{:?}", dec.states);
        assert!(!dec.shells.is_empty());
        let p = poisson_experiment(&model, &HoppingKernel::new(4.0, 1).unwrap(), 20, 6, 5.0, 3, 1).unwrap();
        assert!(p.passed(), "{p:?}");
    }

    #[test]
    fn probe_controls() {
        let c = line(30);
        let lin = DVector::from_iterator(c.len(), c.region().points().iter().map(|p| 1.0 + p.sup_norm() as f64));
        assert!(!generalized_eigenvalue_probe(&c, 0.1, &lin, 5.0).unwrap().qualifies);
        let mut loc = DVector::zeros(c.len());
        loc[30] = 1.0;
        loc[31] = 0.01;
        assert!(generalized_eigenvalue_probe(&c, 0.1, &loc, 5.0).unwrap().qualifies);
        assert!(generalized_eigenvalue_probe(&c, 3.0, &loc, 5.0).is_err());
        let mut off = DVector::zeros(c.len());
        off[0] = 1.0;
        assert!(generalized_eigenvalue_probe(&c, 0.1, &off, 5.0).is_err());
        assert!((ipr(&loc) - (1.0 + 1e-8) / (1.0001f64).powi(2)).abs() < 1e-12);
    }
}
