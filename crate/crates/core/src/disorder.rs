//! Disorder distributions, per-site seeded potentials, the power-law hopping
//! kernel and finite-volume Hamiltonians `H = λ⁻¹ T + V`.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{lattice_power_tail, sup_distance, sup_distance_unchecked, LatticePoint, Region};
use crate::sobolev::{SobolevMatrix, SobolevParams};
use crate::stats::{bonferroni_z, Frequency};

/// Ternary digits drawn per Cantor sample; truncation error is below `3^-34 M`.
const CANTOR_DIGITS: u32 = 34;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistributionKind {
    /// Uniform on `[-M, M]`.
    Uniform,
    /// `±M` with probability 1/2 each.
    Bernoulli,
    /// Middle-thirds Cantor measure scaled to `[0, M]`.
    Cantor,
}

/// Single-site distribution `μ` with its Hölder data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisorderModel {
    pub kind: DistributionKind,
    /// Support bound `M`.
    pub m: f64,
    /// Hölder order; `None` for Bernoulli.
    pub rho: Option<f64>,
    /// Working constant `κ` in `μ([a,b]) <= κ⁻¹|a-b|^ρ`.
    pub kappa: f64,
    /// Width `κ0` up to which the Hölder bound is claimed.
    pub kappa0: f64,
}

impl DisorderModel {
    pub fn uniform(m: f64, kappa: f64) -> Result<Self> {
        Self { kind: DistributionKind::Uniform, m, rho: Some(1.0), kappa, kappa0: 2.0 * m }.validated()
    }

    pub fn bernoulli(m: f64) -> Result<Self> {
        Self { kind: DistributionKind::Bernoulli, m, rho: None, kappa: 1.0, kappa0: 0.0 }.validated()
    }

    pub fn cantor(m: f64, kappa: f64) -> Result<Self> {
        let rho = 2f64.ln() / 3f64.ln();
        Self { kind: DistributionKind::Cantor, m, rho: Some(rho), kappa, kappa0: m }.validated()
    }

    /// Checks support and Hölder data. `κ` above the exact constant is
    /// accepted, so that certificates can be exercised on wrong claims.
    pub fn validated(self) -> Result<Self> {
        if !(self.m > 0.0 && self.m.is_finite()) {
            return Err(Error::InvalidArgument(format!("support bound M must be positive, got {}", self.m)));
        }
        match (self.kind, self.rho) {
            (DistributionKind::Bernoulli, _) => {}
            (_, Some(rho)) if rho > 0.0 && self.kappa > 0.0 && self.kappa0 > 0.0 => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "continuous model needs ρ > 0, κ > 0 and κ0 > 0 (got {:?}, {}, {})",
                    self.rho, self.kappa, self.kappa0
                )))
            }
        }
        Ok(self)
    }

    pub fn is_continuous(&self) -> bool {
        self.kind != DistributionKind::Bernoulli
    }

    /// Hölder order, refusing Bernoulli.
    pub fn require_rho(&self) -> Result<f64> {
        self.rho
            .filter(|_| self.is_continuous())
            .ok_or_else(|| Error::UnsupportedModel("Bernoulli disorder has no Hölder order".into()))
    }

    /// `K_ρ(μ)`: the largest admissible `κ`.
    pub fn holder_constant(&self) -> Option<f64> {
        match self.kind {
            DistributionKind::Uniform => Some(2.0 * self.m),
            // the Cantor function is ρ-Hölder with best constant 1
            DistributionKind::Cantor => Some(self.m.powf(self.rho?)),
            DistributionKind::Bernoulli => None,
        }
    }

    /// `μ((-∞, x])`.
    pub fn cdf(&self, x: f64) -> f64 {
        let m = self.m;
        match self.kind {
            DistributionKind::Uniform => ((x + m) / (2.0 * m)).clamp(0.0, 1.0),
            DistributionKind::Bernoulli => {
                if x < -m {
                    0.0
                } else if x < m {
                    0.5
                } else {
                    1.0
                }
            }
            DistributionKind::Cantor => cantor_function(x / m),
        }
    }

    /// `μ([a, b])` for continuous kinds.
    pub fn measure(&self, a: f64, b: f64) -> f64 {
        if b < a {
            return 0.0;
        }
        self.cdf(b) - self.cdf(a)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let m = self.m;
        match self.kind {
            DistributionKind::Uniform => -m + 2.0 * m * rng.gen::<f64>(),
            DistributionKind::Bernoulli => {
                if rng.gen::<bool>() {
                    m
                } else {
                    -m
                }
            }
            DistributionKind::Cantor => {
                let bits: u64 = rng.gen();
                let mut x = 0.0;
                let mut scale = 2.0 / 3.0;
                for i in 0..CANTOR_DIGITS {
                    if bits >> i & 1 == 1 {
                        x += scale;
                    }
                    scale /= 3.0;
                }
                m * x
            }
        }
    }
}

/// The Cantor function on `[0, 1]`, extended by 0 and 1.
pub fn cantor_function(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let (mut x, mut acc, mut scale) = (x, 0.0, 0.5);
    for _ in 0..64 {
        x *= 3.0;
        let digit = x.floor();
        x -= digit;
        match digit as u8 {
            0 => {}
            1 => return acc + scale,
            _ => acc += scale,
        }
        scale *= 0.5;
    }
    acc
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed derived from a master seed and a sequence of words.
pub fn derive_seed(master: u64, words: &[u64]) -> u64 {
    words.iter().fold(mix(master), |h, &w| mix(h ^ mix(w)))
}

/// Seed of the potential at one site.
pub fn site_seed(seed: u64, site: &LatticePoint) -> u64 {
    let words: Vec<u64> = site.coords().iter().map(|&c| c as u64).collect();
    derive_seed(seed, &words)
}

/// `V_ω(n)` for the realization `seed`; independent of which region is sampled.
pub fn site_value(model: &DisorderModel, seed: u64, site: &LatticePoint) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(site_seed(seed, site));
    model.sample(&mut rng)
}

/// Potential values on a region, in the region's index order.
pub fn sample_potential(model: &DisorderModel, region: &Region, seed: u64) -> Vec<f64> {
    region.points().iter().map(|p| site_value(model, seed, p)).collect()
}

/// `T(m,n) = |m-n|^{-r}` off the diagonal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoppingKernel {
    pub r: f64,
    pub d: usize,
}

impl HoppingKernel {
    pub fn new(r: f64, d: usize) -> Result<Self> {
        if d == 0 || !(r > d as f64) {
            return Err(Error::InvalidArgument(format!("hopping needs r > d >= 1 (r = {r}, d = {d})")));
        }
        Ok(Self { r, d })
    }

    pub fn entry_at_distance(&self, k: u64) -> f64 {
        if k == 0 {
            0.0
        } else {
            (k as f64).powf(-self.r)
        }
    }

    /// `Σ_{n≠0} |n|^{-r}`, which bounds `||T_Λ||` on every `Λ` by Schur's test.
    pub fn schur_bound(&self) -> f64 {
        lattice_power_tail(self.r, self.d, 1).expect("r > d").0
    }

    /// `||T||_s` of the full lattice operator, finite for `s < r - d/2`.
    pub fn sobolev_norm(&self, s: f64, params: &SobolevParams) -> Result<f64> {
        let theta = 2.0 * self.r - 2.0 * s;
        let (tail, _) = lattice_power_tail(theta, self.d, 1)?;
        Ok((params.c0 * tail).sqrt())
    }

    /// `T_{rows, cols}` as a matrix.
    pub fn matrix(&self, rows: &Arc<Region>, cols: &Arc<Region>) -> SobolevMatrix {
        let data = DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
            self.entry_at_distance(sup_distance_unchecked(rows.point(i).coords(), cols.point(j).coords()))
        });
        SobolevMatrix::new(rows.clone(), cols.clone(), data).expect("shape from regions")
    }
}

pub fn hopping_entry(m: &LatticePoint, n: &LatticePoint, kernel: &HoppingKernel) -> Result<f64> {
    Ok(kernel.entry_at_distance(sup_distance(m, n)?))
}

/// A finite-volume realization `(Λ, λ, V|Λ)`.
#[derive(Clone, Debug)]
pub struct OperatorSample {
    pub region: Arc<Region>,
    pub lambda: f64,
    pub potential: Vec<f64>,
    pub bound: f64,
    pub seed: Option<u64>,
}

impl OperatorSample {
    /// Draws `V` on `region` from `model` with realization `seed`.
    pub fn draw(model: &DisorderModel, region: Arc<Region>, lambda: f64, seed: u64) -> Result<Self> {
        let potential = sample_potential(model, &region, seed);
        Self::from_values(region, lambda, potential, model.m).map(|s| Self { seed: Some(seed), ..s })
    }

    pub fn from_values(region: Arc<Region>, lambda: f64, potential: Vec<f64>, bound: f64) -> Result<Self> {
        if !(lambda >= 1.0) {
            return Err(Error::InvalidArgument(format!("coupling λ must be >= 1, got {lambda}")));
        }
        if potential.len() != region.len() {
            return Err(Error::ShapeMismatch(format!("{} values for {} sites", potential.len(), region.len())));
        }
        if let Some(v) = potential.iter().find(|v| !(v.abs() <= bound)) {
            return Err(Error::InvalidArgument(format!("potential value {v} outside [-{bound}, {bound}]")));
        }
        Ok(Self { region, lambda, potential, bound, seed: None })
    }

    pub fn value(&self, p: &LatticePoint) -> Option<f64> {
        self.region.index_of(p).map(|i| self.potential[i])
    }

    /// Overrides `V(p)`, e.g. to plant a resonance.
    pub fn set_value(&mut self, p: &LatticePoint, v: f64) -> Result<()> {
        if !(v.abs() <= self.bound) {
            return Err(Error::InvalidArgument(format!("potential value {v} outside [-{0}, {0}]", self.bound)));
        }
        let i = self
            .region
            .index_of(p)
            .ok_or_else(|| Error::InvalidArgument(format!("{p:?} is not in the sample region")))?;
        self.potential[i] = v;
        Ok(())
    }

    /// The same realization on a sub-region.
    pub fn restrict(&self, sub: Arc<Region>) -> Result<Self> {
        let potential = sub
            .points()
            .iter()
            .map(|p| {
                self.value(p)
                    .ok_or_else(|| Error::InvalidArgument(format!("{p:?} is not in the sample region")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { region: sub, lambda: self.lambda, potential, bound: self.bound, seed: self.seed })
    }
}

/// `H_Λ = λ⁻¹ T_Λ + V_Λ`.
pub fn build_hamiltonian(sample: &OperatorSample, kernel: &HoppingKernel) -> Result<SobolevMatrix> {
    let region = &sample.region;
    if region.is_empty() {
        return Err(Error::Empty("region"));
    }
    if region.dim() != kernel.d {
        return Err(Error::DimensionMismatch(region.dim(), kernel.d));
    }
    let n = region.len();
    let inv = 1.0 / sample.lambda;
    let mut data = DMatrix::zeros(n, n);
    for j in 0..n {
        data[(j, j)] = sample.potential[j];
        for i in 0..j {
            let k = sup_distance_unchecked(region.point(i).coords(), region.point(j).coords());
            let t = inv * kernel.entry_at_distance(k);
            data[(i, j)] = t;
            data[(j, i)] = t;
        }
    }
    SobolevMatrix::new(region.clone(), region.clone(), data)
}

/// One interval of a [`HolderReport`].
#[derive(Clone, Debug, Serialize)]
pub struct HolderCell {
    pub a: f64,
    pub width: f64,
    pub estimate: Frequency,
    /// `κ⁻¹ w^ρ`.
    pub bound: f64,
    pub violated: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct HolderReport {
    pub rho: f64,
    pub kappa: f64,
    pub samples: u64,
    /// Largest `|a-b|^{-ρ} μ̂([a,b])` seen.
    pub max_ratio: f64,
    pub cells: Vec<HolderCell>,
    pub violations: usize,
}

impl HolderReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Monte Carlo check of `μ([a,b]) <= κ⁻¹|a-b|^ρ` on a grid of intervals of
/// widths `κ0 2^{-j}`, `j < 6`. A violation is flagged when the lower edge of a
/// simultaneous (Bonferroni) Wilson interval exceeds the bound.
pub fn holder_certificate(model: &DisorderModel, samples: u64, seed: u64) -> Result<HolderReport> {
    let rho = model.require_rho()?;
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws: Vec<f64> = (0..samples).map(|_| model.sample(&mut rng)).collect();
    draws.sort_by(f64::total_cmp);
    let (lo, hi) = match model.kind {
        DistributionKind::Cantor => (0.0, model.m),
        _ => (-model.m, model.m),
    };
    let mut grid = Vec::new();
    for j in 0..6 {
        let w = model.kappa0.min(hi - lo) / 2f64.powi(j);
        // half-overlapping windows
        let steps = ((hi - lo - w) / (0.5 * w)).floor() as usize;
        for i in 0..=steps {
            grid.push((lo + 0.5 * w * i as f64, w));
        }
    }
    let z = bonferroni_z(grid.len());
    let count_in = |a: f64, b: f64| {
        let first = draws.partition_point(|&x| x < a);
        let last = draws.partition_point(|&x| x <= b);
        (last - first) as u64
    };
    let mut cells = Vec::with_capacity(grid.len());
    let mut max_ratio = 0.0f64;
    for (a, w) in grid {
        let estimate = Frequency::with_z(count_in(a, a + w), samples, z);
        let bound = w.powf(rho) / model.kappa;
        max_ratio = max_ratio.max(estimate.freq / w.powf(rho));
        cells.push(HolderCell { a, width: w, estimate, bound, violated: estimate.ci_lo > bound });
    }
    let violations = cells.iter().filter(|c| c.violated).count();
    Ok(HolderReport { rho, kappa: model.kappa, samples, max_ratio, cells, violations })
}
