//! Experiment configuration, presets and result persistence.
//!
//! A run reads one TOML file, executes the named experiment and writes
//! `run.json`, `tallies.csv` and `shells.csv` into the output directory.
//! Numeric payloads depend only on the config; `run.json` additionally
//! carries timestamps and the worker count.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::disorder::{DisorderModel, DistributionKind};
use crate::error::{Error, Result};
use crate::localization::{decay_experiment, poisson_experiment, ShellRow};
use crate::msa::{
    induction_step_estimate, initial_scale_verify, msa_run, resonance_event_estimate, separation_estimate,
    validate_params, wegner_estimate, InitialScaleParams, MsaParameters, TrialOutcome,
};
use crate::stats::Frequency;
use crate::suite::{clustering_suite, coupling_suite, endpoint_suite, sobolev_suite, tail_sum_suite, SuiteReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    LemmaSuite,
    InitialScale,
    Wegner,
    Separation,
    InductionStep,
    MsaRun,
    Decay,
    Poisson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisorderConfig {
    pub kind: DistributionKind,
    pub m: f64,
    #[serde(default = "one")]
    pub kappa: f64,
}

fn one() -> f64 {
    1.0
}

impl DisorderConfig {
    pub fn model(&self) -> Result<DisorderModel> {
        match self.kind {
            DistributionKind::Uniform => DisorderModel::uniform(self.m, self.kappa),
            DistributionKind::Bernoulli => DisorderModel::bernoulli(self.m),
            DistributionKind::Cantor => DisorderModel::cantor(self.m, self.kappa),
        }
    }
}

/// Induction exponents, with the flag that admits sets failing the
/// constraint check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsConfig {
    #[serde(default)]
    pub surrogate: bool,
    #[serde(flatten)]
    pub msa: MsaParameters,
}

/// Kind-specific settings; each experiment reads the ones it needs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Initial scale `L0`.
    pub l0: Option<u64>,
    /// Cube radius `L` (Wegner, separation, decay, Poisson big cube).
    pub l: Option<u64>,
    /// Small scale `l` of an induction step.
    pub small_l: Option<u64>,
    /// Sub-cube radius for the Poisson identity.
    pub sub_l: Option<u64>,
    /// Center energy `E0`.
    pub e0: Option<f64>,
    /// Coupling `λ`; defaults to `λ0` where that is defined.
    pub lambda: Option<f64>,
    pub epsilons: Option<Vec<f64>>,
    /// Half-width of the induction-step energy interval.
    pub half_width: Option<f64>,
    pub grid: Option<usize>,
    pub k_max: Option<usize>,
    pub max_sites: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub trials: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub disorder: DisorderConfig,
    pub params: ParamsConfig,
    #[serde(default)]
    pub settings: Settings,
}

fn need<T: Copy>(v: Option<T>, name: &str) -> Result<T> {
    v.ok_or_else(|| Error::Config(format!("settings.{name} is required for this experiment")))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks everything that can be checked without running.
    pub fn validate(&self) -> Result<()> {
        let model = self.disorder.model()?;
        let q = &self.params.msa;
        let report = validate_params(q);
        if !report.all_pass() && !self.params.surrogate {
            let names: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
            return Err(Error::Config(format!(
                "parameter constraints fail ({}); set params.surrogate = true to run a downsized set",
                names.join(", ")
            )));
        }
        q.classifier()?;
        q.kernel()?;
        if self.trials == 0 {
            return Err(Error::Config("trials must be positive".into()));
        }
        let s = &self.settings;
        match self.kind {
            ExperimentKind::LemmaSuite => {}
            ExperimentKind::InitialScale => {
                InitialScaleParams::new(&model, q, need(s.l0, "l0")?, s.e0.unwrap_or(0.0))?;
            }
            ExperimentKind::MsaRun => {
                InitialScaleParams::new(&model, q, need(s.l0, "l0")?, s.e0.unwrap_or(0.0))?;
                need(s.k_max, "k_max")?;
            }
            ExperimentKind::Wegner => {
                need(s.l, "l")?;
                need(s.lambda, "lambda")?;
                if s.epsilons.as_ref().map_or(true, |e| e.is_empty()) {
                    return Err(Error::Config("settings.epsilons needs at least one value".into()));
                }
            }
            ExperimentKind::Separation | ExperimentKind::Decay => {
                need(s.l, "l")?;
                need(s.lambda, "lambda")?;
            }
            ExperimentKind::InductionStep => {
                need(s.small_l, "small_l")?;
                need(s.l, "l")?;
                need(s.lambda, "lambda")?;
                need(s.half_width, "half_width")?;
            }
            ExperimentKind::Poisson => {
                if need(s.sub_l, "sub_l")? >= need(s.l, "l")? {
                    return Err(Error::Config("settings.sub_l must be below settings.l".into()));
                }
                need(s.lambda, "lambda")?;
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML form, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = None;
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }
}

/// One row of `tallies.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TallyRow {
    pub level: usize,
    pub event: String,
    pub count: u64,
    pub trials: u64,
    pub freq: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub bound: Option<f64>,
    pub pass: bool,
}

impl TallyRow {
    fn new(level: usize, event: String, f: Frequency, bound: Option<f64>, pass: bool) -> Self {
        Self { level, event, count: f.count, trials: f.trials, freq: f.freq, ci_lo: f.ci_lo, ci_hi: f.ci_hi, bound, pass }
    }
}

fn outcome_rows(level: usize, o: &TrialOutcome) -> Vec<TallyRow> {
    o.tallies
        .iter()
        .map(|t| TallyRow::new(level, t.event.clone(), t.frequency, t.bound, t.pass || !t.asserted()))
        .collect()
}

fn suite_rows(r: &SuiteReport) -> Vec<TallyRow> {
    r.checks
        .iter()
        .map(|c| {
            let name = format!("{}/{}", r.suite, c.name);
            TallyRow::new(0, name, Frequency::new(c.violations, c.instances), Some(0.0), !c.claimed || c.violations == 0)
        })
        .collect()
}

/// Everything one run produced.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub passed: bool,
    pub tallies: Vec<TallyRow>,
    pub shells: Vec<ShellRow>,
    /// Full experiment payload for `run.json`.
    pub payload: serde_json::Value,
    pub summary: Vec<String>,
}

fn json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("payload serializes")
}

/// Executes the experiment; no files are touched.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let model = cfg.disorder.model()?;
    let q = &cfg.params.msa;
    let s = &cfg.settings;
    let (trials, seed) = (cfg.trials, cfg.seed);
    let mut out = RunOutput { passed: true, tallies: vec![], shells: vec![], payload: serde_json::Value::Null, summary: vec![] };
    match cfg.kind {
        ExperimentKind::LemmaSuite => {
            let reports = vec![
                sobolev_suite(trials, seed),
                endpoint_suite(trials, seed),
                clustering_suite(2 * trials, seed),
                tail_sum_suite(),
                coupling_suite(trials.div_ceil(10), seed),
            ];
            for r in &reports {
                out.passed &= r.passed();
                out.tallies.extend(suite_rows(r));
                out.summary.push(format!("{}: {}", r.suite, if r.passed() { "pass" } else { "FAIL" }));
            }
            out.payload = json(&reports);
        }
        ExperimentKind::InitialScale => {
            let isp = InitialScaleParams::new(&model, q, need(s.l0, "l0")?, s.e0.unwrap_or(0.0))?;
            let lambda = s.lambda.unwrap_or(isp.lambda0);
            let res = resonance_event_estimate(&model, q.d, isp.l0, isp.e0, isp.epsilon, Some(q.p), trials, seed)?;
            let ver = initial_scale_verify(&model, q, &isp, lambda, trials, seed)?;
            for o in [&res, &ver] {
                out.passed &= o.passed();
                out.tallies.extend(outcome_rows(0, o));
            }
            out.summary.push(format!("ε = {:e}, λ0 = {:e}, λ = {lambda:e}", isp.epsilon, isp.lambda0));
            out.summary.push(format!("deterministic failures: {}", ver.failures.len()));
            out.payload = serde_json::json!({ "initial": isp, "resonance": res, "verification": ver });
        }
        ExperimentKind::Wegner => {
            let kernel = q.kernel()?;
            let eps = s.epsilons.clone().unwrap_or_default();
            let mut runs = Vec::new();
            for (level, &e) in eps.iter().enumerate() {
                let o = wegner_estimate(&model, &kernel, need(s.l, "l")?, s.e0.unwrap_or(0.0), e, need(s.lambda, "lambda")?, trials, seed)?;
                out.passed &= o.passed();
                out.tallies.extend(outcome_rows(level, &o));
                runs.push(o);
            }
            out.payload = json(&runs);
        }
        ExperimentKind::Separation => {
            let o = separation_estimate(&model, &q.kernel()?, need(s.l, "l")?, q.tau, q.p, need(s.lambda, "lambda")?, trials, seed, false)?;
            out.passed &= o.passed();
            out.tallies.extend(outcome_rows(0, &o));
            out.payload = json(&o);
        }
        ExperimentKind::InductionStep => {
            let (e0, hw) = (s.e0.unwrap_or(0.0), need(s.half_width, "half_width")?);
            let o = induction_step_estimate(
                &model,
                q,
                need(s.small_l, "small_l")?,
                need(s.l, "l")?,
                (e0 - hw, e0 + hw),
                need(s.lambda, "lambda")?,
                s.grid.unwrap_or(9),
                trials,
                seed,
            )?;
            out.passed &= o.passed();
            out.tallies.extend(outcome_rows(0, &o));
            out.payload = json(&o);
        }
        ExperimentKind::MsaRun => {
            let l0 = need(s.l0, "l0")?;
            let isp = InitialScaleParams::new(&model, q, l0, s.e0.unwrap_or(0.0))?;
            let lambda = s.lambda.unwrap_or(isp.lambda0);
            let r = msa_run(&model, q, l0, isp.e0, need(s.k_max, "k_max")?, lambda, trials, s.max_sites.unwrap_or(400), seed)?;
            out.passed &= r.passed();
            for (k, o) in r.levels.iter().enumerate() {
                out.tallies.extend(outcome_rows(k, o));
            }
            out.summary.push(format!("scales {:?}, λ0 = {:e}, monotone: {}", r.schedule.levels, isp.lambda0, r.monotone));
            if let Some(k) = r.truncated_at {
                out.summary.push(format!("stopped before level {k}: cube exceeds the size budget"));
            }
            out.payload = json(&r);
        }
        ExperimentKind::Decay => {
            let kernel = q.kernel()?;
            let d = decay_experiment(&model, &kernel, need(s.l, "l")?, need(s.lambda, "lambda")?, trials, seed)?;
            out.passed &= d.passed();
            let n = d.states.len() as u64;
            let fails = d.envelope_failures() as u64;
            let slow = d.states.iter().filter(|st| st.beta < d.beta_threshold).count() as u64;
            out.tallies.push(TallyRow::new(0, "envelope-fail".into(), Frequency::new(fails, n), Some(0.0), fails == 0));
            out.tallies.push(TallyRow::new(0, "beta-below-r/2".into(), Frequency::new(slow, n), Some(0.0), slow == 0));
            out.summary.push(format!("{n} mid-spectrum states, min β = {:.3}", d.min_beta()));
            out.shells = d.shells.clone();
            out.payload = json(&d);
        }
        ExperimentKind::Poisson => {
            let p = poisson_experiment(&model, &q.kernel()?, need(s.l, "l")?, need(s.sub_l, "sub_l")?, need(s.lambda, "lambda")?, trials, seed)?;
            out.passed &= p.passed();
            let total = (p.checked + p.resonant + p.unresolved) as u64;
            out.tallies.push(TallyRow::new(0, "identity-checked".into(), Frequency::new(p.checked as u64, total), None, p.passed()));
            out.summary.push(format!("max residual / ||ψ|| = {:e} over {} pairs", p.max_relative_residual, p.checked));
            out.payload = json(&p);
        }
    }
    Ok(out)
}

/// Process exit status of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    AssertionFailed = 1,
    ConfigError = 2,
    BudgetExceeded = 3,
}

impl Status {
    pub fn of_error(e: &Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::UnsupportedModel(_) | Error::DimensionMismatch(..) => {
                Status::ConfigError
            }
            Error::BudgetExceeded(_) => Status::BudgetExceeded,
            _ => Status::AssertionFailed,
        }
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    config_hash: String,
    version: &'static str,
    started_unix: u64,
    finished_unix: u64,
    workers: usize,
    config: &'a ExperimentConfig,
    passed: bool,
    summary: &'a [String],
    payload: &'a serde_json::Value,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Writes `rows` as CSV with a header.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs `cfg` and writes its artifacts into `dir`.
pub fn run_to(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutput> {
    let started_unix = now();
    let out = execute(cfg)?;
    fs::create_dir_all(dir)?;
    if out.tallies.is_empty() {
        // keep the header so downstream readers see a consistent schema
        fs::write(dir.join("tallies.csv"), "level,event,count,trials,freq,ci_lo,ci_hi,bound,pass\n")?;
    } else {
        write_csv(&dir.join("tallies.csv"), &out.tallies)?;
    }
    if out.shells.is_empty() {
        fs::write(dir.join("shells.csv"), "sample,state,radius,max\n")?;
    } else {
        write_csv(&dir.join("shells.csv"), &out.shells)?;
    }
    let record = RunRecord {
        config_hash: cfg.hash(),
        version: env!("CARGO_PKG_VERSION"),
        started_unix,
        finished_unix: now(),
        workers: rayon::current_num_threads(),
        config: cfg,
        passed: out.passed,
        summary: &out.summary,
        payload: &out.payload,
    };
    let text = serde_json::to_string_pretty(&record).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    fs::write(dir.join("run.json"), text)?;
    Ok(out)
}

/// Default output directory: `results/<kind>-<hash prefix>`.
pub fn default_output(cfg: &ExperimentConfig) -> PathBuf {
    let kind = serde_json::to_value(cfg.kind).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
    PathBuf::from("results").join(format!("{kind}-{}", &cfg.hash()[..12]))
}

/// The desk-scale exponents: `p = 1`, `τ' = 8`, `τ = 6`, `s0 = 3/4`, `r1 = 2`, `r = 4`.
pub fn desk_surrogate_d1() -> MsaParameters {
    MsaParameters {
        p: 1.0,
        tau_prime: 8.0,
        tau: 6.0,
        s0: 0.75,
        r1: 2.0,
        r: 4.0,
        delta: 0.5,
        zeta: 0.9,
        kappa: 1.0,
        ..MsaParameters::theorem_d1()
    }
}

fn uniform() -> DisorderConfig {
    DisorderConfig { kind: DistributionKind::Uniform, m: 1.0, kappa: 1.0 }
}

fn surrogate(msa: MsaParameters) -> ParamsConfig {
    ParamsConfig { surrogate: true, msa }
}

/// Shipped presets: name, description, config.
pub fn presets() -> Vec<(&'static str, &'static str, ExperimentConfig)> {
    vec![
        (
            "paper-params-d1",
            "initial scale with the full d = 1 exponent set (α = 6, δ = 1/2, ξ = 2, r = 331) at L0 = 100",
            ExperimentConfig {
                kind: ExperimentKind::InitialScale,
                seed: 1,
                trials: 200,
                output: None,
                disorder: uniform(),
                params: ParamsConfig { surrogate: false, msa: MsaParameters::theorem_d1() },
                settings: Settings { l0: Some(100), e0: Some(0.0), ..Settings::default() },
            },
        ),
        (
            "desk-surrogate-d1",
            "initial-scale determinism at L0 = 5, λ = λ0, 10^3 trials, downsized exponents",
            ExperimentConfig {
                kind: ExperimentKind::InitialScale,
                seed: 2024,
                trials: 1000,
                output: None,
                disorder: uniform(),
                params: surrogate(desk_surrogate_d1()),
                settings: Settings { l0: Some(5), e0: Some(0.0), ..Settings::default() },
            },
        ),
        (
            "desk-surrogate-d2",
            "two-level run in d = 2 with α = 2 from L0 = 3",
            ExperimentConfig {
                kind: ExperimentKind::MsaRun,
                seed: 7,
                trials: 200,
                output: None,
                disorder: uniform(),
                params: surrogate(MsaParameters {
                    d: 2,
                    alpha: 2.0,
                    xi: 0.5,
                    delta: 0.8,
                    j: 2,
                    s0: 1.25,
                    r1: 2.0,
                    r: 5.0,
                    ..desk_surrogate_d1()
                }),
                settings: Settings { l0: Some(3), e0: Some(0.0), k_max: Some(1), max_sites: Some(400), ..Settings::default() },
            },
        ),
        (
            "wegner-grid",
            "Wegner frequency at L = 8, λ = 10 for ε = 10^-3 and 2·10^-3, 10^5 trials",
            ExperimentConfig {
                kind: ExperimentKind::Wegner,
                seed: 11,
                trials: 100_000,
                output: None,
                disorder: uniform(),
                params: surrogate(desk_surrogate_d1()),
                settings: Settings {
                    l: Some(8),
                    e0: Some(0.0),
                    lambda: Some(10.0),
                    epsilons: Some(vec![1e-3, 2e-3]),
                    ..Settings::default()
                },
            },
        ),
        (
            "decay-r5",
            "eigenfunction decay fits at r = 5, λ = 100, L = 100, 20 samples",
            ExperimentConfig {
                kind: ExperimentKind::Decay,
                seed: 5,
                trials: 20,
                output: None,
                disorder: uniform(),
                params: surrogate(MsaParameters { r: 5.0, ..desk_surrogate_d1() }),
                settings: Settings { l: Some(100), lambda: Some(100.0), ..Settings::default() },
            },
        ),
    ]
}

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    presets().into_iter().find(|p| p.0 == name).map(|p| p.2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for (name, _, cfg) in presets() {
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
            assert_eq!(back, cfg, "{name}");
            assert_eq!(back.hash(), cfg.hash());
        }
        let full = preset("paper-params-d1").unwrap();
        assert_eq!((full.params.msa.alpha, full.params.msa.delta, full.params.msa.xi), (6.0, 0.5, 2.0));
        assert!(!full.params.surrogate);
    }

    #[test]
    fn config_errors() {
        let good = preset("decay-r5").unwrap().to_toml();
        let no_seed: String = good.lines().filter(|l| !l.starts_with("seed")).collect::<Vec<_>>().join("\n");
        let e = ExperimentConfig::from_toml(&no_seed).unwrap_err();
        assert_eq!(Status::of_error(&e), Status::ConfigError);
        assert!(e.to_string().contains("seed"));
        let unflagged = good.replace("surrogate = true", "surrogate = false");
        let e = ExperimentConfig::from_toml(&unflagged).unwrap_err();
        assert!(e.to_string().contains("surrogate"));
        let mut c = preset("wegner-grid").unwrap();
        c.settings.epsilons = Some(vec![]);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
