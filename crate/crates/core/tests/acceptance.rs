use std::io::Write;
use std::time::{Duration, Instant};

use powerloc::disorder::{DisorderModel, HoppingKernel};
use powerloc::harness::{desk_surrogate_d1, presets, run_to};
use powerloc::localization::{decay_experiment, poisson_experiment};
use powerloc::msa::{initial_scale_verify, resonance_event_estimate, separation_estimate, wegner_estimate, InitialScaleParams};
use powerloc::suite::{clustering_suite, coupling_suite, endpoint_suite, sobolev_suite, tail_sum_suite, SuiteReport};

fn verdict(id: u32, name: &str, ok: bool, elapsed: Duration, limit: Duration, detail: String) {
    let ok = ok && elapsed <= limit;
    // straight to the stderr handle so the line survives libtest capture
    let _ = writeln!(
        std::io::stderr(),
        "{} [{id:>2}] {name}: {detail} ({:.1}s, limit {}s)",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
}

fn suite_detail(r: &SuiteReport) -> String {
    let bad: Vec<String> = r.checks.iter().filter(|c| c.claimed && c.violations > 0).map(|c| format!("{}={}", c.name, c.violations)).collect();
    let claimed = r.checks.iter().filter(|c| c.claimed).count();
    if bad.is_empty() {
        format!("{} instances, {claimed} claimed checks, 0 violations, {} skipped", r.instances, r.skipped.len())
    } else {
        format!("violations: {}", bad.join(", "))
    }
}

fn uniform() -> DisorderModel {
    DisorderModel::uniform(1.0, 1.0).unwrap()
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

#[test]
fn sobolev_lemmas() {
    let t = Instant::now();
    let r = sobolev_suite(500, 1);
    verdict(1, "sobolev lemma suite", r.passed() && r.instances == 500, t.elapsed(), secs(60), suite_detail(&r));
}

#[test]
fn endpoint_sufficiency() {
    let t = Instant::now();
    let r = endpoint_suite(200, 2);
    verdict(2, "endpoint verdict vs 25-point grid", r.passed(), t.elapsed(), secs(30), suite_detail(&r));
}

#[test]
fn coupling_identities() {
    let t = Instant::now();
    let r = coupling_suite(50, 3);
    let evaluated = r.check("left-inverse").map_or(0, |c| c.instances);
    verdict(3, "coupling identities", r.passed() && evaluated > 0, t.elapsed(), secs(300), suite_detail(&r));
}

#[test]
fn clustering_certificates() {
    let t = Instant::now();
    let r = clustering_suite(1000, 4);
    verdict(4, "clustering certificates", r.passed(), t.elapsed(), secs(60), suite_detail(&r));
}

#[test]
fn initial_scale() {
    let t = Instant::now();
    let model = uniform();
    let q = desk_surrogate_d1();
    let isp = InitialScaleParams::new(&model, &q, 5, 0.0).unwrap();
    let res = resonance_event_estimate(&model, 1, 5, 0.0, isp.epsilon, Some(q.p), 1000, 2024).unwrap();
    let ver = initial_scale_verify(&model, &q, &isp, isp.lambda0, 1000, 2024).unwrap();
    let exact = res.tally("resonance-exact").unwrap();
    let closed_form = 1.0 - (1.0 - isp.epsilon).powi(11);
    let ok = ver.failures.is_empty()
        && exact.pass
        && (exact.bound.unwrap() - closed_form).abs() <= 1e-12
        && res.passed();
    let f = exact.frequency;
    verdict(
        5,
        "initial-scale determinism",
        ok,
        t.elapsed(),
        secs(300),
        format!(
            "{} exceptions; resonance {}/{} CI [{:.4}, {:.4}] vs {closed_form:.4}",
            ver.failures.len(),
            f.count,
            f.trials,
            f.ci_lo,
            f.ci_hi
        ),
    );
}

#[test]
fn wegner() {
    let t = Instant::now();
    let model = uniform();
    let kernel = HoppingKernel::new(4.0, 1).unwrap();
    let mut ok = true;
    let mut detail = Vec::new();
    for eps in [1e-3, 2e-3] {
        let o = wegner_estimate(&model, &kernel, 8, 0.0, eps, 10.0, 100_000, 11).unwrap();
        let tl = o.tally("dist<=eps").unwrap();
        ok &= o.passed();
        detail.push(format!("ε={eps:e}: CI hi {:.5} <= {:.4}", tl.frequency.ci_hi, tl.bound.unwrap()));
    }
    verdict(6, "wegner estimate", ok, t.elapsed(), secs(600), detail.join("; "));
}

#[test]
fn separation() {
    let t = Instant::now();
    let q = desk_surrogate_d1();
    let o = separation_estimate(&uniform(), &q.kernel().unwrap(), 6, q.tau, q.p, 10.0, 10_000, 6, false).unwrap();
    let tl = o.tally("spectra-within-2L^-tau").unwrap();
    verdict(
        7,
        "separation of paired cubes",
        o.passed(),
        t.elapsed(),
        secs(600),
        format!("{}/{} CI hi {:.5} <= {:.4}", tl.frequency.count, tl.frequency.trials, tl.frequency.ci_hi, tl.bound.unwrap()),
    );
}

#[test]
fn tail_sums() {
    let t = Instant::now();
    let r = tail_sum_suite();
    verdict(8, "tail-sum grid", r.passed(), t.elapsed(), secs(10), suite_detail(&r));
}

#[test]
fn poisson_identity() {
    let t = Instant::now();
    let kernel = HoppingKernel::new(4.0, 1).unwrap();
    let p = poisson_experiment(&uniform(), &kernel, 40, 10, 10.0, 20, 9).unwrap();
    verdict(
        9,
        "poisson identity",
        p.passed(),
        t.elapsed(),
        secs(60),
        format!(
            "max residual {:.2e}·||ψ||∞ over {} pairs ({} resonant, {} unresolved)",
            p.max_relative_residual, p.checked, p.resonant, p.unresolved
        ),
    );
}

#[test]
fn power_law_decay() {
    let t = Instant::now();
    let kernel = HoppingKernel::new(5.0, 1).unwrap();
    let d = decay_experiment(&uniform(), &kernel, 100, 100.0, 20, 5).unwrap();
    verdict(
        10,
        "power-law decay envelope",
        d.passed(),
        t.elapsed(),
        secs(600),
        format!("{} states, {} envelope failures, min β = {:.3}", d.states.len(), d.envelope_failures(), d.min_beta()),
    );
}

#[test]
fn preset_determinism() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut differing = Vec::new();
    let names: Vec<&str> = presets().iter().map(|(n, _, _)| *n).collect();
    for (name, _, cfg) in presets() {
        let a = dir.path().join(format!("{name}-a"));
        let b = dir.path().join(format!("{name}-b"));
        run_to(&cfg, &a).unwrap();
        run_to(&cfg, &b).unwrap();
        for file in ["tallies.csv", "shells.csv"] {
            if std::fs::read(a.join(file)).unwrap() != std::fs::read(b.join(file)).unwrap() {
                differing.push(format!("{name}/{file}"));
            }
        }
    }
    let detail = if differing.is_empty() { format!("presets {} reproduce byte-identical tallies", names.join(", ")) } else { format!("differ: {}", differing.join(", ")) };
    verdict(11, "preset determinism", differing.is_empty(), t.elapsed(), secs(600), detail);
}
