//! Acceptance criteria, one test each. Every test prints a single
//! `PASS`/`FAIL` line with the statistic and its pre-registered threshold.

use std::io::Write;

use snips_core::{run_suite, SuiteEntry, DEFAULT_SUITE_SEED};

fn check(name: &str) -> SuiteEntry {
    let mut entries = run_suite(&[name], DEFAULT_SUITE_SEED).expect("registered check");
    assert_eq!(entries.len(), 1);
    let e = entries.remove(0);
    // Written to the raw handle so the line shows up without `--nocapture`.
    let line = format!(
        "{} {}: statistic={:.4e} threshold={:e} time={:.1}s | {}",
        if e.pass { "PASS" } else { "FAIL" },
        e.name,
        e.statistic,
        e.threshold,
        e.wall_time,
        e.details
    );
    let _ = writeln!(std::io::stdout().lock(), "{line}");
    e
}

#[test]
fn criterion_1_gaussian_posterior_equivalence() {
    let e = check("gaussian_equivalence");
    assert!(e.pass, "{}", e.details);
    assert!(e.wall_time < 300.0);
}

#[test]
fn criterion_2_variance_law() {
    let e = check("variance_law");
    assert!(e.pass, "{}", e.details);
    assert!(e.wall_time < 60.0);
}

#[test]
fn criterion_3_score_vs_bruteforce() {
    let e = check("score_vs_bruteforce");
    assert!(e.pass, "{}", e.details);
    assert!(e.wall_time < 120.0);
}

#[test]
fn criterion_4_step_size_hessian() {
    let e = check("step_size_hessian");
    assert!(e.pass, "{}", e.details);
    assert!(e.wall_time < 30.0);
}

#[test]
fn criterion_5_faithfulness_battery() {
    let e = check("faithfulness_battery");
    assert!(e.pass, "{}", e.details);
    assert!(e.wall_time < 180.0);
}

#[test]
fn criterion_6_sample_mean_gap() {
    let e = check("sample_mean_gap");
    assert!(e.pass, "{}", e.details);
    assert!(e.wall_time < 120.0);
}

#[test]
fn criterion_7_degenerations() {
    let e = check("degenerations");
    assert!(e.pass, "{}", e.details);
    assert!(e.wall_time < 120.0);
}

#[test]
fn criterion_8_dagostino_calibration() {
    let e = check("dagostino_calibration");
    assert!(e.pass, "{}", e.details);
    assert!(e.wall_time < 60.0);
}
