//! Acceptance suite. Each criterion prints one PASS/FAIL line and asserts
//! with the pinned tolerance.

use std::process::{Command, Stdio};
use std::sync::OnceLock;

use ussl_core::acceptance::{self, Check};
use ussl_core::eval::{run_experiment, MetricReport, PipelineConfig};
use ussl_core::synthdata::ScenarioSpec;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn reports() -> &'static (MetricReport, MetricReport) {
    static REPORTS: OnceLock<(MetricReport, MetricReport)> = OnceLock::new();
    REPORTS.get_or_init(|| {
        let spec = ScenarioSpec::default_universal(0);
        let cfg = PipelineConfig::new(spec.input_dim());
        let first = run_experiment(&spec, &cfg, &SEEDS).unwrap();
        let second = run_experiment(&spec, &cfg, &SEEDS).unwrap();
        (first, second)
    })
}

fn report_check(id: u32) -> Check {
    acceptance::check_report(&reports().0)
        .into_iter()
        .find(|c| c.id == id)
        .unwrap()
}

fn verdict(c: Check) {
    println!("{}", c.line());
    assert!(c.passed, "{}", c.line());
}

#[test]
fn criterion_1_gradient_integrity() {
    verdict(acceptance::check_gradients(0).unwrap());
}

#[test]
fn criterion_2_em_correctness() {
    verdict(acceptance::check_em(0).unwrap());
}

#[test]
fn criterion_3_auc_oracle() {
    verdict(acceptance::check_auc_oracle(0).unwrap());
}

#[test]
fn criterion_4_ukc_detection() {
    verdict(report_check(4));
}

#[test]
fn criterion_5_ukd_detection() {
    verdict(report_check(5));
}

#[test]
fn criterion_6_end_to_end_gain() {
    verdict(report_check(6));
}

#[test]
fn criterion_7_erm_equivalence() {
    verdict(acceptance::check_erm_equivalence(0).unwrap());
}

/// Runs `reproduce --seeds 5` twice through the binary and compares the
/// report bodies; the in-process reruns must agree too.
#[test]
fn criterion_8_determinism() {
    let (a, b) = reports();
    assert!(acceptance::check_determinism(a, b).passed);
    let dir = tempfile::tempdir().unwrap();
    let runs: Vec<MetricReport> = ["first", "second"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let status = Command::new(env!("CARGO_BIN_EXE_ussl"))
                .args(["reproduce", "--seeds", "5", "--out"])
                .arg(&out)
                .stdout(Stdio::null())
                .status()
                .unwrap();
            assert!(status.success());
            MetricReport::from_json(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
        })
        .collect();
    verdict(acceptance::check_determinism(&runs[0], &runs[1]));
}

#[test]
fn criterion_9_range_invariants() {
    verdict(report_check(9));
}
