//! Executable versions of the acceptance criteria, shared by the
//! `reproduce` command and the acceptance test target.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cds::{domain_loss, fit_gmm2};
use crate::error::Result;
use crate::eval::{auc_roc, MetricReport};
use crate::models::{BundleConfig, ModelBundle, Sampling, Vae, VaeConfig, FEATURE_PREFIX};
use crate::numerics::{fd_check, fd_check_scaled, Matrix, ParameterStore};
use crate::rng::stream;
use crate::synthdata::{AugmentConfig, ScenarioSpec};
use crate::training::{adversarial_loss, consistency_loss, train, train_supervised, TrainConfig};

pub const FD_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
pub const EM_MEAN_TOLERANCE: f64 = 0.3;
pub const EM_WEIGHT_TOLERANCE: f64 = 0.1;
pub const AUC_UKC_MIN: f64 = 0.80;
pub const AUC_UKD_RECON_MIN: f64 = 0.85;
pub const AUC_UKD_POSTERIOR_SLACK: f64 = 0.02;
pub const ACCURACY_GAIN_MIN: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub id: u32,
    pub title: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(id: u32, title: &str, passed: bool, detail: String) -> Check {
        Check {
            id,
            title: title.to_string(),
            passed,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "criterion {} [{}] {}: {}",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.title,
            self.detail
        )
    }
}

fn perturb(store: &mut ParameterStore, seed: u64) {
    let mut rng = stream(seed, "acceptance.perturb");
    for (_, p) in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
}

fn random_matrix(rows: usize, cols: usize, seed: u64, tag: &str) -> Matrix {
    let mut rng = stream(seed, tag);
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect())
        .expect("sizes agree")
}

fn small_bundle(seed: u64) -> Result<ModelBundle> {
    let mut cfg = BundleConfig::new(4, 3);
    cfg.feature_hidden = 6;
    cfg.feature_dim = 5;
    cfg.head_hidden = 4;
    let mut b = ModelBundle::new(cfg, &mut stream(seed, "acceptance.init"))?;
    perturb(&mut b.store, seed);
    Ok(b)
}

/// Largest finite-difference relative error of each differentiable loss on
/// a random small model.
pub fn gradient_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let base = small_bundle(seed)?;
    let x_l = random_matrix(5, 4, seed, "acceptance.xl");
    let x_u = random_matrix(6, 4, seed, "acceptance.xu");
    let labels: Vec<usize> = (0..5).map(|i| i % 3).collect();
    let mut targets = Matrix::zeros(5, 3);
    for (r, &y) in labels.iter().enumerate() {
        targets.set(r, y, 1.0);
    }
    let mut wrng = stream(seed, "acceptance.weights");
    let w1: Vec<f64> = (0..6).map(|_| wrng.random::<f64>()).collect();
    let w2: Vec<f64> = (0..6).map(|_| wrng.random::<f64>()).collect();
    let lambda = 0.3;
    let with = |s: &ParameterStore| {
        let mut b = base.clone();
        b.store = s.clone();
        b
    };
    let mut out = Vec::new();

    let mut store = base.store.clone();
    out.push((
        "L_CE",
        fd_check(&mut store, FD_STEP, |tape, s| {
            let b = with(s);
            let x = tape.constant(x_l.clone());
            let v = b.extract(tape, x)?;
            let p = b.classify(tape, v)?;
            tape.cross_entropy(p, &targets)
        })?,
    ));
    out.push((
        "L_SSL",
        fd_check(&mut store, FD_STEP, |tape, s| {
            let b = with(s);
            let mut rng = stream(seed, "acceptance.aug");
            consistency_loss(tape, &b, &x_u, &w1, &AugmentConfig::default(), &mut rng)
        })?,
    ));
    out.push((
        "L_dom",
        fd_check(&mut store, FD_STEP, |tape, s| {
            let b = with(s);
            let xl = tape.constant(x_l.clone());
            let xu = tape.constant(x_u.clone());
            let vl = b.extract(tape, xl)?;
            let vu = b.extract(tape, xu)?;
            let yl = b.discriminate_dom(tape, vl)?;
            let yu = b.discriminate_dom(tape, vu)?;
            domain_loss(tape, yl, yu, &w2)
        })?,
    ));
    out.push((
        "reversed L_adv",
        fd_check_scaled(
            &mut store,
            FD_STEP,
            |tape, s| adversarial_loss(tape, &with(s), &x_l, &x_u, &w1, &w2, lambda),
            |name| if name.starts_with(FEATURE_PREFIX) { -lambda } else { 1.0 },
        )?,
    ));

    let vae_cfg = VaeConfig {
        input_dim: 4,
        hidden: 5,
        latent_dim: 2,
        kl_weight: 0.1,
    };
    let mut vae = Vae::new(vae_cfg, &mut stream(seed, "acceptance.vae"))?;
    perturb(&mut vae.store, seed + 1);
    let mut vstore = vae.store.clone();
    out.push((
        "VAE objective",
        fd_check(&mut vstore, FD_STEP, |tape, s| {
            let mut v = vae.clone();
            v.store = s.clone();
            let mut rng = stream(seed, "acceptance.eps");
            let o = v.forward(tape, &x_l, Sampling::Random(&mut rng))?;
            v.objective(tape, &o)
        })?,
    ));
    Ok(out)
}

pub fn check_gradients(seed: u64) -> Result<Check> {
    let errs = gradient_errors(seed)?;
    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errs
        .iter()
        .map(|(n, e)| format!("{n} {e:.2e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(Check::new(
        1,
        "gradient integrity",
        worst < FD_TOLERANCE,
        format!("max rel err {worst:.2e} < {FD_TOLERANCE:e} ({detail})"),
    ))
}

pub fn check_em(seed: u64) -> Result<Check> {
    let mut rng = stream(seed, "acceptance.em");
    let mut data: Vec<f64> = (0..1000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    data.extend((0..1000).map(|_| 5.0 + rng.sample::<f64, _>(StandardNormal)));
    let fit = fit_gmm2(&data, 1000, 1e-10)?;
    let u = fit.ukd_component;
    let o = 1 - u;
    let mean_err = (fit.means[u] - 5.0).abs().max(fit.means[o].abs());
    let weight_err = (fit.weights[u] - 0.5).abs().max((fit.weights[o] - 0.5).abs());
    let monotone = fit
        .log_likelihood
        .windows(2)
        .all(|w| w[1] >= w[0] - 1e-9 * w[0].abs());
    Ok(Check::new(
        2,
        "EM correctness",
        mean_err <= EM_MEAN_TOLERANCE && weight_err <= EM_WEIGHT_TOLERANCE && monotone,
        format!(
            "means {:.3}/{:.3}, weights {:.3}/{:.3}, log-likelihood monotone over {} iterations: {monotone}",
            fit.means[o],
            fit.means[u],
            fit.weights[o],
            fit.weights[u],
            fit.log_likelihood.len()
        ),
    ))
}

/// Pair-counting AUC, ties one half.
pub fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

pub fn check_auc_oracle(seed: u64) -> Result<Check> {
    let mut rng = stream(seed, "acceptance.auc");
    let mut mismatches = 0;
    for _ in 0..100 {
        let scores: Vec<f64> = (0..50).map(|_| rng.random_range(0..15) as f64 / 7.0).collect();
        let mut labels: Vec<bool> = (0..50).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        if auc_roc(&scores, &labels)? != pair_count_auc(&scores, &labels) {
            mismatches += 1;
        }
    }
    Ok(Check::new(
        3,
        "AUC oracle equivalence",
        mismatches == 0,
        format!("{mismatches} of 100 instances differ from pair counting"),
    ))
}

fn mean_of(report: &MetricReport, key: &str) -> f64 {
    report.mean(key).unwrap_or(f64::NAN)
}

/// Criteria 4, 5, 6 and 9 from a multi-seed report of the default scenario.
pub fn check_report(report: &MetricReport) -> Vec<Check> {
    let ukc = mean_of(report, "auc_ukc");
    let ukd = mean_of(report, "auc_ukd");
    let lre = mean_of(report, "auc_ukd_recon");
    let acc = mean_of(report, "accuracy");
    let erm = mean_of(report, "baseline_accuracy");
    let n = report.body.seeds.len();
    let violations: usize = report.body.seeds.iter().map(|s| s.range_violations).sum();
    let finite = report.body.seeds.iter().all(|s| s.losses_finite);
    vec![
        Check::new(
            4,
            "UKC detection",
            ukc >= AUC_UKC_MIN,
            format!("mean AUC(1 - w_uc) {ukc:.4} >= {AUC_UKC_MIN} over {n} seeds"),
        ),
        Check::new(
            5,
            "UKD detection",
            lre >= AUC_UKD_RECON_MIN && ukd >= lre - AUC_UKD_POSTERIOR_SLACK,
            format!(
                "mean AUC(L_re) {lre:.4} >= {AUC_UKD_RECON_MIN}; AUC(w_d) {ukd:.4} >= {:.4}",
                lre - AUC_UKD_POSTERIOR_SLACK
            ),
        ),
        Check::new(
            6,
            "end-to-end gain",
            acc - erm >= ACCURACY_GAIN_MIN,
            format!(
                "accuracy {acc:.4} vs ERM {erm:.4}: gain {:+.2} points >= {:.1}",
                100.0 * (acc - erm),
                100.0 * ACCURACY_GAIN_MIN
            ),
        ),
        Check::new(
            9,
            "range invariants",
            violations == 0 && finite,
            format!("{violations} out-of-range weights or softmax rows; losses finite: {finite}"),
        ),
    ]
}

/// The degenerate configuration against the plain supervised loop.
pub fn check_erm_equivalence(seed: u64) -> Result<Check> {
    let scenario = ScenarioSpec::default_universal(seed).generate()?.without_unlabeled();
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    }
    .erm();
    let init = ModelBundle::new(
        BundleConfig::new(scenario.input_dim, scenario.known_classes),
        &mut stream(seed, "bundle.init"),
    )?;
    let mut a = init.clone();
    let mut b = init;
    let full = train(&scenario, &mut a, None, &cfg)?.history.ce_trace();
    let plain = train_supervised(&scenario, &mut b, &cfg)?;
    let same = full.len() == plain.len()
        && full.iter().zip(&plain).all(|(x, y)| x.to_bits() == y.to_bits())
        && a.store == b.store;
    Ok(Check::new(
        7,
        "ERM equivalence",
        same,
        format!("{} epochs, L_CE traces and parameters bit-identical: {same}", full.len()),
    ))
}

pub fn check_determinism(first: &MetricReport, second: &MetricReport) -> Check {
    let same = first.body_json() == second.body_json();
    Check::new(
        8,
        "determinism",
        same,
        format!("report bodies byte-identical across two runs: {same}"),
    )
}

pub fn render(checks: &[Check]) -> String {
    let mut sorted: Vec<&Check> = checks.iter().collect();
    sorted.sort_by_key(|c| c.id);
    let mut out = String::new();
    for c in sorted {
        out.push_str(&c.line());
        out.push('\n');
    }
    let passed = checks.iter().filter(|c| c.passed).count();
    out.push_str(&format!("{passed}/{} criteria passed\n", checks.len()));
    out
}
