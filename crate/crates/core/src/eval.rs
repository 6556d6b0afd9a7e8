//! Metrics and multi-seed experiment reports.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cds::{fit_gmm2, pretrain_vae, recon_errors, score_domains, GmmFit, VaeTrainConfig};
use crate::config::KvFile;
use crate::doe::{compute_prototypes, score_unlabeled};
use crate::error::{Error, Result};
use crate::models::{BundleConfig, ModelBundle, Vae, VaeConfig};
use crate::rng::stream;
use crate::synthdata::{Scenario, ScenarioSpec, Split};
use crate::training::{train, LossBreakdown, TrainConfig};

pub const REPORT_SCHEMA: &str = "ussl-report/1";

/// Probability that a random positive scores above a random negative, ties
/// counted one half. Computed from mid-ranks.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Length {
            what: "labels",
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Config("auc_roc: NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied block i..=j shares the mid-rank
        let mid = (i + j + 2) as f64 / 2.0;
        let pos_in_block = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += mid * pos_in_block as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Length {
            what: "labels",
            expected: predictions.len(),
            actual: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::Config("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Everything besides the scenario that a pipeline run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub vae: VaeConfig,
    pub vae_train: VaeTrainConfig,
    pub gmm_max_iters: usize,
    pub gmm_tol: f64,
    /// Also train the supervised-only baseline on each seed.
    pub baseline: bool,
}

impl PipelineConfig {
    pub fn new(input_dim: usize) -> Self {
        PipelineConfig {
            train: TrainConfig::default(),
            vae: VaeConfig::new(input_dim),
            vae_train: VaeTrainConfig::default(),
            gmm_max_iters: 500,
            gmm_tol: 1e-8,
            baseline: true,
        }
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = self.train.to_kv();
        kv.set("vae.hidden", self.vae.hidden);
        kv.set("vae.latent_dim", self.vae.latent_dim);
        kv.set("vae.kl_weight", format!("{:?}", self.vae.kl_weight));
        kv.set("vae.epochs", self.vae_train.epochs);
        kv.set("vae.lr", format!("{:?}", self.vae_train.lr));
        kv.set("vae.batch_size", self.vae_train.batch_size);
        kv.set("gmm.max_iters", self.gmm_max_iters);
        kv.set("gmm.tol", format!("{:?}", self.gmm_tol));
        kv.set("baseline", self.baseline);
        kv
    }

    pub fn from_kv(kv: &KvFile, input_dim: usize) -> Result<Self> {
        let d = PipelineConfig::new(input_dim);
        let cfg = PipelineConfig {
            train: TrainConfig::from_kv(kv)?,
            vae: VaeConfig {
                input_dim,
                hidden: kv.get_or("vae.hidden", d.vae.hidden)?,
                latent_dim: kv.get_or("vae.latent_dim", d.vae.latent_dim)?,
                kl_weight: kv.get_or("vae.kl_weight", d.vae.kl_weight)?,
            },
            vae_train: VaeTrainConfig {
                epochs: kv.get_or("vae.epochs", d.vae_train.epochs)?,
                lr: kv.get_or("vae.lr", d.vae_train.lr)?,
                batch_size: kv.get_or("vae.batch_size", d.vae_train.batch_size)?,
            },
            gmm_max_iters: kv.get_or("gmm.max_iters", d.gmm_max_iters)?,
            gmm_tol: kv.get_or("gmm.tol", d.gmm_tol)?,
            baseline: kv.get_or("baseline", d.baseline)?,
        };
        Ok(cfg)
    }
}

/// Trained VAE, its GMM and the domain posteriors of the unlabeled pool.
pub struct DomainStage {
    pub vae: Vae,
    pub vae_trace: Vec<f64>,
    pub gmm: GmmFit,
    pub recon_error: Vec<f64>,
    pub w_d: Vec<f64>,
}

/// Pretrains the VAE on labeled inputs, then scores the unlabeled pool.
pub fn domain_stage(scenario: &Scenario, cfg: &PipelineConfig, seed: u64) -> Result<DomainStage> {
    let mut vae = Vae::new(cfg.vae.clone(), &mut stream(seed, "vae.init"))?;
    let vae_trace = pretrain_vae(
        &mut vae,
        &scenario.inputs(Split::Labeled),
        &cfg.vae_train,
        &mut stream(seed, "vae.train"),
    )?;
    let x_u = scenario.inputs(Split::Unlabeled);
    let gmm = fit_gmm2(&recon_errors(&vae, &x_u)?, cfg.gmm_max_iters, cfg.gmm_tol)?;
    let scores = score_domains(&vae, &gmm, &x_u)?;
    Ok(DomainStage {
        vae,
        vae_trace,
        gmm,
        recon_error: scores.recon_error,
        w_d: scores.w_d,
    })
}

/// Metrics of one seed. AUCs are absent when the pool lacks one of the two
/// groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub accuracy: f64,
    pub baseline_accuracy: Option<f64>,
    pub auc_ukc: Option<f64>,
    pub auc_ukd: Option<f64>,
    pub auc_ukd_recon: Option<f64>,
    pub mean_w_uc: f64,
    pub mean_w_d: f64,
    /// Count of weights outside `[0, 1]` and softmax rows off unit sum.
    pub range_violations: usize,
    pub losses_finite: bool,
}

impl SeedMetrics {
    fn values(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("accuracy", Some(self.accuracy)),
            ("baseline_accuracy", self.baseline_accuracy),
            ("auc_ukc", self.auc_ukc),
            ("auc_ukd", self.auc_ukd),
            ("auc_ukd_recon", self.auc_ukd_recon),
        ]
    }
}

/// Full record of one seed's run.
pub struct SeedRun {
    pub metrics: SeedMetrics,
    pub history: LossBreakdown,
    pub bundle: ModelBundle,
    pub w_uc: Vec<f64>,
    pub w_d: Vec<f64>,
}

fn optional_auc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    match auc_roc(scores, labels) {
        Ok(v) => Ok(Some(v)),
        Err(Error::SingleClass) => Ok(None),
        Err(e) => Err(e),
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub const SOFTMAX_SUM_TOL: f64 = 1e-12;

fn range_violations(w_uc: &[f64], w_d: &[f64], probs: &crate::numerics::Matrix) -> usize {
    let weights = w_uc.iter().chain(w_d).filter(|w| !(0.0..=1.0).contains(*w)).count();
    let rows = (0..probs.rows())
        .filter(|&r| (probs.row(r).iter().sum::<f64>() - 1.0).abs() > SOFTMAX_SUM_TOL)
        .count();
    weights + rows
}

/// Runs the whole pipeline on one generated scenario.
pub fn run_seed(spec: &ScenarioSpec, cfg: &PipelineConfig, seed: u64) -> Result<SeedRun> {
    let scenario = spec.with_seed(seed).generate()?;
    let has_pool = !scenario.unlabeled.is_empty();
    let stage = if has_pool { Some(domain_stage(&scenario, cfg, seed)?) } else { None };
    let w_d = stage.as_ref().map(|s| s.w_d.clone()).unwrap_or_default();

    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let bundle_cfg = BundleConfig::new(scenario.input_dim, scenario.known_classes);
    let init = ModelBundle::new(bundle_cfg, &mut stream(seed, "bundle.init"))?;

    let mut bundle = init.clone();
    let outcome = train(&scenario, &mut bundle, stage.as_ref().map(|s| s.w_d.as_slice()), &train_cfg)?;

    let baseline_accuracy = if cfg.baseline {
        let mut base = init;
        let plain = scenario.without_unlabeled();
        train(&plain, &mut base, None, &train_cfg.erm())?;
        Some(accuracy(&base.predict(&plain.inputs(Split::Test))?, &plain.labels(Split::Test))?)
    } else {
        None
    };

    let x_test = scenario.inputs(Split::Test);
    let probs = bundle.predict_proba(&x_test)?;
    let acc = accuracy(&probs.argmax_rows(), &scenario.labels(Split::Test))?;

    let w_uc = match (&outcome.w_uc, has_pool) {
        (Some(s), _) => s.weights(),
        (None, true) => {
            let protos = compute_prototypes(
                &bundle.features(&scenario.inputs(Split::Labeled))?,
                &scenario.labels(Split::Labeled),
                scenario.known_classes,
            )?;
            let x_u = scenario.inputs(Split::Unlabeled);
            score_unlabeled(&bundle, &protos, &x_u, &train_cfg.aug, &mut stream(seed, "eval.score"))?.weights()
        }
        (None, false) => Vec::new(),
    };

    let (auc_ukc, auc_ukd, auc_ukd_recon) = match &stage {
        Some(s) => {
            let outlier: Vec<f64> = w_uc.iter().map(|w| 1.0 - w).collect();
            (
                optional_auc(&outlier, &scenario.ukc_flags())?,
                optional_auc(&s.w_d, &scenario.ukd_flags())?,
                optional_auc(&s.recon_error, &scenario.ukd_flags())?,
            )
        }
        None => (None, None, None),
    };

    let metrics = SeedMetrics {
        seed,
        accuracy: acc,
        baseline_accuracy,
        auc_ukc,
        auc_ukd,
        auc_ukd_recon,
        mean_w_uc: mean(&w_uc),
        mean_w_d: mean(&w_d),
        range_violations: range_violations(&w_uc, &w_d, &probs),
        losses_finite: outcome.history.is_finite(),
    };
    Ok(SeedRun {
        metrics,
        history: outcome.history,
        bundle,
        w_uc,
        w_d,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let m = mean(values);
        let std = if n > 1 {
            (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Summary { mean: m, std, n })
    }
}

/// Deterministic part of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportBody {
    pub schema: String,
    pub scenario: KvFile,
    pub config: KvFile,
    pub seeds: Vec<SeedMetrics>,
    pub aggregate: BTreeMap<String, Summary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(flatten)]
    pub body: ReportBody,
    pub runtime_seconds: f64,
}

impl MetricReport {
    pub fn body_json(&self) -> String {
        serde_json::to_string_pretty(&self.body).expect("report serializes")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.body.aggregate.get(metric).map(|s| s.mean)
    }

    /// Human-readable table.
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let mut out = format!(
            "{:>6} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
            "seed", "acc", "erm_acc", "auc_ukc", "auc_ukd", "auc_lre"
        );
        for s in &self.body.seeds {
            out.push_str(&format!(
                "{:>6} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
                s.seed,
                fmt(Some(s.accuracy)),
                fmt(s.baseline_accuracy),
                fmt(s.auc_ukc),
                fmt(s.auc_ukd),
                fmt(s.auc_ukd_recon)
            ));
        }
        for (name, s) in &self.body.aggregate {
            out.push_str(&format!("{name:<18} mean {:.4}  std {:.4}  n {}\n", s.mean, s.std, s.n));
        }
        out
    }
}

pub fn aggregate(seeds: &[SeedMetrics]) -> BTreeMap<String, Summary> {
    let mut values: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for s in seeds {
        for (name, v) in s.values() {
            if let Some(v) = v {
                values.entry(name).or_default().push(v);
            }
        }
    }
    values
        .into_iter()
        .filter_map(|(k, v)| Summary::of(&v).map(|s| (k.to_string(), s)))
        .collect()
}

/// Runs every seed in parallel and aggregates. Returns the report and the
/// per-seed runs in seed order.
pub fn run_experiment_detailed(
    spec: &ScenarioSpec,
    cfg: &PipelineConfig,
    seeds: &[u64],
) -> Result<(MetricReport, Vec<SeedRun>)> {
    if seeds.is_empty() {
        return Err(Error::Config("run_experiment needs at least one seed".into()));
    }
    let start = Instant::now();
    let runs = seeds
        .par_iter()
        .map(|&s| run_seed(spec, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let metrics: Vec<SeedMetrics> = runs.iter().map(|r| r.metrics.clone()).collect();
    let report = MetricReport {
        body: ReportBody {
            schema: REPORT_SCHEMA.to_string(),
            scenario: spec.to_kv(),
            config: cfg.to_kv(),
            aggregate: aggregate(&metrics),
            seeds: metrics,
        },
        runtime_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((report, runs))
}

pub fn run_experiment(spec: &ScenarioSpec, cfg: &PipelineConfig, seeds: &[u64]) -> Result<MetricReport> {
    run_experiment_detailed(spec, cfg, seeds).map(|(r, _)| r)
}
