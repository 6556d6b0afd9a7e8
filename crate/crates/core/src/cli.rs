//! Command-line pipeline: gen-data, pretrain-vae, train, score, evaluate,
//! reproduce. Each command writes a `manifest.json` into its output
//! directory before starting and finalizes it on exit.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::acceptance;
use crate::config::KvFile;
use crate::doe::{compute_prototypes, score_unlabeled};
use crate::error::{Error, Result};
use crate::eval::{accuracy, domain_stage, run_experiment, PipelineConfig};
use crate::models::{BundleConfig, ModelBundle};
use crate::numerics::ParameterStore;
use crate::rng::stream;
use crate::synthdata::{Scenario, ScenarioSpec, Split};
use crate::training::train;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(name = "ussl", version, about = "Universal semi-supervised learning pipeline")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scenario.
    GenData(GenDataArgs),
    /// Pretrain the VAE and score the unlabeled pool for unknown domains.
    PretrainVae(RunArgs),
    /// Train the classifier with both sample weights.
    Train(TrainArgs),
    /// Score the unlabeled pool for unknown classes with a trained model.
    Score(ScoreArgs),
    /// Run the full pipeline over several seeds and write a report.
    Evaluate(EvaluateArgs),
    /// Run the acceptance suite on the default scenario.
    Reproduce(ReproduceArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Scenario description (`key = value`); defaults to the universal scenario.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Scenario overrides, `key=value`.
    #[arg(long = "set")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Pipeline configuration (`key = value`); defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Configuration overrides, `key=value`.
    #[arg(long = "set")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// `pretrain-vae` output CSV to take w_d from; recomputed when absent.
    #[arg(long)]
    pub domain: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Parameters written by `train`.
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Scenario description; defaults to the universal scenario.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Scenario overrides, `key=value`.
    #[arg(long = "spec-set")]
    pub spec_set: Vec<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Configuration overrides, `key=value`.
    #[arg(long = "set")]
    pub set: Vec<String>,
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    /// Aggregate metrics that must be present for a zero exit code.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "accuracy,baseline_accuracy,auc_ukc,auc_ukd,auc_ukd_recon"
    )]
    pub metrics: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReproduceArgs {
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "set")]
    pub set: Vec<String>,
    /// Exit nonzero when a criterion fails.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub argv: Vec<String>,
    pub config: KvFile,
    /// Scenario description, for commands that generate their own data.
    pub scenario: Option<KvFile>,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    /// `running`, `ok`, or `error: ...`.
    pub status: String,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    fn start(subcommand: &str, argv: &[String], config: KvFile, seeds: Vec<u64>, inputs: Vec<PathBuf>) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            argv: argv.to_vec(),
            config,
            scenario: None,
            seeds,
            inputs,
            outputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: unix_now(),
            finished_unix: None,
            status: "running".into(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_file(&dir.join(MANIFEST_FILE), &text)
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_input(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
        ))
    }
}

fn load_kv(path: Option<&Path>, overrides: &[String]) -> Result<KvFile> {
    let mut kv = match path {
        Some(p) => {
            ensure_input(p)?;
            KvFile::load(p)?
        }
        None => KvFile::new(),
    };
    for o in overrides {
        kv.apply_override(o)?;
    }
    Ok(kv)
}

fn load_spec(path: Option<&Path>, overrides: &[String], seed: u64) -> Result<ScenarioSpec> {
    let base = match path {
        Some(p) => {
            ensure_input(p)?;
            KvFile::load(p)?
        }
        None => ScenarioSpec::default_universal(seed).to_kv(),
    };
    let mut kv = base;
    for o in overrides {
        kv.apply_override(o)?;
    }
    Ok(ScenarioSpec::from_kv(&kv)?.with_seed(seed))
}

/// Loads the scenario and resolves the pipeline config against it.
fn load_run(args: &RunArgs) -> Result<(Scenario, PipelineConfig)> {
    ensure_input(&args.scenario)?;
    let scenario = Scenario::load_csv(&args.scenario)?;
    let kv = load_kv(args.config.as_deref(), &args.set)?;
    let mut cfg = PipelineConfig::from_kv(&kv, scenario.input_dim)?;
    cfg.train.seed = args.seed;
    Ok((scenario, cfg))
}

fn read_column(path: &Path, column: &str) -> Result<Vec<f64>> {
    ensure_input(path)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let idx = header.split(',').position(|h| h == column).ok_or_else(|| Error::Parse {
        line: 1,
        msg: format!("no `{column}` column"),
    })?;
    lines
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .nth(idx)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Parse {
                    line: i + 2,
                    msg: format!("bad `{column}` value"),
                })
        })
        .collect()
}

fn flag(b: bool) -> u8 {
    b as u8
}

struct Ctx {
    manifest: RunManifest,
    out: PathBuf,
}

impl Ctx {
    fn new(out: &Path, manifest: RunManifest) -> Result<Ctx> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        manifest.write(out)?;
        Ok(Ctx {
            manifest,
            out: out.to_path_buf(),
        })
    }

    fn emit(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.out.join(name);
        write_file(&path, text)?;
        self.manifest.outputs.push(path);
        Ok(())
    }

    fn finish(mut self, result: &Result<i32>) -> Result<()> {
        self.manifest.finished_unix = Some(unix_now());
        self.manifest.status = match result {
            Ok(0) => "ok".into(),
            Ok(code) => format!("exit {code}"),
            Err(e) => format!("error: {e}"),
        };
        self.manifest.write(&self.out)
    }
}

fn gen_data(argv: &[String], a: &GenDataArgs) -> Result<i32> {
    let spec = load_spec(a.spec.as_deref(), &a.set, a.seed)?;
    let inputs = a.spec.iter().cloned().collect();
    let mut ctx = Ctx::new(&a.out, RunManifest::start("gen-data", argv, spec.to_kv(), vec![a.seed], inputs))?;
    let result = (|| {
        let scenario = spec.generate()?;
        ctx.emit("scenario.csv", &scenario.to_csv())?;
        ctx.emit("scenario.kv", &spec.to_kv().render())?;
        Ok(0)
    })();
    ctx.finish(&result)?;
    result
}

fn start_run(argv: &[String], name: &str, run: &RunArgs, extra: &[&Path]) -> Result<(Scenario, PipelineConfig, Ctx)> {
    let (scenario, cfg) = load_run(run)?;
    let mut inputs = vec![run.scenario.clone()];
    inputs.extend(run.config.iter().cloned());
    inputs.extend(extra.iter().map(|p| p.to_path_buf()));
    let manifest = RunManifest::start(name, argv, cfg.to_kv(), vec![run.seed], inputs);
    let ctx = Ctx::new(&run.out, manifest)?;
    Ok((scenario, cfg, ctx))
}

fn pretrain_vae_cmd(argv: &[String], a: &RunArgs) -> Result<i32> {
    let (scenario, cfg, mut ctx) = start_run(argv, "pretrain-vae", a, &[])?;
    let result = (|| {
        let stage = domain_stage(&scenario, &cfg, a.seed)?;
        ctx.emit("vae.params", &stage.vae.store.to_text())?;
        ctx.emit(
            "gmm.json",
            &serde_json::to_string_pretty(&stage.gmm).expect("fit serializes"),
        )?;
        let mut csv = String::from("index,L_re,w_d,is_ukd\n");
        for (i, s) in scenario.unlabeled.iter().enumerate() {
            writeln!(csv, "{i},{:?},{:?},{}", stage.recon_error[i], stage.w_d[i], flag(s.is_ukd)).unwrap();
        }
        ctx.emit("domain.csv", &csv)?;
        let trace: String = stage.vae_trace.iter().map(|v| format!("{v:?}\n")).collect();
        ctx.emit("vae_loss.csv", &format!("objective\n{trace}"))?;
        Ok(0)
    })();
    ctx.finish(&result)?;
    result
}

fn new_bundle(scenario: &Scenario, seed: u64) -> Result<ModelBundle> {
    ModelBundle::new(
        BundleConfig::new(scenario.input_dim, scenario.known_classes),
        &mut stream(seed, "bundle.init"),
    )
}

fn train_cmd(argv: &[String], a: &TrainArgs) -> Result<i32> {
    let extra: Vec<&Path> = a.domain.iter().map(|p| p.as_path()).collect();
    let (scenario, cfg, mut ctx) = start_run(argv, "train", &a.run, &extra)?;
    let result = (|| {
        let w_d = match &a.domain {
            Some(p) => Some(read_column(p, "w_d")?),
            None if scenario.unlabeled.is_empty() => None,
            None => Some(domain_stage(&scenario, &cfg, a.run.seed)?.w_d),
        };
        let mut bundle = new_bundle(&scenario, a.run.seed)?;
        let outcome = train(&scenario, &mut bundle, w_d.as_deref(), &cfg.train)?;
        ctx.emit("losses.csv", &outcome.history.to_csv())?;
        ctx.emit("model.params", &bundle.store.to_text())?;
        let w_uc = outcome.w_uc.map(|s| s.weights()).unwrap_or_default();
        let w_ud = &outcome.w_ud;
        let mut csv = String::from("index,w_uc,w_d,w_ud\n");
        for i in 0..scenario.unlabeled.len() {
            let get = |v: &[f64]| v.get(i).map(|x| format!("{x:?}")).unwrap_or_default();
            writeln!(
                csv,
                "{i},{},{},{}",
                get(&w_uc),
                get(w_d.as_deref().unwrap_or(&[])),
                get(w_ud)
            )
            .unwrap();
        }
        ctx.emit("weights.csv", &csv)?;
        let acc = accuracy(&bundle.predict(&scenario.inputs(Split::Test))?, &scenario.labels(Split::Test))?;
        println!("test accuracy {acc:.4}");
        Ok(0)
    })();
    ctx.finish(&result)?;
    result
}

fn score_cmd(argv: &[String], a: &ScoreArgs) -> Result<i32> {
    ensure_input(&a.run.scenario)?;
    ensure_input(&a.model)?;
    let (scenario, cfg, mut ctx) = start_run(argv, "score", &a.run, &[a.model.as_path()])?;
    let result = (|| {
        let mut bundle = new_bundle(&scenario, a.run.seed)?;
        bundle.store.copy_values_from(&ParameterStore::load(&a.model)?)?;
        let protos = compute_prototypes(
            &bundle.features(&scenario.inputs(Split::Labeled))?,
            &scenario.labels(Split::Labeled),
            scenario.known_classes,
        )?;
        let scores = score_unlabeled(
            &bundle,
            &protos,
            &scenario.inputs(Split::Unlabeled),
            &cfg.train.aug,
            &mut stream(a.run.seed, "eval.score"),
        )?;
        let mut csv = String::from("index,d_avg,p_ood,w_uc,is_ukc\n");
        for (i, (s, sample)) in scores.scores.iter().zip(&scenario.unlabeled).enumerate() {
            writeln!(csv, "{i},{:?},{:?},{:?},{}", s.d_avg, s.p_ood, s.w_uc, flag(sample.is_ukc)).unwrap();
        }
        ctx.emit("scores.csv", &csv)?;
        Ok(0)
    })();
    ctx.finish(&result)?;
    result
}

fn seed_list(first: u64, n: u64) -> Vec<u64> {
    (first..first + n).collect()
}

fn evaluate_cmd(argv: &[String], a: &EvaluateArgs) -> Result<i32> {
    let spec = load_spec(a.spec.as_deref(), &a.spec_set, a.first_seed)?;
    let kv = load_kv(a.config.as_deref(), &a.set)?;
    let cfg = PipelineConfig::from_kv(&kv, spec.input_dim())?;
    let seeds = seed_list(a.first_seed, a.seeds);
    let inputs = a.spec.iter().chain(&a.config).cloned().collect();
    let mut manifest = RunManifest::start("evaluate", argv, cfg.to_kv(), seeds.clone(), inputs);
    manifest.scenario = Some(spec.to_kv());
    let mut ctx = Ctx::new(&a.out, manifest)?;
    let result = (|| {
        let report = run_experiment(&spec, &cfg, &seeds)?;
        ctx.emit("report.json", &report.to_json())?;
        ctx.emit("report.txt", &report.to_text())?;
        print!("{}", report.to_text());
        let missing: Vec<&str> = a
            .metrics
            .iter()
            .filter(|m| report.mean(m).is_none())
            .map(|m| m.as_str())
            .collect();
        if missing.is_empty() {
            Ok(0)
        } else {
            eprintln!("metrics not computed: {}", missing.join(", "));
            Ok(1)
        }
    })();
    ctx.finish(&result)?;
    result
}

/// Runs every acceptance check; the experiment runs twice for the
/// determinism check.
pub fn reproduce(seeds: &[u64], cfg: &PipelineConfig) -> Result<(Vec<acceptance::Check>, crate::eval::MetricReport)> {
    let spec = ScenarioSpec::default_universal(seeds.first().copied().unwrap_or(0));
    let mut checks = vec![
        acceptance::check_gradients(0)?,
        acceptance::check_em(0)?,
        acceptance::check_auc_oracle(0)?,
    ];
    let first = run_experiment(&spec, cfg, seeds)?;
    let second = run_experiment(&spec, cfg, seeds)?;
    checks.extend(acceptance::check_report(&first));
    checks.push(acceptance::check_erm_equivalence(seeds.first().copied().unwrap_or(0))?);
    checks.push(acceptance::check_determinism(&first, &second));
    checks.sort_by_key(|c| c.id);
    Ok((checks, first))
}

fn reproduce_cmd(argv: &[String], a: &ReproduceArgs) -> Result<i32> {
    let spec = ScenarioSpec::default_universal(0);
    let kv = load_kv(None, &a.set)?;
    let cfg = PipelineConfig::from_kv(&kv, spec.input_dim())?;
    let seeds = seed_list(0, a.seeds);
    let mut manifest = RunManifest::start("reproduce", argv, cfg.to_kv(), seeds.clone(), Vec::new());
    manifest.scenario = Some(spec.to_kv());
    let mut ctx = Ctx::new(&a.out, manifest)?;
    let started = Instant::now();
    let result = (|| {
        let (checks, report) = reproduce(&seeds, &cfg)?;
        ctx.emit("report.json", &report.to_json())?;
        ctx.emit("report.txt", &report.to_text())?;
        let text = acceptance::render(&checks);
        ctx.emit("acceptance.txt", &text)?;
        ctx.emit(
            "acceptance.json",
            &serde_json::to_string_pretty(&checks).expect("checks serialize"),
        )?;
        print!("{text}");
        println!("wall time {:.1}s", started.elapsed().as_secs_f64());
        Ok(if a.strict && checks.iter().any(|c| !c.passed) { 1 } else { 0 })
    })();
    ctx.finish(&result)?;
    result
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let argv: Vec<String> = argv.iter().map(|s| s.to_string_lossy().into_owned()).collect();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(&argv, a),
        Command::PretrainVae(a) => pretrain_vae_cmd(&argv, a),
        Command::Train(a) => train_cmd(&argv, a),
        Command::Score(a) => score_cmd(&argv, a),
        Command::Evaluate(a) => evaluate_cmd(&argv, a),
        Command::Reproduce(a) => reproduce_cmd(&argv, a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
