//! Synthetic scenarios with ground-truth class and domain mismatch, the
//! feature-space augmentation used for stochastic views, and the scenario CSV
//! format.
//!
//! A sample of class `c` in domain `d` is drawn as
//! `x = T_d (mu_c + s_c * e1) + shift_d + n_d * e2` with `e1, e2 ~ N(0, I)`.
//! Domain 0 is the known domain; every other domain is unknown.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::KvFile;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng::{stream, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSpec {
    pub mean: Vec<f64>,
    /// Isotropic standard deviation.
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub transform: Matrix,
    pub shift: Vec<f64>,
    pub noise_scale: f64,
}

impl DomainSpec {
    pub fn identity(dim: usize) -> Self {
        DomainSpec {
            transform: Matrix::identity(dim),
            shift: vec![0.0; dim],
            noise_scale: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Counts {
    pub labeled_per_class: usize,
    pub val: usize,
    pub test: usize,
    pub unlabeled: usize,
    /// Fraction of the unlabeled pool drawn from unknown classes.
    pub ukc_fraction: f64,
    /// Fraction of the unlabeled pool drawn from unknown domains.
    pub ukd_fraction: f64,
}

impl Default for Counts {
    fn default() -> Self {
        Counts {
            labeled_per_class: 50,
            val: 200,
            test: 200,
            unlabeled: 600,
            ukc_fraction: 0.3,
            ukd_fraction: 0.3,
        }
    }
}

impl Counts {
    fn unlabeled_split(&self) -> (usize, usize, usize) {
        let ukc = (self.unlabeled as f64 * self.ukc_fraction).round() as usize;
        let ukd = (self.unlabeled as f64 * self.ukd_fraction).round() as usize;
        let clean = self.unlabeled.saturating_sub(ukc + ukd);
        (clean, ukc, ukd)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labeled,
    Unlabeled,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Labeled, Split::Unlabeled, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|sp| sp.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub class_id: usize,
    pub domain_id: usize,
    pub is_ukc: bool,
    pub is_ukd: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub known_classes: usize,
    pub input_dim: usize,
}

impl Scenario {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Labeled => &self.labeled,
            Split::Unlabeled => &self.unlabeled,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn inputs(&self, split: Split) -> Matrix {
        inputs_of(self.split(split), self.input_dim)
    }

    pub fn labels(&self, split: Split) -> Vec<usize> {
        self.split(split).iter().map(|s| s.class_id).collect()
    }

    pub fn ukc_flags(&self) -> Vec<bool> {
        self.unlabeled.iter().map(|s| s.is_ukc).collect()
    }

    pub fn ukd_flags(&self) -> Vec<bool> {
        self.unlabeled.iter().map(|s| s.is_ukd).collect()
    }

    /// Copy with the unlabeled pool removed.
    pub fn without_unlabeled(&self) -> Scenario {
        Scenario {
            unlabeled: Vec::new(),
            ..self.clone()
        }
    }

    /// Checks the ground-truth invariants: labeled/val/test hold only
    /// known-class, known-domain samples, and the flags agree with the ids.
    pub fn validate(&self) -> Result<()> {
        for split in Split::ALL {
            for (i, s) in self.split(split).iter().enumerate() {
                let bad = |msg: &str| Error::Config(format!("{} sample {i}: {msg}", split.name()));
                if s.x.len() != self.input_dim {
                    return Err(bad("feature width differs from input_dim"));
                }
                if s.is_ukc != (s.class_id >= self.known_classes) {
                    return Err(bad("is_ukc disagrees with class_id"));
                }
                if s.is_ukd != (s.domain_id != 0) {
                    return Err(bad("is_ukd disagrees with domain_id"));
                }
                if split != Split::Unlabeled && (s.is_ukc || s.is_ukd) {
                    return Err(bad("only the unlabeled split may hold unknown classes or domains"));
                }
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,class_id,domain_id,is_ukc,is_ukd");
        for j in 0..self.input_dim {
            let _ = write!(out, ",f{j}");
        }
        out.push('\n');
        for split in Split::ALL {
            for s in self.split(split) {
                let _ = write!(
                    out,
                    "{},{},{},{},{}",
                    split.name(),
                    s.class_id,
                    s.domain_id,
                    s.is_ukc as u8,
                    s.is_ukd as u8
                );
                for v in &s.x {
                    let _ = write!(out, ",{v:.16e}");
                }
                out.push('\n');
            }
        }
        out
    }

    /// Parses the scenario CSV. The known-class count is recovered as one past
    /// the largest class id of a non-UKC sample.
    pub fn from_csv(text: &str) -> Result<Scenario> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "missing header".into(),
        })?;
        let cols: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
        let fixed = ["split", "class_id", "domain_id", "is_ukc", "is_ukd"];
        if cols.len() < fixed.len() || cols[..fixed.len()] != fixed {
            return Err(Error::Parse {
                line: 1,
                msg: format!("header must start with `{}`", fixed.join(",")),
            });
        }
        for (j, c) in cols[fixed.len()..].iter().enumerate() {
            if *c != format!("f{j}") {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected feature column `f{j}`, found `{c}`"),
                });
            }
        }
        let input_dim = cols.len() - fixed.len();

        let mut scenario = Scenario {
            labeled: Vec::new(),
            unlabeled: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
            known_classes: 0,
            input_dim,
        };
        for (line, raw) in lines {
            let raw = raw.trim_end_matches('\r');
            if raw.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line, msg };
            let fields: Vec<&str> = raw.split(',').collect();
            if fields.len() != cols.len() {
                return Err(err(format!(
                    "expected {} fields, found {}",
                    cols.len(),
                    fields.len()
                )));
            }
            let split = Split::parse(fields[0]).ok_or_else(|| err(format!("unknown split `{}`", fields[0])))?;
            let int = |s: &str, what: &str| s.parse::<usize>().map_err(|_| err(format!("invalid {what} `{s}`")));
            let flag = |s: &str, what: &str| match s {
                "0" | "false" => Ok(false),
                "1" | "true" => Ok(true),
                _ => Err(err(format!("invalid {what} `{s}`"))),
            };
            let x = fields[fixed.len()..]
                .iter()
                .map(|t| {
                    t.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| err(format!("invalid feature value `{t}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            let sample = Sample {
                x,
                class_id: int(fields[1], "class_id")?,
                domain_id: int(fields[2], "domain_id")?,
                is_ukc: flag(fields[3], "is_ukc")?,
                is_ukd: flag(fields[4], "is_ukd")?,
            };
            match split {
                Split::Labeled => scenario.labeled.push(sample),
                Split::Unlabeled => scenario.unlabeled.push(sample),
                Split::Val => scenario.val.push(sample),
                Split::Test => scenario.test.push(sample),
            }
        }
        scenario.known_classes = Split::ALL
            .iter()
            .flat_map(|&sp| scenario.split(sp))
            .filter(|s| !s.is_ukc)
            .map(|s| s.class_id + 1)
            .max()
            .unwrap_or(0);
        Ok(scenario)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Scenario> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Scenario::from_csv(&text)
    }
}

pub fn inputs_of(samples: &[Sample], input_dim: usize) -> Matrix {
    let mut data = Vec::with_capacity(samples.len() * input_dim);
    for s in samples {
        data.extend_from_slice(&s.x);
    }
    Matrix::new(samples.len(), input_dim, data).expect("sample widths are validated")
}

/// Determinant by Gaussian elimination with partial pivoting.
pub fn determinant(m: &Matrix) -> f64 {
    assert_eq!(m.rows(), m.cols(), "determinant of a non-square matrix");
    let n = m.rows();
    let mut a = m.clone();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a.get(i, col).abs().total_cmp(&a.get(j, col).abs()))
            .expect("non-empty range");
        if a.get(pivot, col) == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for c in 0..n {
                let tmp = a.get(col, c);
                a.set(col, c, a.get(pivot, c));
                a.set(pivot, c, tmp);
            }
            det = -det;
        }
        let p = a.get(col, col);
        det *= p;
        for r in col + 1..n {
            let f = a.get(r, col) / p;
            for c in col..n {
                let v = a.get(r, c) - f * a.get(col, c);
                a.set(r, c, v);
            }
        }
    }
    det
}

fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn draw(class: &ClassSpec, domain: &DomainSpec, rng: &mut Rng) -> Vec<f64> {
    let dim = class.mean.len();
    let z = normal_vec(rng, dim);
    let c: Vec<f64> = class.mean.iter().zip(&z).map(|(m, e)| m + class.scale * e).collect();
    let mut x = vec![0.0; dim];
    for (i, xi) in x.iter_mut().enumerate() {
        let row = domain.transform.row(i);
        *xi = row.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>() + domain.shift[i];
    }
    if domain.noise_scale > 0.0 {
        for xi in x.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *xi += domain.noise_scale * e;
        }
    }
    x
}

/// Generates a scenario. `class_specs[..known_classes]` are the known
/// classes, the rest are unknown; `domain_specs[0]` is the known domain.
///
/// Labeled data holds `labeled_per_class` samples of every known class;
/// val and test cycle through the known classes. The unlabeled pool holds
/// `round(unlabeled * ukc_fraction)` unknown-class samples in the known
/// domain, `round(unlabeled * ukd_fraction)` known-class samples from the
/// unknown domains, and known-class known-domain samples for the rest, in
/// shuffled order.
pub fn generate_scenario(
    class_specs: &[ClassSpec],
    domain_specs: &[DomainSpec],
    counts: &Counts,
    known_classes: usize,
    seed: u64,
) -> Result<Scenario> {
    if known_classes < 2 || known_classes > class_specs.len() {
        return Err(Error::Config(format!(
            "need at least two known classes within {} class specs",
            class_specs.len()
        )));
    }
    let dim = class_specs[0].mean.len();
    if dim == 0 {
        return Err(Error::Config("input_dim must be positive".into()));
    }
    for (j, c) in class_specs.iter().enumerate() {
        if c.mean.len() != dim {
            return Err(Error::Config(format!("class {j}: mean has wrong width")));
        }
        if !(c.scale > 0.0) {
            return Err(Error::Config(format!("class {j}: scale must be positive")));
        }
    }
    if domain_specs.is_empty() {
        return Err(Error::Config("domain 0 (known) is required".into()));
    }
    for (d, spec) in domain_specs.iter().enumerate() {
        if spec.transform.shape() != (dim, dim) || spec.shift.len() != dim {
            return Err(Error::Config(format!("domain {d}: transform/shift have wrong shape")));
        }
        if !(spec.noise_scale >= 0.0) {
            return Err(Error::Config(format!("domain {d}: noise_scale must be non-negative")));
        }
        if determinant(&spec.transform).abs() <= 1e-6 {
            return Err(Error::DegenerateTransform(d));
        }
    }
    let (n_clean, n_ukc, n_ukd) = counts.unlabeled_split();
    let unknown_classes = class_specs.len() - known_classes;
    if n_ukc > 0 && unknown_classes == 0 {
        return Err(Error::Config("unknown-class samples requested without unknown classes".into()));
    }
    if n_ukd > 0 && domain_specs.len() < 2 {
        return Err(Error::Config("unknown-domain samples requested without unknown domains".into()));
    }

    let mut rng = stream(seed, "scenario");
    let sample = |class_id: usize, domain_id: usize, rng: &mut Rng| Sample {
        x: draw(&class_specs[class_id], &domain_specs[domain_id], rng),
        class_id,
        domain_id,
        is_ukc: class_id >= known_classes,
        is_ukd: domain_id != 0,
    };

    let mut labeled = Vec::with_capacity(known_classes * counts.labeled_per_class);
    for c in 0..known_classes {
        for _ in 0..counts.labeled_per_class {
            labeled.push(sample(c, 0, &mut rng));
        }
    }
    let val = (0..counts.val).map(|i| sample(i % known_classes, 0, &mut rng)).collect();
    let test = (0..counts.test).map(|i| sample(i % known_classes, 0, &mut rng)).collect();

    let mut unlabeled = Vec::with_capacity(counts.unlabeled);
    for i in 0..n_clean {
        unlabeled.push(sample(i % known_classes, 0, &mut rng));
    }
    for i in 0..n_ukc {
        unlabeled.push(sample(known_classes + i % unknown_classes, 0, &mut rng));
    }
    for i in 0..n_ukd {
        let domain = 1 + i % (domain_specs.len() - 1);
        unlabeled.push(sample(i % known_classes, domain, &mut rng));
    }
    unlabeled.shuffle(&mut rng);

    let scenario = Scenario {
        labeled,
        unlabeled,
        val,
        test,
        known_classes,
        input_dim: dim,
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Everything needed to regenerate a scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSpec {
    pub classes: Vec<ClassSpec>,
    pub known_classes: usize,
    pub domains: Vec<DomainSpec>,
    pub counts: Counts,
    pub seed: u64,
}

/// Planar rotation by `degrees` in the `(0, 1)` coordinate plane.
pub fn plane_rotation(dim: usize, degrees: f64) -> Matrix {
    let (s, c) = degrees.to_radians().sin_cos();
    let mut m = Matrix::identity(dim);
    m.set(0, 0, c);
    m.set(0, 1, -s);
    m.set(1, 0, s);
    m.set(1, 1, c);
    m
}

impl ScenarioSpec {
    pub const DEFAULT_INPUT_DIM: usize = 8;
    pub const DEFAULT_CLASS_SCALE: f64 = 1.5;
    pub const UNKNOWN_CLASS_OFFSET: f64 = 15.0;
    pub const DOMAIN_SHIFT: f64 = 3.0;

    /// Four known classes on a radius-6 circle in the first coordinate plane
    /// of an 8-d space and two unknown classes further out in that plane,
    /// between known classes, more than 10 from every known mean. The unknown
    /// domain rotates the plane by 30 degrees and shifts every off-plane
    /// coordinate by 3.
    pub fn default_universal(seed: u64) -> Self {
        let dim = Self::DEFAULT_INPUT_DIM;
        let scale = Self::DEFAULT_CLASS_SCALE;
        let mut classes = Vec::new();
        for j in 0..4 {
            let theta = (j as f64 * 90.0).to_radians();
            let mut mean = vec![0.0; dim];
            mean[0] = 6.0 * theta.cos();
            mean[1] = 6.0 * theta.sin();
            classes.push(ClassSpec { mean, scale });
        }
        for sign in [1.0, -1.0] {
            let mut mean = vec![0.0; dim];
            mean[0] = sign * Self::UNKNOWN_CLASS_OFFSET;
            mean[1] = sign * Self::UNKNOWN_CLASS_OFFSET;
            classes.push(ClassSpec { mean, scale });
        }
        let mut shift = vec![Self::DOMAIN_SHIFT; dim];
        shift[0] = 0.0;
        shift[1] = 0.0;
        let domains = vec![
            DomainSpec::identity(dim),
            DomainSpec {
                transform: plane_rotation(dim, 30.0),
                shift,
                noise_scale: 0.5,
            },
        ];
        ScenarioSpec {
            classes,
            known_classes: 4,
            domains,
            counts: Counts::default(),
            seed,
        }
    }

    /// Same geometry without unknown classes or domains.
    pub fn default_close_set(seed: u64) -> Self {
        let mut spec = Self::default_universal(seed);
        spec.classes.truncate(spec.known_classes);
        spec.domains.truncate(1);
        spec.counts.ukc_fraction = 0.0;
        spec.counts.ukd_fraction = 0.0;
        spec
    }

    /// Unknown classes only.
    pub fn default_open_set(seed: u64) -> Self {
        let mut spec = Self::default_universal(seed);
        spec.domains.truncate(1);
        spec.counts.ukd_fraction = 0.0;
        spec
    }

    pub fn input_dim(&self) -> usize {
        self.classes.first().map_or(0, |c| c.mean.len())
    }

    pub fn generate(&self) -> Result<Scenario> {
        generate_scenario(
            &self.classes,
            &self.domains,
            &self.counts,
            self.known_classes,
            self.seed,
        )
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        ScenarioSpec {
            seed,
            ..self.clone()
        }
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.set("input_dim", self.input_dim());
        kv.set("known_classes", self.known_classes);
        kv.set("seed", self.seed);
        for (j, c) in self.classes.iter().enumerate() {
            kv.set_list(&format!("class.{j}.mean"), &c.mean);
            kv.set(&format!("class.{j}.scale"), format!("{:?}", c.scale));
        }
        for (d, spec) in self.domains.iter().enumerate() {
            kv.set_list(&format!("domain.{d}.transform"), spec.transform.data());
            kv.set_list(&format!("domain.{d}.shift"), &spec.shift);
            kv.set(&format!("domain.{d}.noise"), format!("{:?}", spec.noise_scale));
        }
        let c = &self.counts;
        kv.set("counts.labeled_per_class", c.labeled_per_class);
        kv.set("counts.val", c.val);
        kv.set("counts.test", c.test);
        kv.set("counts.unlabeled", c.unlabeled);
        kv.set("counts.ukc_fraction", format!("{:?}", c.ukc_fraction));
        kv.set("counts.ukd_fraction", format!("{:?}", c.ukd_fraction));
        kv
    }

    /// Reads a scenario description. Missing count keys take their defaults.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let dim: usize = kv.require("input_dim")?;
        let mut classes = Vec::new();
        while let Some(mean) = kv.get_list(&format!("class.{}.mean", classes.len()))? {
            let j = classes.len();
            if mean.len() != dim {
                return Err(Error::Config(format!("class.{j}.mean must have {dim} values")));
            }
            let scale = kv.require(&format!("class.{j}.scale"))?;
            classes.push(ClassSpec { mean, scale });
        }
        let mut domains = Vec::new();
        while let Some(t) = kv.get_list(&format!("domain.{}.transform", domains.len()))? {
            let d = domains.len();
            let transform = Matrix::new(dim, dim, t)
                .map_err(|_| Error::Config(format!("domain.{d}.transform must have {} values", dim * dim)))?;
            let shift = kv
                .get_list(&format!("domain.{d}.shift"))?
                .unwrap_or_else(|| vec![0.0; dim]);
            let noise_scale = kv.get_or(&format!("domain.{d}.noise"), 0.0)?;
            domains.push(DomainSpec {
                transform,
                shift,
                noise_scale,
            });
        }
        if domains.is_empty() {
            domains.push(DomainSpec::identity(dim));
        }
        let d = Counts::default();
        let counts = Counts {
            labeled_per_class: kv.get_or("counts.labeled_per_class", d.labeled_per_class)?,
            val: kv.get_or("counts.val", d.val)?,
            test: kv.get_or("counts.test", d.test)?,
            unlabeled: kv.get_or("counts.unlabeled", d.unlabeled)?,
            ukc_fraction: kv.get_or("counts.ukc_fraction", d.ukc_fraction)?,
            ukd_fraction: kv.get_or("counts.ukd_fraction", d.ukd_fraction)?,
        };
        Ok(ScenarioSpec {
            classes,
            known_classes: kv.require("known_classes")?,
            domains,
            counts,
            seed: kv.get_or("seed", 0)?,
        })
    }
}

/// Feature-space strong augmentation: additive Gaussian noise followed by
/// independent coordinate dropout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub noise_std: f64,
    pub drop_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            noise_std: 1.0,
            drop_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            noise_std: 0.0,
            drop_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::Config("drop_prob must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.noise_std == 0.0 && self.drop_prob == 0.0
    }
}

pub fn augment(x: &[f64], cfg: &AugmentConfig, rng: &mut Rng) -> Vec<f64> {
    let mut out = x.to_vec();
    if cfg.noise_std > 0.0 {
        for v in out.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += cfg.noise_std * e;
        }
    }
    if cfg.drop_prob > 0.0 {
        for v in out.iter_mut() {
            if rng.random::<f64>() < cfg.drop_prob {
                *v = 0.0;
            }
        }
    }
    out
}

/// Augments every row independently.
pub fn augment_rows(x: &Matrix, cfg: &AugmentConfig, rng: &mut Rng) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = augment(x.row(r), cfg, rng);
        out.row_mut(r).copy_from_slice(&row);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_domain_draws_from_class_gaussian() {
        // with T = I, shift = 0, noise = 0 each draw is mean + scale * e
        let class = ClassSpec {
            mean: vec![1.0, -2.0],
            scale: 0.5,
        };
        let mut a = stream(3, "x");
        let mut b = stream(3, "x");
        let x = draw(&class, &DomainSpec::identity(2), &mut a);
        let e = normal_vec(&mut b, 2);
        assert_eq!(x, vec![1.0 + 0.5 * e[0], -2.0 + 0.5 * e[1]]);
    }

    #[test]
    fn counts_and_flags() {
        let spec = ScenarioSpec::default_universal(1);
        let s = spec.generate().unwrap();
        assert_eq!(s.labeled.len(), 200);
        assert_eq!(s.val.len(), 200);
        assert_eq!(s.test.len(), 200);
        assert_eq!(s.unlabeled.len(), 600);
        assert_eq!(s.unlabeled.iter().filter(|x| x.is_ukc).count(), 180);
        assert_eq!(s.unlabeled.iter().filter(|x| x.is_ukd).count(), 180);
        for c in 0..4 {
            assert_eq!(s.labeled.iter().filter(|x| x.class_id == c).count(), 50);
        }
        s.validate().unwrap();
    }

    #[test]
    fn same_seed_same_csv_bytes() {
        let spec = ScenarioSpec::default_universal(9);
        assert_eq!(spec.generate().unwrap().to_csv(), spec.generate().unwrap().to_csv());
        assert_ne!(
            spec.generate().unwrap().to_csv(),
            spec.with_seed(10).generate().unwrap().to_csv()
        );
    }

    #[test]
    fn known_domain_class_means_match_specs() {
        // sample-mean oracle: each coordinate within 3 sigma / sqrt(n)
        let mut spec = ScenarioSpec::default_universal(5);
        spec.counts.labeled_per_class = 400;
        let s = spec.generate().unwrap();
        for c in 0..4 {
            let rows: Vec<&Sample> = s.labeled.iter().filter(|x| x.class_id == c).collect();
            let n = rows.len() as f64;
            let tol = 3.0 * spec.classes[c].scale / n.sqrt();
            for j in 0..spec.input_dim() {
                let mean = rows.iter().map(|x| x.x[j]).sum::<f64>() / n;
                assert!(
                    (mean - spec.classes[c].mean[j]).abs() <= tol,
                    "class {c} coord {j}: {mean} vs {}",
                    spec.classes[c].mean[j]
                );
            }
        }
    }

    #[test]
    fn unknown_classes_are_far_from_known_means() {
        let spec = ScenarioSpec::default_universal(0);
        for u in &spec.classes[4..] {
            for k in &spec.classes[..4] {
                let d: f64 = u.mean.iter().zip(&k.mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(d >= 10.0 - 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_transform_rejected() {
        let mut spec = ScenarioSpec::default_universal(0);
        spec.domains[1].transform.set(0, 0, 0.0);
        spec.domains[1].transform.set(0, 1, 0.0);
        assert!(matches!(spec.generate(), Err(Error::DegenerateTransform(1))));
        assert!((determinant(&plane_rotation(4, 30.0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip_and_header_only() {
        let s = ScenarioSpec::default_universal(2).generate().unwrap();
        assert_eq!(Scenario::from_csv(&s.to_csv()).unwrap(), s);

        let empty = Scenario {
            labeled: vec![],
            unlabeled: vec![],
            val: vec![],
            test: vec![],
            known_classes: 0,
            input_dim: 2,
        };
        assert_eq!(empty.to_csv(), "split,class_id,domain_id,is_ukc,is_ukd,f0,f1\n");
        assert_eq!(Scenario::from_csv(&empty.to_csv()).unwrap(), empty);
    }

    #[test]
    fn hand_written_csv_parses_literally() {
        let text = "split,class_id,domain_id,is_ukc,is_ukd,f0,f1\n\
                    labeled,1,0,0,0,0.5,-1.25\n\
                    unlabeled,3,0,1,0,2,3\n\
                    test,0,0,0,0,1e-3,4\n";
        let s = Scenario::from_csv(text).unwrap();
        assert_eq!(s.known_classes, 2);
        assert_eq!(
            s.labeled[0],
            Sample {
                x: vec![0.5, -1.25],
                class_id: 1,
                domain_id: 0,
                is_ukc: false,
                is_ukd: false
            }
        );
        assert!(s.unlabeled[0].is_ukc);
        assert_eq!(s.unlabeled[0].x, vec![2.0, 3.0]);
        assert_eq!(s.test[0].x, vec![1e-3, 4.0]);
    }

    #[test]
    fn malformed_csv_reports_line() {
        let text = "split,class_id,domain_id,is_ukc,is_ukd,f0\nlabeled,0,0,0,0,1\nlabeled,0,0,0,0\n";
        assert!(matches!(Scenario::from_csv(text), Err(Error::Parse { line: 3, .. })));
        let text = "split,class_id,domain_id,is_ukc,is_ukd,f0\nbogus,0,0,0,0,1\n";
        assert!(matches!(Scenario::from_csv(text), Err(Error::Parse { line: 2, .. })));
        assert!(Scenario::from_csv("a,b\n").is_err());
    }

    #[test]
    fn spec_file_round_trip() {
        let spec = ScenarioSpec::default_universal(42);
        let text = spec.to_kv().render();
        let back = ScenarioSpec::from_kv(&KvFile::parse(&text).unwrap()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn augment_boundaries() {
        let x = vec![1.0, -2.0, 3.5];
        let mut rng = stream(0, "aug");
        assert_eq!(augment(&x, &AugmentConfig::identity(), &mut rng), x);
        let cfg = AugmentConfig {
            noise_std: 0.0,
            drop_prob: 0.999,
        };
        let mut rng = stream(1, "aug");
        assert_eq!(augment(&x, &cfg, &mut rng), vec![0.0; 3]);
        assert!(AugmentConfig { noise_std: 0.0, drop_prob: 1.0 }.validate().is_err());
        assert!(AugmentConfig { noise_std: -1.0, drop_prob: 0.0 }.validate().is_err());
    }

    #[test]
    fn augment_noise_is_centered() {
        let x = vec![1.0, -2.0, 0.0, 5.0];
        let cfg = AugmentConfig {
            noise_std: 0.1,
            drop_prob: 0.0,
        };
        let mut rng = stream(2, "aug");
        let n = 10_000;
        let mut acc = vec![0.0; 4];
        for _ in 0..n {
            for (a, v) in acc.iter_mut().zip(augment(&x, &cfg, &mut rng)) {
                *a += v;
            }
        }
        for (a, v) in acc.iter().zip(&x) {
            assert!((a / n as f64 - v).abs() < 0.01);
        }
    }

    proptest! {
        #[test]
        fn identity_augmentation_is_identity(x in proptest::collection::vec(-1e6f64..1e6, 0..16), seed in any::<u64>()) {
            let mut rng = stream(seed, "aug");
            prop_assert_eq!(augment(&x, &AugmentConfig::identity(), &mut rng), x);
        }
    }
}
