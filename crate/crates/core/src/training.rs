//! Joint optimization: supervised warm-up, weighted Π-model consistency and
//! weighted domain-adversarial alignment through gradient reversal.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cds::domain_loss;
use crate::config::KvFile;
use crate::doe::{compute_prototypes, score_unlabeled, UkcScores};
use crate::error::{Error, Result};
use crate::models::{ModelBundle, DOM_PREFIX};
use crate::numerics::{sgd_step, sgd_step_prefix, Matrix, Tape, Var};
use crate::rng::{stream, Rng};
use crate::synthdata::{augment_rows, AugmentConfig, Scenario, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub alpha_max: f64,
    pub beta_max: f64,
    /// Full-pool `D'` steps per epoch.
    pub dom_steps: usize,
    pub aug: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_epochs: 200,
            warmup_epochs: 80,
            lr: 3e-4,
            batch_size: 32,
            alpha_max: 0.1,
            beta_max: 1.0,
            dom_steps: 1,
            aug: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Supervised-only configuration: no consistency, no reversal.
    pub fn erm(&self) -> TrainConfig {
        TrainConfig {
            alpha_max: 0.0,
            beta_max: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::Config("warmup_epochs must not exceed total_epochs".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.alpha_max >= 0.0) || !(self.beta_max >= 0.0) {
            return Err(Error::Config("alpha_max and beta_max must be non-negative".into()));
        }
        self.aug.validate()
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.set("total_epochs", self.total_epochs);
        kv.set("warmup_epochs", self.warmup_epochs);
        kv.set("lr", format!("{:?}", self.lr));
        kv.set("batch_size", self.batch_size);
        kv.set("alpha_max", format!("{:?}", self.alpha_max));
        kv.set("beta_max", format!("{:?}", self.beta_max));
        kv.set("dom_steps", self.dom_steps);
        kv.set("aug.noise_std", format!("{:?}", self.aug.noise_std));
        kv.set("aug.drop_prob", format!("{:?}", self.aug.drop_prob));
        kv.set("seed", self.seed);
        kv
    }

    /// Missing keys take their defaults; unknown keys are ignored so that one
    /// file can carry settings for several stages.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            total_epochs: kv.get_or("total_epochs", d.total_epochs)?,
            warmup_epochs: kv.get_or("warmup_epochs", d.warmup_epochs)?,
            lr: kv.get_or("lr", d.lr)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            alpha_max: kv.get_or("alpha_max", d.alpha_max)?,
            beta_max: kv.get_or("beta_max", d.beta_max)?,
            dom_steps: kv.get_or("dom_steps", d.dom_steps)?,
            aug: AugmentConfig {
                noise_std: kv.get_or("aug.noise_std", d.aug.noise_std)?,
                drop_prob: kv.get_or("aug.drop_prob", d.aug.drop_prob)?,
            },
            seed: kv.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn alpha(&self, epoch: usize) -> f64 {
        self.alpha_max * rampup(epoch, self.warmup_epochs)
    }

    pub fn beta(&self, epoch: usize) -> f64 {
        self.beta_max * rampup(epoch, self.warmup_epochs)
    }
}

/// `exp(-5 (1 - t)^2)` with `t = min(epoch / warmup, 1)`.
pub fn rampup(epoch: usize, warmup_epochs: usize) -> f64 {
    let t = if warmup_epochs == 0 {
        1.0
    } else {
        (epoch as f64 / warmup_epochs as f64).min(1.0)
    };
    (-5.0 * (1.0 - t) * (1.0 - t)).exp()
}

/// Per-epoch loss terms and schedule values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub ce: f64,
    pub ssl: f64,
    pub adv: f64,
    pub dom: f64,
    pub alpha: f64,
    pub beta: f64,
    pub mean_w_uc: f64,
    pub mean_w_d: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub epochs: Vec<EpochLosses>,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "epoch,ce,ssl,adv,dom,alpha,beta,mean_w_uc,mean_w_d";

    pub fn ce_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.ce).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.epochs.iter().all(|e| {
            [e.ce, e.ssl, e.adv, e.dom, e.alpha, e.beta, e.mean_w_uc, e.mean_w_d]
                .iter()
                .all(|v| v.is_finite())
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                e.epoch, e.ce, e.ssl, e.adv, e.dom, e.alpha, e.beta, e.mean_w_uc, e.mean_w_d
            ));
        }
        out
    }
}

/// Weighted Π-model term: `mean_i w_i ‖p(view1_i) - p(view2_i)‖²`, two fresh
/// augmentations per row, gradient through both branches.
pub fn consistency_loss(
    tape: &mut Tape,
    bundle: &ModelBundle,
    x_u: &Matrix,
    w_uc: &[f64],
    aug: &AugmentConfig,
    rng: &mut Rng,
) -> Result<Var> {
    if w_uc.len() != x_u.rows() {
        return Err(Error::shape("consistency_loss", (x_u.rows(), 1), (w_uc.len(), 1)));
    }
    let view1 = augment_rows(x_u, aug, rng);
    let view2 = augment_rows(x_u, aug, rng);
    let x1 = tape.constant(view1);
    let x2 = tape.constant(view2);
    let v1 = bundle.extract(tape, x1)?;
    let v2 = bundle.extract(tape, x2)?;
    let p1 = bundle.classify(tape, v1)?;
    let p2 = bundle.classify(tape, v2)?;
    let diff = tape.sub(p1, p2)?;
    let sq = tape.square(diff);
    let per_row = tape.row_sums(sq);
    let w = tape.constant(Matrix::column_vector(w_uc));
    let weighted = tape.scale_rows(per_row, w)?;
    Ok(tape.mean(weighted))
}

/// Discriminator loss on already-extracted features, with the gradient into
/// the features reversed and scaled by `lambda`:
/// `bce(D(v_l), 0) + bce(D(v_u), 1; w_ud * w_uc)`.
pub fn adversarial_term(
    tape: &mut Tape,
    bundle: &ModelBundle,
    v_l: Var,
    v_u: Var,
    w_ud: &[f64],
    w_uc: &[f64],
    lambda: f64,
) -> Result<Var> {
    let n_l = tape.value(v_l).rows();
    let n_u = tape.value(v_u).rows();
    if w_ud.len() != n_u || w_uc.len() != n_u {
        return Err(Error::shape("adversarial_loss", (n_u, 1), (w_ud.len(), w_uc.len())));
    }
    let weights: Vec<f64> = w_ud.iter().zip(w_uc).map(|(a, b)| a * b).collect();
    let d_l = bundle.discriminate_adv(tape, v_l, lambda)?;
    let d_u = bundle.discriminate_adv(tape, v_u, lambda)?;
    let labeled = tape.bce(d_l, &vec![0.0; n_l], &vec![1.0; n_l])?;
    let unlabeled = tape.bce(d_u, &vec![1.0; n_u], &weights)?;
    tape.add(labeled, unlabeled)
}

pub fn adversarial_loss(
    tape: &mut Tape,
    bundle: &ModelBundle,
    x_l: &Matrix,
    x_u: &Matrix,
    w_ud: &[f64],
    w_uc: &[f64],
    lambda: f64,
) -> Result<Var> {
    let xl = tape.constant(x_l.clone());
    let xu = tape.constant(x_u.clone());
    let v_l = bundle.extract(tape, xl)?;
    let v_u = bundle.extract(tape, xu)?;
    adversarial_term(tape, bundle, v_l, v_u, w_ud, w_uc, lambda)
}

fn one_hot(labels: &[usize], k: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), k);
    for (r, &y) in labels.iter().enumerate() {
        m.set(r, y, 1.0);
    }
    m
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn check_finite(value: f64, what: &'static str, epoch: usize, batch: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { what, epoch, batch })
    }
}

/// Result of [`train`]. Scores are those used during the last epoch.
#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub history: LossBreakdown,
    pub w_uc: Option<UkcScores>,
    pub w_ud: Vec<f64>,
}

/// Cycles through the unlabeled pool in reshuffled passes.
struct PoolCursor {
    order: Vec<usize>,
    pos: usize,
}

impl PoolCursor {
    fn new(n: usize) -> Self {
        PoolCursor {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next_batch(&mut self, size: usize, rng: &mut Rng) -> Vec<usize> {
        let n = self.order.len();
        let mut out = Vec::with_capacity(size.min(n));
        while out.len() < size.min(n) {
            if self.pos == n {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Full training run. `w_d` holds the frozen domain posteriors of the
/// unlabeled pool; `None` skips the `D'` updates and sets `w'_ud = 0`.
pub fn train(scenario: &Scenario, bundle: &mut ModelBundle, w_d: Option<&[f64]>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    scenario.validate()?;
    let k = scenario.known_classes;
    let x_l = scenario.inputs(Split::Labeled);
    let y_l = scenario.labels(Split::Labeled);
    let x_u = scenario.inputs(Split::Unlabeled);
    let n_u = x_u.rows();
    if let Some(w) = w_d {
        if w.len() != n_u {
            return Err(Error::Length {
                what: "w_d",
                expected: n_u,
                actual: w.len(),
            });
        }
    }
    let use_dom = w_d.is_some() && n_u > 0;

    let mut shuffle_rng = stream(cfg.seed, "train.labeled");
    let mut pool_rng = stream(cfg.seed, "train.unlabeled");
    let mut aug_rng = stream(cfg.seed, "train.augment");
    let mut score_rng = stream(cfg.seed, "train.score");

    let mut order: Vec<usize> = (0..x_l.rows()).collect();
    let mut cursor = PoolCursor::new(n_u);
    let mut outcome = TrainOutcome::default();

    for epoch in 0..cfg.total_epochs {
        let alpha = cfg.alpha(epoch);
        let beta = cfg.beta(epoch);
        let phase_b = epoch >= cfg.warmup_epochs && n_u > 0;

        let (w_uc, w_ud) = if phase_b {
            let protos = compute_prototypes(&bundle.features(&x_l)?, &y_l, k)?;
            let scores = score_unlabeled(bundle, &protos, &x_u, &cfg.aug, &mut score_rng)?;
            let w_ud = if use_dom { bundle.domain_scores(&x_u)? } else { vec![0.0; n_u] };
            let w_uc = scores.weights();
            outcome.w_uc = Some(scores);
            outcome.w_ud = w_ud.clone();
            (w_uc, w_ud)
        } else {
            (Vec::new(), Vec::new())
        };

        order.shuffle(&mut shuffle_rng);
        let (mut ce_sum, mut ssl_sum, mut adv_sum) = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let xb = x_l.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y_l[i]).collect();
            let mut tape = Tape::new();
            let xv = tape.constant(xb);
            let v_l = bundle.extract(&mut tape, xv)?;
            let p_l = bundle.classify(&mut tape, v_l)?;
            let ce = tape.cross_entropy(p_l, &one_hot(&yb, k))?;
            let mut total = ce;
            ce_sum += check_finite(tape.scalar(ce), "cross-entropy", epoch, b)?;

            if phase_b {
                let idx = cursor.next_batch(cfg.batch_size, &mut pool_rng);
                let xu = x_u.select_rows(&idx);
                let wuc: Vec<f64> = idx.iter().map(|&i| w_uc[i]).collect();
                let wud: Vec<f64> = idx.iter().map(|&i| w_ud[i]).collect();

                let ssl = consistency_loss(&mut tape, bundle, &xu, &wuc, &cfg.aug, &mut aug_rng)?;
                ssl_sum += check_finite(tape.scalar(ssl), "consistency loss", epoch, b)?;
                let ssl_scaled = tape.scale(ssl, beta);
                total = tape.add(total, ssl_scaled)?;

                let xuv = tape.constant(xu);
                let v_u = bundle.extract(&mut tape, xuv)?;
                let adv = adversarial_term(&mut tape, bundle, v_l, v_u, &wud, &wuc, alpha)?;
                adv_sum += check_finite(tape.scalar(adv), "adversarial loss", epoch, b)?;
                total = tape.add(total, adv)?;
            }

            check_finite(tape.scalar(total), "total loss", epoch, b)?;
            tape.backward(total, &mut bundle.store)?;
            sgd_step(&mut bundle.store, cfg.lr);
            batches += 1;
        }

        let mut dom = 0.0;
        if use_dom {
            let w = w_d.unwrap_or(&[]);
            for _ in 0..cfg.dom_steps {
                dom = dom_step(bundle, &x_l, &x_u, w, cfg.lr)?;
                check_finite(dom, "domain loss", epoch, batches)?;
            }
        }

        let n = batches.max(1) as f64;
        outcome.history.epochs.push(EpochLosses {
            epoch,
            ce: ce_sum / n,
            ssl: ssl_sum / n,
            adv: adv_sum / n,
            dom,
            alpha,
            beta,
            mean_w_uc: mean(&w_uc),
            mean_w_d: w_d.map_or(0.0, mean),
        });
    }
    Ok(outcome)
}

/// One full-pool step of `D'` on detached features. Returns the loss before
/// the step.
fn dom_step(bundle: &mut ModelBundle, x_l: &Matrix, x_u: &Matrix, w_d: &[f64], lr: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let fl = tape.constant(bundle.features(x_l)?);
    let fu = tape.constant(bundle.features(x_u)?);
    let yl = bundle.discriminate_dom(&mut tape, fl)?;
    let yu = bundle.discriminate_dom(&mut tape, fu)?;
    let loss = domain_loss(&mut tape, yl, yu, w_d)?;
    let value = tape.scalar(loss);
    tape.backward(loss, &mut bundle.store)?;
    sgd_step_prefix(&mut bundle.store, lr, DOM_PREFIX);
    Ok(value)
}

/// Plain minibatch cross-entropy training on the labeled split. Returns the
/// per-epoch mean loss.
pub fn train_supervised(scenario: &Scenario, bundle: &mut ModelBundle, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let k = scenario.known_classes;
    let x = scenario.inputs(Split::Labeled);
    let y = scenario.labels(Split::Labeled);
    let mut rng = stream(cfg.seed, "train.labeled");
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut trace = Vec::with_capacity(cfg.total_epochs);
    for epoch in 0..cfg.total_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let mut tape = Tape::new();
            let xv = tape.constant(x.select_rows(chunk));
            let v = bundle.extract(&mut tape, xv)?;
            let p = bundle.classify(&mut tape, v)?;
            let loss = tape.cross_entropy(p, &one_hot(&yb, k))?;
            total += check_finite(tape.scalar(loss), "cross-entropy", epoch, b)?;
            tape.backward(loss, &mut bundle.store)?;
            sgd_step(&mut bundle.store, cfg.lr);
            batches += 1;
        }
        trace.push(total / batches.max(1) as f64);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{zero_prefix, BundleConfig, ADV_PREFIX, CLASSIFIER_PREFIX, FEATURE_PREFIX};
    use crate::numerics::{fd_check, fd_check_scaled};
    use crate::synthdata::ScenarioSpec;
    use rand::Rng as _;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = stream(seed, "x");
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn weights(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, "w");
        (0..n).map(|_| rng.random::<f64>()).collect()
    }

    /// Random small model with non-zero biases, so no pre-activation sits
    /// exactly on a ReLU kink.
    fn small_bundle(seed: u64) -> ModelBundle {
        let mut cfg = BundleConfig::new(3, 3);
        cfg.feature_hidden = 5;
        cfg.feature_dim = 4;
        cfg.head_hidden = 3;
        let mut b = ModelBundle::new(cfg, &mut stream(seed, "init")).unwrap();
        let mut rng = stream(seed, "perturb");
        for (_, p) in b.store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
        b
    }

    fn tiny_scenario(seed: u64) -> Scenario {
        let mut spec = ScenarioSpec::default_universal(seed);
        spec.counts.labeled_per_class = 10;
        spec.counts.unlabeled = 40;
        spec.counts.val = 8;
        spec.counts.test = 8;
        spec.generate().unwrap()
    }

    fn tiny_config(seed: u64) -> TrainConfig {
        TrainConfig {
            total_epochs: 6,
            warmup_epochs: 3,
            lr: 1e-2,
            batch_size: 16,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn rampup_endpoints_and_monotonicity() {
        assert!((rampup(0, 80) - (-5.0f64).exp()).abs() < 1e-15);
        assert!((rampup(0, 80) - 0.006738).abs() < 1e-6);
        assert_eq!(rampup(80, 80), 1.0);
        assert_eq!(rampup(150, 80), 1.0);
        assert_eq!(rampup(0, 0), 1.0);
        for e in 0..100 {
            assert!(rampup(e + 1, 80) >= rampup(e, 80));
        }
        let cfg = TrainConfig::default();
        assert_eq!(cfg.alpha(80), 0.1);
        assert_eq!(cfg.beta(200), 1.0);
    }

    #[test]
    fn config_round_trips_and_validates() {
        let cfg = TrainConfig {
            lr: 0.123,
            seed: 9,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        assert_eq!(TrainConfig::from_kv(&KvFile::new()).unwrap(), TrainConfig::default());
        let bad = KvFile::parse("warmup_epochs = 300").unwrap();
        assert!(TrainConfig::from_kv(&bad).is_err());
        let bad = KvFile::parse("lr = 0").unwrap();
        assert!(TrainConfig::from_kv(&bad).is_err());
    }

    #[test]
    fn consistency_vanishes_for_identical_views_or_zero_weights() {
        let b = small_bundle(1);
        let x = random_matrix(6, 3, 2);
        let mut rng = stream(0, "aug");
        let mut tape = Tape::new();
        let l = consistency_loss(&mut tape, &b, &x, &weights(6, 3), &AugmentConfig::identity(), &mut rng).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let l = consistency_loss(&mut tape, &b, &x, &[0.0; 6], &AugmentConfig::default(), &mut rng).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let l = consistency_loss(&mut tape, &b, &x, &[1.0; 6], &AugmentConfig::default(), &mut rng).unwrap();
        assert!(tape.scalar(l) > 0.0);
    }

    #[test]
    fn consistency_gradient_matches_finite_differences() {
        let b = small_bundle(4);
        let x = random_matrix(5, 3, 5);
        let w = weights(5, 6);
        let aug = AugmentConfig::default();
        let mut store = b.store.clone();
        let err = fd_check(&mut store, 1e-6, |tape, s| {
            let mut b = b.clone();
            b.store = s.clone();
            // same augmentation draws on every evaluation
            let mut rng = stream(7, "aug");
            consistency_loss(tape, &b, &x, &w, &aug, &mut rng)
        })
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn zero_discriminator_gives_ln2_terms() {
        let mut b = small_bundle(2);
        zero_prefix(&mut b.store, ADV_PREFIX);
        let wud = weights(4, 1);
        let wuc = weights(4, 2);
        let mut tape = Tape::new();
        let l = adversarial_loss(&mut tape, &b, &random_matrix(3, 3, 1), &random_matrix(4, 3, 2), &wud, &wuc, 0.1)
            .unwrap();
        let m = mean(&wud.iter().zip(&wuc).map(|(a, c)| a * c).collect::<Vec<_>>());
        assert!((tape.scalar(l) - (1.0 + m) * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_cut_the_unlabeled_branch() {
        let b = small_bundle(3);
        let x_u = random_matrix(4, 3, 9);
        let mut s1 = b.store.clone();
        let mut s2 = b.store.clone();
        let mut tape = Tape::new();
        let l = adversarial_loss(&mut tape, &b, &random_matrix(3, 3, 1), &x_u, &[0.0; 4], &[1.0; 4], 0.5).unwrap();
        tape.backward(l, &mut s1).unwrap();
        let mut tape = Tape::new();
        let xl = tape.constant(random_matrix(3, 3, 1));
        let v_l = b.extract(&mut tape, xl).unwrap();
        let d = b.discriminate_adv(&mut tape, v_l, 0.5).unwrap();
        let only_l = tape.bce(d, &[0.0; 3], &[1.0; 3]).unwrap();
        tape.backward(only_l, &mut s2).unwrap();
        for (name, p) in s1.iter() {
            assert_eq!(p.grad, *s2.grad(name).unwrap(), "{name}");
        }
    }

    #[test]
    fn reversal_scales_feature_gradients_by_minus_lambda() {
        let b = small_bundle(5);
        let x_l = random_matrix(4, 3, 1);
        let x_u = random_matrix(5, 3, 2);
        let (wud, wuc) = (weights(5, 3), weights(5, 4));
        let lambda = 0.37;
        let grads = |lam: f64| {
            let mut s = b.store.clone();
            let mut tape = Tape::new();
            let l = adversarial_loss(&mut tape, &b, &x_l, &x_u, &wud, &wuc, lam).unwrap();
            tape.backward(l, &mut s).unwrap();
            s
        };
        // lambda = -1 makes the reversal an identity
        let rev = grads(lambda);
        let plain = grads(-1.0);
        for (name, p) in rev.iter() {
            let q = plain.grad(name).unwrap();
            let k = if name.starts_with(FEATURE_PREFIX) { -lambda } else { 1.0 };
            for (a, n) in p.grad.data().iter().zip(q.data()) {
                assert!((a - k * n).abs() < 1e-10, "{name}: {a} vs {}", k * n);
            }
        }
    }

    #[test]
    fn reversed_composite_matches_scaled_finite_differences() {
        let b = small_bundle(6);
        let x_l = random_matrix(4, 3, 1);
        let x_u = random_matrix(5, 3, 2);
        let (wud, wuc) = (weights(5, 3), weights(5, 4));
        let lambda = 0.25;
        let mut store = b.store.clone();
        let err = fd_check_scaled(
            &mut store,
            1e-6,
            |tape, s| {
                let mut b = b.clone();
                b.store = s.clone();
                adversarial_loss(tape, &b, &x_l, &x_u, &wud, &wuc, lambda)
            },
            |name| if name.starts_with(FEATURE_PREFIX) { -lambda } else { 1.0 },
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn adversarial_term_never_reaches_classifier() {
        let b = small_bundle(7);
        let mut s = b.store.clone();
        let mut tape = Tape::new();
        let l = adversarial_loss(&mut tape, &b, &random_matrix(4, 3, 1), &random_matrix(5, 3, 2), &[1.0; 5], &[1.0; 5], 0.3)
            .unwrap();
        tape.backward(l, &mut s).unwrap();
        for (name, p) in s.iter() {
            if name.starts_with(CLASSIFIER_PREFIX) || name.starts_with(DOM_PREFIX) {
                assert!(p.grad.data().iter().all(|&g| g == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn erm_configuration_reproduces_supervised_loop() {
        let scenario = tiny_scenario(3).without_unlabeled();
        let cfg = tiny_config(11).erm();
        let mut a = ModelBundle::new(BundleConfig::new(8, 4), &mut stream(1, "init")).unwrap();
        let mut b = a.clone();
        let out = train(&scenario, &mut a, None, &cfg).unwrap();
        let trace = train_supervised(&scenario, &mut b, &cfg).unwrap();
        assert_eq!(out.history.ce_trace(), trace);
        assert_eq!(a.store, b.store);
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let scenario = tiny_scenario(4);
        let cfg = tiny_config(5);
        let w_d: Vec<f64> = scenario.ukd_flags().iter().map(|&f| if f { 0.9 } else { 0.1 }).collect();
        let run = || {
            let mut m = ModelBundle::new(BundleConfig::new(8, 4), &mut stream(2, "init")).unwrap();
            let out = train(&scenario, &mut m, Some(&w_d), &cfg).unwrap();
            (out.history, m.store)
        };
        let (h1, s1) = run();
        let (h2, s2) = run();
        assert_eq!(h1, h2);
        assert_eq!(s1, s2);
        assert!(h1.is_finite());
        assert_eq!(h1.epochs.len(), 6);
        assert!(h1.epochs[..3].iter().all(|e| e.ssl == 0.0 && e.adv == 0.0));
        assert!(h1.epochs[3..].iter().all(|e| e.adv > 0.0 && e.mean_w_uc > 0.0));
    }

    #[test]
    fn rejects_mismatched_domain_weights() {
        let scenario = tiny_scenario(1);
        let mut m = ModelBundle::new(BundleConfig::new(8, 4), &mut stream(2, "init")).unwrap();
        assert!(matches!(
            train(&scenario, &mut m, Some(&[0.5; 3]), &tiny_config(1)),
            Err(Error::Length { .. })
        ));
    }
}
