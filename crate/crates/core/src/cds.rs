//! Class-agnostic domain separation.
//!
//! A VAE trained on labeled (known-domain) inputs reconstructs unknown-domain
//! inputs poorly. A two-component 1-D Gaussian mixture fit to the
//! reconstruction errors of the unlabeled pool turns each error into the
//! posterior `w_d` of the high-error component; `w_d` then serves as the soft
//! target of the non-adversarial domain discriminator.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Sampling, Vae};
use crate::numerics::{sgd_step, Matrix, Tape, Var};
use crate::rng::Rng;

pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig {
            epochs: 100,
            lr: 1e-3,
            batch_size: 32,
        }
    }
}

/// Trains the VAE on `inputs` by minibatch SGD on mean reconstruction error
/// plus weighted KL. Returns the mean objective of every epoch.
pub fn pretrain_vae(vae: &mut Vae, inputs: &Matrix, cfg: &VaeTrainConfig, rng: &mut Rng) -> Result<Vec<f64>> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..inputs.rows()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = inputs.select_rows(chunk);
            let mut tape = Tape::new();
            let out = vae.forward(&mut tape, &x, Sampling::Random(rng))?;
            let loss = vae.objective(&mut tape, &out)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    what: "VAE objective",
                    epoch,
                    batch: b,
                });
            }
            tape.backward(loss, &mut vae.store)?;
            sgd_step(&mut vae.store, cfg.lr);
            total += value;
            batches += 1;
        }
        trace.push(if batches > 0 { total / batches as f64 } else { 0.0 });
    }
    Ok(trace)
}

/// `‖x_i - f(g(x_i))‖²` per row with `z = mu`.
pub fn recon_errors(vae: &Vae, xs: &Matrix) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let out = vae.forward(&mut tape, xs, Sampling::Mean)?;
    Ok(tape.value(out.recon_error).data().to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub weights: [f64; 2],
    pub means: [f64; 2],
    pub variances: [f64; 2],
    /// Log-likelihood of the data under the parameters entering each iteration.
    pub log_likelihood: Vec<f64>,
    /// Component with the larger mean.
    pub ukd_component: usize,
    pub converged: bool,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var)
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Two-component 1-D EM. Means start at the 25th/75th percentiles, both
/// variances at the pooled variance, weights equal. Iteration stops once
/// the log-likelihood gain falls below `tol` or after `max_iters` updates.
pub fn fit_gmm2(errors: &[f64], max_iters: usize, tol: f64) -> Result<GmmFit> {
    if errors.len() < 4 {
        return Err(Error::DegenerateFit(format!(
            "need at least 4 points, got {}",
            errors.len()
        )));
    }
    if max_iters == 0 || !(tol > 0.0) {
        return Err(Error::Config("fit_gmm2 needs max_iters >= 1 and tol > 0".into()));
    }
    if errors.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateFit("non-finite input".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[0] == sorted[sorted.len() - 1] {
        return Err(Error::DegenerateFit("all inputs are identical".into()));
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let pooled = (errors.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).max(VARIANCE_FLOOR);

    let mut means = [percentile(&sorted, 0.25), percentile(&sorted, 0.75)];
    if means[0] == means[1] {
        means = [sorted[0], sorted[sorted.len() - 1]];
    }
    let mut variances = [pooled, pooled];
    let mut weights: [f64; 2] = [0.5, 0.5];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut resp = vec![0.0; errors.len()];

    for _ in 0..max_iters {
        // E step
        let mut ll = 0.0;
        for (r, &x) in resp.iter_mut().zip(errors) {
            let a = weights[0].ln() + log_normal_pdf(x, means[0], variances[0]);
            let b = weights[1].ln() + log_normal_pdf(x, means[1], variances[1]);
            let total = log_sum_exp(a, b);
            ll += total;
            *r = (b - total).exp();
        }
        if let Some(&prev) = trace.last() {
            if ll - prev < tol {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);

        // M step
        let n1: f64 = resp.iter().sum();
        let n0 = n - n1;
        if n0 <= 0.0 || n1 <= 0.0 {
            return Err(Error::DegenerateFit("a component lost all responsibility".into()));
        }
        let m0 = resp.iter().zip(errors).map(|(r, x)| (1.0 - r) * x).sum::<f64>() / n0;
        let m1 = resp.iter().zip(errors).map(|(r, x)| r * x).sum::<f64>() / n1;
        let v0 = resp.iter().zip(errors).map(|(r, x)| (1.0 - r) * (x - m0).powi(2)).sum::<f64>() / n0;
        let v1 = resp.iter().zip(errors).map(|(r, x)| r * (x - m1).powi(2)).sum::<f64>() / n1;
        means = [m0, m1];
        variances = [v0.max(VARIANCE_FLOOR), v1.max(VARIANCE_FLOOR)];
        weights = [n0 / n, n1 / n];
    }
    if !converged {
        // likelihood of the final parameters
        let ll: f64 = errors
            .iter()
            .map(|&x| {
                log_sum_exp(
                    weights[0].ln() + log_normal_pdf(x, means[0], variances[0]),
                    weights[1].ln() + log_normal_pdf(x, means[1], variances[1]),
                )
            })
            .sum();
        trace.push(ll);
    }
    let ukd_component = if means[1] >= means[0] { 1 } else { 0 };
    Ok(GmmFit {
        weights,
        means,
        variances,
        log_likelihood: trace,
        ukd_component,
        converged,
    })
}

/// Posterior responsibility of the UKD (larger-mean) component at `x`.
pub fn posterior_ukd(gmm: &GmmFit, x: f64) -> f64 {
    let u = gmm.ukd_component;
    let o = 1 - u;
    let lu = gmm.weights[u].ln() + log_normal_pdf(x, gmm.means[u], gmm.variances[u]);
    let lo = gmm.weights[o].ln() + log_normal_pdf(x, gmm.means[o], gmm.variances[o]);
    (lu - log_sum_exp(lu, lo)).exp()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UkdScores {
    pub recon_error: Vec<f64>,
    pub w_d: Vec<f64>,
}

pub fn score_domains(vae: &Vae, gmm: &GmmFit, xs: &Matrix) -> Result<UkdScores> {
    let recon_error = recon_errors(vae, xs)?;
    let w_d = recon_error.iter().map(|&e| posterior_ukd(gmm, e)).collect();
    Ok(UkdScores { recon_error, w_d })
}

/// Domain BCE for `D'`: hard target 0 on labeled outputs, soft target `w_d`
/// on unlabeled outputs, each term averaged over its own set.
pub fn domain_loss(tape: &mut Tape, yhat_l: Var, yhat_u: Var, w_d: &[f64]) -> Result<Var> {
    let n_l = tape.value(yhat_l).rows();
    let n_u = tape.value(yhat_u).rows();
    if w_d.len() != n_u {
        return Err(Error::shape("domain_loss", (n_u, 1), (w_d.len(), 1)));
    }
    let labeled = tape.bce(yhat_l, &vec![0.0; n_l], &vec![1.0; n_l])?;
    let unlabeled = tape.bce(yhat_u, w_d, &vec![1.0; n_u])?;
    tape.add(labeled, unlabeled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{zero_prefix, VaeConfig};
    use crate::numerics::{bce, fd_check, ParameterStore};
    use crate::rng::stream;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn bimodal(seed: u64, n: usize, a: f64, b: f64) -> Vec<f64> {
        let mut rng = stream(seed, "gmm");
        let mut v: Vec<f64> = (0..n).map(|_| a + rng.sample::<f64, _>(StandardNormal)).collect();
        v.extend((0..n).map(|_| b + rng.sample::<f64, _>(StandardNormal)));
        v
    }

    fn assert_monotone(trace: &[f64]) {
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "log-likelihood decreased: {w:?}");
        }
    }

    #[test]
    fn recovers_well_separated_components() {
        let fit = fit_gmm2(&bimodal(1, 1000, 0.0, 5.0), 500, 1e-8).unwrap();
        let u = fit.ukd_component;
        assert!((fit.means[u] - 5.0).abs() <= 0.3);
        assert!((fit.means[1 - u] - 0.0).abs() <= 0.3);
        assert!((fit.weights[0] - 0.5).abs() <= 0.1);
        assert!((fit.weights[0] + fit.weights[1] - 1.0).abs() < 1e-12);
        assert!((fit.weights[0] - fit.weights[1]).abs() <= 0.05);
        assert_monotone(&fit.log_likelihood);
    }

    #[test]
    fn likelihood_never_decreases_on_skewed_input() {
        let mut rng = stream(3, "skew");
        let data: Vec<f64> = (0..300).map(|_| rng.random::<f64>().powi(3) * 10.0).collect();
        let fit = fit_gmm2(&data, 200, 1e-10).unwrap();
        assert_monotone(&fit.log_likelihood);
        assert!(fit.variances.iter().all(|&v| v >= VARIANCE_FLOOR));
    }

    #[test]
    fn degenerate_inputs_error() {
        assert!(matches!(fit_gmm2(&[1.0; 10], 10, 1e-6), Err(Error::DegenerateFit(_))));
        assert!(fit_gmm2(&[1.0, 2.0, 3.0], 10, 1e-6).is_err());
        assert!(fit_gmm2(&[1.0, 2.0, 3.0, 4.0], 0, 1e-6).is_err());
    }

    #[test]
    fn fit_is_deterministic() {
        let data = bimodal(4, 200, 1.0, 3.0);
        assert_eq!(fit_gmm2(&data, 100, 1e-9).unwrap(), fit_gmm2(&data, 100, 1e-9).unwrap());
    }

    fn manual_fit(means: [f64; 2], variances: [f64; 2], weights: [f64; 2]) -> GmmFit {
        GmmFit {
            weights,
            means,
            variances,
            log_likelihood: vec![],
            ukd_component: if means[1] >= means[0] { 1 } else { 0 },
            converged: true,
        }
    }

    #[test]
    fn posterior_cases() {
        let fit = manual_fit([1.0, 5.0], [1.0, 1.0], [0.5, 0.5]);
        assert!((posterior_ukd(&fit, 3.0) - 0.5).abs() < 1e-15);
        // direct density ratio at the component means, separation 4 sigma:
        // ratio = exp(-8) -> posterior = 1 / (1 + e^-8)
        let at_u = posterior_ukd(&fit, 5.0);
        assert!((at_u - 1.0 / (1.0 + (-8.0f64).exp())).abs() < 1e-12);
        assert!(at_u > 0.99);
        assert!(posterior_ukd(&fit, 1.0) < 0.01);
        // monotone in x for equal variances
        let mut prev = 0.0;
        for i in 0..200 {
            let p = posterior_ukd(&fit, -5.0 + i as f64 * 0.075);
            assert!(p >= prev);
            prev = p;
        }
    }

    #[test]
    fn domain_loss_cases() {
        let mut tape = Tape::new();
        let yl = tape.constant(Matrix::column_vector(&[1e-9, 1e-9]));
        let yu = tape.constant(Matrix::column_vector(&[1e-9, 1.0]));
        let loss = domain_loss(&mut tape, yl, yu, &[0.0, 1.0]).unwrap();
        assert!(tape.scalar(loss) <= 1e-5);

        let mut tape = Tape::new();
        let yl = tape.constant(Matrix::column_vector(&[0.5]));
        let yu = tape.constant(Matrix::zeros(0, 1));
        let loss = domain_loss(&mut tape, yl, yu, &[]).unwrap();
        assert!((tape.scalar(loss) - std::f64::consts::LN_2).abs() < 1e-15);

        let mut tape = Tape::new();
        let yl = tape.constant(Matrix::column_vector(&[0.5]));
        let yu = tape.constant(Matrix::column_vector(&[0.5]));
        assert!(domain_loss(&mut tape, yl, yu, &[0.1, 0.2]).is_err());
    }

    #[test]
    fn domain_loss_is_calibrated_at_soft_target() {
        // grid search over scalar yhat: the minimizer sits at w_d
        for &w in &[0.1, 0.37, 0.5, 0.83] {
            let best = (1..1000)
                .map(|i| i as f64 / 1000.0)
                .min_by(|&a, &b| {
                    let la = bce(&[a], &[w], &[1.0]).unwrap();
                    let lb = bce(&[b], &[w], &[1.0]).unwrap();
                    la.total_cmp(&lb)
                })
                .unwrap();
            assert!((best - w).abs() <= 1e-3, "{best} vs {w}");
        }
    }

    #[test]
    fn domain_loss_matches_finite_differences() {
        let mut store = ParameterStore::new();
        let mut rng = stream(5, "p");
        let logits: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
        store.insert("l", Matrix::column_vector(&logits[..3])).unwrap();
        store.insert("u", Matrix::column_vector(&logits[3..])).unwrap();
        let w_d = [0.1, 0.9, 0.5, 0.0];
        let err = fd_check(&mut store, 1e-5, |tape, s| {
            let l = tape.param(s, "l")?;
            let u = tape.param(s, "u")?;
            let yl = tape.sigmoid(l);
            let yu = tape.sigmoid(u);
            domain_loss(tape, yl, yu, &w_d)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn zero_epochs_leave_vae_unchanged() {
        let mut vae = Vae::new(VaeConfig::new(5), &mut stream(0, "v")).unwrap();
        let before = vae.store.clone();
        let cfg = VaeTrainConfig {
            epochs: 0,
            ..VaeTrainConfig::default()
        };
        let trace = pretrain_vae(&mut vae, &Matrix::zeros(10, 5), &cfg, &mut stream(1, "t")).unwrap();
        assert!(trace.is_empty());
        assert_eq!(vae.store, before);
    }

    #[test]
    fn recon_errors_of_identity_autoencoder_vanish() {
        let cfg = VaeConfig {
            input_dim: 2,
            hidden: 2,
            latent_dim: 1,
            kl_weight: 0.0,
        };
        let mut vae = Vae::new(cfg, &mut stream(0, "v")).unwrap();
        zero_prefix(&mut vae.store, "");
        // x = (t, 0) with t >= 0 round-trips through a single latent unit
        vae.store.value_mut("enc.w0").unwrap().set(0, 0, 1.0);
        vae.store.value_mut("enc.w1").unwrap().set(0, 0, 1.0);
        vae.store.value_mut("dec.w0").unwrap().set(0, 0, 1.0);
        vae.store.value_mut("dec.w1").unwrap().set(0, 0, 1.0);
        let xs = Matrix::from_rows(&[[0.5, 0.0], [2.0, 0.0], [1.0, 1.0]], 2).unwrap();
        let e = recon_errors(&vae, &xs).unwrap();
        assert_eq!(e, vec![0.0, 0.0, 1.0]);
        assert_eq!(e, recon_errors(&vae, &xs).unwrap());
    }
}
