//! Feature extractor, classifier, the two domain discriminators and the VAE,
//! all as small multilayer perceptrons sharing one [`ParameterStore`] per
//! model family.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::ops::PROB_EPS;
use crate::numerics::{Matrix, ParameterStore, Tape, Var};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Linear,
    Softmax,
    Sigmoid,
}

/// Layer widths from input to output; hidden layers use ReLU.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub head: Head,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, head: Head) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config("an MLP needs at least two layer sizes".into()));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Config("MLP layer sizes must be positive".into()));
        }
        Ok(MlpSpec { layer_sizes, head })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }
}

/// An MLP whose weights live in a store under `{prefix}.w{i}` / `{prefix}.b{i}`.
#[derive(Clone, Debug)]
pub struct Mlp {
    prefix: String,
    spec: MlpSpec,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, spec: MlpSpec) -> Self {
        Mlp {
            prefix: prefix.into(),
            spec,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    fn weight_name(&self, i: usize) -> String {
        format!("{}.w{}", self.prefix, i)
    }

    fn bias_name(&self, i: usize) -> String {
        format!("{}.b{}", self.prefix, i)
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(&self, store: &mut ParameterStore, rng: &mut Rng) -> Result<()> {
        for (i, pair) in self.spec.layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..=limit))
                .collect();
            store.insert(self.weight_name(i), Matrix::new(fan_in, fan_out, data)?)?;
            store.insert(self.bias_name(i), Matrix::zeros(1, fan_out))?;
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let width = tape.value(x).cols();
        if width != self.spec.input_dim() {
            return Err(Error::shape(
                "mlp input",
                tape.value(x).shape(),
                (tape.value(x).rows(), self.spec.input_dim()),
            ));
        }
        let layers = self.spec.layer_sizes.len() - 1;
        let mut h = x;
        for i in 0..layers {
            let w = tape.param(store, &self.weight_name(i))?;
            let b = tape.param(store, &self.bias_name(i))?;
            h = tape.affine(h, w, b)?;
            if i + 1 < layers {
                h = tape.relu(h);
            }
        }
        Ok(match self.spec.head {
            Head::Linear => h,
            Head::Softmax => tape.softmax_rows(h),
            Head::Sigmoid => {
                let s = tape.sigmoid(h);
                tape.clamp(s, PROB_EPS, 1.0 - PROB_EPS)
            }
        })
    }
}

pub fn zero_prefix(store: &mut ParameterStore, prefix: &str) {
    for (name, p) in store.iter_mut() {
        if name.starts_with(prefix) {
            p.value.fill(0.0);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BundleConfig {
    pub input_dim: usize,
    pub feature_hidden: usize,
    pub feature_dim: usize,
    pub head_hidden: usize,
    pub known_classes: usize,
}

impl BundleConfig {
    pub fn new(input_dim: usize, known_classes: usize) -> Self {
        BundleConfig {
            input_dim,
            feature_hidden: 64,
            feature_dim: 32,
            head_hidden: 16,
            known_classes,
        }
    }
}

pub const FEATURE_PREFIX: &str = "feat.";
pub const CLASSIFIER_PREFIX: &str = "cls.";
pub const ADV_PREFIX: &str = "adv.";
pub const DOM_PREFIX: &str = "dom.";

/// Feature extractor `F`, classifier `C`, adversarial discriminator `D` and
/// non-adversarial discriminator `D'`.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub store: ParameterStore,
    pub config: BundleConfig,
    feature: Mlp,
    classifier: Mlp,
    disc_adv: Mlp,
    disc_dom: Mlp,
}

impl ModelBundle {
    pub fn new(config: BundleConfig, rng: &mut Rng) -> Result<Self> {
        if config.known_classes < 2 {
            return Err(Error::Config("need at least two known classes".into()));
        }
        let c = &config;
        let feature = Mlp::new(
            "feat",
            MlpSpec::new(vec![c.input_dim, c.feature_hidden, c.feature_dim], Head::Linear)?,
        );
        let classifier = Mlp::new(
            "cls",
            MlpSpec::new(vec![c.feature_dim, c.head_hidden, c.known_classes], Head::Softmax)?,
        );
        let disc_adv = Mlp::new(
            "adv",
            MlpSpec::new(vec![c.feature_dim, c.head_hidden, 1], Head::Sigmoid)?,
        );
        let disc_dom = Mlp::new(
            "dom",
            MlpSpec::new(vec![c.feature_dim, c.head_hidden, 1], Head::Sigmoid)?,
        );
        let mut store = ParameterStore::new();
        for m in [&feature, &classifier, &disc_adv, &disc_dom] {
            m.init(&mut store, rng)?;
        }
        Ok(ModelBundle {
            store,
            config,
            feature,
            classifier,
            disc_adv,
            disc_dom,
        })
    }

    /// Features `V = F(x)`. The extractor ends in a ReLU so features are
    /// non-negative like pooled CNN activations.
    pub fn extract(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.feature.forward(tape, &self.store, x)?;
        Ok(tape.relu(h))
    }

    pub fn classify(&self, tape: &mut Tape, v: Var) -> Result<Var> {
        self.classifier.forward(tape, &self.store, v)
    }

    /// `D(v)` with the gradient into `v` reversed and scaled by `lambda`.
    pub fn discriminate_adv(&self, tape: &mut Tape, v: Var, lambda: f64) -> Result<Var> {
        let r = tape.reverse_grad(v, lambda);
        self.disc_adv.forward(tape, &self.store, r)
    }

    pub fn discriminate_dom(&self, tape: &mut Tape, v: Var) -> Result<Var> {
        self.disc_dom.forward(tape, &self.store, v)
    }

    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let v = self.extract(&mut tape, xv)?;
        Ok(tape.value(v).clone())
    }

    pub fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let v = self.extract(&mut tape, xv)?;
        let p = self.classify(&mut tape, v)?;
        Ok(tape.value(p).clone())
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(self.predict_proba(x)?.argmax_rows())
    }

    /// `D'(F(x))` per row.
    pub fn domain_scores(&self, x: &Matrix) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let v = self.extract(&mut tape, xv)?;
        let d = self.discriminate_dom(&mut tape, v)?;
        Ok(tape.value(d).data().to_vec())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub kl_weight: f64,
}

impl VaeConfig {
    pub fn new(input_dim: usize) -> Self {
        VaeConfig {
            input_dim,
            hidden: 32,
            latent_dim: 4,
            kl_weight: 1e-3,
        }
    }
}

/// How the latent code is produced.
pub enum Sampling<'a> {
    /// `z = mu + sigma * eps`, `eps ~ N(0, 1)`.
    Random(&'a mut Rng),
    /// `z = mu`; deterministic.
    Mean,
}

pub struct VaeOutput {
    pub recon: Var,
    /// `n x 1` squared reconstruction errors.
    pub recon_error: Var,
    /// KL to the standard normal prior, averaged over the batch.
    pub kl: Var,
}

/// Encoder `g` emits `(mu, log sigma^2)`; decoder `f` maps `z` back to input space.
#[derive(Clone, Debug)]
pub struct Vae {
    pub store: ParameterStore,
    pub config: VaeConfig,
    encoder: Mlp,
    decoder: Mlp,
}

impl Vae {
    pub fn new(config: VaeConfig, rng: &mut Rng) -> Result<Self> {
        if config.latent_dim >= config.input_dim {
            return Err(Error::Config("VAE latent_dim must be below input_dim".into()));
        }
        if config.kl_weight < 0.0 {
            return Err(Error::Config("VAE kl_weight must be non-negative".into()));
        }
        let encoder = Mlp::new(
            "enc",
            MlpSpec::new(
                vec![config.input_dim, config.hidden, 2 * config.latent_dim],
                Head::Linear,
            )?,
        );
        let decoder = Mlp::new(
            "dec",
            MlpSpec::new(
                vec![config.latent_dim, config.hidden, config.input_dim],
                Head::Linear,
            )?,
        );
        let mut store = ParameterStore::new();
        encoder.init(&mut store, rng)?;
        decoder.init(&mut store, rng)?;
        Ok(Vae {
            store,
            config,
            encoder,
            decoder,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: &Matrix, sampling: Sampling<'_>) -> Result<VaeOutput> {
        let latent = self.config.latent_dim;
        let xv = tape.constant(x.clone());
        let enc = self.encoder.forward(tape, &self.store, xv)?;
        let mu = tape.columns(enc, 0, latent);
        let logvar = tape.columns(enc, latent, 2 * latent);

        let z = match sampling {
            Sampling::Mean => mu,
            Sampling::Random(rng) => {
                let n = x.rows();
                let noise: Vec<f64> = (0..n * latent).map(|_| rng.sample(StandardNormal)).collect();
                let eps = tape.constant(Matrix::new(n, latent, noise)?);
                let half = tape.scale(logvar, 0.5);
                let sigma = tape.exp(half);
                let scaled = tape.mul(sigma, eps)?;
                tape.add(mu, scaled)?
            }
        };
        let recon = self.decoder.forward(tape, &self.store, z)?;
        let diff = tape.sub(xv, recon)?;
        let sq = tape.square(diff);
        let recon_error = tape.row_sums(sq);

        // KL = 1/2 * sum(mu^2 + exp(logvar) - logvar - 1), averaged over rows
        let mu2 = tape.square(mu);
        let var = tape.exp(logvar);
        let t = tape.add(mu2, var)?;
        let t = tape.sub(t, logvar)?;
        let t = tape.add_scalar(t, -1.0);
        let per_row = tape.row_sums(t);
        let mean = tape.mean(per_row);
        let kl = tape.scale(mean, 0.5);

        Ok(VaeOutput {
            recon,
            recon_error,
            kl,
        })
    }

    /// Training objective: mean reconstruction error plus weighted KL.
    pub fn objective(&self, tape: &mut Tape, out: &VaeOutput) -> Result<Var> {
        let re = tape.mean(out.recon_error);
        let kl = tape.scale(out.kl, self.config.kl_weight);
        tape.add(re, kl)
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }
}
