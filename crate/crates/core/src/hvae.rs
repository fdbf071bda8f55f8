//! Ladder HVAE: bottom-up inference with skip connections, top-down
//! generation, ELBO / free-bits training, IWAE and the prior-substituted
//! bound `L^{>k}`.
//!
//! Every block is a two-layer MLP over flattened features. Encoder `i` sees
//! `concat[level_{i-1}, level_{i-2}]` where `level_0 = x` and `level_j = z_j`.
//! Prior block `i` (for `i < L`) sees `concat[z_{i+1}, z_{i+2}]`, the decoder
//! sees `concat[z_1, z_2]`, and `p(z_L)` is standard normal.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{preprocess, Dataset};
use crate::likelihoods::{gaussian_kl, gaussian_logp, std_normal_logp, DecoderKind, DecoderParams};
use crate::numerics::{NumericsError, SeededRng, Stream, Tape, Tensor, Var};

/// Lower clamp on decoder log-scales.
pub const LOG_SCALE_FLOOR: f64 = -7.0;

#[derive(Debug, Error)]
pub enum HvaeError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("layer index {k} outside 0..={layers}")]
    LayerOutOfRange { k: usize, layers: usize },
    #[error("input width {found} does not match the configured {expected} pixels")]
    InputShape { expected: usize, found: usize },
    #[error("non-finite {term} at epoch {epoch}, step {step}")]
    NonFinite { term: String, epoch: usize, step: usize },
    #[error("training data is empty")]
    EmptyData,
    #[error("parameter `{name}`: expected shape {expected:?}, found {found:?}")]
    ParamShape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("expected {expected} parameter tensors, found {found}")]
    ParamCount { expected: usize, found: usize },
}

type Result<T> = std::result::Result<T, HvaeError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Softplus,
    Identity,
}

impl Activation {
    fn apply(self, v: Var<'_>) -> Var<'_> {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Softplus => v.softplus(),
            Activation::Identity => v,
        }
    }
}

fn default_hidden() -> usize {
    128
}

fn default_free_bits() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HvaeConfig {
    /// `l_1..l_L`, bottom first.
    pub layer_dims: Vec<usize>,
    /// `(H, W, C)`.
    pub input_shape: [usize; 3],
    #[serde(default = "default_hidden")]
    pub hidden_width: usize,
    pub decoder: DecoderKind,
    /// Per-layer KL floor in nats.
    #[serde(default = "default_free_bits")]
    pub free_bits: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub activation: Activation,
    /// Gaussian / logistic scales become free per-pixel parameters instead
    /// of decoder outputs.
    #[serde(default)]
    pub shared_scale: bool,
}

impl HvaeConfig {
    pub fn new(layer_dims: Vec<usize>, input_shape: [usize; 3], decoder: DecoderKind) -> Self {
        HvaeConfig {
            layer_dims,
            input_shape,
            hidden_width: default_hidden(),
            decoder,
            free_bits: default_free_bits(),
            seed: 0,
            activation: Activation::default(),
            shared_scale: false,
        }
    }

    pub fn layers(&self) -> usize {
        self.layer_dims.len()
    }

    pub fn pixels(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HvaeError::Config(m.to_string()));
        if self.layer_dims.is_empty() {
            return bad("at least one latent layer is required");
        }
        if self.layer_dims.contains(&0) {
            return bad("layer dims must be >= 1");
        }
        if self.input_shape.contains(&0) {
            return bad("input shape entries must be >= 1");
        }
        if self.hidden_width == 0 {
            return bad("hidden_width must be >= 1");
        }
        if !(self.free_bits >= 0.0 && self.free_bits.is_finite()) {
            return bad("free_bits must be a finite non-negative number");
        }
        self.decoder.validate()?;
        Ok(())
    }

    fn uses_shared_scale(&self) -> bool {
        self.shared_scale && matches!(self.decoder, DecoderKind::Gaussian | DecoderKind::DiscretizedLogistic)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    first: usize,
    input: usize,
    heads: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    encoders: Vec<Block>,
    priors: Vec<Block>,
    decoder: Block,
    log_scale: Option<usize>,
}

/// Weights of a ladder HVAE plus the config that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct HvaeParams {
    config: HvaeConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    layout: Layout,
}

/// One entry of the parameter manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

fn level_width(cfg: &HvaeConfig, j: usize) -> usize {
    if j == 0 {
        cfg.pixels()
    } else {
        cfg.layer_dims[j - 1]
    }
}

fn plan(cfg: &HvaeConfig) -> (Vec<ParamSpec>, Layout) {
    let h = cfg.hidden_width;
    let mut specs = Vec::new();
    let block = |specs: &mut Vec<ParamSpec>, prefix: String, input: usize, heads: Vec<usize>| {
        let first = specs.len();
        let mut push = |n: String, s: Vec<usize>| specs.push(ParamSpec { name: n, shape: s });
        push(format!("{prefix}.fc1.w"), vec![input, h]);
        push(format!("{prefix}.fc1.b"), vec![h]);
        push(format!("{prefix}.fc2.w"), vec![h, h]);
        push(format!("{prefix}.fc2.b"), vec![h]);
        for (j, &w) in heads.iter().enumerate() {
            let head = match (heads.len(), j) {
                (1, _) => "out".to_string(),
                (_, 0) => "mu".to_string(),
                _ => "log_sigma".to_string(),
            };
            push(format!("{prefix}.{head}.w"), vec![h, w]);
            push(format!("{prefix}.{head}.b"), vec![w]);
        }
        Block { first, input, heads }
    };
    let l = cfg.layers();
    let encoders = (1..=l)
        .map(|i| {
            let input = level_width(cfg, i - 1) + if i >= 2 { level_width(cfg, i - 2) } else { 0 };
            let d = cfg.layer_dims[i - 1];
            block(&mut specs, format!("enc{i}"), input, vec![d, d])
        })
        .collect();
    let priors = (1..l)
        .map(|i| {
            let input = cfg.layer_dims[i] + if i + 2 <= l { cfg.layer_dims[i + 1] } else { 0 };
            let d = cfg.layer_dims[i - 1];
            block(&mut specs, format!("prior{i}"), input, vec![d, d])
        })
        .collect();
    let dec_in = cfg.layer_dims[0] + if l >= 2 { cfg.layer_dims[1] } else { 0 };
    let decoder = block(&mut specs, "dec".into(), dec_in, vec![cfg.decoder.output_width(cfg.pixels(), cfg.uses_shared_scale())]);
    let log_scale = cfg.uses_shared_scale().then(|| {
        specs.push(ParamSpec { name: "dec.log_scale".into(), shape: vec![cfg.pixels()] });
        specs.len() - 1
    });
    (specs, Layout { encoders, priors, decoder, log_scale })
}

/// Standard-normal draws for every layer on both paths, `[rows, l_i]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    pub posterior: Vec<Tensor>,
    pub prior: Vec<Tensor>,
}

impl Noise {
    pub fn draw(layer_dims: &[usize], rows: usize, rng: &mut SeededRng) -> Noise {
        let mut post = rng.split(Stream::Posterior);
        let mut prior = rng.split(Stream::Prior);
        Noise {
            posterior: layer_dims.iter().map(|&d| post.normal_tensor(&[rows, d])).collect(),
            prior: layer_dims.iter().map(|&d| prior.normal_tensor(&[rows, d])).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.posterior[0].shape()[0]
    }

    /// Noise restricted to the given rows (repeats allowed).
    pub fn select(&self, rows: &[usize]) -> Noise {
        let pick = |t: &Tensor| {
            let d = t.shape()[1];
            let mut data = Vec::with_capacity(rows.len() * d);
            for &r in rows {
                data.extend_from_slice(t.row(r));
            }
            Tensor::new(&[rows.len(), d], data).expect("noise rows")
        };
        Noise { posterior: self.posterior.iter().map(pick).collect(), prior: self.prior.iter().map(pick).collect() }
    }
}

/// Posterior statistics and sample for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPosterior {
    pub mu: Tensor,
    pub log_sigma: Tensor,
    pub z: Tensor,
}

/// Batch-mean ELBO decomposition. `elbo == recon - sum(kl_per_layer)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub recon: f64,
    pub kl_per_layer: Vec<f64>,
    pub elbo: f64,
    /// Training objective: `elbo` with each layer's KL floored at the free
    /// bits when requested.
    pub objective: f64,
    /// Per-example `recon - sum(kl)`.
    pub per_example: Vec<f64>,
    /// Per-example single-sample importance weight `log p(x, z) - log q(z | x)`.
    pub log_weights: Vec<f64>,
}

struct Pass<'t> {
    recon: Var<'t>,
    kl: Vec<Option<Var<'t>>>,
    /// `log p(z_i | z_{>i})` for every layer.
    log_p: Vec<Var<'t>>,
    log_q: Vec<Option<Var<'t>>>,
    q: Vec<Option<(Var<'t>, Var<'t>)>>,
    z: Vec<Var<'t>>,
    dec: DecoderParams<'t>,
}

impl<'t> Pass<'t> {
    /// `log p(x|z) + sum_{posterior layers} [log p(z_i|.) - log q(z_i|.)]`.
    fn log_weight(&self) -> Result<Var<'t>> {
        let mut w = self.recon;
        for (lp, lq) in self.log_p.iter().zip(&self.log_q) {
            if let Some(lq) = lq {
                w = w.add(lp.sub(*lq)?)?;
            }
        }
        Ok(w)
    }
}

impl HvaeParams {
    /// Fan-in scaled normal weights, zero biases; deterministic in `rng`.
    pub fn build(config: &HvaeConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = plan(config);
        let mut init = rng.split(Stream::Init);
        let tensors = specs
            .iter()
            .map(|s| {
                if s.shape.len() == 2 {
                    let mut std = 1.0 / (s.shape[0] as f64).sqrt();
                    if s.name.contains("log_sigma") {
                        std *= 0.1;
                    }
                    Tensor::from_fn(&s.shape, |_| std * init.normal())
                } else {
                    Tensor::zeros(&s.shape)
                }
            })
            .collect();
        Ok(HvaeParams { config: config.clone(), names: specs.into_iter().map(|s| s.name).collect(), tensors, layout })
    }

    /// Reassembles parameters from a manifest-ordered tensor list.
    pub fn from_tensors(config: &HvaeConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = plan(config);
        if specs.len() != tensors.len() {
            return Err(HvaeError::ParamCount { expected: specs.len(), found: tensors.len() });
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(HvaeError::ParamShape { name: s.name.clone(), expected: s.shape.clone(), found: t.shape().to_vec() });
            }
        }
        Ok(HvaeParams { config: config.clone(), names: specs.into_iter().map(|s| s.name).collect(), tensors, layout })
    }

    pub fn config(&self) -> &HvaeConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn manifest(&self) -> Vec<ParamSpec> {
        self.names.iter().zip(&self.tensors).map(|(n, t)| ParamSpec { name: n.clone(), shape: t.shape().to_vec() }).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn layers(&self) -> usize {
        self.config.layers()
    }

    /// Binds the parameters to `tape` as constants.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Binds the parameters to `tape` as differentiable leaves.
    pub fn bind_params<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Accepts `[B, pixels]` or `[B, H, W, C]` input.
    pub fn flatten_input(&self, x: &Tensor) -> Result<Tensor> {
        let p = self.config.pixels();
        let shape = x.shape();
        let ok = match shape.len() {
            2 => shape[1] == p,
            4 => shape[1..] == self.config.input_shape,
            _ => false,
        };
        if !ok || shape[0] == 0 {
            let found = if shape.is_empty() { 0 } else { shape[1..].iter().product() };
            return Err(HvaeError::InputShape { expected: p, found });
        }
        Ok(x.clone().reshaped(&[shape[0], p])?)
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k > self.layers() {
            return Err(HvaeError::LayerOutOfRange { k, layers: self.layers() });
        }
        Ok(())
    }

    fn check_noise(&self, noise: &Noise, rows: usize) -> Result<()> {
        let dims = &self.config.layer_dims;
        let fits = |ts: &[Tensor]| ts.len() == dims.len() && ts.iter().zip(dims).all(|(t, &d)| t.shape() == [rows, d]);
        if !fits(&noise.posterior) || !fits(&noise.prior) {
            return Err(HvaeError::Config(format!("noise does not match {rows} rows of dims {dims:?}")));
        }
        Ok(())
    }

    fn block<'t>(&self, vars: &[Var<'t>], b: &Block, input: Var<'t>) -> Result<Vec<Var<'t>>> {
        let act = self.config.activation;
        let f = b.first;
        let h1 = act.apply(input.matmul(vars[f])?.add(vars[f + 1])?);
        let h2 = act.apply(h1.matmul(vars[f + 2])?.add(vars[f + 3])?);
        (0..b.heads.len()).map(|j| Ok(h2.matmul(vars[f + 4 + 2 * j])?.add(vars[f + 5 + 2 * j])?)).collect()
    }

    fn concat_pair<'t>(a: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
        Ok(match b {
            Some(b) => a.tape().concat(&[a, b], 1)?,
            None => a,
        })
    }

    fn decoder_params<'t>(&self, vars: &[Var<'t>], z: &[Var<'t>]) -> Result<DecoderParams<'t>> {
        let input = Self::concat_pair(z[0], z.get(1).copied())?;
        let out = self.block(vars, &self.layout.decoder, input)?[0];
        let d = self.config.pixels();
        let b = out.shape()[0];
        let scale = |v: Var<'t>| v.clamp_min(LOG_SCALE_FLOOR);
        Ok(match self.config.decoder {
            DecoderKind::Bernoulli => DecoderParams::Bernoulli { logits: out },
            DecoderKind::Gaussian | DecoderKind::DiscretizedLogistic => {
                let (mu, ls) = match self.layout.log_scale {
                    Some(i) => (out, scale(vars[i])),
                    None => (out.slice(1, 0, d)?, scale(out.slice(1, d, d)?)),
                };
                if self.config.decoder == DecoderKind::Gaussian {
                    DecoderParams::Gaussian { mu, log_sigma: ls }
                } else {
                    DecoderParams::Logistic { mu, log_s: ls }
                }
            }
            DecoderKind::MixtureLogistic { components: k } => {
                let part = |j: usize| out.slice(1, j * k * d, k * d)?.reshape(&[b, k, d]);
                DecoderParams::Mixture { logits: part(0)?, mu: part(1)?, log_s: scale(part(2)?) }
            }
        })
    }

    /// Prior parameters of layer `i` (1-based) given the final latents above.
    fn prior_params<'t>(&self, vars: &[Var<'t>], z: &[Option<Var<'t>>], i: usize, rows: usize) -> Result<(Var<'t>, Var<'t>)> {
        let l = self.layers();
        if i == l {
            let tape = vars[0].tape();
            let zero = tape.constant(Tensor::zeros(&[rows, self.config.layer_dims[l - 1]]));
            return Ok((zero, zero));
        }
        let above = z[i].expect("layer above resolved");
        let skip = if i + 2 <= l { Some(z[i + 1].expect("skip resolved")) } else { None };
        let heads = self.block(vars, &self.layout.priors[i - 1], Self::concat_pair(above, skip)?)?;
        Ok((heads[0], heads[1]))
    }

    /// Runs the model with layer `i` drawn from the posterior when
    /// `posterior[i - 1]` holds and from the top-down prior otherwise.
    fn pass<'t>(&self, vars: &[Var<'t>], x: Var<'t>, posterior: &[bool], noise: &Noise) -> Result<Pass<'t>> {
        let l = self.layers();
        let rows = x.shape()[0];
        let tape = x.tape();
        let top_post = posterior.iter().rposition(|&p| p).map_or(0, |i| i + 1);

        // bottom-up chain; every layer up to the highest posterior layer
        let mut q: Vec<Option<(Var<'t>, Var<'t>)>> = vec![None; l];
        let mut chain: Vec<Var<'t>> = vec![x];
        for i in 1..=top_post {
            let skip = if i >= 2 { Some(chain[i - 2]) } else { None };
            let heads = self.block(vars, &self.layout.encoders[i - 1], Self::concat_pair(chain[i - 1], skip)?)?;
            let eps = tape.constant(noise.posterior[i - 1].clone());
            chain.push(heads[0].add(heads[1].exp().mul(eps)?)?);
            q[i - 1] = Some((heads[0], heads[1]));
        }

        // top-down resolution of the final latents
        let mut z: Vec<Option<Var<'t>>> = vec![None; l];
        let mut p: Vec<Option<(Var<'t>, Var<'t>)>> = vec![None; l];
        for i in (1..=l).rev() {
            let (mu_p, ls_p) = self.prior_params(vars, &z, i, rows)?;
            p[i - 1] = Some((mu_p, ls_p));
            z[i - 1] = Some(if posterior[i - 1] {
                chain[i]
            } else {
                let eps = tape.constant(noise.prior[i - 1].clone());
                mu_p.add(ls_p.exp().mul(eps)?)?
            });
        }
        let z: Vec<Var<'t>> = z.into_iter().map(|v| v.expect("resolved")).collect();

        let dec = self.decoder_params(vars, &z)?;
        let recon = dec.log_prob(x)?;
        let mut kl = vec![None; l];
        let mut log_q = vec![None; l];
        let mut log_p = Vec::with_capacity(l);
        for i in 0..l {
            let (mu_p, ls_p) = p[i].expect("prior resolved");
            log_p.push(if i + 1 == l { std_normal_logp(z[i])? } else { gaussian_logp(z[i], mu_p, ls_p)? });
            if posterior[i] {
                let (mu_q, ls_q) = q[i].expect("posterior resolved");
                kl[i] = Some(gaussian_kl(mu_q, ls_q, mu_p, ls_p)?);
                log_q[i] = Some(gaussian_logp(z[i], mu_q, ls_q)?);
            }
        }
        Ok(Pass { recon, kl, log_p, log_q, q, z, dec })
    }

    fn gt_k_mask(&self, k: usize) -> Vec<bool> {
        (1..=self.layers()).map(|i| i <= k).collect()
    }

    /// Negative training objective as a scalar on `vars`' tape.
    pub fn training_loss<'t>(&self, vars: &[Var<'t>], x: Var<'t>, noise: &Noise, free_bits: f64) -> Result<Var<'t>> {
        let pass = self.pass(vars, x, &self.gt_k_mask(self.layers()), noise)?;
        Ok(objective(&pass, free_bits)?.1.neg())
    }

    /// Per-layer posterior statistics and samples.
    pub fn infer(&self, x: &Tensor, rng: &mut SeededRng) -> Result<Vec<LayerPosterior>> {
        let x = self.flatten_input(x)?;
        let noise = Noise::draw(&self.config.layer_dims, x.shape()[0], rng);
        self.infer_with_noise(&x, &noise)
    }

    pub fn infer_with_noise(&self, x: &Tensor, noise: &Noise) -> Result<Vec<LayerPosterior>> {
        let x = self.flatten_input(x)?;
        self.check_noise(noise, x.shape()[0])?;
        let tape = Tape::new();
        let vars = self.bind(&tape);
        let pass = self.pass(&vars, tape.constant(x), &self.gt_k_mask(self.layers()), noise)?;
        Ok(pass
            .q
            .iter()
            .zip(&pass.z)
            .map(|(q, z)| {
                let (mu, ls) = q.expect("all layers posterior");
                LayerPosterior { mu: (*mu.value()).clone(), log_sigma: (*ls.value()).clone(), z: (*z.value()).clone() }
            })
            .collect())
    }

    pub fn elbo(&self, x: &Tensor, rng: &mut SeededRng, use_free_bits: bool) -> Result<ElboTerms> {
        let x = self.flatten_input(x)?;
        let noise = Noise::draw(&self.config.layer_dims, x.shape()[0], rng);
        let fb = if use_free_bits { self.config.free_bits } else { 0.0 };
        self.terms_with_noise(&x, self.layers(), &noise, fb)
    }

    /// ELBO with `z_{<=k}` from the posterior path and `z_{>k}` from the
    /// prior path; KL is zero above `k`.
    pub fn elbo_gt_k(&self, x: &Tensor, k: usize, rng: &mut SeededRng) -> Result<ElboTerms> {
        self.check_k(k)?;
        let x = self.flatten_input(x)?;
        let noise = Noise::draw(&self.config.layer_dims, x.shape()[0], rng);
        self.terms_with_noise(&x, k, &noise, 0.0)
    }

    pub fn terms_with_noise(&self, x: &Tensor, k: usize, noise: &Noise, free_bits: f64) -> Result<ElboTerms> {
        self.check_k(k)?;
        let x = self.flatten_input(x)?;
        self.check_noise(noise, x.shape()[0])?;
        let tape = Tape::new();
        let vars = self.bind(&tape);
        let pass = self.pass(&vars, tape.constant(x), &self.gt_k_mask(k), noise)?;
        let (terms, _) = objective(&pass, free_bits)?;
        Ok(terms)
    }

    /// Per-example IWAE estimate of `log p(x)` with `samples` importance
    /// samples.
    pub fn iwae_bound(&self, x: &Tensor, samples: usize, rng: &mut SeededRng) -> Result<Vec<f64>> {
        self.iwae_gt_k(x, self.layers(), samples, rng)
    }

    /// IWAE estimate of `L^{>k}`: the prior path above `k` acts as its own
    /// proposal, so only layers `<= k` contribute density ratios.
    pub fn iwae_gt_k(&self, x: &Tensor, k: usize, samples: usize, rng: &mut SeededRng) -> Result<Vec<f64>> {
        let x = self.flatten_input(x)?;
        let noise = Noise::draw(&self.config.layer_dims, x.shape()[0] * samples.max(1), rng);
        self.iwae_with_noise(&x, k, samples, &noise)
    }

    /// `noise` has `B * samples` rows, example-major.
    pub fn iwae_with_noise(&self, x: &Tensor, k: usize, samples: usize, noise: &Noise) -> Result<Vec<f64>> {
        self.check_k(k)?;
        if samples == 0 {
            return Err(HvaeError::Config("importance sample count must be >= 1".into()));
        }
        let x = self.flatten_input(x)?;
        let b = x.shape()[0];
        self.check_noise(noise, b * samples)?;
        let tape = Tape::new();
        let vars = self.bind(&tape);
        let xs = tape.constant(x).repeat(1, samples)?.reshape(&[b * samples, self.config.pixels()])?;
        let pass = self.pass(&vars, xs, &self.gt_k_mask(k), noise)?;
        let lw = pass.log_weight()?.reshape(&[b, samples])?;
        let ln_k = (samples as f64).ln();
        Ok(lw.logsumexp_axis(1)?.value().data().iter().map(|v| v - ln_k).collect())
    }

    /// Decoder mean with the bottom `k` latents from the posterior and the
    /// rest from the prior.
    pub fn reconstruct_gt_k(&self, x: &Tensor, k: usize, rng: &mut SeededRng) -> Result<Tensor> {
        self.check_k(k)?;
        let flat = self.flatten_input(x)?;
        let noise = Noise::draw(&self.config.layer_dims, flat.shape()[0], rng);
        let tape = Tape::new();
        let vars = self.bind(&tape);
        let pass = self.pass(&vars, tape.constant(flat), &self.gt_k_mask(k), &noise)?;
        Ok(pass.dec.mean()?.reshaped(x.shape())?)
    }

    /// Decoder mean for given bottom latents (`z_1`, plus `z_2` when `L >= 2`).
    pub fn decode_mean(&self, z: &[Tensor]) -> Result<Tensor> {
        let need = self.layers().min(2);
        if z.len() != need {
            return Err(HvaeError::Config(format!("decode_mean takes {need} latent tensors, got {}", z.len())));
        }
        let tape = Tape::new();
        let vars = self.bind(&tape);
        let zs: Vec<Var<'_>> = z.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(self.decoder_params(&vars, &zs)?.mean()?)
    }

    /// The three per-example mutual-information terms for layer `i`:
    /// `(log p(x|z) + log p(z_i), elbo, log p(z_i))` where `z_i` comes from
    /// the posterior and every other layer from the prior. The ELBO shares
    /// the posterior noise.
    pub fn mi_terms(&self, x: &Tensor, i: usize, noise: &Noise) -> Result<Vec<[f64; 3]>> {
        if i == 0 || i > self.layers() {
            return Err(HvaeError::LayerOutOfRange { k: i, layers: self.layers() });
        }
        let x = self.flatten_input(x)?;
        self.check_noise(noise, x.shape()[0])?;
        let tape = Tape::new();
        let vars = self.bind(&tape);
        let xv = tape.constant(x);
        let mask: Vec<bool> = (1..=self.layers()).map(|j| j == i).collect();
        let joint = self.pass(&vars, xv, &mask, noise)?;
        let full = self.pass(&vars, xv, &self.gt_k_mask(self.layers()), noise)?;
        let (terms, _) = objective(&full, 0.0)?;
        let rec = joint.recon.value();
        let lp = joint.log_p[i - 1].value();
        Ok((0..rec.len()).map(|b| [rec.data()[b] + lp.data()[b], terms.per_example[b], lp.data()[b]]).collect())
    }
}

/// ELBO terms and the (free-bits) objective as a differentiable scalar.
fn objective<'t>(pass: &Pass<'t>, free_bits: f64) -> Result<(ElboTerms, Var<'t>)> {
    let recon_mean = pass.recon.mean();
    let mut obj = recon_mean;
    let mut kl_per_layer = Vec::with_capacity(pass.kl.len());
    let mut per_example: Vec<f64> = pass.recon.value().data().to_vec();
    for kl in &pass.kl {
        match kl {
            Some(kl) => {
                let m = kl.mean();
                kl_per_layer.push(m.item());
                let floored = if free_bits > 0.0 { m.clamp_min(free_bits) } else { m };
                obj = obj.sub(floored)?;
                for (e, v) in per_example.iter_mut().zip(kl.value().data()) {
                    *e -= v;
                }
            }
            None => kl_per_layer.push(0.0),
        }
    }
    let recon = recon_mean.item();
    let terms = ElboTerms {
        recon,
        elbo: recon - kl_per_layer.iter().sum::<f64>(),
        kl_per_layer,
        objective: obj.item(),
        per_example,
        log_weights: pass.log_weight()?.value().data().to_vec(),
    };
    Ok((terms, obj))
}

fn default_lr() -> f64 {
    3e-4
}
fn default_batch() -> usize {
    128
}
fn default_epochs() -> usize {
    10
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

/// Optimizer settings. `free_bits` here overrides the model config when set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
    #[serde(default)]
    pub free_bits: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: default_lr(),
            batch: default_batch(),
            epochs: default_epochs(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
            free_bits: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_elbo: f64,
    pub mean_objective: f64,
    pub kl_per_layer: Vec<f64>,
}

/// Adam state plus the parameters it updates; checkpointable so training
/// resumes bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub params: HvaeParams,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub epoch: usize,
    pub history: Vec<EpochStats>,
}

impl Trainer {
    pub fn new(params: HvaeParams) -> Self {
        let zeros: Vec<Tensor> = params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Trainer { params, m: zeros.clone(), v: zeros, step: 0, epoch: 0, history: Vec::new() }
    }

    /// One pass over `data` (`[N, pixels]` or `[N, H, W, C]`) in shuffled
    /// minibatches.
    pub fn run_epoch(&mut self, data: &Tensor, hyper: &TrainConfig, rng: &mut SeededRng) -> Result<EpochStats> {
        let data = self.params.flatten_input(data).map_err(|e| match e {
            HvaeError::InputShape { found: 0, .. } => HvaeError::EmptyData,
            e => e,
        })?;
        let n = data.shape()[0];
        if hyper.batch == 0 {
            return Err(HvaeError::Config("batch size must be >= 1".into()));
        }
        let fb = hyper.free_bits.unwrap_or(self.params.config.free_bits);
        let p = self.params.config.pixels();
        let l = self.params.layers();
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let (mut elbo_sum, mut obj_sum, mut kl_sum) = (0.0, 0.0, vec![0.0; l]);
        for (s, chunk) in order.chunks(hyper.batch).enumerate() {
            let mut xb = Vec::with_capacity(chunk.len() * p);
            for &i in chunk {
                xb.extend_from_slice(data.row(i));
            }
            let xb = Tensor::new(&[chunk.len(), p], xb)?;
            let noise = Noise::draw(&self.params.config.layer_dims, chunk.len(), rng);
            let tape = Tape::new();
            let vars = self.params.bind_params(&tape);
            let pass = self.params.pass(&vars, tape.constant(xb), &vec![true; l], &noise)?;
            let (terms, obj) = objective(&pass, fb)?;
            let fail = |term: String| HvaeError::NonFinite { term, epoch: self.epoch, step: s };
            if !terms.recon.is_finite() {
                return Err(fail("reconstruction log-likelihood".into()));
            }
            if let Some(i) = terms.kl_per_layer.iter().position(|v| !v.is_finite()) {
                return Err(fail(format!("KL of layer {}", i + 1)));
            }
            let grads = tape.backward(obj.neg())?;
            if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
                return Err(fail(format!("gradient of {}", self.params.names[i])));
            }
            self.adam_step(&grads, hyper);
            let w = chunk.len() as f64;
            elbo_sum += terms.elbo * w;
            obj_sum += terms.objective * w;
            for (a, b) in kl_sum.iter_mut().zip(&terms.kl_per_layer) {
                *a += b * w;
            }
        }
        let nf = n as f64;
        self.epoch += 1;
        let stats = EpochStats {
            epoch: self.epoch,
            mean_elbo: elbo_sum / nf,
            mean_objective: obj_sum / nf,
            kl_per_layer: kl_sum.into_iter().map(|v| v / nf).collect(),
        };
        self.history.push(stats.clone());
        Ok(stats)
    }

    /// One epoch on a fresh preprocessing draw of `ds` (dynamic binarization
    /// or dequantization, depending on the decoder).
    pub fn run_epoch_dataset(&mut self, ds: &Dataset, hyper: &TrainConfig, rng: &mut SeededRng) -> Result<EpochStats> {
        let mut prep = rng.split(Stream::Data);
        let data = preprocess(ds, self.params.config.decoder, &mut prep).tensor();
        self.run_epoch(&data, hyper, rng)
    }

    fn adam_step(&mut self, grads: &[Tensor], hyper: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (hyper.beta1, hyper.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for ((p, g), (m, v)) in self.params.tensors.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                p[j] -= hyper.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + hyper.eps);
            }
        }
    }
}

/// Trains for `hyper.epochs` epochs.
pub fn train(params: HvaeParams, data: &Tensor, hyper: &TrainConfig, rng: &mut SeededRng) -> Result<(HvaeParams, Vec<EpochStats>)> {
    let mut trainer = Trainer::new(params);
    for _ in 0..hyper.epochs {
        trainer.run_epoch(data, hyper, rng)?;
    }
    Ok((trainer.params, trainer.history))
}

/// Trains on `ds`, re-preprocessing it every epoch.
pub fn train_dataset(params: HvaeParams, ds: &Dataset, hyper: &TrainConfig, rng: &mut SeededRng) -> Result<(HvaeParams, Vec<EpochStats>)> {
    let mut trainer = Trainer::new(params);
    for _ in 0..hyper.epochs {
        trainer.run_epoch_dataset(ds, hyper, rng)?;
    }
    Ok((trainer.params, trainer.history))
}
