//! TOML run and sweep configuration. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hvae_core::alloc::{allocate, find_control, AllocationPlan};
use hvae_core::hvae::{Activation, HvaeConfig, TrainConfig};
use hvae_core::likelihoods::DecoderKind;

use crate::error::CliError;

/// Exactly one of `{budget, depth, ratio}`, `dims` or `control`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocationSpec {
    pub budget: Option<usize>,
    pub depth: Option<usize>,
    pub ratio: Option<f64>,
    pub dims: Option<Vec<usize>>,
    /// e.g. `grayscale:Stable`.
    pub control: Option<String>,
}

/// A resolved allocation: label used in reports, dims, and the ratio when
/// the plan came from the geometric rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedAllocation {
    pub label: String,
    pub dims: Vec<usize>,
    pub ratio: Option<f64>,
    pub budget: usize,
}

impl AllocationSpec {
    pub fn resolve(&self) -> Result<ResolvedAllocation, CliError> {
        let geometric = self.budget.is_some() || self.depth.is_some() || self.ratio.is_some();
        let sources = [geometric, self.dims.is_some(), self.control.is_some()].iter().filter(|&&b| b).count();
        if sources != 1 {
            return Err(CliError::Config(
                "allocation needs exactly one source: {budget, depth, ratio}, dims, or control".into(),
            ));
        }
        let plan: AllocationPlan = if geometric {
            match (self.budget, self.depth, self.ratio) {
                (Some(b), Some(n), Some(r)) => allocate(b, n, r)?,
                _ => return Err(CliError::Config("geometric allocation needs budget, depth and ratio".into())),
            }
        } else if let Some(dims) = &self.dims {
            if dims.is_empty() || dims.contains(&0) {
                return Err(CliError::Config("explicit dims must be non-empty and >= 1".into()));
            }
            AllocationPlan::explicit(dims.clone())
        } else {
            let c = find_control(self.control.as_deref().unwrap_or_default())?;
            AllocationPlan::explicit(c.dims)
        };
        Ok(ResolvedAllocation { label: plan.label(), dims: plan.dims.clone(), ratio: plan.ratio, budget: plan.budget })
    }
}

/// Synthetic generator reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRef {
    pub generator: String,
    pub n: usize,
    /// `[H, W, C]`.
    pub shape: [usize; 3],
    pub seed: u64,
}

/// Where a dataset comes from: an IDX file, a named dataset under the data
/// root, or a synthetic generator.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataRef {
    /// Report label; defaults to the dataset or generator name.
    pub name: Option<String>,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Named dataset under `$HVAE_DATA_ROOT/<dataset>/`.
    pub dataset: Option<String>,
    pub split: Option<String>,
    pub synthetic: Option<SynthRef>,
}

impl DataRef {
    pub fn label(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        if let Some(d) = &self.dataset {
            return d.clone();
        }
        if let Some(s) = &self.synthetic {
            return s.generator.clone();
        }
        self.images
            .as_ref()
            .and_then(|p| p.file_name())
            .map(|f| f.to_string_lossy().split('.').next().unwrap_or_default().to_string())
            .unwrap_or_else(|| "data".into())
    }

    /// Parses a command-line data argument: `synth:<generator>:<n>:<HxWxC>:<seed>`,
    /// `data:<name>:<split>`, or a file path.
    pub fn parse_arg(arg: &str) -> Result<DataRef, CliError> {
        let usage = |m: &str| CliError::Usage(format!("bad data argument `{arg}`: {m}"));
        if let Some(rest) = arg.strip_prefix("synth:") {
            let parts: Vec<&str> = rest.split(':').collect();
            if parts.len() != 4 {
                return Err(usage("expected synth:<generator>:<n>:<HxWxC>:<seed>"));
            }
            let n = parts[1].parse().map_err(|_| usage("n is not an integer"))?;
            let dims: Vec<usize> = parts[2].split('x').map(str::parse).collect::<Result<_, _>>().map_err(|_| usage("bad shape"))?;
            let shape: [usize; 3] = dims.try_into().map_err(|_| usage("shape needs three entries"))?;
            let seed = parts[3].parse().map_err(|_| usage("seed is not an integer"))?;
            return Ok(DataRef {
                synthetic: Some(SynthRef { generator: parts[0].to_string(), n, shape, seed }),
                ..DataRef::default()
            });
        }
        if let Some(rest) = arg.strip_prefix("data:") {
            let (name, split) = rest.split_once(':').ok_or_else(|| usage("expected data:<name>:<split>"))?;
            return Ok(DataRef { dataset: Some(name.into()), split: Some(split.into()), ..DataRef::default() });
        }
        Ok(DataRef { images: Some(arg.into()), ..DataRef::default() })
    }

    pub(crate) fn validate(&self) -> Result<(), CliError> {
        let sources = [self.images.is_some(), self.dataset.is_some(), self.synthetic.is_some()].iter().filter(|&&b| b).count();
        if sources != 1 {
            return Err(CliError::Config(format!(
                "data reference `{}` needs exactly one of images, dataset, synthetic",
                self.label()
            )));
        }
        if self.labels.is_some() && self.images.is_none() {
            return Err(CliError::Config("labels requires images".into()));
        }
        if self.split.is_some() && self.dataset.is_none() {
            return Err(CliError::Config("split requires dataset".into()));
        }
        Ok(())
    }

    /// Resolves relative file paths against `base`.
    pub(crate) fn rebase(&mut self, base: &Path) {
        for p in [&mut self.images, &mut self.labels].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub train: DataRef,
    /// Held-out in-distribution evaluation set.
    pub id: DataRef,
    #[serde(default)]
    pub ood: Vec<DataRef>,
}

fn default_hidden() -> usize {
    128
}
fn default_decoder() -> DecoderKind {
    DecoderKind::Bernoulli
}
fn default_free_bits() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_hidden")]
    pub hidden_width: usize,
    #[serde(default = "default_decoder")]
    pub decoder: DecoderKind,
    #[serde(default = "default_free_bits")]
    pub free_bits: f64,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub shared_scale: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            hidden_width: default_hidden(),
            decoder: default_decoder(),
            free_bits: default_free_bits(),
            activation: Activation::default(),
            shared_scale: false,
        }
    }
}

impl ModelSpec {
    pub fn hvae_config(&self, dims: Vec<usize>, input_shape: [usize; 3], seed: u64) -> HvaeConfig {
        HvaeConfig {
            layer_dims: dims,
            input_shape,
            hidden_width: self.hidden_width,
            decoder: self.decoder,
            free_bits: self.free_bits,
            seed,
            activation: self.activation,
            shared_scale: self.shared_scale,
        }
    }
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

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
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
    /// Overrides `model.free_bits` during training when set.
    #[serde(default)]
    pub free_bits: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            lr: default_lr(),
            batch: default_batch(),
            epochs: default_epochs(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
            free_bits: None,
            seed: 0,
        }
    }
}

impl TrainSpec {
    pub fn optimizer(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch: self.batch,
            epochs: self.epochs,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            free_bits: self.free_bits,
        }
    }
}

/// Sign convention for turning an LLR into an in-distribution score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// A large LLR flags OOD; the ID score is `-LLR`.
    #[default]
    HighIsOod,
    /// The ID score is the LLR itself.
    HighIsId,
}

impl Orientation {
    pub fn id_scores(self, llr: &[f64]) -> Vec<f64> {
        match self {
            Orientation::HighIsOod => llr.iter().map(|v| -v).collect(),
            Orientation::HighIsId => llr.to_vec(),
        }
    }
}

fn default_k() -> usize {
    2
}
fn default_importance() -> usize {
    1000
}
fn default_eval_samples() -> usize {
    10_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    #[serde(default = "default_k")]
    pub k_llr: usize,
    #[serde(default = "default_importance")]
    pub importance_samples: usize,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub orientation: Orientation,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            k_llr: default_k(),
            importance_samples: default_importance(),
            eval_samples: default_eval_samples(),
            seed: 0,
            orientation: Orientation::default(),
        }
    }
}

impl EvalSpec {
    pub(crate) fn validate(&self) -> Result<(), CliError> {
        if self.eval_samples == 0 {
            return Err(CliError::Config("eval_samples must be >= 1".into()));
        }
        if self.importance_samples == 0 {
            return Err(CliError::Config("importance_samples must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub allocation: AllocationSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub eval: EvalSpec,
    pub data: DataSpec,
}

fn default_seeds() -> usize {
    3
}

fn default_grid() -> Vec<f64> {
    vec![0.1, 0.25, 0.5, 0.75]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub budget: usize,
    pub depth: usize,
    #[serde(default = "default_grid")]
    pub ratios: Vec<f64>,
    /// Control plan names such as `grayscale:Stable`.
    #[serde(default)]
    pub controls: Vec<String>,
    /// Seed replicates per configuration.
    #[serde(default = "default_seeds")]
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub sweep: SweepSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub eval: EvalSpec,
    pub data: DataSpec,
}

impl SweepConfig {
    /// All configurations: the ratio grid first, then controls.
    pub fn allocations(&self) -> Result<Vec<ResolvedAllocation>, CliError> {
        if self.sweep.ratios.is_empty() && self.sweep.controls.is_empty() {
            return Err(CliError::Config("sweep needs at least one ratio or control".into()));
        }
        if self.sweep.seeds == 0 {
            return Err(CliError::Config("seeds must be >= 1".into()));
        }
        let mut out = Vec::new();
        for &r in &self.sweep.ratios {
            let spec = AllocationSpec { budget: Some(self.sweep.budget), depth: Some(self.sweep.depth), ratio: Some(r), ..Default::default() };
            out.push(spec.resolve()?);
        }
        for c in &self.sweep.controls {
            out.push(AllocationSpec { control: Some(c.clone()), ..Default::default() }.resolve()?);
        }
        Ok(out)
    }

    /// The run config of one sweep cell.
    pub fn cell(&self, alloc: &ResolvedAllocation, seed_index: usize) -> RunConfig {
        let mut train = self.train.clone();
        train.seed = self.train.seed + seed_index as u64;
        let mut eval = self.eval.clone();
        eval.seed = self.eval.seed + seed_index as u64;
        RunConfig {
            allocation: AllocationSpec { dims: Some(alloc.dims.clone()), ..Default::default() },
            model: self.model.clone(),
            train,
            eval,
            data: self.data.clone(),
        }
    }
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn rebase_data(data: &mut DataSpec, path: &Path) -> Result<(), CliError> {
    let base = path.parent().unwrap_or(Path::new("."));
    for r in std::iter::once(&mut data.train).chain(std::iter::once(&mut data.id)).chain(data.ood.iter_mut()) {
        r.validate()?;
        r.rebase(base);
    }
    Ok(())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = read_toml(path)?;
        cfg.allocation.resolve()?;
        cfg.eval.validate()?;
        rebase_data(&mut cfg.data, path)?;
        Ok(cfg)
    }
}

impl SweepConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut cfg: SweepConfig = read_toml(path)?;
        cfg.allocations()?;
        cfg.eval.validate()?;
        rebase_data(&mut cfg.data, path)?;
        Ok(cfg)
    }
}
