//! `LLR^{>k}` OOD scores and the per-layer mutual-information estimator.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::hvae::{HvaeError, HvaeParams, Noise};
use crate::numerics::{SeededRng, Tensor};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error(transparent)]
    Model(#[from] HvaeError),
    #[error("nothing to score")]
    Empty,
    #[error("non-finite score for input {index}")]
    NonFinite { index: usize },
    #[error("samples per input must be >= 1")]
    Samples,
}

type Result<T> = std::result::Result<T, ScoreError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesLabel {
    Id,
    Ood,
}

/// One score per input, with what is needed to reproduce it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub label: SeriesLabel,
    pub dataset: String,
    pub k: usize,
    pub importance_samples: usize,
    pub values: Vec<f64>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub layer: usize,
    pub mean: f64,
    pub std_error: f64,
    pub samples_per_input: usize,
    pub inputs_used: usize,
}

fn row_tensor(data: &Tensor, i: usize) -> Tensor {
    let row = data.row(i);
    Tensor::new(&[1, row.len()], row.to_vec()).expect("row shape")
}

/// `L(x) - L^{>k}(x)` from IWAE bounds with `samples` importance samples.
/// Both bounds share their noise, so `k = L` gives exactly zero.
pub fn llr_score(params: &HvaeParams, x: &Tensor, k: usize, samples: usize, rng: &mut SeededRng) -> Result<f64> {
    let x = params.flatten_input(x)?;
    if x.shape()[0] != 1 {
        return Err(HvaeError::Config(format!("llr_score takes one input, got {}", x.shape()[0])).into());
    }
    if samples == 0 {
        return Err(ScoreError::Samples);
    }
    if k > params.layers() {
        return Err(HvaeError::LayerOutOfRange { k, layers: params.layers() }.into());
    }
    let noise = Noise::draw(&params.config().layer_dims, samples, rng);
    let full = params.iwae_with_noise(&x, params.layers(), samples, &noise)?[0];
    let gt = params.iwae_with_noise(&x, k, samples, &noise)?[0];
    Ok(full - gt)
}

/// Scoring settings shared by ID and OOD series.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreOptions {
    pub k: usize,
    pub importance_samples: usize,
    /// Maximum number of inputs scored (the first `limit` rows).
    pub limit: Option<usize>,
    pub exec: Exec,
}

/// Scores every row of `data`. Input `i` uses `base.derive(i)`, so the
/// series does not depend on scheduling.
pub fn score_batch(
    params: &HvaeParams,
    data: &Tensor,
    opts: &ScoreOptions,
    base: &SeededRng,
    label: SeriesLabel,
    name: &str,
) -> Result<ScoreSeries> {
    if data.shape().first().copied().unwrap_or(0) == 0 {
        return Err(ScoreError::Empty);
    }
    let data = params.flatten_input(data)?;
    let n = opts.limit.map_or(data.shape()[0], |l| l.min(data.shape()[0]));
    if n == 0 {
        return Err(ScoreError::Empty);
    }
    let results = opts.exec.map_indexed(n, |i| {
        let mut rng = base.derive(i as u64);
        llr_score(params, &row_tensor(&data, i), opts.k, opts.importance_samples, &mut rng)
    });
    let mut values = Vec::with_capacity(n);
    for (i, r) in results.into_iter().enumerate() {
        let v = r?;
        if !v.is_finite() {
            return Err(ScoreError::NonFinite { index: i });
        }
        values.push(v);
    }
    Ok(ScoreSeries {
        label,
        dataset: name.to_string(),
        k: opts.k,
        importance_samples: opts.importance_samples,
        values,
        seed: base.seed(),
    })
}

/// Monte Carlo estimate of `I(X; Z_i)` as the mean of
/// `[log p(x|z) + log p(z_i)] - ELBO(x) - log p(z_i)` over inputs and `samples`
/// draws per input, with `std_error = sd / sqrt(n * samples)`.
pub fn mi_estimate(
    params: &HvaeParams,
    data: &Tensor,
    layer: usize,
    samples: usize,
    base: &SeededRng,
    exec: Exec,
) -> Result<MiEstimate> {
    if layer == 0 || layer > params.layers() {
        return Err(HvaeError::LayerOutOfRange { k: layer, layers: params.layers() }.into());
    }
    if samples == 0 {
        return Err(ScoreError::Samples);
    }
    if data.shape().first().copied().unwrap_or(0) == 0 {
        return Err(ScoreError::Empty);
    }
    let data = params.flatten_input(data)?;
    let n = data.shape()[0];
    let p = data.shape()[1];
    let per_input = exec.map_indexed(n, |i| -> Result<Vec<f64>> {
        let mut rng = base.derive(i as u64);
        let mut rep = Vec::with_capacity(samples * p);
        for _ in 0..samples {
            rep.extend_from_slice(data.row(i));
        }
        let xs = Tensor::new(&[samples, p], rep).expect("replicated rows");
        let noise = Noise::draw(&params.config().layer_dims, samples, &mut rng);
        Ok(params.mi_terms(&xs, layer, &noise)?.iter().map(|[t1, t2, t3]| t1 - t2 - t3).collect())
    });
    let mut terms = Vec::with_capacity(n * samples);
    for (i, r) in per_input.into_iter().enumerate() {
        let t = r?;
        if t.iter().any(|v| !v.is_finite()) {
            return Err(ScoreError::NonFinite { index: i });
        }
        terms.extend(t);
    }
    let m = terms.len() as f64;
    let mean = terms.iter().sum::<f64>() / m;
    let var = if terms.len() > 1 { terms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0) } else { 0.0 };
    Ok(MiEstimate { layer, mean, std_error: (var / m).sqrt(), samples_per_input: samples, inputs_used: n })
}
