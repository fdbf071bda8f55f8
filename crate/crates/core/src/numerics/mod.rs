//! Dense tensors, reverse-mode differentiation, seeded randomness and the
//! reparameterized Gaussian sampler.

pub mod kernels;
mod rng;
mod tape;
mod tensor;

pub use rng::{RngState, SeededRng, Stream, RNG_ALGORITHM};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: axis {axis} invalid for shape {shape:?}")]
    Axis { op: &'static str, axis: usize, shape: Vec<usize> },
    #[error("{op}: domain error ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("invalid shape {0:?}: extents must be positive")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward root must be a single value, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward root was recorded on a different tape")]
    ForeignRoot,
    #[error("concat of zero tensors")]
    EmptyConcat,
}

/// `mu + exp(log_sigma) * eps` for a pre-drawn standard-normal `eps`.
pub fn reparameterize<'t>(mu: Var<'t>, log_sigma: Var<'t>, eps: &Tensor) -> Result<Var<'t>, NumericsError> {
    if mu.shape() != log_sigma.shape() || mu.shape() != eps.shape() {
        return Err(NumericsError::ShapeMismatch { op: "reparameterize", left: mu.shape(), right: log_sigma.shape() });
    }
    let noise = mu.tape().constant(eps.clone());
    mu.add(log_sigma.exp().mul(noise)?)
}

/// Reparameterized draw from `N(mu, exp(log_sigma)^2)`, differentiable in both
/// arguments.
pub fn gauss_sample<'t>(mu: Var<'t>, log_sigma: Var<'t>, rng: &mut SeededRng) -> Result<Var<'t>, NumericsError> {
    if mu.shape() != log_sigma.shape() {
        return Err(NumericsError::ShapeMismatch { op: "gauss_sample", left: mu.shape(), right: log_sigma.shape() });
    }
    let eps = rng.normal_tensor(&mu.shape());
    reparameterize(mu, log_sigma, &eps)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences. Returns `max |analytic - numeric| / max(1, |analytic|)` over
/// every coordinate of every input.
pub fn grad_check<F>(f: F, point: &[Tensor], step: f64) -> Result<f64, NumericsError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, NumericsError>,
{
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = point.iter().map(|t| tape.param(t.clone())).collect();
        let root = f(&tape, &vars)?;
        tape.backward(root)?
    };
    let eval = |pt: &[Tensor]| -> Result<f64, NumericsError> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = pt.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };
    let mut worst = 0.0f64;
    let mut probe = point.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = probe[ti].data()[j];
            probe[ti].data_mut()[j] = orig + step;
            let up = eval(&probe)?;
            probe[ti].data_mut()[j] = orig - step;
            let down = eval(&probe)?;
            probe[ti].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_limit_returns_mean() {
        let tape = Tape::new();
        let mu = tape.constant(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let ls = tape.constant(Tensor::filled(&[3], -800.0));
        let mut rng = SeededRng::new(1);
        let z = gauss_sample(mu, ls, &mut rng).unwrap();
        assert_eq!(z.value().data(), mu.value().data());
    }

    #[test]
    fn standard_normal_mean_within_ci() {
        let tape = Tape::new();
        let n = 100_000;
        let mu = tape.constant(Tensor::zeros(&[n]));
        let ls = tape.constant(Tensor::zeros(&[n]));
        let mut rng = SeededRng::new(2024);
        let z = gauss_sample(mu, ls, &mut rng).unwrap();
        let mean = z.value().sum() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let draw = || {
            let tape = Tape::new();
            let mu = tape.constant(Tensor::zeros(&[8]));
            let ls = tape.constant(Tensor::filled(&[8], 0.3));
            let mut rng = SeededRng::for_stream(5, Stream::Posterior);
            gauss_sample(mu, ls, &mut rng).unwrap().value().data().to_vec()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn sample_shapes_must_match() {
        let tape = Tape::new();
        let mu = tape.constant(Tensor::zeros(&[2]));
        let ls = tape.constant(Tensor::zeros(&[3]));
        assert!(gauss_sample(mu, ls, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let w = Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap();
        let err = grad_check(
            |tape, v| {
                let c = tape.constant(Tensor::new(&[3], vec![1.5, 2.0, -0.5]).unwrap());
                Ok(v[0].mul(c)?.sum())
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn grad_check_constant_is_zero() {
        let w = Tensor::new(&[2], vec![0.3, -1.2]).unwrap();
        let err = grad_check(|tape, _| Ok(tape.scalar(4.0)), &[w], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_softplus_chain() {
        let mut rng = SeededRng::new(9);
        let x = rng.normal_tensor(&[5]);
        let err = grad_check(|_, v| Ok(v[0].softplus().softplus().square().sum()), &[x], 1e-5).unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn sigmoid_layer_matches_finite_differences() {
        let mut rng = SeededRng::new(10);
        let w = rng.normal_tensor(&[4, 3]).map(|v| 0.3 * v);
        let x = rng.normal_tensor(&[2, 4]);
        let err = grad_check(
            |tape, v| {
                let x = tape.constant(x.clone());
                Ok(x.matmul(v[0])?.sigmoid().sum())
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
