//! Decoder log-likelihood kernels and latent Gaussian densities.
//!
//! All kernels take `[batch, pixels]` tensors and return one value per batch
//! row (summed over pixels). They are built from tape ops, so they are
//! differentiable in every parameter.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::numerics::{NumericsError, Tensor, Var};

/// `0.5 * ln(2 pi)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Output distribution of the bottom decoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Bernoulli,
    Gaussian,
    DiscretizedLogistic,
    MixtureLogistic { components: usize },
}

impl DecoderKind {
    pub fn validate(&self) -> Result<(), NumericsError> {
        match self {
            DecoderKind::MixtureLogistic { components: 0 } => {
                Err(NumericsError::Domain { op: "mixture_logistic", detail: "zero components".into() })
            }
            _ => Ok(()),
        }
    }

    pub fn is_binary(&self) -> bool {
        matches!(self, DecoderKind::Bernoulli)
    }

    /// Network outputs per example for `pixels` pixels. With a shared scale,
    /// Gaussian/logistic scales are free per-pixel parameters instead of
    /// network outputs.
    pub fn output_width(&self, pixels: usize, shared_scale: bool) -> usize {
        match self {
            DecoderKind::Bernoulli => pixels,
            DecoderKind::Gaussian | DecoderKind::DiscretizedLogistic => {
                if shared_scale {
                    pixels
                } else {
                    2 * pixels
                }
            }
            DecoderKind::MixtureLogistic { components } => 3 * components * pixels,
        }
    }
}

/// Per-pixel decoder parameters for a batch.
#[derive(Clone, Copy, Debug)]
pub enum DecoderParams<'t> {
    Bernoulli { logits: Var<'t> },
    Gaussian { mu: Var<'t>, log_sigma: Var<'t> },
    Logistic { mu: Var<'t>, log_s: Var<'t> },
    /// `[batch, K, pixels]` each.
    Mixture { logits: Var<'t>, mu: Var<'t>, log_s: Var<'t> },
}

impl<'t> DecoderParams<'t> {
    pub fn log_prob(&self, x: Var<'t>) -> Result<Var<'t>, NumericsError> {
        match *self {
            DecoderParams::Bernoulli { logits } => bernoulli_logp(x, logits),
            DecoderParams::Gaussian { mu, log_sigma } => gaussian_logp(x, mu, log_sigma),
            DecoderParams::Logistic { mu, log_s } => logistic_logp(x, mu, log_s),
            DecoderParams::Mixture { logits, mu, log_s } => mixture_logistic_logp(x, logits, mu, log_s),
        }
    }

    /// Mean of the decoder distribution, `[batch, pixels]`.
    pub fn mean(&self) -> Result<Tensor, NumericsError> {
        match *self {
            DecoderParams::Bernoulli { logits } => Ok(logits.value().map(crate::numerics::kernels::sigmoid)),
            DecoderParams::Gaussian { mu, .. } | DecoderParams::Logistic { mu, .. } => Ok((*mu.value()).clone()),
            DecoderParams::Mixture { logits, mu, .. } => {
                let log_pi = normalized_log_weights(logits)?;
                Ok((*log_pi.exp().mul(mu)?.sum_axis(1)?.value()).clone())
            }
        }
    }
}

fn check_same(op: &'static str, a: Var<'_>, b: Var<'_>) -> Result<(), NumericsError> {
    if a.shape() != b.shape() {
        return Err(NumericsError::ShapeMismatch { op, left: a.shape(), right: b.shape() });
    }
    Ok(())
}

fn per_example(v: Var<'_>) -> Result<Var<'_>, NumericsError> {
    v.sum_axis(v.shape().len() - 1)
}

/// `sum_pixels [x log sigma(f) + (1-x) log(1 - sigma(f))]`, evaluated as
/// `-softplus((1 - 2x) f)` for binary `x`.
pub fn bernoulli_logp<'t>(x: Var<'t>, logits: Var<'t>) -> Result<Var<'t>, NumericsError> {
    check_same("bernoulli_logp", x, logits)?;
    if let Some(bad) = x.value().data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(NumericsError::Domain { op: "bernoulli_logp", detail: format!("non-binary pixel {bad}") });
    }
    per_example(x.scale(-2.0).offset(1.0).mul(logits)?.softplus().neg())
}

/// Diagonal Gaussian log-density. `log_sigma` may be shared across the batch
/// (shape `[pixels]`).
pub fn gaussian_logp<'t>(x: Var<'t>, mu: Var<'t>, log_sigma: Var<'t>) -> Result<Var<'t>, NumericsError> {
    check_same("gaussian_logp", x, mu)?;
    let z = x.sub(mu)?.mul(log_sigma.neg().exp())?;
    let elem = z.square().scale(-0.5).sub(log_sigma)?.offset(-HALF_LN_2PI);
    per_example(elem)
}

/// Logistic density `e^u / (s (1 + e^u)^2)` with `u = (x - mu) / s`, in log
/// form `u - ln s - 2 softplus(u)`.
pub fn logistic_logp<'t>(x: Var<'t>, mu: Var<'t>, log_s: Var<'t>) -> Result<Var<'t>, NumericsError> {
    check_same("logistic_logp", x, mu)?;
    per_example(logistic_elementwise(x, mu, log_s)?)
}

fn logistic_elementwise<'t>(x: Var<'t>, mu: Var<'t>, log_s: Var<'t>) -> Result<Var<'t>, NumericsError> {
    let u = x.sub(mu)?.mul(log_s.neg().exp())?;
    u.sub(log_s)?.sub(u.softplus().scale(2.0))
}

/// `log pi_k` from unnormalized `[batch, K, pixels]` logits.
fn normalized_log_weights(logits: Var<'_>) -> Result<Var<'_>, NumericsError> {
    let k = logits.shape()[1];
    logits.sub(logits.logsumexp_axis(1)?.repeat(1, k)?)
}

/// Per-pixel mixture of logistics, `log sum_k pi_k p_k(x)`, summed over pixels.
/// `logits`, `mu`, `log_s` are `[batch, K, pixels]`; `x` is `[batch, pixels]`.
pub fn mixture_logistic_logp<'t>(
    x: Var<'t>,
    logits: Var<'t>,
    mu: Var<'t>,
    log_s: Var<'t>,
) -> Result<Var<'t>, NumericsError> {
    let shape = mu.shape();
    if shape.len() != 3 || shape[1] == 0 {
        return Err(NumericsError::Domain { op: "mixture_logistic_logp", detail: format!("bad shape {shape:?}") });
    }
    check_same("mixture_logistic_logp", logits, mu)?;
    check_same("mixture_logistic_logp", log_s, mu)?;
    let xs = x.repeat(1, shape[1])?;
    check_same("mixture_logistic_logp", xs, mu)?;
    let comp = logistic_elementwise(xs, mu, log_s)?;
    let joint = comp.add(normalized_log_weights(logits)?)?;
    per_example(joint.logsumexp_axis(1)?)
}

/// `sum_dims [-0.5 ln(2 pi) - 0.5 z^2]`.
pub fn std_normal_logp(z: Var<'_>) -> Result<Var<'_>, NumericsError> {
    per_example(z.square().scale(-0.5).offset(-HALF_LN_2PI))
}

/// Analytic `KL(N(mu_q, s_q^2) || N(mu_p, s_p^2))` summed over the last axis.
pub fn gaussian_kl<'t>(
    mu_q: Var<'t>,
    log_sigma_q: Var<'t>,
    mu_p: Var<'t>,
    log_sigma_p: Var<'t>,
) -> Result<Var<'t>, NumericsError> {
    check_same("gaussian_kl", mu_q, mu_p)?;
    let var_ratio = log_sigma_q.sub(log_sigma_p)?.scale(2.0).exp();
    let mean_term = mu_q.sub(mu_p)?.mul(log_sigma_p.scale(-1.0).exp())?.square();
    let elem = log_sigma_p.sub(log_sigma_q)?.add(var_ratio.add(mean_term)?.scale(0.5))?.offset(-0.5);
    per_example(elem)
}

/// Plain-float Gaussian log-density of one value, for reporting code paths
/// that do not need gradients.
pub fn gaussian_logpdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * (2.0 * PI).ln() - sigma.ln() - 0.5 * z * z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, kernels::softplus, SeededRng, Tape};
    use proptest::prelude::*;

    fn row<'t>(tape: &'t Tape, v: &[f64]) -> Var<'t> {
        tape.constant(Tensor::new(&[1, v.len()], v.to_vec()).unwrap())
    }

    fn logistic_scalar(x: f64, mu: f64, s: f64) -> f64 {
        // density straight from e^u / (s (1 + e^u)^2)
        let e = ((x - mu) / s).exp();
        (e / (s * (1.0 + e).powi(2))).ln()
    }

    #[test]
    fn bernoulli_values() {
        let tape = Tape::new();
        let l = bernoulli_logp(row(&tape, &[1.0]), row(&tape, &[0.0])).unwrap().item();
        assert!((l + std::f64::consts::LN_2).abs() < 1e-12);
        let l = bernoulli_logp(row(&tape, &[0.0]), row(&tape, &[0.0])).unwrap().item();
        assert!((l + std::f64::consts::LN_2).abs() < 1e-12);
        let l = bernoulli_logp(row(&tape, &[1.0]), row(&tape, &[10.0])).unwrap().item();
        assert!((l + softplus(-10.0)).abs() < 1e-18);
        assert!((l + 4.5398899216870535e-5).abs() < 1e-15);
        assert!(bernoulli_logp(row(&tape, &[0.5]), row(&tape, &[0.0])).is_err());
    }

    #[test]
    fn bernoulli_finite_at_extreme_logits() {
        let tape = Tape::new();
        let x = row(&tape, &[1.0, 0.0, 1.0, 0.0]);
        let f = row(&tape, &[-500.0, 500.0, 500.0, -500.0]);
        let l = bernoulli_logp(x, f).unwrap().item();
        assert!(l.is_finite());
        assert!((l + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn gaussian_values() {
        let tape = Tape::new();
        let x = row(&tape, &[0.3, -1.0]);
        let zero = row(&tape, &[0.0, 0.0]);
        let l = gaussian_logp(x, x, zero).unwrap().item();
        assert!((l + 2.0 * 0.918_938_533_204_672_7).abs() < 1e-12);
        let sig = row(&tape, &[2f64.ln(), 2f64.ln()]);
        let shifted = row(&tape, &[2.3, 1.0]);
        let l = gaussian_logp(shifted, x, sig).unwrap().item();
        let want = 2.0 * (-HALF_LN_2PI - 2f64.ln() - 0.5);
        assert!((l - want).abs() < 1e-12);

        let mut rng = SeededRng::new(3);
        let (xs, mus, ss): (Vec<f64>, Vec<f64>, Vec<f64>) =
            (0..6).map(|_| (rng.normal(), rng.normal(), rng.uniform_range(0.2, 3.0))).fold(
                (vec![], vec![], vec![]),
                |mut acc, (a, b, c)| {
                    acc.0.push(a);
                    acc.1.push(b);
                    acc.2.push(c);
                    acc
                },
            );
        let ls: Vec<f64> = ss.iter().map(|s| s.ln()).collect();
        let l = gaussian_logp(row(&tape, &xs), row(&tape, &mus), row(&tape, &ls)).unwrap().item();
        let want: f64 = (0..6).map(|i| gaussian_logpdf(xs[i], mus[i], ss[i])).sum();
        assert!((l - want).abs() < 1e-12);
    }

    #[test]
    fn logistic_values() {
        let tape = Tape::new();
        let z = row(&tape, &[0.0]);
        assert!((logistic_logp(z, z, z).unwrap().item() + 4f64.ln()).abs() < 1e-12);
        let l2 = row(&tape, &[2f64.ln()]);
        assert!((logistic_logp(z, z, l2).unwrap().item() + 8f64.ln()).abs() < 1e-12);
        let one = row(&tape, &[1.0]);
        let v = logistic_logp(one, z, z).unwrap().item();
        assert!((v - (1.0 - 2.0 * softplus(1.0))).abs() < 1e-12);
        assert!((v + 1.626523).abs() < 1e-6);
        assert!((v - logistic_scalar(1.0, 0.0, 1.0)).abs() < 1e-12);
    }

    fn mixture_vars<'t>(tape: &'t Tape, logits: &[f64], mu: &[f64], ls: &[f64]) -> [Var<'t>; 3] {
        let k = logits.len();
        let t = |v: &[f64]| tape.constant(Tensor::new(&[1, k, 1], v.to_vec()).unwrap());
        [t(logits), t(mu), t(ls)]
    }

    #[test]
    fn mixture_reduces_to_single_component() {
        let tape = Tape::new();
        let x = row(&tape, &[0.7]);
        let [lg, mu, ls] = mixture_vars(&tape, &[3.2], &[0.1], &[-1.0]);
        let single = logistic_logp(x, row(&tape, &[0.1]), row(&tape, &[-1.0])).unwrap().item();
        assert!((mixture_logistic_logp(x, lg, mu, ls).unwrap().item() - single).abs() < 1e-12);
        let [lg, mu, ls] = mixture_vars(&tape, &[0.0, 0.0], &[0.1, 0.1], &[-1.0, -1.0]);
        assert!((mixture_logistic_logp(x, lg, mu, ls).unwrap().item() - single).abs() < 1e-12);
    }

    #[test]
    fn mixture_of_two_known_densities() {
        let tape = Tape::new();
        let x = row(&tape, &[0.4]);
        let [lg, mu, ls] = mixture_vars(&tape, &[1.5, 1.5], &[0.0, 1.0], &[0.0, (0.5f64).ln()]);
        let d1 = logistic_scalar(0.4, 0.0, 1.0).exp();
        let d2 = logistic_scalar(0.4, 1.0, 0.5).exp();
        let want = ((d1 + d2) / 2.0).ln();
        assert!((mixture_logistic_logp(x, lg, mu, ls).unwrap().item() - want).abs() < 1e-12);
    }

    #[test]
    fn mixture_weight_path_converges_to_component() {
        let tape = Tape::new();
        let x = row(&tape, &[0.4]);
        let target = logistic_scalar(0.4, 1.0, 0.5);
        let mut prev = f64::INFINITY;
        for w in [0.0, 2.0, 5.0, 10.0, 20.0, 40.0] {
            let [lg, mu, ls] = mixture_vars(&tape, &[0.0, w], &[0.0, 1.0], &[0.0, (0.5f64).ln()]);
            let gap = (mixture_logistic_logp(x, lg, mu, ls).unwrap().item() - target).abs();
            assert!(gap <= prev + 1e-15);
            prev = gap;
        }
        assert!(prev < 1e-12);
    }

    #[test]
    fn mixture_weights_normalize() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::new(&[1, 3, 2], vec![0.3, -2.0, 1.0, 4.0, -0.7, 0.0]).unwrap());
        let pi = normalized_log_weights(logits).unwrap().exp().sum_axis(1).unwrap();
        for v in pi.value().data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        assert!(DecoderKind::MixtureLogistic { components: 0 }.validate().is_err());
    }

    #[test]
    fn std_normal_values() {
        let tape = Tape::new();
        let z = row(&tape, &[0.0; 4]);
        assert!((std_normal_logp(z).unwrap().item() + 4.0 * HALF_LN_2PI).abs() < 1e-12);
        let z = row(&tape, &[1.0, 0.0, 0.0, 0.0]);
        assert!((std_normal_logp(z).unwrap().item() + 4.0 * HALF_LN_2PI + 0.5).abs() < 1e-12);
        let mut rng = SeededRng::new(8);
        let zr = tape.constant(rng.normal_tensor(&[3, 5]));
        let zeros = tape.constant(Tensor::zeros(&[3, 5]));
        let a = std_normal_logp(zr).unwrap().value();
        let b = gaussian_logp(zr, zeros, zeros).unwrap().value();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_zero_for_identical_and_positive_otherwise() {
        let tape = Tape::new();
        let mut rng = SeededRng::new(4);
        let mu = tape.constant(rng.normal_tensor(&[2, 3]));
        let ls = tape.constant(rng.normal_tensor(&[2, 3]).map(|v| 0.3 * v));
        let kl = gaussian_kl(mu, ls, mu, ls).unwrap();
        assert!(kl.value().data().iter().all(|v| v.abs() < 1e-14));
        let mu2 = tape.constant(rng.normal_tensor(&[2, 3]));
        let kl = gaussian_kl(mu, ls, mu2, ls.scale(0.5)).unwrap();
        assert!(kl.value().data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn kernels_pass_grad_check() {
        let mut rng = SeededRng::new(12);
        let x = rng.normal_tensor(&[2, 3]);
        let pts = vec![rng.normal_tensor(&[2, 3]), rng.normal_tensor(&[2, 3]).map(|v| 0.3 * v)];
        let gauss = grad_check(
            |tape, v| Ok(gaussian_logp(tape.constant(x.clone()), v[0], v[1])?.sum()),
            &pts,
            1e-5,
        )
        .unwrap();
        let logi = grad_check(
            |tape, v| Ok(logistic_logp(tape.constant(x.clone()), v[0], v[1])?.sum()),
            &pts,
            1e-5,
        )
        .unwrap();
        let bits = Tensor::from_fn(&[2, 3], |i| (i % 2) as f64);
        let bern = grad_check(|tape, v| Ok(bernoulli_logp(tape.constant(bits.clone()), v[0])?.sum()), &pts[..1], 1e-5)
            .unwrap();
        let mix_pts = vec![rng.normal_tensor(&[2, 2, 3]), rng.normal_tensor(&[2, 2, 3]), rng.normal_tensor(&[2, 2, 3]).map(|v| 0.3 * v)];
        let mix = grad_check(
            |tape, v| Ok(mixture_logistic_logp(tape.constant(x.clone()), v[0], v[1], v[2])?.sum()),
            &mix_pts,
            1e-5,
        )
        .unwrap();
        let kl_pts = vec![pts[0].clone(), pts[1].clone(), x.clone(), pts[1].map(|v| -v)];
        let kl = grad_check(|_, v| Ok(gaussian_kl(v[0], v[1], v[2], v[3])?.sum()), &kl_pts, 1e-5).unwrap();
        for (name, e) in [("gauss", gauss), ("logistic", logi), ("bernoulli", bern), ("mixture", mix), ("kl", kl)] {
            assert!(e <= 1e-4, "{name}: {e}");
        }
    }

    proptest! {
        #[test]
        fn translation_consistent(x in -5.0f64..5.0, mu in -5.0f64..5.0, shift in -10.0f64..10.0, ls in -2.0f64..2.0) {
            let tape = Tape::new();
            let l = row(&tape, &[ls]);
            let a = gaussian_logp(row(&tape, &[x]), row(&tape, &[mu]), l).unwrap().item();
            let b = gaussian_logp(row(&tape, &[x + shift]), row(&tape, &[mu + shift]), l).unwrap().item();
            prop_assert!((a - b).abs() < 1e-9);
            let a = logistic_logp(row(&tape, &[x]), row(&tape, &[mu]), l).unwrap().item();
            let b = logistic_logp(row(&tape, &[x + shift]), row(&tape, &[mu + shift]), l).unwrap().item();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn bernoulli_finite_everywhere(f in -500.0f64..500.0, bit in 0u8..2) {
            let tape = Tape::new();
            let l = bernoulli_logp(row(&tape, &[f64::from(bit)]), row(&tape, &[f])).unwrap().item();
            prop_assert!(l.is_finite() && l <= 0.0);
        }
    }
}
