//! Closed-form forward marginal, tractable posterior and the two reverse
//! updates used at inference. No network is involved here: the denoiser's
//! prediction of the clean image is an input.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::schedule::NoiseSchedule;

/// Scale of the noise injected by the stochastic reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ReverseNoise {
    /// Posterior standard deviation `sqrt(sigma^2)`.
    #[default]
    Posterior,
    /// `sqrt(1 - alpha_t)`, as written in the testing algorithm.
    AlgorithmLiteral,
}

/// Exact sample from `q(y_t | y_0) = N(sqrt(ab_t) y0, (1 - ab_t) I)` given
/// standard-normal noise `eps`.
pub fn marginal_sample(y0: &Image, t: usize, eps: &Image, schedule: &NoiseSchedule) -> Result<Image> {
    let (signal, noise) = schedule.marginal_coefficients(t)?;
    y0.axpby(signal, eps, noise)
}

/// One forward transition `q(y_t | y_{t-1}) = N(sqrt(alpha_t) y_{t-1}, (1 - alpha_t) I)`.
pub fn forward_step(prev: &Image, t: usize, eps: &Image, schedule: &NoiseSchedule) -> Result<Image> {
    schedule.check_step(t)?;
    let alpha = schedule.alpha(t);
    prev.axpby(libm::sqrt(alpha), eps, libm::sqrt(1.0 - alpha))
}

/// Mean and variance of `q(y_{t-1} | y_t, y_0)`.
pub fn posterior_params(
    y0: &Image,
    yt: &Image,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<(Image, f64)> {
    let coeffs = schedule.posterior(t)?;
    let mu = y0.axpby(coeffs.y0, yt, coeffs.yt)?;
    Ok((mu, coeffs.variance))
}

/// Stochastic reverse update: posterior mean at the predicted clean image plus
/// scaled noise. Pass a zero `eps` at `t = 1`.
pub fn ddpm_reverse_step(
    yt: &Image,
    y0_hat: &Image,
    t: usize,
    schedule: &NoiseSchedule,
    eps: &Image,
    noise: ReverseNoise,
) -> Result<Image> {
    yt.ensure_same_shape(y0_hat)?;
    yt.ensure_same_shape(eps)?;
    let (mu, variance) = posterior_params(y0_hat, yt, t, schedule)?;
    let scale = match noise {
        ReverseNoise::Posterior => libm::sqrt(variance),
        ReverseNoise::AlgorithmLiteral => libm::sqrt(1.0 - schedule.alpha(t)),
    };
    if t == 1 {
        return Ok(mu);
    }
    mu.axpby(1.0, eps, scale)
}

/// Deterministic accelerated update from step `t` to `t_prev < t` (`t_prev = 0`
/// lands on the clean image).
pub fn ddim_reverse_step(
    yt: &Image,
    y0_hat: &Image,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Image> {
    yt.ensure_same_shape(y0_hat)?;
    let (a, b, c) = ddim_coefficients(t, t_prev, schedule)?;
    // y_prev = sqrt(ab_prev) y0 + sqrt(1 - ab_prev) (yt - sqrt(ab_t) y0) / sqrt(1 - ab_t)
    //        = a * y0 + b * (yt - c * y0)
    let mut out = Image::zeros(yt.height(), yt.width());
    for ((o, &y), &x0) in out
        .as_mut_slice()
        .iter_mut()
        .zip(yt.as_slice())
        .zip(y0_hat.as_slice())
    {
        *o = a * x0 + b * (y - c * x0);
    }
    Ok(out)
}

/// `(sqrt(ab_prev), sqrt(1 - ab_prev) / sqrt(1 - ab_t), sqrt(ab_t))`.
pub fn ddim_coefficients(t: usize, t_prev: usize, schedule: &NoiseSchedule) -> Result<(f64, f64, f64)> {
    schedule.check_step(t)?;
    if t_prev >= t {
        return Err(Error::StepOrder { t, prev: t_prev });
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    if ab_t >= 1.0 {
        return Err(Error::DegeneratePosterior(t));
    }
    Ok((
        libm::sqrt(ab_prev),
        libm::sqrt(1.0 - ab_prev) / libm::sqrt(1.0 - ab_t),
        libm::sqrt(ab_t),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn noise(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |_, _| rng.sample(StandardNormal))
    }

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(100, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn marginal_identity_and_pure_noise_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y0 = noise(&mut rng, 4, 4);
        let eps = noise(&mut rng, 4, 4);
        // alpha_bar numerically 1: tiny single beta
        let near_identity = NoiseSchedule::linear(1, 1e-300, 1e-300).unwrap();
        let out = marginal_sample(&y0, 1, &eps, &near_identity).unwrap();
        assert_eq!(out, y0);
        // alpha_bar -> 0: long schedule with large betas
        let long = NoiseSchedule::linear(5000, 0.5, 0.5).unwrap();
        let out = marginal_sample(&y0, 5000, &eps, &long).unwrap();
        assert_eq!(out, eps);
    }

    #[test]
    fn marginal_variance_monte_carlo() {
        // schedule with alpha_bar_1 = 0.75
        let s = NoiseSchedule::linear(1, 0.25, 0.25).unwrap();
        let y0 = Image::zeros(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let eps = noise(&mut rng, 1, 1);
                marginal_sample(&y0, 1, &eps, &s).unwrap().get(0, 0)
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 0.25).abs() < 0.01, "variance {var}");
    }

    #[test]
    fn rejects_out_of_range_step() {
        let s = schedule();
        let img = Image::zeros(2, 2);
        assert!(marginal_sample(&img, 0, &img, &s).is_err());
        assert!(marginal_sample(&img, 101, &img, &s).is_err());
    }

    #[test]
    fn posterior_collapses_at_first_step() {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y0 = noise(&mut rng, 3, 3);
        let yt = noise(&mut rng, 3, 3);
        let (mu, var) = posterior_params(&y0, &yt, 1, &s).unwrap();
        assert_eq!(var, 0.0);
        for (a, b) in mu.as_slice().iter().zip(y0.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn posterior_two_step_substitution_oracle() {
        // alpha = [0.99, 0.98] -> beta = [0.01, 0.02]
        let s = NoiseSchedule::linear(2, 0.01, 0.02).unwrap();
        let y0 = Image::filled(1, 1, 1.0);
        let y2 = Image::filled(1, 1, 0.5);
        let (mu, var) = posterior_params(&y0, &y2, 2, &s).unwrap();
        // symbol-by-symbol substitution
        let a1 = 0.99f64;
        let a2 = 0.98f64;
        let ab1 = a1;
        let ab2 = a1 * a2;
        let b2 = 1.0 - a2;
        let mu_oracle = ab1.sqrt() * b2 / (1.0 - ab2) * 1.0 + a2.sqrt() * (1.0 - ab1) / (1.0 - ab2) * 0.5;
        let var_oracle = (1.0 - ab1) / (1.0 - ab2) * (1.0 - a2);
        assert!((mu.get(0, 0) - mu_oracle).abs() < 1e-12);
        assert!((var - var_oracle).abs() < 1e-15);
        // frozen values from the oracle
        assert!((mu.get(0, 0) - 0.833_875_711_759_672_2).abs() < 1e-12);
        assert!((var - 0.006_711_409_395_973_154).abs() < 1e-15);
    }

    #[test]
    fn posterior_mean_is_consistent_with_marginal_scaling() {
        // y0 = c, yt = sqrt(ab_t) c  =>  mu = sqrt(ab_{t-1}) c
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let c = Image::filled(2, 2, 0.37);
        for t in 1..=s.steps() {
            let yt = c.map(|v| v * s.alpha_bar(t).sqrt());
            let (mu, var) = posterior_params(&c, &yt, t, &s).unwrap();
            assert!(var >= 0.0);
            for v in mu.as_slice() {
                assert!((v - 0.37 * s.alpha_bar(t - 1).sqrt()).abs() < 1e-12, "t={t} mu={v}");
            }
        }
    }

    #[test]
    fn posterior_coefficient_sum() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let first = s.posterior(1).unwrap();
        assert_eq!(first.y0 + first.yt, 1.0);
        for t in 2..=s.steps() {
            let p = s.posterior(t).unwrap();
            let (ab_prev, ab) = (s.alpha_bar(t - 1), s.alpha_bar(t));
            let expected =
                (ab_prev.sqrt() * s.beta(t) + s.alpha(t).sqrt() * (1.0 - ab_prev)) / (1.0 - ab);
            assert!((p.y0 + p.yt - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn ddpm_first_step_is_noise_free() {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let yt = noise(&mut rng, 2, 2);
        let y0 = noise(&mut rng, 2, 2);
        let eps = noise(&mut rng, 2, 2);
        let (mu, _) = posterior_params(&y0, &yt, 1, &s).unwrap();
        for mode in [ReverseNoise::Posterior, ReverseNoise::AlgorithmLiteral] {
            assert_eq!(ddpm_reverse_step(&yt, &y0, 1, &s, &eps, mode).unwrap(), mu);
        }
    }

    #[test]
    fn ddpm_rejects_shape_mismatch() {
        let s = schedule();
        let a = Image::zeros(2, 2);
        let b = Image::zeros(2, 3);
        assert!(ddpm_reverse_step(&a, &b, 5, &s, &a, ReverseNoise::Posterior).is_err());
    }

    #[test]
    fn ddpm_oracle_chain_without_noise_recovers_clean_image() {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y0 = noise(&mut rng, 4, 4);
        let zero = Image::zeros(4, 4);
        let mut y = noise(&mut rng, 4, 4);
        for t in (1..=s.steps()).rev() {
            y = ddpm_reverse_step(&y, &y0, t, &s, &zero, ReverseNoise::Posterior).unwrap();
        }
        for (a, b) in y.as_slice().iter().zip(y0.as_slice()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn ddim_final_step_returns_prediction() {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let yt = noise(&mut rng, 3, 3);
        let y0 = noise(&mut rng, 3, 3);
        let out = ddim_reverse_step(&yt, &y0, 10, 0, &s).unwrap();
        assert_eq!(out, y0);
    }

    #[test]
    fn ddim_zero_residual() {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let y0 = noise(&mut rng, 3, 3);
        let t = 50;
        let yt = y0.map(|v| s.alpha_bar(t).sqrt() * v);
        let out = ddim_reverse_step(&yt, &y0, t, 20, &s).unwrap();
        for (a, b) in out.as_slice().iter().zip(y0.as_slice()) {
            assert!((a - s.alpha_bar(20).sqrt() * b).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_rejects_non_decreasing_steps() {
        let s = schedule();
        let a = Image::zeros(1, 1);
        assert!(ddim_reverse_step(&a, &a, 10, 10, &s).is_err());
        assert!(ddim_reverse_step(&a, &a, 10, 11, &s).is_err());
    }

    #[test]
    fn ddim_oracle_chain_recovers_clean_image() {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let y0 = noise(&mut rng, 8, 8);
        let mut y = noise(&mut rng, 8, 8);
        let steps = s.strided_steps(10).unwrap();
        for (i, &t) in steps.iter().enumerate() {
            let prev = steps.get(i + 1).copied().unwrap_or(0);
            y = ddim_reverse_step(&y, &y0, t, prev, &s).unwrap();
        }
        for (a, b) in y.as_slice().iter().zip(y0.as_slice()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
