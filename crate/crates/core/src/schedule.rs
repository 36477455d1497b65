//! Fixed variance schedules for the forward noising chain.

use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Everything needed to rebuild a schedule bit-for-bit; stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ScheduleDescriptor {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleDescriptor {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Per-step `alpha`, `beta = 1 - alpha` and cumulative `alpha_bar`, indexed
/// by step `t` in `1..=steps`. `alpha_bar(0)` is defined as 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    descriptor: ScheduleDescriptor,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Coefficients of the tractable posterior `q(y_{t-1} | y_t, y_0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoefficients {
    /// Weight applied to `y_0`.
    pub y0: f64,
    /// Weight applied to `y_t`.
    pub yt: f64,
    /// Posterior variance.
    pub variance: f64,
}

impl NoiseSchedule {
    pub fn new(descriptor: ScheduleDescriptor) -> Result<Self> {
        match descriptor.kind {
            ScheduleKind::Linear => {
                Self::linear(descriptor.steps, descriptor.beta_start, descriptor.beta_end)
            }
        }
    }

    /// Betas linearly spaced from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("at least one step is required"));
        }
        if !(beta_start > 0.0 && beta_start < 1.0 && beta_end > 0.0 && beta_end < 1.0) {
            return Err(Error::InvalidSchedule("betas must lie in (0, 1)"));
        }
        if beta_start > beta_end {
            return Err(Error::InvalidSchedule("beta_start must not exceed beta_end"));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(
            ScheduleDescriptor {
                kind: ScheduleKind::Linear,
                steps,
                beta_start,
                beta_end,
            },
            betas,
        )
    }

    fn from_betas(descriptor: ScheduleDescriptor, betas: Vec<f64>) -> Result<Self> {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            descriptor,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn descriptor(&self) -> ScheduleDescriptor {
        self.descriptor
    }

    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }

    /// # Panics
    /// If `t` is outside `1..=steps`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// # Panics
    /// If `t` is outside `1..=steps`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative product of alphas up to `t`; 1 at `t = 0`.
    ///
    /// # Panics
    /// If `t > steps`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))` for the closed-form marginal.
    pub fn marginal_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_step(t)?;
        let ab = self.alpha_bar(t);
        Ok((libm::sqrt(ab), libm::sqrt(1.0 - ab)))
    }

    pub fn posterior(&self, t: usize) -> Result<PosteriorCoefficients> {
        self.check_step(t)?;
        let ab_t = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let one_minus = 1.0 - ab_t;
        if one_minus <= 0.0 {
            return Err(Error::DegeneratePosterior(t));
        }
        if t == 1 {
            // beta_1 = 1 - alpha_bar_1 and alpha_bar_0 = 1: mean is y_0, no spread.
            return Ok(PosteriorCoefficients {
                y0: 1.0,
                yt: 0.0,
                variance: 0.0,
            });
        }
        let alpha = self.alpha(t);
        let beta = self.beta(t);
        let variance = ((1.0 - ab_prev) / one_minus * (1.0 - alpha)).max(0.0);
        Ok(PosteriorCoefficients {
            y0: libm::sqrt(ab_prev) * beta / one_minus,
            yt: libm::sqrt(alpha) * (1.0 - ab_prev) / one_minus,
            variance,
        })
    }

    /// Descending sub-sequence of `count` evenly spaced steps ending at `steps / count`
    /// (rounded), used by the accelerated deterministic sampler. The final
    /// reverse update goes from the last entry to step 0.
    pub fn strided_steps(&self, count: usize) -> Result<Vec<usize>> {
        let total = self.steps();
        if count == 0 || count > total {
            return Err(Error::InvalidArgument(
                "sampler step count must lie in 1..=schedule steps",
            ));
        }
        let mut out: Vec<usize> = (0..count)
            .map(|k| {
                let t = libm::round(total as f64 * (count - k) as f64 / count as f64) as usize;
                t.clamp(1, total)
            })
            .collect();
        out.dedup();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alphas(), &[0.5]);
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn two_step_products() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert!((s.betas()[0] - 0.1).abs() < 1e-15);
        assert!((s.betas()[1] - 0.2).abs() < 1e-15);
        // direct product oracle: 0.9 and 0.9 * 0.8
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_ends_near_zero() {
        let s = NoiseSchedule::new(ScheduleDescriptor::default()).unwrap();
        // independent oracle: log-space accumulation of the same linear betas
        let mut log_ab = 0.0f64;
        for i in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
            log_ab += libm::log1p(-beta);
        }
        let oracle = libm::exp(log_ab);
        assert!(oracle < 1e-4);
        assert!(s.alpha_bar(1000) < 1e-4);
        assert!((s.alpha_bar(1000) - oracle).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(NoiseSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        for t in 1..=s.steps() {
            assert!(s.alpha(t) > 0.0 && s.alpha(t) < 1.0);
            assert_eq!(s.beta(t) + s.alpha(t), 1.0);
            assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn strided_steps_are_tenfold() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let steps = s.strided_steps(100).unwrap();
        assert_eq!(steps.len(), 100);
        assert_eq!(steps[0], 1000);
        assert_eq!(*steps.last().unwrap(), 10);
        assert!(steps.windows(2).all(|w| w[0] - w[1] == 10));
    }
}
