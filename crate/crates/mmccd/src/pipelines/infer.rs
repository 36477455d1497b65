use mmccd_core::diffusion::{ddim_reverse_step, ddpm_reverse_step, marginal_sample, ReverseNoise};
use mmccd_core::masking::{aggregate_anomaly, apply_strip_noise};
use mmccd_core::{BinaryMask, Image, MaskSet, NoiseSchedule};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::models::Network;

/// Clean-image predictor `(noisy, condition, t) -> y_0`.
pub trait Denoise {
    fn denoise(&mut self, noisy: &[Image], conds: Option<&[Image]>, t: usize) -> Result<Vec<Image>>;
}

/// Deterministic image-to-image map.
pub trait Translate {
    fn translate(&mut self, inputs: &[Image]) -> Result<Vec<Image>>;
}

impl Denoise for Network {
    fn denoise(&mut self, noisy: &[Image], conds: Option<&[Image]>, t: usize) -> Result<Vec<Image>> {
        let steps = vec![t; noisy.len()];
        let mut channels = vec![noisy.iter().collect::<Vec<_>>()];
        if let Some(c) = conds {
            channels.push(c.iter().collect());
        }
        Ok(self.predict(&channels, Some(&steps))?)
    }
}

impl Translate for Network {
    fn translate(&mut self, inputs: &[Image]) -> Result<Vec<Image>> {
        Ok(self.predict(&[inputs.iter().collect()], None)?)
    }
}

impl<F> Denoise for F
where
    F: FnMut(&[Image], Option<&[Image]>, usize) -> Result<Vec<Image>>,
{
    fn denoise(&mut self, noisy: &[Image], conds: Option<&[Image]>, t: usize) -> Result<Vec<Image>> {
        self(noisy, conds, t)
    }
}

/// Closure adapter for [`Translate`].
pub struct TranslateFn<F>(pub F);

impl<F: FnMut(&[Image]) -> Result<Vec<Image>>> Translate for TranslateFn<F> {
    fn translate(&mut self, inputs: &[Image]) -> Result<Vec<Image>> {
        (self.0)(inputs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Ddim,
    Ddpm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// DDIM step count; 0 means a tenth of the schedule length.
    pub steps: usize,
    pub reverse_noise: ReverseNoise,
    /// Masks sampled together in one network batch.
    pub mask_batch: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddim,
            steps: 0,
            reverse_noise: ReverseNoise::Posterior,
            mask_batch: 32,
        }
    }
}

impl SamplerConfig {
    /// Descending step sequence the sampler visits.
    pub fn sequence(&self, schedule: &NoiseSchedule) -> Result<Vec<usize>> {
        match self.kind {
            SamplerKind::Ddpm => Ok((1..=schedule.steps()).rev().collect()),
            SamplerKind::Ddim => {
                let n = if self.steps == 0 { (schedule.steps() / 10).max(1) } else { self.steps };
                if n > schedule.steps() {
                    return Err(PipelineError::Config(format!(
                        "{n} sampler steps exceed the {}-step schedule",
                        schedule.steps()
                    )));
                }
                Ok(schedule.strided_steps(n)?)
            }
        }
    }
}

/// Per-pixel error between a translated image and the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    #[default]
    Squared,
    Absolute,
}

impl ErrorKind {
    pub fn map(self, estimate: &Image, reference: &Image) -> Result<Image> {
        Ok(match self {
            ErrorKind::Squared => estimate.squared_error(reference)?,
            ErrorKind::Absolute => estimate.abs_error(reference)?,
        })
    }
}

/// Anomaly map of one slice with its segmentation at `threshold`.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub anomaly_score: Image,
    pub per_mask_errors: Option<Vec<Image>>,
    /// Pixels no mask covered (scored 0).
    pub uncovered: usize,
    pub threshold: f64,
    /// `anomaly_score > threshold`, pixel-wise.
    pub binary_mask: BinaryMask,
}

impl InferenceResult {
    /// Wraps a score map; the threshold starts at +inf (empty segmentation).
    pub fn new(anomaly_score: Image, per_mask_errors: Option<Vec<Image>>, uncovered: usize) -> Self {
        let binary_mask = anomaly_score.threshold(f64::INFINITY);
        Self {
            anomaly_score,
            per_mask_errors,
            uncovered,
            threshold: f64::INFINITY,
            binary_mask,
        }
    }

    pub fn set_threshold(&mut self, threshold: f64) {
        self.threshold = threshold;
        self.binary_mask = self.anomaly_score.threshold(threshold);
    }
}

/// Intermediate images of one MMCCD inference, in mask order.
#[derive(Debug, Clone, Default)]
pub struct MmccdTrace {
    pub conditions: Vec<Image>,
    pub generated: Vec<Image>,
    pub back_translated: Vec<Image>,
}

fn normal_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |_, _| rng.sample(StandardNormal))
}

fn reverse_chain<D: Denoise + ?Sized>(
    f: &mut D,
    mut current: Vec<Image>,
    conds: Option<&[Image]>,
    sequence: &[usize],
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Image>> {
    for (i, &t) in sequence.iter().enumerate() {
        let predicted = f.denoise(&current, conds, t)?;
        if predicted.len() != current.len() || predicted.iter().any(|p| !p.is_finite()) {
            return Err(PipelineError::Diverged {
                step: t as u64,
                what: "denoiser produced a non-finite or mis-sized batch".into(),
            });
        }
        current = match sampler.kind {
            SamplerKind::Ddim => {
                let t_prev = sequence.get(i + 1).copied().unwrap_or(0);
                current
                    .iter()
                    .zip(&predicted)
                    .map(|(y, y0)| ddim_reverse_step(y, y0, t, t_prev, schedule))
                    .collect::<std::result::Result<_, _>>()?
            }
            SamplerKind::Ddpm => current
                .iter()
                .zip(&predicted)
                .map(|(y, y0)| {
                    let (h, w) = y.shape();
                    let eps = if t > 1 { normal_image(rng, h, w) } else { Image::zeros(h, w) };
                    ddpm_reverse_step(y, y0, t, schedule, &eps, sampler.reverse_noise)
                })
                .collect::<std::result::Result<_, _>>()?,
        };
    }
    Ok(current)
}

/// Masked conditional cyclic translation of one slice. Every mask gets its
/// own strip noise; all masks start their reverse chain from one shared
/// `y_T`. The backward translator sees the generated images unmasked.
#[allow(clippy::too_many_arguments)]
pub fn infer_mmccd<D: Denoise + ?Sized, G: Translate + ?Sized>(
    f: &mut D,
    g: &mut G,
    x: &Image,
    masks: &MaskSet,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    error: ErrorKind,
    rng: &mut ChaCha8Rng,
    keep_trace: bool,
) -> Result<(InferenceResult, Option<MmccdTrace>)> {
    if masks.shape() != x.shape() {
        return Err(mmccd_core::Error::ShapeMismatch {
            left: x.shape(),
            right: masks.shape(),
        }
        .into());
    }
    let sequence = sampler.sequence(schedule)?;
    let (h, w) = x.shape();
    let conditions: Vec<Image> = masks
        .masks()
        .iter()
        .map(|strip| apply_strip_noise(x, strip, &normal_image(rng, h, w)))
        .collect::<std::result::Result<_, _>>()?;
    let y_start = normal_image(rng, h, w);
    let chunk = sampler.mask_batch.max(1);
    let mut errors = Vec::with_capacity(masks.len());
    let mut trace = keep_trace.then(MmccdTrace::default);
    for conds in conditions.chunks(chunk) {
        let start = vec![y_start.clone(); conds.len()];
        let generated = reverse_chain(f, start, Some(conds), &sequence, schedule, sampler, rng)?;
        let back = g.translate(&generated)?;
        for x_bar in &back {
            errors.push(error.map(x_bar, x)?);
        }
        if let Some(tr) = trace.as_mut() {
            tr.conditions.extend_from_slice(conds);
            tr.generated.extend(generated);
            tr.back_translated.extend(back);
        }
    }
    let agg = aggregate_anomaly(&errors, masks)?;
    if agg.uncovered > 0 {
        log::warn!("{} pixels are not covered by any mask and score 0", agg.uncovered);
    }
    Ok((InferenceResult::new(agg.score, Some(errors), agg.uncovered), trace))
}

/// `g(f(x))` compared with `x`.
pub fn infer_cyclic_unet<F: Translate + ?Sized, G: Translate + ?Sized>(
    f: &mut F,
    g: &mut G,
    x: &Image,
    error: ErrorKind,
) -> Result<InferenceResult> {
    let y = f.translate(std::slice::from_ref(x))?;
    let back = g.translate(&y)?;
    Ok(InferenceResult::new(error.map(&back[0], x)?, None, 0))
}

/// Reconstruction error of an autoencoder-style network.
pub fn infer_reconstruction<N: Translate + ?Sized>(net: &mut N, x: &Image, error: ErrorKind) -> Result<InferenceResult> {
    let recon = net.translate(std::slice::from_ref(x))?;
    Ok(InferenceResult::new(error.map(&recon[0], x)?, None, 0))
}

/// Partial noising to `t_test` followed by deterministic denoising back to
/// step 0; the score is the reconstruction error.
pub fn infer_ddpm_uncond<D: Denoise + ?Sized>(
    net: &mut D,
    x: &Image,
    schedule: &NoiseSchedule,
    t_test: usize,
    sampler: &SamplerConfig,
    error: ErrorKind,
    rng: &mut ChaCha8Rng,
) -> Result<InferenceResult> {
    schedule.check_step(t_test)?;
    let (h, w) = x.shape();
    let noisy = marginal_sample(x, t_test, &normal_image(rng, h, w), schedule)?;
    let mut sequence = vec![t_test];
    sequence.extend(sampler.sequence(schedule)?.into_iter().filter(|&t| t < t_test));
    let recon = reverse_chain(net, vec![noisy], None, &sequence, schedule, sampler, rng)?;
    Ok(InferenceResult::new(error.map(&recon[0], x)?, None, 0))
}

/// True when every score map is numerically zero, e.g. an identity cycle.
pub fn check_collapse(scores: &[Image]) -> bool {
    scores.iter().all(|s| s.as_slice().iter().all(|v| v.abs() <= 1e-12))
}
