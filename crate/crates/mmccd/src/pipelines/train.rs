use mmccd_core::diffusion::marginal_sample;
use mmccd_core::masking::apply_strip_noise;
use mmccd_core::phantom::SlicePair;
use mmccd_core::{Image, MaskSet, NoiseSchedule};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::models::{stack, Network};
use crate::nn::{Adam, AdamConfig, Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
    /// Steps between periodic checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            max_steps: 2000,
            clip_norm: 1.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || self.batch_size == 0 {
            return Err(PipelineError::Config("learning rate and batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> Adam {
        Adam::new(AdamConfig {
            learning_rate: self.learning_rate,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            ..AdamConfig::default()
        })
    }
}

/// What a network regresses onto.
#[derive(Debug, Clone)]
pub enum Objective {
    /// Masked conditional denoiser: `f(y_t, x_r, t) -> y`.
    Mmccd { schedule: NoiseSchedule, masks: MaskSet },
    /// Deterministic translation, `x -> y` when `forward`, else `y -> x`.
    Translate { forward: bool },
    /// Reconstruction of `x`, optionally from a Gaussian-corrupted input.
    Reconstruct { noise_sigma: f64, kl_weight: f64 },
    /// Unconditional denoiser on `x`.
    Unconditional { schedule: NoiseSchedule },
}

/// Mean over the batch of the per-sample L2 norm `||pred - target||_2`, and
/// its gradient with respect to `pred`.
pub fn l2_loss<T: Real>(pred: &Tensor<T>, targets: &[&Image]) -> (f64, Tensor<T>) {
    let batch = pred.batch;
    let mut grad = Tensor::zeros(1, batch, pred.height, pred.width);
    let mut total = 0.0;
    for (n, target) in targets.iter().enumerate() {
        let p = pred.image(0, n);
        let norm = p
            .iter()
            .zip(target.as_slice())
            .map(|(&a, &b)| {
                let d = a.as_f64() - b;
                d * d
            })
            .sum::<f64>()
            .sqrt();
        total += norm;
        if norm > 0.0 {
            let scale = 1.0 / (norm * batch as f64);
            for ((g, &a), &b) in grad.image_mut(0, n).iter_mut().zip(p).zip(target.as_slice()) {
                *g = T::from_f64_lossy((a.as_f64() - b) * scale);
            }
        }
    }
    (total / batch as f64, grad)
}

fn normal_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |_, _| rng.sample(StandardNormal))
}

fn finish_step(net: &mut Network, opt: &mut Adam, pred: &Tensor<f32>, targets: &[&Image], kl_weight: f64) -> Result<f64> {
    let (mut loss, grad) = l2_loss(pred, targets);
    loss += kl_weight * net.unet.last_kl();
    if !loss.is_finite() {
        return Err(PipelineError::Diverged {
            step: net.step,
            what: format!("loss is {loss}"),
        });
    }
    net.unet.backward(&grad, kl_weight);
    let unet = &mut net.unet;
    opt.step::<f32>(&mut |f| unet.visit_params(f));
    net.step += 1;
    Ok(loss)
}

fn forward_train(net: &mut Network, inputs: &[Vec<&Image>], steps: Option<&[usize]>) -> Result<Tensor<f32>> {
    let x = stack(inputs)?;
    net.unet.forward(&x, steps, true).map_err(|e| match PipelineError::from(e) {
        PipelineError::Diverged { what, .. } => PipelineError::Diverged { step: net.step, what },
        other => other,
    })
}

/// One optimizer step of the masked conditional denoiser. Per sample: a
/// uniform step `t`, a uniform mask from `masks`, noise for the strip and for
/// the target marginal.
pub fn train_step_mmccd(
    f: &mut Network,
    opt: &mut Adam,
    batch: &[&SlicePair],
    schedule: &NoiseSchedule,
    masks: &MaskSet,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut noisy = Vec::with_capacity(batch.len());
    let mut conds = Vec::with_capacity(batch.len());
    let mut steps = Vec::with_capacity(batch.len());
    for pair in batch {
        let (h, w) = pair.x.shape();
        let t = rng.random_range(1..=schedule.steps());
        let strip = &masks.masks()[rng.random_range(0..masks.len())];
        let eps_x = normal_image(rng, h, w);
        let eps_y = normal_image(rng, h, w);
        conds.push(apply_strip_noise(&pair.x, strip, &eps_x)?);
        noisy.push(marginal_sample(&pair.y, t, &eps_y, schedule)?);
        steps.push(t);
    }
    let pred = forward_train(f, &[noisy.iter().collect(), conds.iter().collect()], Some(&steps))?;
    let targets: Vec<&Image> = batch.iter().map(|p| &p.y).collect();
    finish_step(f, opt, &pred, &targets, 0.0)
}

/// Supervised regression from `inputs` to `targets`.
pub fn train_step_translation(net: &mut Network, opt: &mut Adam, inputs: &[&Image], targets: &[&Image]) -> Result<f64> {
    let pred = forward_train(net, &[inputs.to_vec()], None)?;
    finish_step(net, opt, &pred, targets, 0.0)
}

/// One step of the backward translator `g: y -> x`.
pub fn train_step_backward(g: &mut Network, opt: &mut Adam, batch: &[&SlicePair]) -> Result<f64> {
    let ys: Vec<&Image> = batch.iter().map(|p| &p.y).collect();
    let xs: Vec<&Image> = batch.iter().map(|p| &p.x).collect();
    train_step_translation(g, opt, &ys, &xs)
}

/// Reconstruction step for the autoencoder family. `noise_sigma > 0`
/// corrupts the input; the target is always the clean image.
pub fn train_step_reconstruction(
    net: &mut Network,
    opt: &mut Adam,
    batch: &[&Image],
    noise_sigma: f64,
    kl_weight: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let corrupted: Vec<Image> = batch
        .iter()
        .map(|x| {
            if noise_sigma > 0.0 {
                let (h, w) = x.shape();
                let n = normal_image(rng, h, w);
                x.axpby(1.0, &n, noise_sigma)
            } else {
                Ok((*x).clone())
            }
        })
        .collect::<std::result::Result<_, _>>()?;
    let pred = forward_train(net, &[corrupted.iter().collect()], None)?;
    finish_step(net, opt, &pred, batch, kl_weight)
}

/// Unconditional denoiser step on single-modality images.
pub fn train_step_unconditional(
    net: &mut Network,
    opt: &mut Adam,
    batch: &[&Image],
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut noisy = Vec::with_capacity(batch.len());
    let mut steps = Vec::with_capacity(batch.len());
    for x in batch {
        let (h, w) = x.shape();
        let t = rng.random_range(1..=schedule.steps());
        noisy.push(marginal_sample(x, t, &normal_image(rng, h, w), schedule)?);
        steps.push(t);
    }
    let pred = forward_train(net, &[noisy.iter().collect()], Some(&steps))?;
    finish_step(net, opt, &pred, batch, 0.0)
}

/// Trains `net` on `data` until `config.max_steps`, continuing from
/// `net.step`. Batches are drawn uniformly with replacement. `hook` sees the
/// network after every step with the step's loss.
pub fn fit(
    net: &mut Network,
    objective: &Objective,
    data: &[SlicePair],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut hook: impl FnMut(&mut Network, f64) -> Result<()>,
) -> Result<Vec<f64>> {
    config.validate()?;
    if data.is_empty() {
        return Err(PipelineError::Config("no training slices".into()));
    }
    if data.iter().any(|p| !p.anomaly.is_empty_set()) {
        return Err(PipelineError::Config("training slices must be anomaly-free".into()));
    }
    let mut opt = config.optimizer();
    let mut losses = Vec::new();
    while net.step < config.max_steps {
        let batch: Vec<&SlicePair> = (0..config.batch_size)
            .map(|_| &data[rng.random_range(0..data.len())])
            .collect();
        let loss = match objective {
            Objective::Mmccd { schedule, masks } => train_step_mmccd(net, &mut opt, &batch, schedule, masks, rng)?,
            Objective::Translate { forward: true } => {
                let xs: Vec<&Image> = batch.iter().map(|p| &p.x).collect();
                let ys: Vec<&Image> = batch.iter().map(|p| &p.y).collect();
                train_step_translation(net, &mut opt, &xs, &ys)?
            }
            Objective::Translate { forward: false } => train_step_backward(net, &mut opt, &batch)?,
            Objective::Reconstruct { noise_sigma, kl_weight } => {
                let xs: Vec<&Image> = batch.iter().map(|p| &p.x).collect();
                train_step_reconstruction(net, &mut opt, &xs, *noise_sigma, *kl_weight, rng)?
            }
            Objective::Unconditional { schedule } => {
                let xs: Vec<&Image> = batch.iter().map(|p| &p.x).collect();
                train_step_unconditional(net, &mut opt, &xs, schedule, rng)?
            }
        };
        losses.push(loss);
        hook(net, loss)?;
    }
    Ok(losses)
}
