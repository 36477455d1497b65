use std::collections::BTreeMap;

use mmccd_core::metrics::{mean_dice_at, select_threshold, summarize, MetricsSummary};
use mmccd_core::phantom::SlicePair;
use mmccd_core::{BinaryMask, Image, MaskSet, NoiseSchedule, Orientation, ScheduleDescriptor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::infer::{
    check_collapse, infer_cyclic_unet, infer_ddpm_uncond, infer_mmccd, infer_reconstruction, ErrorKind,
    InferenceResult, SamplerConfig,
};
use super::train::{fit, Objective, TrainConfig};
use super::{PipelineError, Result};
use crate::models::{Network, NetworkRole};
use crate::nn::{Latent, UnetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mmccd,
    CyclicUnet,
    Ae,
    Vae,
    Dae,
    DdpmUncond,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Mmccd,
        Method::CyclicUnet,
        Method::Ae,
        Method::Vae,
        Method::Dae,
        Method::DdpmUncond,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mmccd => "mmccd",
            Method::CyclicUnet => "cyclic_unet",
            Method::Ae => "ae",
            Method::Vae => "vae",
            Method::Dae => "dae",
            Method::DdpmUncond => "ddpm_uncond",
        }
    }

    /// Row label in reports.
    pub fn label(self) -> &'static str {
        match self {
            Method::Mmccd => "MMCCD",
            Method::CyclicUnet => "Cyclic UNet",
            Method::Ae => "AE",
            Method::Vae => "VAE",
            Method::Dae => "DAE",
            Method::DdpmUncond => "DDPM",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Whether the method translates between two modalities.
    pub fn is_translation(self) -> bool {
        matches!(self, Method::Mmccd | Method::CyclicUnet)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSettings {
    pub base_width: usize,
    pub depth: usize,
    /// Bottleneck channels of the AE and VAE.
    pub latent_channels: usize,
}

impl Default for NetworkSettings {
    fn default() -> Self {
        Self {
            base_width: 32,
            depth: 3,
            latent_channels: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSettings {
    pub extent: usize,
    pub stride: usize,
    pub orientations: Vec<Orientation>,
}

impl Default for MaskSettings {
    fn default() -> Self {
        Self {
            extent: 16,
            stride: 2,
            orientations: vec![Orientation::Horizontal, Orientation::Vertical],
        }
    }
}

impl MaskSettings {
    pub fn build(&self, size: usize) -> Result<MaskSet> {
        Ok(MaskSet::build(size, size, self.extent, self.stride, &self.orientations)?)
    }
}

/// Validation sweeps of baseline hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSettings {
    pub dae_sigmas: Vec<f64>,
    pub vae_kl_weights: Vec<f64>,
    /// Partial-noising levels of the unconditional DDPM as fractions of T.
    pub ddpm_t_fractions: Vec<f64>,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        Self {
            dae_sigmas: vec![0.1, 0.2, 0.5],
            vae_kl_weights: vec![1e-3],
            ddpm_t_fractions: vec![0.25, 0.5, 0.75],
        }
    }
}

/// Everything a method needs to train and infer, resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSettings {
    pub image_size: usize,
    pub network: NetworkSettings,
    pub train: TrainConfig,
    pub schedule: ScheduleDescriptor,
    pub masks: MaskSettings,
    pub sampler: SamplerConfig,
    pub error: ErrorKind,
    pub baselines: BaselineSettings,
    pub seed: u64,
    pub workers: usize,
    pub keep_per_mask_errors: bool,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            image_size: 128,
            network: NetworkSettings::default(),
            train: TrainConfig::default(),
            schedule: ScheduleDescriptor::default(),
            masks: MaskSettings::default(),
            sampler: SamplerConfig::default(),
            error: ErrorKind::Squared,
            baselines: BaselineSettings::default(),
            seed: 0,
            workers: 1,
            keep_per_mask_errors: false,
        }
    }
}

impl ExperimentSettings {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let schedule = NoiseSchedule::new(self.schedule)?;
        let last = schedule.alpha_bar(schedule.steps());
        if last > 0.01 {
            log::warn!(
                "alpha_bar at the last step is {last:.3}; the forward process does not reach noise \
                 (raise beta_end for short schedules)"
            );
        }
        self.masks.build(self.image_size)?;
        self.unet_config(NetworkRole::Translator, "probe").validate()?;
        self.sampler.sequence(&NoiseSchedule::new(self.schedule)?)?;
        let b = &self.baselines;
        if b.dae_sigmas.is_empty() || b.vae_kl_weights.is_empty() || b.ddpm_t_fractions.is_empty() {
            return Err(PipelineError::Config("baseline sweeps need at least one value".into()));
        }
        if b.ddpm_t_fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(PipelineError::Config("DDPM noise fractions must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn unet_config(&self, role: NetworkRole, name: &str) -> UnetConfig {
        let reconstruct_only = matches!(role, NetworkRole::Autoencoder | NetworkRole::VariationalAutoencoder);
        UnetConfig {
            base_width: self.network.base_width,
            depth: self.network.depth,
            time_embedding: role.time_conditioned(),
            in_channels: role.in_channels(),
            out_channels: 1,
            skip_connections: !reconstruct_only,
            latent: match role {
                NetworkRole::Autoencoder => Latent::Bottleneck(self.network.latent_channels),
                NetworkRole::VariationalAutoencoder => Latent::Variational(self.network.latent_channels),
                _ => Latent::None,
            },
            input_size: self.image_size,
            seed: self.seed ^ stream_of(name),
        }
    }

    fn noise_schedule(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::new(self.schedule)?)
    }
}

/// FNV-1a, used to derive independent random streams from names.
fn stream_of(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Trained networks of one method plus the validation-selected settings.
#[derive(Debug, Clone)]
pub struct TrainedMethod {
    pub method: Method,
    pub networks: BTreeMap<String, Network>,
    /// Hyper-parameters picked on validation (`dae_sigma`, `t_test`, ...).
    pub chosen: BTreeMap<String, f64>,
}

impl TrainedMethod {
    /// Names of the networks a method consists of.
    pub fn network_names(method: Method) -> &'static [&'static str] {
        match method {
            Method::Mmccd => &["f_diffusion", "g"],
            Method::CyclicUnet => &["f_translate", "g"],
            Method::Ae => &["ae"],
            Method::Vae => &["vae"],
            Method::Dae => &["dae"],
            Method::DdpmUncond => &["ddpm"],
        }
    }

    fn network(&self, name: &str) -> Result<&Network> {
        self.networks
            .get(name)
            .ok_or_else(|| PipelineError::Config(format!("{} is missing network {name}", self.method.name())))
    }

    /// Reads chosen values back from network metadata.
    pub fn from_networks(method: Method, networks: BTreeMap<String, Network>) -> Result<Self> {
        let mut chosen = BTreeMap::new();
        for name in Self::network_names(method) {
            let net = networks
                .get(*name)
                .ok_or_else(|| PipelineError::Config(format!("{} is missing network {name}", method.name())))?;
            for (k, v) in &net.metadata {
                if let Some(key) = k.strip_prefix("chosen.") {
                    if let Ok(v) = v.parse() {
                        chosen.insert(key.to_string(), v);
                    }
                }
            }
        }
        Ok(Self { method, networks, chosen })
    }
}

/// Progress callback: network (or sweep candidate) name, step, loss.
pub type Progress<'a> = dyn FnMut(&str, u64, f64) + 'a;

/// Checkpoint callback, invoked every `checkpoint_every` steps. The
/// network's `candidate` metadata names the sweep candidate it belongs to.
pub type Checkpoint<'a> = dyn FnMut(&mut Network) -> Result<()> + 'a;

/// Networks to reuse or continue, plus training callbacks.
pub struct TrainHooks<'a, 'b> {
    /// Finished networks, used as they are (e.g. a shared backward translator).
    pub reuse: &'a BTreeMap<String, Network>,
    /// Partially trained networks keyed by candidate name; training continues
    /// from their step counter.
    pub resume: &'a BTreeMap<String, Network>,
    pub progress: &'a mut Progress<'b>,
    pub checkpoint: &'a mut Checkpoint<'b>,
}

fn role_for(name: &str) -> NetworkRole {
    match name {
        "f_diffusion" => NetworkRole::Denoiser,
        "ddpm" => NetworkRole::UnconditionalDenoiser,
        "ae" => NetworkRole::Autoencoder,
        "vae" => NetworkRole::VariationalAutoencoder,
        "dae" => NetworkRole::DenoisingAutoencoder,
        _ => NetworkRole::Translator,
    }
}

/// Builds the untrained network `name` of a method.
pub fn initial_network(settings: &ExperimentSettings, method: Method, name: &str) -> Result<Network> {
    let role = role_for(name);
    let schedule = role.time_conditioned().then_some(settings.schedule);
    let mut net = Network::new(role, settings.unet_config(role, name), schedule)?;
    net.metadata.insert("method".into(), method.name().into());
    net.metadata.insert("network".into(), name.into());
    Ok(net)
}

fn objective_for(settings: &ExperimentSettings, name: &str, noise_sigma: f64, kl_weight: f64) -> Result<Objective> {
    Ok(match name {
        "f_diffusion" => Objective::Mmccd {
            schedule: settings.noise_schedule()?,
            masks: settings.masks.build(settings.image_size)?,
        },
        "f_translate" => Objective::Translate { forward: true },
        "g" => Objective::Translate { forward: false },
        "ddpm" => Objective::Unconditional {
            schedule: settings.noise_schedule()?,
        },
        _ => Objective::Reconstruct { noise_sigma, kl_weight },
    })
}

/// Trains (or continues training) one network to `settings.train.max_steps`.
pub fn train_network(
    settings: &ExperimentSettings,
    net: &mut Network,
    train: &[SlicePair],
    noise_sigma: f64,
    kl_weight: f64,
    progress: &mut Progress<'_>,
    mut checkpoint: impl FnMut(&mut Network) -> Result<()>,
) -> Result<Vec<f64>> {
    let name = net.metadata.get("network").cloned().unwrap_or_default();
    let label = net.metadata.get("candidate").cloned().unwrap_or_else(|| name.clone());
    let objective = objective_for(settings, &name, noise_sigma, kl_weight)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    rng.set_stream(stream_of(&name) ^ net.step);
    let every = settings.train.checkpoint_every;
    fit(net, &objective, train, &settings.train, &mut rng, |net, loss| {
        progress(&label, net.step, loss);
        if every > 0 && net.step % every == 0 {
            checkpoint(net)?;
        }
        Ok(())
    })
}

/// Trains every network of `method`. Networks found in `reuse` under the
/// same name are cloned instead of retrained (e.g. the shared backward
/// translator). Baseline sweeps are resolved on `val`.
pub fn train_method(
    method: Method,
    settings: &ExperimentSettings,
    train: &[SlicePair],
    val: &[SlicePair],
    hooks: TrainHooks<'_, '_>,
) -> Result<TrainedMethod> {
    settings.validate()?;
    let TrainHooks { reuse, resume, progress, checkpoint } = hooks;
    let mut networks = BTreeMap::new();
    let mut chosen = BTreeMap::new();
    let sweep: Vec<(f64, f64)> = match method {
        Method::Dae => settings.baselines.dae_sigmas.iter().map(|&s| (s, 0.0)).collect(),
        Method::Vae => settings.baselines.vae_kl_weights.iter().map(|&k| (0.0, k)).collect(),
        _ => vec![(0.0, 0.0)],
    };
    for name in TrainedMethod::network_names(method) {
        if let Some(net) = reuse.get(*name) {
            for (k, v) in &net.metadata {
                if let (Some(key), Ok(v)) = (k.strip_prefix("chosen."), v.parse()) {
                    chosen.insert(key.to_string(), v);
                }
            }
            networks.insert(name.to_string(), net.clone());
            continue;
        }
        let mut best: Option<(f64, Network, (f64, f64))> = None;
        for &(sigma, kl) in &sweep {
            let key = match method {
                Method::Dae if sweep.len() > 1 => format!("{name}@sigma={sigma}"),
                Method::Vae if sweep.len() > 1 => format!("{name}@kl={kl}"),
                _ => name.to_string(),
            };
            let mut net = match resume.get(&key) {
                Some(net) => net.clone(),
                None => initial_network(settings, method, name)?,
            };
            net.metadata.insert("candidate".into(), key);
            train_network(settings, &mut net, train, sigma, kl, progress, |n| checkpoint(n))?;
            if sweep.len() == 1 || val.is_empty() {
                best = Some((0.0, net, (sigma, kl)));
                break;
            }
            let candidate = TrainedMethod {
                method,
                networks: BTreeMap::from([(name.to_string(), net.clone())]),
                chosen: BTreeMap::new(),
            };
            let dice = validation_dice(&candidate, settings, val)?;
            log::info!("{} sweep sigma={sigma} kl={kl}: validation dice {dice:.4}", method.name());
            if best.as_ref().is_none_or(|(d, _, _)| dice > *d) {
                best = Some((dice, net, (sigma, kl)));
            }
        }
        let (_, mut net, (sigma, kl)) = best.expect("sweep has at least one value");
        match method {
            Method::Dae => {
                chosen.insert("dae_sigma".to_string(), sigma);
            }
            Method::Vae => {
                chosen.insert("vae_kl_weight".to_string(), kl);
            }
            _ => {}
        }
        for (k, v) in &chosen {
            net.metadata.insert(format!("chosen.{k}"), v.to_string());
        }
        networks.insert(name.to_string(), net);
    }
    let mut trained = TrainedMethod {
        method,
        networks,
        chosen,
    };
    if method == Method::DdpmUncond {
        let steps = settings.schedule.steps;
        let levels: Vec<usize> = settings
            .baselines
            .ddpm_t_fractions
            .iter()
            .map(|f| ((f * steps as f64).round() as usize).clamp(1, steps))
            .collect();
        let mut best = (f64::NEG_INFINITY, levels[0]);
        if levels.len() > 1 && !val.is_empty() {
            for &t in &levels {
                trained.chosen.insert("t_test".into(), t as f64);
                let dice = validation_dice(&trained, settings, val)?;
                log::info!("ddpm_uncond sweep t_test={t}: validation dice {dice:.4}");
                if dice > best.0 {
                    best = (dice, t);
                }
            }
        }
        trained.chosen.insert("t_test".into(), best.1 as f64);
        if let Some(net) = trained.networks.get_mut("ddpm") {
            net.metadata.insert("chosen.t_test".into(), best.1.to_string());
        }
    }
    Ok(trained)
}

fn validation_dice(trained: &TrainedMethod, settings: &ExperimentSettings, val: &[SlicePair]) -> Result<f64> {
    let results = infer_method(trained, settings, val)?;
    let scores: Vec<Image> = results.into_iter().map(|r| r.anomaly_score).collect();
    let gts: Vec<BinaryMask> = val.iter().map(|p| p.anomaly.clone()).collect();
    let h = select_threshold(&scores, &gts)?;
    Ok(mean_dice_at(&scores, &gts, h)?)
}

fn slice_rng(settings: &ExperimentSettings, pair: &SlicePair) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x1f3d_5b79);
    rng.set_stream(stream_of(&pair.subject_id) ^ (pair.slice_index as u64).rotate_left(32));
    rng
}

/// Scores every slice with `trained`. Slices run in parallel on
/// `settings.workers` threads; each slice has its own random stream, so the
/// output does not depend on the worker count.
pub fn infer_method(trained: &TrainedMethod, settings: &ExperimentSettings, slices: &[SlicePair]) -> Result<Vec<InferenceResult>> {
    let schedule = settings.noise_schedule()?;
    let masks = settings.masks.build(settings.image_size)?;
    for name in TrainedMethod::network_names(trained.method) {
        let net = trained.network(name)?;
        if net.input_size() != settings.image_size {
            return Err(PipelineError::Config(format!(
                "network {name} expects {}px images, data is {}px",
                net.input_size(),
                settings.image_size
            )));
        }
        if let Some(s) = net.schedule {
            if s != settings.schedule {
                return Err(PipelineError::Config(format!(
                    "network {name} was trained with a different noise schedule"
                )));
            }
        }
    }
    let t_test = trained.chosen.get("t_test").map(|&t| t as usize);
    let run = |nets: &mut BTreeMap<String, Network>, pair: &SlicePair| -> Result<InferenceResult> {
        let mut rng = slice_rng(settings, pair);
        let mut take = |name: &str| nets.remove(name).expect("network presence checked");
        let result = match trained.method {
            Method::Mmccd => {
                let (mut f, mut g) = (take("f_diffusion"), take("g"));
                let out = infer_mmccd(
                    &mut f,
                    &mut g,
                    &pair.x,
                    &masks,
                    &schedule,
                    &settings.sampler,
                    settings.error,
                    &mut rng,
                    false,
                );
                nets.insert("f_diffusion".into(), f);
                nets.insert("g".into(), g);
                let (mut r, _) = out?;
                if !settings.keep_per_mask_errors {
                    r.per_mask_errors = None;
                }
                r
            }
            Method::CyclicUnet => {
                let (mut f, mut g) = (take("f_translate"), take("g"));
                let out = infer_cyclic_unet(&mut f, &mut g, &pair.x, settings.error);
                nets.insert("f_translate".into(), f);
                nets.insert("g".into(), g);
                out?
            }
            Method::DdpmUncond => {
                let mut net = take("ddpm");
                let t = t_test.unwrap_or(schedule.steps() / 2);
                let out = infer_ddpm_uncond(&mut net, &pair.x, &schedule, t, &settings.sampler, settings.error, &mut rng);
                nets.insert("ddpm".into(), net);
                out?
            }
            Method::Ae | Method::Vae | Method::Dae => {
                let name = TrainedMethod::network_names(trained.method)[0];
                let mut net = take(name);
                let out = infer_reconstruction(&mut net, &pair.x, settings.error);
                nets.insert(name.into(), net);
                out?
            }
        };
        Ok(result)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.workers.max(1))
        .build()
        .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))?;
    pool.install(|| {
        slices
            .par_iter()
            .map_init(|| trained.networks.clone(), |nets, pair| run(nets, pair))
            .collect()
    })
}

/// Validation-selected threshold applied to test results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodScores {
    pub threshold: f64,
    pub validation_dice: f64,
    pub test: MetricsSummary,
    /// Every validation score map was zero (e.g. an identity cycle).
    pub collapsed: bool,
}

/// Picks `h` on validation, thresholds the test results in place and
/// computes the test metrics.
pub fn select_and_score(
    val: &[InferenceResult],
    val_gt: &[BinaryMask],
    test: &mut [InferenceResult],
    test_gt: &[BinaryMask],
) -> Result<MethodScores> {
    let val_scores: Vec<Image> = val.iter().map(|r| r.anomaly_score.clone()).collect();
    let collapsed = check_collapse(&val_scores);
    if collapsed {
        log::warn!("all validation score maps are zero; the model looks collapsed");
    }
    let threshold = select_threshold(&val_scores, val_gt)?;
    let validation_dice = mean_dice_at(&val_scores, val_gt, threshold)?;
    for r in test.iter_mut() {
        r.set_threshold(threshold);
    }
    let test_scores: Vec<Image> = test.iter().map(|r| r.anomaly_score.clone()).collect();
    Ok(MethodScores {
        threshold,
        validation_dice,
        test: summarize(&test_scores, test_gt, threshold)?,
        collapsed,
    })
}
