//! Experiment configuration: TOML file, environment and flag overrides.

use std::path::{Path, PathBuf};

use mmccd_core::normalize::Modality;
use mmccd_core::phantom::PhantomSpec;
use serde::{Deserialize, Serialize};

use super::CliError;
use crate::data::SplitCounts;
use crate::pipelines::{ExperimentSettings, Method};

pub const ENV_OUTPUT_ROOT: &str = "MMCCD_OUTPUT_ROOT";
pub const ENV_WORKERS: &str = "MMCCD_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum DataSource {
    Phantom,
    BratsDir,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Root of the subject directories when `source = "brats_dir"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub brats_dir: Option<PathBuf>,
    /// Phantom slices per split; ignored for BraTS input.
    pub counts: SplitCounts,
    /// Seed of the subject split for BraTS input.
    pub split_seed: u64,
    pub phantom: PhantomSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Phantom,
            brats_dir: None,
            counts: SplitCounts::default(),
            split_seed: 0,
            phantom: PhantomSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Method for single-method commands.
    pub method: Method,
    /// Methods run by `run-all`, in order.
    pub methods: Vec<Method>,
    pub modality_x: Modality,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modality_y: Option<Modality>,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub experiment: ExperimentSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Mmccd,
            methods: Method::ALL.to_vec(),
            modality_x: Modality::Flair,
            modality_y: Some(Modality::T2),
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            experiment: ExperimentSettings::default(),
        }
    }
}

/// Command-line values that take precedence over the file and environment.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// TOML experiment configuration.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides the config file and MMCCD_OUTPUT_ROOT).
    #[arg(long, short, global = true)]
    pub output: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for inference and ingestion (overrides MMCCD_WORKERS).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub modality_x: Option<String>,
    #[arg(long, global = true)]
    pub modality_y: Option<String>,
    #[arg(long, global = true, value_enum)]
    pub data_source: Option<DataSource>,
    #[arg(long, global = true)]
    pub brats_dir: Option<PathBuf>,
    /// Image side length used for training and inference.
    #[arg(long, global = true)]
    pub image_size: Option<usize>,
    #[arg(long, global = true)]
    pub max_steps: Option<u64>,
}

fn modality(s: &str) -> Result<Modality, CliError> {
    Modality::parse(s).ok_or_else(|| CliError::Config(format!("unknown modality {s:?} (expected flair, t1 or t2)")))
}

fn env_value<T: std::str::FromStr>(name: &str) -> Result<Option<T>, CliError> {
    match std::env::var(name) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{name}={v:?} is not valid"))),
        _ => Ok(None),
    }
}

/// Resolves defaults, then the config file, then the environment, then flags.
pub fn resolve(o: &Overrides, method: Option<Method>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &o.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(root) = env_value::<PathBuf>(ENV_OUTPUT_ROOT)? {
        cfg.output_dir = root;
    }
    if let Some(w) = env_value::<usize>(ENV_WORKERS)? {
        cfg.experiment.workers = w;
    }
    if let Some(p) = &o.output {
        cfg.output_dir = p.clone();
    }
    if let Some(s) = o.seed {
        cfg.experiment.seed = s;
        cfg.data.phantom.seed = s;
        cfg.data.split_seed = s;
    }
    if let Some(w) = o.workers {
        cfg.experiment.workers = w;
    }
    if let Some(m) = &o.modality_x {
        cfg.modality_x = modality(m)?;
    }
    if let Some(m) = &o.modality_y {
        cfg.modality_y = if m.eq_ignore_ascii_case("none") { None } else { Some(modality(m)?) };
    }
    if let Some(s) = o.data_source {
        cfg.data.source = s;
    }
    if let Some(d) = &o.brats_dir {
        cfg.data.brats_dir = Some(d.clone());
        cfg.data.source = DataSource::BratsDir;
    }
    if let Some(s) = o.image_size {
        cfg.experiment.image_size = s;
    }
    if let Some(s) = o.max_steps {
        cfg.experiment.train.max_steps = s;
    }
    if let Some(m) = method {
        cfg.method = m;
    }
    Ok(cfg)
}

impl ExperimentConfig {
    /// Checks everything that can be checked before compute starts.
    pub fn validate(&self, methods: &[Method]) -> Result<(), CliError> {
        if self.experiment.workers == 0 {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        self.experiment.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if methods.iter().any(|m| m.is_translation()) {
            match self.modality_y {
                None => return Err(CliError::Config("modality_y is required for mmccd and cyclic_unet".into())),
                Some(y) if y == self.modality_x => {
                    return Err(CliError::Config("modality_x and modality_y must differ".into()))
                }
                _ => {}
            }
        }
        match self.data.source {
            DataSource::Phantom => {
                self.data.phantom.validate().map_err(|e| CliError::Config(e.to_string()))?;
                if self.data.counts.train == 0 {
                    return Err(CliError::Config("phantom needs at least one training slice".into()));
                }
            }
            DataSource::BratsDir => {
                let dir = self
                    .data
                    .brats_dir
                    .as_ref()
                    .ok_or_else(|| CliError::Config("data.source = \"brats_dir\" needs data.brats_dir".into()))?;
                if !dir.is_dir() {
                    return Err(CliError::Config(format!(
                        "{} does not exist; expected {}",
                        dir.display(),
                        crate::data::brats::LAYOUT
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn model_dir(&self, method: Method) -> PathBuf {
        self.output_dir.join("models").join(method.name())
    }

    pub fn score_dir(&self, method: Method) -> PathBuf {
        self.output_dir.join("scores").join(method.name())
    }

    pub fn report_dir(&self) -> PathBuf {
        self.output_dir.join("reports")
    }

    /// Writes the resolved configuration next to the outputs of `command`.
    pub fn echo(&self, command: &str) -> Result<PathBuf, CliError> {
        let text = toml::to_string_pretty(self).map_err(|e| CliError::Runtime(format!("config echo: {e}")))?;
        let path = self.output_dir.join(format!("config.{command}.toml"));
        crate::data::pfm::write_atomic(&path, text.as_bytes()).map_err(|e| CliError::Runtime(e.to_string()))?;
        Ok(path)
    }
}

/// Parses a config file as written by [`ExperimentConfig::echo`].
pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}
