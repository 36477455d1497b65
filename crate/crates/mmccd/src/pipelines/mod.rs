//! Training objectives, inference procedures and the per-method drivers.

mod experiment;
mod infer;
mod train;

pub use experiment::{
    infer_method, initial_network, select_and_score, train_method, train_network, BaselineSettings,
    ExperimentSettings, MaskSettings, Checkpoint, Method, MethodScores, NetworkSettings, Progress, TrainHooks, TrainedMethod,
};
pub use infer::{
    check_collapse, infer_cyclic_unet, infer_mmccd, infer_reconstruction, infer_ddpm_uncond, Denoise, ErrorKind,
    InferenceResult, MmccdTrace, SamplerConfig, SamplerKind, Translate, TranslateFn,
};
pub use train::{
    fit, l2_loss, train_step_backward, train_step_mmccd, train_step_reconstruction, train_step_translation,
    train_step_unconditional, Objective, TrainConfig,
};

use crate::models::ModelError;
use crate::nn::UnetError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Core(#[from] mmccd_core::Error),
    #[error(transparent)]
    Model(ModelError),
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: u64, what: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Network(UnetError::NonFinite(what)) => PipelineError::Diverged {
                step: 0,
                what: what.to_string(),
            },
            other => PipelineError::Model(other),
        }
    }
}

impl From<UnetError> for PipelineError {
    fn from(e: UnetError) -> Self {
        ModelError::from(e).into()
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;
