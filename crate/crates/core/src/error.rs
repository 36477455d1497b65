use thiserror::Error;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(&'static str),
    #[error("step {t} outside 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("previous step {prev} must be smaller than current step {t}")]
    StepOrder { t: usize, prev: usize },
    #[error("degenerate posterior at step {0}: 1 - alpha_bar is zero")]
    DegeneratePosterior(usize),
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("invalid mask configuration: {0}")]
    InvalidMaskConfig(&'static str),
    #[error("expected {expected} per-mask error images, got {got}")]
    MaskCountMismatch { expected: usize, got: usize },
    #[error("degenerate volume: {0}")]
    DegenerateVolume(&'static str),
    #[error("invalid phantom spec: {0}")]
    InvalidPhantom(&'static str),
    #[error("volume has {depth} axial slices, at least {required} required")]
    TooFewSlices { depth: usize, required: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}
