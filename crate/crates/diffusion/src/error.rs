use spm_autodiff::{AutodiffError, CheckpointError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("timestep {t} outside [0, {steps})")]
    BadTimestep { t: usize, steps: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("unknown adapter target `{0}`")]
    UnknownTarget(String),
    #[error("weight `{0}` already has an adapter")]
    DuplicateAdapter(String),
    #[error("need at least {need} training crops, got {have}")]
    InsufficientData { have: usize, need: usize },
    #[error("model has no pretrained backbone weights")]
    MissingBackbone,
    #[error("no usable training pairs")]
    EmptyManifest,
    #[error("model has not been trained")]
    UntrainedModel,
    #[error("model has no conditioning branch")]
    NoBranch,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Manifest(#[from] spm_core::ManifestError),
    #[error(transparent)]
    Image(#[from] spm_core::io::ImageIoError),
    #[error(transparent)]
    Mask(#[from] spm_core::mask::MaskError),
    #[error(transparent)]
    Frame(#[from] spm_core::FrameError),
}
