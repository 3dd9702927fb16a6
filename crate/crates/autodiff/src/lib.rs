//! Reverse-mode differentiation over dense f64 tensors: the op set needed by a
//! small convolutional denoiser, AdamW, learning-rate schedules, finite
//! difference checks and `SPMW` checkpoints.

mod check;
mod checkpoint;
mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use check::{grad_check, grad_check_subset, rel_err, GradCheck};
pub use checkpoint::{decode_spmw, encode_spmw, load_spmw, save_spmw, CheckpointError, SPMW_MAGIC, SPMW_VERSION};
pub use optim::{adamw_step, LrSchedule, OptimizerState, ScheduleKind};
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{AutodiffError, Tensor};
