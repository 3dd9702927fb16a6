//! Toy pixel-space diffusion inpainting: noise schedule, dual-branch
//! denoiser with zero-initialised gates, LoRA adapters, training loops with
//! the ignore-region loss, and a DDPM inpainting sampler.

mod data;
mod error;
mod io;
mod model;
mod sample;
mod schedule;
mod train;

pub use error::DiffusionError;
pub use model::{
    timestep_embedding, Batch, Conditioning, LoraAdapter, ToyDenoiser, CH1, CH2, DEFAULT_PRESERVATION, LORA_TARGETS,
    SITES, TEMB, TEMB_IN,
};
pub use schedule::NoiseSchedule;
pub use data::{from_model, load_pairs, synthetic_crops, to_model, Crop, TrainPair};
pub use io::{load_model, model_from_store, save_model};
pub use sample::{sample_inpaint, sample_inpaint_batch, InpaintJob};
pub use train::{
    finetune, heldout_denoise_score, loss_and_grads, pair_step, pair_step_item, pretrain_backbone, set_regime_trainable,
    FinetuneOutcome, LogRow, PretrainConfig, Regime, Snapshot, StepData, TrainConfig, LOG_HEADER, MIN_PRETRAIN_CROPS,
};
