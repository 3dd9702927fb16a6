//! Pretraining of the backbone and fine-tuning of the dual-branch model.

use crate::data::{flip, flip_mask, from_model, to_model, Crop, TrainPair};
use crate::error::DiffusionError;
use crate::model::{Batch, Conditioning, ToyDenoiser, LORA_TARGETS};
use crate::schedule::NoiseSchedule;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use spm_autodiff::{adamw_step, LrSchedule, OptimizerState, ParamStore, ScheduleKind, Tape};
use spm_core::mask::compute_ignore_set;
use spm_core::metrics::{psnr_from_mse, PSNR_CAP_DB};
use spm_core::MaskImage;
use std::io::Write;
use std::path::PathBuf;

pub const MIN_PRETRAIN_CROPS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    FullRetrain,
    LoraFinetune,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub warmup_steps: u64,
    pub micro_batch: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 2e-3,
            warmup_steps: 100,
            micro_batch: 1,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub lr: f64,
    pub schedule: ScheduleKind,
    pub warmup_steps: u64,
    pub micro_batch: usize,
    pub grad_accumulation: usize,
    pub total_steps: u64,
    pub checkpoint_every: u64,
    pub weight_decay: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Timesteps at which held-out denoising quality is measured.
    pub eval_timesteps: Vec<usize>,
    pub seed: u64,
    /// Directory for `step_{n}.spmw`, `best.spmw` and `train_log.csv`.
    pub out_dir: Option<PathBuf>,
}

impl TrainConfig {
    /// Defaults per regime: constant + warm-up at 1.5e-3 for full retraining,
    /// cosine + warm-up at 2e-4 for LoRA.
    pub fn for_regime(regime: Regime) -> Self {
        let (lr, schedule) = match regime {
            Regime::FullRetrain => (1.5e-3, ScheduleKind::ConstantWarmup),
            Regime::LoraFinetune => (2e-4, ScheduleKind::CosineWarmup),
        };
        Self {
            regime,
            lr,
            schedule,
            warmup_steps: 100,
            micro_batch: 1,
            grad_accumulation: 1,
            total_steps: 3000,
            checkpoint_every: 250,
            weight_decay: 0.0,
            lora_rank: 8,
            lora_alpha: 8.0,
            eval_timesteps: (0..10).map(|i| 10 + 20 * i).collect(),
            seed: 0,
            out_dir: None,
        }
    }

    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.grad_accumulation
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub heldout_psnr: Option<f64>,
    pub heldout_mse: Option<f64>,
}

pub const LOG_HEADER: &str = "step,lr,train_loss,heldout_psnr,heldout_mse";

impl LogRow {
    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{:e},{:.6},{},{}",
            self.step,
            self.lr,
            self.train_loss,
            opt(self.heldout_psnr),
            opt(self.heldout_mse)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: u64,
    pub psnr: f64,
    pub mse: f64,
    pub params: ParamStore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub log: Vec<LogRow>,
    /// Peak held-out masked PSNR checkpoint, ties broken by lower MSE.
    pub best: Option<Snapshot>,
}

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Inputs and loss target of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepData {
    pub batch: Batch,
    pub eps: Vec<f64>,
    pub omega: Vec<bool>,
}

/// Loss `masked_mse(eps_hat, eps, omega)` and accumulated gradients of the
/// trainable parameters (returned in a copy of `params`).
pub fn loss_and_grads(model: &ToyDenoiser, data: &StepData) -> Result<(f64, ParamStore), DiffusionError> {
    let mut params = model.params.clone();
    let mut tape = Tape::new();
    let vars = params.record(&mut tape);
    let out = model.forward(&mut tape, &vars, &data.batch)?;
    let target = tape.constant(tape.shape(out).to_vec().as_slice(), data.eps.clone())?;
    let loss = tape.masked_mse(out, target, &data.omega)?;
    let grads = tape.backward(loss)?;
    params.zero_grad();
    params.accumulate_grads(&vars, &grads);
    Ok((tape.scalar(loss)?, params))
}

/// Builds a step for pairs `(x0 in model space, mask, omega)` of equal size.
fn make_step(
    items: &[(Vec<f64>, Option<&MaskImage>, Vec<bool>)],
    w: usize,
    h: usize,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<StepData, DiffusionError> {
    let plane = w * h;
    let n = items.len();
    let mut x_t = Vec::with_capacity(n * plane);
    let mut eps = Vec::with_capacity(n * plane);
    let mut t = Vec::with_capacity(n);
    let mut masked = Vec::with_capacity(n * plane);
    let mut mask = Vec::with_capacity(n * plane);
    let mut omega = Vec::with_capacity(n * plane);
    let conditioned = items.iter().any(|i| i.1.is_some());
    for (x0, m, om) in items {
        let ti = rng.random_range(0..schedule.steps());
        let e = gaussian(plane, rng);
        x_t.extend(schedule.q_sample(x0, ti, &e)?);
        eps.extend(e);
        t.push(ti);
        omega.extend_from_slice(om);
        if conditioned {
            let bits = m.map(|m| m.bits().to_vec()).unwrap_or_else(|| vec![false; plane]);
            masked.extend(x0.iter().zip(&bits).map(|(v, &b)| if b { 0.0 } else { *v }));
            mask.extend(bits.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        }
    }
    let cond = conditioned.then_some(Conditioning { masked, mask });
    Ok(StepData {
        batch: Batch { n, h, w, x_t, t, cond },
        eps,
        omega,
    })
}

fn apply_grads(model: &mut ToyDenoiser, grads: &ParamStore, scale: f64) {
    for (name, t) in model.params.iter_mut() {
        if !t.requires_grad {
            continue;
        }
        if let Some(g) = grads.get(name).and_then(|g| g.grad.as_ref()) {
            match &mut t.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += scale * b),
                None => t.grad = Some(g.iter().map(|v| scale * v).collect()),
            }
        }
    }
}

/// DDPM noise-prediction training of the backbone on clean crops (no
/// conditioning). Returns the per-step log.
pub fn pretrain_backbone(
    model: &mut ToyDenoiser,
    crops: &[Crop],
    cfg: &PretrainConfig,
    schedule: &NoiseSchedule,
    mut on_step: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>, DiffusionError> {
    if crops.len() < MIN_PRETRAIN_CROPS {
        return Err(DiffusionError::InsufficientData {
            have: crops.len(),
            need: MIN_PRETRAIN_CROPS,
        });
    }
    let (w, h) = (crops[0].width, crops[0].height);
    if crops.iter().any(|c| (c.width, c.height) != (w, h)) || cfg.micro_batch == 0 {
        return Err(DiffusionError::Config("crops must share one size and micro_batch must be > 0".into()));
    }
    if !model.has_backbone() {
        return Err(DiffusionError::MissingBackbone);
    }
    model.params.set_trainable(|n| n.starts_with("bb."));
    let lr_sched = LrSchedule::new(ScheduleKind::ConstantWarmup, cfg.warmup_steps.min(cfg.steps), cfg.steps, cfg.lr)?;
    let mut opt = OptimizerState::new(&model.params, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let all = vec![true; w * h];
    let mut log = Vec::with_capacity(cfg.steps as usize);
    for step in 1..=cfg.steps {
        let items: Vec<_> = (0..cfg.micro_batch)
            .map(|_| {
                let c = &crops[rng.random_range(0..crops.len())];
                let k = rng.random_range(0..4u8);
                let x0: Vec<f64> = flip(&c.pixels, w, h, k).into_iter().map(to_model).collect();
                (x0, None, all.clone())
            })
            .collect();
        let data = make_step(&items, w, h, schedule, &mut rng)?;
        let (loss, grads) = loss_and_grads(model, &data)?;
        apply_grads(model, &grads, 1.0);
        let lr = lr_sched.lr_at(step);
        adamw_step(&mut model.params, &mut opt, lr)?;
        model.train_steps += 1;
        let row = LogRow {
            step,
            lr,
            train_loss: loss,
            heldout_psnr: None,
            heldout_mse: None,
        };
        on_step(&row);
        log.push(row);
    }
    model.params.set_trainable(|_| false);
    Ok(log)
}

fn omega_for(pair: &TrainPair) -> Result<Vec<bool>, DiffusionError> {
    match &pair.artefact_mask {
        Some(a) => Ok(compute_ignore_set(&pair.mask, a)?.omega.bits().to_vec()),
        None => Ok(vec![true; pair.clean.pixels.len()]),
    }
}

/// One conditioned training example in model space, flipped by `k`.
pub fn pair_step_item(pair: &TrainPair, k: u8) -> Result<(Vec<f64>, MaskImage, Vec<bool>), DiffusionError> {
    let (w, h) = (pair.clean.width, pair.clean.height);
    let x0 = flip(&pair.clean.pixels, w, h, k).into_iter().map(to_model).collect();
    let m = flip_mask(&pair.mask, k);
    let om = flip(
        &omega_for(pair)?.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect::<Vec<_>>(),
        w,
        h,
        k,
    )
    .into_iter()
    .map(|v| v > 0.5)
    .collect();
    Ok((x0, m, om))
}

/// Builds the step data for explicit pairs, flips and noise seed.
pub fn pair_step(pairs: &[(&TrainPair, u8)], schedule: &NoiseSchedule, seed: u64) -> Result<StepData, DiffusionError> {
    let (w, h) = (pairs[0].0.clean.width, pairs[0].0.clean.height);
    let built: Vec<_> = pairs.iter().map(|(p, k)| pair_step_item(p, *k)).collect::<Result<_, _>>()?;
    let items: Vec<_> = built.iter().map(|(x0, m, om)| (x0.clone(), Some(m), om.clone())).collect();
    make_step(&items, w, h, schedule, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Masked quality of one-step clean estimates on held-out pairs at fixed
/// timesteps and fixed noise: pooled MSE inside the masks (pixel units) and
/// the PSNR of that MSE.
pub fn heldout_denoise_score(
    model: &ToyDenoiser,
    pairs: &[TrainPair],
    schedule: &NoiseSchedule,
    timesteps: &[usize],
    seed: u64,
) -> Result<(f64, f64), DiffusionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut count = 0usize;
    for pair in pairs {
        let (w, h) = (pair.clean.width, pair.clean.height);
        let plane = w * h;
        let x0: Vec<f64> = pair.clean.pixels.iter().map(|&p| to_model(p)).collect();
        let bits = pair.mask.bits();
        let masked: Vec<f64> = x0.iter().zip(bits).map(|(v, &b)| if b { 0.0 } else { *v }).collect();
        let mvals: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let n = timesteps.len();
        let mut x_t = Vec::with_capacity(n * plane);
        for &t in timesteps {
            let e = gaussian(plane, &mut rng);
            x_t.extend(schedule.q_sample(&x0, t, &e)?);
        }
        let batch = Batch {
            n,
            h,
            w,
            x_t: x_t.clone(),
            t: timesteps.to_vec(),
            cond: Some(Conditioning {
                masked: masked.repeat(n),
                mask: mvals.repeat(n),
            }),
        };
        let eps_hat = model.predict(&batch)?;
        for (k, &t) in timesteps.iter().enumerate() {
            let r = k * plane..(k + 1) * plane;
            let est = schedule.predict_x0(&x_t[r.clone()], t, &eps_hat[r]);
            for i in (0..plane).filter(|&i| bits[i]) {
                let d = from_model(est[i].clamp(-1.0, 1.0)) - pair.clean.pixels[i];
                sum += d * d;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(DiffusionError::EmptyManifest);
    }
    let mse = sum / count as f64;
    Ok((psnr_from_mse(mse, PSNR_CAP_DB), mse))
}

/// Marks the tensors updated by a regime as trainable.
pub fn set_regime_trainable(model: &mut ToyDenoiser, regime: Regime) {
    match regime {
        Regime::FullRetrain => model.params.set_trainable(|n| !n.starts_with("meta.")),
        Regime::LoraFinetune => model.params.set_trainable(|n| n.starts_with("lora.") || n.starts_with("gate.")),
    }
}

/// Prepares the branch (and adapters under LoRA) and fine-tunes on `train`,
/// evaluating on `heldout` every `checkpoint_every` steps and at the end.
pub fn finetune(
    model: &mut ToyDenoiser,
    train: &[TrainPair],
    heldout: &[TrainPair],
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    mut on_step: impl FnMut(&LogRow),
) -> Result<FinetuneOutcome, DiffusionError> {
    if !model.has_backbone() || model.train_steps == 0 {
        return Err(DiffusionError::MissingBackbone);
    }
    if train.is_empty() {
        return Err(DiffusionError::EmptyManifest);
    }
    let (w, h) = (train[0].clean.width, train[0].clean.height);
    if train.iter().chain(heldout).any(|p| (p.clean.width, p.clean.height) != (w, h)) {
        return Err(DiffusionError::Config("all pairs must share one frame size".into()));
    }
    if cfg.micro_batch == 0 || cfg.grad_accumulation == 0 || cfg.checkpoint_every == 0 {
        return Err(DiffusionError::Config("micro_batch, grad_accumulation and checkpoint_every must be > 0".into()));
    }
    model.add_branch(cfg.seed ^ 0xb4a4)?;
    if cfg.regime == Regime::LoraFinetune && model.adapters.is_empty() {
        model.attach_lora(&LORA_TARGETS, cfg.lora_rank, cfg.lora_alpha, cfg.seed ^ 0x10_5a)?;
    }
    set_regime_trainable(model, cfg.regime);
    let lr_sched = LrSchedule::new(cfg.schedule, cfg.warmup_steps.min(cfg.total_steps), cfg.total_steps, cfg.lr)?;
    let mut opt = OptimizerState::new(&model.params, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log_file = match &cfg.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = std::fs::File::create(dir.join("train_log.csv"))?;
            writeln!(f, "{LOG_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let mut log = Vec::with_capacity(cfg.total_steps as usize);
    let mut best: Option<Snapshot> = None;
    let eval_seed = cfg.seed.wrapping_add(0xe7a1);
    for step in 1..=cfg.total_steps {
        let mut loss_sum = 0.0;
        for _ in 0..cfg.grad_accumulation {
            let mut built = Vec::with_capacity(cfg.micro_batch);
            for _ in 0..cfg.micro_batch {
                let p = &train[rng.random_range(0..train.len())];
                built.push(pair_step_item(p, rng.random_range(0..4u8))?);
            }
            let items: Vec<_> = built.iter().map(|(x0, m, om)| (x0.clone(), Some(m), om.clone())).collect();
            let data = make_step(&items, w, h, schedule, &mut rng)?;
            let (loss, grads) = loss_and_grads(model, &data)?;
            loss_sum += loss;
            apply_grads(model, &grads, 1.0 / cfg.grad_accumulation as f64);
        }
        let lr = lr_sched.lr_at(step);
        adamw_step(&mut model.params, &mut opt, lr)?;
        model.train_steps += 1;
        let mut row = LogRow {
            step,
            lr,
            train_loss: loss_sum / cfg.grad_accumulation as f64,
            heldout_psnr: None,
            heldout_mse: None,
        };
        if (step % cfg.checkpoint_every == 0 || step == cfg.total_steps) && !heldout.is_empty() {
            let (psnr, mse) = heldout_denoise_score(model, heldout, schedule, &cfg.eval_timesteps, eval_seed)?;
            row.heldout_psnr = Some(psnr);
            row.heldout_mse = Some(mse);
            let better = best.as_ref().is_none_or(|b| psnr > b.psnr || (psnr == b.psnr && mse < b.mse));
            if let Some(dir) = &cfg.out_dir {
                crate::io::save_model(model, dir.join(format!("step_{step}.spmw")))?;
            }
            if better {
                best = Some(Snapshot {
                    step,
                    psnr,
                    mse,
                    params: model.params.clone(),
                });
                if let Some(dir) = &cfg.out_dir {
                    crate::io::save_model(model, dir.join("best.spmw"))?;
                }
            }
        }
        if let Some(f) = &mut log_file {
            writeln!(f, "{}", row.csv())?;
        }
        on_step(&row);
        log.push(row);
    }
    model.params.set_trainable(|_| false);
    Ok(FinetuneOutcome { log, best })
}
