//! DDPM ancestral inpainting with known-region replacement.

use crate::data::{from_model, to_model};
use crate::error::DiffusionError;
use crate::model::{Batch, Conditioning, ToyDenoiser};
use crate::schedule::NoiseSchedule;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use spm_core::{MaskImage, ScanFrame};

/// One image to inpaint: pixels in `[0, 1]` and the region to synthesise.
#[derive(Debug, Clone, PartialEq)]
pub struct InpaintJob {
    pub pixels: Vec<f64>,
    pub mask: MaskImage,
}

/// Samples every job (all of one size) jointly. Job `i` draws its noise from
/// stream `i` of `seed`, so results do not depend on batch composition.
/// Returns composited pixels in `[0, 1]`.
pub fn sample_inpaint_batch(
    model: &ToyDenoiser,
    jobs: &[InpaintJob],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<Vec<f64>>, DiffusionError> {
    if model.train_steps == 0 {
        return Err(DiffusionError::UntrainedModel);
    }
    let Some(first) = jobs.first() else { return Ok(Vec::new()) };
    let (w, h) = (first.mask.width() as usize, first.mask.height() as usize);
    let plane = w * h;
    if jobs.iter().any(|j| j.pixels.len() != plane || j.mask.dims() != first.mask.dims()) {
        return Err(DiffusionError::Config("jobs must share one frame size".into()));
    }
    let active: Vec<usize> = (0..jobs.len()).filter(|&i| !jobs[i].mask.is_empty()).collect();
    let mut out: Vec<Vec<f64>> = jobs.iter().map(|j| j.pixels.clone()).collect();
    if active.is_empty() {
        return Ok(out);
    }
    let n = active.len();
    let mut rngs: Vec<ChaCha8Rng> = active
        .iter()
        .map(|&i| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i as u64);
            r
        })
        .collect();
    let x0: Vec<Vec<f64>> = active.iter().map(|&i| jobs[i].pixels.iter().map(|&p| to_model(p)).collect()).collect();
    let bits: Vec<&[bool]> = active.iter().map(|&i| jobs[i].mask.bits()).collect();
    let mut cond = Conditioning {
        masked: Vec::with_capacity(n * plane),
        mask: Vec::with_capacity(n * plane),
    };
    for (x, b) in x0.iter().zip(&bits) {
        cond.masked.extend(x.iter().zip(b.iter()).map(|(v, &m)| if m { 0.0 } else { *v }));
        cond.mask.extend(b.iter().map(|&m| if m { 1.0 } else { 0.0 }));
    }
    let mut x: Vec<Vec<f64>> = rngs
        .iter_mut()
        .map(|r| (0..plane).map(|_| r.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    for t in (0..schedule.steps()).rev() {
        for k in 0..n {
            let e: Vec<f64> = (0..plane).map(|_| rngs[k].sample::<f64, _>(StandardNormal)).collect();
            let known = schedule.q_sample(&x0[k], t, &e)?;
            for i in 0..plane {
                if !bits[k][i] {
                    x[k][i] = known[i];
                }
            }
        }
        let batch = Batch {
            n,
            h,
            w,
            x_t: x.concat(),
            t: vec![t; n],
            cond: Some(cond.clone()),
        };
        let eps = model.predict(&batch)?;
        let (a, ab, b) = (schedule.alphas[t], schedule.alpha_bars[t], schedule.betas[t]);
        let sigma = schedule.posterior_variance(t).sqrt();
        for k in 0..n {
            let e = &eps[k * plane..(k + 1) * plane];
            for i in 0..plane {
                let mean = (x[k][i] - b / (1.0 - ab).sqrt() * e[i]) / a.sqrt();
                let z = if t > 0 { rngs[k].sample::<f64, _>(StandardNormal) } else { 0.0 };
                x[k][i] = mean + sigma * z;
            }
        }
    }
    for (k, &j) in active.iter().enumerate() {
        for i in 0..plane {
            if bits[k][i] {
                out[j][i] = from_model(x[k][i]).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Inpaints one frame; unmasked pixels are returned bit for bit.
pub fn sample_inpaint(
    model: &ToyDenoiser,
    frame: &ScanFrame,
    mask: &MaskImage,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<ScanFrame, DiffusionError> {
    mask.check_same_dims(frame.dims())?;
    if mask.is_empty() {
        if model.train_steps == 0 {
            return Err(DiffusionError::UntrainedModel);
        }
        return Ok(frame.clone());
    }
    let job = InpaintJob {
        pixels: frame.to_f64(),
        mask: mask.clone(),
    };
    let filled = sample_inpaint_batch(model, &[job], schedule, seed)?.pop().expect("one job");
    let pixels = frame
        .pixels()
        .iter()
        .zip(mask.bits())
        .zip(filled)
        .map(|((&orig, &m), v)| if m { v as f32 } else { orig })
        .collect();
    Ok(frame.with_pixels(pixels)?)
}
