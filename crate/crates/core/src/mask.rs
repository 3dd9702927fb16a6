//! Mask extraction, filtering and combination.

use crate::frame::{Channel, FrameError, MaskImage, ScanFrame};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("mask is empty")]
    EmptyMask,
    #[error("expected a {expected} frame, got {got}")]
    WrongChannel { expected: Channel, got: Channel },
    #[error("invalid threshold band [{lo}, {hi}]")]
    BadThreshold { lo: f32, hi: f32 },
    #[error("frame needs at least {min} rows, has {got}")]
    TooFewRows { min: u32, got: u32 },
    #[error("invalid run-length encoding: {0}")]
    BadRle(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

fn expect_channel(frame: &ScanFrame, expected: Channel) -> Result<(), MaskError> {
    if frame.channel() != expected {
        return Err(MaskError::WrongChannel {
            expected,
            got: frame.channel(),
        });
    }
    Ok(())
}

/// Masks every pixel whose phase lag magnitude reaches `lo_deg`.
///
/// `hi_deg` only documents the band; the comparison is `|phase| >= lo_deg`.
pub fn phase_threshold_mask(phase: &ScanFrame, lo_deg: f32, hi_deg: f32) -> Result<MaskImage, MaskError> {
    expect_channel(phase, Channel::Phase)?;
    if !(lo_deg > 0.0 && lo_deg <= hi_deg) {
        return Err(MaskError::BadThreshold { lo: lo_deg, hi: hi_deg });
    }
    let (w, h) = phase.dims();
    let bits = (0..phase.len()).map(|i| phase.physical(i).abs() >= lo_deg as f64).collect();
    Ok(MaskImage::new(w, h, bits)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterDecision {
    Accept,
    Discard,
}

/// Height range (nm) over the mask and a 2-pixel ring around it.
pub fn measure_delta_h(mask: &MaskImage, height: &ScanFrame) -> Result<f64, MaskError> {
    expect_channel(height, Channel::Height)?;
    mask.check_same_dims(height.dims())?;
    if mask.is_empty() {
        return Err(MaskError::EmptyMask);
    }
    let region = mask.dilate(2);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, _) in region.bits().iter().enumerate().filter(|(_, &b)| b) {
        let v = height.physical(i);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok(hi - lo)
}

/// Discards masks that sit on surface regions with negligible height contrast.
pub fn physics_filter(mask: &MaskImage, height: &ScanFrame, delta_h_nm: f32) -> Result<FilterDecision, MaskError> {
    let dh = measure_delta_h(mask, height)?;
    Ok(if dh < delta_h_nm as f64 {
        FilterDecision::Discard
    } else {
        FilterDecision::Accept
    })
}

/// Square opening followed by removal of 4-connected components below `min_area`.
pub fn morph_cleanup(mask: &MaskImage, open_radius: u32, min_area: u32) -> MaskImage {
    let mut out = mask.erode(open_radius).dilate(open_radius);
    let (w, _) = out.dims();
    for comp in out.components4() {
        if comp.len() < min_area as usize {
            for i in comp {
                out.set(i as u32 % w, i as u32 / w, false);
            }
        }
    }
    out
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

const DROPOUT_NEIGHBOURS: usize = 3;

/// Robust z-score of each row median against the running median of its neighbours.
pub fn row_dropout_scores(frame: &ScanFrame) -> Vec<f64> {
    let (w, h) = (frame.width() as usize, frame.height() as usize);
    let px = frame.pixels();
    let meds: Vec<f64> = (0..h)
        .map(|y| median(&mut px[y * w..(y + 1) * w].iter().map(|&v| v as f64).collect::<Vec<_>>()))
        .collect();
    let resid: Vec<f64> = (0..h)
        .map(|y| {
            let lo = y.saturating_sub(DROPOUT_NEIGHBOURS);
            let hi = (y + DROPOUT_NEIGHBOURS).min(h - 1);
            let mut nb: Vec<f64> = (lo..=hi).filter(|&r| r != y).map(|r| meds[r]).collect();
            meds[y] - median(&mut nb)
        })
        .collect();
    let centre = median(&mut resid.clone());
    let mad = median(&mut resid.iter().map(|r| (r - centre).abs()).collect::<Vec<_>>());
    let (lo, hi) = meds.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let scale = (1.4826 * mad).max(1e-3 * (hi - lo));
    if scale == 0.0 {
        return vec![0.0; h];
    }
    resid.iter().map(|r| (r - centre) / scale).collect()
}

/// Masks whole rows whose median is an outlier against neighbouring rows.
pub fn detect_line_dropout_rows(frame: &ScanFrame, z_thresh: f32) -> Result<MaskImage, MaskError> {
    if frame.height() < 8 {
        return Err(MaskError::TooFewRows {
            min: 8,
            got: frame.height(),
        });
    }
    let scores = row_dropout_scores(frame);
    let (w, h) = frame.dims();
    Ok(MaskImage::from_fn(w, h, |_, y| scores[y as usize].abs() > z_thresh as f64))
}

/// Pixels that take part in the loss and metrics: `(¬M) ∪ (M \ A)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IgnoreSet {
    pub omega: MaskImage,
}

pub fn compute_ignore_set(m: &MaskImage, a: &MaskImage) -> Result<IgnoreSet, MaskError> {
    a.check_same_dims(m.dims())?;
    let (w, h) = m.dims();
    let bits = m.bits().iter().zip(a.bits()).map(|(&mi, &ai)| !mi || !ai).collect();
    Ok(IgnoreSet {
        omega: MaskImage::new(w, h, bits)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskShape {
    Rows,
    Bands,
    Disks,
    Blobs,
}

impl MaskShape {
    pub const ALL: [MaskShape; 4] = [MaskShape::Rows, MaskShape::Bands, MaskShape::Disks, MaskShape::Blobs];
}

fn stamp_disk(mask: &mut MaskImage, cx: i64, cy: i64, r: i64) {
    let (w, h) = mask.dims();
    for y in (cy - r).max(0)..=(cy + r).min(h as i64 - 1) {
        for x in (cx - r).max(0)..=(cx + r).min(w as i64 - 1) {
            if (x - cx).pow(2) + (y - cy).pow(2) <= r * r {
                mask.set(x as u32, y as u32, true);
            }
        }
    }
}

fn draw_shape(width: u32, height: u32, shape: MaskShape, rng: &mut ChaCha8Rng) -> MaskImage {
    let mut mask = MaskImage::empty(width, height);
    let span = width.min(height) as i64;
    match shape {
        MaskShape::Rows => {
            for _ in 0..rng.random_range(1..=3) {
                let y = rng.random_range(0..height);
                for x in 0..width {
                    mask.set(x, y, true);
                }
            }
        }
        MaskShape::Bands => {
            let band = rng.random_range(2..=8u32).min(height);
            let y0 = rng.random_range(0..=height - band);
            let len = rng.random_range(width.div_ceil(2)..=width);
            let x0 = rng.random_range(0..=width - len);
            for y in y0..y0 + band {
                for x in x0..x0 + len {
                    mask.set(x, y, true);
                }
            }
        }
        MaskShape::Disks => {
            let rmax = (span / 6).max(1);
            for _ in 0..rng.random_range(1..=3) {
                let r = rng.random_range(1..=rmax);
                stamp_disk(&mut mask, rng.random_range(0..width) as i64, rng.random_range(0..height) as i64, r);
            }
        }
        MaskShape::Blobs => {
            // brush stroke from a short random walk
            let (mut x, mut y) = (rng.random_range(0..width) as i64, rng.random_range(0..height) as i64);
            let r = rng.random_range(1..=(span / 16).clamp(1, 3));
            for _ in 0..rng.random_range(20..60) {
                stamp_disk(&mut mask, x, y, r);
                x = (x + rng.random_range(-2..=2)).clamp(0, width as i64 - 1);
                y = (y + rng.random_range(-2..=2)).clamp(0, height as i64 - 1);
            }
        }
    }
    mask
}

/// Random masks with their shape family, deterministic in `seed`.
pub fn sample_random_masks_labeled(dims: (u32, u32), count: usize, seed: u64) -> Vec<(MaskShape, MaskImage)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let shape = MaskShape::ALL[rng.random_range(0..4)];
            (shape, draw_shape(dims.0, dims.1, shape, &mut rng))
        })
        .collect()
}

pub fn sample_random_masks(dims: (u32, u32), count: usize, seed: u64) -> Vec<MaskImage> {
    sample_random_masks_labeled(dims, count, seed).into_iter().map(|(_, m)| m).collect()
}

/// Run-length encoded mask: `[start, len]` runs of set pixels in row-major order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRle {
    pub width: u32,
    pub height: u32,
    pub runs: Vec<[u64; 2]>,
}

impl MaskRle {
    pub fn encode(mask: &MaskImage) -> Self {
        let mut runs = Vec::new();
        let mut start = None;
        for (i, &b) in mask.bits().iter().enumerate() {
            match (b, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    runs.push([s as u64, (i - s) as u64]);
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            runs.push([s as u64, (mask.bits().len() - s) as u64]);
        }
        let (width, height) = mask.dims();
        Self { width, height, runs }
    }

    pub fn decode(&self) -> Result<MaskImage, MaskError> {
        let n = self.width as u64 * self.height as u64;
        let mut bits = vec![false; n as usize];
        let mut end = None;
        for &[start, len] in &self.runs {
            // runs must be sorted with at least one gap pixel between them
            if len == 0 || end.is_some_and(|e| start <= e) || start.checked_add(len).is_none_or(|e| e > n) {
                return Err(MaskError::BadRle(format!("run [{start}, {len}] invalid")));
            }
            bits[start as usize..(start + len) as usize].fill(true);
            end = Some(start + len);
        }
        Ok(MaskImage::new(self.width, self.height, bits)?)
    }
}
