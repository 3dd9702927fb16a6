//! Synthetic artefact generation.
//!
//! Each simulator returns the corrupted frame together with the mask of the
//! pixels it touched; pixels outside that mask are left bit-identical.

mod dataset;
mod surface;

pub use dataset::{
    draw_mask_count, generate_pair_dataset, generate_pairs_from_frames, random_artefact, DatasetConfig, DatasetError, Donor,
    MaskCount,
};
pub use surface::{synthetic_surface, SurfaceKind};

use crate::frame::{Channel, FrameError, MaskImage, ScanFrame};
use crate::manifest::ArtefactClass;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("row {row} outside frame of height {height}")]
    RowOutOfRange { row: u32, height: u32 },
    #[error("row band [{0}, {1}) is empty or outside the frame")]
    EmptyBand(u32, u32),
    #[error("tip kernel of radius {radius} does not fit in a {width}x{height} frame")]
    KernelLargerThanFrame { radius: u32, width: u32, height: u32 },
    #[error("frame dimensions differ: {0:?} vs {1:?}")]
    MismatchedDimensions((u32, u32), (u32, u32)),
    #[error("expected a {expected} frame, got {got}")]
    WrongChannel { expected: &'static str, got: Channel },
    #[error("translated patch leaves the frame")]
    PatchOutOfBounds,
    #[error("donor mask is empty")]
    EmptyDonorMask,
    #[error("a ±90° hop is not representable with z_scale {0}")]
    PhaseOutOfRange(f32),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

/// Tip shape used for the grayscale dilation that models tip convolution.
///
/// `heights` holds `(2r+1)^2` non-positive offsets with the apex (0) at the
/// centre.
#[derive(Debug, Clone, PartialEq)]
pub struct TipKernel {
    radius: u32,
    heights: Vec<f32>,
    asymmetry: f32,
}

impl TipKernel {
    pub fn new(radius: u32, heights: Vec<f32>, asymmetry: f32) -> Result<Self, SimError> {
        if radius == 0 {
            return Err(SimError::InvalidParameter("tip radius must be >= 1".into()));
        }
        let side = 2 * radius as usize + 1;
        if heights.len() != side * side {
            return Err(SimError::InvalidParameter(format!(
                "tip kernel needs {} heights, got {}",
                side * side,
                heights.len()
            )));
        }
        if heights[side * side / 2] != 0.0 {
            return Err(SimError::InvalidParameter("tip apex must be exactly 0".into()));
        }
        if heights.iter().any(|h| !(h.is_finite() && *h <= 0.0)) {
            return Err(SimError::InvalidParameter("tip heights must be finite and <= 0".into()));
        }
        Ok(Self {
            radius,
            heights,
            asymmetry,
        })
    }

    /// Flat-ended tip: every offset is zero, so the dilation is a plain max filter.
    pub fn blunt(radius: u32) -> Result<Self, SimError> {
        let side = 2 * radius as usize + 1;
        Self::new(radius, vec![0.0; side * side], 0.0)
    }

    /// Paraboloid tip `-curvature * (s(dx)^2 + dy^2)`, where the fast-scan
    /// coordinate is sheared: `s(dx) = dx * (1 - asymmetry)` for `dx > 0` and
    /// `dx * (1 + asymmetry)` otherwise.
    pub fn paraboloid(radius: u32, curvature: f32, asymmetry: f32) -> Result<Self, SimError> {
        if !(curvature >= 0.0) || !(-1.0..=1.0).contains(&asymmetry) {
            return Err(SimError::InvalidParameter("curvature >= 0 and |asymmetry| <= 1 required".into()));
        }
        let r = radius as i32;
        let mut heights = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                let sx = if dx > 0 {
                    dx as f32 * (1.0 - asymmetry)
                } else {
                    dx as f32 * (1.0 + asymmetry)
                };
                let h = -curvature * (sx * sx + (dy * dy) as f32);
                // -0.0 at the apex would still compare equal, keep it clean anyway
                heights.push(if dx == 0 && dy == 0 { 0.0 } else { h });
            }
        }
        Self::new(radius, heights, asymmetry)
    }

    pub fn radius(&self) -> u32 {
        self.radius
    }

    pub fn heights(&self) -> &[f32] {
        &self.heights
    }

    pub fn asymmetry(&self) -> f32 {
        self.asymmetry
    }

    fn offset(&self, dx: i32, dy: i32) -> f32 {
        let r = self.radius as i32;
        let side = (2 * r + 1) as usize;
        self.heights[(dy + r) as usize * side + (dx + r) as usize]
    }
}

/// A disk in pixel coordinates; membership uses `dx² + dy² <= r²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub cx: u32,
    pub cy: u32,
    pub radius: u32,
}

/// A fully specified artefact instance.
#[derive(Debug, Clone, PartialEq)]
pub enum ArtefactSpec {
    LineDropout { rows: Vec<u32>, level: f32 },
    GainNoise { band: (u32, u32), amplitude: f32, seed: u64 },
    TipTailing { tip: TipKernel },
    PhaseHop { blobs: Vec<Blob>, hop_sign: i8, seed: u64 },
}

impl ArtefactSpec {
    pub fn class(&self) -> ArtefactClass {
        match self {
            ArtefactSpec::LineDropout { .. } => ArtefactClass::LineDropout,
            ArtefactSpec::GainNoise { .. } => ArtefactClass::GainNoise,
            ArtefactSpec::TipTailing { .. } => ArtefactClass::TipTailing,
            ArtefactSpec::PhaseHop { .. } => ArtefactClass::PhaseHop,
        }
    }

    /// Applies the artefact to a single frame. Phase hops on a non-phase
    /// frame corrupt the topography only (the phase map is not returned).
    pub fn apply(&self, frame: &ScanFrame) -> Result<(ScanFrame, MaskImage), SimError> {
        match self {
            ArtefactSpec::LineDropout { rows, level } => simulate_line_dropout(frame, rows, *level),
            ArtefactSpec::GainNoise { band, amplitude, seed } => {
                simulate_gain_noise(frame, band.0, band.1, *amplitude, *seed)
            }
            ArtefactSpec::TipTailing { tip } => simulate_tip_tailing(frame, tip),
            ArtefactSpec::PhaseHop { blobs, hop_sign, seed } => {
                if frame.channel() == Channel::Phase {
                    let dummy = ScanFrame::constant(frame.width(), frame.height(), Channel::Height, 0.5)?;
                    let (_, phase, mask) = simulate_phase_hop(&dummy, frame, blobs, *hop_sign, *seed)?;
                    Ok((phase, mask))
                } else {
                    let phase = ScanFrame::new(
                        frame.width(),
                        frame.height(),
                        Channel::Phase,
                        frame.scan_size_um(),
                        180.0,
                        vec![0.5; frame.len()],
                    )?;
                    let (height, _, mask) = simulate_phase_hop(frame, &phase, blobs, *hop_sign, *seed)?;
                    Ok((height, mask))
                }
            }
        }
    }
}

/// Replaces whole scan rows by a constant level (transient tip disengagement).
pub fn simulate_line_dropout(frame: &ScanFrame, rows: &[u32], level: f32) -> Result<(ScanFrame, MaskImage), SimError> {
    if !(0.0..=1.0).contains(&level) {
        return Err(SimError::InvalidParameter(format!("level {level} outside [0, 1]")));
    }
    let (w, h) = frame.dims();
    if let Some(&row) = rows.iter().find(|&&r| r >= h) {
        return Err(SimError::RowOutOfRange { row, height: h });
    }
    let mut pixels = frame.pixels().to_vec();
    let mut mask = MaskImage::empty(w, h);
    for &r in rows {
        let start = r as usize * w as usize;
        pixels[start..start + w as usize].fill(level);
        for x in 0..w {
            mask.set(x, r, true);
        }
    }
    Ok((frame.with_pixels(pixels)?, mask))
}

/// Adds clamped zero-mean uniform noise to a band of rows `[r0, r1)`; each
/// row draws its own amplitude factor in `[0.5, 1]`.
pub fn simulate_gain_noise(
    frame: &ScanFrame,
    r0: u32,
    r1: u32,
    amplitude: f32,
    seed: u64,
) -> Result<(ScanFrame, MaskImage), SimError> {
    let (w, h) = frame.dims();
    if r0 >= r1 || r1 > h {
        return Err(SimError::EmptyBand(r0, r1));
    }
    if !(amplitude > 0.0 && amplitude.is_finite()) {
        return Err(SimError::InvalidParameter("amplitude must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = frame.pixels().to_vec();
    let mut mask = MaskImage::empty(w, h);
    for y in r0..r1 {
        let row_amp = amplitude as f64 * rng.random_range(0.5..=1.0);
        for x in 0..w {
            let i = y as usize * w as usize + x as usize;
            let noise = rng.random_range(-1.0..=1.0) * row_amp;
            pixels[i] = (pixels[i] as f64 + noise).clamp(0.0, 1.0) as f32;
            mask.set(x, y, true);
        }
    }
    Ok((frame.with_pixels(pixels)?, mask))
}

/// Grayscale dilation of the surface by the tip, with replicated borders.
///
/// The mask marks every pixel that moved by more than `1e-4`.
pub fn simulate_tip_tailing(frame: &ScanFrame, tip: &TipKernel) -> Result<(ScanFrame, MaskImage), SimError> {
    let (w, h) = frame.dims();
    let side = 2 * tip.radius() + 1;
    if side > w || side > h {
        return Err(SimError::KernelLargerThanFrame {
            radius: tip.radius(),
            width: w,
            height: h,
        });
    }
    let r = tip.radius() as i32;
    let src = frame.pixels();
    let mut out = vec![0.0f32; src.len()];
    let mut mask = MaskImage::empty(w, h);
    for y in 0..h as i32 {
        for x in 0..w as i32 {
            let mut best = f32::NEG_INFINITY;
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, h as i32 - 1) as usize;
                for dx in -r..=r {
                    let xx = (x + dx).clamp(0, w as i32 - 1) as usize;
                    best = best.max(src[yy * w as usize + xx] + tip.offset(dx, dy));
                }
            }
            let i = y as usize * w as usize + x as usize;
            let v = best.clamp(0.0, 1.0);
            out[i] = v;
            if (v - src[i]).abs() > 1e-4 {
                mask.set(x as u32, y as u32, true);
            } else {
                // sub-threshold changes are not part of the artefact
                out[i] = src[i];
            }
        }
    }
    Ok((frame.with_pixels(out)?, mask))
}

/// Union of discrete disks (`dx² + dy² <= r²`), clipped to the frame.
pub fn disks_mask(width: u32, height: u32, blobs: &[Blob]) -> MaskImage {
    MaskImage::from_fn(width, height, |x, y| {
        blobs.iter().any(|b| {
            let dx = x as i64 - b.cx as i64;
            let dy = y as i64 - b.cy as i64;
            dx * dx + dy * dy <= (b.radius as i64) * (b.radius as i64)
        })
    })
}

/// Seeded value noise on an 8-pixel lattice, bilinearly interpolated and
/// smoothed by a 5×5 box filter. Values lie in `[0, 1]`.
pub fn invalid_texture(width: u32, height: u32, seed: u64) -> Vec<f32> {
    const CELL: u32 = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gw = width / CELL + 2;
    let gh = height / CELL + 2;
    let lattice: Vec<f32> = (0..gw * gh).map(|_| rng.random::<f32>()).collect();
    let (w, h) = (width as usize, height as usize);
    let mut base = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let fx = x as f32 / CELL as f32;
            let fy = y as f32 / CELL as f32;
            let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (fx - ix as f32, fy - iy as f32);
            let at = |i: usize, j: usize| lattice[j * gw as usize + i];
            let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
            let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
            base[y * w + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    box_filter(&base, w, h, 2)
}

fn box_filter(src: &[f32], w: usize, h: usize, r: i64) -> Vec<f32> {
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = 0.0f64;
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, h as i64 - 1) as usize;
                for dx in -r..=r {
                    let xx = (x + dx).clamp(0, w as i64 - 1) as usize;
                    acc += src[yy * w + xx] as f64;
                }
            }
            out[y as usize * w + x as usize] = (acc / ((2 * r + 1) * (2 * r + 1)) as f64) as f32;
        }
    }
    out
}

/// Phase hop: inside each disk the phase jumps to `hop_sign × 90°` and the
/// topography is replaced by invalid low-frequency texture.
pub fn simulate_phase_hop(
    height_frame: &ScanFrame,
    phase_frame: &ScanFrame,
    blobs: &[Blob],
    hop_sign: i8,
    seed: u64,
) -> Result<(ScanFrame, ScanFrame, MaskImage), SimError> {
    if height_frame.dims() != phase_frame.dims() {
        return Err(SimError::MismatchedDimensions(height_frame.dims(), phase_frame.dims()));
    }
    if phase_frame.channel() != Channel::Phase {
        return Err(SimError::WrongChannel {
            expected: "phase",
            got: phase_frame.channel(),
        });
    }
    if hop_sign != 1 && hop_sign != -1 {
        return Err(SimError::InvalidParameter("hop_sign must be +1 or -1".into()));
    }
    let (w, h) = height_frame.dims();
    if let Some(b) = blobs.iter().find(|b| b.cx >= w || b.cy >= h) {
        return Err(SimError::InvalidParameter(format!("blob centre ({}, {}) outside frame", b.cx, b.cy)));
    }
    let mask = disks_mask(w, h, blobs);
    if mask.is_empty() {
        return Ok((height_frame.clone(), phase_frame.clone(), mask));
    }
    let hop = phase_frame.normalized_value(90.0 * hop_sign as f64);
    if !(0.0..=1.0).contains(&hop) {
        return Err(SimError::PhaseOutOfRange(phase_frame.z_scale()));
    }
    let texture = invalid_texture(w, h, seed);
    let mut hp = height_frame.pixels().to_vec();
    let mut pp = phase_frame.pixels().to_vec();
    for (i, _) in mask.bits().iter().enumerate().filter(|(_, &b)| b) {
        hp[i] = texture[i];
        pp[i] = hop as f32;
    }
    Ok((height_frame.with_pixels(hp)?, phase_frame.with_pixels(pp)?, mask))
}

/// Copies donor pixels under `donor_mask` into `clean`, shifted by `offset`.
pub fn transplant_artefact_patch(
    clean: &ScanFrame,
    donor: &ScanFrame,
    donor_mask: &MaskImage,
    offset: (i32, i32),
) -> Result<(ScanFrame, MaskImage), SimError> {
    if donor.dims() != donor_mask.dims() {
        return Err(SimError::MismatchedDimensions(donor.dims(), donor_mask.dims()));
    }
    if donor_mask.is_empty() {
        return Err(SimError::EmptyDonorMask);
    }
    let (w, h) = clean.dims();
    let dw = donor.width() as usize;
    let mut pixels = clean.pixels().to_vec();
    let mut mask = MaskImage::empty(w, h);
    for (i, _) in donor_mask.bits().iter().enumerate().filter(|(_, &b)| b) {
        let (x, y) = ((i % dw) as i64, (i / dw) as i64);
        let (tx, ty) = (x + offset.0 as i64, y + offset.1 as i64);
        if tx < 0 || ty < 0 || tx >= w as i64 || ty >= h as i64 {
            return Err(SimError::PatchOutOfBounds);
        }
        pixels[ty as usize * w as usize + tx as usize] = donor.pixels()[i];
        mask.set(tx as u32, ty as u32, true);
    }
    Ok((clean.with_pixels(pixels)?, mask))
}
