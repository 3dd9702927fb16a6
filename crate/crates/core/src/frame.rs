//! In-memory frame and mask types.
//!
//! A [`ScanFrame`] stores one SPM channel with pixels normalized to `[0, 1]`.
//! Physical values are recovered through `z_scale`: nanometres per unit for
//! height and amplitude, degrees per unit for phase. Phase frames are centred
//! on 0.5 so that both signs of the phase lag are representable.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FrameError {
    #[error("pixel buffer has {got} values, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("pixel {index} is not finite or outside [0, 1]: {value}")]
    PixelOutOfRange { index: usize, value: f32 },
    #[error("frame dimensions must be non-zero")]
    ZeroSize,
    #[error("invalid physical metadata: {0}")]
    BadMetadata(&'static str),
    #[error("input is constant, cannot normalize")]
    ConstantInput,
    #[error("input contains a non-finite value at {0}")]
    NonFiniteInput(usize),
    #[error("dimensions {a:?} and {b:?} do not match")]
    MismatchedDimensions { a: (u32, u32), b: (u32, u32) },
}

/// Acquisition channel of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Height,
    Amplitude,
    Phase,
}

impl Channel {
    pub fn code(self) -> u8 {
        match self {
            Channel::Height => 0,
            Channel::Amplitude => 1,
            Channel::Phase => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Channel::Height),
            1 => Some(Channel::Amplitude),
            2 => Some(Channel::Phase),
            _ => None,
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Channel::Height => "height",
            Channel::Amplitude => "amplitude",
            Channel::Phase => "phase",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Channel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "height" => Ok(Channel::Height),
            "amplitude" => Ok(Channel::Amplitude),
            "phase" => Ok(Channel::Phase),
            other => Err(format!("unknown channel `{other}`")),
        }
    }
}

/// One grayscale SPM channel image. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanFrame {
    width: u32,
    height: u32,
    channel: Channel,
    scan_size_um: f32,
    z_scale: f32,
    pixels: Vec<f32>,
}

impl ScanFrame {
    pub fn new(
        width: u32,
        height: u32,
        channel: Channel,
        scan_size_um: f32,
        z_scale: f32,
        pixels: Vec<f32>,
    ) -> Result<Self, FrameError> {
        if width == 0 || height == 0 {
            return Err(FrameError::ZeroSize);
        }
        let expected = width as usize * height as usize;
        if pixels.len() != expected {
            return Err(FrameError::LengthMismatch {
                expected,
                got: pixels.len(),
            });
        }
        if !(scan_size_um.is_finite() && scan_size_um > 0.0) {
            return Err(FrameError::BadMetadata("scan_size_um must be > 0"));
        }
        if !(z_scale.is_finite() && z_scale > 0.0) {
            return Err(FrameError::BadMetadata("z_scale must be > 0"));
        }
        if let Some((index, &value)) = pixels
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(FrameError::PixelOutOfRange { index, value });
        }
        Ok(Self {
            width,
            height,
            channel,
            scan_size_um,
            z_scale,
            pixels,
        })
    }

    /// Constant frame with unit metadata, mostly useful in tests and fixtures.
    pub fn constant(width: u32, height: u32, channel: Channel, value: f32) -> Result<Self, FrameError> {
        let n = width as usize * height as usize;
        Self::new(width, height, channel, 1.0, 1.0, vec![value; n])
    }

    /// Builds a frame from a closure over `(x, y)`; values are clamped to `[0, 1]`.
    pub fn from_fn(
        width: u32,
        height: u32,
        channel: Channel,
        mut f: impl FnMut(u32, u32) -> f32,
    ) -> Result<Self, FrameError> {
        let mut pixels = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self::new(width, height, channel, 1.0, 1.0, pixels)
    }

    /// Same metadata, new pixel buffer.
    pub fn with_pixels(&self, pixels: Vec<f32>) -> Result<Self, FrameError> {
        Self::new(
            self.width,
            self.height,
            self.channel,
            self.scan_size_um,
            self.z_scale,
            pixels,
        )
    }

    pub fn with_metadata(&self, channel: Channel, scan_size_um: f32, z_scale: f32) -> Result<Self, FrameError> {
        Self::new(
            self.width,
            self.height,
            channel,
            scan_size_um,
            z_scale,
            self.pixels.clone(),
        )
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn channel(&self) -> Channel {
        self.channel
    }

    pub fn scan_size_um(&self) -> f32 {
        self.scan_size_um
    }

    pub fn z_scale(&self) -> f32 {
        self.z_scale
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    /// Physical value of a normalized pixel: nm for height/amplitude, degrees for phase.
    pub fn physical_value(&self, normalized: f32) -> f64 {
        match self.channel {
            Channel::Phase => (normalized as f64 - 0.5) * self.z_scale as f64,
            _ => normalized as f64 * self.z_scale as f64,
        }
    }

    /// Inverse of [`ScanFrame::physical_value`], not clamped.
    pub fn normalized_value(&self, physical: f64) -> f64 {
        match self.channel {
            Channel::Phase => physical / self.z_scale as f64 + 0.5,
            _ => physical / self.z_scale as f64,
        }
    }

    pub fn physical(&self, index: usize) -> f64 {
        self.physical_value(self.pixels[index])
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&v| v as f64).collect()
    }
}

/// Binary per-pixel mask, `true` meaning "inside the mask".
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskImage {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl MaskImage {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, FrameError> {
        let expected = width as usize * height as usize;
        if bits.len() != expected {
            return Err(FrameError::LengthMismatch {
                expected,
                got: bits.len(),
            });
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let w = self.width as usize;
        self.bits[y as usize * w + x as usize] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    pub fn not(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    fn zip_with(&self, other: &Self, f: impl Fn(bool, bool) -> bool) -> Result<Self, FrameError> {
        self.check_same_dims(other.dims())?;
        Ok(Self {
            width: self.width,
            height: self.height,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn union(&self, other: &Self) -> Result<Self, FrameError> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &Self) -> Result<Self, FrameError> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn difference(&self, other: &Self) -> Result<Self, FrameError> {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn check_same_dims(&self, dims: (u32, u32)) -> Result<(), FrameError> {
        if self.dims() != dims {
            return Err(FrameError::MismatchedDimensions {
                a: self.dims(),
                b: dims,
            });
        }
        Ok(())
    }

    /// Square (Chebyshev) dilation by `radius` pixels.
    pub fn dilate(&self, radius: u32) -> Self {
        if radius == 0 {
            return self.clone();
        }
        // separable: rows then columns
        let (w, h) = (self.width as usize, self.height as usize);
        let r = radius as usize;
        let mut tmp = vec![false; w * h];
        for y in 0..h {
            let row = &self.bits[y * w..(y + 1) * w];
            for x in 0..w {
                let lo = x.saturating_sub(r);
                let hi = (x + r).min(w - 1);
                tmp[y * w + x] = row[lo..=hi].iter().any(|&b| b);
            }
        }
        let mut out = vec![false; w * h];
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(h - 1);
            for x in 0..w {
                out[y * w + x] = (lo..=hi).any(|yy| tmp[yy * w + x]);
            }
        }
        Self {
            width: self.width,
            height: self.height,
            bits: out,
        }
    }

    /// Square erosion; pixels outside the frame do not constrain the result.
    pub fn erode(&self, radius: u32) -> Self {
        self.not().dilate(radius).not()
    }

    /// Bounding box `(x0, y0, x1, y1)` inclusive, or `None` when empty.
    pub fn bounding_box(&self) -> Option<(u32, u32, u32, u32)> {
        let w = self.width as usize;
        let mut bbox: Option<(u32, u32, u32, u32)> = None;
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            let (x, y) = ((i % w) as u32, (i / w) as u32);
            bbox = Some(match bbox {
                None => (x, y, x, y),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
            });
        }
        bbox
    }

    /// 4-connected components as lists of pixel indices, in scan order of their first pixel.
    pub fn components4(&self) -> Vec<Vec<usize>> {
        self.components(false)
    }

    pub fn components8(&self) -> Vec<Vec<usize>> {
        self.components(true)
    }

    fn components(&self, diagonal: bool) -> Vec<Vec<usize>> {
        let (w, h) = (self.width as i64, self.height as i64);
        let mut seen = vec![false; self.bits.len()];
        let mut out = Vec::new();
        let offsets: &[(i64, i64)] = if diagonal {
            &[(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)]
        } else {
            &[(0, -1), (-1, 0), (1, 0), (0, 1)]
        };
        for start in 0..self.bits.len() {
            if !self.bits[start] || seen[start] {
                continue;
            }
            seen[start] = true;
            let mut comp = vec![start];
            let mut stack = vec![start];
            while let Some(i) = stack.pop() {
                let (x, y) = (i as i64 % w, i as i64 / w);
                for &(dx, dy) in offsets {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    let j = (ny * w + nx) as usize;
                    if self.bits[j] && !seen[j] {
                        seen[j] = true;
                        comp.push(j);
                        stack.push(j);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }
}

/// Min/max normalization of raw channel values.
///
/// Returns the frame together with `(offset, scale)` such that
/// `raw = pixel * scale + offset`. Unit physical metadata is attached; callers
/// set the real scan size and z-scale with [`ScanFrame::with_metadata`].
pub fn normalize_frame(
    width: u32,
    height: u32,
    raw: &[f32],
    channel: Channel,
) -> Result<(ScanFrame, f32, f32), FrameError> {
    if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
        return Err(FrameError::NonFiniteInput(i));
    }
    let min = raw.iter().copied().fold(f32::INFINITY, f32::min);
    let max = raw.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if raw.is_empty() || max == min {
        return Err(FrameError::ConstantInput);
    }
    let (lo, range) = (min as f64, max as f64 - min as f64);
    let pixels = raw
        .iter()
        .map(|&v| (((v as f64 - lo) / range) as f32).clamp(0.0, 1.0))
        .collect();
    let frame = ScanFrame::new(width, height, channel, 1.0, 1.0, pixels)?;
    Ok((frame, min, (max as f64 - min as f64) as f32))
}

/// Inverse of [`normalize_frame`].
pub fn denormalize(frame: &ScanFrame, offset: f32, scale: f32) -> Vec<f32> {
    frame
        .pixels()
        .iter()
        .map(|&p| (p as f64 * scale as f64 + offset as f64) as f32)
        .collect()
}
