//! Classical (non-learning) inpainting baselines.
//!
//! Every method takes a frame and a mask and returns a new frame in which only
//! masked pixels differ; unmasked pixels are copied bit for bit.

mod biharmonic;
mod ns;
mod patchmatch;
mod surface_fit;
mod telea;

pub use biharmonic::{biharmonic_values, inpaint_biharmonic, BiharmonicParams};
pub use ns::{inpaint_ns, NsParams};
pub use patchmatch::{inpaint_patchmatch, patch_distance, patchmatch_nnf, GrayImage, Nnf, NnfParams, PatchMatchParams};
pub use surface_fit::{fit_polynomial, inpaint_surface_fit, monomials, SurfaceFitParams};
pub use telea::{fmm_distances, inpaint_telea, inpaint_telea_traced, TeleaParams};

use crate::frame::{FrameError, MaskImage, ScanFrame};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum InpaintError {
    #[error("solver did not converge: residual {residual:e} after {iters} iterations")]
    DidNotConverge { iters: usize, residual: f64 },
    #[error("mask covers the entire frame, nothing to interpolate from")]
    MaskTouchesEntireFrame,
    #[error("no fully unmasked {patch}x{patch} source patch")]
    NoValidSourcePatch { patch: u32 },
    #[error("only {have} support pixels for {need} required")]
    InsufficientSupport { have: usize, need: usize },
    #[error("least-squares system is rank deficient")]
    RankDeficient,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unknown inpainting method `{0}`")]
    UnknownMethod(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InpaintMethod {
    #[serde(rename = "biharmonic")]
    Biharmonic,
    #[serde(rename = "ns")]
    NavierStokes,
    #[serde(rename = "telea")]
    Telea,
    #[serde(rename = "patchmatch")]
    PatchMatch,
    #[serde(rename = "surface")]
    SurfaceFit,
}

impl InpaintMethod {
    pub const ALL: [InpaintMethod; 5] = [
        InpaintMethod::Biharmonic,
        InpaintMethod::NavierStokes,
        InpaintMethod::Telea,
        InpaintMethod::PatchMatch,
        InpaintMethod::SurfaceFit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InpaintMethod::Biharmonic => "biharmonic",
            InpaintMethod::NavierStokes => "ns",
            InpaintMethod::Telea => "telea",
            InpaintMethod::PatchMatch => "patchmatch",
            InpaintMethod::SurfaceFit => "surface",
        }
    }
}

impl fmt::Display for InpaintMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for InpaintMethod {
    type Err = InpaintError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        InpaintMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| InpaintError::UnknownMethod(s.to_string()))
    }
}

/// Method selector plus the parameters of every method.
#[derive(Debug, Clone, PartialEq)]
pub struct InpaintParams {
    pub method: InpaintMethod,
    pub biharmonic: BiharmonicParams,
    pub ns: NsParams,
    pub telea: TeleaParams,
    pub patchmatch: PatchMatchParams,
    pub surface: SurfaceFitParams,
}

impl InpaintParams {
    pub fn new(method: InpaintMethod) -> Self {
        Self {
            method,
            biharmonic: BiharmonicParams::default(),
            ns: NsParams::default(),
            telea: TeleaParams::default(),
            patchmatch: PatchMatchParams::default(),
            surface: SurfaceFitParams::default(),
        }
    }
}

/// Dispatches to the selected method.
pub fn inpaint(frame: &ScanFrame, mask: &MaskImage, params: &InpaintParams) -> Result<ScanFrame, InpaintError> {
    match params.method {
        InpaintMethod::Biharmonic => inpaint_biharmonic(frame, mask, &params.biharmonic),
        InpaintMethod::NavierStokes => inpaint_ns(frame, mask, &params.ns),
        InpaintMethod::Telea => inpaint_telea(frame, mask, &params.telea),
        InpaintMethod::PatchMatch => inpaint_patchmatch(frame, mask, &params.patchmatch),
        InpaintMethod::SurfaceFit => inpaint_surface_fit(frame, mask, &params.surface),
    }
}

/// Shared precondition check. `Ok(false)` means the mask is empty and the
/// frame can be returned unchanged.
fn check_inputs(frame: &ScanFrame, mask: &MaskImage) -> Result<bool, InpaintError> {
    mask.check_same_dims(frame.dims())?;
    if mask.is_full() {
        return Err(InpaintError::MaskTouchesEntireFrame);
    }
    Ok(!mask.is_empty())
}

/// Writes clamped values back into masked pixels only.
fn compose(frame: &ScanFrame, mask: &MaskImage, values: &[f64]) -> Result<ScanFrame, InpaintError> {
    let pixels = frame
        .pixels()
        .iter()
        .zip(mask.bits())
        .zip(values)
        .map(|((&orig, &m), &v)| if m { (v.clamp(0.0, 1.0)) as f32 } else { orig })
        .collect();
    Ok(frame.with_pixels(pixels)?)
}

/// Values of unmasked pixels within Chebyshev distance 2 of the mask.
fn boundary_ring(frame: &ScanFrame, mask: &MaskImage) -> Vec<f32> {
    let ring = mask.dilate(2).difference(mask).expect("same dims");
    ring.bits()
        .iter()
        .zip(frame.pixels())
        .filter(|(&b, _)| b)
        .map(|(_, &v)| v)
        .collect()
}
