//! Training data: clean crops for pretraining and inpainting pairs for
//! fine-tuning, held as pixel values in `[0, 1]`.

use crate::error::DiffusionError;
use spm_core::io::{load_frame, load_mask};
use spm_core::manifest::{read_manifest, resolve};
use spm_core::manifest::Split;
use spm_core::sim::{synthetic_surface, SurfaceKind};
use spm_core::MaskImage;
use std::path::Path;

/// Pixel `[0, 1]` to model space `[-1, 1]`.
pub fn to_model(p: f64) -> f64 {
    2.0 * p - 1.0
}

pub fn from_model(x: f64) -> f64 {
    0.5 * (x + 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

/// One fine-tuning example: clean target, inpainting mask `M` and an optional
/// real-artefact mask `A` marking corrupted pixels of the target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub id: String,
    pub clean: Crop,
    pub mask: MaskImage,
    pub artefact_mask: Option<MaskImage>,
}

/// `count` synthetic clean surfaces of `size x size`.
pub fn synthetic_crops(count: usize, size: u32, seed: u64) -> Result<Vec<Crop>, DiffusionError> {
    (0..count as u64)
        .map(|i| {
            let f = synthetic_surface(size, size, SurfaceKind::Mixed, seed.wrapping_mul(1_000_003).wrapping_add(i))?;
            Ok(Crop {
                width: size as usize,
                height: size as usize,
                pixels: f.to_f64(),
            })
        })
        .collect()
}

/// Loads the pairs of one split from a dataset manifest.
pub fn load_pairs(manifest: impl AsRef<Path>, split: Option<Split>) -> Result<Vec<TrainPair>, DiffusionError> {
    let manifest = manifest.as_ref();
    let entries = read_manifest(manifest, true)?;
    let mut pairs = Vec::new();
    for e in entries.into_iter().filter(|e| split.is_none_or(|s| e.split == s)) {
        let clean = load_frame(resolve(manifest, &e.clean_path))?;
        let mask = load_mask(resolve(manifest, &e.mask_path))?;
        mask.check_same_dims(clean.dims())?;
        let artefact_mask = match &e.ignore_path {
            Some(p) => {
                let a = load_mask(resolve(manifest, p))?;
                a.check_same_dims(clean.dims())?;
                Some(a)
            }
            None => None,
        };
        pairs.push(TrainPair {
            id: e.id.clone(),
            clean: Crop {
                width: clean.width() as usize,
                height: clean.height() as usize,
                pixels: clean.to_f64(),
            },
            mask,
            artefact_mask,
        });
    }
    Ok(pairs)
}

/// Horizontal and/or vertical flip, `k` in `0..4`.
pub(crate) fn flip(data: &[f64], w: usize, h: usize, k: u8) -> Vec<f64> {
    let (fx, fy) = (k & 1 != 0, k & 2 != 0);
    (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let sx = if fx { w - 1 - x } else { x };
            let sy = if fy { h - 1 - y } else { y };
            data[sy * w + sx]
        })
        .collect()
}

pub(crate) fn flip_mask(m: &MaskImage, k: u8) -> MaskImage {
    let (w, h) = (m.width(), m.height());
    MaskImage::from_fn(w, h, |x, y| {
        let sx = if k & 1 != 0 { w - 1 - x } else { x };
        let sy = if k & 2 != 0 { h - 1 - y } else { y };
        m.get(sx, sy)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flips_are_involutions() {
        let d: Vec<f64> = (0..12).map(f64::from).collect();
        for k in 0..4 {
            assert_eq!(flip(&flip(&d, 4, 3, k), 4, 3, k), d);
        }
        assert_eq!(flip(&d, 4, 3, 1)[..4], [3.0, 2.0, 1.0, 0.0]);
        let m = MaskImage::from_fn(4, 3, |x, y| x == 0 && y == 0);
        assert!(flip_mask(&m, 3).get(3, 2));
    }

    #[test]
    fn model_space() {
        assert_eq!(to_model(0.0), -1.0);
        assert!((from_model(to_model(0.3)) - 0.3).abs() < 1e-15);
    }
}
