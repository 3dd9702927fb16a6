//! Quality metrics restricted to a mask: MSE, PSNR and SSIM.
//!
//! All metrics work on [`Plane`]s, double-precision copies of a frame, so
//! that fixtures can be built without `f32` rounding. The peak value is 1.

use crate::frame::{MaskImage, ScanFrame};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("mask is empty")]
    EmptyMask,
    #[error("dimensions differ: {0:?} vs {1:?}")]
    MismatchedDimensions((usize, usize), (usize, usize)),
    #[error("frame {width}x{height} is smaller than the {window}-pixel window")]
    FrameTooSmall { width: usize, height: usize, window: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height, "plane buffer size");
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let data = (0..width * height).map(|i| f(i % width, i / width)).collect();
        Self { width, height, data }
    }

    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

impl From<&ScanFrame> for Plane {
    fn from(f: &ScanFrame) -> Self {
        Plane::new(f.width() as usize, f.height() as usize, f.to_f64())
    }
}

pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskedScore {
    pub psnr_db: f64,
    pub mse: f64,
    pub ssim: f64,
    pub masked_pixels: u32,
}

fn check(a: &Plane, b: &Plane, mask: &MaskImage) -> Result<(), MetricError> {
    if a.dims() != b.dims() {
        return Err(MetricError::MismatchedDimensions(a.dims(), b.dims()));
    }
    let md = (mask.width() as usize, mask.height() as usize);
    if md != a.dims() {
        return Err(MetricError::MismatchedDimensions(a.dims(), md));
    }
    if mask.is_empty() {
        return Err(MetricError::EmptyMask);
    }
    Ok(())
}

pub fn masked_mse_metric(restored: &Plane, truth: &Plane, mask: &MaskImage) -> Result<f64, MetricError> {
    check(restored, truth, mask)?;
    let mut sum = 0.0;
    for ((a, b), &m) in restored.data.iter().zip(&truth.data).zip(mask.bits()) {
        if m {
            sum += (a - b) * (a - b);
        }
    }
    Ok(sum / mask.count() as f64)
}

pub fn psnr_from_mse(mse: f64, cap: f64) -> f64 {
    if mse < 1e-10 {
        cap
    } else {
        (10.0 * (1.0 / mse).log10()).min(cap)
    }
}

pub fn masked_psnr(restored: &Plane, truth: &Plane, mask: &MaskImage, cap: f64) -> Result<f64, MetricError> {
    masked_mse_metric(restored, truth, mask).map(|mse| psnr_from_mse(mse, cap))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

pub fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window / 2) as f64;
    let k: Vec<f64> = (0..window).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian smoothing; taps falling outside the frame are dropped
/// and the remaining weights renormalised.
fn blur(data: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (k, &kv) in kernel.iter().enumerate() {
                    let off = k as i64 - r;
                    let (sx, sy) = if horizontal {
                        (x as i64 + off, y as i64)
                    } else {
                        (x as i64, y as i64 + off)
                    };
                    if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
                        continue;
                    }
                    acc += kv * src[sy as usize * w + sx as usize];
                    norm += kv;
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(data, true), false)
}

/// Gaussian-weighted local moments `(μa, μb, E[a²], E[b²], E[ab])` per pixel.
pub fn local_moments(a: &Plane, b: &Plane, params: &SsimParams) -> [Vec<f64>; 5] {
    let k = gaussian_kernel(params.window, params.sigma);
    let (w, h) = a.dims();
    let aa: Vec<f64> = a.data.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.data.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    [
        blur(&a.data, w, h, &k),
        blur(&b.data, w, h, &k),
        blur(&aa, w, h, &k),
        blur(&bb, w, h, &k),
        blur(&ab, w, h, &k),
    ]
}

/// Full-frame SSIM map.
pub fn ssim_map(a: &Plane, b: &Plane, params: &SsimParams) -> Result<Vec<f64>, MetricError> {
    if a.dims() != b.dims() {
        return Err(MetricError::MismatchedDimensions(a.dims(), b.dims()));
    }
    if a.width < params.window || a.height < params.window {
        return Err(MetricError::FrameTooSmall {
            width: a.width,
            height: a.height,
            window: params.window,
        });
    }
    let c1 = (params.k1 * params.dynamic_range).powi(2);
    let c2 = (params.k2 * params.dynamic_range).powi(2);
    let [ma, mb, eaa, ebb, eab] = local_moments(a, b, params);
    Ok((0..a.data.len())
        .map(|i| {
            let va = eaa[i] - ma[i] * ma[i];
            let vb = ebb[i] - mb[i] * mb[i];
            let cov = eab[i] - ma[i] * mb[i];
            ((2.0 * ma[i] * mb[i] + c1) * (2.0 * cov + c2)) / ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2))
        })
        .collect())
}

/// Mean of the SSIM map over masked pixels.
pub fn masked_ssim(restored: &Plane, truth: &Plane, mask: &MaskImage, params: &SsimParams) -> Result<f64, MetricError> {
    check(restored, truth, mask)?;
    let map = ssim_map(restored, truth, params)?;
    let sum: f64 = map.iter().zip(mask.bits()).filter(|(_, &m)| m).map(|(v, _)| v).sum();
    Ok(sum / mask.count() as f64)
}

pub fn score_planes(restored: &Plane, truth: &Plane, mask: &MaskImage) -> Result<MaskedScore, MetricError> {
    let mse = masked_mse_metric(restored, truth, mask)?;
    Ok(MaskedScore {
        psnr_db: psnr_from_mse(mse, PSNR_CAP_DB),
        mse,
        ssim: masked_ssim(restored, truth, mask, &SsimParams::default())?,
        masked_pixels: mask.count() as u32,
    })
}

pub fn score_restoration(restored: &ScanFrame, truth: &ScanFrame, mask: &MaskImage) -> Result<MaskedScore, MetricError> {
    score_planes(&Plane::from(restored), &Plane::from(truth), mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(w: usize, h: usize, seed: u64) -> Plane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Plane::from_fn(w, h, |_, _| rng.random::<f64>())
    }

    #[test]
    fn offset_examples() {
        let truth = random_plane(16, 16, 1);
        let shifted = Plane::new(16, 16, truth.data.iter().map(|v| v + 0.1).collect());
        let mask = MaskImage::from_fn(16, 16, |x, y| x > 3 && y > 5);
        assert!((masked_mse_metric(&shifted, &truth, &mask).unwrap() - 0.01).abs() < 1e-15);
        assert!((masked_psnr(&shifted, &truth, &mask, PSNR_CAP_DB).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(masked_psnr(&truth, &truth, &mask, PSNR_CAP_DB).unwrap(), 100.0);
        assert_eq!(masked_mse_metric(&truth, &truth, &MaskImage::empty(16, 16)), Err(MetricError::EmptyMask));
    }

    #[test]
    fn ssim_identity_and_luminance_case() {
        let x = random_plane(20, 17, 2);
        let all = MaskImage::full(20, 17);
        assert_eq!(masked_ssim(&x, &x, &all, &SsimParams::default()).unwrap(), 1.0);
        let a = Plane::from_fn(24, 24, |_, _| 0.5);
        let b = Plane::from_fn(24, 24, |_, _| 0.6);
        let interior = MaskImage::from_fn(24, 24, |x, y| (6..18).contains(&x) && (6..18).contains(&y));
        let s = masked_ssim(&a, &b, &interior, &SsimParams::default()).unwrap();
        let closed = (2.0 * 0.3 + 1e-4) / (0.25 + 0.36 + 1e-4);
        assert!((s - closed).abs() < 1e-9, "{s} vs {closed}");
        assert!((s - 0.98361).abs() < 1e-5);
        assert!(matches!(
            masked_ssim(&random_plane(8, 8, 0), &random_plane(8, 8, 1), &MaskImage::full(8, 8), &SsimParams::default()),
            Err(MetricError::FrameTooSmall { .. })
        ));
    }

    #[test]
    fn moments_match_direct_gaussian_sums() {
        let a = random_plane(16, 16, 3);
        let b = random_plane(16, 16, 4);
        let p = SsimParams::default();
        let [ma, _, _, _, eab] = local_moments(&a, &b, &p);
        for y in 0..16i64 {
            for x in 0..16i64 {
                let (mut s, mut sab, mut norm) = (0.0, 0.0, 0.0);
                for dy in -5i64..=5 {
                    for dx in -5i64..=5 {
                        let (sx, sy) = (x + dx, y + dy);
                        if sx < 0 || sy < 0 || sx >= 16 || sy >= 16 {
                            continue;
                        }
                        let g = (-((dx * dx + dy * dy) as f64) / (2.0 * 1.5 * 1.5)).exp();
                        let j = (sy * 16 + sx) as usize;
                        s += g * a.data[j];
                        sab += g * a.data[j] * b.data[j];
                        norm += g;
                    }
                }
                let i = (y * 16 + x) as usize;
                assert!((ma[i] - s / norm).abs() < 1e-9);
                assert!((eab[i] - sab / norm).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identical_frames_score() {
        let x = random_plane(16, 16, 5);
        let m = MaskImage::from_fn(16, 16, |x, _| x % 3 == 0);
        let s = score_planes(&x, &x, &m).unwrap();
        assert_eq!((s.psnr_db, s.mse, s.ssim, s.masked_pixels), (100.0, 0.0, 1.0, m.count() as u32));
    }

    proptest! {
        #[test]
        fn ssim_symmetric(seed in any::<u64>()) {
            let a = random_plane(14, 12, seed);
            let b = random_plane(14, 12, seed ^ 0xabcdef);
            let m = MaskImage::full(14, 12);
            let p = SsimParams::default();
            let ab = masked_ssim(&a, &b, &m, &p).unwrap();
            let ba = masked_ssim(&b, &a, &m, &p).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn psnr_decreases_with_mse(a in 1e-9f64..1.0, b in 1e-9f64..1.0) {
            prop_assume!(a < b);
            prop_assert!(psnr_from_mse(a, PSNR_CAP_DB) > psnr_from_mse(b, PSNR_CAP_DB));
        }

        #[test]
        fn row_permutation_invariance(seed in any::<u64>(), perm_seed in any::<u64>()) {
            let (w, h) = (9usize, 7usize);
            let a = random_plane(w, h, seed);
            let b = random_plane(w, h, seed.wrapping_add(1));
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            let m = MaskImage::from_fn(w as u32, h as u32, |_, _| rng.random_bool(0.5));
            prop_assume!(!m.is_empty());
            let mut perm: Vec<usize> = (0..h).collect();
            for i in (1..h).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let pa = Plane::from_fn(w, h, |x, y| a.data[perm[y] * w + x]);
            let pb = Plane::from_fn(w, h, |x, y| b.data[perm[y] * w + x]);
            let pm = MaskImage::from_fn(w as u32, h as u32, |x, y| m.get(x, perm[y as usize] as u32));
            let before = masked_mse_metric(&a, &b, &m).unwrap();
            let after = masked_mse_metric(&pa, &pb, &pm).unwrap();
            prop_assert!((before - after).abs() <= 1e-15 * before.max(1.0));
            prop_assert!((psnr_from_mse(before, 100.0) - psnr_from_mse(after, 100.0)).abs() < 1e-12);
        }
    }
}
