//! Procedural clean surfaces resembling common SPM topographies.

use crate::frame::{Channel, FrameError, ScanFrame};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceKind {
    /// Gaussian grains on a gently tilted background.
    Grains,
    /// Atomic-step terraces with rounded edges.
    Terraces,
    /// Smooth oriented stripe domains.
    Domains,
    /// Drawn uniformly from the kinds above.
    Mixed,
}

impl std::str::FromStr for SurfaceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "grains" => Ok(SurfaceKind::Grains),
            "terraces" => Ok(SurfaceKind::Terraces),
            "domains" => Ok(SurfaceKind::Domains),
            "mixed" => Ok(SurfaceKind::Mixed),
            other => Err(format!("unknown surface kind `{other}`")),
        }
    }
}

/// Generates a normalized height frame in `[0.1, 0.9]`, deterministic in `seed`.
pub fn synthetic_surface(width: u32, height: u32, kind: SurfaceKind, seed: u64) -> Result<ScanFrame, FrameError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = match kind {
        SurfaceKind::Mixed => match rng.random_range(0..3) {
            0 => SurfaceKind::Grains,
            1 => SurfaceKind::Terraces,
            _ => SurfaceKind::Domains,
        },
        k => k,
    };
    let (w, h) = (width as usize, height as usize);
    let scale = width.max(height) as f64;
    let mut z = vec![0.0f64; w * h];
    let tilt = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    match kind {
        SurfaceKind::Grains => {
            let n = rng.random_range(6..14) as usize * (w * h).div_ceil(64 * 64).max(1);
            let grains: Vec<(f64, f64, f64, f64)> = (0..n)
                .map(|_| {
                    (
                        rng.random_range(0.0..width as f64),
                        rng.random_range(0.0..height as f64),
                        rng.random_range(0.04..0.12) * scale,
                        rng.random_range(0.4..1.0),
                    )
                })
                .collect();
            for y in 0..h {
                for x in 0..w {
                    let mut v = 0.0;
                    for &(cx, cy, s, a) in &grains {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        v += a * (-d2 / (2.0 * s * s)).exp();
                    }
                    z[y * w + x] = v;
                }
            }
        }
        SurfaceKind::Terraces => {
            let angle = rng.random_range(0.0..PI);
            let (c, s) = (angle.cos(), angle.sin());
            let spacing = rng.random_range(0.15..0.35) * scale;
            let sharp = rng.random_range(1.5..4.0);
            let wobble = rng.random_range(0.0..0.08) * scale;
            let wf = rng.random_range(1.0..3.0) * 2.0 * PI / scale;
            for y in 0..h {
                for x in 0..w {
                    let along = x as f64 * c + y as f64 * s;
                    let across = -(x as f64) * s + y as f64 * c;
                    let u = (along + wobble * (wf * across).sin()) / spacing;
                    let step = u.floor() + 0.5 * (1.0 + ((u - u.floor() - 0.5) * 2.0 * sharp).tanh());
                    z[y * w + x] = step;
                }
            }
        }
        SurfaceKind::Domains => {
            let angle = rng.random_range(0.0..PI);
            let (c, s) = (angle.cos(), angle.sin());
            let period = rng.random_range(0.2..0.5) * scale;
            let phase = rng.random_range(0.0..2.0 * PI);
            let bend = rng.random_range(0.0..1.5);
            for y in 0..h {
                for x in 0..w {
                    let along = x as f64 * c + y as f64 * s;
                    let across = -(x as f64) * s + y as f64 * c;
                    let u = 2.0 * PI * along / period + bend * (2.0 * PI * across / scale).sin() + phase;
                    z[y * w + x] = (u.sin() * 2.0).tanh();
                }
            }
        }
        SurfaceKind::Mixed => unreachable!(),
    }
    let (lo, hi) = z.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let base = (z[y * w + x] - lo) / span;
            let t = tilt.0 * (x as f64 / scale - 0.5) + tilt.1 * (y as f64 / scale - 0.5);
            pixels.push(base * 0.8 + 0.1 + 0.1 * t);
        }
    }
    let (lo, hi) = pixels.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels = pixels.into_iter().map(|v| (0.1 + 0.8 * (v - lo) / span) as f32).collect();
    ScanFrame::new(width, height, Channel::Height, 2.0, 10.0, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn surfaces_are_deterministic_and_in_range() {
        for kind in [SurfaceKind::Grains, SurfaceKind::Terraces, SurfaceKind::Domains, SurfaceKind::Mixed] {
            let a = synthetic_surface(32, 24, kind, 5).unwrap();
            let b = synthetic_surface(32, 24, kind, 5).unwrap();
            assert_eq!(a, b);
            let (lo, hi) = a.pixels().iter().fold((1.0f32, 0.0f32), |(l, h), &v| (l.min(v), h.max(v)));
            assert!(lo >= 0.0999 && hi <= 0.9001, "{kind:?}: {lo} {hi}");
            assert!(hi - lo > 0.5);
        }
        assert_ne!(
            synthetic_surface(16, 16, SurfaceKind::Grains, 1).unwrap(),
            synthetic_surface(16, 16, SurfaceKind::Grains, 2).unwrap()
        );
    }
}
