//! Fluid-dynamics style inpainting: the image Laplacian (vorticity) is
//! transported along isophotes, `u_t = ∇(Δu) · ∇⊥u`, interleaved with
//! curvature-driven anisotropic diffusion.

use super::{boundary_ring, check_inputs, compose, InpaintError};
use crate::frame::{MaskImage, ScanFrame};

#[derive(Debug, Clone, PartialEq)]
pub struct NsParams {
    pub iters: usize,
    pub dt: f64,
    pub diffusion_every: usize,
    /// Gauss-Seidel sweeps of the harmonic initialisation.
    pub init_sweeps: usize,
}

impl Default for NsParams {
    fn default() -> Self {
        Self {
            iters: 300,
            dt: 0.1,
            diffusion_every: 15,
            init_sweeps: 200,
        }
    }
}

struct Grid<'a> {
    w: i64,
    h: i64,
    v: &'a [f64],
}

impl Grid<'_> {
    fn at(&self, x: i64, y: i64) -> f64 {
        self.v[(y.clamp(0, self.h - 1) * self.w + x.clamp(0, self.w - 1)) as usize]
    }
}

fn laplacian(g: &Grid, x: i64, y: i64) -> f64 {
    g.at(x + 1, y) + g.at(x - 1, y) + g.at(x, y + 1) + g.at(x, y - 1) - 4.0 * g.at(x, y)
}

/// Harmonic fill by Gauss-Seidel; a smooth starting point for transport.
fn harmonic_init(values: &mut [f64], w: i64, h: i64, masked: &[usize], start: f64, sweeps: usize) {
    for &i in masked {
        values[i] = start;
    }
    for _ in 0..sweeps {
        for &i in masked {
            let (x, y) = (i as i64 % w, i as i64 / w);
            let mut s = 0.0;
            let mut n = 0.0;
            for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                let (nx, ny) = (x + dx, y + dy);
                if nx >= 0 && ny >= 0 && nx < w && ny < h {
                    s += values[(ny * w + nx) as usize];
                    n += 1.0;
                }
            }
            values[i] = s / n;
        }
    }
}

fn transport_step(values: &mut [f64], w: i64, h: i64, masked: &[usize], dt: f64) {
    let snapshot = values.to_vec();
    let g = Grid { w, h, v: &snapshot };
    for &i in masked {
        let (x, y) = (i as i64 % w, i as i64 / w);
        let dl_x = laplacian(&g, x + 1, y) - laplacian(&g, x - 1, y);
        let dl_y = laplacian(&g, x, y + 1) - laplacian(&g, x, y - 1);
        let ix = 0.5 * (g.at(x + 1, y) - g.at(x - 1, y));
        let iy = 0.5 * (g.at(x, y + 1) - g.at(x, y - 1));
        let norm = (ix * ix + iy * iy).sqrt();
        if norm < 1e-12 {
            continue;
        }
        // projection of the Laplacian change onto the isophote direction
        let beta = 0.5 * (dl_x * -iy + dl_y * ix) / norm;
        let c = g.at(x, y);
        let (bx, fx) = (c - g.at(x - 1, y), g.at(x + 1, y) - c);
        let (by, fy) = (c - g.at(x, y - 1), g.at(x, y + 1) - c);
        let slope = if beta > 0.0 {
            (bx.min(0.0).powi(2) + fx.max(0.0).powi(2) + by.min(0.0).powi(2) + fy.max(0.0).powi(2)).sqrt()
        } else {
            (bx.max(0.0).powi(2) + fx.min(0.0).powi(2) + by.max(0.0).powi(2) + fy.min(0.0).powi(2)).sqrt()
        };
        values[i] = c + dt * beta * slope;
    }
}

/// Mean-curvature motion `u_t = κ |∇u|`.
fn diffusion_step(values: &mut [f64], w: i64, h: i64, masked: &[usize], dt: f64) {
    let snapshot = values.to_vec();
    let g = Grid { w, h, v: &snapshot };
    for &i in masked {
        let (x, y) = (i as i64 % w, i as i64 / w);
        let ux = 0.5 * (g.at(x + 1, y) - g.at(x - 1, y));
        let uy = 0.5 * (g.at(x, y + 1) - g.at(x, y - 1));
        let uxx = g.at(x + 1, y) - 2.0 * g.at(x, y) + g.at(x - 1, y);
        let uyy = g.at(x, y + 1) - 2.0 * g.at(x, y) + g.at(x, y - 1);
        let uxy = 0.25 * (g.at(x + 1, y + 1) - g.at(x + 1, y - 1) - g.at(x - 1, y + 1) + g.at(x - 1, y - 1));
        let grad2 = ux * ux + uy * uy;
        let update = (uxx * uy * uy - 2.0 * ux * uy * uxy + uyy * ux * ux) / (grad2 + 1e-10);
        values[i] += dt * update;
    }
}

pub fn inpaint_ns(frame: &ScanFrame, mask: &MaskImage, params: &NsParams) -> Result<ScanFrame, InpaintError> {
    if params.iters == 0 || params.diffusion_every == 0 || !(params.dt > 0.0) {
        return Err(InpaintError::InvalidParameter("iters, diffusion_every and dt must be positive".into()));
    }
    if !check_inputs(frame, mask)? {
        return Ok(frame.clone());
    }
    let ring = boundary_ring(frame, mask);
    let lo = ring.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let hi = ring.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let start = ring.iter().map(|&v| v as f64).sum::<f64>() / ring.len() as f64;
    let (w, h) = (frame.width() as i64, frame.height() as i64);
    let masked: Vec<usize> = (0..mask.bits().len()).filter(|&i| mask.bits()[i]).collect();
    let mut values = frame.to_f64();
    harmonic_init(&mut values, w, h, &masked, start, params.init_sweeps);
    for it in 1..=params.iters {
        transport_step(&mut values, w, h, &masked, params.dt);
        if it % params.diffusion_every == 0 {
            diffusion_step(&mut values, w, h, &masked, params.dt);
        }
        for &i in &masked {
            values[i] = values[i].clamp(lo, hi);
        }
    }
    compose(frame, mask, &values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::Channel;
    use crate::sim::{synthetic_surface, SurfaceKind};

    fn smooth(n: u32) -> ScanFrame {
        ScanFrame::from_fn(n, n, Channel::Height, |x, y| {
            let (u, v) = (x as f32 / n as f32, y as f32 / n as f32);
            0.5 + 0.2 * (3.0 * u).sin() * (2.0 * v).cos()
        })
        .unwrap()
    }

    #[test]
    fn bounded_by_ring() {
        let f = synthetic_surface(32, 32, SurfaceKind::Terraces, 1).unwrap();
        let m = MaskImage::from_fn(32, 32, |x, y| (8..20).contains(&x) && (10..16).contains(&y));
        let out = inpaint_ns(&f, &m, &NsParams::default()).unwrap();
        let ring = boundary_ring(&f, &m);
        let lo = ring.iter().copied().fold(1.0, f32::min);
        let hi = ring.iter().copied().fold(0.0, f32::max);
        for (i, &v) in out.pixels().iter().enumerate() {
            if m.bits()[i] {
                assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
            }
        }
    }

    #[test]
    fn self_convergence() {
        let f = smooth(32);
        let m = MaskImage::from_fn(32, 32, |x, y| (10..22).contains(&x) && (12..20).contains(&y));
        let a = inpaint_ns(&f, &m, &NsParams::default()).unwrap();
        let b = inpaint_ns(
            &f,
            &m,
            &NsParams {
                iters: 600,
                ..Default::default()
            },
        )
        .unwrap();
        let n = m.count() as f64;
        let rms = (a.pixels().iter().zip(b.pixels()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / n).sqrt();
        assert!(rms < 1e-3, "{rms}");
    }
}
