//! Biharmonic interpolation.
//!
//! Minimises `Σ (Lu)²` over the masked pixels, where `L` is the discrete
//! Laplacian built from the second differences available at each pixel. Away
//! from the frame border the normal equations are the 13-point `∇⁴` stencil.

use super::{check_inputs, compose, InpaintError};
use crate::frame::{MaskImage, ScanFrame};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub struct BiharmonicParams {
    pub tol: f64,
    /// Defaults to `10 * |mask|` when `None`.
    pub max_iter: Option<usize>,
    /// Systems with fewer unknowns are solved directly.
    pub direct_below: usize,
}

impl Default for BiharmonicParams {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: None,
            direct_below: 400,
        }
    }
}

/// Sparse symmetric system over the unknown pixels.
struct System {
    rows: Vec<Vec<(usize, f64)>>,
    rhs: Vec<f64>,
}

impl System {
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(&self.rows) {
            *o = row.iter().map(|&(j, a)| a * x[j]).sum();
        }
    }
}

/// Row `p` of the second-difference operator `L`: `u[x-1] + u[x+1] - 2u[x]`
/// along every axis on which both neighbours lie inside the frame. Affine
/// functions (and the border rows with them) have zero energy.
fn lap_row(x: i64, y: i64, w: i64, h: i64) -> Vec<((i64, i64), f64)> {
    let mut row = Vec::with_capacity(5);
    let mut centre = 0.0;
    if x >= 1 && x + 1 < w {
        row.push(((x - 1, y), 1.0));
        row.push(((x + 1, y), 1.0));
        centre -= 2.0;
    }
    if y >= 1 && y + 1 < h {
        row.push(((x, y - 1), 1.0));
        row.push(((x, y + 1), 1.0));
        centre -= 2.0;
    }
    if centre != 0.0 {
        row.push(((x, y), centre));
    }
    row
}

fn assemble(frame: &ScanFrame, mask: &MaskImage) -> (Vec<usize>, System) {
    let (w, h) = (frame.width() as i64, frame.height() as i64);
    let unknowns: Vec<usize> = (0..mask.bits().len()).filter(|&i| mask.bits()[i]).collect();
    let mut slot = vec![usize::MAX; mask.bits().len()];
    for (k, &i) in unknowns.iter().enumerate() {
        slot[i] = k;
    }
    let px = frame.pixels();
    let mut rows = Vec::with_capacity(unknowns.len());
    let mut rhs = Vec::with_capacity(unknowns.len());
    for &i in &unknowns {
        let (x, y) = (i as i64 % w, i as i64 / w);
        // (LᵀL)_{i,·} = Σ_q L_{qi} L_{q,·} on a 5x5 patch
        let mut patch = [0.0f64; 25];
        for (qx, qy) in [(x, y), (x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)] {
            if qx < 0 || qy < 0 || qx >= w || qy >= h {
                continue;
            }
            let row = lap_row(qx, qy, w, h);
            let Some(&(_, lqi)) = row.iter().find(|(p, _)| *p == (x, y)) else {
                continue;
            };
            for ((jx, jy), lqj) in row {
                patch[((jy - y + 2) * 5 + (jx - x + 2)) as usize] += lqi * lqj;
            }
        }
        let mut row = Vec::with_capacity(13);
        let mut b = 0.0;
        for (k, &c) in patch.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let (jx, jy) = (x + k as i64 % 5 - 2, y + k as i64 / 5 - 2);
            let j = (jy * w + jx) as usize;
            if mask.bits()[j] {
                row.push((slot[j], c));
            } else {
                b -= c * px[j] as f64;
            }
        }
        rows.push(row);
        rhs.push(b);
    }
    (unknowns, System { rows, rhs })
}

fn solve_direct(sys: &System) -> Result<Vec<f64>, InpaintError> {
    let n = sys.rhs.len();
    let mut a = DMatrix::<f64>::zeros(n, n);
    for (i, row) in sys.rows.iter().enumerate() {
        for &(j, c) in row {
            a[(i, j)] = c;
        }
    }
    let chol = a.cholesky().ok_or(InpaintError::DidNotConverge {
        iters: 0,
        residual: f64::NAN,
    })?;
    Ok(chol.solve(&DVector::from_column_slice(&sys.rhs)).as_slice().to_vec())
}

fn solve_cg(sys: &System, x0: Vec<f64>, tol: f64, max_iter: usize) -> Result<Vec<f64>, InpaintError> {
    let n = sys.rhs.len();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let bnorm = norm(&sys.rhs).max(f64::MIN_POSITIVE);
    let mut x = x0;
    let mut ax = vec![0.0; n];
    sys.apply(&x, &mut ax);
    let mut r: Vec<f64> = sys.rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut p = r.clone();
    let mut rr: f64 = r.iter().map(|a| a * a).sum();
    let mut ap = vec![0.0; n];
    for iter in 0..max_iter {
        if rr.sqrt() <= tol * bnorm {
            return Ok(x);
        }
        sys.apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            return Err(InpaintError::DidNotConverge {
                iters: iter,
                residual: rr.sqrt() / bnorm,
            });
        }
        let alpha = rr / pap;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        let rr_new: f64 = r.iter().map(|a| a * a).sum();
        let beta = rr_new / rr;
        rr = rr_new;
        for k in 0..n {
            p[k] = r[k] + beta * p[k];
        }
    }
    if rr.sqrt() <= tol * bnorm {
        return Ok(x);
    }
    Err(InpaintError::DidNotConverge {
        iters: max_iter,
        residual: rr.sqrt() / bnorm,
    })
}

/// Solves the biharmonic system and returns every pixel in double precision,
/// before clamping and rounding to the frame type.
pub fn biharmonic_values(
    frame: &ScanFrame,
    mask: &MaskImage,
    params: &BiharmonicParams,
) -> Result<Vec<f64>, InpaintError> {
    if !(params.tol > 0.0) || params.max_iter == Some(0) {
        return Err(InpaintError::InvalidParameter("tol must be > 0 and max_iter >= 1".into()));
    }
    let mut values = frame.to_f64();
    if !check_inputs(frame, mask)? {
        return Ok(values);
    }
    let (unknowns, sys) = assemble(frame, mask);
    let solution = if unknowns.len() < params.direct_below {
        solve_direct(&sys)?
    } else {
        let ring = super::boundary_ring(frame, mask);
        let start = ring.iter().map(|&v| v as f64).sum::<f64>() / ring.len().max(1) as f64;
        let max_iter = params.max_iter.unwrap_or(10 * unknowns.len());
        solve_cg(&sys, vec![start; unknowns.len()], params.tol, max_iter)?
    };
    for (&i, v) in unknowns.iter().zip(solution) {
        values[i] = v;
    }
    Ok(values)
}

pub fn inpaint_biharmonic(
    frame: &ScanFrame,
    mask: &MaskImage,
    params: &BiharmonicParams,
) -> Result<ScanFrame, InpaintError> {
    let values = biharmonic_values(frame, mask, params)?;
    compose(frame, mask, &values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::Channel;

    fn ramp(n: u32) -> ScanFrame {
        let px = (0..n * n).map(|i| ((i % n) + 2 * (i / n)) as f32 / (3 * n) as f32).collect();
        ScanFrame::new(n, n, Channel::Height, 1.0, 1.0, px).unwrap()
    }

    #[test]
    fn ramp_is_reproduced() {
        let f = ramp(64);
        let m = MaskImage::from_fn(64, 64, |x, y| (24..40).contains(&x) && (24..40).contains(&y));
        let out = inpaint_biharmonic(&f, &m, &BiharmonicParams::default()).unwrap();
        let err = out.pixels().iter().zip(f.pixels()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn cg_agrees_with_direct() {
        let f = crate::sim::synthetic_surface(40, 40, crate::sim::SurfaceKind::Grains, 2).unwrap();
        let m = MaskImage::from_fn(40, 40, |x, y| (10..30).contains(&x) && (12..20).contains(&y));
        let direct = inpaint_biharmonic(&f, &m, &BiharmonicParams::default()).unwrap();
        let cg = inpaint_biharmonic(
            &f,
            &m,
            &BiharmonicParams {
                direct_below: 0,
                tol: 1e-12,
                ..Default::default()
            },
        )
        .unwrap();
        for (a, b) in direct.pixels().iter().zip(cg.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn cg_budget_exhaustion_reported() {
        let f = crate::sim::synthetic_surface(40, 40, crate::sim::SurfaceKind::Grains, 2).unwrap();
        let m = MaskImage::from_fn(40, 40, |x, y| (5..35).contains(&x) && (5..35).contains(&y));
        let p = BiharmonicParams {
            direct_below: 0,
            max_iter: Some(2),
            ..Default::default()
        };
        assert!(matches!(inpaint_biharmonic(&f, &m, &p), Err(InpaintError::DidNotConverge { .. })));
    }

    #[test]
    fn border_masks_are_solvable() {
        let f = ramp(16);
        let m = MaskImage::from_fn(16, 16, |x, y| x < 3 || y == 15);
        let out = inpaint_biharmonic(&f, &m, &BiharmonicParams::default()).unwrap();
        let err = out.pixels().iter().zip(f.pixels()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err < 1e-6, "{err}");
    }
}
