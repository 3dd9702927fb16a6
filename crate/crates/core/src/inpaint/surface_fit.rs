//! Local polynomial surface fitting: each connected hole is replaced by a
//! least-squares bivariate polynomial fitted to the known pixels around it.

use super::{check_inputs, compose, InpaintError};
use crate::frame::{MaskImage, ScanFrame};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceFitParams {
    /// Total polynomial degree.
    pub degree: u32,
    /// Width of the support annulus around each hole.
    pub ring: u32,
}

impl Default for SurfaceFitParams {
    fn default() -> Self {
        Self { degree: 2, ring: 6 }
    }
}

/// Exponents `(i, j)` of the monomials `x^i y^j` with `i + j <= degree`.
pub fn monomials(degree: u32) -> Vec<(u32, u32)> {
    (0..=degree).flat_map(|d| (0..=d).map(move |j| (d - j, j))).collect()
}

fn design_row(x: f64, y: f64, terms: &[(u32, u32)]) -> impl Iterator<Item = f64> + '_ {
    terms.iter().map(move |&(i, j)| x.powi(i as i32) * y.powi(j as i32))
}

/// Least-squares coefficients (in [`monomials`] order) of a polynomial fit
/// to `(x, y, value)` samples. Coordinates should already be well scaled.
pub fn fit_polynomial(points: &[(f64, f64, f64)], degree: u32) -> Result<Vec<f64>, InpaintError> {
    let terms = monomials(degree);
    if points.len() < terms.len() {
        return Err(InpaintError::InsufficientSupport {
            have: points.len(),
            need: terms.len(),
        });
    }
    let a = DMatrix::from_row_iterator(
        points.len(),
        terms.len(),
        points.iter().flat_map(|&(x, y, _)| design_row(x, y, &terms)),
    );
    let b = DVector::from_iterator(points.len(), points.iter().map(|p| p.2));
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin / smax < 1e-10 {
        return Err(InpaintError::RankDeficient);
    }
    let coef = svd.solve(&b, 0.0).map_err(|_| InpaintError::RankDeficient)?;
    Ok(coef.as_slice().to_vec())
}

pub fn inpaint_surface_fit(
    frame: &ScanFrame,
    mask: &MaskImage,
    params: &SurfaceFitParams,
) -> Result<ScanFrame, InpaintError> {
    if params.ring == 0 {
        return Err(InpaintError::InvalidParameter("ring must be >= 1".into()));
    }
    if !check_inputs(frame, mask)? {
        return Ok(frame.clone());
    }
    let w = frame.width() as usize;
    let (fw, fh) = frame.dims();
    let terms = monomials(params.degree);
    let mut values = frame.to_f64();
    for comp in mask.components8() {
        let mut comp_mask = MaskImage::empty(fw, fh);
        for &i in &comp {
            comp_mask.set((i % w) as u32, (i / w) as u32, true);
        }
        let annulus = comp_mask.dilate(params.ring).difference(mask)?;
        let support: Vec<usize> = (0..annulus.bits().len()).filter(|&i| annulus.bits()[i]).collect();
        let need = 3 * terms.len();
        if support.len() < need {
            return Err(InpaintError::InsufficientSupport {
                have: support.len(),
                need,
            });
        }
        let (x0, y0, x1, y1) = annulus.union(&comp_mask)?.bounding_box().expect("nonempty");
        let (cx, cy) = ((x0 + x1) as f64 / 2.0, (y0 + y1) as f64 / 2.0);
        let sx = ((x1 - x0) as f64 / 2.0).max(1.0);
        let sy = ((y1 - y0) as f64 / 2.0).max(1.0);
        let scaled = |i: usize| (((i % w) as f64 - cx) / sx, ((i / w) as f64 - cy) / sy);
        let points: Vec<(f64, f64, f64)> = support
            .iter()
            .map(|&i| {
                let (x, y) = scaled(i);
                (x, y, values[i])
            })
            .collect();
        let coef = fit_polynomial(&points, params.degree)?;
        for &i in &comp {
            let (x, y) = scaled(i);
            values[i] = design_row(x, y, &terms).zip(&coef).map(|(a, c)| a * c).sum();
        }
    }
    compose(frame, mask, &values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::Channel;

    #[test]
    fn monomial_count() {
        assert_eq!(monomials(0), [(0, 0)]);
        assert_eq!(monomials(1).len(), 3);
        assert_eq!(monomials(2).len(), 6);
        assert_eq!(monomials(3).len(), 10);
    }

    #[test]
    fn dyadic_ramp_and_bowl_exact() {
        let ramp = ScanFrame::from_fn(32, 32, Channel::Height, |x, y| (x + 2 * y) as f32 / 128.0).unwrap();
        let m = MaskImage::from_fn(32, 32, |x, y| (12..20).contains(&x) && (10..17).contains(&y));
        let out = inpaint_surface_fit(&ramp, &m, &SurfaceFitParams { degree: 1, ring: 4 }).unwrap();
        assert_eq!(out, ramp);

        let bowl = ScanFrame::from_fn(32, 32, Channel::Height, |x, y| {
            ((x as f32 - 16.0).powi(2) + (y as f32 - 15.0).powi(2)) / 1024.0 + 0.125
        })
        .unwrap();
        let out = inpaint_surface_fit(&bowl, &m, &SurfaceFitParams::default()).unwrap();
        assert_eq!(out, bowl);
    }

    #[test]
    fn insufficient_support() {
        let f = ScanFrame::constant(6, 6, Channel::Height, 0.5).unwrap();
        let m = MaskImage::from_fn(6, 6, |x, _| x < 5);
        assert!(matches!(
            inpaint_surface_fit(&f, &m, &SurfaceFitParams { degree: 2, ring: 1 }),
            Err(InpaintError::InsufficientSupport { .. })
        ));
    }

    #[test]
    fn collinear_support_is_rank_deficient() {
        let pts: Vec<_> = (0..20).map(|i| (i as f64 / 10.0 - 1.0, 0.3, 0.5)).collect();
        assert_eq!(fit_polynomial(&pts, 1), Err(InpaintError::RankDeficient));
    }
}
