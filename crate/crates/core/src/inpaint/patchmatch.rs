//! Exemplar inpainting driven by a randomized nearest-neighbour field.
//!
//! The hole is filled from the outside in: each pass matches the patches
//! centred on the current front against fully-known source patches and
//! copies the matched centres. Refinement passes then re-match every hole
//! pixel with complete patches and vote from the overlapping matches.

use super::{check_inputs, compose, InpaintError};
use crate::frame::{MaskImage, ScanFrame};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct PatchMatchParams {
    /// Odd patch side length.
    pub patch: u32,
    pub nnf_iters: usize,
    /// Random candidates drawn at each radius of the search.
    pub search_samples: usize,
    pub fill_passes: usize,
    pub seed: u64,
}

impl Default for PatchMatchParams {
    fn default() -> Self {
        Self {
            patch: 7,
            nnf_iters: 5,
            search_samples: 8,
            fill_passes: 4,
            seed: 0,
        }
    }
}

/// Borrowed single-channel row-major image.
#[derive(Clone, Copy)]
pub struct GrayImage<'a> {
    pub width: usize,
    pub height: usize,
    pub data: &'a [f64],
}

/// Nearest-neighbour field: for each target patch centre, the matched source
/// centre and the patch distance.
#[derive(Debug, Clone, PartialEq)]
pub struct Nnf {
    pub targets: Vec<(usize, usize)>,
    pub matches: Vec<(usize, usize)>,
    pub distances: Vec<f64>,
}

impl Nnf {
    pub fn mean_distance(&self) -> f64 {
        self.distances.iter().sum::<f64>() / self.distances.len().max(1) as f64
    }
}

/// Sum of squared differences between the patch at `t` in `a` and at `s` in
/// `b`. Target pixels that are out of frame or not `known` are skipped; the
/// source patch must lie inside `b`.
pub fn patch_distance(
    a: GrayImage,
    known: Option<&[bool]>,
    t: (usize, usize),
    b: GrayImage,
    s: (usize, usize),
    half: usize,
    cutoff: f64,
) -> f64 {
    let h = half as i64;
    let mut d = 0.0;
    for dy in -h..=h {
        let ty = t.1 as i64 + dy;
        if ty < 0 || ty >= a.height as i64 {
            continue;
        }
        let sy = (s.1 as i64 + dy) as usize;
        for dx in -h..=h {
            let tx = t.0 as i64 + dx;
            if tx < 0 || tx >= a.width as i64 {
                continue;
            }
            let ti = ty as usize * a.width + tx as usize;
            if known.is_some_and(|k| !k[ti]) {
                continue;
            }
            let sx = (s.0 as i64 + dx) as usize;
            let diff = a.data[ti] - b.data[sy * b.width + sx];
            d += diff * diff;
        }
        if d > cutoff {
            return d;
        }
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NnfParams {
    pub patch: u32,
    pub iters: usize,
    pub search_samples: usize,
}

/// Randomized NNF search (random init, alternating-direction propagation,
/// exponentially shrinking random search) from target centres in `a` to the
/// allowed source centres of `b`.
pub fn patchmatch_nnf(
    a: GrayImage,
    known: Option<&[bool]>,
    targets: &[(usize, usize)],
    b: GrayImage,
    source_ok: &[bool],
    params: &NnfParams,
    rng: &mut impl Rng,
) -> Nnf {
    let half = params.patch as usize / 2;
    let sources: Vec<(usize, usize)> = (0..b.width * b.height)
        .filter(|&i| source_ok[i])
        .map(|i| (i % b.width, i / b.width))
        .collect();
    assert!(!sources.is_empty(), "no source patches");
    let mut slot = vec![usize::MAX; a.width * a.height];
    for (k, &(x, y)) in targets.iter().enumerate() {
        slot[y * a.width + x] = k;
    }
    let mut matches: Vec<(usize, usize)> = targets.iter().map(|_| sources[rng.random_range(0..sources.len())]).collect();
    let mut distances: Vec<f64> = targets
        .iter()
        .zip(&matches)
        .map(|(&t, &s)| patch_distance(a, known, t, b, s, half, f64::INFINITY))
        .collect();
    let valid = |x: i64, y: i64| {
        x >= 0 && y >= 0 && (x as usize) < b.width && (y as usize) < b.height && source_ok[y as usize * b.width + x as usize]
    };
    let max_radius = b.width.max(b.height) as f64;
    for it in 0..params.iters {
        let forward = it % 2 == 0;
        let step: i64 = if forward { -1 } else { 1 };
        let order: Box<dyn Iterator<Item = usize>> = if forward {
            Box::new(0..targets.len())
        } else {
            Box::new((0..targets.len()).rev())
        };
        for k in order {
            let t = targets[k];
            let mut best = matches[k];
            let mut best_d = distances[k];
            // propagation, causal neighbours first
            for (dx, dy) in [(step, 0), (0, step), (-step, 0), (0, -step)] {
                let (nx, ny) = (t.0 as i64 + dx, t.1 as i64 + dy);
                if nx < 0 || ny < 0 || nx as usize >= a.width || ny as usize >= a.height {
                    continue;
                }
                let nk = slot[ny as usize * a.width + nx as usize];
                if nk == usize::MAX {
                    continue;
                }
                let (sx, sy) = (matches[nk].0 as i64 - dx, matches[nk].1 as i64 - dy);
                if valid(sx, sy) && (sx as usize, sy as usize) != best {
                    let cand = (sx as usize, sy as usize);
                    let d = patch_distance(a, known, t, b, cand, half, best_d);
                    if d < best_d {
                        best = cand;
                        best_d = d;
                    }
                }
            }
            // random search around the current best
            let mut radius = max_radius;
            while radius >= 1.0 {
                let r = radius as i64;
                for _ in 0..params.search_samples {
                    let sx = best.0 as i64 + rng.random_range(-r..=r);
                    let sy = best.1 as i64 + rng.random_range(-r..=r);
                    if valid(sx, sy) {
                        let cand = (sx as usize, sy as usize);
                        let d = patch_distance(a, known, t, b, cand, half, best_d);
                        if d < best_d {
                            best = cand;
                            best_d = d;
                        }
                    }
                }
                radius *= 0.5;
            }
            matches[k] = best;
            distances[k] = best_d;
        }
    }
    Nnf {
        targets: targets.to_vec(),
        matches,
        distances,
    }
}

/// Votes every pixel of `targets` from the matched source patches of the
/// targets around it, weighting by match quality.
fn vote(
    values: &[f64],
    w: usize,
    h: usize,
    nnf: &Nnf,
    pixels: &[(usize, usize)],
    half: usize,
    fallback: &[f64],
) -> Vec<f64> {
    let mut slot = vec![usize::MAX; w * h];
    for (k, &(x, y)) in nnf.targets.iter().enumerate() {
        slot[y * w + x] = k;
    }
    let hi = half as i64;
    pixels
        .iter()
        .enumerate()
        .map(|(p, &(x, y))| {
            let (mut num, mut den) = (0.0, 0.0);
            for dy in -hi..=hi {
                for dx in -hi..=hi {
                    let (qx, qy) = (x as i64 + dx, y as i64 + dy);
                    if qx < 0 || qy < 0 || qx as usize >= w || qy as usize >= h {
                        continue;
                    }
                    let k = slot[qy as usize * w + qx as usize];
                    if k == usize::MAX {
                        continue;
                    }
                    let (sx, sy) = nnf.matches[k];
                    let src = ((sy as i64 - dy) as usize) * w + (sx as i64 - dx) as usize;
                    let wgt = 1.0 / (1.0 + nnf.distances[k]);
                    num += wgt * values[src];
                    den += wgt;
                }
            }
            if den > 0.0 {
                num / den
            } else {
                fallback[p]
            }
        })
        .collect()
}

pub fn inpaint_patchmatch(
    frame: &ScanFrame,
    mask: &MaskImage,
    params: &PatchMatchParams,
) -> Result<ScanFrame, InpaintError> {
    if params.patch % 2 == 0 || params.nnf_iters == 0 || params.fill_passes == 0 || params.search_samples == 0 {
        return Err(InpaintError::InvalidParameter("patch must be odd; iteration counts >= 1".into()));
    }
    if !check_inputs(frame, mask)? {
        return Ok(frame.clone());
    }
    let (w, h) = (frame.width() as usize, frame.height() as usize);
    let half = params.patch as usize / 2;
    let bits = mask.bits();
    // a source centre is usable when its whole patch is inside and unmasked
    let near_mask = mask.dilate(half as u32);
    let source_ok: Vec<bool> = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            x >= half && y >= half && x + half < w && y + half < h && !near_mask.bits()[i]
        })
        .collect();
    if !source_ok.iter().any(|&s| s) {
        return Err(InpaintError::NoValidSourcePatch { patch: params.patch });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let nnf_params = NnfParams {
        patch: params.patch,
        iters: params.nnf_iters,
        search_samples: params.search_samples,
    };
    let mut values = frame.to_f64();
    let mut known: Vec<bool> = bits.iter().map(|&b| !b).collect();

    // onion peel
    loop {
        let front: Vec<(usize, usize)> = (0..w * h)
            .filter(|&i| !known[i])
            .filter(|&i| {
                let (x, y) = ((i % w) as i64, (i / w) as i64);
                (-1..=1).any(|dy: i64| {
                    (-1..=1).any(|dx: i64| {
                        let (nx, ny) = (x + dx, y + dy);
                        nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h && known[ny as usize * w + nx as usize]
                    })
                })
            })
            .map(|i| (i % w, i / w))
            .collect();
        if front.is_empty() {
            break;
        }
        let img = GrayImage {
            width: w,
            height: h,
            data: &values,
        };
        let nnf = patchmatch_nnf(img, Some(&known), &front, img, &source_ok, &nnf_params, &mut rng);
        // each front pixel copies the centre of its own match
        let centre: Vec<f64> = nnf.matches.iter().map(|&(sx, sy)| values[sy * w + sx]).collect();
        for (&(x, y), v) in front.iter().zip(centre) {
            values[y * w + x] = v;
            known[y * w + x] = true;
        }
    }

    let hole: Vec<(usize, usize)> = (0..w * h).filter(|&i| bits[i]).map(|i| (i % w, i / w)).collect();
    for _ in 0..params.fill_passes {
        let img = GrayImage {
            width: w,
            height: h,
            data: &values,
        };
        let nnf = patchmatch_nnf(img, None, &hole, img, &source_ok, &nnf_params, &mut rng);
        let current: Vec<f64> = hole.iter().map(|&(x, y)| values[y * w + x]).collect();
        let voted = vote(&values, w, h, &nnf, &hole, half, &current);
        for (&(x, y), v) in hole.iter().zip(voted) {
            values[y * w + x] = v;
        }
    }
    compose(frame, mask, &values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::Channel;

    #[test]
    fn periodic_stripes_recovered() {
        let period = 8;
        let profile = |y: u32| 0.5 + 0.3 * (2.0 * std::f32::consts::PI * (y % period) as f32 / period as f32).sin();
        let f = ScanFrame::from_fn(40, 40, Channel::Height, |_, y| profile(y)).unwrap();
        let m = MaskImage::from_fn(40, 40, |_, y| (16..16 + period).contains(&y));
        let out = inpaint_patchmatch(&f, &m, &PatchMatchParams::default()).unwrap();
        let got: Vec<f64> = (16..24).map(|y| out.get(20, y) as f64).collect();
        let want: Vec<f64> = (16..24).map(|y| f.get(20, y) as f64).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (mg, mw) = (mean(&got), mean(&want));
        let cov: f64 = got.iter().zip(&want).map(|(a, b)| (a - mg) * (b - mw)).sum();
        let vg: f64 = got.iter().map(|a| (a - mg).powi(2)).sum();
        let vw: f64 = want.iter().map(|b| (b - mw).powi(2)).sum();
        let corr = cov / (vg * vw).sqrt();
        assert!(corr > 0.99, "{corr}");
    }

    #[test]
    fn no_source_patch() {
        let f = ScanFrame::constant(8, 8, Channel::Height, 0.5).unwrap();
        let m = MaskImage::from_fn(8, 8, |x, y| x == 4 && y == 4);
        assert_eq!(
            inpaint_patchmatch(&f, &m, &PatchMatchParams::default()),
            Err(InpaintError::NoValidSourcePatch { patch: 7 })
        );
    }

    #[test]
    fn deterministic_in_seed() {
        let f = crate::sim::synthetic_surface(32, 32, crate::sim::SurfaceKind::Domains, 9).unwrap();
        let m = MaskImage::from_fn(32, 32, |x, y| (12..20).contains(&x) && (12..18).contains(&y));
        let p = PatchMatchParams::default();
        assert_eq!(inpaint_patchmatch(&f, &m, &p).unwrap(), inpaint_patchmatch(&f, &m, &p).unwrap());
    }
}
