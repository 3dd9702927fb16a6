//! Fast-marching inpainting: unknown pixels are visited in order of their
//! distance to the known region and replaced by a weighted average of the
//! already-known pixels around them.

use super::{check_inputs, compose, InpaintError};
use crate::frame::{MaskImage, ScanFrame};
use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Debug, Clone, PartialEq)]
pub struct TeleaParams {
    pub radius: u32,
}

impl Default for TeleaParams {
    fn default() -> Self {
        Self { radius: 5 }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum State {
    Known,
    Band,
    Inside,
}

struct Entry {
    t: f64,
    index: usize,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on t, ties broken by index
        other.t.total_cmp(&self.t).then_with(|| other.index.cmp(&self.index))
    }
}

/// First-order upwind solution of `|∇T| = 1` from two orthogonal neighbours.
fn solve_pair(t1: f64, t2: f64) -> f64 {
    match (t1.is_finite(), t2.is_finite()) {
        (false, false) => f64::INFINITY,
        (true, false) => t1 + 1.0,
        (false, true) => t2 + 1.0,
        (true, true) => {
            let d = 2.0 - (t1 - t2) * (t1 - t2);
            if d > 0.0 {
                let s = (t1 + t2 + d.sqrt()) / 2.0;
                if s >= t1.max(t2) {
                    return s;
                }
            }
            t1.min(t2) + 1.0
        }
    }
}

struct March {
    w: i64,
    h: i64,
    t: Vec<f64>,
    state: Vec<State>,
    heap: BinaryHeap<Entry>,
}

impl March {
    fn new(mask: &MaskImage) -> Self {
        let (w, h) = (mask.width() as i64, mask.height() as i64);
        let n = mask.bits().len();
        let mut m = March {
            w,
            h,
            t: vec![f64::INFINITY; n],
            state: vec![State::Inside; n],
            heap: BinaryHeap::new(),
        };
        for i in 0..n {
            if !mask.bits()[i] {
                m.t[i] = 0.0;
                m.state[i] = State::Known;
            }
        }
        // the initial front: unknown pixels touching the known region
        for i in 0..n {
            if m.state[i] == State::Inside && m.neighbours4(i).any(|j| m.state[j] == State::Known) {
                m.t[i] = m.eikonal(i);
                m.state[i] = State::Band;
                m.heap.push(Entry { t: m.t[i], index: i });
            }
        }
        m
    }

    fn neighbours4(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let (x, y) = (i as i64 % self.w, i as i64 / self.w);
        [(1, 0), (-1, 0), (0, 1), (0, -1)].into_iter().filter_map(move |(dx, dy)| {
            let (nx, ny) = (x + dx, y + dy);
            (nx >= 0 && ny >= 0 && nx < self.w && ny < self.h).then_some((ny * self.w + nx) as usize)
        })
    }

    fn frozen_t(&self, x: i64, y: i64) -> f64 {
        if x < 0 || y < 0 || x >= self.w || y >= self.h {
            return f64::INFINITY;
        }
        let j = (y * self.w + x) as usize;
        if self.state[j] == State::Known {
            self.t[j]
        } else {
            f64::INFINITY
        }
    }

    fn eikonal(&self, i: usize) -> f64 {
        let (x, y) = (i as i64 % self.w, i as i64 / self.w);
        let tx = self.frozen_t(x - 1, y).min(self.frozen_t(x + 1, y));
        let ty = self.frozen_t(x, y - 1).min(self.frozen_t(x, y + 1));
        solve_pair(tx, ty)
    }

    /// Pops the next pixel to freeze, skipping stale heap entries.
    fn pop(&mut self) -> Option<usize> {
        while let Some(Entry { t, index }) = self.heap.pop() {
            if self.state[index] == State::Band && t == self.t[index] {
                self.state[index] = State::Known;
                return Some(index);
            }
        }
        None
    }

    fn relax_around(&mut self, i: usize) {
        let nbrs: Vec<usize> = self.neighbours4(i).collect();
        for j in nbrs {
            if self.state[j] == State::Known {
                continue;
            }
            let t = self.eikonal(j);
            if t < self.t[j] {
                self.t[j] = t;
                self.state[j] = State::Band;
                self.heap.push(Entry { t, index: j });
            }
        }
    }
}

/// Fast-marching arrival times (0 on known pixels) and the order in which
/// masked pixels are frozen.
pub fn fmm_distances(mask: &MaskImage) -> (Vec<f64>, Vec<usize>) {
    let mut m = March::new(mask);
    let mut order = Vec::new();
    while let Some(i) = m.pop() {
        order.push(i);
        m.relax_around(i);
    }
    (m.t, order)
}

fn fill_value(m: &March, values: &[f64], i: usize, radius: i64) -> Option<f64> {
    let (x, y) = (i as i64 % m.w, i as i64 / m.w);
    let ti = m.t[i];
    let t_at = |x: i64, y: i64| {
        let j = (y.clamp(0, m.h - 1) * m.w + x.clamp(0, m.w - 1)) as usize;
        if m.state[j] == State::Known {
            Some(m.t[j])
        } else {
            None
        }
    };
    // normal to the level set from frozen neighbours
    let gx = match (t_at(x + 1, y), t_at(x - 1, y)) {
        (Some(a), Some(b)) => 0.5 * (a - b),
        (Some(a), None) => a - ti,
        (None, Some(b)) => ti - b,
        (None, None) => 0.0,
    };
    let gy = match (t_at(x, y + 1), t_at(x, y - 1)) {
        (Some(a), Some(b)) => 0.5 * (a - b),
        (Some(a), None) => a - ti,
        (None, Some(b)) => ti - b,
        (None, None) => 0.0,
    };
    let gn = (gx * gx + gy * gy).sqrt();
    let (mut num, mut den) = (0.0, 0.0);
    for ny in (y - radius).max(0)..=(y + radius).min(m.h - 1) {
        for nx in (x - radius).max(0)..=(x + radius).min(m.w - 1) {
            let j = (ny * m.w + nx) as usize;
            if j == i || m.state[j] != State::Known {
                continue;
            }
            let (rx, ry) = ((x - nx) as f64, (y - ny) as f64);
            let r2 = rx * rx + ry * ry;
            let r = r2.sqrt();
            let dir = if gn > 0.0 {
                ((rx * gx + ry * gy) / (r * gn)).abs().max(1e-6)
            } else {
                1.0
            };
            let dst = 1.0 / r2;
            let lev = 1.0 / (1.0 + (m.t[j] - ti).abs());
            let wgt = dir * dst * lev;
            num += wgt * values[j];
            den += wgt;
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Inpaints and also returns the fill order with each pixel's arrival time.
pub fn inpaint_telea_traced(
    frame: &ScanFrame,
    mask: &MaskImage,
    params: &TeleaParams,
) -> Result<(ScanFrame, Vec<(usize, f64)>), InpaintError> {
    if params.radius == 0 {
        return Err(InpaintError::InvalidParameter("radius must be >= 1".into()));
    }
    if !check_inputs(frame, mask)? {
        return Ok((frame.clone(), Vec::new()));
    }
    let mut values = frame.to_f64();
    let mut m = March::new(mask);
    let mut trace = Vec::with_capacity(mask.count());
    while let Some(i) = m.pop() {
        // the pixel itself is already marked known; exclude it explicitly
        if let Some(v) = fill_value(&m, &values, i, params.radius as i64) {
            values[i] = v;
        }
        trace.push((i, m.t[i]));
        m.relax_around(i);
    }
    Ok((compose(frame, mask, &values)?, trace))
}

pub fn inpaint_telea(frame: &ScanFrame, mask: &MaskImage, params: &TeleaParams) -> Result<ScanFrame, InpaintError> {
    inpaint_telea_traced(frame, mask, params).map(|(f, _)| f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::Channel;

    #[test]
    fn single_pixel_hole() {
        let f = ScanFrame::from_fn(9, 9, Channel::Height, |x, y| if x.abs_diff(4) <= 1 && y.abs_diff(4) <= 1 { 0.7 } else { (x * 9 + y) as f32 / 100.0 }).unwrap();
        let mut m = MaskImage::empty(9, 9);
        m.set(4, 4, true);
        let out = inpaint_telea(&f, &m, &TeleaParams { radius: 1 }).unwrap();
        assert_eq!(out.get(4, 4), 0.7);
    }

    #[test]
    fn order_is_monotone() {
        let m = MaskImage::from_fn(20, 20, |x, y| (x as i32 - 10).pow(2) + (y as i32 - 9).pow(2) < 40);
        let f = crate::sim::synthetic_surface(20, 20, crate::sim::SurfaceKind::Grains, 0).unwrap();
        let (_, trace) = inpaint_telea_traced(&f, &m, &TeleaParams::default()).unwrap();
        assert_eq!(trace.len(), m.count());
        assert!(trace.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn eikonal_pair() {
        assert_eq!(solve_pair(0.0, f64::INFINITY), 1.0);
        assert!((solve_pair(0.0, 0.0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(solve_pair(0.0, 5.0), 1.0);
    }
}
