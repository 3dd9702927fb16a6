//! Dense kernels shared by the tape ops.

/// `c = beta * c + op(a) * op(b)` with `op(a)` of shape `m x k` and `op(b)`
/// of shape `k x n`, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides above address them in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * (self.k / 2) - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * (self.k / 2) - self.k) / self.stride + 1
    }

    pub fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Input offset of `(out, kernel)` position along one axis, if in range.
    fn src(&self, o: usize, kk: usize, len: usize) -> Option<usize> {
        let i = (o * self.stride + kk) as isize - (self.k / 2) as isize;
        (i >= 0 && (i as usize) < len).then_some(i as usize)
    }

    /// Range of output columns whose input column `ox*stride + kx - k/2` is
    /// inside `[0, w)`, and the input column of the first one.
    fn valid_cols(&self, kx: usize, wo: usize) -> (usize, usize, usize) {
        let p = self.k / 2;
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(self.stride) };
        let hi = if self.w + p <= kx { 0 } else { ((self.w - 1 + p - kx) / self.stride + 1).min(wo) };
        let hi = hi.max(lo);
        (lo, hi, (lo * self.stride + kx).saturating_sub(p))
    }
}

/// Unfolds one image `[c, h, w]` into `[c*k*k, ho*wo]` with zero padding.
pub(crate) fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let d = &mut dst[oy * wo..(oy + 1) * wo];
                    let Some(iy) = g.src(oy, ky, g.h) else {
                        d.fill(0.0);
                        continue;
                    };
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let (lo, hi, ix0) = g.valid_cols(kx, wo);
                    d[..lo].fill(0.0);
                    d[hi..].fill(0.0);
                    if g.stride == 1 {
                        d[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for (j, v) in d[lo..hi].iter_mut().enumerate() {
                            *v = src[ix0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `[c, h, w]`.
pub(crate) fn col2im(g: &ConvGeom, col: &[f64], x: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    let dst = &mut x[(ci * g.h + iy) * g.w..(ci * g.h + iy + 1) * g.w];
                    let (lo, hi, ix0) = g.valid_cols(kx, wo);
                    let row = &src[oy * wo + lo..oy * wo + hi];
                    for (j, v) in row.iter().enumerate() {
                        dst[ix0 + j * g.stride] += v;
                    }
                }
            }
        }
    }
}
