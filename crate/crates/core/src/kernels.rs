//! Dense linear-algebra kernels behind the differentiable ops.
//!
//! Every kernel accumulates each output element over the reduction index in
//! increasing order, starting from the value already in the output buffer.
//! Vectorization only ever runs across independent output elements, so the
//! results are bit-identical regardless of SIMD width.

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    gemm_core(m, k, n, |i, kk| a[i * k + kk], b, c);
}

/// `c[m×n] += aᵀ · b` where `a` is stored `k×m`.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    gemm_core(m, k, n, |i, kk| a[kk * m + i], b, c);
}

/// `c[m×n] += a · bᵀ` where `b` is stored `n×k`.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let bt = transpose(n, k, b);
    gemm_nn(m, k, n, a, &bt, c);
}

/// Row-major transpose of an `rows×cols` matrix.
pub(crate) fn transpose(rows: usize, cols: usize, src: &[f64]) -> alloc::vec::Vec<f64> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = alloc::vec![0.0; rows * cols];
    for r in 0..rows {
        for (c, &v) in src[r * cols..(r + 1) * cols].iter().enumerate() {
            out[c * rows + r] = v;
        }
    }
    out
}

#[inline(always)]
fn gemm_core(m: usize, k: usize, n: usize, a: impl Fn(usize, usize) -> f64, b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let full = m - m % 4;
    for i in (0..full).step_by(4) {
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        let (c1, c2, c3) = (&mut c1[..n], &mut c2[..n], &mut c3[..n]);
        let mut kk = 0;
        // Four reduction steps per sweep over four output rows; each
        // expression keeps left-to-right association, i.e. the same order as
        // one step at a time.
        while kk + 4 <= k {
            let b0 = &b[kk * n..][..n];
            let b1 = &b[(kk + 1) * n..][..n];
            let b2 = &b[(kk + 2) * n..][..n];
            let b3 = &b[(kk + 3) * n..][..n];
            let r0 = [a(i, kk), a(i, kk + 1), a(i, kk + 2), a(i, kk + 3)];
            let r1 = [a(i + 1, kk), a(i + 1, kk + 1), a(i + 1, kk + 2), a(i + 1, kk + 3)];
            let r2 = [a(i + 2, kk), a(i + 2, kk + 1), a(i + 2, kk + 2), a(i + 2, kk + 3)];
            let r3 = [a(i + 3, kk), a(i + 3, kk + 1), a(i + 3, kk + 2), a(i + 3, kk + 3)];
            for j in 0..n {
                let (x0, x1, x2, x3) = (b0[j], b1[j], b2[j], b3[j]);
                c0[j] = c0[j] + r0[0] * x0 + r0[1] * x1 + r0[2] * x2 + r0[3] * x3;
                c1[j] = c1[j] + r1[0] * x0 + r1[1] * x1 + r1[2] * x2 + r1[3] * x3;
                c2[j] = c2[j] + r2[0] * x0 + r2[1] * x1 + r2[2] * x2 + r2[3] * x3;
                c3[j] = c3[j] + r3[0] * x0 + r3[1] * x1 + r3[2] * x2 + r3[3] * x3;
            }
            kk += 4;
        }
        while kk < k {
            let bk = &b[kk * n..][..n];
            let r = [a(i, kk), a(i + 1, kk), a(i + 2, kk), a(i + 3, kk)];
            for j in 0..n {
                let x = bk[j];
                c0[j] += r[0] * x;
                c1[j] += r[1] * x;
                c2[j] += r[2] * x;
                c3[j] += r[3] * x;
            }
            kk += 1;
        }
    }
    for i in full..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let mut kk = 0;
        while kk + 4 <= k {
            let (a0, a1, a2, a3) = (a(i, kk), a(i, kk + 1), a(i, kk + 2), a(i, kk + 3));
            let b0 = &b[kk * n..(kk + 1) * n];
            let b1 = &b[(kk + 1) * n..(kk + 2) * n];
            let b2 = &b[(kk + 2) * n..(kk + 3) * n];
            let b3 = &b[(kk + 3) * n..(kk + 4) * n];
            for ((((cv, &x0), &x1), &x2), &x3) in crow.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3) {
                *cv = *cv + a0 * x0 + a1 * x1 + a2 * x2 + a3 * x3;
            }
            kk += 4;
        }
        while kk < k {
            let a0 = a(i, kk);
            for (cv, &x0) in crow.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *cv += a0 * x0;
            }
            kk += 1;
        }
    }
}

/// Geometry of one 2-D convolution over a single `C×H×W` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.ksize * self.ksize
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Unfolds one image into a `(C·k·k) × (out_h·out_w)` patch matrix.
pub(crate) fn im2col(g: &ConvGeom, image: &[f64], cols: &mut [f64]) {
    let ncol = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.ksize {
            for kj in 0..g.ksize {
                let r = (c * g.ksize + ki) * g.ksize + kj;
                let row = &mut cols[r * ncol..(r + 1) * ncol];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &image[(c * g.height + iy as usize) * g.width..][..g.width];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.width as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the image.
pub(crate) fn col2im_add(g: &ConvGeom, cols: &[f64], image: &mut [f64]) {
    let ncol = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.ksize {
            for kj in 0..g.ksize {
                let r = (c * g.ksize + ki) * g.ksize + kj;
                let row = &cols[r * ncol..(r + 1) * ncol];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut image[(c * g.height + iy as usize) * g.width..][..g.width];
                    for (ox, &v) in row[oy * g.out_w..(oy + 1) * g.out_w].iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}
