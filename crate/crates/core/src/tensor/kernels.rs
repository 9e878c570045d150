//! Raw numeric kernels on row-major slices.
//!
//! Every parallel kernel partitions over independent outputs and keeps the
//! per-output reduction order fixed, so results are bitwise identical with
//! and without the `parallel` feature.

use super::Scalar;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

const COL_BLOCK: usize = 256;
const ROW_CHUNK: usize = 8;
/// Below this many multiply-adds the parallel split is not worth it.
#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 1 << 16;

/// `out = a (m x k) * b (k x n)`, overwriting `out`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        return matmul_par(a, b, out, m, k, n);
    }
    matmul_seq(a, b, out, m, k, n)
}

pub fn matmul_seq<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (ci, chunk) in out.chunks_mut(ROW_CHUNK * n).enumerate() {
        matmul_rows(a, b, chunk, ci * ROW_CHUNK, k, n);
    }
}

#[cfg(feature = "parallel")]
pub fn matmul_par<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.par_chunks_mut(ROW_CHUNK * n)
        .enumerate()
        .for_each(|(ci, chunk)| matmul_rows(a, b, chunk, ci * ROW_CHUNK, k, n));
}

/// Fills a contiguous block of output rows starting at `row0`.
fn matmul_rows<T: Scalar>(a: &[T], b: &[T], out: &mut [T], row0: usize, k: usize, n: usize) {
    let rows = out.len() / n;
    out.fill(T::zero());
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + COL_BLOCK).min(n);
        for r in 0..rows {
            let arow = &a[(row0 + r) * k..(row0 + r + 1) * k];
            let orow = &mut out[r * n + j0..r * n + j1];
            for (kk, &av) in arow.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let brow = &b[kk * n + j0..kk * n + j1];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
        j0 = j1;
    }
}

/// Dot product with a fixed 8-lane accumulation pattern.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `out += a (m x k) * b^T` where `b` is `n x k`.
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let body = |(i, orow): (usize, &mut [T])| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            *o = *o + dot(arow, &b[j * k..(j + 1) * k]);
        }
    };
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(body);
        return;
    }
    out.chunks_mut(n).enumerate().for_each(body);
}

pub fn transpose<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Geometry of a square-kernel 2-D convolution on one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Output extents, or `None` when non-positive.
    pub fn out_hw(&self) -> Option<(usize, usize)> {
        let h = (self.h + 2 * self.pad).checked_sub(self.k)? / self.stride + 1;
        let w = (self.w + 2 * self.pad).checked_sub(self.k)? / self.stride + 1;
        (h > 0 && w > 0).then_some((h, w))
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }
}

/// Unfold one CHW image into a `(C*k*k) x (Ho*Wo)` column matrix.
pub fn im2col<T: Scalar>(x: &[T], g: ConvGeom, col: &mut [T]) {
    let (ho, wo) = g.out_hw().expect("validated geometry");
    let l = ho * wo;
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * l..(row + 1) * l];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            x[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into a CHW image.
pub fn col2im<T: Scalar>(col: &[T], g: ConvGeom, x: &mut [T]) {
    let (ho, wo) = g.out_hw().expect("validated geometry");
    let l = ho * wo;
    x.fill(T::zero());
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * l..(row + 1) * l];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        let dst = &mut x[(c * g.h + iy as usize) * g.w + ix as usize];
                        *dst = *dst + src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

/// Forward convolution over a batch; `x` is NCHW, `w` is OIHW, `out` is N x O x Ho x Wo.
pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], out: &mut [T], n: usize, o: usize, g: ConvGeom) {
    let (ho, wo) = g.out_hw().expect("validated geometry");
    let (in_sz, out_sz) = (g.c * g.h * g.w, o * ho * wo);
    let body = |(i, dst): (usize, &mut [T])| {
        let mut col = vec![T::zero(); g.col_rows() * ho * wo];
        im2col(&x[i * in_sz..(i + 1) * in_sz], g, &mut col);
        matmul_seq(w, &col, dst, o, g.col_rows(), ho * wo);
    };
    #[cfg(feature = "parallel")]
    if n > 1 {
        out.par_chunks_mut(out_sz).enumerate().for_each(body);
        return;
    }
    let _ = n;
    out.chunks_mut(out_sz).enumerate().for_each(body);
}

/// Gradient of a batch convolution with respect to its input.
pub fn conv2d_backward_input<T: Scalar>(dy: &[T], w: &[T], dx: &mut [T], o: usize, g: ConvGeom) {
    let (ho, wo) = g.out_hw().expect("validated geometry");
    let (in_sz, out_sz) = (g.c * g.h * g.w, o * ho * wo);
    let wt = transpose(w, o, g.col_rows());
    let body = |(i, dst): (usize, &mut [T])| {
        let mut dcol = vec![T::zero(); g.col_rows() * ho * wo];
        matmul_seq(&wt, &dy[i * out_sz..(i + 1) * out_sz], &mut dcol, g.col_rows(), o, ho * wo);
        col2im(&dcol, g, dst);
    };
    #[cfg(feature = "parallel")]
    {
        dx.par_chunks_mut(in_sz).enumerate().for_each(body);
    }
    #[cfg(not(feature = "parallel"))]
    dx.chunks_mut(in_sz).enumerate().for_each(body);
}

/// Gradient of a batch convolution with respect to its weight, accumulated
/// over images in index order.
pub fn conv2d_backward_weight<T: Scalar>(x: &[T], dy: &[T], dw: &mut [T], n: usize, o: usize, g: ConvGeom) {
    let (ho, wo) = g.out_hw().expect("validated geometry");
    let (in_sz, out_sz) = (g.c * g.h * g.w, o * ho * wo);
    let l = ho * wo;
    dw.fill(T::zero());
    let mut col = vec![T::zero(); g.col_rows() * l];
    for i in 0..n {
        im2col(&x[i * in_sz..(i + 1) * in_sz], g, &mut col);
        matmul_nt_acc(&dy[i * out_sz..(i + 1) * out_sz], &col, dw, o, l, g.col_rows());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    out[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let (m, k, n) = (13, 7, 300);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut out = vec![0.0; m * n];
        matmul_seq(&a, &b, &mut out, m, k, n);
        for (x, y) in out.iter().zip(naive(&a, &b, m, k, n)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matmul_is_bitwise_sequential() {
        let (m, k, n) = (67, 45, 129);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut s = vec![0.0; m * n];
        let mut p = vec![0.0; m * n];
        matmul_seq(&a, &b, &mut s, m, k, n);
        matmul_par(&a, &b, &mut p, m, k, n);
        assert_eq!(s, p);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = ConvGeom { c: 2, h: 5, w: 4, k: 3, stride: 2, pad: 1 };
        let (ho, wo) = g.out_hw().unwrap();
        let x: Vec<f64> = (0..g.c * g.h * g.w).map(|i| (i as f64).sin()).collect();
        let c: Vec<f64> = (0..g.col_rows() * ho * wo).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut col = vec![0.0; c.len()];
        im2col(&x, g, &mut col);
        let mut back = vec![0.0; x.len()];
        col2im(&c, g, &mut back);
        let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn conv_geometry() {
        let g = ConvGeom { c: 1, h: 22, w: 22, k: 3, stride: 2, pad: 1 };
        assert_eq!(g.out_hw(), Some((11, 11)));
        let g = ConvGeom { c: 1, h: 2, w: 2, k: 3, stride: 1, pad: 0 };
        assert_eq!(g.out_hw(), None);
    }
}
