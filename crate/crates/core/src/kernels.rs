//! Dense numeric kernels behind the tape operations.
//!
//! Everything here works on plain slices with explicitly passed
//! dimensions; shape validation is the caller's job. Loops are
//! arranged so the innermost dimension is contiguous, which is what
//! the `axpy` fast path and the auto-vectorizer need.

use crate::scalar::Scalar;

/// `c += a * b` for row-major `a: [m,k]`, `b: [k,n]`, `c: [m,n]`.
///
/// Accumulating on purpose: callers that want a plain product pass a
/// zeroed `c`.
pub fn matmul_acc<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k, "matmul a size");
    assert_eq!(b.len(), k * n, "matmul b size");
    assert_eq!(c.len(), m * n, "matmul c size");
    let mut i = 0;
    // Four output rows per sweep so each b row is read once for four
    // updates. Each c element still sees its updates in plain kk order.
    while i + 4 <= m {
        let (head, rest) = c[i * n..].split_at_mut(n);
        let (r1, rest) = rest.split_at_mut(n);
        let (r2, r3) = rest.split_at_mut(n);
        let mut rows = [head, r1, r2, &mut r3[..n]];
        for kk in 0..k {
            let s = [
                a[i * k + kk],
                a[(i + 1) * k + kk],
                a[(i + 2) * k + kk],
                a[(i + 3) * k + kk],
            ];
            let b_row = &b[kk * n..(kk + 1) * n];
            let [c0, c1, c2, c3] = &mut rows;
            F::axpy4(s, b_row, [c0, c1, c2, c3]);
        }
        i += 4;
    }
    while i < m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            F::axpy(a_ik, b_row, c_row);
        }
        i += 1;
    }
}

/// `dst = src^T` for row-major `src: [rows,cols]`, `dst: [cols,rows]`.
pub fn transpose<F: Scalar>(src: &[F], dst: &mut [F], rows: usize, cols: usize) {
    assert_eq!(src.len(), rows * cols);
    assert_eq!(dst.len(), rows * cols);
    // Blocked to keep both access patterns within cache lines.
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Output spatial extent of a conv/pool window sweep.
pub fn out_extent(input: usize, window: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - window) / stride + 1
}

/// Unfolds one image `x: [c,h,w]` into `col: [c*kh*kw, oh*ow]`.
///
/// Row `(ci, ki, kj)` of `col` holds the input value each output
/// position reads through that kernel tap, with zeros where the tap
/// falls into padding.
#[allow(clippy::too_many_arguments)]
pub fn im2col<F: Scalar>(
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    col: &mut [F],
) {
    let oh = out_extent(h, kh, stride, pad);
    let ow = out_extent(w, kw, stride, pad);
    assert_eq!(x.len(), c * h * w);
    assert_eq!(col.len(), c * kh * kw * oh * ow);
    let mut row = 0;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                for oy in 0..oh {
                    let out = &mut col[(row * oh + oy) * ow..(row * oh + oy) * ow + ow];
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        out.fill(F::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        // Valid ox span: 0 <= ox + kj - pad < w.
                        let lo = pad.saturating_sub(kj);
                        let hi = (w + pad - kj).min(ow);
                        out[..lo.min(ow)].fill(F::ZERO);
                        if lo < hi {
                            let off = lo + kj - pad;
                            out[lo..hi].copy_from_slice(&src[off..off + (hi - lo)]);
                        }
                        if hi < ow {
                            out[hi..].fill(F::ZERO);
                        }
                    } else {
                        for (ox, slot) in out.iter_mut().enumerate() {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            *slot = if ix < 0 || ix >= w as isize {
                                F::ZERO
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Transpose of [`im2col`]: scatter-adds `col` back into `dx`.
#[allow(clippy::too_many_arguments)]
pub fn col2im_add<F: Scalar>(
    col: &[F],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dx: &mut [F],
) {
    let oh = out_extent(h, kh, stride, pad);
    let ow = out_extent(w, kw, stride, pad);
    assert_eq!(dx.len(), c * h * w);
    assert_eq!(col.len(), c * kh * kw * oh * ow);
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                for oy in 0..oh {
                    let src = &col[(row * oh + oy) * ow..(row * oh + oy) * ow + ow];
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        let lo = pad.saturating_sub(kj);
                        let hi = (w + pad - kj).min(ow);
                        if lo < hi {
                            let off = lo + kj - pad;
                            for (d, s) in dst[off..off + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                                *d += *s;
                            }
                        }
                    } else {
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += *s;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Per-axis bilinear source taps with half-pixel alignment.
///
/// Entry `o` holds `(i0, i1, w1)`: output position `o` reads
/// `(1-w1)*src[i0] + w1*src[i1]`, with `i0 <= i1` both clamped in
/// bounds.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    assert!(in_len > 0 && out_len > 0);
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let floor = center.floor();
            let w1 = (center - floor).clamp(0.0, 1.0);
            let i0 = floor.max(0.0) as usize;
            let i0 = i0.min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            // Centers clamped at either edge read one source pixel; the
            // weight is normalized away so the pair is canonical.
            if floor < 0.0 || i1 == i0 {
                (i0, i0, 0.0)
            } else {
                (i0, i1, w1)
            }
        })
        .collect()
}
