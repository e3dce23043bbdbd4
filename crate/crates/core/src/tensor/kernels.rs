//! Flat-slice numeric kernels behind the tape ops.
//!
//! Every kernel has a fixed summation order per output element, so
//! results are bit-identical no matter how rayon schedules the rows.

use rayon::prelude::*;

/// Rayon kicks in above this many multiply-accumulates per call.
const PAR_THRESHOLD: usize = 1 << 18;

/// Dot product with eight fixed accumulator lanes.
///
/// The lane split lets LLVM vectorize without relaxing float semantics;
/// the final reduction tree is fixed, so the result is deterministic.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / 8;
    let mut acc = [0.0f32; 8];
    for c in 0..chunks {
        let base = c * 8;
        for l in 0..8 {
            acc[l] += a[base + l] * b[base + l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]));
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Accumulate `y += alpha * x`.
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// C[m,n] = A[m,k] * B[k,n].
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0f32; m * n];
    let row = |i: usize, out_row: &mut [f32]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], out_row);
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(n).enumerate() {
            row(i, r);
        }
    }
    out
}

/// C[m,n] = A[m,k] * B[n,k]^T.
pub fn matmul_bt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0f32; m * n];
    let row = |i: usize, out_row: &mut [f32]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            *o = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(n).enumerate() {
            row(i, r);
        }
    }
    out
}

/// C[k,n] = A[m,k]^T * B[m,n].
pub fn matmul_at(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut out = vec![0.0f32; k * n];
    let row = |j: usize, out_row: &mut [f32]| {
        for i in 0..m {
            let av = a[i * k + j];
            if av != 0.0 {
                axpy(av, &b[i * n..(i + 1) * n], out_row);
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && k > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(j, r)| row(j, r));
    } else {
        for (j, r) in out.chunks_mut(n).enumerate() {
            row(j, r);
        }
    }
    out
}

/// Output spatial extent of a convolution along one axis (floor semantics).
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfold one sample `x[C,H,W]` into a `[C*kh*kw, oh*ow]` patch matrix.
pub fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let cols = oh * ow;
    let mut out = vec![0.0f32; c * kh * kw * cols];
    for ci in 0..c {
        let x_ch = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * cols;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_row = &x_ch[iy as usize * w..(iy as usize + 1) * w];
                    let out_row = &mut out[row + oy * ow..row + (oy + 1) * ow];
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            out_row[ox] = x_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Fold a `[C*kh*kw, oh*ow]` patch-gradient matrix back onto `dx[C,H,W]`.
pub fn col2im_accumulate(
    col: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f32],
) {
    let cols = oh * ow;
    for ci in 0..c {
        let dx_ch = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * cols;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let col_row = &col[row + oy * ow..row + (oy + 1) * ow];
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dx_ch[iy as usize * w + ix as usize] += col_row[ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [[1,2],[3,4]] x [[5,6],[7,8]] = [[19,22],[43,50]]
        let c = matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_variants_agree_with_plain() {
        let a: Vec<f32> = (0..12).map(|i| i as f32 * 0.5 - 2.0).collect(); // 3x4
        let b: Vec<f32> = (0..20).map(|i| (i as f32).sin()).collect(); // 4x5
        let c = matmul(&a, &b, 3, 4, 5);

        // bt: rebuild b as [5,4] transpose, multiply back.
        let mut bt = vec![0.0f32; 20];
        for i in 0..4 {
            for j in 0..5 {
                bt[j * 4 + i] = b[i * 5 + j];
            }
        }
        let c2 = matmul_bt(&a, &bt, 3, 4, 5);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-5);
        }

        // at: rebuild a as [4,3] transpose.
        let mut at = vec![0.0f32; 12];
        for i in 0..3 {
            for j in 0..4 {
                at[j * 3 + i] = a[i * 4 + j];
            }
        }
        let c3 = matmul_at(&at, &b, 4, 3, 5);
        for (x, y) in c.iter().zip(&c3) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f32> = (0..37).map(|i| (i as f32 * 0.37).cos()).collect();
        let b: Vec<f32> = (0..37).map(|i| (i as f32 * 0.71).sin()).collect();
        let naive: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-4);
    }

    #[test]
    fn im2col_col2im_roundtrip_shapes() {
        let (c, h, w, kh, kw, s, p) = (2usize, 5usize, 4usize, 3usize, 3usize, 1usize, 1usize);
        let oh = conv_out_dim(h, kh, s, p).unwrap();
        let ow = conv_out_dim(w, kw, s, p).unwrap();
        let x: Vec<f32> = (0..c * h * w).map(|i| i as f32).collect();
        let col = im2col(&x, c, h, w, kh, kw, s, p, oh, ow);
        assert_eq!(col.len(), c * kh * kw * oh * ow);
        let mut dx = vec![0.0f32; c * h * w];
        col2im_accumulate(&col, c, h, w, kh, kw, s, p, oh, ow, &mut dx);
        // Every input pixel appears in at least one patch for this geometry.
        assert!(dx.iter().zip(&x).all(|(&d, &v)| v == 0.0 || d != 0.0));
    }
}
