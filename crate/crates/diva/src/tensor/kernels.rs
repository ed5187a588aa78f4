//! Dense array kernels shared by the no-grad forward path and the tape.
//!
//! Convolutions are stride-1 with "same" zero padding (odd kernels only),
//! lowered to GEMM through im2col. Layout is channel-last: images are
//! `[H, W, C]`, feature matrices are `[rows, cols]`.

use super::{canonical_sum, Real, SLOT_CAP};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, ArrayView4};

/// Lower a `[H, W, C]` image into the `[H*W, kh*kw*C]` patch matrix of a
/// stride-1 same-padded convolution.
pub fn im2col<F: Real>(x: ArrayView3<F>, kh: usize, kw: usize) -> Array2<F> {
    let (h, w, c) = x.dim();
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut col = Array2::<F>::zeros((h * w, kh * kw * c));
    let xs = x.as_slice().expect("contiguous input");
    let cs = col.as_slice_mut().expect("contiguous col");
    let row_stride = kh * kw * c;
    for dy in 0..kh {
        for dx in 0..kw {
            let base = (dy * kw + dx) * c;
            // output pixel (y, t) reads input pixel (y + dy - ph, t + dx - pw)
            let y_lo = ph.saturating_sub(dy);
            let y_hi = (h + ph).saturating_sub(dy).min(h);
            let t_lo = pw.saturating_sub(dx);
            let t_hi = (w + pw).saturating_sub(dx).min(w);
            if t_lo >= t_hi {
                continue;
            }
            let run = (t_hi - t_lo) * c;
            for y in y_lo..y_hi {
                let sy = y + dy - ph;
                let src_off = (sy * w + (t_lo + dx - pw)) * c;
                let dst_row0 = y * w + t_lo;
                // contiguous along t in the source, strided rows in the dest
                let src = &xs[src_off..src_off + run];
                for (i, chunk) in src.chunks_exact(c).enumerate() {
                    let d = (dst_row0 + i) * row_stride + base;
                    cs[d..d + c].copy_from_slice(chunk);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add a patch-matrix gradient back onto the
/// `[H, W, C]` input lattice.
pub fn col2im<F: Real>(dcol: ArrayView2<F>, h: usize, w: usize, c: usize, kh: usize, kw: usize) -> Array3<F> {
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut dx_arr = Array3::<F>::zeros((h, w, c));
    let ds = dcol.as_slice().expect("contiguous dcol");
    let out = dx_arr.as_slice_mut().unwrap();
    let row_stride = kh * kw * c;
    for dy in 0..kh {
        for dx in 0..kw {
            let base = (dy * kw + dx) * c;
            let y_lo = ph.saturating_sub(dy);
            let y_hi = (h + ph).saturating_sub(dy).min(h);
            let t_lo = pw.saturating_sub(dx);
            let t_hi = (w + pw).saturating_sub(dx).min(w);
            if t_lo >= t_hi {
                continue;
            }
            for y in y_lo..y_hi {
                let sy = y + dy - ph;
                let dst_off = (sy * w + (t_lo + dx - pw)) * c;
                let src_row0 = y * w + t_lo;
                for i in 0..(t_hi - t_lo) {
                    let sidx = (src_row0 + i) * row_stride + base;
                    let didx = dst_off + i * c;
                    for k in 0..c {
                        out[didx + k] = out[didx + k] + ds[sidx + k];
                    }
                }
            }
        }
    }
    dx_arr
}

/// Stride-1 same-padded convolution. `w` is `[kh, kw, cin, cout]`, `b` is
/// `[cout]`; both kernel sides must be odd.
pub fn conv2d_same<F: Real>(x: ArrayView3<F>, w: ArrayView4<F>, b: ArrayView1<F>) -> Array3<F> {
    let (h, wd, cin) = x.dim();
    let (kh, kw, wcin, cout) = w.dim();
    assert_eq!(cin, wcin, "conv input channels");
    assert!(kh % 2 == 1 && kw % 2 == 1, "odd kernels only");
    let col = im2col(x, kh, kw);
    let w2 = w.into_shape_with_order((kh * kw * cin, cout)).expect("contiguous weight");
    let mut y = Array2::<F>::zeros((h * wd, cout));
    general_mat_mul(F::one(), &col, &w2, F::zero(), &mut y);
    y += &b.broadcast((h * wd, cout)).unwrap();
    y.into_shape_with_order((h, wd, cout)).unwrap()
}

/// Gradients of [`conv2d_same`] with respect to input, weight and bias.
pub fn conv2d_same_backward<F: Real>(
    x: ArrayView3<F>,
    w: ArrayView4<F>,
    dy: ArrayView3<F>,
) -> (Array3<F>, ndarray::Array4<F>, Array1<F>) {
    let (h, wd, cin) = x.dim();
    let (kh, kw, _, cout) = w.dim();
    let dy2 = dy.into_shape_with_order((h * wd, cout)).expect("contiguous dy");
    let w2 = w.into_shape_with_order((kh * kw * cin, cout)).unwrap();

    // d input: scatter dy * w^T back through the patch matrix
    let mut dcol = Array2::<F>::zeros((h * wd, kh * kw * cin));
    general_mat_mul(F::one(), &dy2, &w2.t(), F::zero(), &mut dcol);
    let dx = col2im(dcol.view(), h, wd, cin, kh, kw);

    // d weight: col^T * dy
    let col = im2col(x, kh, kw);
    let mut dw2 = Array2::<F>::zeros((kh * kw * cin, cout));
    general_mat_mul(F::one(), &col.t(), &dy2, F::zero(), &mut dw2);
    let dw = dw2.into_shape_with_order((kh, kw, cin, cout)).unwrap();

    let db = dy2.sum_axis(ndarray::Axis(0));
    (dx, dw, db)
}

pub fn relu<F: Real>(x: &mut [F]) {
    for v in x.iter_mut() {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

pub fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Row-wise layer normalization over the last axis of `[rows, k]`.
/// Returns `(y, mean, inv_std)`; the statistics are reused by the backward op.
pub fn layer_norm_rows<F: Real>(
    x: ArrayView2<F>,
    gamma: ArrayView1<F>,
    beta: ArrayView1<F>,
    eps: F,
) -> (Array2<F>, Array1<F>, Array1<F>) {
    let (rows, k) = x.dim();
    let kf = F::from_f64(k as f64);
    let mut y = Array2::<F>::zeros((rows, k));
    let mut means = Array1::<F>::zeros(rows);
    let mut inv_stds = Array1::<F>::zeros(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.sum() / kf;
        let mut var = F::zero();
        for &v in row.iter() {
            let d = v - mean;
            var = var + d * d;
        }
        var = var / kf;
        let inv_std = F::one() / (var + eps).sqrt();
        means[r] = mean;
        inv_stds[r] = inv_std;
        for c in 0..k {
            y[[r, c]] = (x[[r, c]] - mean) * inv_std * gamma[c] + beta[c];
        }
    }
    (y, means, inv_stds)
}

/// Softmax across the last axis of `[rows, n]` (the slot axis), carried out
/// with a canonical summation order so the result is bit-exact under any
/// permutation of the `n` columns.
pub fn softmax_slots<F: Real>(x: ArrayView2<F>) -> Array2<F> {
    let (rows, n) = x.dim();
    assert!(n <= SLOT_CAP, "slot count exceeds SLOT_CAP");
    let mut y = Array2::<F>::zeros((rows, n));
    let mut buf = [F::zero(); SLOT_CAP];
    for r in 0..rows {
        let row = x.row(r);
        let mut m = row[0];
        for &v in row.iter() {
            if v > m {
                m = v;
            }
        }
        for (j, &v) in row.iter().enumerate() {
            buf[j] = (v - m).exp();
        }
        let mut tmp = buf;
        let denom = canonical_sum(&mut tmp[..n]);
        for j in 0..n {
            y[[r, j]] = buf[j] / denom;
        }
    }
    y
}

/// Bilinear upsampling of `[H, W, C]` to `(oh, ow)` with corner-aligned
/// sampling. Inference-only (not differentiated).
pub fn upsample_bilinear<F: Real>(x: ArrayView3<F>, oh: usize, ow: usize) -> Array3<F> {
    let (h, w, c) = x.dim();
    let mut out = Array3::<F>::zeros((oh, ow, c));
    let fy = if oh > 1 { (h - 1) as f64 / (oh - 1) as f64 } else { 0.0 };
    let fx = if ow > 1 { (w - 1) as f64 / (ow - 1) as f64 } else { 0.0 };
    for oy in 0..oh {
        let sy = oy as f64 * fy;
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = F::from_f64(sy - y0 as f64);
        for ox in 0..ow {
            let sx = ox as f64 * fx;
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = F::from_f64(sx - x0 as f64);
            for ch in 0..c {
                let a = x[[y0, x0, ch]];
                let b = x[[y0, x1, ch]];
                let d = x[[y1, x0, ch]];
                let e = x[[y1, x1, ch]];
                let top = a + (b - a) * wx;
                let bot = d + (e - d) * wx;
                out[[oy, ox, ch]] = top + (bot - top) * wy;
            }
        }
    }
    out
}

/// The 4-channel coordinate grid `(x, y, 1-x, 1-y)` in `[0, 1]`, flattened to
/// `[H*W, 4]`. Positional embeddings are a learned linear map of this grid,
/// so they re-materialize at any resolution.
pub fn position_grid<F: Real>(h: usize, w: usize) -> Array2<F> {
    let mut g = Array2::<F>::zeros((h * w, 4));
    for y in 0..h {
        let fy = if h > 1 { y as f64 / (h - 1) as f64 } else { 0.0 };
        for x in 0..w {
            let fx = if w > 1 { x as f64 / (w - 1) as f64 } else { 0.0 };
            let r = y * w + x;
            g[[r, 0]] = F::from_f64(fx);
            g[[r, 1]] = F::from_f64(fy);
            g[[r, 2]] = F::from_f64(1.0 - fx);
            g[[r, 3]] = F::from_f64(1.0 - fy);
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array3, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn3(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Array3<f64> {
        Array3::from_shape_fn((h, w, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct O(H*W*k*k*C) convolution used as the oracle.
    fn conv_naive(x: &Array3<f64>, w: &Array4<f64>, b: &Array1<f64>) -> Array3<f64> {
        let (h, wd, cin) = x.dim();
        let (kh, kw, _, cout) = w.dim();
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let mut y = Array3::zeros((h, wd, cout));
        for oy in 0..h {
            for ox in 0..wd {
                for co in 0..cout {
                    let mut acc = b[co];
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = oy as isize + dy as isize - ph as isize;
                            let ix = ox as isize + dx as isize - pw as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x[[iy as usize, ix as usize, ci]] * w[[dy, dx, ci, co]];
                            }
                        }
                    }
                    y[[oy, ox, co]] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(kh, kw) in &[(1usize, 1usize), (3, 3), (5, 5), (5, 3)] {
            let x = randn3(&mut rng, 6, 7, 3);
            let w = Array4::from_shape_fn((kh, kw, 3, 4), |_| rng.gen_range(-1.0..1.0));
            let b = Array1::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0));
            let fast = conv2d_same(x.view(), w.view(), b.view());
            let slow = conv_naive(&x, &w, &b);
            for (a, e) in fast.iter().zip(slow.iter()) {
                assert!((a - e).abs() < 1e-10, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn3(&mut rng, 5, 6, 2);
        let col = im2col(x.view(), 3, 3);
        let y = Array2::from_shape_fn(col.dim(), |_| rng.gen_range(-1.0..1.0));
        let lhs: f64 = (&col * &y).sum();
        let back = col2im(y.view(), 5, 6, 2, 3, 3);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_permute_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Array2::from_shape_fn((40, 5), |_| rng.gen_range(-4.0f32..4.0));
        let y = softmax_slots(x.view());
        for r in y.rows() {
            let s: f32 = r.sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        // permute columns, recompute, un-permute: bit identical
        let perm = [3usize, 0, 4, 1, 2];
        let xp = Array2::from_shape_fn((40, 5), |(r, j)| x[[r, perm[j]]]);
        let yp = softmax_slots(xp.view());
        for r in 0..40 {
            for j in 0..5 {
                assert_eq!(y[[r, perm[j]]].to_bits(), yp[[r, j]].to_bits());
            }
        }
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((4, 16), |_| rng.gen_range(-2.0..2.0));
        let gamma = Array1::ones(16);
        let beta = Array1::zeros(16);
        let (y, _, _) = layer_norm_rows(x.view(), gamma.view(), beta.view(), 1e-5);
        for r in y.rows() {
            let mean: f64 = r.sum() / 16.0;
            let var: f64 = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn upsample_identity_at_same_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = randn3(&mut rng, 4, 5, 2);
        let y = upsample_bilinear(x.view(), 4, 5);
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
