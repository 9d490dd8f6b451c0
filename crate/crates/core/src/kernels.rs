//! Raw numeric routines shared by the tape operations.
//!
//! Everything here works on flat row-major `f64` slices; shape bookkeeping
//! and gradient wiring live in [`crate::tape`]. The loops are laid out so
//! the innermost iteration runs over contiguous memory.

/// out = a · b, with a: [m,k], b: [k,n]. Overwrites `out`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.fill(0.0);
    matmul_acc(a, b, m, k, n, out);
}

/// out += a · b.
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += aik * bv;
            }
        }
    }
}

/// out += a · bᵀ, with a: [m,n], b: [p,n], out: [m,p]. Rows of both operands
/// are contiguous, so each output entry is a dot product of two rows.
pub fn matmul_a_bt_acc(a: &[f64], b: &[f64], m: usize, n: usize, p: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(out.len(), m * p);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut out[i * p..(i + 1) * p];
        for (j, c) in crow.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *c += acc;
        }
    }
}

/// out += aᵀ · b, with a: [p,m], b: [p,n], out: [m,n]. Implemented as a sum
/// of rank-one updates so the inner loop stays contiguous.
pub fn matmul_at_b_acc(a: &[f64], b: &[f64], p: usize, m: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), p * m);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(out.len(), m * n);
    for t in 0..p {
        let arow = &a[t * m..(t + 1) * m];
        let brow = &b[t * n..(t + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut out[i * n..(i + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += av * bv;
            }
        }
    }
}

/// Spatial size of a convolution output: (size + 2·pad − k)/stride + 1.
pub fn conv_out_dim(size: usize, k: usize, pad: usize, stride: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Unfolds one [c,h,w] image into a [c·kh·kw, oh·ow] patch matrix.
pub fn im2col(
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    out: &mut [f64],
) {
    debug_assert_eq!(input.len(), c * h * w);
    debug_assert_eq!(out.len(), c * kh * kw * oh * ow);
    let pad = pad as isize;
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut out[((ch * kh + ky) * kw + kx) * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride) as isize - pad + ky as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride) as isize - pad + kx as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch matrix back into a [c,h,w] image. Inverse map of
/// [`im2col`] for gradient accumulation.
pub fn col2im_acc(
    cols: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    out: &mut [f64],
) {
    debug_assert_eq!(out.len(), c * h * w);
    let pad = pad as isize;
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &cols[((ch * kh + ky) * kw + kx) * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride) as isize - pad + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride) as isize - pad + kx as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Interpolation stencil along one axis for an integer upsampling factor,
/// sample centers at (i + 0.5)/f − 0.5.
pub fn upsample_stencil(in_size: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..in_size * factor)
        .map(|o| {
            let src = (o as f64 + 0.5) / factor as f64 - 0.5;
            let clamped = src.clamp(0.0, (in_size - 1) as f64);
            let i0 = (clamped.floor() as usize).min(in_size - 1);
            let i1 = (i0 + 1).min(in_size - 1);
            (i0, i1, clamped - i0 as f64)
        })
        .collect()
}

/// Bilinear corner indices and weight for one coordinate; out-of-range
/// values clamp to the border cell. Cell i has its center at coordinate i.
pub fn bilinear_axis(coord: f64, size: usize) -> (usize, usize, f64) {
    let c = coord.clamp(0.0, (size - 1) as f64);
    let i0 = (c.floor() as usize).min(size - 1);
    let i1 = (i0 + 1).min(size - 1);
    (i0, i1, c - i0 as f64)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax along `axis` of a tensor with the given shape, max-stabilized.
pub fn softmax_axis(input: &[f64], shape: &[usize], axis: usize, out: &mut [f64]) {
    let k = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * k * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..k {
                max = max.max(input[base + j * inner]);
            }
            let mut sum = 0.0;
            for j in 0..k {
                let e = (input[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..k {
                out[base + j * inner] /= sum;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [[1,2],[3,4]] · [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul(&a, &b, 2, 2, 2, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let a = [1.0, -2.0, 0.5, 3.0, 1.0, -1.0]; // [2,3]
        let b = [2.0, 1.0, 0.0, -1.0, 1.5, 2.5]; // [2,3] or [3,2]
        // a·bᵀ with b as [2,3]
        let mut abt = [0.0; 4];
        matmul_a_bt_acc(&a, &b, 2, 3, 2, &mut abt);
        let mut bt = [0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                bt[j * 2 + i] = b[i * 3 + j];
            }
        }
        let mut reference = [0.0; 4];
        matmul(&a, &bt, 2, 3, 2, &mut reference);
        assert_eq!(abt, reference);

        // aᵀ·b with both [2,3]
        let mut atb = [0.0; 9];
        matmul_at_b_acc(&a, &b, 2, 3, 3, &mut atb);
        let mut at = [0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        let mut reference = [0.0; 9];
        matmul(&at, &b, 3, 2, 3, &mut reference);
        assert_eq!(atb, reference);
    }

    #[test]
    fn conv_out_dim_matches_formula() {
        assert_eq!(conv_out_dim(64, 3, 1, 2), Some(32));
        assert_eq!(conv_out_dim(2, 5, 0, 1), None);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let (c, h, w) = (2, 5, 4);
        let (kh, kw) = (3, 3);
        let (stride, pad) = (2, 1);
        let oh = conv_out_dim(h, kh, pad, stride).unwrap();
        let ow = conv_out_dim(w, kw, pad, stride).unwrap();
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..c * kh * kw * oh * ow).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, (c, h, w), (kh, kw), stride, pad, (oh, ow), &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_acc(&y, (c, h, w), (kh, kw), stride, pad, (oh, ow), &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let input = [1000.0, 999.0, -1000.0, 0.0, 0.0, 0.0];
        let mut out = [0.0; 6];
        softmax_axis(&input, &[2, 3], 1, &mut out);
        for row in out.chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert!(sigmoid(800.0) <= 1.0);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
