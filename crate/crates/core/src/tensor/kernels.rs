//! Raw array kernels behind the tape ops.
//!
//! All kernels are deterministic regardless of thread count: parallelism only
//! ever partitions the output space, and every output element is produced by
//! one sequential inner loop.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Below this many scalar multiply-adds a kernel stays single-threaded.
const PAR_THRESHOLD: usize = 1 << 15;

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Broadcast two shapes together (numpy alignment rules), or None if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[i] = da.max(db);
    }
    Some(out)
}

/// Row-major strides, with stride 0 on axes the (left-padded) shape broadcasts over.
fn bcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let ndim = out_shape.len();
    let offset = ndim - shape.len();
    let mut strides = vec![0usize; ndim];
    let mut acc = 1usize;
    for d in (0..shape.len()).rev() {
        strides[offset + d] = if shape[d] == 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Visit every output element of a broadcast binary op with the flat indices
/// into both operands. Sequential odometer walk in row-major order.
pub fn for_each_bcast2(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(out_shape);
    if total == 0 {
        return;
    }
    let ndim = out_shape.len();
    let a_str = bcast_strides(a_shape, out_shape);
    let b_str = bcast_strides(b_shape, out_shape);
    let mut coords = vec![0usize; ndim];
    let (mut ai, mut bi) = (0usize, 0usize);
    for flat in 0..total {
        f(flat, ai, bi);
        for d in (0..ndim).rev() {
            coords[d] += 1;
            ai += a_str[d];
            bi += b_str[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ai -= a_str[d] * out_shape[d];
            bi -= b_str[d] * out_shape[d];
        }
    }
}

/// Elementwise binary op with broadcasting.
pub fn bcast_binary<S: Scalar>(
    a: &[S],
    a_shape: &[usize],
    b: &[S],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(S, S) -> S,
) -> Vec<S> {
    if a_shape == b_shape {
        return a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
    }
    let mut out = vec![S::zero(); numel(out_shape)];
    for_each_bcast2(out_shape, a_shape, b_shape, |o, ai, bi| {
        out[o] = f(a[ai], b[bi]);
    });
    out
}

/// Accumulate a broadcast operand's gradient: `acc[ai] += val(o, ai, bi)`.
pub fn bcast_accumulate<S: Scalar>(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    acc: &mut [S],
    val: impl Fn(usize, usize, usize) -> S,
) {
    for_each_bcast2(out_shape, a_shape, b_shape, |o, ai, bi| {
        acc[ai] += val(o, ai, bi);
    });
}

/// Recursive pairwise sum over a strided slice.
///
/// The halving split makes group-mean reductions exactly invariant under
/// appending a duplicate of the reduced range (sum(x ++ x) == sum(x) + sum(x)).
pub fn pairwise_sum<S: Scalar>(data: &[S], base: usize, stride: usize, len: usize) -> S {
    match len {
        0 => S::zero(),
        1 => data[base],
        2 => data[base] + data[base + stride],
        _ => {
            let mid = len / 2;
            pairwise_sum(data, base, stride, mid)
                + pairwise_sum(data, base + mid * stride, stride, len - mid)
        }
    }
}

/// C[m,n] = A[m,k] * B[k,n].
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    // Transposed copy of B gives contiguous dot products.
    let mut bt = vec![S::zero(); n * k];
    for i in 0..k {
        for j in 0..n {
            bt[j * k + i] = b[i * n + j];
        }
    }
    let mut out = vec![S::zero(); m * n];
    let fill_row = |i: usize, row: &mut [S]| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, slot) in row.iter_mut().enumerate() {
            let br = &bt[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for p in 0..k {
                acc += ar[p] * br[p];
            }
            *slot = acc;
        }
    };
    if m * n * k > PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| fill_row(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            fill_row(i, row);
        }
    }
    out
}

pub fn transpose2d<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Cross-correlation with stride 1. Output spatial size: h + 2*pad - ksize + 1.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd<S: Scalar>(
    x: &[S],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    ker: &[S],
    cout: usize,
    ksize: usize,
    pad: usize,
    bias: Option<&[S]>,
) -> Vec<S> {
    let oh = h + 2 * pad - ksize + 1;
    let ow = w + 2 * pad - ksize + 1;
    let mut out = vec![S::zero(); n * cout * oh * ow];
    let plane = |ni: usize, co: usize, dst: &mut [S]| {
        let b = bias.map(|b| b[co]).unwrap_or_else(S::zero);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b;
                for ci in 0..cin {
                    let xbase = ((ni * cin + ci) * h) * w;
                    let kbase = ((co * cin + ci) * ksize) * ksize;
                    for ky in 0..ksize {
                        let iy = (oy + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..ksize {
                            let ix = (ox + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += x[xbase + iy as usize * w + ix as usize]
                                * ker[kbase + ky * ksize + kx];
                        }
                    }
                }
                dst[oy * ow + ox] = acc;
            }
        }
    };
    let work = n * cout * oh * ow * cin * ksize * ksize;
    if work > PAR_THRESHOLD && n * cout > 1 {
        out.par_chunks_mut(oh * ow)
            .enumerate()
            .for_each(|(p, dst)| plane(p / cout, p % cout, dst));
    } else {
        for (p, dst) in out.chunks_mut(oh * ow).enumerate() {
            plane(p / cout, p % cout, dst);
        }
    }
    out
}

/// Gradients of conv2d_fwd w.r.t. input, kernel and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd<S: Scalar>(
    grad_out: &[S],
    x: &[S],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    ker: &[S],
    cout: usize,
    ksize: usize,
    pad: usize,
    want_bias: bool,
) -> (Vec<S>, Vec<S>, Option<Vec<S>>) {
    let oh = h + 2 * pad - ksize + 1;
    let ow = w + 2 * pad - ksize + 1;

    let mut dx = vec![S::zero(); n * cin * h * w];
    let dx_plane = |ni: usize, ci: usize, dst: &mut [S]| {
        for iy in 0..h {
            for ix in 0..w {
                let mut acc = S::zero();
                for co in 0..cout {
                    let gbase = ((ni * cout + co) * oh) * ow;
                    let kbase = ((co * cin + ci) * ksize) * ksize;
                    for ky in 0..ksize {
                        let oy = iy as isize + pad as isize - ky as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        for kx in 0..ksize {
                            let ox = ix as isize + pad as isize - kx as isize;
                            if ox < 0 || ox >= ow as isize {
                                continue;
                            }
                            acc += grad_out[gbase + oy as usize * ow + ox as usize]
                                * ker[kbase + ky * ksize + kx];
                        }
                    }
                }
                dst[iy * w + ix] = acc;
            }
        }
    };
    if n * cin * h * w * cout > PAR_THRESHOLD && n * cin > 1 {
        dx.par_chunks_mut(h * w)
            .enumerate()
            .for_each(|(p, dst)| dx_plane(p / cin, p % cin, dst));
    } else {
        for (p, dst) in dx.chunks_mut(h * w).enumerate() {
            dx_plane(p / cin, p % cin, dst);
        }
    }

    let mut dk = vec![S::zero(); cout * cin * ksize * ksize];
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..ksize {
                for kx in 0..ksize {
                    let mut acc = S::zero();
                    for ni in 0..n {
                        let gbase = ((ni * cout + co) * oh) * ow;
                        let xbase = ((ni * cin + ci) * h) * w;
                        for oy in 0..oh {
                            let iy = (oy + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += grad_out[gbase + oy * ow + ox]
                                    * x[xbase + iy as usize * w + ix as usize];
                            }
                        }
                    }
                    dk[((co * cin + ci) * ksize + ky) * ksize + kx] = acc;
                }
            }
        }
    }

    let db = want_bias.then(|| {
        let mut db = vec![S::zero(); cout];
        for ni in 0..n {
            for co in 0..cout {
                let gbase = ((ni * cout + co) * oh) * ow;
                for g in &grad_out[gbase..gbase + oh * ow] {
                    db[co] += *g;
                }
            }
        }
        db
    });

    (dx, dk, db)
}

/// 2x bilinear upsampling with half-pixel (align_corners = false) sampling.
/// Source coordinate of output pixel o is (o + 0.5)/2 - 0.5, clamped.
pub fn up2x_fwd<S: Scalar>(x: &[S], planes: usize, h: usize, w: usize) -> Vec<S> {
    let (oh, ow) = (2 * h, 2 * w);
    let half = S::of_f64(0.5);
    let coord = |o: usize, size: usize| -> (usize, usize, S) {
        let s = (S::of_usize(o) + half) * half - half;
        let s = s.max(S::zero()).min(S::of_usize(size - 1));
        let lo = s.floor();
        let i0 = lo.as_f64() as usize;
        let i1 = (i0 + 1).min(size - 1);
        (i0, i1, s - lo)
    };
    let mut out = vec![S::zero(); planes * oh * ow];
    let fill = |p: usize, dst: &mut [S]| {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = coord(oy, h);
            for ox in 0..ow {
                let (x0, x1, fx) = coord(ox, w);
                let one = S::one();
                let v = src[y0 * w + x0] * (one - fy) * (one - fx)
                    + src[y0 * w + x1] * (one - fy) * fx
                    + src[y1 * w + x0] * fy * (one - fx)
                    + src[y1 * w + x1] * fy * fx;
                dst[oy * ow + ox] = v;
            }
        }
    };
    if planes * oh * ow > PAR_THRESHOLD && planes > 1 {
        out.par_chunks_mut(oh * ow)
            .enumerate()
            .for_each(|(p, dst)| fill(p, dst));
    } else {
        for (p, dst) in out.chunks_mut(oh * ow).enumerate() {
            fill(p, dst);
        }
    }
    out
}

pub fn up2x_bwd<S: Scalar>(grad_out: &[S], planes: usize, h: usize, w: usize) -> Vec<S> {
    let (oh, ow) = (2 * h, 2 * w);
    let half = S::of_f64(0.5);
    let coord = |o: usize, size: usize| -> (usize, usize, S) {
        let s = (S::of_usize(o) + half) * half - half;
        let s = s.max(S::zero()).min(S::of_usize(size - 1));
        let lo = s.floor();
        let i0 = lo.as_f64() as usize;
        let i1 = (i0 + 1).min(size - 1);
        (i0, i1, s - lo)
    };
    let mut dx = vec![S::zero(); planes * h * w];
    let fill = |p: usize, dst: &mut [S]| {
        let g = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = coord(oy, h);
            for ox in 0..ow {
                let (x0, x1, fx) = coord(ox, w);
                let gv = g[oy * ow + ox];
                let one = S::one();
                dst[y0 * w + x0] += gv * (one - fy) * (one - fx);
                dst[y0 * w + x1] += gv * (one - fy) * fx;
                dst[y1 * w + x0] += gv * fy * (one - fx);
                dst[y1 * w + x1] += gv * fy * fx;
            }
        }
    };
    if planes * oh * ow > PAR_THRESHOLD && planes > 1 {
        dx.par_chunks_mut(h * w)
            .enumerate()
            .for_each(|(p, dst)| fill(p, dst));
    } else {
        for (p, dst) in dx.chunks_mut(h * w).enumerate() {
            fill(p, dst);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes_align_right() {
        assert_eq!(broadcast_shape(&[3, 4], &[4]), Some(vec![3, 4]));
        assert_eq!(broadcast_shape(&[3, 1], &[1, 5]), Some(vec![3, 5]));
        assert_eq!(broadcast_shape(&[2], &[3]), None);
    }

    #[test]
    fn pairwise_sum_duplication_exact() {
        let xs: Vec<f32> = (0..13).map(|i| (i as f32 * 0.37).sin()).collect();
        let mut doubled = xs.clone();
        doubled.extend_from_slice(&xs);
        let s1 = pairwise_sum(&xs, 0, 1, xs.len());
        let s2 = pairwise_sum(&doubled, 0, 1, doubled.len());
        assert_eq!(s2, s1 + s1);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let m = 5;
        let k = 8;
        let n = 3;
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7 + 3) % 11) as f64 * 0.25 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 5 + 1) % 13) as f64 * 0.125 - 0.5).collect();
        let c = matmul(&a, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                assert!((c[i * n + j] - acc).abs() < 1e-12);
            }
        }
    }
}
