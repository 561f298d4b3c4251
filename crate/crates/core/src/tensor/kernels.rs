//! Dense numerical kernels over flat row-major buffers.

use super::real::Real;

#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = F::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

pub fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// `out[r, o] = Σ_i x[r, i] · w[o, i]` (`x·wᵀ`), overwriting `out`.
pub fn linear_forward<F: Real>(
    x: &[F],
    rows: usize,
    w: &[F],
    out_dim: usize,
    in_dim: usize,
    out: &mut [F],
) {
    if rows <= 2 {
        for r in 0..rows {
            let xr = &x[r * in_dim..(r + 1) * in_dim];
            let or = &mut out[r * out_dim..(r + 1) * out_dim];
            for (o, slot) in or.iter_mut().enumerate() {
                *slot = dot(&w[o * in_dim..(o + 1) * in_dim], xr);
            }
        }
    } else {
        F::gemm_raw(
            rows,
            in_dim,
            out_dim,
            x,
            in_dim,
            1,
            w,
            1,
            in_dim,
            F::zero(),
            out,
            out_dim,
            1,
        );
    }
}

/// Accumulates `dx += dy·w` and `dw += dyᵀ·x` for the linear map above.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<F: Real>(
    dy: &[F],
    x: &[F],
    w: &[F],
    rows: usize,
    out_dim: usize,
    in_dim: usize,
    dx: Option<&mut [F]>,
    dw: Option<&mut [F]>,
) {
    if let Some(dx) = dx {
        if rows <= 2 {
            for r in 0..rows {
                let dxr = &mut dx[r * in_dim..(r + 1) * in_dim];
                for o in 0..out_dim {
                    let g = dy[r * out_dim + o];
                    if g != F::zero() {
                        axpy(g, &w[o * in_dim..(o + 1) * in_dim], dxr);
                    }
                }
            }
        } else {
            F::gemm_raw(
                rows,
                out_dim,
                in_dim,
                dy,
                out_dim,
                1,
                w,
                in_dim,
                1,
                F::one(),
                dx,
                in_dim,
                1,
            );
        }
    }
    if let Some(dw) = dw {
        if rows <= 2 {
            for r in 0..rows {
                let xr = &x[r * in_dim..(r + 1) * in_dim];
                for o in 0..out_dim {
                    let g = dy[r * out_dim + o];
                    if g != F::zero() {
                        axpy(g, xr, &mut dw[o * in_dim..(o + 1) * in_dim]);
                    }
                }
            }
        } else {
            F::gemm_raw(
                out_dim,
                rows,
                in_dim,
                dy,
                1,
                out_dim,
                x,
                in_dim,
                1,
                F::one(),
                dw,
                in_dim,
                1,
            );
        }
    }
}

/// `c = a·b` for row-major `a [m,k]`, `b [k,n]`.
pub fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, c: &mut [F]) {
    F::gemm_raw(m, k, n, a, k, 1, b, n, 1, F::zero(), c, n, 1);
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<F: Real>(x: &[F], cols: usize, out: &mut [F]) {
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = xr.iter().copied().fold(F::neg_infinity(), F::max);
        let mut total = F::zero();
        for (o, v) in or.iter_mut().zip(xr) {
            *o = (*v - max).exp();
            total += *o;
        }
        for o in or.iter_mut() {
            *o /= total;
        }
    }
}

/// Row-wise log-softmax; returns nothing, writes `out`.
pub fn log_softmax_rows<F: Real>(x: &[F], cols: usize, out: &mut [F]) {
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = xr.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = xr.iter().map(|v| (*v - max).exp()).sum::<F>().ln() + max;
        for (o, v) in or.iter_mut().zip(xr) {
            *o = *v - lse;
        }
    }
}
