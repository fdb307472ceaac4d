//! Blocked matrix-multiply kernels for the convolution paths.
//!
//! All three kernels accumulate into `c` (`C += ...`), walk memory in a fixed
//! order, and rely on auto-vectorization: the inner loops are either
//! element-independent axpy updates or fixed-width lane accumulators, both of
//! which compile to SIMD without reassociating a single output's reduction
//! nondeterministically. The axpy kernels process four C rows and four
//! coefficients at a time so every B load is reused sixteen times.

use crate::numcore::Scalar;

/// Columns of C processed per block; keeps the active C and B row slices
/// resident in L1.
const NB: usize = 1024;
/// Rows of B processed per block; bounds the panel that must stay in L2.
const KB: usize = 256;

/// Split a buffer holding four consecutive rows into the rows.
#[inline]
fn split4<T>(rows: &mut [T], n: usize) -> (&mut [T], &mut [T], &mut [T], &mut [T]) {
    let (r0, rest) = rows.split_at_mut(n);
    let (r1, rest) = rest.split_at_mut(n);
    let (r2, r3) = rest.split_at_mut(n);
    (r0, r1, r2, r3)
}

/// Four C rows += 4x4 coefficient tile times four B rows.
#[inline]
fn quad_axpy4<T: Scalar>(
    c0: &mut [T],
    c1: &mut [T],
    c2: &mut [T],
    c3: &mut [T],
    a: [[T; 4]; 4],
    b0: &[T],
    b1: &[T],
    b2: &[T],
    b3: &[T],
) {
    let n = c0.len();
    let (b0, b1, b2, b3) = (&b0[..n], &b1[..n], &b2[..n], &b3[..n]);
    let (c1, c2, c3) = (&mut c1[..n], &mut c2[..n], &mut c3[..n]);
    for j in 0..n {
        let (v0, v1, v2, v3) = (b0[j], b1[j], b2[j], b3[j]);
        c0[j] += a[0][0] * v0 + a[0][1] * v1 + a[0][2] * v2 + a[0][3] * v3;
        c1[j] += a[1][0] * v0 + a[1][1] * v1 + a[1][2] * v2 + a[1][3] * v3;
        c2[j] += a[2][0] * v0 + a[2][1] * v1 + a[2][2] * v2 + a[2][3] * v3;
        c3[j] += a[3][0] * v0 + a[3][1] * v1 + a[3][2] * v2 + a[3][3] * v3;
    }
}

/// Four C rows += coefficient column times one B row.
#[inline]
fn quad_axpy1<T: Scalar>(
    c0: &mut [T],
    c1: &mut [T],
    c2: &mut [T],
    c3: &mut [T],
    a: [T; 4],
    b: &[T],
) {
    let n = c0.len();
    let b = &b[..n];
    let (c1, c2, c3) = (&mut c1[..n], &mut c2[..n], &mut c3[..n]);
    for j in 0..n {
        let v = b[j];
        c0[j] += a[0] * v;
        c1[j] += a[1] * v;
        c2[j] += a[2] * v;
        c3[j] += a[3] * v;
    }
}

#[inline]
fn axpy4<T: Scalar>(c: &mut [T], a: [T; 4], b0: &[T], b1: &[T], b2: &[T], b3: &[T]) {
    let n = c.len();
    let (b0, b1, b2, b3) = (&b0[..n], &b1[..n], &b2[..n], &b3[..n]);
    for j in 0..n {
        c[j] += a[0] * b0[j] + a[1] * b1[j] + a[2] * b2[j] + a[3] * b3[j];
    }
}

#[inline]
fn axpy1<T: Scalar>(c: &mut [T], a: T, b: &[T]) {
    for (cv, &bv) in c.iter_mut().zip(b.iter()) {
        *cv += a * bv;
    }
}

/// `C(m x n) += A(m x k) * B(k x n)`, all row-major. `coef(r, p)` supplies
/// `A[i0 + r][p0 + p]` so the transposed layout can share the body.
#[inline]
fn gemm_body<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    coef: impl Fn(usize, usize, usize) -> T,
    b: &[T],
    c: &mut [T],
) {
    for j0 in (0..n).step_by(NB) {
        let jw = NB.min(n - j0);
        for p0 in (0..k).step_by(KB) {
            let pw = KB.min(k - p0);
            let mut i = 0;
            while i + 4 <= m {
                let (r0, r1, r2, r3) = split4(&mut c[i * n..(i + 4) * n], n);
                let c0 = &mut r0[j0..j0 + jw];
                let c1 = &mut r1[j0..j0 + jw];
                let c2 = &mut r2[j0..j0 + jw];
                let c3 = &mut r3[j0..j0 + jw];
                let mut p = 0;
                while p + 4 <= pw {
                    let base = (p0 + p) * n + j0;
                    let tile = [
                        [coef(i, p0, p), coef(i, p0, p + 1), coef(i, p0, p + 2), coef(i, p0, p + 3)],
                        [
                            coef(i + 1, p0, p),
                            coef(i + 1, p0, p + 1),
                            coef(i + 1, p0, p + 2),
                            coef(i + 1, p0, p + 3),
                        ],
                        [
                            coef(i + 2, p0, p),
                            coef(i + 2, p0, p + 1),
                            coef(i + 2, p0, p + 2),
                            coef(i + 2, p0, p + 3),
                        ],
                        [
                            coef(i + 3, p0, p),
                            coef(i + 3, p0, p + 1),
                            coef(i + 3, p0, p + 2),
                            coef(i + 3, p0, p + 3),
                        ],
                    ];
                    quad_axpy4(
                        c0,
                        c1,
                        c2,
                        c3,
                        tile,
                        &b[base..base + jw],
                        &b[base + n..base + n + jw],
                        &b[base + 2 * n..base + 2 * n + jw],
                        &b[base + 3 * n..base + 3 * n + jw],
                    );
                    p += 4;
                }
                while p < pw {
                    let base = (p0 + p) * n + j0;
                    let col = [
                        coef(i, p0, p),
                        coef(i + 1, p0, p),
                        coef(i + 2, p0, p),
                        coef(i + 3, p0, p),
                    ];
                    quad_axpy1(c0, c1, c2, c3, col, &b[base..base + jw]);
                    p += 1;
                }
                i += 4;
            }
            while i < m {
                let crow = &mut c[i * n + j0..i * n + j0 + jw];
                let mut p = 0;
                while p + 4 <= pw {
                    let base = (p0 + p) * n + j0;
                    let co = [coef(i, p0, p), coef(i, p0, p + 1), coef(i, p0, p + 2), coef(i, p0, p + 3)];
                    axpy4(
                        crow,
                        co,
                        &b[base..base + jw],
                        &b[base + n..base + n + jw],
                        &b[base + 2 * n..base + 2 * n + jw],
                        &b[base + 3 * n..base + 3 * n + jw],
                    );
                    p += 4;
                }
                while p < pw {
                    let base = (p0 + p) * n + j0;
                    axpy1(crow, coef(i, p0, p), &b[base..base + jw]);
                    p += 1;
                }
                i += 1;
            }
        }
    }
}

/// `C(m x n) += A(m x k) * B(k x n)`, all row-major.
pub fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_body(m, k, n, |i, p0, p| a[i * k + p0 + p], b, c);
}

/// `C(m x n) += A(k x m)^T * B(k x n)`: `C[i] += sum_p A[p][i] * B[p]`.
pub fn gemm_atb<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_body(m, k, n, |i, p0, p| a[(p0 + p) * m + i], b, c);
}

const LANES: usize = 16;

/// `C(m x n) += A(m x k) * B(n x k)^T`: `C[i][j] += dot(A row i, B row j)`.
/// Two A rows share each pass over four B rows.
pub fn gemm_abt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let mut i = 0;
    while i + 2 <= m {
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let (c0, c1) = c[i * n..(i + 2) * n].split_at_mut(n);
        let mut j = 0;
        while j + 4 <= n {
            let d = dot2x4(
                a0,
                a1,
                &b[j * k..(j + 1) * k],
                &b[(j + 1) * k..(j + 2) * k],
                &b[(j + 2) * k..(j + 3) * k],
                &b[(j + 3) * k..(j + 4) * k],
            );
            for s in 0..4 {
                c0[j + s] += d[0][s];
                c1[j + s] += d[1][s];
            }
            j += 4;
        }
        while j < n {
            let brow = &b[j * k..(j + 1) * k];
            c0[j] += dot1(a0, brow);
            c1[j] += dot1(a1, brow);
            j += 1;
        }
        i += 2;
    }
    while i < m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        let mut j = 0;
        while j + 4 <= n {
            let d = dot2x4(
                arow,
                arow,
                &b[j * k..(j + 1) * k],
                &b[(j + 1) * k..(j + 2) * k],
                &b[(j + 2) * k..(j + 3) * k],
                &b[(j + 3) * k..(j + 4) * k],
            );
            for s in 0..4 {
                crow[j + s] += d[0][s];
            }
            j += 4;
        }
        while j < n {
            crow[j] += dot1(arow, &b[j * k..(j + 1) * k]);
            j += 1;
        }
        i += 1;
    }
}

/// Eight dot products: two A rows against four B rows, one shared pass.
/// Lane accumulators keep each output's reduction order fixed while still
/// vectorizing.
#[inline]
fn dot2x4<T: Scalar>(a0: &[T], a1: &[T], b0: &[T], b1: &[T], b2: &[T], b3: &[T]) -> [[T; 4]; 2] {
    let mut acc = [[[T::zero(); LANES]; 4]; 2];
    let mut ca0 = a0.chunks_exact(LANES);
    let mut ca1 = a1.chunks_exact(LANES);
    let mut c0 = b0.chunks_exact(LANES);
    let mut c1 = b1.chunks_exact(LANES);
    let mut c2 = b2.chunks_exact(LANES);
    let mut c3 = b3.chunks_exact(LANES);
    loop {
        let (Some(xa0), Some(xa1), Some(x0), Some(x1), Some(x2), Some(x3)) =
            (ca0.next(), ca1.next(), c0.next(), c1.next(), c2.next(), c3.next())
        else {
            break;
        };
        for l in 0..LANES {
            acc[0][0][l] += xa0[l] * x0[l];
            acc[0][1][l] += xa0[l] * x1[l];
            acc[0][2][l] += xa0[l] * x2[l];
            acc[0][3][l] += xa0[l] * x3[l];
            acc[1][0][l] += xa1[l] * x0[l];
            acc[1][1][l] += xa1[l] * x1[l];
            acc[1][2][l] += xa1[l] * x2[l];
            acc[1][3][l] += xa1[l] * x3[l];
        }
    }
    let mut out = [[T::zero(); 4]; 2];
    for r in 0..2 {
        for s in 0..4 {
            let mut total = T::zero();
            for &v in &acc[r][s] {
                total += v;
            }
            out[r][s] = total;
        }
    }
    let ra = [ca0.remainder(), ca1.remainder()];
    let rb = [c0.remainder(), c1.remainder(), c2.remainder(), c3.remainder()];
    for r in 0..2 {
        for s in 0..4 {
            for (l, &xa) in ra[r].iter().enumerate() {
                out[r][s] += xa * rb[s][l];
            }
        }
    }
    out
}

#[inline]
fn dot1<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (xa, xb) in ca.by_ref().zip(cb.by_ref()) {
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut s = T::zero();
    for &v in &acc {
        s += v;
    }
    for (&xa, &xb) in ca.remainder().iter().zip(cb.remainder().iter()) {
        s += xa * xb;
    }
    s
}
