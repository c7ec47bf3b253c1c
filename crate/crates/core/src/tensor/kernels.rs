//! Row-major matrix kernels shared by forward and backward passes.

use super::real::Real;

/// out[m,n] += a[m,k] * b[k,n]
pub fn mm_nn<E: Real>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T  (dot-product form)
pub fn mm_nt<E: Real>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in o_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = E::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out[m,n] += a[k,m]^T * b[k,n]
pub fn mm_tn<E: Real>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let o_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[n,m] = a[m,n]^T
pub fn transpose_into<E: Real>(a: &[E], m: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}

/// Numerically stable softmax over each length-`n` row, in place.
pub fn softmax_rows_inplace<E: Real>(data: &mut [E], rows: usize, n: usize) {
    debug_assert_eq!(data.len(), rows * n);
    for r in 0..rows {
        let row = &mut data[r * n..(r + 1) * n];
        let mut max = E::neg_infinity();
        for &x in row.iter() {
            max = max.maximum(x);
        }
        let mut sum = E::ZERO;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x = *x / sum;
        }
    }
}

/// log(sum(exp(row))) for one row.
pub fn log_sum_exp<E: Real>(row: &[E]) -> E {
    let mut max = E::neg_infinity();
    for &x in row {
        max = max.maximum(x);
    }
    let mut sum = E::ZERO;
    for &x in row {
        sum += (x - max).exp();
    }
    max + sum.ln()
}
