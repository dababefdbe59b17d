//! Raw matrix kernels shared by forward and backward passes.
//!
//! All matrices are row-major slices. The `ikj` loop order keeps the inner
//! loop contiguous in both the output row and the `b` row so it vectorizes.

/// c += a[m x k] * b[k x n]
pub fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aik * bj;
            }
        }
    }
}

/// c += a[m x k] * b[n x k]^T
pub fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            c_row[j] += acc;
        }
    }
}

/// c += a[k x m]^T * b[k x n]
pub fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * n..(kk + 1) * n];
        for (i, &aki) in a_row.iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aki * bj;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(m: usize, n: usize, f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
        (0..m * n).map(|idx| f(idx / n, idx % n)).collect()
    }

    #[test]
    fn kernels_agree_on_random_case() {
        let (m, k, n) = (3, 4, 5);
        let a = dense(m, k, |i, j| (i * 7 + j * 3) as f64 * 0.1 - 0.8);
        let b = dense(k, n, |i, j| (i * 5 + j * 2) as f64 * 0.07 - 0.5);

        let mut c_nn = vec![0.0; m * n];
        mm_nn(&a, &b, &mut c_nn, m, k, n);

        // a * b == a * (b^T)^T
        let bt = dense(n, k, |i, j| b[j * n + i]);
        let mut c_nt = vec![0.0; m * n];
        mm_nt(&a, &bt, &mut c_nt, m, k, n);

        // a * b == (a^T)^T * b
        let at = dense(k, m, |i, j| a[j * k + i]);
        let mut c_tn = vec![0.0; m * n];
        mm_tn(&at, &b, &mut c_tn, m, k, n);

        for i in 0..m * n {
            assert!((c_nn[i] - c_nt[i]).abs() < 1e-12);
            assert!((c_nn[i] - c_tn[i]).abs() < 1e-12);
        }
    }
}
