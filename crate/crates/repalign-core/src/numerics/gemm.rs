//! Matrix multiply kernels. Everything is expressed in the row-broadcast
//! form `c[i] += a[i][l] * b[l]` because that is the only form the
//! autovectorizer turns into wide FMA here; transposed operands are
//! materialized into scratch first (the transposed side is always the small
//! weight matrix, so the copy is noise next to the multiply).

use alloc::vec::Vec;

/// c[m,n] += a[m,k] * b[k,n].
pub fn gemm_nn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        let mut l = 0;
        while l + 4 <= k {
            let a0 = a_row[l];
            let a1 = a_row[l + 1];
            let a2 = a_row[l + 2];
            let a3 = a_row[l + 3];
            let b0 = &b[l * n..(l + 1) * n];
            let b1 = &b[(l + 1) * n..(l + 2) * n];
            let b2 = &b[(l + 2) * n..(l + 3) * n];
            let b3 = &b[(l + 3) * n..(l + 4) * n];
            for j in 0..n {
                c_row[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            l += 4;
        }
        while l < k {
            let al = a_row[l];
            let b_row = &b[l * n..(l + 1) * n];
            for j in 0..n {
                c_row[j] += al * b_row[j];
            }
            l += 1;
        }
    }
}

/// c[k,n] += a^T * d where a is [m,k] and d is [m,n] (weight-gradient form).
/// Streams d once per input row while c stays cache-resident; four output
/// rows per pass give the FMA units independent chains.
pub fn gemm_tn(a: &[f32], d: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(d.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let d_row = &d[i * n..(i + 1) * n];
        let mut l = 0;
        while l + 4 <= k {
            let (a0, a1, a2, a3) = (a_row[l], a_row[l + 1], a_row[l + 2], a_row[l + 3]);
            let (c0, rest) = c[l * n..(l + 4) * n].split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3) = rest.split_at_mut(n);
            for j in 0..n {
                let dj = d_row[j];
                c0[j] += a0 * dj;
                c1[j] += a1 * dj;
                c2[j] += a2 * dj;
                c3[j] += a3 * dj;
            }
            l += 4;
        }
        while l < k {
            let al = a_row[l];
            let c_row = &mut c[l * n..(l + 1) * n];
            for j in 0..n {
                c_row[j] += al * d_row[j];
            }
            l += 1;
        }
    }
}

/// out[n,m] = transpose of x[m,n].
pub fn transpose(x: &[f32], m: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(x.len(), m * n);
    let mut out = alloc::vec![0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

/// c[m,n] += a[m,k] * b^T where b is [n,k]: materializes b^T then runs nn.
pub fn gemm_nt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    gemm_nn(a, &bt, c, m, k, n);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = alloc::vec![0f32; m * n];
        for i in 0..m {
            for l in 0..k {
                for j in 0..n {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    fn fill(n: usize, seed: u64) -> Vec<f32> {
        let mut r = crate::numerics::rng::Rng::for_counter(seed, crate::numerics::rng::Stream::Test, 0);
        (0..n).map(|_| r.uniform(-1.0, 1.0)).collect()
    }

    #[test]
    fn nn_matches_naive_on_odd_shapes() {
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 7), (4, 4, 4), (2, 9, 1), (7, 3, 13)] {
            let a = fill(m * k, 1);
            let b = fill(k * n, 2);
            let mut c = alloc::vec![0f32; m * n];
            gemm_nn(&a, &b, &mut c, m, k, n);
            let want = naive(&a, &b, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() <= 1e-5 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn tn_matches_transposed_naive() {
        let (m, k, n) = (6, 4, 5);
        let a = fill(m * k, 3);
        let d = fill(m * n, 4);
        let mut c = alloc::vec![0f32; k * n];
        gemm_tn(&a, &d, &mut c, m, k, n);
        let at = transpose(&a, m, k);
        let want = naive(&at, &d, k, m, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() <= 1e-5 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn nt_matches_naive() {
        let (m, k, n) = (5, 7, 3);
        let a = fill(m * k, 5);
        let b = fill(n * k, 6);
        let mut c = alloc::vec![0f32; m * n];
        gemm_nt(&a, &b, &mut c, m, k, n);
        let bt = transpose(&b, n, k);
        let want = naive(&a, &bt, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() <= 1e-5 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn transpose_round_trip() {
        let x = fill(12, 7);
        let t = transpose(&x, 3, 4);
        let back = transpose(&t, 4, 3);
        assert_eq!(x, back);
    }
}
