//! Fréchet distance between Gaussian fits of two feature sets:
//! |mu_A - mu_B|^2 + tr(S_A + S_B - 2 (S_A S_B)^{1/2}).
//!
//! The cross term is computed as tr(sqrt(S_A^{1/2} S_B S_A^{1/2})), which is
//! symmetric PSD up to roundoff, via a cyclic Jacobi eigensolver in f64.
//! Covariances get a +1e-6 I ridge before the square root; tiny negative
//! eigenvalues and a tiny negative total are clamped to zero.

use crate::error::{contract_err, Error, Result};
use crate::metrics::FeatureSet;
use alloc::vec;
use alloc::vec::Vec;

const RIDGE: f64 = 1e-6;

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors) with eigenvector j stored in column
/// j of the returned row-major matrix.
fn jacobi_eigh(mut a: Vec<f64>, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut v = vec![0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().max(1e-300);
    let tol = 1e-24 * scale;
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| (p + 1..n).map(move |q| (p, q)))
            .map(|(p, q)| a[p * n + q] * a[p * n + q])
            .sum();
        if off <= tol {
            let vals: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
            if vals.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { op: "jacobi_eigh" });
            }
            return Ok((vals, v));
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let tau = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + libm::sqrt(1.0 + tau * tau))
                } else {
                    -1.0 / (-tau + libm::sqrt(1.0 + tau * tau))
                };
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = t * c;
                for i in 0..n {
                    let (aip, aiq) = (a[i * n + p], a[i * n + q]);
                    a[i * n + p] = c * aip - s * aiq;
                    a[i * n + q] = s * aip + c * aiq;
                }
                for j in 0..n {
                    let (apj, aqj) = (a[p * n + j], a[q * n + j]);
                    a[p * n + j] = c * apj - s * aqj;
                    a[q * n + j] = s * apj + c * aqj;
                }
                for i in 0..n {
                    let (vip, viq) = (v[i * n + p], v[i * n + q]);
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }
    Err(Error::NonFinite { op: "jacobi_eigh" })
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0f64; n * n];
    for i in 0..n {
        for l in 0..n {
            let al = a[i * n + l];
            if al == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += al * b[l * n + j];
            }
        }
    }
    c
}

/// V diag(f(lambda)) V^T for a symmetric input.
fn symmetric_apply(a: &[f64], n: usize, f: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    let (vals, vecs) = jacobi_eigh(a.to_vec(), n)?;
    let mut out = vec![0f64; n * n];
    for k in 0..n {
        let fk = f(vals[k]);
        if !fk.is_finite() {
            return Err(Error::NonFinite { op: "frechet_distance" });
        }
        for i in 0..n {
            let vik = vecs[i * n + k];
            for j in 0..n {
                out[i * n + j] += fk * vik * vecs[j * n + k];
            }
        }
    }
    Ok(out)
}

/// Sample mean and covariance (1/(M-1) normalization) in f64.
pub fn moments(set: &FeatureSet) -> (Vec<f64>, Vec<f64>) {
    let (m, d) = (set.len(), set.dim());
    let rows = set.features.data();
    let mut mu = vec![0f64; d];
    for i in 0..m {
        for j in 0..d {
            mu[j] += rows[i * d + j] as f64;
        }
    }
    mu.iter_mut().for_each(|x| *x /= m as f64);
    let mut cov = vec![0f64; d * d];
    for i in 0..m {
        for p in 0..d {
            let cp = rows[i * d + p] as f64 - mu[p];
            for q in p..d {
                cov[p * d + q] += cp * (rows[i * d + q] as f64 - mu[q]);
            }
        }
    }
    let denom = (m - 1).max(1) as f64;
    for p in 0..d {
        for q in p..d {
            cov[p * d + q] /= denom;
            cov[q * d + p] = cov[p * d + q];
        }
    }
    (mu, cov)
}

/// Fréchet distance from explicit Gaussian moments.
pub fn frechet_from_moments(
    mu_a: &[f64],
    cov_a: &[f64],
    mu_b: &[f64],
    cov_b: &[f64],
) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.len() != d * d || cov_b.len() != d * d {
        return contract_err("frechet_distance", "moment dimensions disagree");
    }
    let mut ca = cov_a.to_vec();
    let mut cb = cov_b.to_vec();
    for i in 0..d {
        ca[i * d + i] += RIDGE;
        cb[i * d + i] += RIDGE;
    }
    let half_a = symmetric_apply(&ca, d, |l| libm::sqrt(l.max(0.0)))?;
    let inner = matmul(&half_a, &matmul(&cb, &half_a, d), d);
    // Symmetrize before the eigensolve: roundoff breaks exact symmetry.
    let mut sym = inner.clone();
    for i in 0..d {
        for j in 0..d {
            sym[i * d + j] = 0.5 * (inner[i * d + j] + inner[j * d + i]);
        }
    }
    let (vals, _) = jacobi_eigh(sym, d)?;
    let tr_cross: f64 = vals.iter().map(|&l| libm::sqrt(l.max(0.0))).sum();
    let tr_a: f64 = (0..d).map(|i| ca[i * d + i]).sum();
    let tr_b: f64 = (0..d).map(|i| cb[i * d + i]).sum();
    let mean_sq: f64 = mu_a.iter().zip(mu_b).map(|(&a, &b)| (a - b) * (a - b)).sum();
    let fd = mean_sq + tr_a + tr_b - 2.0 * tr_cross;
    if !fd.is_finite() {
        return Err(Error::NonFinite { op: "frechet_distance" });
    }
    Ok(fd.max(0.0))
}

/// Fréchet distance between Gaussian fits of two pooled feature sets.
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return contract_err("frechet_distance", "feature widths disagree");
    }
    let (mu_a, cov_a) = moments(a);
    let (mu_b, cov_b) = moments(b);
    frechet_from_moments(&mu_a, &cov_a, &mu_b, &cov_b)
}
