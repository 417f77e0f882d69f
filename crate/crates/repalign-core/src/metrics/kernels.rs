//! Kernel alignment: HSIC, CKA, and the nearest-neighbor-masked variant.
//!
//! All sums accumulate in f64. HSIC here is the row-centered cross-sum
//! (1/(n-1)^2) sum_ij (K_ij - mean_l K_il)(L_ij - mean_l L_il); the masked
//! variant multiplies each summand by the mutual-kNN indicator
//! 1[i != j, phi_j in knn(phi_i; k), psi_j in knn(psi_i; k)] with
//! neighborhoods ranked by inner-product similarity, self excluded, ties
//! broken toward the lower index.

use crate::error::{contract_err, degenerate_err, shape_err, Result};
use crate::metrics::FeatureSet;
use alloc::vec;
use alloc::vec::Vec;

/// Symmetric inner-product kernel over feature rows, f64 entries.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    m: usize,
    entries: Vec<f64>,
}

impl KernelMatrix {
    pub fn from_features(set: &FeatureSet) -> Self {
        let (m, d) = (set.len(), set.dim());
        let rows = set.features.data();
        let mut entries = vec![0f64; m * m];
        for i in 0..m {
            for j in i..m {
                let mut acc = 0f64;
                for t in 0..d {
                    acc += rows[i * d + t] as f64 * rows[j * d + t] as f64;
                }
                entries[i * m + j] = acc;
                entries[j * m + i] = acc;
            }
        }
        KernelMatrix { m, entries }
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.m + j]
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.m..(i + 1) * self.m]
    }

    fn row_means(&self) -> Vec<f64> {
        (0..self.m).map(|i| self.row(i).iter().sum::<f64>() / self.m as f64).collect()
    }
}

fn check_pair(k: &KernelMatrix, l: &KernelMatrix, op: &'static str) -> Result<()> {
    if k.m != l.m {
        return shape_err(op, "kernel matrices have different sizes");
    }
    if k.m < 2 {
        return contract_err(op, "need at least two samples");
    }
    Ok(())
}

/// Row-centered cross-sum with 1/(n-1)^2 normalization.
pub fn hsic(k: &KernelMatrix, l: &KernelMatrix) -> Result<f64> {
    check_pair(k, l, "hsic")?;
    let m = k.m;
    let km = k.row_means();
    let lm = l.row_means();
    let mut acc = 0f64;
    for i in 0..m {
        let (kr, lr) = (k.row(i), l.row(i));
        for j in 0..m {
            acc += (kr[j] - km[i]) * (lr[j] - lm[i]);
        }
    }
    Ok(acc / ((m - 1) as f64 * (m - 1) as f64))
}

/// hsic(K,L) / sqrt(hsic(K,K) hsic(L,L)).
pub fn cka(k: &KernelMatrix, l: &KernelMatrix) -> Result<f64> {
    check_pair(k, l, "cka")?;
    let kk = hsic(k, k)?;
    let ll = hsic(l, l)?;
    // <= catches the degenerate case, is_nan the incomparable one.
    if kk <= 0.0 || ll <= 0.0 || kk.is_nan() || ll.is_nan() {
        return degenerate_err("cka", "self-alignment is not positive (constant features?)");
    }
    Ok(hsic(k, l)? / libm::sqrt(kk * ll))
}

/// For each row: the k most similar other columns (ties to lowest index),
/// returned as a boolean membership row.
fn knn_mask(kern: &KernelMatrix, k: usize) -> Vec<bool> {
    let m = kern.m;
    let mut mask = vec![false; m * m];
    let mut order: Vec<usize> = Vec::with_capacity(m - 1);
    for i in 0..m {
        order.clear();
        order.extend((0..m).filter(|&j| j != i));
        let row = kern.row(i);
        order.sort_by(|&a, &b| {
            row[b].partial_cmp(&row[a]).expect("finite kernel").then(a.cmp(&b))
        });
        for &j in order.iter().take(k) {
            mask[i * m + j] = true;
        }
    }
    mask
}

/// Row-centered cross-sum restricted to entries where both masks agree.
fn masked_align(k: &KernelMatrix, l: &KernelMatrix, mk: &[bool], ml: &[bool]) -> f64 {
    let m = k.m;
    let km = k.row_means();
    let lm = l.row_means();
    let mut acc = 0f64;
    for i in 0..m {
        let (kr, lr) = (k.row(i), l.row(i));
        for j in 0..m {
            if mk[i * m + j] && ml[i * m + j] {
                acc += (kr[j] - km[i]) * (lr[j] - lm[i]);
            }
        }
    }
    acc / ((m - 1) as f64 * (m - 1) as f64)
}

/// Alignment restricted to mutual k-nearest neighborhoods, normalized by
/// the self terms computed under each set's own neighborhood mask.
pub fn cknna(phi: &FeatureSet, psi: &FeatureSet, k: usize) -> Result<f64> {
    let m = phi.len();
    if psi.len() != m {
        return shape_err("cknna", "feature sets have different sample counts");
    }
    if m < 2 {
        return contract_err("cknna", "need at least two samples");
    }
    if k == 0 || k >= m {
        return contract_err("cknna", "need 1 <= k < sample count");
    }
    let kk = KernelMatrix::from_features(phi);
    let ll = KernelMatrix::from_features(psi);
    let mk = knn_mask(&kk, k);
    let ml = knn_mask(&ll, k);
    let cross = masked_align(&kk, &ll, &mk, &ml);
    let self_k = masked_align(&kk, &kk, &mk, &mk);
    let self_l = masked_align(&ll, &ll, &ml, &ml);
    if self_k <= 0.0 || self_l <= 0.0 || self_k.is_nan() || self_l.is_nan() {
        return degenerate_err("cknna", "masked self-alignment is not positive");
    }
    Ok(cross / libm::sqrt(self_k * self_l))
}
