//! Representation analysis: kernel alignment, linear probing, and
//! feature-space Fréchet distance, all over pooled per-sample features.

pub mod frechet;
pub mod kernels;
pub mod probe;

pub use frechet::{frechet_distance, frechet_from_moments, moments};
pub use kernels::{cka, cknna, hsic, KernelMatrix};
pub use probe::{linear_probe, ProbeConfig};

use crate::error::{contract_err, shape_err, Result};
use crate::numerics::tensor::Tensor;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// Pooled representations, one row per sample, tagged with where they came
/// from (source model, layer, diffusion time).
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub features: Tensor,
    pub source: String,
    pub layer: usize,
    pub t: f32,
}

impl FeatureSet {
    pub fn new(features: Tensor, source: &str, layer: usize, t: f32) -> Result<Self> {
        if features.shape().len() != 2 {
            return shape_err("feature_set", "expected [samples, width]");
        }
        if features.shape()[0] < 2 {
            return contract_err("feature_set", "need at least two samples");
        }
        if !features.is_finite() {
            return contract_err("feature_set", "non-finite feature values");
        }
        Ok(FeatureSet { features, source: String::from(source), layer, t })
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Mean over the patch axis: [M, N, D] -> [M, D].
pub fn mean_pool(patch_features: &Tensor) -> Result<Tensor> {
    let s = patch_features.shape();
    if s.len() != 3 {
        return shape_err("mean_pool", "expected [samples, patches, width]");
    }
    let (m, n, d) = (s[0], s[1], s[2]);
    let src = patch_features.data();
    let mut out = vec![0f32; m * d];
    let inv = 1.0 / n as f64;
    for i in 0..m {
        for j in 0..d {
            let mut acc = 0f64;
            for p in 0..n {
                acc += src[i * n * d + p * d + j] as f64;
            }
            out[i * d + j] = (acc * inv) as f32;
        }
    }
    Tensor::new(&[m, d], out)
}

/// Per-feature z-score using the set's own statistics (std floored at 1e-6
/// so constant columns map to zero instead of exploding).
pub fn standardize(features: &Tensor) -> Result<Tensor> {
    let s = features.shape();
    if s.len() != 2 {
        return shape_err("standardize", "expected [samples, width]");
    }
    let (m, d) = (s[0], s[1]);
    if m < 2 {
        return contract_err("standardize", "need at least two samples");
    }
    let src = features.data();
    let mut out = vec![0f32; m * d];
    for j in 0..d {
        let mut mean = 0f64;
        for i in 0..m {
            mean += src[i * d + j] as f64;
        }
        mean /= m as f64;
        let mut var = 0f64;
        for i in 0..m {
            let c = src[i * d + j] as f64 - mean;
            var += c * c;
        }
        let std = libm::sqrt(var / m as f64).max(1e-6);
        for i in 0..m {
            out[i * d + j] = ((src[i * d + j] as f64 - mean) / std) as f32;
        }
    }
    Tensor::new(&[m, d], out)
}

/// The standard preparation for kernel alignment: mean-pool patches, then
/// standardize each feature across the set.
pub fn pooled_standardized(
    patch_features: &Tensor,
    source: &str,
    layer: usize,
    t: f32,
) -> Result<FeatureSet> {
    FeatureSet::new(standardize(&mean_pool(patch_features)?)?, source, layer, t)
}

/// One evaluated (layer, t, k) cell of an alignment sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentRow {
    pub layer: usize,
    pub t: f32,
    pub k: usize,
    pub cka: f64,
    pub cknna: f64,
}

#[derive(Debug, Clone, Default)]
pub struct KernelAlignmentReport {
    pub rows: Vec<AlignmentRow>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_pool_averages_patches() {
        let x = Tensor::new(&[1, 2, 3], vec![1.0, 2.0, 3.0, 3.0, 6.0, 9.0]).unwrap();
        let p = mean_pool(&x).unwrap();
        assert_eq!(p.shape(), &[1, 3]);
        assert_eq!(p.data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn standardize_gives_unit_columns_and_kills_constants() {
        let x = Tensor::new(&[4, 2], vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 4.0, 5.0]).unwrap();
        let z = standardize(&x).unwrap();
        let col0: Vec<f32> = (0..4).map(|i| z.data()[i * 2]).collect();
        let mean: f32 = col0.iter().sum::<f32>() / 4.0;
        let var: f32 = col0.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-5);
        for i in 0..4 {
            assert_eq!(z.data()[i * 2 + 1], 0.0, "constant column maps to zero");
        }
    }

    #[test]
    fn feature_set_rejects_bad_inputs() {
        assert!(FeatureSet::new(Tensor::zeros(&[1, 4]), "s", 0, 0.0).is_err());
        assert!(FeatureSet::new(Tensor::zeros(&[4]), "s", 0, 0.0).is_err());
        let mut bad = Tensor::zeros(&[3, 2]);
        bad.data_mut()[0] = f32::NAN;
        assert!(FeatureSet::new(bad, "s", 0, 0.0).is_err());
    }
}
