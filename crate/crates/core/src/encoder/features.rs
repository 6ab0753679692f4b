//! Hashed character n-gram features.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::util::mix64;

/// Sparse, L2-normalized feature vector. `indices` are strictly increasing.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureVector {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
    pub dim: u32,
}

impl FeatureVector {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_zero(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashSpec {
    pub ngram_min: u32,
    pub ngram_max: u32,
    pub seed: u64,
    /// Feature dimension F; a power of two.
    pub n_features: u32,
}

impl Default for HashSpec {
    fn default() -> Self {
        Self {
            ngram_min: 3,
            ngram_max: 5,
            seed: 0x5EED,
            n_features: 1 << 14,
        }
    }
}

impl HashSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.ngram_min == 0 || self.ngram_min > self.ngram_max {
            return Err(format!("invalid n-gram orders {}..={}", self.ngram_min, self.ngram_max));
        }
        if !self.n_features.is_power_of_two() {
            return Err(format!("feature dimension {} is not a power of two", self.n_features));
        }
        Ok(())
    }

    fn bucket(&self, gram: &str) -> u32 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.seed;
        for b in gram.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        (mix64(h) & u64::from(self.n_features - 1)) as u32
    }
}

/// Count hashed character n-grams of the lowercased text and L2-normalize.
/// Text shorter than the smallest order contributes itself as one gram.
pub fn featurize(spec: &HashSpec, text: &str) -> FeatureVector {
    if text.is_empty() {
        return FeatureVector {
            dim: spec.n_features,
            ..Default::default()
        };
    }
    let lower = text.to_lowercase();
    let bounds: Vec<usize> = lower
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(lower.len()))
        .collect();
    let n_chars = bounds.len() - 1;
    let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
    for n in spec.ngram_min..=spec.ngram_max {
        let n = n as usize;
        if n > n_chars {
            break;
        }
        for start in 0..=(n_chars - n) {
            let gram = &lower[bounds[start]..bounds[start + n]];
            *counts.entry(spec.bucket(gram)).or_insert(0.0) += 1.0;
        }
    }
    if counts.is_empty() {
        counts.insert(spec.bucket(&lower), 1.0);
    }
    let norm = counts.values().map(|v| v * v).sum::<f64>().sqrt();
    let (indices, values) = counts.into_iter().map(|(i, v)| (i, v / norm)).unzip();
    FeatureVector {
        indices,
        values,
        dim: spec.n_features,
    }
}
