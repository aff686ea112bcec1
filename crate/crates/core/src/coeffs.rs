//! K-sparse simplex coefficients over a codebook of L atoms.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tolerance on the simplex sum accepted by validation.
pub const SUM_TOLERANCE: f64 = 1e-6;

/// Largest codebook size addressable by the on-disk `u16` index type.
pub const MAX_ATOMS: usize = u16::MAX as usize + 1;

/// Top-K representation of an L-dimensional simplex vector: two parallel
/// K-arrays, indices strictly ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseCoefficients {
    indices: Vec<u16>,
    values: Vec<f32>,
}

impl SparseCoefficients {
    /// Builds from parallel arrays, sorting entries by index. Fails on
    /// duplicate indices, negative or non-finite values, or a sum off 1.
    pub fn new(indices: Vec<u16>, values: Vec<f32>) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(Error::DimensionMismatch {
                what: "coefficient values",
                expected: indices.len(),
                actual: values.len(),
            });
        }
        if indices.is_empty() {
            return Err(Error::validation("coefficients need at least one entry"));
        }
        let mut pairs: Vec<(u16, f32)> = indices.into_iter().zip(values).collect();
        pairs.sort_by_key(|&(i, _)| i);
        if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::validation("duplicate coefficient index"));
        }
        let (indices, values): (Vec<u16>, Vec<f32>) = pairs.into_iter().unzip();
        let coeffs = Self { indices, values };
        coeffs.check_simplex()?;
        Ok(coeffs)
    }

    /// Single entry with weight one.
    pub fn one_hot(index: u16) -> Self {
        Self {
            indices: vec![index],
            values: vec![1.0],
        }
    }

    /// One-hot on `index`, padded with zero-weight entries on the lowest
    /// other indices so exactly `k` entries are stored.
    pub fn one_hot_k(index: u16, k: usize, num_atoms: usize) -> Result<Self> {
        if k == 0 || k > num_atoms || index as usize >= num_atoms {
            return Err(Error::validation(format!(
                "one-hot index {index} with k={k} does not fit L={num_atoms}"
            )));
        }
        let mut dense = vec![0.0f32; num_atoms];
        dense[index as usize] = 1.0;
        compact(&dense, k)
    }

    pub(crate) fn from_sorted_unchecked(indices: Vec<u16>, values: Vec<f32>) -> Self {
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        Self { indices, values }
    }

    pub fn indices(&self) -> &[u16] {
        &self.indices
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Number of stored entries (K).
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f32)> + '_ {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&i, &v)| (i as usize, v))
    }

    fn check_simplex(&self) -> Result<()> {
        if self.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::validation(
                "coefficient values must be finite and non-negative",
            ));
        }
        let sum: f64 = self.values.iter().map(|&v| v as f64).sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::validation(format!(
                "coefficient values sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }

    /// Full invariant check against a codebook size and expected K.
    pub fn validate(&self, num_atoms: usize, k: usize) -> Result<()> {
        if self.len() != k {
            return Err(Error::DimensionMismatch {
                what: "stored coefficient count (K)",
                expected: k,
                actual: self.len(),
            });
        }
        self.validate_indices(num_atoms)?;
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation(
                "coefficient indices must be strictly increasing",
            ));
        }
        self.check_simplex()
    }

    pub fn validate_indices(&self, num_atoms: usize) -> Result<()> {
        match self.indices.iter().find(|&&i| i as usize >= num_atoms) {
            Some(&i) => Err(Error::validation(format!(
                "coefficient index {i} out of range for L={num_atoms}"
            ))),
            None => Ok(()),
        }
    }
}

/// Expands to a dense L-vector with the stored values at their indices.
pub fn densify(coeffs: &SparseCoefficients, num_atoms: usize) -> Result<Vec<f32>> {
    coeffs.validate_indices(num_atoms)?;
    let mut dense = vec![0.0f32; num_atoms];
    for (i, v) in coeffs.iter() {
        dense[i] = v;
    }
    Ok(dense)
}

/// Keeps the `k` largest entries of a dense simplex vector (ties to the lower
/// index) and stores them in ascending index order. Values are kept as-is;
/// the input is expected to already have at most `k` nonzeros.
pub fn compact(dense: &[f32], k: usize) -> Result<SparseCoefficients> {
    if k == 0 || k > dense.len() {
        return Err(Error::validation(format!(
            "k={k} must lie in 1..={}",
            dense.len()
        )));
    }
    if dense.len() > MAX_ATOMS {
        return Err(Error::validation(format!(
            "L={} exceeds the addressable maximum {MAX_ATOMS}",
            dense.len()
        )));
    }
    let kept = top_k_indices(dense, k);
    let values = kept.iter().map(|&i| dense[i]).collect();
    let indices = kept.into_iter().map(|i| i as u16).collect();
    SparseCoefficients::new(indices, values)
}

/// Indices of the `k` largest values (ties broken toward the lower index),
/// returned in ascending index order.
pub(crate) fn top_k_indices<T: PartialOrd + Copy>(values: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    // stable sort keeps lower indices first among equal values
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Softmax over `logits`, keep the top `k` probabilities, renormalize.
///
/// Returns the kept indices (ascending) and their renormalized weights in
/// double precision. Renormalizing the kept softmax entries is the same as a
/// softmax restricted to the kept logits, which is what this computes.
pub(crate) fn softmax_top_k(logits: &[f64], k: usize) -> (Vec<usize>, Vec<f64>) {
    let kept = top_k_indices(logits, k);
    let max = kept
        .iter()
        .map(|&i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = kept.iter().map(|&i| (logits[i] - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let weights = exps.into_iter().map(|e| e / sum).collect();
    (kept, weights)
}
