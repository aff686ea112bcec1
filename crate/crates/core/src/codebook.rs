//! Global per-level codebooks and feature reconstruction.

use crate::coeffs::SparseCoefficients;
use crate::{Error, Result};

/// L×D matrix of basis vectors for one semantic level, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    level: u8,
    num_atoms: usize,
    dim: usize,
    atoms: Vec<f32>,
}

impl Codebook {
    pub fn new(level: u8, num_atoms: usize, dim: usize, atoms: Vec<f32>) -> Result<Self> {
        if num_atoms == 0 || dim == 0 {
            return Err(Error::validation("codebook needs L >= 1 and D >= 1"));
        }
        if atoms.len() != num_atoms * dim {
            return Err(Error::DimensionMismatch {
                what: "codebook entries (L*D)",
                expected: num_atoms * dim,
                actual: atoms.len(),
            });
        }
        if atoms.iter().any(|a| !a.is_finite()) {
            return Err(Error::validation("codebook entries must be finite"));
        }
        Ok(Self {
            level,
            num_atoms,
            dim,
            atoms,
        })
    }

    pub fn zeros(level: u8, num_atoms: usize, dim: usize) -> Self {
        Self {
            level,
            num_atoms,
            dim,
            atoms: vec![0.0; num_atoms * dim],
        }
    }

    pub fn level(&self) -> u8 {
        self.level
    }

    /// L
    pub fn num_atoms(&self) -> usize {
        self.num_atoms
    }

    /// D
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn atom(&self, index: usize) -> &[f32] {
        &self.atoms[index * self.dim..(index + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.atoms
    }
}

/// Convex combination of the stored atoms: f = Σ w_l · s_l.
pub fn reconstruct_feature(coeffs: &SparseCoefficients, codebook: &Codebook) -> Result<Vec<f32>> {
    coeffs.validate_indices(codebook.num_atoms())?;
    let mut acc = vec![0.0f64; codebook.dim()];
    for (index, weight) in coeffs.iter() {
        for (a, &s) in acc.iter_mut().zip(codebook.atom(index)) {
            *a += weight as f64 * s as f64;
        }
    }
    Ok(acc.into_iter().map(|v| v as f32).collect())
}
