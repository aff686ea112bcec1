//! Scene points and their 3D covariance.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion};

use crate::coeffs::SparseCoefficients;
use crate::{Error, Result};

/// Allowed deviation of the stored quaternion from unit norm.
pub const QUATERNION_TOLERANCE: f64 = 1e-6;

/// One 3D Gaussian with degree-0 color and per-level sparse semantics.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub id: u32,
    pub position: [f32; 3],
    /// Unit quaternion, (w, x, y, z).
    pub rotation: [f32; 4],
    /// Per-axis standard deviation.
    pub scale: [f32; 3],
    pub opacity: f32,
    pub color: [f32; 3],
    /// One entry per semantic level.
    pub coeffs: Vec<SparseCoefficients>,
}

impl Gaussian {
    /// Checks the geometric invariants (the coefficient invariants depend
    /// on the scene config and are checked by [`crate::Scene`]).
    pub fn validate_geometry(&self) -> Result<()> {
        let finite = self
            .position
            .iter()
            .chain(&self.rotation)
            .chain(&self.scale)
            .chain(&self.color)
            .chain(std::iter::once(&self.opacity))
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::validation(format!(
                "gaussian {} has non-finite attributes",
                self.id
            )));
        }
        let norm = self
            .rotation
            .iter()
            .map(|&q| (q as f64) * (q as f64))
            .sum::<f64>()
            .sqrt();
        if (norm - 1.0).abs() > QUATERNION_TOLERANCE {
            return Err(Error::validation(format!(
                "gaussian {} rotation has norm {norm}",
                self.id
            )));
        }
        if self.scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::validation(format!(
                "gaussian {} has non-positive scale",
                self.id
            )));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::validation(format!(
                "gaussian {} opacity {} outside [0, 1]",
                self.id, self.opacity
            )));
        }
        Ok(())
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        build_covariance(self.rotation, self.scale)
    }
}

/// Normalizes a (w, x, y, z) quaternion, rounding to f32 storage.
pub fn normalize_quaternion(q: [f64; 4]) -> Result<[f32; 4]> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !n.is_finite() || n == 0.0 {
        return Err(Error::validation("quaternion must be finite and nonzero"));
    }
    Ok(q.map(|v| (v / n) as f32))
}

/// Σ = R·S·Sᵀ·Rᵀ for a (w, x, y, z) quaternion and per-axis scale.
///
/// The quaternion is renormalized before use, so inputs written with a few
/// decimals (e.g. 0.7071) give an exact rotation.
pub fn build_covariance(rotation: [f32; 4], scale: [f32; 3]) -> Result<Matrix3<f64>> {
    if rotation.iter().chain(&scale).any(|v| !v.is_finite()) {
        return Err(Error::validation("covariance inputs must be finite"));
    }
    if scale.iter().any(|&s| s <= 0.0) {
        return Err(Error::validation("scale must be positive"));
    }
    let [w, x, y, z] = rotation.map(|v| v as f64);
    if w == 0.0 && x == 0.0 && y == 0.0 && z == 0.0 {
        return Err(Error::validation("zero quaternion"));
    }
    let r = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
        .to_rotation_matrix()
        .into_inner();
    let s = Matrix3::from_diagonal(&nalgebra::Vector3::from(scale.map(|v| v as f64)));
    let m = r * s;
    let cov = m * m.transpose();
    // symmetrize exactly
    Ok((cov + cov.transpose()) * 0.5)
}
