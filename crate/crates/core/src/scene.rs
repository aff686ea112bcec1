use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::codebook::Codebook;
use crate::coeffs::MAX_ATOMS;
use crate::gaussian::Gaussian;
use crate::{Error, Result};

/// Semantic field dimensions shared by every Gaussian and codebook.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub num_levels: usize,
    /// Codebook size L.
    pub num_atoms: usize,
    /// Stored entries per coefficient vector.
    pub top_k: usize,
    /// Feature dimension D.
    pub feature_dim: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_levels: 3,
            num_atoms: 64,
            top_k: 4,
            feature_dim: 512,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_levels == 0 || self.num_levels > u8::MAX as usize {
            return Err(Error::validation("num_levels must be in 1..=255"));
        }
        if self.top_k == 0 || self.top_k > self.num_atoms {
            return Err(Error::validation(format!(
                "K={} must satisfy 1 <= K <= L={}",
                self.top_k, self.num_atoms
            )));
        }
        if self.num_atoms > MAX_ATOMS {
            return Err(Error::validation(format!("L exceeds {MAX_ATOMS}")));
        }
        if self.feature_dim == 0 {
            return Err(Error::validation("feature dimension must be positive"));
        }
        Ok(())
    }

    /// Channels actually blended per Gaussian when all levels are splatted
    /// together.
    pub fn blend_width(&self) -> usize {
        self.num_levels * self.top_k
    }
}

/// Gaussians plus one codebook per semantic level.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub config: SceneConfig,
    pub gaussians: Vec<Gaussian>,
    pub codebooks: Vec<Codebook>,
}

impl Scene {
    /// Validates and assembles a scene.
    pub fn new(config: SceneConfig, gaussians: Vec<Gaussian>, codebooks: Vec<Codebook>) -> Result<Self> {
        let scene = Self {
            config,
            gaussians,
            codebooks,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        if self.codebooks.len() != cfg.num_levels {
            return Err(Error::DimensionMismatch {
                what: "codebook count",
                expected: cfg.num_levels,
                actual: self.codebooks.len(),
            });
        }
        for (level, cb) in self.codebooks.iter().enumerate() {
            if cb.level() as usize != level
                || cb.num_atoms() != cfg.num_atoms
                || cb.dim() != cfg.feature_dim
            {
                return Err(Error::validation(format!(
                    "codebook {level} is level {} with shape {}x{}, expected level {level} {}x{}",
                    cb.level(),
                    cb.num_atoms(),
                    cb.dim(),
                    cfg.num_atoms,
                    cfg.feature_dim
                )));
            }
        }
        let mut ids = HashSet::with_capacity(self.gaussians.len());
        for g in &self.gaussians {
            if !ids.insert(g.id) {
                return Err(Error::validation(format!("duplicate gaussian id {}", g.id)));
            }
            g.validate_geometry()?;
            if g.coeffs.len() != cfg.num_levels {
                return Err(Error::DimensionMismatch {
                    what: "coefficient levels per gaussian",
                    expected: cfg.num_levels,
                    actual: g.coeffs.len(),
                });
            }
            for c in &g.coeffs {
                c.validate(cfg.num_atoms, cfg.top_k)?;
            }
        }
        Ok(())
    }

    /// Checks only that every stored coefficient index addresses the
    /// codebook, which is all the splatting kernels rely on.
    pub fn validate_indices(&self, level: usize) -> Result<()> {
        if level >= self.config.num_levels {
            return Err(Error::validation(format!(
                "level {level} not in scene with {} levels",
                self.config.num_levels
            )));
        }
        for g in &self.gaussians {
            let c = g.coeffs.get(level).ok_or_else(|| {
                Error::validation(format!("gaussian {} lacks level {level}", g.id))
            })?;
            c.validate_indices(self.config.num_atoms)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::SparseCoefficients;

    fn gaussian(id: u32) -> Gaussian {
        Gaussian {
            id,
            position: [0.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            scale: [1.0; 3],
            opacity: 0.5,
            color: [0.2; 3],
            coeffs: vec![SparseCoefficients::one_hot_k(1, 2, 4).unwrap()],
        }
    }

    fn config() -> SceneConfig {
        SceneConfig {
            num_levels: 1,
            num_atoms: 4,
            top_k: 2,
            feature_dim: 3,
        }
    }

    #[test]
    fn defaults_match_reference_setup() {
        let c = SceneConfig::default();
        assert_eq!((c.num_levels, c.num_atoms, c.top_k, c.feature_dim), (3, 64, 4, 512));
        assert_eq!(c.blend_width(), 12);
    }

    #[test]
    fn config_rejects_k_above_l() {
        let mut c = config();
        c.top_k = 5;
        assert!(c.validate().is_err());
        c.top_k = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn scene_checks() {
        let cb = vec![Codebook::zeros(0, 4, 3)];
        assert!(Scene::new(config(), vec![gaussian(0), gaussian(1)], cb.clone()).is_ok());
        assert!(Scene::new(config(), vec![gaussian(0), gaussian(0)], cb.clone()).is_err());
        let mut bad = gaussian(2);
        bad.opacity = 1.5;
        assert!(Scene::new(config(), vec![bad], cb.clone()).is_err());
        let mut bad = gaussian(3);
        bad.rotation = [0.9, 0.0, 0.0, 0.0];
        assert!(Scene::new(config(), vec![bad], cb).is_err());
        assert!(Scene::new(config(), vec![], vec![]).is_err());
    }
}
