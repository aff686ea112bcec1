//! Learning the sparse coefficient field and the codebooks.
//!
//! Only the per-Gaussian coefficient logits and the codebook atoms are
//! optimized; positions, rotations, scales, opacities and colors are copied
//! through untouched.

pub mod init;
pub mod objective;
pub mod optim;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::Codebook;
use crate::coeffs::{softmax_top_k, SparseCoefficients};
use crate::scene::Scene;
use crate::{Error, Result};

pub use init::CodebookInit;
pub use objective::{
    backward, forward_loss, BatchCache, BlendWeights, CodebookParams, CoefficientLogits, ForwardPass, Gradients,
    Selection, TrainingBatch,
};
pub use optim::{AdamConfig, OptimState};

pub const DEFAULT_ITERATIONS: usize = 2000;
pub const DIVERGENCE_FACTOR: f64 = 10.0;
pub const DIVERGENCE_PATIENCE: usize = 100;

/// Softmax over `logits`, keep the K largest probabilities (ties to the
/// lower index), renormalize.
pub fn normalize_coefficients(logits: &[f32], k: usize) -> Result<SparseCoefficients> {
    if k == 0 || k > logits.len() {
        return Err(Error::validation(format!("k={k} must lie in 1..={}", logits.len())));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::validation("logits must be finite"));
    }
    let z: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
    Ok(coefficients_from_logits(&z, k))
}

fn coefficients_from_logits(logits: &[f64], k: usize) -> SparseCoefficients {
    let (idx, w) = softmax_top_k(logits, k);
    SparseCoefficients::from_sorted_unchecked(
        idx.into_iter().map(|i| i as u16).collect(),
        w.into_iter().map(|v| v as f32).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub optimizer: AdamConfig,
    /// Weight λ of the optional (1 − cos) term.
    pub cosine_weight: f64,
    pub seed: u64,
    /// Reuse the scene's codebooks instead of seeding new ones.
    pub keep_codebooks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            optimizer: AdamConfig::default(),
            cosine_weight: 0.0,
            seed: 0,
            keep_codebooks: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub scene: Scene,
    /// Parameters right after initialization, before the first step.
    pub initial_scene: Scene,
    pub curve: Vec<LossRecord>,
    pub codebook_init: CodebookInit,
}

impl TrainReport {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("iter,loss,grad_norm\n");
        for r in &self.curve {
            out.push_str(&format!("{},{:e},{:e}\n", r.iter, r.loss, r.grad_norm));
        }
        out
    }
}

/// Loss of a scene's stored coefficients and codebooks against one batch.
pub fn evaluate(scene: &Scene, batch: &TrainingBatch, cosine_weight: f64) -> Result<f64> {
    let cache = BatchCache::new(scene, batch.clone())?;
    let fp = forward_loss(
        &Selection::from_scene(scene),
        &CodebookParams::from_scene(scene),
        &cache,
        cosine_weight,
    )?;
    Ok(fp.loss)
}

fn export(scene: &Scene, logits: &CoefficientLogits, books: &CodebookParams) -> Result<Scene> {
    let k = scene.config.top_k;
    let mut out = scene.clone();
    for (g, gauss) in out.gaussians.iter_mut().enumerate() {
        gauss.coeffs = (0..scene.config.num_levels)
            .map(|level| coefficients_from_logits(logits.get(g, level), k))
            .collect();
    }
    out.codebooks = books
        .levels
        .iter()
        .enumerate()
        .map(|(level, atoms)| {
            Codebook::new(
                level as u8,
                books.num_atoms,
                books.dim,
                atoms.iter().map(|&v| v as f32).collect(),
            )
        })
        .collect::<Result<_>>()?;
    Ok(out)
}

fn with_iteration(err: Error, iteration: usize) -> Error {
    match err {
        Error::Training { reason, .. } => Error::Training { iteration, reason },
        other => other,
    }
}

/// Optimizes coefficient logits and codebooks against the batches, cycling
/// through them one per iteration.
pub fn train_field(scene: &Scene, batches: &[TrainingBatch], cfg: &TrainConfig) -> Result<TrainReport> {
    scene.validate()?;
    if cfg.iterations == 0 {
        return Ok(TrainReport {
            scene: scene.clone(),
            initial_scene: scene.clone(),
            curve: Vec::new(),
            codebook_init: CodebookInit::Kept,
        });
    }
    if batches.is_empty() {
        return Err(Error::validation("training needs at least one batch"));
    }
    let caches = batches
        .iter()
        .map(|b| BatchCache::new(scene, b.clone()))
        .collect::<Result<Vec<_>>>()?;

    let sc = scene.config;
    let n = scene.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut books = CodebookParams::from_scene(scene);
    let mut logits = CoefficientLogits::zeros(n, sc.num_levels, sc.num_atoms);
    let mut codebook_init = if cfg.keep_codebooks {
        CodebookInit::Kept
    } else {
        CodebookInit::SeededFromTargets
    };
    for level in 0..sc.num_levels {
        let feats = init::gaussian_features(&caches, n, level, sc.feature_dim);
        if !cfg.keep_codebooks {
            let visible: Vec<&[f64]> = feats.iter().flatten().map(|f| f.as_slice()).collect();
            books.levels[level] = if visible.is_empty() {
                codebook_init = CodebookInit::UnitRandom;
                init::unit_random_atoms(sc.num_atoms, sc.feature_dim, &mut rng)
            } else {
                init::seed_atoms(&visible, sc.num_atoms, &mut rng)
            };
        }
        init::logits_from_features(&feats, &books, level, &mut logits);
    }
    let initial_scene = export(scene, &logits, &books)?;

    let lens: Vec<usize> = books.levels.iter().map(|b| b.len()).collect();
    let mut optim = OptimState::new(cfg.optimizer, logits.values.len(), &lens);
    let mut curve = Vec::with_capacity(cfg.iterations);
    let mut first_loss: Vec<Option<f64>> = vec![None; caches.len()];
    let mut over = 0usize;
    for iter in 0..cfg.iterations {
        let b = iter % caches.len();
        let cache = &caches[b];
        let sel = Selection::from_logits(&logits, sc.top_k);
        let fp = forward_loss(&sel, &books, cache, cfg.cosine_weight).map_err(|e| with_iteration(e, iter))?;
        let base = *first_loss[b].get_or_insert(fp.loss);
        if fp.loss > DIVERGENCE_FACTOR * base {
            over += 1;
            if over >= DIVERGENCE_PATIENCE {
                return Err(Error::Training {
                    iteration: iter,
                    reason: format!(
                        "diverged: loss {:e} above {DIVERGENCE_FACTOR}x initial {:e} for {DIVERGENCE_PATIENCE} iterations",
                        fp.loss, base
                    ),
                });
            }
        } else {
            over = 0;
        }
        let grads = backward(&fp, &sel, &books, cache).map_err(|e| with_iteration(e, iter))?;
        curve.push(LossRecord {
            iter,
            loss: fp.loss,
            grad_norm: grads.norm(),
        });
        optim.step(&mut logits.values, &grads.logits, &mut books.levels, &grads.codebooks);
    }

    Ok(TrainReport {
        scene: export(scene, &logits, &books)?,
        initial_scene,
        curve,
        codebook_init,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn equal_logits_keep_first_k() {
        let c = normalize_coefficients(&[0.3; 8], 4).unwrap();
        assert_eq!(c.indices(), &[0, 1, 2, 3]);
        assert_eq!(c.values(), &[0.25; 4]);
    }

    #[test]
    fn dominant_logit_saturates() {
        let mut z = vec![0.0f32; 8];
        z[5] = 100.0;
        let c = normalize_coefficients(&z, 3).unwrap();
        assert_eq!(c.len(), 3);
        assert!(c.indices().contains(&5));
        let v5 = c.iter().find(|&(i, _)| i == 5).unwrap().1;
        assert!((v5 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let l = rng.random_range(2..40);
            let k = rng.random_range(1..=l);
            let z: Vec<f32> = (0..l).map(|_| rng.random_range(-5.0..5.0)).collect();
            let c = normalize_coefficients(&z, k).unwrap();
            let zmax = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let p: Vec<f64> = z.iter().map(|&v| (v as f64 - zmax).exp()).collect();
            let mut order: Vec<usize> = (0..l).collect();
            order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
            let mut kept: Vec<u16> = order[..k].iter().map(|&i| i as u16).collect();
            kept.sort_unstable();
            assert_eq!(c.indices(), kept.as_slice());
            let s: f64 = c.values().iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() <= 1e-7);
        }
    }

    #[test]
    fn shift_invariant_on_exact_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let z: Vec<f32> = (0..16).map(|_| rng.random_range(-64i32..64) as f32 / 8.0).collect();
            let c = rng.random_range(-64i32..64) as f32 / 8.0;
            let shifted: Vec<f32> = z.iter().map(|v| v + c).collect();
            assert_eq!(normalize_coefficients(&z, 4).unwrap(), normalize_coefficients(&shifted, 4).unwrap());
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(normalize_coefficients(&[0.0, f32::NAN], 1).is_err());
        assert!(normalize_coefficients(&[0.0, 1.0], 3).is_err());
        assert!(normalize_coefficients(&[0.0, 1.0], 0).is_err());
    }
}
