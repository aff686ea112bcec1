//! Parameter initialization from target features.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::objective::{BatchCache, CodebookParams, CoefficientLogits};

/// How the codebooks were initialized, recorded in run metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookInit {
    /// D²-weighted seeding from per-Gaussian target features.
    SeededFromTargets,
    /// Random unit vectors (no usable targets).
    UnitRandom,
    /// Codebooks taken from the input scene.
    Kept,
}

/// Coverage-normalized average target feature seen by each Gaussian.
///
/// A pixel's target is divided by its total opacity before averaging, so a
/// Gaussian sitting in a uniformly labelled region recovers that region's
/// feature regardless of how opaque the region is.
pub fn gaussian_features(caches: &[BatchCache], num_gaussians: usize, level: usize, dim: usize) -> Vec<Option<Vec<f64>>> {
    let mut sums = vec![0.0f64; num_gaussians * dim];
    let mut weights = vec![0.0f64; num_gaussians];
    for cache in caches {
        let bw = &cache.weights;
        let target = &cache.batch.targets[level].data;
        for p in 0..bw.num_pixels() {
            if cache.batch.mask.as_ref().is_some_and(|m| !m[p]) {
                continue;
            }
            let cov = bw.coverage[p];
            if cov <= 1e-6 {
                continue;
            }
            let t = &target[p * dim..(p + 1) * dim];
            for &(gi, e) in bw.pixel(p) {
                let gi = gi as usize;
                weights[gi] += e;
                let scale = e / cov;
                for (s, &v) in sums[gi * dim..(gi + 1) * dim].iter_mut().zip(t) {
                    *s += scale * v as f64;
                }
            }
        }
    }
    (0..num_gaussians)
        .map(|g| {
            (weights[g] > 1e-12).then(|| sums[g * dim..(g + 1) * dim].iter().map(|s| s / weights[g]).collect())
        })
        .collect()
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ style seeding: first atom uniform, each next one sampled with
/// probability proportional to squared distance from the closest chosen atom.
pub fn seed_atoms(features: &[&[f64]], num_atoms: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dim = features[0].len();
    let mut atoms = Vec::with_capacity(num_atoms * dim);
    let first = rng.random_range(0..features.len());
    atoms.extend_from_slice(features[first]);
    let mut nearest: Vec<f64> = features.iter().map(|f| dist_sq(f, features[first])).collect();
    for _ in 1..num_atoms {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = features.len() - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.random_range(0..features.len())
        };
        atoms.extend_from_slice(features[pick]);
        for (n, f) in nearest.iter_mut().zip(features) {
            *n = n.min(dist_sq(f, features[pick]));
        }
    }
    atoms
}

pub fn unit_random_atoms(num_atoms: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut atoms = Vec::with_capacity(num_atoms * dim);
    for _ in 0..num_atoms {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        atoms.extend(v.into_iter().map(|x| x / n));
    }
    atoms
}

/// Logits favouring the atoms closest to each Gaussian's target feature:
/// z_j = −‖f − s_j‖² / τ, with τ a tenth of the mean squared feature norm.
/// Gaussians that no camera sees get all-zero logits.
pub fn logits_from_features(
    features: &[Option<Vec<f64>>],
    books: &CodebookParams,
    level: usize,
    logits: &mut CoefficientLogits,
) {
    let visible: Vec<&Vec<f64>> = features.iter().flatten().collect();
    let mean_norm = if visible.is_empty() {
        1.0
    } else {
        visible.iter().map(|f| f.iter().map(|x| x * x).sum::<f64>()).sum::<f64>() / visible.len() as f64
    };
    let tau = (0.1 * mean_norm).max(1e-6);
    for (g, f) in features.iter().enumerate() {
        let out = logits.get_mut(g, level);
        match f {
            Some(f) => {
                for (j, z) in out.iter_mut().enumerate() {
                    *z = -dist_sq(f, books.atom(level, j)) / tau;
                }
            }
            None => out.iter_mut().for_each(|z| *z = 0.0),
        }
    }
}
