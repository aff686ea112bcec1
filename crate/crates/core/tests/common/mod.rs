//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsesplat::io::synthetic::{default_camera, random_coefficients, random_scene};
use sparsesplat::projection::{self, MAX_ALPHA};
use sparsesplat::raster::{ChannelTag, Framebuffer, TRANSMITTANCE_EPSILON};
use sparsesplat::train::{backward, forward_loss, BatchCache, CodebookParams, CoefficientLogits, Selection, TrainingBatch};
use sparsesplat::{Camera, Codebook, Gaussian, Scene, SceneConfig};

pub const EQUIVALENCE_SCENES: u64 = 20;

/// Random scene of at most 1000 Gaussians, L=64, K=4, viewed at 64×64.
pub fn equivalence_scene(seed: u64, feature_dim: usize) -> (Scene, Camera) {
    let count = 200 + (seed as usize * 37) % 801;
    let cfg = SceneConfig {
        num_levels: 1,
        num_atoms: 64,
        top_k: 4,
        feature_dim,
    };
    (random_scene(seed, count, cfg).unwrap(), default_camera(64, 64).unwrap())
}

/// A tiny training problem: at most 4 Gaussians, 4 pixels and D ≤ 8.
pub struct GradCase {
    pub scene: Scene,
    pub cache: BatchCache,
    pub logits: CoefficientLogits,
    pub books: CodebookParams,
    pub cosine_weight: f64,
}

pub fn grad_case(seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_atoms = rng.random_range(2..=8);
    let cfg = SceneConfig {
        num_levels: rng.random_range(1..=2),
        num_atoms,
        top_k: rng.random_range(1..=num_atoms.min(4)),
        feature_dim: rng.random_range(2..=8),
    };
    let (w, h) = [(2, 2), (1, 4), (4, 1), (2, 1), (1, 1)][rng.random_range(0..5)];
    let cam = default_camera(w, h).unwrap();
    let n = rng.random_range(1..=4);
    let gaussians = (0..n)
        .map(|id| Gaussian {
            id: id as u32,
            position: [
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                rng.random_range(1.5..3.0),
            ],
            rotation: [1.0, 0.0, 0.0, 0.0],
            scale: std::array::from_fn(|_| rng.random_range(0.4..1.2)),
            opacity: rng.random_range(0.2..0.9),
            color: [0.5; 3],
            coeffs: (0..cfg.num_levels)
                .map(|_| random_coefficients(&mut rng, cfg.num_atoms, cfg.top_k))
                .collect(),
        })
        .collect();
    let codebooks = (0..cfg.num_levels)
        .map(|level| {
            let atoms = (0..cfg.num_atoms * cfg.feature_dim)
                .map(|_| rng.random_range(-1.0f32..1.0))
                .collect();
            Codebook::new(level as u8, cfg.num_atoms, cfg.feature_dim, atoms).unwrap()
        })
        .collect();
    let scene = Scene::new(cfg, gaussians, codebooks).unwrap();

    let targets = (0..cfg.num_levels)
        .map(|_| {
            let data = (0..w * h * cfg.feature_dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            Framebuffer::from_data(w, h, cfg.feature_dim, ChannelTag::DenseFeature, data).unwrap()
        })
        .collect();
    let mask = rng
        .random_bool(0.3)
        .then(|| (0..w * h).map(|_| rng.random_bool(0.75)).collect());
    let batch = TrainingBatch {
        camera: cam,
        targets,
        mask,
    };
    let cache = BatchCache::new(&scene, batch).unwrap();

    let mut logits = CoefficientLogits::zeros(n, cfg.num_levels, cfg.num_atoms);
    logits.values.iter_mut().for_each(|z| *z = rng.random_range(-2.0..2.0));
    let mut books = CodebookParams::from_scene(&scene);
    for level in &mut books.levels {
        level.iter_mut().for_each(|s| *s = rng.random_range(-1.0..1.0));
    }
    let cosine_weight = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.1..1.0) };
    GradCase {
        scene,
        cache,
        logits,
        books,
        cosine_weight,
    }
}

/// Indices of the K largest entries; ties keep the lower index.
pub fn top_k_set(z: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Softmax over all entries, keep the top K, renormalize. Dense output.
fn sparse_weights(z: &[f64], k: usize) -> Vec<f64> {
    let keep = top_k_set(z, k);
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = e.iter().sum();
    let kept: f64 = keep.iter().map(|&i| e[i] / total).sum();
    let mut out = vec![0.0; z.len()];
    for &i in &keep {
        out[i] = e[i] / total / kept;
    }
    out
}

/// Loss evaluated from scratch: per-pixel front-to-back compositing over all
/// covering Gaussians, dense coefficients, explicit decode. Shares only the
/// projection with the library.
pub fn reference_loss(case: &GradCase, logits: &CoefficientLogits, books: &CodebookParams) -> f64 {
    let cfg = case.scene.config;
    let batch = &case.cache.batch;
    let cam = &batch.camera;
    let projected = projection::project_scene(&case.scene, cam).unwrap();
    let (l, d) = (cfg.num_atoms, cfg.feature_dim);
    let mut total = 0.0;
    let mut valid = 0usize;
    for row in 0..cam.height {
        for col in 0..cam.width {
            let p = row * cam.width + col;
            if batch.mask.as_ref().is_some_and(|m| !m[p]) {
                continue;
            }
            valid += 1;
            let (px, py) = (col as f32 + 0.5, row as f32 + 0.5);
            let mut hits: Vec<_> = projected.iter().filter(|g| g.covers(px, py)).collect();
            hits.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.source_id.cmp(&b.source_id)));
            let mut weights = Vec::new();
            let mut t = 1.0f64;
            for g in hits {
                let dx = px as f64 - g.mean2d[0] as f64;
                let dy = py as f64 - g.mean2d[1] as f64;
                let [a, b, c] = g.inv_cov2d.map(|v| v as f64);
                let alpha = (g.opacity as f64 * (-0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)).exp()).min(MAX_ALPHA as f64);
                weights.push((g.index as usize, alpha * t));
                t *= 1.0 - alpha;
                if t < TRANSMITTANCE_EPSILON as f64 {
                    break;
                }
            }
            for level in 0..cfg.num_levels {
                let mut w = vec![0.0; l];
                for &(gi, e) in &weights {
                    for (acc, v) in w.iter_mut().zip(sparse_weights(logits.get(gi, level), cfg.top_k)) {
                        *acc += e * v;
                    }
                }
                let book = &books.levels[level];
                let f: Vec<f64> = (0..d).map(|c| (0..l).map(|j| w[j] * book[j * d + c]).sum()).collect();
                let t = &batch.targets[level].data[p * d..(p + 1) * d];
                let mut sq = 0.0;
                let (mut ft, mut ff, mut tt) = (0.0, 0.0, 0.0);
                for (&a, &b) in f.iter().zip(t) {
                    let b = b as f64;
                    sq += (a - b) * (a - b);
                    ft += a * b;
                    ff += a * a;
                    tt += b * b;
                }
                if case.cosine_weight != 0.0 && ff > 0.0 && tt > 0.0 {
                    sq += case.cosine_weight * (1.0 - ft / (ff * tt).sqrt());
                }
                total += sq;
            }
        }
    }
    total / (valid * cfg.num_levels).max(1) as f64
}

#[derive(Debug, Default, Clone, Copy)]
pub struct GradReport {
    /// Coordinates compared (flips excluded).
    pub checked: usize,
    pub agreed: usize,
    /// Logit coordinates whose perturbation changed top-K membership.
    pub flips: usize,
    /// Relative gap between the library loss and the reference loss.
    pub recompute_rel: f64,
}

impl GradReport {
    pub fn merge(self, o: Self) -> Self {
        Self {
            checked: self.checked + o.checked,
            agreed: self.agreed + o.agreed,
            flips: self.flips + o.flips,
            recompute_rel: self.recompute_rel.max(o.recompute_rel),
        }
    }
}

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-3;
pub const FD_ABS_FLOOR: f64 = 1e-6;

fn agrees(analytic: f64, numeric: f64) -> bool {
    let gap = (analytic - numeric).abs();
    gap <= FD_ABS_FLOOR || gap <= FD_REL_TOL * analytic.abs().max(numeric.abs())
}

/// Central differences of the reference loss against the analytic
/// gradients, over every logit and codebook coordinate.
pub fn check_gradients(case: &GradCase) -> GradReport {
    let cfg = case.scene.config;
    let sel = Selection::from_logits(&case.logits, cfg.top_k);
    let fp = forward_loss(&sel, &case.books, &case.cache, case.cosine_weight).unwrap();
    let grads = backward(&fp, &sel, &case.books, &case.cache).unwrap();
    let base = reference_loss(case, &case.logits, &case.books);
    let mut report = GradReport {
        recompute_rel: (fp.loss - base).abs() / base.abs().max(1e-300),
        ..Default::default()
    };

    let l = cfg.num_atoms;
    for i in 0..case.logits.values.len() {
        let (g, level) = (i / (cfg.num_levels * l), (i / l) % cfg.num_levels);
        let kept = top_k_set(case.logits.get(g, level), cfg.top_k);
        let mut plus = case.logits.clone();
        plus.values[i] += FD_STEP;
        let mut minus = case.logits.clone();
        minus.values[i] -= FD_STEP;
        if top_k_set(plus.get(g, level), cfg.top_k) != kept || top_k_set(minus.get(g, level), cfg.top_k) != kept {
            report.flips += 1;
            continue;
        }
        let numeric = (reference_loss(case, &plus, &case.books) - reference_loss(case, &minus, &case.books)) / (2.0 * FD_STEP);
        report.checked += 1;
        report.agreed += usize::from(agrees(grads.logits[i], numeric));
    }
    for level in 0..cfg.num_levels {
        for i in 0..case.books.levels[level].len() {
            let mut plus = case.books.clone();
            plus.levels[level][i] += FD_STEP;
            let mut minus = case.books.clone();
            minus.levels[level][i] -= FD_STEP;
            let numeric = (reference_loss(case, &case.logits, &plus) - reference_loss(case, &case.logits, &minus)) / (2.0 * FD_STEP);
            report.checked += 1;
            report.agreed += usize::from(agrees(grads.codebooks[level][i], numeric));
        }
    }
    report
}
