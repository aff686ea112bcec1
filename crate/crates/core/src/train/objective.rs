//! Loss and analytic gradients for the coefficient field.
//!
//! Geometry is frozen while the field trains, so each pixel's blend weights
//! e_i = α_i·Π_{j<i}(1−α_j) are constants per camera and are computed once
//! ([`BatchCache`]). A forward pass is then
//!
//! ```text
//! W(p) = Σ_i e_i(p)·w_i          (rendered coefficients)
//! F(p) = W(p)ᵀ·S                 (decoded feature)
//! loss = mean over valid pixels and levels of ‖F − T‖² [+ λ(1 − cos(F, T))]
//! ```
//!
//! and w_i is the softmax restricted to the K logits kept by top-K, which is
//! exactly "softmax, keep top-K, renormalize". The kept set is treated as
//! constant within a step.

use crate::camera::Camera;
use crate::coeffs::softmax_top_k;
use crate::projection::{self, TileBinning, CUTOFF_MAHALANOBIS_SQ, MAX_ALPHA};
use crate::raster::{Framebuffer, TRANSMITTANCE_EPSILON};
use crate::scene::{Scene, SceneConfig};
use crate::{Error, Result};

/// Target feature maps for one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub camera: Camera,
    /// One H×W×D map per semantic level.
    pub targets: Vec<Framebuffer>,
    /// Pixels to supervise; all when absent.
    pub mask: Option<Vec<bool>>,
}

impl TrainingBatch {
    pub fn validate(&self, cfg: &SceneConfig) -> Result<()> {
        if self.targets.len() != cfg.num_levels {
            return Err(Error::DimensionMismatch {
                what: "target levels",
                expected: cfg.num_levels,
                actual: self.targets.len(),
            });
        }
        for t in &self.targets {
            if (t.width, t.height) != (self.camera.width, self.camera.height) {
                return Err(Error::validation("target size differs from camera"));
            }
            if t.channels != cfg.feature_dim {
                return Err(Error::DimensionMismatch {
                    what: "target feature dimension",
                    expected: cfg.feature_dim,
                    actual: t.channels,
                });
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation("targets must be finite"));
            }
        }
        if let Some(mask) = &self.mask {
            if mask.len() != self.camera.num_pixels() {
                return Err(Error::DimensionMismatch {
                    what: "mask pixels",
                    expected: self.camera.num_pixels(),
                    actual: mask.len(),
                });
            }
        }
        Ok(())
    }
}

/// Per-pixel (Gaussian index, blend weight) lists in front-to-back order,
/// in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendWeights {
    pub width: usize,
    pub height: usize,
    offsets: Vec<usize>,
    entries: Vec<(u32, f64)>,
    /// 1 − T_final per pixel.
    pub coverage: Vec<f64>,
}

impl BlendWeights {
    pub fn from_binning(binning: &TileBinning) -> Self {
        let (w, h) = (binning.width, binning.height);
        let mut per_pixel: Vec<Vec<(u32, f64)>> = vec![Vec::new(); w * h];
        let mut coverage = vec![0.0; w * h];
        for tile in 0..binning.num_tiles() {
            let list = binning.tile_list(tile);
            let (cols, rows) = binning.tile_pixels(tile);
            for row in rows {
                for col in cols.clone() {
                    let (px, py) = (col as f32 + 0.5, row as f32 + 0.5);
                    let out = &mut per_pixel[row * w + col];
                    let mut t = 1.0f64;
                    for &pi in list {
                        let p = &binning.projected[pi as usize];
                        if p.mahalanobis_sq(px, py) > CUTOFF_MAHALANOBIS_SQ {
                            continue;
                        }
                        let dx = px as f64 - p.mean2d[0] as f64;
                        let dy = py as f64 - p.mean2d[1] as f64;
                        let [a, b, c] = p.inv_cov2d.map(|v| v as f64);
                        let d2 = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
                        let alpha = (p.opacity as f64 * (-0.5 * d2).exp()).min(MAX_ALPHA as f64);
                        out.push((p.index, alpha * t));
                        t *= 1.0 - alpha;
                        if t < TRANSMITTANCE_EPSILON as f64 {
                            break;
                        }
                    }
                    coverage[row * w + col] = 1.0 - t;
                }
            }
        }
        let mut offsets = Vec::with_capacity(w * h + 1);
        offsets.push(0);
        let mut entries = Vec::new();
        for list in per_pixel {
            entries.extend(list);
            offsets.push(entries.len());
        }
        Self {
            width: w,
            height: h,
            offsets,
            entries,
            coverage,
        }
    }

    pub fn pixel(&self, p: usize) -> &[(u32, f64)] {
        &self.entries[self.offsets[p]..self.offsets[p + 1]]
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }
}

/// A batch with its frozen blend weights.
#[derive(Debug, Clone)]
pub struct BatchCache {
    pub batch: TrainingBatch,
    pub weights: BlendWeights,
}

impl BatchCache {
    pub fn new(scene: &Scene, batch: TrainingBatch) -> Result<Self> {
        batch.validate(&scene.config)?;
        let binning = projection::prepare(scene, &batch.camera)?;
        Ok(Self {
            weights: BlendWeights::from_binning(&binning),
            batch,
        })
    }

    fn valid(&self, p: usize) -> bool {
        self.batch.mask.as_ref().is_none_or(|m| m[p])
    }

    pub fn num_valid(&self) -> usize {
        (0..self.weights.num_pixels()).filter(|&p| self.valid(p)).count()
    }
}

/// Unconstrained per-Gaussian, per-level L-vectors, laid out
/// `[gaussian][level][atom]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientLogits {
    pub num_levels: usize,
    pub num_atoms: usize,
    pub values: Vec<f64>,
}

impl CoefficientLogits {
    pub fn zeros(num_gaussians: usize, num_levels: usize, num_atoms: usize) -> Self {
        Self {
            num_levels,
            num_atoms,
            values: vec![0.0; num_gaussians * num_levels * num_atoms],
        }
    }

    pub fn get(&self, gaussian: usize, level: usize) -> &[f64] {
        let start = (gaussian * self.num_levels + level) * self.num_atoms;
        &self.values[start..start + self.num_atoms]
    }

    pub fn get_mut(&mut self, gaussian: usize, level: usize) -> &mut [f64] {
        let start = (gaussian * self.num_levels + level) * self.num_atoms;
        &mut self.values[start..start + self.num_atoms]
    }

    pub fn num_gaussians(&self) -> usize {
        self.values.len() / (self.num_levels * self.num_atoms).max(1)
    }
}

/// Kept top-K indices and renormalized weights, `[gaussian][level][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub num_levels: usize,
    pub top_k: usize,
    pub indices: Vec<u16>,
    pub weights: Vec<f64>,
}

impl Selection {
    pub fn from_logits(logits: &CoefficientLogits, top_k: usize) -> Self {
        let n = logits.num_gaussians();
        let mut indices = Vec::with_capacity(n * logits.num_levels * top_k);
        let mut weights = Vec::with_capacity(indices.capacity());
        for g in 0..n {
            for level in 0..logits.num_levels {
                let (idx, w) = softmax_top_k(logits.get(g, level), top_k);
                indices.extend(idx.into_iter().map(|i| i as u16));
                weights.extend(w);
            }
        }
        Self {
            num_levels: logits.num_levels,
            top_k,
            indices,
            weights,
        }
    }

    /// The coefficients currently stored in a scene.
    pub fn from_scene(scene: &Scene) -> Self {
        let cfg = &scene.config;
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        for g in &scene.gaussians {
            for c in &g.coeffs {
                indices.extend_from_slice(c.indices());
                weights.extend(c.values().iter().map(|&v| v as f64));
            }
        }
        Self {
            num_levels: cfg.num_levels,
            top_k: cfg.top_k,
            indices,
            weights,
        }
    }

    fn range(&self, gaussian: usize, level: usize) -> std::ops::Range<usize> {
        let start = (gaussian * self.num_levels + level) * self.top_k;
        start..start + self.top_k
    }

    pub fn entry(&self, gaussian: usize, level: usize) -> (&[u16], &[f64]) {
        let r = self.range(gaussian, level);
        (&self.indices[r.clone()], &self.weights[r])
    }
}

/// Per-level L×D codebooks in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookParams {
    pub num_atoms: usize,
    pub dim: usize,
    pub levels: Vec<Vec<f64>>,
}

impl CodebookParams {
    pub fn from_scene(scene: &Scene) -> Self {
        Self {
            num_atoms: scene.config.num_atoms,
            dim: scene.config.feature_dim,
            levels: scene
                .codebooks
                .iter()
                .map(|cb| cb.as_slice().iter().map(|&v| v as f64).collect())
                .collect(),
        }
    }

    pub fn atom(&self, level: usize, j: usize) -> &[f64] {
        &self.levels[level][j * self.dim..(j + 1) * self.dim]
    }
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub loss: f64,
    /// Per level, H·W×L rendered coefficients.
    pub coefficients: Vec<Vec<f64>>,
    /// Per level, H·W×D decoded features.
    pub features: Vec<Vec<f64>>,
    pub num_valid: usize,
    pub cosine_weight: f64,
}

pub fn forward_loss(sel: &Selection, books: &CodebookParams, cache: &BatchCache, cosine_weight: f64) -> Result<ForwardPass> {
    let (l, d) = (books.num_atoms, books.dim);
    let bw = &cache.weights;
    let npx = bw.num_pixels();
    let num_valid = cache.num_valid();
    let levels = sel.num_levels;
    let norm = (num_valid * levels).max(1) as f64;
    let mut coefficients = Vec::with_capacity(levels);
    let mut features = Vec::with_capacity(levels);
    let mut total = 0.0f64;
    for level in 0..levels {
        let target = &cache.batch.targets[level].data;
        let mut wmap = vec![0.0f64; npx * l];
        let mut fmap = vec![0.0f64; npx * d];
        for p in 0..npx {
            let w = &mut wmap[p * l..(p + 1) * l];
            for &(gi, e) in bw.pixel(p) {
                let (idx, vals) = sel.entry(gi as usize, level);
                for (&j, &v) in idx.iter().zip(vals) {
                    w[j as usize] += e * v;
                }
            }
            let f = &mut fmap[p * d..(p + 1) * d];
            for (j, &wj) in w.iter().enumerate() {
                if wj != 0.0 {
                    for (o, &s) in f.iter_mut().zip(books.atom(level, j)) {
                        *o += wj * s;
                    }
                }
            }
            if cache.valid(p) {
                let t = &target[p * d..(p + 1) * d];
                total += pixel_loss(f, t, cosine_weight);
            }
        }
        coefficients.push(wmap);
        features.push(fmap);
    }
    let loss = total / norm;
    if !loss.is_finite() {
        return Err(Error::Training {
            iteration: 0,
            reason: format!("non-finite loss {loss}"),
        });
    }
    Ok(ForwardPass {
        loss,
        coefficients,
        features,
        num_valid,
        cosine_weight,
    })
}

fn pixel_loss(f: &[f64], t: &[f32], cosine_weight: f64) -> f64 {
    let mut sq = 0.0;
    let (mut ft, mut ff, mut tt) = (0.0, 0.0, 0.0);
    for (&a, &b) in f.iter().zip(t) {
        let b = b as f64;
        sq += (a - b) * (a - b);
        ft += a * b;
        ff += a * a;
        tt += b * b;
    }
    if cosine_weight != 0.0 && ff > 0.0 && tt > 0.0 {
        sq += cosine_weight * (1.0 - ft / (ff.sqrt() * tt.sqrt()));
    }
    sq
}

/// ∂loss/∂F for one pixel, before the 1/norm factor.
fn pixel_loss_grad(f: &[f64], t: &[f32], cosine_weight: f64, out: &mut [f64]) {
    for ((o, &a), &b) in out.iter_mut().zip(f).zip(t) {
        *o = 2.0 * (a - b as f64);
    }
    if cosine_weight == 0.0 {
        return;
    }
    let (mut ft, mut ff, mut tt) = (0.0, 0.0, 0.0);
    for (&a, &b) in f.iter().zip(t) {
        let b = b as f64;
        ft += a * b;
        ff += a * a;
        tt += b * b;
    }
    if ff > 0.0 && tt > 0.0 {
        let (nf, nt) = (ff.sqrt(), tt.sqrt());
        for ((o, &a), &b) in out.iter_mut().zip(f).zip(t) {
            // d/dF (1 − F·T/(|F||T|))
            let dcos = b as f64 / (nf * nt) - ft * a / (ff * nf * nt);
            *o -= cosine_weight * dcos;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Same layout as [`CoefficientLogits::values`].
    pub logits: Vec<f64>,
    /// Per level, L×D.
    pub codebooks: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        self.logits
            .iter()
            .chain(self.codebooks.iter().flatten())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.logits.iter().chain(self.codebooks.iter().flatten()).all(|g| g.is_finite())
    }
}

/// Analytic gradients of [`forward_loss`] with respect to the logits and
/// the codebook atoms. The kept top-K set is held fixed; logits outside it
/// receive zero gradient.
pub fn backward(fp: &ForwardPass, sel: &Selection, books: &CodebookParams, cache: &BatchCache) -> Result<Gradients> {
    let (l, d) = (books.num_atoms, books.dim);
    let levels = sel.num_levels;
    let bw = &cache.weights;
    let npx = bw.num_pixels();
    let n = sel.indices.len() / (levels * sel.top_k).max(1);
    let norm = (fp.num_valid * levels).max(1) as f64;
    let k = sel.top_k;

    let mut grad_books = vec![vec![0.0f64; l * d]; levels];
    // ∂loss/∂w for the kept entries, [gaussian][level][k]
    let mut grad_w = vec![0.0f64; n * levels * k];
    let mut df = vec![0.0f64; d];
    let mut g_row = vec![0.0f64; l];
    for level in 0..levels {
        let target = &cache.batch.targets[level].data;
        let wmap = &fp.coefficients[level];
        let fmap = &fp.features[level];
        let gb = &mut grad_books[level];
        for p in 0..npx {
            if !cache.valid(p) {
                continue;
            }
            pixel_loss_grad(&fmap[p * d..(p + 1) * d], &target[p * d..(p + 1) * d], fp.cosine_weight, &mut df);
            df.iter_mut().for_each(|v| *v /= norm);
            let w = &wmap[p * l..(p + 1) * l];
            for (j, &wj) in w.iter().enumerate() {
                if wj == 0.0 {
                    g_row[j] = 0.0;
                    continue;
                }
                let atom = books.atom(level, j);
                let mut dot = 0.0;
                for ((gbv, &dfv), &s) in gb[j * d..(j + 1) * d].iter_mut().zip(&df).zip(atom) {
                    *gbv += wj * dfv;
                    dot += s * dfv;
                }
                g_row[j] = dot;
            }
            for &(gi, e) in bw.pixel(p) {
                let base = (gi as usize * levels + level) * k;
                let (idx, _) = sel.entry(gi as usize, level);
                for (slot, &j) in idx.iter().enumerate() {
                    grad_w[base + slot] += e * g_row[j as usize];
                }
            }
        }
    }

    // restricted softmax: ∂z_k = w_k (g_k − Σ_m w_m g_m)
    let mut grad_logits = vec![0.0f64; n * levels * l];
    for g in 0..n {
        for level in 0..levels {
            let (idx, w) = sel.entry(g, level);
            let base = (g * levels + level) * k;
            let gw = &grad_w[base..base + k];
            let mean: f64 = w.iter().zip(gw).map(|(a, b)| a * b).sum();
            let out = &mut grad_logits[(g * levels + level) * l..(g * levels + level + 1) * l];
            for ((&j, &wk), &gk) in idx.iter().zip(w).zip(gw) {
                out[j as usize] = wk * (gk - mean);
            }
        }
    }

    let grads = Gradients {
        logits: grad_logits,
        codebooks: grad_books,
    };
    if !grads.is_finite() {
        return Err(Error::Training {
            iteration: 0,
            reason: "non-finite gradient".into(),
        });
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::Codebook;
    use crate::gaussian::Gaussian;
    use crate::raster::ChannelTag;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Tiny {
        cache: BatchCache,
        logits: CoefficientLogits,
        books: CodebookParams,
        k: usize,
    }

    fn tiny(seed: u64, gaussians: usize, side: usize, d: usize, l: usize, k: usize) -> Tiny {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = SceneConfig {
            num_levels: 1,
            num_atoms: l,
            top_k: k,
            feature_dim: d,
        };
        let gs = (0..gaussians)
            .map(|i| Gaussian {
                id: i as u32,
                position: [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 3.0 + i as f32 * 0.1],
                rotation: [1.0, 0.0, 0.0, 0.0],
                scale: [0.5, 0.5, 0.5],
                opacity: rng.random_range(0.3..0.9),
                color: [0.0; 3],
                coeffs: vec![crate::coeffs::SparseCoefficients::one_hot_k(0, k, l).unwrap()],
            })
            .collect();
        let atoms = (0..l * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scene = Scene::new(cfg, gs, vec![Codebook::new(0, l, d, atoms).unwrap()]).unwrap();
        let f = side as f64;
        let camera = Camera::identity(f, f, f / 2.0, f / 2.0, side, side).unwrap();
        let target = (0..side * side * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let batch = TrainingBatch {
            camera,
            targets: vec![Framebuffer::from_data(side, side, d, ChannelTag::DenseFeature, target).unwrap()],
            mask: None,
        };
        let mut logits = CoefficientLogits::zeros(gaussians, 1, l);
        logits.values.iter_mut().for_each(|z| *z = rng.random_range(-2.0..2.0));
        Tiny {
            cache: BatchCache::new(&scene, batch).unwrap(),
            logits,
            books: CodebookParams::from_scene(&scene),
            k,
        }
    }

    fn loss_at(t: &Tiny, logits: &CoefficientLogits, books: &CodebookParams) -> f64 {
        forward_loss(&Selection::from_logits(logits, t.k), books, &t.cache, 0.0).unwrap().loss
    }

    #[test]
    fn matching_target_gives_zero_loss_and_gradient() {
        // zero atoms decode to zero everywhere, matching a zero target
        let mut t = tiny(1, 3, 4, 5, 8, 2);
        t.books.levels[0].iter_mut().for_each(|v| *v = 0.0);
        t.cache.batch.targets[0].data.iter_mut().for_each(|v| *v = 0.0);
        let sel = Selection::from_logits(&t.logits, t.k);
        let fp = forward_loss(&sel, &t.books, &t.cache, 0.0).unwrap();
        assert_eq!(fp.loss, 0.0);
        let g = backward(&fp, &sel, &t.books, &t.cache).unwrap();
        assert!(g.logits.iter().chain(g.codebooks.iter().flatten()).all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn empty_view_loss_is_mean_target_norm() {
        let mut t = tiny(2, 2, 3, 4, 8, 2);
        t.cache.weights = BlendWeights {
            width: 3,
            height: 3,
            offsets: vec![0; 10],
            entries: vec![],
            coverage: vec![0.0; 9],
        };
        let expected: f64 = t.cache.batch.targets[0].data.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 9.0;
        let loss = loss_at(&t, &t.logits, &t.books);
        assert!((loss - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn unreferenced_atom_has_zero_gradient() {
        let t = tiny(3, 2, 4, 3, 8, 2);
        let sel = Selection::from_logits(&t.logits, t.k);
        let used: Vec<u16> = sel.indices.clone();
        let fp = forward_loss(&sel, &t.books, &t.cache, 0.0).unwrap();
        let g = backward(&fp, &sel, &t.books, &t.cache).unwrap();
        let dead: Vec<usize> = (0..8).filter(|j| !used.contains(&(*j as u16))).collect();
        assert!(!dead.is_empty());
        for j in dead {
            assert!(g.codebooks[0][j * 3..(j + 1) * 3].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_gaussian_single_pixel_matches_central_differences() {
        let h = 1e-4;
        for seed in 0..5 {
            let t = tiny(10 + seed, 1, 1, 4, 8, 2);
            let sel = Selection::from_logits(&t.logits, t.k);
            let fp = forward_loss(&sel, &t.books, &t.cache, 0.0).unwrap();
            let g = backward(&fp, &sel, &t.books, &t.cache).unwrap();
            for i in 0..t.logits.values.len() {
                let mut up = t.logits.clone();
                up.values[i] += h;
                let mut dn = t.logits.clone();
                dn.values[i] -= h;
                let fd = (loss_at(&t, &up, &t.books) - loss_at(&t, &dn, &t.books)) / (2.0 * h);
                assert!((fd - g.logits[i]).abs() <= 1e-3 * fd.abs().max(1e-3), "logit {i}: {fd} vs {}", g.logits[i]);
            }
            for i in 0..t.books.levels[0].len() {
                let mut up = t.books.clone();
                up.levels[0][i] += h;
                let mut dn = t.books.clone();
                dn.levels[0][i] -= h;
                let fd = (loss_at(&t, &t.logits, &up) - loss_at(&t, &t.logits, &dn)) / (2.0 * h);
                assert!((fd - g.codebooks[0][i]).abs() <= 1e-3 * fd.abs().max(1e-3), "atom {i}: {fd} vs {}", g.codebooks[0][i]);
            }
        }
    }

    #[test]
    fn cosine_term_gradient_matches_central_differences() {
        let t = tiny(21, 3, 3, 4, 6, 3);
        let h = 1e-5;
        let lam = 0.7;
        let loss = |logits: &CoefficientLogits, books: &CodebookParams| {
            forward_loss(&Selection::from_logits(logits, t.k), books, &t.cache, lam).unwrap().loss
        };
        let sel = Selection::from_logits(&t.logits, t.k);
        let fp = forward_loss(&sel, &t.books, &t.cache, lam).unwrap();
        let g = backward(&fp, &sel, &t.books, &t.cache).unwrap();
        for i in 0..t.books.levels[0].len() {
            let mut up = t.books.clone();
            up.levels[0][i] += h;
            let mut dn = t.books.clone();
            dn.levels[0][i] -= h;
            let fd = (loss(&t.logits, &up) - loss(&t.logits, &dn)) / (2.0 * h);
            assert!((fd - g.codebooks[0][i]).abs() <= 1e-4 * fd.abs().max(1e-2), "atom {i}: {fd} vs {}", g.codebooks[0][i]);
        }
    }
}
