//! Sparse coefficient splatting.
//!
//! Each Gaussian stores, per level, K (index, value) pairs out of L. The
//! coefficient map W (L channels per level) is accumulated by blending only
//! those K pairs, so a pixel costs O(|N|·K) instead of O(|N|·L). Because
//! blending is linear in the channels, decoding the rendered map against the
//! codebook gives the same features as rendering reconstructed per-Gaussian
//! features directly.

mod pipeline;

pub use pipeline::{
    measure_query_pipeline, query_pipeline, query_pipeline_with, QueryWorkspace, LevelChoice, DEFAULT_REPETITIONS, DEFAULT_WARMUP, QueryOutcome, QuerySettings, RenderMethod, StageTimings,
    TimingRow,
};

use rayon::prelude::*;

use crate::camera::Camera;
use crate::codebook::Codebook;
use crate::projection::{self, TileBinning};
use crate::raster::{self, BlendPayload, ChannelTag, DenseChannels, Framebuffer, RasterStats, RenderOptions};
use crate::scene::Scene;
use crate::{Error, Result};

/// Rendered coefficients for one or more levels, `levels.len() × L`
/// channels per pixel, level-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMap {
    pub num_atoms: usize,
    pub top_k: usize,
    pub levels: Vec<usize>,
    pub fb: Framebuffer,
}

impl CoefficientMap {
    /// The L-vector of one level at one pixel; `slot` indexes `levels`.
    pub fn level_at(&self, col: usize, row: usize, slot: usize) -> &[f32] {
        &self.fb.pixel(col, row)[slot * self.num_atoms..(slot + 1) * self.num_atoms]
    }

    /// Splits a multi-level map into single-level maps.
    pub fn split_levels(&self) -> Vec<CoefficientMap> {
        let l = self.num_atoms;
        let stride = self.fb.channels;
        self.levels
            .iter()
            .enumerate()
            .map(|(slot, &level)| {
                let data = self
                    .fb
                    .data
                    .chunks_exact(stride)
                    .flat_map(|px| &px[slot * l..(slot + 1) * l])
                    .copied()
                    .collect();
                CoefficientMap {
                    num_atoms: l,
                    top_k: self.top_k,
                    levels: vec![level],
                    fb: Framebuffer {
                        width: self.fb.width,
                        height: self.fb.height,
                        channels: l,
                        tag: ChannelTag::Coefficient,
                        data,
                    },
                }
            })
            .collect()
    }

    pub fn check_invariants(&self) -> Result<()> {
        self.fb.check_coefficient_invariants(self.num_atoms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    DecodedFromCoefficients,
    DenseRendered,
}

/// Per-level H×W×D feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapSet {
    pub levels: Vec<usize>,
    pub maps: Vec<Framebuffer>,
    pub provenance: Provenance,
}

/// Per-Gaussian packed (channel, value) pairs for the requested levels,
/// `levels.len() × K` per Gaussian.
#[derive(Debug, Clone)]
pub struct SparsePayload {
    channels: usize,
    stride: usize,
    entries: Vec<(u32, f32)>,
}

impl SparsePayload {
    pub fn new(scene: &Scene, levels: &[usize]) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::validation("at least one level must be splatted"));
        }
        for &level in levels {
            scene.validate_indices(level)?;
        }
        let l = scene.config.num_atoms;
        let k = scene.config.top_k;
        let stride = levels.len() * k;
        let mut entries = Vec::with_capacity(scene.len() * stride);
        for g in &scene.gaussians {
            for (slot, &level) in levels.iter().enumerate() {
                let c = &g.coeffs[level];
                if c.len() != k {
                    return Err(Error::DimensionMismatch {
                        what: "stored coefficients (K)",
                        expected: k,
                        actual: c.len(),
                    });
                }
                entries.extend(c.iter().map(|(i, v)| ((slot * l + i) as u32, v)));
            }
        }
        Ok(Self {
            channels: levels.len() * l,
            stride,
            entries,
        })
    }

    /// Channels blended per Gaussian.
    pub fn stride(&self) -> usize {
        self.stride
    }
}

impl BlendPayload for SparsePayload {
    fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    fn blend(&self, index: usize, weight: f32, acc: &mut [f32]) -> usize {
        for &(ch, v) in &self.entries[index * self.stride..(index + 1) * self.stride] {
            acc[ch as usize] += v * weight;
        }
        self.stride
    }
}

fn splat_levels(scene: &Scene, cam: &Camera, levels: &[usize]) -> Result<(CoefficientMap, RasterStats)> {
    let payload = SparsePayload::new(scene, levels)?;
    let binning = projection::prepare(scene, cam)?;
    Ok(splat_binned(scene, &binning, &payload, levels))
}

/// Sparse splatting over a precomputed binning.
pub fn splat_binned(scene: &Scene, binning: &TileBinning, payload: &SparsePayload, levels: &[usize]) -> (CoefficientMap, RasterStats) {
    let (fb, stats) = raster::rasterize(binning, payload, ChannelTag::Coefficient, None);
    (
        CoefficientMap {
            num_atoms: scene.config.num_atoms,
            top_k: scene.config.top_k,
            levels: levels.to_vec(),
            fb,
        },
        stats,
    )
}

/// Coefficient map of one level, blending only each Gaussian's K stored
/// entries.
pub fn splat_sparse(scene: &Scene, cam: &Camera, level: usize) -> Result<CoefficientMap> {
    Ok(splat_levels(scene, cam, &[level])?.0)
}

/// All levels in one fused pass; each Gaussian blends `levels × K`
/// channels.
pub fn splat_multilevel(scene: &Scene, cam: &Camera) -> Result<CoefficientMap> {
    Ok(splat_multilevel_with_stats(scene, cam)?.0)
}

pub fn splat_multilevel_with_stats(scene: &Scene, cam: &Camera) -> Result<(CoefficientMap, RasterStats)> {
    let levels: Vec<usize> = (0..scene.config.num_levels).collect();
    splat_levels(scene, cam, &levels)
}

/// Table of densified coefficients for the given levels (`levels × L`
/// channels per Gaussian), the input of the O(|N|·L) baseline.
pub fn dense_coefficient_table(scene: &Scene, levels: &[usize]) -> Result<DenseChannels> {
    let l = scene.config.num_atoms;
    for &level in levels {
        scene.validate_indices(level)?;
    }
    let mut values = vec![0.0f32; scene.len() * levels.len() * l];
    for (g, row) in scene.gaussians.iter().zip(values.chunks_exact_mut(levels.len() * l)) {
        for (slot, &level) in levels.iter().enumerate() {
            for (i, v) in g.coeffs[level].iter() {
                row[slot * l + i] = v;
            }
        }
    }
    DenseChannels::new(levels.len() * l, values)
}

/// Baseline: composites every one of the `levels × L` coefficient channels.
pub fn render_coefficients_dense(scene: &Scene, cam: &Camera, levels: &[usize], opts: &RenderOptions) -> Result<(CoefficientMap, RasterStats)> {
    let mut fb = Framebuffer::zeros(0, 0, 0, ChannelTag::Coefficient);
    let stats = render_coefficients_dense_into(scene, cam, levels, opts, &mut fb)?;
    Ok((
        CoefficientMap {
            num_atoms: scene.config.num_atoms,
            top_k: scene.config.top_k,
            levels: levels.to_vec(),
            fb,
        },
        stats,
    ))
}

pub(crate) fn render_coefficients_dense_into(
    scene: &Scene,
    cam: &Camera,
    levels: &[usize],
    opts: &RenderOptions,
    fb: &mut Framebuffer,
) -> Result<RasterStats> {
    let channels = levels.len() * scene.config.num_atoms;
    let requested = (cam.num_pixels() + scene.len()).saturating_mul(channels * std::mem::size_of::<f32>());
    raster::check_budget(requested, opts.memory_budget)?;
    let table = dense_coefficient_table(scene, levels)?;
    let binning = projection::prepare(scene, cam)?;
    Ok(raster::rasterize_into(&binning, &table, ChannelTag::Coefficient, None, fb))
}

/// Feature = Wᵀ·S per pixel and level: a batched (H·W × L)·(L × D) product.
pub fn decode(cmap: &CoefficientMap, codebooks: &[Codebook]) -> Result<FeatureMapSet> {
    let mut out = FeatureMapSet {
        levels: Vec::new(),
        maps: Vec::new(),
        provenance: Provenance::DecodedFromCoefficients,
    };
    decode_into(cmap, codebooks, &mut out)?;
    Ok(out)
}

/// Like [`decode`], but reuses the buffers already held by `out`.
pub fn decode_into(cmap: &CoefficientMap, codebooks: &[Codebook], out: &mut FeatureMapSet) -> Result<()> {
    let l = cmap.num_atoms;
    if cmap.fb.channels != cmap.levels.len() * l {
        return Err(Error::DimensionMismatch {
            what: "coefficient map channels",
            expected: cmap.levels.len() * l,
            actual: cmap.fb.channels,
        });
    }
    let mut books = Vec::with_capacity(cmap.levels.len());
    for &level in &cmap.levels {
        let cb = codebooks
            .iter()
            .find(|c| c.level() as usize == level)
            .ok_or_else(|| Error::validation(format!("no codebook for level {level}")))?;
        if cb.num_atoms() != l {
            return Err(Error::DimensionMismatch {
                what: "codebook size L",
                expected: l,
                actual: cb.num_atoms(),
            });
        }
        books.push(cb);
    }
    out.levels.clone_from(&cmap.levels);
    out.provenance = Provenance::DecodedFromCoefficients;
    out.maps.truncate(books.len());
    out.maps
        .resize_with(books.len(), || Framebuffer::zeros(0, 0, 0, ChannelTag::DenseFeature));
    for (slot, (cb, dst)) in books.into_iter().zip(&mut out.maps).enumerate() {
        decode_level(&cmap.fb, slot * l, cb, dst);
    }
    Ok(())
}

fn decode_level(fb: &Framebuffer, offset: usize, cb: &Codebook, out: &mut Framebuffer) {
    let (l, d) = (cb.num_atoms(), cb.dim());
    out.reset(fb.width, fb.height, d, ChannelTag::DenseFeature);
    let pixels = fb.width * fb.height;
    if out.data.is_empty() || pixels == 0 {
        return;
    }
    let rows_per_chunk = pixels.div_ceil(rayon::current_num_threads()).max(64);
    out.data
        .par_chunks_mut(rows_per_chunk * d)
        .enumerate()
        .for_each(|(chunk, dst)| {
            let first = chunk * rows_per_chunk;
            let m = dst.len() / d;
            let src = &fb.data[first * fb.channels + offset..];
            // SAFETY: A is m×l inside `src` (row stride = channels), B is the
            // l×d codebook, C is the m×d destination chunk; all in bounds.
            unsafe {
                matrixmultiply::sgemm(
                    m,
                    l,
                    d,
                    1.0,
                    src.as_ptr(),
                    fb.channels as isize,
                    1,
                    cb.as_slice().as_ptr(),
                    d as isize,
                    1,
                    0.0,
                    dst.as_mut_ptr(),
                    d as isize,
                    1,
                );
            }
        });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::SparseCoefficients;
    use crate::gaussian::Gaussian;
    use crate::raster::{render_dense, ChannelSource};
    use crate::scene::SceneConfig;

    fn tiny_scene(k: usize, l: usize) -> Scene {
        let cfg = SceneConfig {
            num_levels: 1,
            num_atoms: l,
            top_k: k,
            feature_dim: 3,
        };
        let g = Gaussian {
            id: 0,
            position: [0.0, 0.0, 1.0],
            rotation: [1.0, 0.0, 0.0, 0.0],
            scale: [0.2; 3],
            opacity: 0.7,
            color: [0.0; 3],
            coeffs: vec![SparseCoefficients::one_hot_k(1, k, l).unwrap()],
        };
        let atoms = (0..l * 3).map(|i| i as f32).collect();
        Scene::new(cfg, vec![g], vec![Codebook::new(0, l, 3, atoms).unwrap()]).unwrap()
    }

    #[test]
    fn one_hot_lights_one_channel() {
        let scene = tiny_scene(2, 6);
        let cam = Camera::identity(20.0, 20.0, 8.0, 8.0, 16, 16).unwrap();
        let cmap = splat_sparse(&scene, &cam, 0).unwrap();
        cmap.check_invariants().unwrap();
        let opacity = render_dense(
            &scene,
            &cam,
            &ChannelSource::Custom(DenseChannels::new(1, vec![1.0]).unwrap()),
            &RenderOptions::default(),
        )
        .unwrap();
        for (px, o) in cmap.fb.pixels().zip(opacity.pixels()) {
            for (ch, &v) in px.iter().enumerate() {
                if ch == 1 {
                    assert_eq!(v, o[0]);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn decode_zero_map_is_zero() {
        let cmap = CoefficientMap {
            num_atoms: 4,
            top_k: 1,
            levels: vec![0],
            fb: Framebuffer::zeros(3, 2, 4, ChannelTag::Coefficient),
        };
        let cb = Codebook::new(0, 4, 2, vec![1.0; 8]).unwrap();
        let f = decode(&cmap, &[cb]).unwrap();
        assert!(f.maps[0].data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_rejects_mismatch() {
        let cmap = CoefficientMap {
            num_atoms: 4,
            top_k: 1,
            levels: vec![0],
            fb: Framebuffer::zeros(3, 2, 4, ChannelTag::Coefficient),
        };
        assert!(decode(&cmap, &[Codebook::zeros(0, 5, 2)]).is_err());
        assert!(decode(&cmap, &[Codebook::zeros(1, 4, 2)]).is_err());
    }

    #[test]
    fn decode_one_hot_scales_atom() {
        let mut fb = Framebuffer::zeros(2, 1, 8, ChannelTag::Coefficient);
        fb.data[7] = 1.0;
        fb.data[8 + 7] = 0.25;
        let cmap = CoefficientMap {
            num_atoms: 8,
            top_k: 1,
            levels: vec![0],
            fb,
        };
        let atoms: Vec<f32> = (0..16).map(|i| i as f32 - 3.0).collect();
        let cb = Codebook::new(0, 8, 2, atoms).unwrap();
        let f = decode(&cmap, std::slice::from_ref(&cb)).unwrap();
        assert_eq!(f.maps[0].pixel(0, 0), cb.atom(7));
        assert_eq!(f.maps[0].pixel(1, 0), &[cb.atom(7)[0] * 0.25, cb.atom(7)[1] * 0.25]);
    }

    #[test]
    fn invalid_index_rejected_before_render() {
        let mut scene = tiny_scene(1, 4);
        scene.gaussians[0].coeffs[0] = SparseCoefficients::one_hot(9);
        let cam = Camera::identity(20.0, 20.0, 8.0, 8.0, 16, 16).unwrap();
        assert!(splat_sparse(&scene, &cam, 0).is_err());
        assert!(splat_sparse(&tiny_scene(1, 4), &cam, 1).is_err());
    }
}
