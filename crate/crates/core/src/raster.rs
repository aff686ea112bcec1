//! Front-to-back alpha compositing over depth-sorted tiles.
//!
//! All renderers share [`composite_pixel`], the per-pixel walk over a tile
//! list: a Gaussian contributes when the pixel center is inside its 3σ
//! ellipse, with weight `α·T` where `T` is the running transmittance, and the
//! walk stops once `T` drops below [`TRANSMITTANCE_EPSILON`]. What gets
//! accumulated with that weight is up to a [`BlendPayload`].

use std::ops::Range;

use rayon::prelude::*;

use crate::camera::Camera;
use crate::codebook::reconstruct_feature;
use crate::coeffs::densify;
use crate::projection::{self, TileBinning, MAX_ALPHA};
use crate::scene::Scene;
use crate::{Error, Result};

/// Blending stops once transmittance falls below this.
pub const TRANSMITTANCE_EPSILON: f32 = 1e-4;

/// Default cap on the bytes a single render may allocate.
pub const DEFAULT_MEMORY_BUDGET: usize = 2 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelTag {
    Color,
    DenseFeature,
    Coefficient,
}

impl ChannelTag {
    pub fn code(self) -> u8 {
        match self {
            ChannelTag::Color => 0,
            ChannelTag::DenseFeature => 1,
            ChannelTag::Coefficient => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ChannelTag::Color),
            1 => Some(ChannelTag::DenseFeature),
            2 => Some(ChannelTag::Coefficient),
            _ => None,
        }
    }
}

/// H×W×C grid of f32, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Framebuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub tag: ChannelTag,
    pub data: Vec<f32>,
}

impl Framebuffer {
    pub fn zeros(width: usize, height: usize, channels: usize, tag: ChannelTag) -> Self {
        Self {
            width,
            height,
            channels,
            tag,
            data: vec![0.0; width * height * channels],
        }
    }

    /// Reshapes in place and zero-fills, keeping the allocation.
    pub fn reset(&mut self, width: usize, height: usize, channels: usize, tag: ChannelTag) {
        self.width = width;
        self.height = height;
        self.channels = channels;
        self.tag = tag;
        self.data.clear();
        self.data.resize(width * height * channels, 0.0);
    }

    pub fn from_data(width: usize, height: usize, channels: usize, tag: ChannelTag, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch {
                what: "framebuffer entries",
                expected: width * height * channels,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            tag,
            data,
        })
    }

    pub fn pixel(&self, col: usize, row: usize) -> &[f32] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.channels.max(1))
    }

    /// Largest absolute entrywise difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Framebuffer) -> f32 {
        if (self.width, self.height, self.channels) != (other.width, other.height, other.channels) {
            return f32::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Coefficient buffers must hold per-group sums of at most one, with
    /// every entry in [0, 1]. `group` is the channel count per level.
    pub fn check_coefficient_invariants(&self, group: usize) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("framebuffer has non-finite entries"));
        }
        if self.tag != ChannelTag::Coefficient {
            return Ok(());
        }
        if group == 0 || !self.channels.is_multiple_of(group) {
            return Err(Error::validation("coefficient group does not divide channel count"));
        }
        for px in self.pixels() {
            for level in px.chunks_exact(group) {
                if level.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                    return Err(Error::validation("coefficient entry outside [0, 1]"));
                }
                if level.iter().map(|&v| v as f64).sum::<f64>() > 1.0 + 1e-5 {
                    return Err(Error::validation("coefficient mass exceeds one"));
                }
            }
        }
        Ok(())
    }
}

/// Counters gathered while compositing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RasterStats {
    /// (Gaussian, pixel) pairs that were blended.
    pub blends: u64,
    /// Individual channel accumulations.
    pub channel_updates: u64,
}

impl RasterStats {
    fn merge(self, other: Self) -> Self {
        Self {
            blends: self.blends + other.blends,
            channel_updates: self.channel_updates + other.channel_updates,
        }
    }

    /// Mean number of channels touched per blended Gaussian.
    pub fn channels_per_blend(&self) -> f64 {
        if self.blends == 0 {
            0.0
        } else {
            self.channel_updates as f64 / self.blends as f64
        }
    }
}

/// What a Gaussian deposits into a pixel accumulator.
pub trait BlendPayload: Sync {
    fn channels(&self) -> usize;

    /// Adds `weight` times the Gaussian's channel vector into `acc` and
    /// returns the number of channels touched.
    fn blend(&self, index: usize, weight: f32, acc: &mut [f32]) -> usize;
}

/// Row-major N×C table of per-Gaussian channel values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseChannels {
    pub channels: usize,
    pub values: Vec<f32>,
}

impl DenseChannels {
    pub fn new(channels: usize, values: Vec<f32>) -> Result<Self> {
        if channels == 0 || !values.len().is_multiple_of(channels) {
            return Err(Error::validation("channel table length must be a multiple of C"));
        }
        Ok(Self { channels, values })
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.values[index * self.channels..(index + 1) * self.channels]
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl BlendPayload for DenseChannels {
    fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    fn blend(&self, index: usize, weight: f32, acc: &mut [f32]) -> usize {
        for (a, &v) in acc.iter_mut().zip(self.row(index)) {
            *a += v * weight;
        }
        self.channels
    }
}

/// Walks one pixel's front-to-back list, calling `visit(index, weight)` for
/// each contributing Gaussian (index into the scene). Returns the final
/// transmittance.
#[inline]
pub fn composite_pixel(binning: &TileBinning, list: &[u32], px: f32, py: f32, mut visit: impl FnMut(usize, f32)) -> f32 {
    let mut transmittance = 1.0f32;
    for &pi in list {
        let p = &binning.projected[pi as usize];
        let d2 = p.mahalanobis_sq(px, py);
        if d2 > projection::CUTOFF_MAHALANOBIS_SQ {
            continue;
        }
        let alpha = (p.opacity * (-0.5 * d2).exp()).min(MAX_ALPHA);
        let weight = alpha * transmittance;
        visit(p.index as usize, weight);
        transmittance *= 1.0 - alpha;
        if transmittance < TRANSMITTANCE_EPSILON {
            break;
        }
    }
    transmittance
}

/// Pixels composited together by [`composite_row`].
pub const ROW_LANES: usize = 16;

/// [`composite_pixel`] for up to [`ROW_LANES`] adjacent pixels of one row,
/// sharing a single pass over the list. The coverage test runs across all
/// lanes at once; per pixel the arithmetic and its order are unchanged, so
/// results are bit-identical. `visit` receives (lane, index, weight).
#[inline]
pub fn composite_row(
    binning: &TileBinning,
    list: &[u32],
    cols: Range<usize>,
    py: f32,
    mut visit: impl FnMut(usize, usize, f32),
) -> [f32; ROW_LANES] {
    assert!(cols.len() <= ROW_LANES, "row span wider than {ROW_LANES} lanes");
    let mut px = [0.0f32; ROW_LANES];
    for (lane, col) in cols.clone().enumerate() {
        px[lane] = col as f32 + 0.5;
    }
    let mut transmittance = [1.0f32; ROW_LANES];
    let mut live: u32 = (1u32 << cols.len()) - 1;
    let mut d2 = [0.0f32; ROW_LANES];
    for &pi in list {
        if live == 0 {
            break;
        }
        let p = &binning.projected[pi as usize];
        let dy = py - p.mean2d[1];
        let [a, b, c] = p.inv_cov2d;
        let mut hit = 0u32;
        for lane in 0..ROW_LANES {
            let dx = px[lane] - p.mean2d[0];
            d2[lane] = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
            hit |= u32::from(!(d2[lane] > projection::CUTOFF_MAHALANOBIS_SQ)) << lane;
        }
        hit &= live;
        while hit != 0 {
            let lane = hit.trailing_zeros() as usize;
            hit &= hit - 1;
            let alpha = (p.opacity * (-0.5 * d2[lane]).exp()).min(MAX_ALPHA);
            visit(lane, p.index as usize, alpha * transmittance[lane]);
            transmittance[lane] *= 1.0 - alpha;
            if transmittance[lane] < TRANSMITTANCE_EPSILON {
                live &= !(1u32 << lane);
            }
        }
    }
    transmittance
}

/// Tile-parallel compositing of an arbitrary payload. `background`, when
/// given, is added with the final transmittance as weight.
pub fn rasterize<P: BlendPayload>(
    binning: &TileBinning,
    payload: &P,
    tag: ChannelTag,
    background: Option<&[f32]>,
) -> (Framebuffer, RasterStats) {
    let mut fb = Framebuffer::zeros(0, 0, 0, tag);
    let stats = rasterize_into(binning, payload, tag, background, &mut fb);
    (fb, stats)
}

/// Like [`rasterize`], but renders into `fb`, reusing its allocation.
pub fn rasterize_into<P: BlendPayload>(
    binning: &TileBinning,
    payload: &P,
    tag: ChannelTag,
    background: Option<&[f32]>,
    fb: &mut Framebuffer,
) -> RasterStats {
    let channels = payload.channels();
    fb.reset(binning.width, binning.height, channels, tag);
    if fb.data.is_empty() {
        return RasterStats::default();
    }
    let ts = binning.tile_size;
    let row_stride = binning.width * channels;
    fb.data
        .par_chunks_mut(ts * row_stride)
        .enumerate()
        .map(|(ty, band)| {
            let mut stats = RasterStats::default();
            for tx in 0..binning.tiles_x {
                let tile = ty * binning.tiles_x + tx;
                let list = binning.tile_list(tile);
                let (cols, rows) = binning.tile_pixels(tile);
                for row in rows.clone() {
                    let local = (row - rows.start) * row_stride;
                    for start in cols.clone().step_by(ROW_LANES) {
                        let span = start..(start + ROW_LANES).min(cols.end);
                        let base = local + start * channels;
                        let t_final = composite_row(binning, list, span.clone(), row as f32 + 0.5, |lane, i, w| {
                            let acc = &mut band[base + lane * channels..base + (lane + 1) * channels];
                            stats.blends += 1;
                            stats.channel_updates += payload.blend(i, w, acc) as u64;
                        });
                        if let Some(bg) = background {
                            for (lane, t) in t_final.iter().take(span.len()).enumerate() {
                                let acc = &mut band[base + lane * channels..base + (lane + 1) * channels];
                                for (a, &b) in acc.iter_mut().zip(bg) {
                                    *a += t * b;
                                }
                            }
                        }
                    }
                }
            }
            stats
        })
        .reduce(RasterStats::default, RasterStats::merge)
}

/// Per-Gaussian channel values to composite.
#[derive(Debug, Clone, PartialEq)]
pub enum ChannelSource {
    /// Degree-0 RGB.
    Color,
    /// Features reconstructed from the level's codebook (D channels).
    Features { level: usize },
    /// Densified L-dimensional coefficients of one level.
    Coefficients { level: usize },
    /// Caller-supplied table indexed like `scene.gaussians`.
    Custom(DenseChannels),
}

impl ChannelSource {
    pub fn channels(&self, scene: &Scene) -> usize {
        match self {
            ChannelSource::Color => 3,
            ChannelSource::Features { .. } => scene.config.feature_dim,
            ChannelSource::Coefficients { .. } => scene.config.num_atoms,
            ChannelSource::Custom(t) => t.channels,
        }
    }

    pub fn tag(&self) -> ChannelTag {
        match self {
            ChannelSource::Color => ChannelTag::Color,
            ChannelSource::Features { .. } | ChannelSource::Custom(_) => ChannelTag::DenseFeature,
            ChannelSource::Coefficients { .. } => ChannelTag::Coefficient,
        }
    }

    /// Materializes the N×C table.
    pub fn table(&self, scene: &Scene) -> Result<DenseChannels> {
        let level_of = |level: usize| -> Result<usize> {
            if level >= scene.config.num_levels {
                return Err(Error::validation(format!("level {level} not in scene")));
            }
            Ok(level)
        };
        let values = match self {
            ChannelSource::Color => scene.gaussians.iter().flat_map(|g| g.color).collect(),
            ChannelSource::Features { level } => {
                let level = level_of(*level)?;
                let cb = &scene.codebooks[level];
                let mut v = Vec::with_capacity(scene.len() * cb.dim());
                for g in &scene.gaussians {
                    v.extend(reconstruct_feature(&g.coeffs[level], cb)?);
                }
                v
            }
            ChannelSource::Coefficients { level } => {
                let level = level_of(*level)?;
                let mut v = Vec::with_capacity(scene.len() * scene.config.num_atoms);
                for g in &scene.gaussians {
                    v.extend(densify(&g.coeffs[level], scene.config.num_atoms)?);
                }
                v
            }
            ChannelSource::Custom(t) => {
                if t.len() != scene.len() {
                    return Err(Error::DimensionMismatch {
                        what: "custom channel rows",
                        expected: scene.len(),
                        actual: t.len(),
                    });
                }
                return Ok(t.clone());
            }
        };
        DenseChannels::new(self.channels(scene), values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOptions {
    pub memory_budget: usize,
    /// Added behind the scene for color renders only.
    pub background: [f32; 3],
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            memory_budget: DEFAULT_MEMORY_BUDGET,
            background: [0.0; 3],
        }
    }
}

/// Rejects renders whose buffers would exceed the budget.
pub fn check_budget(requested: usize, budget: usize) -> Result<()> {
    if requested > budget {
        return Err(Error::ResourceExhausted { requested, budget });
    }
    Ok(())
}

/// Composites C channels per Gaussian. Cost grows linearly with C.
pub fn render_dense(scene: &Scene, cam: &Camera, source: &ChannelSource, opts: &RenderOptions) -> Result<Framebuffer> {
    Ok(render_dense_with_stats(scene, cam, source, opts)?.0)
}

pub fn render_dense_with_stats(
    scene: &Scene,
    cam: &Camera,
    source: &ChannelSource,
    opts: &RenderOptions,
) -> Result<(Framebuffer, RasterStats)> {
    let channels = source.channels(scene);
    let requested = (cam.num_pixels() + scene.len()).saturating_mul(channels * std::mem::size_of::<f32>());
    check_budget(requested, opts.memory_budget)?;
    let table = source.table(scene)?;
    let binning = projection::prepare(scene, cam)?;
    Ok(render_binned(&binning, &table, source.tag(), opts))
}

/// Dense compositing over a binning that was already computed.
pub fn render_binned(binning: &TileBinning, table: &DenseChannels, tag: ChannelTag, opts: &RenderOptions) -> (Framebuffer, RasterStats) {
    let bg = (tag == ChannelTag::Color && table.channels == 3).then_some(&opts.background[..]);
    rasterize(binning, table, tag, bg)
}

/// Blends pre-evaluated `(alpha, channels)` pairs already in depth order.
/// Alphas are clamped to [0, 0.99]; stops once transmittance drops below
/// [`TRANSMITTANCE_EPSILON`].
pub fn blend_pixel_dense(ordered: &[(f32, &[f32])], channels: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; channels];
    let mut transmittance = 1.0f32;
    for &(alpha, values) in ordered {
        let alpha = alpha.clamp(0.0, MAX_ALPHA);
        let weight = alpha * transmittance;
        for (o, &v) in out.iter_mut().zip(values) {
            *o += v * weight;
        }
        transmittance *= 1.0 - alpha;
        if transmittance < TRANSMITTANCE_EPSILON {
            break;
        }
    }
    out
}

/// Reference renderer: no tiles, a full per-pixel depth sort over every
/// projected Gaussian, and double-precision accumulation. Only the 3σ
/// coverage predicate is shared with the fast path. Slow by construction.
pub fn oracle_render(scene: &Scene, cam: &Camera, source: &ChannelSource, opts: &RenderOptions, early_exit: bool) -> Result<Framebuffer> {
    let table = source.table(scene)?;
    let projected = projection::project_scene(scene, cam)?;
    let channels = table.channels;
    let background = (source.tag() == ChannelTag::Color && channels == 3).then_some(opts.background);
    let mut data = vec![0.0f32; cam.num_pixels() * channels];
    data.par_chunks_mut(channels.max(1) * cam.width)
        .enumerate()
        .for_each(|(row, out_row)| {
            let py = row as f32 + 0.5;
            let mut acc = vec![0.0f64; channels];
            for col in 0..cam.width {
                let px = col as f32 + 0.5;
                let mut hits: Vec<_> = projected.iter().filter(|p| p.covers(px, py)).collect();
                hits.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.source_id.cmp(&b.source_id)));
                acc.iter_mut().for_each(|a| *a = 0.0);
                let mut transmittance = 1.0f64;
                for p in hits {
                    let dx = px as f64 - p.mean2d[0] as f64;
                    let dy = py as f64 - p.mean2d[1] as f64;
                    let [a, b, c] = p.inv_cov2d.map(|v| v as f64);
                    let d2 = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
                    let alpha = (p.opacity as f64 * (-0.5 * d2).exp()).min(MAX_ALPHA as f64);
                    let weight = alpha * transmittance;
                    for (o, &v) in acc.iter_mut().zip(table.row(p.index as usize)) {
                        *o += v as f64 * weight;
                    }
                    transmittance *= 1.0 - alpha;
                    if early_exit && transmittance < TRANSMITTANCE_EPSILON as f64 {
                        break;
                    }
                }
                if let Some(bg) = background {
                    for (o, &b) in acc.iter_mut().zip(&bg) {
                        *o += transmittance * b as f64;
                    }
                }
                for (dst, &v) in out_row[col * channels..(col + 1) * channels].iter_mut().zip(&acc) {
                    *dst = v as f32;
                }
            }
        });
    Framebuffer::from_data(cam.width, cam.height, channels, source.tag(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blend_single_clamped() {
        let c = [0.5f32, -2.0];
        assert_eq!(blend_pixel_dense(&[(1.0, &c)], 2), vec![0.99 * 0.5, 0.99 * -2.0]);
    }

    #[test]
    fn row_walk_matches_pixel_walk_bitwise() {
        use crate::io::synthetic::{default_camera, random_scene};
        use crate::scene::SceneConfig;
        let cfg = SceneConfig {
            num_levels: 1,
            num_atoms: 4,
            top_k: 2,
            feature_dim: 2,
        };
        let scene = random_scene(5, 400, cfg).unwrap();
        let cam = default_camera(40, 24).unwrap();
        let binning = projection::prepare(&scene, &cam).unwrap();
        for tile in 0..binning.num_tiles() {
            let list = binning.tile_list(tile);
            let (cols, rows) = binning.tile_pixels(tile);
            for row in rows {
                let py = row as f32 + 0.5;
                let mut by_row = vec![Vec::new(); cols.len()];
                let t_row = composite_row(&binning, list, cols.clone(), py, |lane, i, w| by_row[lane].push((i, w.to_bits())));
                for (lane, col) in cols.clone().enumerate() {
                    let mut by_pixel = Vec::new();
                    let t = composite_pixel(&binning, list, col as f32 + 0.5, py, |i, w| by_pixel.push((i, w.to_bits())));
                    assert_eq!(by_row[lane], by_pixel);
                    assert_eq!(t_row[lane].to_bits(), t.to_bits());
                }
            }
        }
    }

    #[test]
    fn blend_empty_is_zero() {
        assert_eq!(blend_pixel_dense(&[], 4), vec![0.0; 4]);
    }

    #[test]
    fn blend_matches_recurrence_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let n = rng.random_range(1..8);
            let alphas: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..0.99)).collect();
            let vals: Vec<[f32; 1]> = (0..n).map(|_| [rng.random_range(-1.0..1.0)]).collect();
            let items: Vec<(f32, &[f32])> = alphas.iter().zip(&vals).map(|(&a, v)| (a, &v[..])).collect();
            let got = blend_pixel_dense(&items, 1)[0] as f64;
            // C = Σ c_i α_i Π_{j<i} (1 − α_j), extended precision, no early exit
            let expected: f64 = (0..n)
                .map(|i| {
                    let prod: f64 = (0..i).map(|j| 1.0 - alphas[j] as f64).product();
                    vals[i][0] as f64 * alphas[i] as f64 * prod
                })
                .sum();
            let tail: f64 = alphas.iter().map(|&a| 1.0 - a as f64).product();
            if tail >= 2e-4 {
                assert!((got - expected).abs() <= 1e-6, "{got} vs {expected}");
            } else {
                assert!((got - expected).abs() <= 1e-4);
            }
        }
    }

    #[test]
    fn tag_codes_round_trip() {
        for t in [ChannelTag::Color, ChannelTag::DenseFeature, ChannelTag::Coefficient] {
            assert_eq!(ChannelTag::from_code(t.code()), Some(t));
        }
        assert_eq!(ChannelTag::from_code(9), None);
    }

    #[test]
    fn budget_guard() {
        assert!(check_budget(10, 10).is_ok());
        assert!(matches!(check_budget(11, 10), Err(Error::ResourceExhausted { .. })));
    }

    #[test]
    fn coefficient_invariant_check() {
        let fb = Framebuffer::from_data(1, 1, 4, ChannelTag::Coefficient, vec![0.5, 0.4, 0.0, 0.0]).unwrap();
        assert!(fb.check_coefficient_invariants(4).is_ok());
        let fb = Framebuffer::from_data(1, 1, 4, ChannelTag::Coefficient, vec![0.5, 0.5, 0.6, 0.4]).unwrap();
        assert!(fb.check_coefficient_invariants(4).is_err());
        assert!(fb.check_coefficient_invariants(2).is_ok());
        assert!(fb.check_coefficient_invariants(3).is_err());
    }
}
