//! EWA projection of 3D Gaussians and depth-sorted tile binning.

use std::ops::Range;

use nalgebra::{Matrix2x3, Vector3};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::gaussian::{build_covariance, Gaussian};
use crate::scene::Scene;
use crate::Result;

/// Added to the screen-space covariance diagonal before inversion (px²).
pub const LOW_PASS_FLOOR: f64 = 0.3;
/// A pixel is covered when its squared Mahalanobis distance is at most 3².
pub const CUTOFF_MAHALANOBIS_SQ: f32 = 9.0;
pub const MAX_ALPHA: f32 = 0.99;
pub const DEFAULT_TILE_SIZE: usize = 16;

/// Screen-space record consumed by the rasterizer. The 2×2 symmetric
/// matrices are stored as (xx, xy, yy).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    pub mean2d: [f32; 2],
    pub cov2d: [f32; 3],
    pub inv_cov2d: [f32; 3],
    pub depth: f32,
    pub opacity: f32,
    pub source_id: u32,
    /// Position of the source Gaussian in the scene array.
    pub index: u32,
}

impl ProjectedGaussian {
    #[inline]
    pub fn mahalanobis_sq(&self, px: f32, py: f32) -> f32 {
        let dx = px - self.mean2d[0];
        let dy = py - self.mean2d[1];
        let [a, b, c] = self.inv_cov2d;
        a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    }

    /// Whether the pixel center lies inside the 3σ ellipse.
    #[inline]
    pub fn covers(&self, px: f32, py: f32) -> bool {
        self.mahalanobis_sq(px, py) <= CUTOFF_MAHALANOBIS_SQ
    }

    /// Half-widths of the axis-aligned box around the 3σ ellipse.
    pub fn extent(&self) -> [f32; 2] {
        [3.0 * self.cov2d[0].sqrt(), 3.0 * self.cov2d[2].sqrt()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CullReason {
    /// Camera-space depth at or before the near plane.
    Near,
    OffScreen,
    /// Screen covariance not invertible even after the low-pass floor.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Visible(ProjectedGaussian),
    Culled(CullReason),
}

impl Projection {
    pub fn visible(self) -> Option<ProjectedGaussian> {
        match self {
            Projection::Visible(p) => Some(p),
            Projection::Culled(_) => None,
        }
    }
}

/// Projects one Gaussian through the local affine approximation of the
/// pinhole map. `index` is recorded so rasterizers can look up per-Gaussian
/// payloads.
pub fn project_gaussian(g: &Gaussian, index: u32, cam: &Camera) -> Result<Projection> {
    let cov3 = build_covariance(g.rotation, g.scale)?;
    let world = Vector3::from(g.position.map(|v| v as f64));
    let t = cam.to_camera(&world);
    if !(t.z > cam.near) {
        return Ok(Projection::Culled(CullReason::Near));
    }
    let inv_z = 1.0 / t.z;
    let mean = [cam.fx * t.x * inv_z + cam.cx, cam.fy * t.y * inv_z + cam.cy];
    #[rustfmt::skip]
    let jac = Matrix2x3::new(
        cam.fx * inv_z, 0.0, -cam.fx * t.x * inv_z * inv_z,
        0.0, cam.fy * inv_z, -cam.fy * t.y * inv_z * inv_z,
    );
    let m = jac * cam.rotation;
    let cov = m * cov3 * m.transpose();
    let (xx, xy, yy) = (
        cov[(0, 0)] + LOW_PASS_FLOOR,
        0.5 * (cov[(0, 1)] + cov[(1, 0)]),
        cov[(1, 1)] + LOW_PASS_FLOOR,
    );
    let det = xx * yy - xy * xy;
    if !(det > 0.0) || !det.is_finite() {
        return Ok(Projection::Culled(CullReason::Degenerate));
    }
    let inv = [yy / det, -xy / det, xx / det];

    let p = ProjectedGaussian {
        mean2d: mean.map(|v| v as f32),
        cov2d: [xx as f32, xy as f32, yy as f32],
        inv_cov2d: inv.map(|v| v as f32),
        depth: t.z as f32,
        opacity: g.opacity,
        source_id: g.id,
        index,
    };
    if p.inv_cov2d.iter().chain(&p.mean2d).any(|v| !v.is_finite()) {
        return Ok(Projection::Culled(CullReason::Degenerate));
    }
    if pixel_span(p.mean2d[0], p.extent()[0], cam.width).is_empty()
        || pixel_span(p.mean2d[1], p.extent()[1], cam.height).is_empty()
    {
        return Ok(Projection::Culled(CullReason::OffScreen));
    }
    Ok(Projection::Visible(p))
}

/// Projects every Gaussian of the scene, dropping culled ones. Output keeps
/// scene order.
pub fn project_scene(scene: &Scene, cam: &Camera) -> Result<Vec<ProjectedGaussian>> {
    let projected: Result<Vec<Projection>> = scene
        .gaussians
        .par_iter()
        .enumerate()
        .map(|(i, g)| project_gaussian(g, i as u32, cam))
        .collect();
    Ok(projected?.into_iter().filter_map(Projection::visible).collect())
}

/// α = o·exp(−½·dᵀΣ⁻¹d), clamped to [0, 0.99].
#[inline]
pub fn eval_alpha(p: &ProjectedGaussian, pixel: [f32; 2]) -> f32 {
    let d2 = p.mahalanobis_sq(pixel[0], pixel[1]);
    (p.opacity * (-0.5 * d2).exp()).clamp(0.0, MAX_ALPHA)
}

/// Pixel indices whose centers fall within `center ± half_width`, padded
/// slightly so f32 rounding in the coverage test never escapes the span.
fn pixel_span(center: f32, half_width: f32, size: usize) -> Range<usize> {
    let half_width = half_width * (1.0 + 1e-4) + 1e-3;
    let lo = (center - half_width - 0.5).ceil().max(0.0);
    let hi = (center + half_width - 0.5).floor();
    if !(hi >= lo) || hi < 0.0 || lo >= size as f32 {
        return 0..0;
    }
    lo as usize..(hi as usize + 1).min(size)
}

/// Per-tile lists of projected Gaussians, each sorted by ascending depth
/// with ties broken by ascending source id. Stored in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct TileBinning {
    pub width: usize,
    pub height: usize,
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub projected: Vec<ProjectedGaussian>,
    offsets: Vec<usize>,
    entries: Vec<u32>,
}

impl TileBinning {
    pub fn num_tiles(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    /// Indices into `projected` for one tile, front to back.
    pub fn tile_list(&self, tile: usize) -> &[u32] {
        &self.entries[self.offsets[tile]..self.offsets[tile + 1]]
    }

    /// Pixel column and row ranges owned by a tile.
    pub fn tile_pixels(&self, tile: usize) -> (Range<usize>, Range<usize>) {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let cols = tx * self.tile_size..((tx + 1) * self.tile_size).min(self.width);
        let rows = ty * self.tile_size..((ty + 1) * self.tile_size).min(self.height);
        (cols, rows)
    }

    pub fn total_entries(&self) -> usize {
        self.entries.len()
    }
}

/// True when some pixel center in the given block lies inside the 3σ
/// ellipse. Per row the quadratic form is convex in x, so only the pixel
/// columns around its continuous minimizer need checking.
pub fn overlaps_block(p: &ProjectedGaussian, cols: Range<usize>, rows: Range<usize>) -> bool {
    if cols.is_empty() {
        return false;
    }
    if rows.is_empty() {
        return false;
    }
    // cheap accept: the block pixel nearest the center
    let nearest = |v: f32, r: &Range<usize>| ((v - 0.5).round() as i64).clamp(r.start as i64, r.end as i64 - 1) as f32 + 0.5;
    if p.covers(nearest(p.mean2d[0], &cols), nearest(p.mean2d[1], &rows)) {
        return true;
    }
    let [a, b, _] = p.inv_cov2d;
    let (first, last) = (cols.start as i64, cols.end as i64 - 1);
    for row in rows {
        let py = row as f32 + 0.5;
        let x_star = p.mean2d[0] - (b / a) * (py - p.mean2d[1]);
        let base = (x_star - 0.5).floor() as i64;
        for c in base - 1..=base + 2 {
            let c = c.clamp(first, last);
            if p.covers(c as f32 + 0.5, py) {
                return true;
            }
        }
    }
    false
}

/// Bins projected Gaussians into `tile_size` tiles. Pure: the output depends
/// only on the input set, not on its order or on scheduling.
pub fn bin_tiles(projected: Vec<ProjectedGaussian>, cam: &Camera, tile_size: usize) -> TileBinning {
    assert!(tile_size > 0, "tile size must be positive");
    let tiles_x = cam.width.div_ceil(tile_size);
    let tiles_y = cam.height.div_ceil(tile_size);

    // Visible depths are positive, so their bit patterns order like the
    // values; ties go to the lower source id. Emitting pairs in this order
    // and scattering them stably leaves every tile list sorted.
    let mut order: Vec<(u64, u32)> = projected
        .iter()
        .enumerate()
        .map(|(pi, g)| (((g.depth.to_bits() as u64) << 32) | g.source_id as u64, pi as u32))
        .collect();
    order.par_sort_unstable_by_key(|&(k, _)| k);

    let pairs: Vec<(u32, u32)> = order
        .par_iter()
        .flat_map_iter(|&(_, pi)| {
            let p = &projected[pi as usize];
            let [ex, ey] = p.extent();
            let cols = pixel_span(p.mean2d[0], ex, cam.width);
            let rows = pixel_span(p.mean2d[1], ey, cam.height);
            let (tx, ty) = if cols.is_empty() || rows.is_empty() {
                (0..0, 0..0)
            } else {
                (
                    cols.start / tile_size..(cols.end - 1) / tile_size + 1,
                    rows.start / tile_size..(rows.end - 1) / tile_size + 1,
                )
            };
            ty.flat_map(move |ty| tx.clone().map(move |tx| (tx, ty))).filter_map(move |(tx, ty)| {
                let tc = (tx * tile_size).max(cols.start)..((tx + 1) * tile_size).min(cols.end);
                let tr = (ty * tile_size).max(rows.start)..((ty + 1) * tile_size).min(rows.end);
                overlaps_block(p, tc, tr).then_some(((ty * tiles_x + tx) as u32, pi))
            })
        })
        .collect();

    let num_tiles = tiles_x * tiles_y;
    let mut offsets = vec![0usize; num_tiles + 1];
    for &(t, _) in &pairs {
        offsets[t as usize + 1] += 1;
    }
    for t in 0..num_tiles {
        offsets[t + 1] += offsets[t];
    }
    let mut cursor = offsets[..num_tiles].to_vec();
    let mut entries = vec![0u32; pairs.len()];
    for &(t, pi) in &pairs {
        entries[cursor[t as usize]] = pi;
        cursor[t as usize] += 1;
    }
    TileBinning {
        width: cam.width,
        height: cam.height,
        tile_size,
        tiles_x,
        tiles_y,
        projected,
        offsets,
        entries,
    }
}

/// Projection followed by binning with the default tile size.
pub fn prepare(scene: &Scene, cam: &Camera) -> Result<TileBinning> {
    cam.validate()?;
    Ok(bin_tiles(project_scene(scene, cam)?, cam, DEFAULT_TILE_SIZE))
}
