//! Seeded synthetic scenes with known semantics.
//!
//! Gaussians lie near the z = 0 plane inside [-1, 1]², each assigned to one
//! of A classes. At level 0 a Gaussian's coefficient is one-hot on its class
//! atom; at level ℓ classes are merged in groups of 2^ℓ (group `c >> ℓ`) and
//! the group atom is the mean of its members' class atoms.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{QueryEntry, QuerySetFile};
use crate::camera::{Camera, CameraPose};
use crate::codebook::Codebook;
use crate::coeffs::SparseCoefficients;
use crate::gaussian::{normalize_quaternion, Gaussian};
use crate::query::Mask;
use crate::raster::{render_dense, ChannelSource, DenseChannels, Framebuffer, RenderOptions};
use crate::scene::{Scene, SceneConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Classes occupy disjoint cells of a rows×cols grid.
    Grid,
    /// Classes are isotropic blobs around random centers and may overlap.
    Clustered,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(Layout::Grid),
            "clustered" => Ok(Layout::Clustered),
            other => Err(Error::validation(format!("unknown layout {other:?} (grid | clustered)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub num_gaussians: usize,
    pub num_classes: usize,
    pub layout: Layout,
    pub width: usize,
    pub height: usize,
    pub feature_dim: usize,
    pub num_atoms: usize,
    pub top_k: usize,
    pub num_levels: usize,
    pub num_cameras: usize,
    /// Norm of the generated class atoms.
    pub atom_scale: f32,
    pub num_canonicals: usize,
    /// Explicit class atoms (A vectors of length D); generated when absent.
    #[serde(default)]
    pub class_atoms: Option<Vec<Vec<f32>>>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_gaussians: 256,
            num_classes: 8,
            layout: Layout::Grid,
            width: 64,
            height: 64,
            feature_dim: 16,
            num_atoms: 64,
            top_k: 4,
            num_levels: 3,
            num_cameras: 4,
            atom_scale: 1.0,
            num_canonicals: 4,
            class_atoms: None,
        }
    }
}

impl SyntheticSpec {
    pub fn config(&self) -> SceneConfig {
        SceneConfig {
            num_levels: self.num_levels,
            num_atoms: self.num_atoms,
            top_k: self.top_k,
            feature_dim: self.feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config().validate()?;
        if self.num_classes < 2 {
            return Err(Error::validation("need at least 2 classes"));
        }
        if self.num_classes > self.num_atoms {
            return Err(Error::validation(format!(
                "{} classes exceed the codebook size L={}",
                self.num_classes, self.num_atoms
            )));
        }
        if self.num_gaussians < self.num_classes {
            return Err(Error::validation("need at least one Gaussian per class"));
        }
        if self.width == 0 || self.height == 0 || self.num_cameras == 0 {
            return Err(Error::validation("image size and camera count must be positive"));
        }
        if !(self.atom_scale.is_finite() && self.atom_scale > 0.0) {
            return Err(Error::validation("atom scale must be positive"));
        }
        if let Some(atoms) = &self.class_atoms {
            if atoms.len() != self.num_classes {
                return Err(Error::DimensionMismatch {
                    what: "class atoms",
                    expected: self.num_classes,
                    actual: atoms.len(),
                });
            }
            if let Some(a) = atoms.iter().find(|a| a.len() != self.feature_dim) {
                return Err(Error::DimensionMismatch {
                    what: "class atom length",
                    expected: self.feature_dim,
                    actual: a.len(),
                });
            }
        }
        Ok(())
    }

    /// Camera 0 looks straight at the scene; the others sit on a small
    /// circle around it.
    pub fn camera_poses(&self) -> Vec<CameraPose> {
        (0..self.num_cameras)
            .map(|i| {
                let (ox, oy) = if i == 0 {
                    (0.0, 0.0)
                } else {
                    let t = std::f64::consts::TAU * (i - 1) as f64 / (self.num_cameras - 1) as f64;
                    (0.4 * t.cos(), 0.4 * t.sin())
                };
                CameraPose {
                    eye: [ox, oy, -2.7],
                    target: [0.0, 0.0, 0.0],
                    up: [0.0, -1.0, 0.0],
                    fov_y_deg: 45.0,
                    width: self.width,
                    height: self.height,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticBundle {
    pub spec: SyntheticSpec,
    /// Scene carrying the ground-truth coefficients and codebooks.
    pub scene: Scene,
    /// Class of each Gaussian, parallel to `scene.gaussians`.
    pub classes: Vec<usize>,
    pub cameras: Vec<CameraPose>,
    /// `[camera][level]` rendered ground-truth feature maps.
    pub targets: Vec<Vec<Framebuffer>>,
    /// `[camera][class]` masks from thresholding rendered class indicators.
    pub class_masks: Vec<Vec<Mask>>,
    /// One query per class (vector = level-0 class atom) and the canonical
    /// vectors.
    pub query_set: QuerySetFile,
}

fn unit_normal(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Up to `count` orthonormal vectors (fewer if `count > dim`).
fn orthonormal(rng: &mut ChaCha8Rng, dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < count.min(dim) {
        let mut v = unit_normal(rng, dim);
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn to_f32(v: &[f64], scale: f64) -> Vec<f32> {
    v.iter().map(|&x| (x * scale) as f32).collect()
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Result<[f32; 4]> {
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    normalize_quaternion(q)
}

fn rotation_about_z(angle: f64) -> Result<[f32; 4]> {
    normalize_quaternion([(angle * 0.5).cos(), 0.0, 0.0, (angle * 0.5).sin()])
}

/// Random K-sparse simplex vector.
pub fn random_coefficients(rng: &mut ChaCha8Rng, num_atoms: usize, k: usize) -> SparseCoefficients {
    let mut idx: Vec<u16> = sample(rng, num_atoms, k).into_iter().map(|i| i as u16).collect();
    idx.sort_unstable();
    let raw: Vec<f64> = (0..k).map(|_| -rng.random_range(1e-3f64..1.0).ln()).collect();
    let sum: f64 = raw.iter().sum();
    let values = raw.iter().map(|v| (v / sum) as f32).collect();
    SparseCoefficients::new(idx, values).expect("normalized weights form a simplex")
}

/// Camera at the origin looking down +z with a 50° vertical field of view.
pub fn default_camera(width: usize, height: usize) -> Result<Camera> {
    Camera::look_at(&CameraPose {
        eye: [0.0, 0.0, 0.0],
        target: [0.0, 0.0, 1.0],
        up: [0.0, -1.0, 0.0],
        fov_y_deg: 50.0,
        width,
        height,
    })
}

/// Unstructured random scene in front of [`default_camera`]: random
/// geometry, random K-sparse coefficients and random codebooks.
/// Sampling ranges for [`random_scene_with`]; all uniform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomSceneParams {
    pub depth: (f32, f32),
    pub scale: (f32, f32),
    pub opacity: (f32, f32),
}

impl Default for RandomSceneParams {
    fn default() -> Self {
        Self {
            depth: (2.0, 5.0),
            scale: (0.01, 0.15),
            opacity: (0.05, 0.95),
        }
    }
}

impl RandomSceneParams {
    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f32, f32)| lo.is_finite() && hi.is_finite() && lo > 0.0 && lo < hi;
        if !ok(self.depth) || !ok(self.scale) || !ok(self.opacity) || self.opacity.1 > 1.0 {
            return Err(Error::validation("random scene ranges must be positive, increasing, opacity ≤ 1"));
        }
        Ok(())
    }
}

pub fn random_scene(seed: u64, count: usize, config: SceneConfig) -> Result<Scene> {
    random_scene_with(seed, count, config, &RandomSceneParams::default())
}

/// Gaussians spread through the view frustum of [`default_camera`], with
/// random coefficients and uniform random codebooks in [−1, 1].
pub fn random_scene_with(seed: u64, count: usize, config: SceneConfig, params: &RandomSceneParams) -> Result<Scene> {
    config.validate()?;
    params.validate()?;
    // separate streams so geometry does not depend on L, K or D
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sem = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
    let mut gaussians = Vec::with_capacity(count);
    for id in 0..count {
        let z = rng.random_range(params.depth.0..params.depth.1);
        let half = z * 0.5;
        gaussians.push(Gaussian {
            id: id as u32,
            position: [rng.random_range(-half..half), rng.random_range(-half..half), z],
            rotation: random_rotation(&mut rng)?,
            scale: std::array::from_fn(|_| rng.random_range(params.scale.0..params.scale.1)),
            opacity: rng.random_range(params.opacity.0..params.opacity.1),
            color: std::array::from_fn(|_| rng.random_range(0.0f32..1.0)),
            coeffs: (0..config.num_levels)
                .map(|_| random_coefficients(&mut sem, config.num_atoms, config.top_k))
                .collect(),
        });
    }
    let codebooks = (0..config.num_levels)
        .map(|level| {
            let atoms = (0..config.num_atoms * config.feature_dim)
                .map(|_| sem.random_range(-1.0f32..1.0))
                .collect();
            Codebook::new(level as u8, config.num_atoms, config.feature_dim, atoms)
        })
        .collect::<Result<_>>()?;
    Scene::new(config, gaussians, codebooks)
}

fn grid_shape(classes: usize) -> (usize, usize) {
    let rows = (1..=classes)
        .filter(|r| classes.is_multiple_of(*r) && r * r <= classes)
        .max()
        .unwrap_or(1);
    (rows, classes / rows)
}

/// (position, scale, rotation) for every Gaussian, with its class.
#[allow(clippy::type_complexity)]
fn place(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, [f32; 3], [f32; 3], [f32; 4])>> {
    let a = spec.num_classes;
    let mut out = Vec::with_capacity(spec.num_gaussians);
    match spec.layout {
        Layout::Grid => {
            let (rows, cols) = grid_shape(a);
            let (cw, ch) = (2.0 / cols as f64, 2.0 / rows as f64);
            for c in 0..a {
                let n = spec.num_gaussians / a + usize::from(c < spec.num_gaussians % a);
                let (x0, y0) = (-1.0 + (c % cols) as f64 * cw, -1.0 + (c / cols) as f64 * ch);
                let nx = ((n as f64 * cw / ch).sqrt().round() as usize).clamp(1, n);
                let ny = n.div_ceil(nx);
                let (sx, sy) = (cw / nx as f64, ch / ny as f64);
                for i in 0..n {
                    let (ix, iy) = (i % nx, i / nx);
                    let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-0.15..0.15);
                    let x = x0 + (ix as f64 + 0.5 + jitter(rng)) * sx;
                    let y = y0 + (iy as f64 + 0.5 + jitter(rng)) * sy;
                    let z = rng.random_range(-0.05..0.05);
                    let k = rng.random_range(0.9..1.1);
                    let scale = [0.55 * sx * k, 0.55 * sy * k, 0.05 * sx.min(sy)].map(|v| v as f32);
                    let rot = rotation_about_z(rng.random_range(-0.2..0.2))?;
                    out.push((c, [x as f32, y as f32, z as f32], scale, rot));
                }
            }
        }
        Layout::Clustered => {
            let centers: Vec<[f64; 2]> = (0..a)
                .map(|_| [rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7)])
                .collect();
            for i in 0..spec.num_gaussians {
                let c = i % a;
                let dx: f64 = StandardNormal.sample(rng);
                let dy: f64 = StandardNormal.sample(rng);
                let x = (centers[c][0] + 0.18 * dx).clamp(-1.0, 1.0);
                let y = (centers[c][1] + 0.18 * dy).clamp(-1.0, 1.0);
                let z = rng.random_range(-0.2..0.2);
                let s = rng.random_range(0.05..0.1);
                let scale = [s, s * rng.random_range(0.6..1.0), 0.3 * s].map(|v| v as f32);
                out.push((c, [x as f32, y as f32, z as f32], scale, random_rotation(rng)?));
            }
        }
    }
    Ok(out)
}

/// Builds the scene, renders per-camera targets and class masks. A pure
/// function of the spec.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (a, d, l) = (spec.num_classes, spec.feature_dim, spec.num_atoms);
    let scale = spec.atom_scale as f64;

    let basis = orthonormal(&mut rng, d, a + spec.num_canonicals);
    let class_atoms: Vec<Vec<f32>> = match &spec.class_atoms {
        Some(atoms) => atoms.clone(),
        None => (0..a)
            .map(|c| match basis.get(c) {
                Some(b) => to_f32(b, scale),
                None => to_f32(&unit_normal(&mut rng, d), scale),
            })
            .collect(),
    };
    let canonicals: Vec<Vec<f32>> = (0..spec.num_canonicals)
        .map(|k| match basis.get(a + k) {
            Some(b) if spec.class_atoms.is_none() => to_f32(b, 1.0),
            _ => to_f32(&unit_normal(&mut rng, d), 1.0),
        })
        .collect();

    let mut codebooks = Vec::with_capacity(spec.num_levels);
    for level in 0..spec.num_levels {
        let groups = a.div_ceil(1 << level);
        let mut atoms = Vec::with_capacity(l * d);
        for g in 0..l {
            if g < groups {
                let members: Vec<usize> = ((g << level)..((g + 1) << level).min(a)).collect();
                for j in 0..d {
                    let s: f64 = members.iter().map(|&c| class_atoms[c][j] as f64).sum();
                    atoms.push((s / members.len() as f64) as f32);
                }
            } else {
                atoms.extend(to_f32(&unit_normal(&mut rng, d), scale));
            }
        }
        codebooks.push(Codebook::new(level as u8, l, d, atoms)?);
    }

    let placed = place(spec, &mut rng)?;
    let mut gaussians = Vec::with_capacity(placed.len());
    let mut classes = Vec::with_capacity(placed.len());
    for (id, (c, position, scale, rotation)) in placed.into_iter().enumerate() {
        let hue = c as f32 / a as f32;
        let color = [hue, 1.0 - hue, 0.5 + 0.5 * (hue * 6.0).sin()].map(|v| (v + rng.random_range(-0.05f32..0.05)).clamp(0.0, 1.0));
        let coeffs = (0..spec.num_levels)
            .map(|level| SparseCoefficients::one_hot_k((c >> level) as u16, spec.top_k, l))
            .collect::<Result<_>>()?;
        gaussians.push(Gaussian {
            id: id as u32,
            position,
            rotation,
            scale,
            opacity: rng.random_range(0.85f32..0.95),
            color,
            coeffs,
        });
        classes.push(c);
    }
    let scene = Scene::new(spec.config(), gaussians, codebooks)?;

    let mut indicator = vec![0.0f32; scene.len() * a];
    for (i, &c) in classes.iter().enumerate() {
        indicator[i * a + c] = 1.0;
    }
    let indicator = ChannelSource::Custom(DenseChannels::new(a, indicator)?);
    let opts = RenderOptions::default();
    let cameras = spec.camera_poses();
    let mut targets = Vec::with_capacity(cameras.len());
    let mut class_masks = Vec::with_capacity(cameras.len());
    for pose in &cameras {
        let cam = Camera::look_at(pose)?;
        targets.push(
            (0..spec.num_levels)
                .map(|level| render_dense(&scene, &cam, &ChannelSource::Features { level }, &opts))
                .collect::<Result<Vec<_>>>()?,
        );
        let ind = render_dense(&scene, &cam, &indicator, &opts)?;
        class_masks.push(
            (0..a)
                .map(|c| Mask {
                    width: spec.width,
                    height: spec.height,
                    bits: ind.pixels().map(|px| px[c] > 0.5).collect(),
                })
                .collect(),
        );
    }

    let query_set = QuerySetFile {
        dim: d,
        canonicals,
        queries: class_atoms
            .iter()
            .enumerate()
            .map(|(c, v)| QueryEntry {
                name: format!("class_{c}"),
                vector: v.clone(),
                gt_mask_path: None,
            })
            .collect(),
    };

    Ok(SyntheticBundle {
        spec: spec.clone(),
        scene,
        classes,
        cameras,
        targets,
        class_masks,
        query_set,
    })
}
