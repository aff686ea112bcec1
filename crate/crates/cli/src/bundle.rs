//! Directory layout written by `synth` and read by `train` and `query`.
//!
//! ```text
//! bundle.json                 manifest: spec, camera poses, target paths
//! scene.lsv2                  ground-truth scene
//! queries.json                one query per class plus canonicals
//! targets/cam{i}_level{l}.lsfb
//! masks/class_{c}.json        per-camera run-length masks
//! ```

use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use serde::{Deserialize, Serialize};
use sparsesplat::camera::CameraPose;
use sparsesplat::io::{dump_framebuffer, load_framebuffer, save_query_set, save_scene, SyntheticBundle, SyntheticSpec};
use sparsesplat::query::Mask;
use sparsesplat::raster::Framebuffer;

pub const MANIFEST: &str = "bundle.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    pub pose: CameraPose,
    /// One feature map per level, relative to the bundle directory.
    pub targets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SyntheticSpec,
    pub scene: String,
    pub queries: String,
    pub cameras: Vec<CameraEntry>,
}

/// Ground-truth masks of one class, one run-length list per camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskFile {
    pub width: usize,
    pub height: usize,
    pub cameras: Vec<Vec<u32>>,
}

impl MaskFile {
    pub fn mask(&self, camera: usize) -> Result<Mask> {
        let runs = self
            .cameras
            .get(camera)
            .with_context(|| format!("mask file has {} cameras, asked for {camera}", self.cameras.len()))?;
        Ok(Mask::from_rle(self.width, self.height, runs)?)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Writes every artifact and returns the paths, manifest first.
pub fn write_bundle(dir: &Path, bundle: &SyntheticBundle) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir.join("targets"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut written = Vec::new();

    let scene = "scene.lsv2";
    save_scene(dir.join(scene), &bundle.scene)?;
    written.push(dir.join(scene));

    let mut cameras = Vec::with_capacity(bundle.cameras.len());
    for (i, (pose, maps)) in bundle.cameras.iter().zip(&bundle.targets).enumerate() {
        let mut targets = Vec::with_capacity(maps.len());
        for (level, fb) in maps.iter().enumerate() {
            let rel = format!("targets/cam{i}_level{level}.lsfb");
            dump_framebuffer(dir.join(&rel), fb)?;
            written.push(dir.join(&rel));
            targets.push(rel);
        }
        cameras.push(CameraEntry { pose: pose.clone(), targets });
    }

    let mut queries = bundle.query_set.clone();
    for (class, entry) in queries.queries.iter_mut().enumerate() {
        let rel = format!("masks/class_{class}.json");
        let file = MaskFile {
            width: bundle.spec.width,
            height: bundle.spec.height,
            cameras: bundle.class_masks.iter().map(|per_class| per_class[class].to_rle()).collect(),
        };
        write_json(&dir.join(&rel), &file)?;
        written.push(dir.join(&rel));
        entry.gt_mask_path = Some(rel);
    }
    let queries_rel = "queries.json";
    save_query_set(dir.join(queries_rel), &queries)?;
    written.push(dir.join(queries_rel));

    let manifest = Manifest {
        spec: bundle.spec.clone(),
        scene: scene.into(),
        queries: queries_rel.into(),
        cameras,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    written.insert(0, dir.join(MANIFEST));
    Ok(written)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    read_json(&dir.join(MANIFEST))
}

impl Manifest {
    /// Feature maps of one camera, checked for presence and level count.
    pub fn load_targets(&self, dir: &Path, camera: usize) -> Result<Vec<Framebuffer>> {
        let entry = &self.cameras[camera];
        ensure!(
            entry.targets.len() == self.spec.num_levels,
            "camera {camera} lists {} targets, expected one per level ({})",
            entry.targets.len(),
            self.spec.num_levels
        );
        entry
            .targets
            .iter()
            .map(|rel| load_framebuffer(dir.join(rel)).with_context(|| format!("camera {camera} target {rel}")))
            .collect()
    }
}
