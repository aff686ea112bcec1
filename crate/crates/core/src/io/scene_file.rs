//! `LSV2` scene files.
//!
//! ```text
//! "LSV2" version:u32 count:u32 levels:u32 L:u32 K:u32 D:u32
//! count × { id:u32 position:f32×3 rotation:f32×4 scale:f32×3 opacity:f32
//!           color:f32×3 levels × { K × u16 index, K × f32 value } }
//! levels × { L×D f32, row-major }
//! ```

use std::path::Path;

use super::{invalid, put_f32s, put_u32, read_file, write_file, Reader};
use crate::codebook::Codebook;
use crate::coeffs::SparseCoefficients;
use crate::gaussian::Gaussian;
use crate::scene::{Scene, SceneConfig};
use crate::{Error, Result};

const MAGIC: [u8; 4] = *b"LSV2";

pub fn scene_to_bytes(scene: &Scene) -> Result<Vec<u8>> {
    scene.validate()?;
    let cfg = &scene.config;
    let record = 4 + 4 * (3 + 4 + 3 + 1 + 3) + cfg.num_levels * cfg.top_k * 6;
    let mut out = Vec::with_capacity(28 + scene.len() * record + cfg.num_levels * cfg.num_atoms * cfg.feature_dim * 4);
    out.extend_from_slice(&MAGIC);
    put_u32(&mut out, super::FORMAT_VERSION as usize)?;
    for v in [scene.len(), cfg.num_levels, cfg.num_atoms, cfg.top_k, cfg.feature_dim] {
        put_u32(&mut out, v)?;
    }
    for g in &scene.gaussians {
        out.extend_from_slice(&g.id.to_le_bytes());
        put_f32s(&mut out, &g.position);
        put_f32s(&mut out, &g.rotation);
        put_f32s(&mut out, &g.scale);
        put_f32s(&mut out, &[g.opacity]);
        put_f32s(&mut out, &g.color);
        for c in &g.coeffs {
            for i in c.indices() {
                out.extend_from_slice(&i.to_le_bytes());
            }
            put_f32s(&mut out, c.values());
        }
    }
    for cb in &scene.codebooks {
        put_f32s(&mut out, cb.as_slice());
    }
    Ok(out)
}

pub fn scene_from_bytes(bytes: &[u8]) -> Result<Scene> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let count = r.u32()? as usize;
    let config = SceneConfig {
        num_levels: r.u32()? as usize,
        num_atoms: r.u32()? as usize,
        top_k: r.u32()? as usize,
        feature_dim: r.u32()? as usize,
    };
    config.validate().map_err(|e| invalid(8, e.to_string()))?;

    let mut gaussians = Vec::with_capacity(count.min(bytes.len() / 60));
    for _ in 0..count {
        let start = r.offset();
        let id = r.u32()?;
        let position = r.f32s::<3>()?;
        let rotation = r.f32s::<4>()?;
        let scale = r.f32s::<3>()?;
        let opacity = r.f32()?;
        let color = r.f32s::<3>()?;
        let mut coeffs = Vec::with_capacity(config.num_levels);
        for _ in 0..config.num_levels {
            let at = r.offset();
            let indices = (0..config.top_k).map(|_| r.u16()).collect::<Result<Vec<_>, _>>()?;
            let values = r.f32_vec(config.top_k)?;
            if indices.windows(2).any(|w| w[0] >= w[1]) {
                return Err(invalid(at, "coefficient indices not strictly ascending"));
            }
            let c = SparseCoefficients::new(indices, values).map_err(|e| invalid(at, e.to_string()))?;
            c.validate(config.num_atoms, config.top_k).map_err(|e| invalid(at, e.to_string()))?;
            coeffs.push(c);
        }
        let g = Gaussian {
            id,
            position,
            rotation,
            scale,
            opacity,
            color,
            coeffs,
        };
        g.validate_geometry().map_err(|e| invalid(start, e.to_string()))?;
        gaussians.push(g);
    }
    let mut codebooks = Vec::with_capacity(config.num_levels);
    for level in 0..config.num_levels {
        let at = r.offset();
        let atoms = r.f32_vec(config.num_atoms * config.feature_dim)?;
        codebooks.push(
            Codebook::new(level as u8, config.num_atoms, config.feature_dim, atoms).map_err(|e| invalid(at, e.to_string()))?,
        );
    }
    r.finish()?;
    Scene::new(config, gaussians, codebooks).map_err(|e| match e {
        Error::Format(_) => e,
        other => invalid(0, other.to_string()),
    })
}

pub fn save_scene(path: impl AsRef<Path>, scene: &Scene) -> Result<()> {
    write_file(path.as_ref(), &scene_to_bytes(scene)?)
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    scene_from_bytes(&read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::synthetic::random_scene;
    use crate::io::FormatError;

    fn sample() -> Scene {
        random_scene(11, 50, SceneConfig {
            num_levels: 3,
            num_atoms: 16,
            top_k: 4,
            feature_dim: 8,
        })
        .unwrap()
    }

    #[test]
    fn empty_scene_round_trips() {
        let cfg = SceneConfig {
            num_levels: 1,
            num_atoms: 4,
            top_k: 2,
            feature_dim: 3,
        };
        let s = Scene::new(cfg, vec![], vec![Codebook::zeros(0, 4, 3)]).unwrap();
        let bytes = scene_to_bytes(&s).unwrap();
        assert_eq!(bytes.len(), 28 + 4 * 3 * 4);
        assert_eq!(scene_from_bytes(&bytes).unwrap(), s);
    }

    #[test]
    fn random_scene_round_trips_byte_exact() {
        let s = sample();
        let bytes = scene_to_bytes(&s).unwrap();
        let back = scene_from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(scene_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn truncation_names_offset() {
        let bytes = scene_to_bytes(&sample()).unwrap();
        let cut = 28 + 100;
        match scene_from_bytes(&bytes[..cut]) {
            Err(Error::Format(FormatError::Truncated { offset, .. })) => assert_eq!(offset, cut),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = scene_to_bytes(&sample()).unwrap();
        let mut m = bytes.clone();
        m[0] = b'X';
        assert!(matches!(scene_from_bytes(&m), Err(Error::Format(FormatError::BadMagic { .. }))));
        bytes[4] = 9;
        assert!(matches!(
            scene_from_bytes(&bytes),
            Err(Error::Format(FormatError::UnsupportedVersion { found: 9, .. }))
        ));
    }

    #[test]
    fn out_of_range_index_rejected() {
        let mut bytes = scene_to_bytes(&sample()).unwrap();
        // last index of the first record's first level
        let at = 28 + 4 + 14 * 4 + 3 * 2;
        bytes[at..at + 2].copy_from_slice(&200u16.to_le_bytes());
        assert!(matches!(
            scene_from_bytes(&bytes),
            Err(Error::Format(FormatError::InvalidContent { .. }))
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = scene_to_bytes(&sample()).unwrap();
        bytes.push(0);
        assert!(matches!(
            scene_from_bytes(&bytes),
            Err(Error::Format(FormatError::TrailingBytes { count: 1, .. }))
        ));
    }
}
