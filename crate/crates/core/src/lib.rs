//! Semantic feature splatting for 3D Gaussian scenes.
//!
//! Every Gaussian carries, per semantic level, a K-sparse convex combination
//! over a global codebook of L atoms. Coefficient maps are splatted touching
//! only the K stored channels per Gaussian, then decoded into D-dimensional
//! feature maps with one matrix product against the codebook. Rendering cost
//! therefore depends on K, not on L or D.
//!
//! Module map:
//!
//! * [`gaussian`], [`coeffs`], [`codebook`], [`scene`]: domain types.
//! * [`camera`], [`projection`]: EWA projection and depth-sorted tile binning.
//! * [`raster`]: dense alpha compositing plus the naive reference renderer.
//! * [`sparse`]: sparse coefficient splatting, decoding and the query pipeline.
//! * [`query`]: relevancy scoring, filtering, level selection, localization.
//! * [`train`]: learning the coefficient field and codebooks.
//! * [`io`]: binary/JSON formats and the synthetic scene generator.
//! * [`bench`]: dimension sweeps and stage breakdowns.

pub mod bench;
pub mod camera;
pub mod codebook;
pub mod coeffs;
mod error;
pub mod gaussian;
pub mod io;
pub mod projection;
pub mod query;
pub mod raster;
pub mod scene;
pub mod sparse;
pub mod stats;
pub mod train;

pub use camera::Camera;
pub use codebook::Codebook;
pub use coeffs::SparseCoefficients;
pub use error::{Error, Result};
pub use gaussian::Gaussian;
pub use scene::{Scene, SceneConfig};
