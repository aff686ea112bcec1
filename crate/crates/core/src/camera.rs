//! Pinhole camera. Camera space is x right, y down, z forward; pixel (col,
//! row) has its center at (col + 0.5, row + 0.5).

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation.
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

/// Viewer-friendly pose description; intrinsics are derived from the
/// vertical field of view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub eye: [f64; 3],
    pub target: [f64; 3],
    #[serde(default = "default_up")]
    pub up: [f64; 3],
    #[serde(default = "default_fov")]
    pub fov_y_deg: f64,
    pub width: usize,
    pub height: usize,
}

fn default_up() -> [f64; 3] {
    [0.0, 1.0, 0.0]
}

fn default_fov() -> f64 {
    50.0
}

pub const DEFAULT_NEAR: f64 = 0.01;

impl Camera {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        (fx, fy): (f64, f64),
        (cx, cy): (f64, f64),
        (width, height): (usize, usize),
        near: f64,
    ) -> Result<Self> {
        let cam = Self {
            rotation,
            translation,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            near,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at the world origin looking down +z.
    pub fn identity(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(
            Matrix3::identity(),
            Vector3::zeros(),
            (fx, fy),
            (cx, cy),
            (width, height),
            DEFAULT_NEAR,
        )
    }

    pub fn look_at(pose: &CameraPose) -> Result<Self> {
        let eye = Point3::from(pose.eye);
        let target = Point3::from(pose.target);
        let up = Vector3::from(pose.up);
        let forward = target - eye;
        if forward.norm() == 0.0 || !forward.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("camera eye and target must differ"));
        }
        let forward = forward.normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(Error::validation("camera up vector is parallel to view direction"));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye.coords);
        if !(pose.fov_y_deg > 0.0 && pose.fov_y_deg < 180.0) {
            return Err(Error::validation("vertical field of view must be in (0, 180) degrees"));
        }
        let fy = pose.height as f64 * 0.5 / (pose.fov_y_deg.to_radians() * 0.5).tan();
        Self::new(
            rotation,
            translation,
            (fy, fy),
            (pose.width as f64 * 0.5, pose.height as f64 * 0.5),
            (pose.width, pose.height),
            DEFAULT_NEAR,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::validation("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::validation("image size must be at least 1x1"));
        }
        if !(self.near > 0.0) {
            return Err(Error::validation("near plane must be positive"));
        }
        let finite = self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite())
            && self.cx.is_finite()
            && self.cy.is_finite();
        if !finite {
            return Err(Error::validation("camera parameters must be finite"));
        }
        Ok(())
    }

    pub fn to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }
}
