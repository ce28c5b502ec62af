use super::RenderError;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// Near plane in camera units; anything closer is culled.
pub const NEAR: f64 = 0.01;

/// Azimuths (degrees) of the six-view evaluation orbit.
pub const EVAL_ORBIT_AZIMUTHS: [f64; 6] = [-120.0, -60.0, 0.0, 60.0, 120.0, 180.0];

/// Orbit camera around `target` with +y up.
///
/// Azimuth 0 and elevation 0 place the eye on +z looking toward −z.
/// Camera space is x right, y down, z forward; pixel `(i, j)` has its
/// center at `(i + 0.5, j + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Camera {
    /// Degrees.
    pub azimuth: f64,
    /// Degrees, strictly inside (−90, 90).
    pub elevation: f64,
    pub radius: f64,
    /// Vertical field of view, degrees.
    pub fov: f64,
    pub width: u32,
    pub height: u32,
    pub target: [f64; 3],
}

impl Default for Camera {
    fn default() -> Self {
        Self {
            azimuth: 0.0,
            elevation: 15.0,
            radius: 4.0,
            fov: 45.0,
            width: 256,
            height: 256,
            target: [0.0; 3],
        }
    }
}

impl Camera {
    pub fn orbit(azimuth: f64, elevation: f64, radius: f64, width: u32, height: u32) -> Result<Self, RenderError> {
        let cam = Self {
            azimuth,
            elevation,
            radius,
            width,
            height,
            ..Self::default()
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn with_fov(mut self, fov: f64) -> Result<Self, RenderError> {
        self.fov = fov;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        let bad = |why: &str| Err(RenderError::Camera(why.to_string()));
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return bad("radius must be positive");
        }
        if !(self.fov > 0.0 && self.fov < 180.0) {
            return bad("fov must lie in (0, 180) degrees");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be at least 1×1");
        }
        if !(self.elevation.abs() < 90.0 && self.azimuth.is_finite()) {
            return bad("elevation must lie in (−90, 90) degrees");
        }
        if self.target.iter().any(|v| !v.is_finite()) {
            return bad("non-finite target");
        }
        Ok(())
    }

    pub fn target(&self) -> Vector3<f64> {
        Vector3::from(self.target)
    }

    pub fn eye(&self) -> Vector3<f64> {
        let (az, el) = (self.azimuth.to_radians(), self.elevation.to_radians());
        self.target() + self.radius * Vector3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos())
    }

    /// Rows are the camera's right, down and forward axes in world space.
    pub fn world_to_camera(&self) -> Matrix3<f64> {
        let forward = (self.target() - self.eye()).normalize();
        let right = forward.cross(&Vector3::y()).normalize();
        let down = forward.cross(&right);
        Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()])
    }

    /// Focal length in pixels, shared by both axes.
    pub fn focal(&self) -> f64 {
        (self.height as f64 / 2.0) / (self.fov.to_radians() / 2.0).tan()
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (self.width as f64 / 2.0, self.height as f64 / 2.0)
    }

    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.world_to_camera() * (x - self.eye())
    }

    /// Pixel coordinates and depth, or `None` in front of the near plane.
    pub fn project_point(&self, x: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let c = self.to_camera(x);
        if c.z <= NEAR {
            return None;
        }
        let f = self.focal();
        let (cx, cy) = self.principal_point();
        Some((f * c.x / c.z + cx, f * c.y / c.z + cy, c.z))
    }

    /// The six evaluation-orbit cameras sharing this camera's other settings.
    pub fn eval_orbit(&self) -> Vec<Camera> {
        EVAL_ORBIT_AZIMUTHS
            .iter()
            .map(|az| Camera {
                azimuth: *az,
                ..*self
            })
            .collect()
    }
}
