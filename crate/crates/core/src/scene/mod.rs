//! Gaussian point clouds: the static representation of one scene object.
//!
//! A point stores its covariance factored as a per-axis scale and a rotation
//! quaternion, so `Σ = R · diag(s)² · Rᵀ` is positive definite by construction.

mod ply;
mod primitive;

pub use ply::{export_ply, import_ply, ImportOptions, StoredPoint, SH_C0};
pub use primitive::{make_primitive, PrimitiveKind};

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("cloud is empty")]
    EmptyCloud,
    #[error("covariance of point {point_id} is singular")]
    SingularCovariance { point_id: u64 },
    #[error("duplicate point id {0}")]
    DuplicatePointId(u64),
    #[error("invalid point {point_id}: {reason}")]
    InvalidPoint { point_id: u64, reason: String },
    #[error("ply: {0}")]
    Ply(String),
    #[error("ply: missing required vertex property `{0}`")]
    MissingProperty(String),
    #[error("ply: non-finite value in vertex {index} (property `{property}`)")]
    NonFinite { index: usize, property: String },
    #[error("unknown primitive kind `{0}`")]
    UnknownPrimitive(String),
    #[error("primitive needs at least one point")]
    NoPoints,
}

/// One anisotropic Gaussian.
///
/// `rotation` is the stored quaternion (w, x, y, z). It is unit to storage
/// precision; every geometric use goes through [`GaussianPoint::unit_rotation`].
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPoint {
    pub point_id: u64,
    pub position: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: Quaternion<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl GaussianPoint {
    /// Builds a point, normalizing the quaternion and checking the value ranges.
    pub fn new(
        point_id: u64,
        position: Vector3<f64>,
        scale: Vector3<f64>,
        rotation: Quaternion<f64>,
        opacity: f64,
        color: Vector3<f64>,
    ) -> Result<Self, SceneError> {
        let invalid = |reason: &str| SceneError::InvalidPoint {
            point_id,
            reason: reason.to_string(),
        };
        let norm = rotation.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(invalid("rotation quaternion has zero or non-finite norm"));
        }
        if !(0.0..=1.0).contains(&opacity) {
            return Err(invalid("opacity outside [0, 1]"));
        }
        if scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(invalid("scale components must be positive"));
        }
        if position.iter().chain(color.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("non-finite position or color"));
        }
        Ok(Self {
            point_id,
            position,
            scale,
            rotation: rotation / norm,
            opacity,
            color,
        })
    }

    /// Isotropic point with identity rotation.
    pub fn isotropic(
        point_id: u64,
        position: Vector3<f64>,
        scale: f64,
        opacity: f64,
        color: Vector3<f64>,
    ) -> Result<Self, SceneError> {
        Self::new(
            point_id,
            position,
            Vector3::repeat(scale),
            Quaternion::identity(),
            opacity,
            color,
        )
    }

    pub fn unit_rotation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_quaternion(self.rotation)
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        covariance_of(self)
    }
}

/// `Σ = R(r) · diag(s)² · R(r)ᵀ`.
pub fn covariance_of(point: &GaussianPoint) -> Matrix3<f64> {
    let r = point.unit_rotation().to_rotation_matrix().into_inner();
    let s2 = Matrix3::from_diagonal(&point.scale.component_mul(&point.scale));
    let sigma = r * s2 * r.transpose();
    // exact symmetry; the product above can differ in the last bit
    (sigma + sigma.transpose()) * 0.5
}

/// An ordered set of Gaussians for one object.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    points: Vec<GaussianPoint>,
    canonical: bool,
    label: String,
}

impl GaussianCloud {
    pub fn new(
        label: impl Into<String>,
        points: Vec<GaussianPoint>,
        canonical: bool,
    ) -> Result<Self, SceneError> {
        let mut ids: Vec<u64> = points.iter().map(|p| p.point_id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(SceneError::DuplicatePointId(w[0]));
        }
        Ok(Self {
            points,
            canonical,
            label: label.into(),
        })
    }

    pub fn empty(label: impl Into<String>) -> Self {
        Self {
            points: Vec::new(),
            canonical: true,
            label: label.into(),
        }
    }

    pub fn points(&self) -> &[GaussianPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_canonical(&self) -> bool {
        self.canonical
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn into_points(self) -> Vec<GaussianPoint> {
        self.points
    }

    /// Smallest id not used by any point.
    pub fn next_point_id(&self) -> u64 {
        self.points.iter().map(|p| p.point_id + 1).max().unwrap_or(0)
    }

    pub fn centroid(&self) -> Vector3<f64> {
        if self.points.is_empty() {
            return Vector3::zeros();
        }
        let sum = self
            .points
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.position);
        sum / self.points.len() as f64
    }

    /// Point indices in ascending `point_id` order.
    pub fn id_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.points.len()).collect();
        order.sort_by_key(|&i| self.points[i].point_id);
        order
    }

    /// Concatenation with fresh ids for `other`'s points.
    pub fn concat(&self, other: &GaussianCloud) -> GaussianCloud {
        let offset = self.next_point_id();
        let mut points = self.points.clone();
        points.extend(other.points.iter().map(|p| GaussianPoint {
            point_id: p.point_id + offset,
            ..p.clone()
        }));
        GaussianCloud {
            points,
            canonical: self.canonical && other.canonical,
            label: self.label.clone(),
        }
    }

    /// Uniformly scales positions and Gaussian extents about the origin.
    pub fn scaled(&self, factor: f64) -> GaussianCloud {
        let points = self
            .points
            .iter()
            .map(|p| GaussianPoint {
                position: p.position * factor,
                scale: p.scale * factor,
                ..p.clone()
            })
            .collect();
        GaussianCloud {
            points,
            ..self.clone()
        }
    }

    /// Replaces every point's color with `f(position)`, clamped to `[0, 1]`.
    pub fn recolored(&self, f: impl Fn(&Vector3<f64>) -> Vector3<f64>) -> GaussianCloud {
        let points = self
            .points
            .iter()
            .map(|p| GaussianPoint {
                color: f(&p.position).map(|c| c.clamp(0.0, 1.0)),
                ..p.clone()
            })
            .collect();
        GaussianCloud {
            points,
            ..self.clone()
        }
    }

    /// Rounds every field through the PLY storage representation.
    ///
    /// Clouds that went through this are reproduced bitwise by an
    /// export/import round trip.
    pub fn snapped_to_storage(&self) -> GaussianCloud {
        let points = self
            .points
            .iter()
            .map(|p| StoredPoint::from_point(p).to_point(p.point_id))
            .collect();
        GaussianCloud {
            points,
            ..self.clone()
        }
    }
}

/// World-space state of the whole scene at one instant.
#[derive(Debug, Clone)]
pub struct SceneSnapshot {
    pub time: f64,
    pub objects: Vec<GaussianCloud>,
    /// Per object, per point: opacity after transition gating.
    pub effective_opacity: Vec<Vec<f64>>,
}

impl SceneSnapshot {
    /// Snapshot whose effective opacities are the stored ones.
    pub fn ungated(time: f64, objects: Vec<GaussianCloud>) -> Self {
        let effective_opacity = objects
            .iter()
            .map(|c| c.points().iter().map(|p| p.opacity).collect())
            .collect();
        Self {
            time,
            objects,
            effective_opacity,
        }
    }

    pub fn point_count(&self) -> usize {
        self.objects.iter().map(|c| c.len()).sum()
    }
}

/// Evaluates `G(x) = Σ αᵢ cᵢ exp(-½ (x-μᵢ)ᵀ Σᵢ⁻¹ (x-μᵢ))`, summing in ascending
/// `point_id` order.
pub fn eval_field(cloud: &GaussianCloud, x: &Vector3<f64>) -> Result<Vector3<f64>, SceneError> {
    if cloud.is_empty() {
        return Err(SceneError::EmptyCloud);
    }
    let mut sum = Vector3::zeros();
    for i in cloud.id_order() {
        let p = &cloud.points[i];
        if p.scale.iter().any(|s| !(*s > 0.0)) {
            return Err(SceneError::SingularCovariance { point_id: p.point_id });
        }
        // Σ⁻¹ = R diag(s)⁻² Rᵀ, applied in the local frame
        let r = p.unit_rotation().to_rotation_matrix().into_inner();
        let local = r.transpose() * (x - p.position);
        let m = local.component_div(&p.scale).norm_squared();
        sum += p.color * (p.opacity * (-0.5 * m).exp());
    }
    Ok(sum)
}
