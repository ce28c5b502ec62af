//! Rigid object motion: `x = R(angles(t)) · x_canonical + translation(t)`.

use crate::plan::{TimelineProgram, Vec3};
use crate::scene::{GaussianCloud, GaussianPoint};
use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KinematicsError {
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("object index {index} out of range ({count} objects)")]
    ObjectOutOfRange { index: usize, count: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub translation: Vector3<f64>,
    /// Euler angles in radians, composed as `Rz · Ry · Rx`.
    pub angles: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self::from_parts(Vector3::zeros(), Vector3::zeros())
    }

    pub fn from_parts(translation: Vector3<f64>, angles: Vector3<f64>) -> Self {
        Self {
            translation,
            angles,
            rotation: rotation_matrix(&angles),
        }
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }
}

fn axis_rotation(axis: usize, angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    match axis {
        0 => Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
        1 => Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
        _ => Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
    }
}

/// `R = Rz(γ) · Ry(β) · Rx(α)` for angles `(α, β, γ)`.
pub fn rotation_matrix(angles: &Vector3<f64>) -> Matrix3<f64> {
    axis_rotation(2, angles.z) * axis_rotation(1, angles.y) * axis_rotation(0, angles.x)
}

fn v3(a: Vec3) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

pub fn object_pose(program: &TimelineProgram, obj: usize, t: f64) -> Result<Pose, KinematicsError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(KinematicsError::TimeOutOfRange(t));
    }
    let track = program
        .objects
        .get(obj)
        .ok_or(KinematicsError::ObjectOutOfRange {
            index: obj,
            count: program.objects.len(),
        })?;
    Ok(Pose::from_parts(
        v3(track.position_at(t)),
        v3(track.angles_at(t)),
    ))
}

pub fn transform_point(pose: &Pose, x: &Vector3<f64>) -> Vector3<f64> {
    pose.rotation * x + pose.translation
}

/// Moves a canonical cloud into world space. Point orientations are
/// left-multiplied by the pose rotation; scales are unchanged.
pub fn transform_cloud(cloud: &GaussianCloud, pose: &Pose) -> GaussianCloud {
    let q = pose.quaternion();
    let points = cloud
        .points()
        .iter()
        .map(|p| GaussianPoint {
            position: transform_point(pose, &p.position),
            rotation: q.quaternion() * p.rotation,
            ..p.clone()
        })
        .collect();
    GaussianCloud::new(cloud.label(), points, false).expect("ids unchanged")
}
