//! Seeded synthetic test objects.

use super::{GaussianCloud, GaussianPoint, SceneError};
use nalgebra::{Quaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;
use std::str::FromStr;

const TORUS_MAJOR: f64 = 0.7;
const TORUS_MINOR: f64 = 0.3;
const PRIMITIVE_OPACITY: f64 = 0.8;
/// Gaussian extent relative to the mean spacing `sqrt(area / n)`.
const SCALE_FACTOR: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    /// Unit sphere surface.
    Sphere,
    /// Surface of the cube `[-1, 1]³`.
    Box,
    /// Torus in the xz-plane, radii 0.7 and 0.3.
    Torus,
    /// Filled unit disk in the xz-plane.
    Disk,
}

impl PrimitiveKind {
    pub fn surface_area(self) -> f64 {
        match self {
            Self::Sphere => 4.0 * PI,
            Self::Box => 24.0,
            Self::Torus => 4.0 * PI * PI * TORUS_MAJOR * TORUS_MINOR,
            Self::Disk => PI,
        }
    }

    fn sample(self, rng: &mut ChaCha8Rng) -> Vector3<f64> {
        match self {
            Self::Sphere => loop {
                let v = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
                let n = v.norm();
                if n > 1e-12 {
                    break v / n;
                }
            },
            Self::Box => {
                let face = rng.random_range(0..6usize);
                let axis = face / 2;
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                let mut v = Vector3::from_fn(|_, _| rng.random_range(-1.0..=1.0));
                v[axis] = sign;
                v
            }
            Self::Torus => loop {
                // area element ∝ (R + r cos φ); rejection keeps the density uniform
                let theta = rng.random_range(0.0..2.0 * PI);
                let phi = rng.random_range(0.0..2.0 * PI);
                let w = (TORUS_MAJOR + TORUS_MINOR * phi.cos()) / (TORUS_MAJOR + TORUS_MINOR);
                if rng.random::<f64>() <= w {
                    let ring = TORUS_MAJOR + TORUS_MINOR * phi.cos();
                    break Vector3::new(ring * theta.cos(), TORUS_MINOR * phi.sin(), ring * theta.sin());
                }
            },
            Self::Disk => {
                let r = rng.random::<f64>().sqrt();
                let theta = rng.random_range(0.0..2.0 * PI);
                Vector3::new(r * theta.cos(), 0.0, r * theta.sin())
            }
        }
    }
}

impl FromStr for PrimitiveKind {
    type Err = SceneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sphere" => Ok(Self::Sphere),
            "box" => Ok(Self::Box),
            "torus" => Ok(Self::Torus),
            "disk" => Ok(Self::Disk),
            other => Err(SceneError::UnknownPrimitive(other.to_string())),
        }
    }
}

/// Samples a canonical object centered at the origin. Fields are rounded to
/// PLY storage precision so exported files reproduce the cloud exactly.
pub fn make_primitive(
    kind: PrimitiveKind,
    n_points: usize,
    seed: u64,
    color: Vector3<f64>,
) -> Result<GaussianCloud, SceneError> {
    if n_points == 0 {
        return Err(SceneError::NoPoints);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = SCALE_FACTOR * (kind.surface_area() / n_points as f64).sqrt();
    let color = color.map(|c| c.clamp(0.0, 1.0));
    let points = (0..n_points)
        .map(|i| {
            GaussianPoint::new(
                i as u64,
                kind.sample(&mut rng),
                Vector3::repeat(scale),
                Quaternion::identity(),
                PRIMITIVE_OPACITY,
                color,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let label = format!("{kind:?}").to_lowercase();
    Ok(GaussianCloud::new(label, points, true)?.snapped_to_storage())
}
