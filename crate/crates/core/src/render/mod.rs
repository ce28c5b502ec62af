//! CPU splat rendering: orbit cameras, EWA projection, depth-sorted
//! compositing and its exact gradients.

mod camera;
mod field;
mod image;
pub mod raster;

pub use camera::{Camera, EVAL_ORBIT_AZIMUTHS, NEAR};
pub use field::{eval_field_image, SlicePlane};
pub use image::{mse, psnr, Image};
pub use raster::{project, Raster, RenderOp, Splat2D, SplatBatch, SplatGrads, SplatKey};

use crate::neural::{Matrix, Tape, Var};
use crate::scene::{SceneError, SceneSnapshot};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("image size {actual:?} does not match {expected:?}")]
    SizeMismatch { expected: (u32, u32), actual: (u32, u32) },
    #[error("image io: {0}")]
    Io(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// World-space batch of every point with non-zero effective opacity.
pub fn batch_from_snapshot(snapshot: &SceneSnapshot) -> SplatBatch {
    let mut rows = Vec::new();
    for (o, (cloud, eff)) in snapshot.objects.iter().zip(&snapshot.effective_opacity).enumerate() {
        for (p, &alpha) in cloud.points().iter().zip(eff) {
            if alpha > 0.0 {
                rows.push((o, p, alpha));
            }
        }
    }
    let n = rows.len();
    SplatBatch {
        means: Matrix::from_shape_fn((n, 3), |(r, c)| rows[r].1.position[c]),
        quats: Matrix::from_shape_fn((n, 4), |(r, c)| {
            let q = rows[r].1.unit_rotation();
            [q.w, q.i, q.j, q.k][c]
        }),
        scales: Matrix::from_shape_fn((n, 3), |(r, c)| rows[r].1.scale[c]),
        opacity: Matrix::from_shape_fn((n, 1), |(r, _)| rows[r].2),
        colors: Matrix::from_shape_fn((n, 3), |(r, c)| rows[r].1.color[c]),
        keys: rows
            .iter()
            .map(|(o, p, _)| SplatKey {
                object: *o as u32,
                point_id: p.point_id,
            })
            .collect(),
    }
}

pub fn render_frame(snapshot: &SceneSnapshot, camera: &Camera) -> Result<Image, RenderError> {
    camera.validate()?;
    let img = Raster::new(&batch_from_snapshot(snapshot), camera).forward();
    Ok(Image::from_matrix(&img, camera.width, camera.height))
}

/// Tape inputs of a differentiable frame, matching [`SplatBatch`] fields.
#[derive(Debug, Clone, Copy)]
pub struct SplatVars {
    pub means: Var,
    pub quats: Var,
    pub scales: Var,
    pub opacity: Var,
    pub colors: Var,
}

/// Renders on the tape; the result is an `(H·W)×3` node.
pub fn render_on_tape(tape: &mut Tape, vars: SplatVars, keys: Vec<SplatKey>, camera: &Camera) -> Var {
    let batch = SplatBatch {
        means: tape.value(vars.means).clone(),
        quats: tape.value(vars.quats).clone(),
        scales: tape.value(vars.scales).clone(),
        opacity: tape.value(vars.opacity).clone(),
        colors: tape.value(vars.colors).clone(),
        keys,
    };
    let raster = Raster::new(&batch, camera);
    let image = raster.forward();
    tape.custom(
        &[vars.means, vars.quats, vars.scales, vars.opacity, vars.colors],
        image,
        Box::new(RenderOp { raster }),
    )
}
