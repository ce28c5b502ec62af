use super::{Camera, Image, RenderError};
use crate::scene::{eval_field, GaussianCloud};
use nalgebra::Vector3;

/// A planar pixel grid in world space. Pixel `(i, j)` samples
/// `origin + (i + 0.5)·u + (j + 0.5)·v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlicePlane {
    pub origin: Vector3<f64>,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl SlicePlane {
    /// The plane through `point` facing `camera`, with pixels sized so the
    /// grid lines up with the camera's projection at that depth.
    pub fn facing(camera: &Camera, point: &Vector3<f64>) -> Self {
        let w = camera.world_to_camera();
        let depth = camera.to_camera(point).z;
        let pixel = depth / camera.focal();
        let right = w.row(0).transpose();
        let down = w.row(1).transpose();
        let (cx, cy) = camera.principal_point();
        let center = camera.eye() + w.row(2).transpose() * depth;
        Self {
            origin: center - right * (cx * pixel) - down * (cy * pixel),
            u: right * pixel,
            v: down * pixel,
        }
    }

    pub fn sample(&self, x: f64, y: f64) -> Vector3<f64> {
        self.origin + self.u * x + self.v * y
    }
}

/// The unoccluded field sum evaluated on the slice plane, one sample per
/// pixel center.
pub fn eval_field_image(cloud: &GaussianCloud, camera: &Camera, plane: &SlicePlane) -> Result<Image, RenderError> {
    let mut img = Image::black(camera.width, camera.height);
    for y in 0..camera.height {
        for x in 0..camera.width {
            let value = eval_field(cloud, &plane.sample(x as f64 + 0.5, y as f64 + 0.5))?;
            let i = ((y * camera.width + x) * 3) as usize;
            for k in 0..3 {
                img.data[i + k] = value[k] as f32;
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::raster::{project, SplatKey};
    use crate::scene::GaussianPoint;

    fn cloud(points: &[([f64; 3], f64)]) -> GaussianCloud {
        let pts = points
            .iter()
            .enumerate()
            .map(|(i, (p, s))| {
                GaussianPoint::isotropic(i as u64, Vector3::from(*p), *s, 0.8, Vector3::new(1.0, 0.5, 0.25)).unwrap()
            })
            .collect();
        GaussianCloud::new("c", pts, false).unwrap()
    }

    fn peaks(img: &Image) -> Vec<(u32, u32)> {
        let g = |x: i64, y: i64| {
            if x < 0 || y < 0 || x >= img.width as i64 || y >= img.height as i64 {
                f32::NEG_INFINITY
            } else {
                img.pixel(x as u32, y as u32)[0]
            }
        };
        let mut out = Vec::new();
        for y in 0..img.height as i64 {
            for x in 0..img.width as i64 {
                let c = g(x, y);
                let is_max = (-1..=1).all(|dy| (-1..=1).all(|dx| (dx == 0 && dy == 0) || g(x + dx, y + dy) < c));
                if is_max && c > 1e-3 {
                    out.push((x as u32, y as u32));
                }
            }
        }
        out
    }

    #[test]
    fn peak_is_opacity_times_color() {
        let cam = Camera::orbit(0.0, 0.0, 3.0, 9, 9).unwrap();
        let c = cloud(&[([0.0; 3], 0.2)]);
        let img = eval_field_image(&c, &cam, &SlicePlane::facing(&cam, &Vector3::zeros())).unwrap();
        let p = img.pixel(4, 4);
        assert!((p[0] - 0.8).abs() < 1e-6 && (p[1] - 0.4).abs() < 1e-6 && (p[2] - 0.2).abs() < 1e-6);
    }

    #[test]
    fn two_gaussians_two_maxima() {
        let cam = Camera::orbit(0.0, 0.0, 3.0, 41, 21).unwrap();
        let c = cloud(&[([-0.4, 0.0, 0.0], 0.08), ([0.4, 0.0, 0.0], 0.08)]);
        let img = eval_field_image(&c, &cam, &SlicePlane::facing(&cam, &Vector3::zeros())).unwrap();
        assert_eq!(peaks(&img).len(), 2);
    }

    #[test]
    fn peak_matches_projection() {
        let cam = Camera::orbit(30.0, 20.0, 3.0, 48, 48).unwrap();
        let mu = Vector3::new(0.2, -0.1, 0.15);
        let c = cloud(&[(mu.into(), 0.1)]);
        let img = eval_field_image(&c, &cam, &SlicePlane::facing(&cam, &mu)).unwrap();
        let peak = peaks(&img)[0];
        let point = &c.points()[0];
        let s = project(
            &point.position,
            &point.covariance(),
            0.8,
            &point.color,
            SplatKey { object: 0, point_id: 0 },
            &cam,
        )
        .unwrap();
        assert!((peak.0 as f64 + 0.5 - s.mean.x).abs() <= 1.0);
        assert!((peak.1 as f64 + 0.5 - s.mean.y).abs() <= 1.0);
    }
}
