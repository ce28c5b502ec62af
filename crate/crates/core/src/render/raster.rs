//! Tiled front-to-back splat compositing with an analytic backward pass.

use super::camera::{Camera, NEAR};
use crate::neural::{CustomOp, Matrix};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;
use std::cmp::Ordering;

/// Added to the projected covariance diagonal, pixels².
pub const COV_FLOOR: f64 = 0.3;
/// Splats whose 4σ extent misses the frame are culled.
pub const CULL_SIGMAS: f64 = 4.0;
/// Pixels with Mahalanobis distance² above this are skipped (exp(−30) ≈ 1e-13).
pub const MAX_MAHALANOBIS: f64 = 60.0;
pub const TILE: u32 = 16;

/// Sort key for compositing ties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SplatKey {
    pub object: u32,
    pub point_id: u64,
}

/// One screen-space Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub depth: f64,
    pub key: SplatKey,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl Splat2D {
    /// `(A, B, C)` of the inverse covariance `[[A, B], [B, C]]`.
    pub fn conic(&self) -> (f64, f64, f64) {
        let (a, b, c) = (self.cov[(0, 0)], self.cov[(0, 1)], self.cov[(1, 1)]);
        let det = a * c - b * b;
        (c / det, -b / det, a / det)
    }

    /// Inclusive-exclusive pixel bounds `[x0, x1) × [y0, y1)` of the cutoff
    /// ellipse, clipped to the frame.
    fn bounds(&self, width: u32, height: u32) -> [u32; 4] {
        let rx = (MAX_MAHALANOBIS * self.cov[(0, 0)]).sqrt();
        let ry = (MAX_MAHALANOBIS * self.cov[(1, 1)]).sqrt();
        // pixel i covers centers at i + 0.5
        let lo = |c: f64, r: f64, n: u32| ((c - r - 0.5).ceil().max(0.0) as u32).min(n);
        let hi = |c: f64, r: f64, n: u32| (((c + r - 0.5).floor() + 1.0).max(0.0) as u32).min(n);
        [
            lo(self.mean.x, rx, width),
            hi(self.mean.x, rx, width),
            lo(self.mean.y, ry, height),
            hi(self.mean.y, ry, height),
        ]
    }
}

/// Rotation matrix of a quaternion `(w, x, y, z)`, polynomial form.
pub fn quat_to_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `∂R/∂q_k` for k = w, x, y, z.
fn quat_matrix_partials(q: &Vector4<f64>) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0,
        Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0,
        Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0,
        Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0,
    ]
}

/// Projection state kept for the backward pass.
#[derive(Debug, Clone)]
struct Projected {
    splat: Splat2D,
    row: usize,
    t: Vector3<f64>,
    j: Matrix2x3<f64>,
    m: Matrix2x3<f64>,
    sigma: Matrix3<f64>,
    rot: Matrix3<f64>,
    scale: Vector3<f64>,
    quat: Vector4<f64>,
}

fn project_raw(
    camera: &Camera,
    mean: Vector3<f64>,
    sigma: Matrix3<f64>,
    opacity: f64,
    color: Vector3<f64>,
    key: SplatKey,
) -> Option<(Splat2D, Vector3<f64>, Matrix2x3<f64>, Matrix2x3<f64>)> {
    let w = camera.world_to_camera();
    let t = w * (mean - camera.eye());
    if t.z <= NEAR {
        return None;
    }
    let f = camera.focal();
    let (cx, cy) = camera.principal_point();
    let j = Matrix2x3::new(
        f / t.z,
        0.0,
        -f * t.x / (t.z * t.z),
        0.0,
        f / t.z,
        -f * t.y / (t.z * t.z),
    );
    let m = j * w;
    let mut cov = m * sigma * m.transpose();
    cov[(0, 1)] = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    cov[(1, 0)] = cov[(0, 1)];
    cov[(0, 0)] += COV_FLOOR;
    cov[(1, 1)] += COV_FLOOR;
    let mean2 = Vector2::new(f * t.x / t.z + cx, f * t.y / t.z + cy);
    let lambda_max = {
        let (a, b, c) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
        let mid = 0.5 * (a + c);
        mid + (mid * mid - (a * c - b * b)).max(0.0).sqrt()
    };
    let reach = CULL_SIGMAS * lambda_max.sqrt();
    let (wd, ht) = (camera.width as f64, camera.height as f64);
    if mean2.x + reach < 0.0 || mean2.x - reach > wd || mean2.y + reach < 0.0 || mean2.y - reach > ht {
        return None;
    }
    Some((
        Splat2D {
            mean: mean2,
            cov,
            depth: t.z,
            key,
            opacity,
            color,
        },
        t,
        j,
        m,
    ))
}

/// Projects one world-space Gaussian, or `None` when culled.
pub fn project(
    mean: &Vector3<f64>,
    covariance: &Matrix3<f64>,
    effective_opacity: f64,
    color: &Vector3<f64>,
    key: SplatKey,
    camera: &Camera,
) -> Option<Splat2D> {
    project_raw(camera, *mean, *covariance, effective_opacity, *color, key).map(|p| p.0)
}

/// World-space splat parameters, one row per Gaussian.
#[derive(Debug, Clone)]
pub struct SplatBatch {
    /// N×3
    pub means: Matrix,
    /// N×4, `(w, x, y, z)`; used through the polynomial rotation formula.
    pub quats: Matrix,
    /// N×3, positive.
    pub scales: Matrix,
    /// N×1
    pub opacity: Matrix,
    /// N×3
    pub colors: Matrix,
    pub keys: Vec<SplatKey>,
}

impl SplatBatch {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

fn row3(m: &Matrix, r: usize) -> Vector3<f64> {
    Vector3::new(m[[r, 0]], m[[r, 1]], m[[r, 2]])
}

/// Gradients of a rendered image with respect to every batch input.
#[derive(Debug, Clone)]
pub struct SplatGrads {
    pub means: Matrix,
    pub quats: Matrix,
    pub scales: Matrix,
    pub opacity: Matrix,
    pub colors: Matrix,
}

/// A projected and binned frame, ready for forward or backward passes.
#[derive(Debug, Clone)]
pub struct Raster {
    camera: Camera,
    rows: usize,
    splats: Vec<Projected>,
    tiles: Vec<Vec<u32>>,
}

/// Per-list-entry 2D gradient: mean (2), conic (3), opacity, color (3).
type Local = [f64; 9];

impl Raster {
    pub fn new(batch: &SplatBatch, camera: &Camera) -> Self {
        let mut splats: Vec<Projected> = (0..batch.len())
            .into_par_iter()
            .filter_map(|r| {
                let quat = Vector4::new(
                    batch.quats[[r, 0]],
                    batch.quats[[r, 1]],
                    batch.quats[[r, 2]],
                    batch.quats[[r, 3]],
                );
                let scale = row3(&batch.scales, r);
                let rot = quat_to_matrix(&quat);
                let rs = rot * Matrix3::from_diagonal(&scale);
                let sigma = rs * rs.transpose();
                let (splat, t, j, m) = project_raw(
                    camera,
                    row3(&batch.means, r),
                    sigma,
                    batch.opacity[[r, 0]],
                    row3(&batch.colors, r),
                    batch.keys[r],
                )?;
                Some(Projected {
                    splat,
                    row: r,
                    t,
                    j,
                    m,
                    sigma,
                    rot,
                    scale,
                    quat,
                })
            })
            .collect();
        splats.sort_by(|a, b| {
            a.splat
                .depth
                .partial_cmp(&b.splat.depth)
                .unwrap_or(Ordering::Equal)
                .then(a.splat.key.cmp(&b.splat.key))
        });

        let tiles_x = camera.width.div_ceil(TILE);
        let tiles_y = camera.height.div_ceil(TILE);
        let mut tiles = vec![Vec::new(); (tiles_x * tiles_y) as usize];
        for (i, p) in splats.iter().enumerate() {
            let [x0, x1, y0, y1] = p.splat.bounds(camera.width, camera.height);
            if x0 >= x1 || y0 >= y1 {
                continue;
            }
            for ty in y0 / TILE..=(y1 - 1) / TILE {
                for tx in x0 / TILE..=(x1 - 1) / TILE {
                    tiles[(ty * tiles_x + tx) as usize].push(i as u32);
                }
            }
        }
        Self {
            camera: *camera,
            rows: batch.len(),
            splats,
            tiles,
        }
    }

    /// Visible splats in compositing order.
    pub fn splats(&self) -> impl Iterator<Item = &Splat2D> {
        self.splats.iter().map(|p| &p.splat)
    }

    fn tile_pixels(&self, tile: usize) -> impl Iterator<Item = (u32, u32)> {
        let tiles_x = self.camera.width.div_ceil(TILE);
        let (tx, ty) = (tile as u32 % tiles_x, tile as u32 / tiles_x);
        let (w, h) = (self.camera.width, self.camera.height);
        (ty * TILE..((ty + 1) * TILE).min(h))
            .flat_map(move |y| (tx * TILE..((tx + 1) * TILE).min(w)).map(move |x| (x, y)))
    }

    /// Gaussian falloff of splat `s` at pixel center `(px, py)`, with the offset.
    fn falloff(s: &Splat2D, conic: (f64, f64, f64), px: f64, py: f64) -> Option<(f64, f64, f64)> {
        let (dx, dy) = (px - s.mean.x, py - s.mean.y);
        let (a, b, c) = conic;
        let maha = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
        (maha <= MAX_MAHALANOBIS).then(|| ((-0.5 * maha).exp(), dx, dy))
    }

    /// Image as an `(H·W)×3` matrix, row `y·W + x`.
    pub fn forward(&self) -> Matrix {
        let (w, h) = (self.camera.width as usize, self.camera.height as usize);
        let conics: Vec<_> = self.splats.iter().map(|p| p.splat.conic()).collect();
        let tiles: Vec<Vec<(usize, [f64; 3])>> = (0..self.tiles.len())
            .into_par_iter()
            .map(|tile| {
                let list = &self.tiles[tile];
                self.tile_pixels(tile)
                    .map(|(x, y)| {
                        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                        let mut color = [0.0; 3];
                        let mut trans = 1.0;
                        for &i in list {
                            let s = &self.splats[i as usize].splat;
                            let Some((g, _, _)) = Self::falloff(s, conics[i as usize], px, py) else {
                                continue;
                            };
                            let a = s.opacity * g;
                            for k in 0..3 {
                                color[k] += s.color[k] * a * trans;
                            }
                            trans *= 1.0 - a;
                            if trans == 0.0 {
                                break;
                            }
                        }
                        (y as usize * w + x as usize, color)
                    })
                    .collect()
            })
            .collect();
        let mut out = Matrix::zeros((w * h, 3));
        for tile in tiles {
            for (idx, c) in tile {
                for k in 0..3 {
                    out[[idx, k]] = c[k];
                }
            }
        }
        out
    }

    /// Gradients of `Σ grad ⊙ image` with respect to the batch inputs.
    pub fn backward(&self, grad: &Matrix) -> SplatGrads {
        let w = self.camera.width as usize;
        let conics: Vec<_> = self.splats.iter().map(|p| p.splat.conic()).collect();
        let per_tile: Vec<Vec<Local>> = (0..self.tiles.len())
            .into_par_iter()
            .map(|tile| {
                let list = &self.tiles[tile];
                let mut acc = vec![[0.0; 9]; list.len()];
                let mut hits: Vec<(usize, f64, f64, f64, f64, f64)> = Vec::new();
                for (x, y) in self.tile_pixels(tile) {
                    let idx = y as usize * w + x as usize;
                    let g = Vector3::new(grad[[idx, 0]], grad[[idx, 1]], grad[[idx, 2]]);
                    if g == Vector3::zeros() {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    hits.clear();
                    let mut trans = 1.0;
                    for (slot, &i) in list.iter().enumerate() {
                        let s = &self.splats[i as usize].splat;
                        let Some((fall, dx, dy)) = Self::falloff(s, conics[i as usize], px, py) else {
                            continue;
                        };
                        let a = s.opacity * fall;
                        hits.push((slot, fall, a, trans, dx, dy));
                        trans *= 1.0 - a;
                        if trans == 0.0 {
                            break;
                        }
                    }
                    // B: contribution of everything behind, relative to the
                    // transmittance entering the current splat
                    let mut behind = 0.0;
                    for &(slot, fall, a, t_i, dx, dy) in hits.iter().rev() {
                        let s = &self.splats[list[slot] as usize].splat;
                        let cg = s.color.dot(&g);
                        let d_a = t_i * (cg - behind);
                        behind = cg * a + (1.0 - a) * behind;
                        let e = &mut acc[slot];
                        for k in 0..3 {
                            e[6 + k] += g[k] * a * t_i;
                        }
                        e[5] += d_a * fall;
                        let d_power = d_a * s.opacity * fall;
                        let (ca, cb, cc) = conics[list[slot] as usize];
                        e[0] += d_power * (ca * dx + cb * dy);
                        e[1] += d_power * (cb * dx + cc * dy);
                        e[2] += d_power * (-0.5 * dx * dx);
                        e[3] += d_power * (-dx * dy);
                        e[4] += d_power * (-0.5 * dy * dy);
                    }
                }
                acc
            })
            .collect();

        let mut splat_grads = vec![[0.0; 9]; self.splats.len()];
        for (tile, acc) in per_tile.iter().enumerate() {
            for (slot, e) in acc.iter().enumerate() {
                let dst = &mut splat_grads[self.tiles[tile][slot] as usize];
                for k in 0..9 {
                    dst[k] += e[k];
                }
            }
        }

        let mut out = SplatGrads {
            means: Matrix::zeros((self.rows, 3)),
            quats: Matrix::zeros((self.rows, 4)),
            scales: Matrix::zeros((self.rows, 3)),
            opacity: Matrix::zeros((self.rows, 1)),
            colors: Matrix::zeros((self.rows, 3)),
        };
        let chained: Vec<_> = self
            .splats
            .par_iter()
            .zip(&splat_grads)
            .map(|(p, e)| (p.row, self.chain(p, e)))
            .collect();
        for (r, (dm, dq, ds, e)) in chained {
            for k in 0..3 {
                out.means[[r, k]] = dm[k];
                out.scales[[r, k]] = ds[k];
                out.colors[[r, k]] = e[6 + k];
            }
            for k in 0..4 {
                out.quats[[r, k]] = dq[k];
            }
            out.opacity[[r, 0]] = e[5];
        }
        out
    }

    /// 2D gradients of one splat chained back to its 3D parameters.
    fn chain(&self, p: &Projected, e: &Local) -> (Vector3<f64>, Vector4<f64>, Vector3<f64>, Local) {
        let (ca, cb, cc) = p.splat.conic();
        let q = Matrix2::new(ca, cb, cb, cc);
        let g_q = Matrix2::new(e[2], 0.5 * e[3], 0.5 * e[3], e[4]);
        // d Σ'⁻¹ = −Σ'⁻¹ dΣ' Σ'⁻¹; the floor is constant
        let g_cov = -(q * g_q * q);
        let g_sigma = p.m.transpose() * g_cov * p.m;
        let g_m = 2.0 * g_cov * p.m * p.sigma;
        let w = self.camera.world_to_camera();
        let g_j = g_m * w.transpose();

        let f = self.camera.focal();
        let t = p.t;
        let (z2, z3) = (t.z * t.z, t.z * t.z * t.z);
        let (dmx, dmy) = (e[0], e[1]);
        let mut g_t = Vector3::new(dmx * f / t.z, dmy * f / t.z, -dmx * f * t.x / z2 - dmy * f * t.y / z2);
        g_t.z += g_j[(0, 0)] * (-f / z2) + g_j[(1, 1)] * (-f / z2);
        g_t.x += g_j[(0, 2)] * (-f / z2);
        g_t.y += g_j[(1, 2)] * (-f / z2);
        g_t.z += g_j[(0, 2)] * (2.0 * f * t.x / z3) + g_j[(1, 2)] * (2.0 * f * t.y / z3);
        debug_assert!(p.j[(0, 1)] == 0.0);
        let g_mean = w.transpose() * g_t;

        // Σ = (R S)(R S)ᵀ
        let rs = p.rot * Matrix3::from_diagonal(&p.scale);
        let g_rs = 2.0 * g_sigma * rs;
        let mut g_scale = Vector3::zeros();
        let mut g_rot = Matrix3::zeros();
        for r in 0..3 {
            for k in 0..3 {
                g_scale[k] += g_rs[(r, k)] * p.rot[(r, k)];
                g_rot[(r, k)] = g_rs[(r, k)] * p.scale[k];
            }
        }
        let partials = quat_matrix_partials(&p.quat);
        let g_quat = Vector4::from_fn(|k, _| g_rot.component_mul(&partials[k]).sum());
        (g_mean, g_quat, g_scale, *e)
    }
}

/// Tape node wrapping one rendered frame. Inputs are the five batch
/// matrices in [`SplatBatch`] order.
pub struct RenderOp {
    pub raster: Raster,
}

impl CustomOp for RenderOp {
    fn name(&self) -> &'static str {
        "render"
    }

    fn backward(&self, _inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Vec<Option<Matrix>> {
        let g = self.raster.backward(grad);
        vec![Some(g.means), Some(g.quats), Some(g.scales), Some(g.opacity), Some(g.colors)]
    }
}
