use crate::scene::{GaussianCloud, GaussianPoint, SceneError};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

/// Split children shrink by this factor.
pub const SPLIT_SHRINK: f64 = 1.6;
const OPACITY_EPS: f64 = 1e-6;

fn logit(a: f64) -> f64 {
    let a = a.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
    (a / (1.0 - a)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Unconstrained optimizer view of a canonical cloud. Flat row-major storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCloud {
    pub label: String,
    pub ids: Vec<u64>,
    /// N×3
    pub means: Vec<f64>,
    /// N×3, natural log of the scale.
    pub log_scales: Vec<f64>,
    /// N×4, `(w, x, y, z)`, not necessarily unit.
    pub quats: Vec<f64>,
    /// N, opacity logits.
    pub logits: Vec<f64>,
    /// N×3, kept in `[0, 1]`.
    pub colors: Vec<f64>,
    pub next_id: u64,
}

impl RawCloud {
    pub fn from_cloud(cloud: &GaussianCloud) -> Self {
        let mut raw = Self {
            label: cloud.label().to_string(),
            ids: Vec::new(),
            means: Vec::new(),
            log_scales: Vec::new(),
            quats: Vec::new(),
            logits: Vec::new(),
            colors: Vec::new(),
            next_id: cloud.next_point_id(),
        };
        for p in cloud.points() {
            raw.ids.push(p.point_id);
            raw.means.extend(p.position.iter());
            raw.log_scales.extend(p.scale.iter().map(|s| s.ln()));
            let q = p.unit_rotation();
            raw.quats.extend([q.w, q.i, q.j, q.k]);
            raw.logits.push(logit(p.opacity));
            raw.colors.extend(p.color.iter());
        }
        raw
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.logits[i])
    }

    fn scale(&self, i: usize) -> Vector3<f64> {
        Vector3::new(
            self.log_scales[3 * i].exp(),
            self.log_scales[3 * i + 1].exp(),
            self.log_scales[3 * i + 2].exp(),
        )
    }

    fn rotation(&self, i: usize) -> UnitQuaternion<f64> {
        let q = &self.quats[4 * i..4 * i + 4];
        UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
    }

    pub fn to_cloud(&self) -> Result<GaussianCloud, SceneError> {
        let points = (0..self.len())
            .map(|i| {
                let q = &self.quats[4 * i..4 * i + 4];
                GaussianPoint::new(
                    self.ids[i],
                    Vector3::new(self.means[3 * i], self.means[3 * i + 1], self.means[3 * i + 2]),
                    self.scale(i),
                    Quaternion::new(q[0], q[1], q[2], q[3]),
                    self.opacity(i),
                    Vector3::new(self.colors[3 * i], self.colors[3 * i + 1], self.colors[3 * i + 2]),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        GaussianCloud::new(self.label.clone(), points, true)
    }

    /// Copies row `i` onto the end with a fresh id and returns the new row.
    fn push_copy(&mut self, i: usize) -> usize {
        self.ids.push(self.next_id);
        self.next_id += 1;
        for k in 0..3 {
            self.means.push(self.means[3 * i + k]);
            self.log_scales.push(self.log_scales[3 * i + k]);
            self.colors.push(self.colors[3 * i + k]);
        }
        for k in 0..4 {
            self.quats.push(self.quats[4 * i + k]);
        }
        self.logits.push(self.logits[i]);
        self.len() - 1
    }

    fn shift(&mut self, i: usize, by: &Vector3<f64>) {
        for k in 0..3 {
            self.means[3 * i + k] += by[k];
        }
    }

    /// Keeps the given rows in the given order.
    fn select(&mut self, rows: &[usize]) {
        let pick = |xs: &[f64], w: usize| rows.iter().flat_map(|r| xs[r * w..(r + 1) * w].to_vec()).collect();
        self.ids = rows.iter().map(|r| self.ids[*r]).collect();
        self.means = pick(&self.means, 3);
        self.log_scales = pick(&self.log_scales, 3);
        self.quats = pick(&self.quats, 4);
        self.logits = pick(&self.logits, 1);
        self.colors = pick(&self.colors, 3);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensifyConfig {
    pub enabled: bool,
    pub interval: usize,
    /// Mean positional gradient magnitude that triggers clone or split.
    pub grad_threshold: f64,
    /// Largest scale (scene units) still counted as small, so cloned.
    pub scale_threshold: f64,
    /// Points below this opacity are pruned.
    pub opacity_threshold: f64,
    /// Growth stops at this many points per object.
    pub max_points: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            interval: 100,
            grad_threshold: 2e-4,
            scale_threshold: 0.01,
            opacity_threshold: 0.005,
            max_points: 20_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DensifyStats {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Prunes, clones and splits in row order. Returns, for every output row,
/// the input row it continues (`None` for new points).
pub fn densify(cloud: &mut RawCloud, mean_grad: &[f64], config: &DensifyConfig) -> (Vec<Option<usize>>, DensifyStats) {
    assert_eq!(mean_grad.len(), cloud.len());
    let n = cloud.len();
    let mut stats = DensifyStats::default();
    let mut survivors = Vec::new();
    let mut split_parents = Vec::new();
    let mut clone_parents = Vec::new();
    let mut budget = config.max_points.saturating_sub(n);
    for i in 0..n {
        if cloud.opacity(i) < config.opacity_threshold {
            stats.pruned += 1;
            continue;
        }
        let grows = mean_grad[i] > config.grad_threshold && budget > 0;
        let big = cloud.scale(i).max() > config.scale_threshold;
        if grows && big {
            split_parents.push(i);
            budget -= 1;
        } else {
            if grows {
                clone_parents.push(i);
                budget -= 1;
            }
            survivors.push(i);
        }
    }

    let mut sources: Vec<Option<usize>> = Vec::new();
    let mut appended = Vec::new();
    for &i in &clone_parents {
        let axis = major_axis(cloud, i) * (0.5 * cloud.scale(i).max());
        let copy = cloud.push_copy(i);
        cloud.shift(i, &axis);
        cloud.shift(copy, &-axis);
        appended.push(copy);
        stats.cloned += 1;
    }
    for &i in &split_parents {
        let axis = major_axis(cloud, i) * cloud.scale(i).max();
        for sign in [1.0, -1.0] {
            let child = cloud.push_copy(i);
            cloud.shift(child, &(axis * sign));
            for k in 0..3 {
                cloud.log_scales[3 * child + k] -= SPLIT_SHRINK.ln();
            }
            appended.push(child);
        }
        stats.split += 1;
    }
    let mut rows = survivors.clone();
    rows.extend(&appended);
    cloud.select(&rows);
    sources.extend(survivors.iter().map(|r| Some(*r)));
    sources.extend(appended.iter().map(|_| None));
    (sources, stats)
}

/// World direction of the largest scale axis.
fn major_axis(cloud: &RawCloud, i: usize) -> Vector3<f64> {
    let s = cloud.scale(i);
    let k = s.imax();
    cloud.rotation(i).to_rotation_matrix().matrix().column(k).into_owned()
}
