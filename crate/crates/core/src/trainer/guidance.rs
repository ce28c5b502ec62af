use super::TrainError;
use crate::neural::Matrix;
use crate::pipeline::FrameBatch;
use crate::render::Camera;

/// What the trainer asks of a guidance provider.
#[derive(Debug, Clone, Copy)]
pub struct GuidanceRequest<'a> {
    /// Index into [`GuidanceProvider::views`].
    pub view: usize,
    /// Frame indices in `0..frame_count`, one per rendered image.
    pub frames: &'a [usize],
    pub prompt: &'a str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceOutput {
    /// `∂loss/∂image` per rendered frame, `(H·W)×3`.
    pub grads: Vec<Matrix>,
    /// Diagnostic only; training follows `grads`.
    pub loss: f64,
}

/// Supplies per-pixel gradients for rendered frames.
pub trait GuidanceProvider: Send + Sync {
    /// Cameras the provider can score. Images must use their resolution.
    fn views(&self) -> &[Camera];
    fn frame_count(&self) -> usize;
    fn guide(&self, request: &GuidanceRequest<'_>, rendered: &[Matrix]) -> Result<GuidanceOutput, TrainError>;
}

fn check_rendered(request: &GuidanceRequest<'_>, rendered: &[Matrix], camera: &Camera) -> Result<(), TrainError> {
    if rendered.len() != request.frames.len() {
        return Err(TrainError::Guidance(format!(
            "{} images for {} frames",
            rendered.len(),
            request.frames.len()
        )));
    }
    let pixels = (camera.width * camera.height) as usize;
    if let Some(m) = rendered.iter().find(|m| m.dim() != (pixels, 3)) {
        return Err(TrainError::Guidance(format!("image shape {:?}, expected ({pixels}, 3)", m.dim())));
    }
    Ok(())
}

/// Pixel-space reconstruction against fixed target frames. Per frame the
/// loss is `Σ (r − t)² / P` over pixels and channels (`P` = pixel count)
/// and the gradient is `2 (r − t) / P`; the reported loss is the frame mean.
#[derive(Debug, Clone)]
pub struct ReconstructionGuidance {
    views: Vec<Camera>,
    /// `targets[view][frame]`
    targets: Vec<Vec<Matrix>>,
    frames: usize,
}

impl ReconstructionGuidance {
    /// One target batch per view, all with the same frame count.
    pub fn new(batches: Vec<FrameBatch>) -> Result<Self, TrainError> {
        let frames = batches.first().map_or(0, FrameBatch::len);
        if frames == 0 {
            return Err(TrainError::Guidance("no target frames".into()));
        }
        let mut views = Vec::new();
        let mut targets = Vec::new();
        for b in batches {
            if b.len() != frames {
                return Err(TrainError::Guidance(format!("{} frames, expected {frames}", b.len())));
            }
            let cam = b.cameras[0];
            let mut mats = Vec::new();
            for img in &b.images {
                if (img.width, img.height) != (cam.width, cam.height) {
                    return Err(TrainError::Guidance("target size differs from its camera".into()));
                }
                if img.data.iter().any(|v| !v.is_finite()) {
                    return Err(TrainError::Guidance("non-finite target".into()));
                }
                mats.push(img.to_matrix());
            }
            views.push(cam);
            targets.push(mats);
        }
        Ok(Self { views, targets, frames })
    }
}

impl GuidanceProvider for ReconstructionGuidance {
    fn views(&self) -> &[Camera] {
        &self.views
    }

    fn frame_count(&self) -> usize {
        self.frames
    }

    fn guide(&self, request: &GuidanceRequest<'_>, rendered: &[Matrix]) -> Result<GuidanceOutput, TrainError> {
        let camera = self
            .views
            .get(request.view)
            .ok_or_else(|| TrainError::Guidance(format!("no view {}", request.view)))?;
        check_rendered(request, rendered, camera)?;
        let pixels = (camera.width * camera.height) as f64;
        let mut grads = Vec::with_capacity(rendered.len());
        let mut loss = 0.0;
        for (r, &k) in rendered.iter().zip(request.frames) {
            let target = self.targets[request.view]
                .get(k)
                .ok_or_else(|| TrainError::Guidance(format!("no frame {k}")))?;
            let diff = r - target;
            loss += diff.iter().map(|d| d * d).sum::<f64>() / pixels;
            grads.push(diff * (2.0 / pixels));
        }
        Ok(GuidanceOutput {
            grads,
            loss: loss / rendered.len().max(1) as f64,
        })
    }
}

/// Always returns zero gradients.
#[derive(Debug, Clone)]
pub struct ZeroGuidance {
    pub views: Vec<Camera>,
    pub frames: usize,
}

impl GuidanceProvider for ZeroGuidance {
    fn views(&self) -> &[Camera] {
        &self.views
    }

    fn frame_count(&self) -> usize {
        self.frames
    }

    fn guide(&self, request: &GuidanceRequest<'_>, rendered: &[Matrix]) -> Result<GuidanceOutput, TrainError> {
        check_rendered(request, rendered, &self.views[request.view])?;
        Ok(GuidanceOutput {
            grads: rendered.iter().map(|m| Matrix::zeros(m.dim())).collect(),
            loss: 0.0,
        })
    }
}
