use super::adam::{step_adam, AdamMoments};
use super::densify::{densify, DensifyStats, RawCloud};
use super::guidance::{GuidanceProvider, GuidanceRequest};
use super::{Phase, TrainConfig, TrainError};
use crate::neural::{Gradients, Matrix, ParamId, Tape, Var};
use crate::pipeline::{constant_cloud, frame_on_tape, frame_times, CloudVars, Scene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Tape ids of cloud parameters: `CLOUD_BASE + 8 · object + group`.
const CLOUD_BASE: u32 = 1 << 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CloudMoments {
    pub means: AdamMoments,
    pub log_scales: AdamMoments,
    pub quats: AdamMoments,
    pub logits: AdamMoments,
    pub colors: AdamMoments,
}

impl CloudMoments {
    fn zeros(n: usize) -> Self {
        Self {
            means: AdamMoments::zeros(3 * n),
            log_scales: AdamMoments::zeros(3 * n),
            quats: AdamMoments::zeros(4 * n),
            logits: AdamMoments::zeros(n),
            colors: AdamMoments::zeros(3 * n),
        }
    }

    fn remap(&mut self, sources: &[Option<usize>]) {
        self.means.remap_rows(3, sources);
        self.log_scales.remap_rows(3, sources);
        self.quats.remap_rows(4, sources);
        self.logits.remap_rows(1, sources);
        self.colors.remap_rows(3, sources);
    }
}

/// Everything needed to continue a run bit-for-bit. The per-step random
/// stream is a pure function of `(seed, step)`, so no generator state is kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub phase: Phase,
    pub step: u64,
    pub seed: u64,
    pub history: Vec<LossRecord>,
    /// Per network, parameters in layer order.
    pub net_params: Vec<Vec<f64>>,
    pub net_moments: Vec<AdamMoments>,
    /// Refinement only.
    pub clouds: Vec<RawCloud>,
    pub cloud_moments: Vec<CloudMoments>,
    /// Per object, per point: summed positional gradient norm and sample count
    /// since the last densification.
    pub grad_sum: Vec<Vec<f64>>,
    pub grad_count: u64,
    pub densify_log: Vec<DensifyStats>,
    /// Largest total point count seen.
    pub peak_points: usize,
}

impl TrainState {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("state serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        serde_json::from_str(text).map_err(|e| TrainError::State(e.to_string()))
    }
}

pub struct Trainer<'g> {
    scene: Scene,
    guidance: &'g dyn GuidanceProvider,
    config: TrainConfig,
    state: TrainState,
    net_fingerprint: String,
    initial_counts: Vec<usize>,
}

fn flat_grads(grads: &Gradients, tensors: &[(ParamId, &Matrix)]) -> Vec<f64> {
    tensors
        .iter()
        .flat_map(|(id, m)| match grads.param(*id) {
            Some(g) => g.iter().copied().collect::<Vec<_>>(),
            None => vec![0.0; m.len()],
        })
        .collect()
}

fn load_net_params(scene: &mut Scene, params: &[Vec<f64>]) -> Result<(), TrainError> {
    let deform = scene.nets.deform.len();
    for (k, p) in params.iter().enumerate() {
        let mlp = if k < deform {
            &mut scene.nets.deform[k].mlp
        } else {
            &mut scene.nets.transition[k - deform].mlp
        };
        mlp.set_parameters(p).map_err(|e| TrainError::State(e.to_string()))?;
    }
    Ok(())
}

fn mat(values: &[f64], cols: usize) -> Matrix {
    Matrix::from_shape_vec((values.len() / cols, cols), values.to_vec()).expect("flat rows")
}

impl<'g> Trainer<'g> {
    pub fn new(scene: Scene, guidance: &'g dyn GuidanceProvider, config: TrainConfig) -> Result<Self, TrainError> {
        scene.validate()?;
        let net_params: Vec<Vec<f64>> = scene.nets.mlps().map(|m| m.parameters().collect()).collect();
        let net_moments = net_params.iter().map(|p| AdamMoments::zeros(p.len())).collect();
        let (clouds, cloud_moments) = match config.phase {
            Phase::Dynamics => (Vec::new(), Vec::new()),
            Phase::Refine => (
                scene.objects.iter().map(RawCloud::from_cloud).collect(),
                scene.objects.iter().map(|c| CloudMoments::zeros(c.len())).collect(),
            ),
        };
        let state = TrainState {
            phase: config.phase,
            step: 0,
            seed: config.seed,
            history: Vec::new(),
            net_params,
            net_moments,
            clouds,
            cloud_moments,
            grad_sum: scene.objects.iter().map(|c| vec![0.0; c.len()]).collect(),
            grad_count: 0,
            densify_log: Vec::new(),
            peak_points: scene.point_counts().iter().sum(),
        };
        Self::assemble(scene, guidance, config, state)
    }

    /// Continues from a saved state. `scene` supplies the timeline and the
    /// network layout; parameters come from the state.
    pub fn resume(
        mut scene: Scene,
        guidance: &'g dyn GuidanceProvider,
        config: TrainConfig,
        state: TrainState,
    ) -> Result<Self, TrainError> {
        if state.phase != config.phase || state.seed != config.seed {
            return Err(TrainError::State("phase or seed differs from the saved state".into()));
        }
        if state.net_params.len() != scene.nets.mlps().count() {
            return Err(TrainError::State("network count differs".into()));
        }
        load_net_params(&mut scene, &state.net_params)?;
        if state.phase == Phase::Refine {
            if state.clouds.len() != scene.objects.len() {
                return Err(TrainError::State("object count differs".into()));
            }
            scene.objects = state.clouds.iter().map(RawCloud::to_cloud).collect::<Result<_, _>>()?;
        }
        Self::assemble(scene, guidance, config, state)
    }

    fn assemble(
        scene: Scene,
        guidance: &'g dyn GuidanceProvider,
        config: TrainConfig,
        state: TrainState,
    ) -> Result<Self, TrainError> {
        if guidance.views().is_empty() || guidance.frame_count() == 0 {
            return Err(TrainError::Guidance("provider has no views or frames".into()));
        }
        let initial_counts = scene.point_counts();
        if config.phase == Phase::Dynamics {
            if let Some(n) = config.fixed_points {
                if let Some((object, &found)) = initial_counts.iter().enumerate().find(|(_, c)| **c != n) {
                    return Err(TrainError::PointCount {
                        object,
                        expected: n,
                        found,
                    });
                }
            }
        }
        Ok(Self {
            net_fingerprint: scene.nets.fingerprint(),
            scene,
            guidance,
            config,
            state,
            initial_counts,
        })
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn into_scene(self) -> Scene {
        self.scene
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step_index(&self) -> u64 {
        self.state.step
    }

    fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.state.step);
        rng
    }

    /// Schedule penalty for one frame, added to `terms`.
    fn schedule_terms(&self, tape: &mut Tape, probs: &[Option<Var>], t: f64, terms: &mut Vec<Var>) {
        if self.config.schedule_weight == 0.0 {
            return;
        }
        for (i, prob) in probs.iter().enumerate() {
            let Some(p) = prob else { continue };
            let mut target = 1.0;
            for k in self.scene.timeline.transitions_of(i) {
                let span = &self.scene.timeline.transitions[k];
                let after = t >= 0.5 * (span.start + span.end);
                let present = if span.source == i { !after } else { after };
                if !present {
                    target = 0.0;
                }
            }
            let n = tape.value(*p).nrows();
            let neg = tape.constant(Matrix::from_elem((n, 1), -target));
            let d = tape.add(*p, neg);
            let sq = tape.sum_squares(d);
            terms.push(tape.scale(sq, self.config.schedule_weight / n as f64));
        }
    }

    /// Runs one optimization step and returns the guidance loss.
    pub fn step(&mut self) -> Result<f64, TrainError> {
        let loss = match self.config.phase {
            Phase::Dynamics => self.step_dynamics()?,
            Phase::Refine => self.step_refine()?,
        };
        self.state.history.push(LossRecord {
            step: self.state.step,
            loss,
        });
        self.state.step += 1;
        let total: usize = self.scene.point_counts().iter().sum();
        self.state.peak_points = self.state.peak_points.max(total);
        Ok(loss)
    }

    fn update_nets(&mut self, grads: &Gradients) -> Result<(), TrainError> {
        let step = self.state.step;
        let lr = self.config.lr.nets;
        let flat: Vec<Vec<f64>> = self
            .scene
            .nets
            .mlps()
            .enumerate()
            .map(|(slot, mlp)| flat_grads(grads, &mlp.tensors(slot as u32)))
            .collect();
        if flat.iter().flatten().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite { step });
        }
        for (k, g) in flat.iter().enumerate() {
            step_adam(&mut self.state.net_params[k], g, &mut self.state.net_moments[k], lr)?;
            for x in &mut self.state.net_params[k] {
                *x = *x as f32 as f64;
            }
            if self.state.net_params[k].iter().any(|x| !x.is_finite()) {
                return Err(TrainError::NonFinite { step });
            }
        }
        load_net_params(&mut self.scene, &self.state.net_params)
    }

    fn step_dynamics(&mut self) -> Result<f64, TrainError> {
        let mut rng = self.rng();
        let view = rng.random_range(0..self.guidance.views().len());
        let camera = self.guidance.views()[view];
        let frames = self.guidance.frame_count();
        let times = frame_times(frames);

        let mut tape = Tape::new();
        let clouds: Vec<CloudVars> = self.scene.objects.iter().map(|c| constant_cloud(&mut tape, c)).collect();
        let mut images = Vec::with_capacity(frames);
        let mut terms = Vec::new();
        for &t in &times {
            let fv = frame_on_tape(&mut tape, &self.scene, &clouds, t, &camera)?;
            self.schedule_terms(&mut tape, &fv.probs, t, &mut terms);
            images.push(fv.image);
        }
        let indices: Vec<usize> = (0..frames).collect();
        let loss = self.guide_and_backward(&mut tape, view, &indices, &images, terms, |trainer, grads| {
            trainer.update_nets(grads)
        })?;

        if self.scene.point_counts() != self.initial_counts {
            return Err(TrainError::Shape("point count changed during dynamics training".into()));
        }
        Ok(loss)
    }

    /// Asks the guidance for image gradients, backpropagates the surrogate
    /// `Σ ⟨image, ∂loss/∂image⟩ + extra terms`, then applies `update`.
    fn guide_and_backward(
        &mut self,
        tape: &mut Tape,
        view: usize,
        frames: &[usize],
        images: &[Var],
        mut terms: Vec<Var>,
        update: impl FnOnce(&mut Self, &Gradients) -> Result<(), TrainError>,
    ) -> Result<f64, TrainError> {
        let rendered: Vec<Matrix> = images.iter().map(|v| tape.value(*v).clone()).collect();
        let out = self.guidance.guide(
            &GuidanceRequest {
                view,
                frames,
                prompt: &self.config.prompt,
            },
            &rendered,
        )?;
        if out.grads.len() != images.len() {
            return Err(TrainError::Guidance("gradient count differs from frame count".into()));
        }
        if !out.loss.is_finite() {
            return Err(TrainError::NonFinite { step: self.state.step });
        }
        for (img, g) in images.iter().zip(out.grads) {
            let gv = tape.constant(g);
            let prod = tape.mul(*img, gv);
            terms.push(tape.sum(prod));
        }
        let mut total = terms[0];
        for t in &terms[1..] {
            total = tape.add(total, *t);
        }
        let grads = tape.backward(total).map_err(|e| TrainError::State(e.to_string()))?;
        update(self, &grads)?;
        Ok(out.loss)
    }

    fn step_refine(&mut self) -> Result<f64, TrainError> {
        let mut rng = self.rng();
        let view = rng.random_range(0..self.guidance.views().len());
        let frame = rng.random_range(0..self.guidance.frame_count());
        let camera = self.guidance.views()[view];
        let t = frame_times(self.guidance.frame_count())[frame];

        let mut tape = Tape::new();
        let mut raw_vars = Vec::new();
        let mut clouds = Vec::new();
        for (o, raw) in self.state.clouds.iter().enumerate() {
            let id = |g: u32| ParamId(CLOUD_BASE + 8 * o as u32 + g);
            let means = tape.param(id(0), mat(&raw.means, 3));
            let log_scales = tape.param(id(1), mat(&raw.log_scales, 3));
            let quats = tape.param(id(2), mat(&raw.quats, 4));
            let logits = tape.param(id(3), mat(&raw.logits, 1));
            let colors = tape.param(id(4), mat(&raw.colors, 3));
            raw_vars.push([means, log_scales, quats, logits, colors]);
            clouds.push(CloudVars {
                means,
                quats: tape.normalize_rows(quats),
                scales: tape.exp(log_scales),
                opacity: tape.sigmoid(logits),
                colors,
            });
        }
        let fv = frame_on_tape(&mut tape, &self.scene, &clouds, t, &camera)?;
        let mut terms = Vec::new();
        self.schedule_terms(&mut tape, &fv.probs, t, &mut terms);
        let loss = self.guide_and_backward(&mut tape, view, &[frame], &[fv.image], terms, |trainer, grads| {
            trainer.update_clouds(grads, &raw_vars)
        })?;

        let d = &self.config.densify;
        if d.enabled && d.interval > 0 && (self.state.step + 1) % d.interval as u64 == 0 {
            self.densify_now();
        }
        self.scene.objects = self
            .state
            .clouds
            .iter()
            .map(RawCloud::to_cloud)
            .collect::<Result<_, _>>()
            .map_err(|_| TrainError::NonFinite { step: self.state.step })?;
        Ok(loss)
    }

    fn update_clouds(&mut self, grads: &Gradients, vars: &[[Var; 5]]) -> Result<(), TrainError> {
        let step = self.state.step;
        let lr = self.config.lr.clone();
        let get = |v: Var| -> Result<Vec<f64>, TrainError> {
            let g: Vec<f64> = grads.node(v).map_or_else(Vec::new, |m| m.iter().copied().collect());
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TrainError::NonFinite { step });
            }
            Ok(g)
        };
        let all: Vec<[Vec<f64>; 5]> = vars
            .iter()
            .map(|vs| Ok([get(vs[0])?, get(vs[1])?, get(vs[2])?, get(vs[3])?, get(vs[4])?]))
            .collect::<Result<_, TrainError>>()?;
        for (o, g) in all.into_iter().enumerate() {
            let raw = &mut self.state.clouds[o];
            let m = &mut self.state.cloud_moments[o];
            let n = raw.len();
            let or_zero = |v: Vec<f64>, len: usize| if v.is_empty() { vec![0.0; len] } else { v };
            let [gm, gs, gq, gl, gc] = g;
            let gm = or_zero(gm, 3 * n);
            for i in 0..n {
                let g = &gm[3 * i..3 * i + 3];
                let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
                self.state.grad_sum[o][i] += norm;
            }
            step_adam(&mut raw.means, &gm, &mut m.means, lr.position)?;
            step_adam(&mut raw.log_scales, &or_zero(gs, 3 * n), &mut m.log_scales, lr.scale)?;
            step_adam(&mut raw.quats, &or_zero(gq, 4 * n), &mut m.quats, lr.rotation)?;
            step_adam(&mut raw.logits, &or_zero(gl, n), &mut m.logits, lr.opacity)?;
            step_adam(&mut raw.colors, &or_zero(gc, 3 * n), &mut m.colors, lr.color)?;
            for c in &mut raw.colors {
                *c = c.clamp(0.0, 1.0);
            }
            let fields = [&raw.means, &raw.log_scales, &raw.quats, &raw.logits, &raw.colors];
            if fields.iter().any(|f| f.iter().any(|x| !x.is_finite())) {
                return Err(TrainError::NonFinite { step });
            }
        }
        self.state.grad_count += 1;
        Ok(())
    }

    fn densify_now(&mut self) {
        let count = self.state.grad_count.max(1) as f64;
        for o in 0..self.state.clouds.len() {
            let mean: Vec<f64> = self.state.grad_sum[o].iter().map(|s| s / count).collect();
            let (sources, stats) = densify(&mut self.state.clouds[o], &mean, &self.config.densify);
            self.state.cloud_moments[o].remap(&sources);
            self.state.grad_sum[o] = vec![0.0; self.state.clouds[o].len()];
            self.state.densify_log.push(stats);
        }
        self.state.grad_count = 0;
    }

    /// Fails if the networks changed since the trainer was built (refinement).
    pub fn check_frozen(&self) -> Result<(), TrainError> {
        if self.config.phase == Phase::Refine && self.scene.nets.fingerprint() != self.net_fingerprint {
            return Err(TrainError::FrozenNets);
        }
        Ok(())
    }

    /// Steps until `config.steps` have run.
    pub fn run(&mut self) -> Result<(), TrainError> {
        while (self.state.step as usize) < self.config.steps {
            self.step()?;
        }
        self.check_frozen()
    }
}

/// Result of a complete training phase.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub scene: Scene,
    pub state: TrainState,
}

impl TrainOutcome {
    pub fn history(&self) -> &[LossRecord] {
        &self.state.history
    }
}

pub fn train_dynamics(
    scene: Scene,
    guidance: &dyn GuidanceProvider,
    config: TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if config.phase != Phase::Dynamics {
        return Err(TrainError::State("train_dynamics needs phase = dynamics".into()));
    }
    let mut trainer = Trainer::new(scene, guidance, config)?;
    trainer.run()?;
    Ok(TrainOutcome {
        state: trainer.state.clone(),
        scene: trainer.into_scene(),
    })
}

pub fn train_refine(scene: Scene, guidance: &dyn GuidanceProvider, config: TrainConfig) -> Result<TrainOutcome, TrainError> {
    if config.phase != Phase::Refine {
        return Err(TrainError::State("train_refine needs phase = refine".into()));
    }
    let mut trainer = Trainer::new(scene, guidance, config)?;
    trainer.run()?;
    Ok(TrainOutcome {
        state: trainer.state.clone(),
        scene: trainer.into_scene(),
    })
}
