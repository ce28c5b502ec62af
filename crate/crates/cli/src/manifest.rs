//! Scene manifest: which clouds, which plan, which networks.

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use splat4d_core::gate::{GateKind, GateMode};
use splat4d_core::neural::{check_compatible, load_checkpoint, NetShape, SceneNets, DEFAULT_W_TRANS};
use splat4d_core::pipeline::Scene;
use splat4d_core::plan::{compile_timeline, parse_plan, TimelineProgram, DEFAULT_FRAME_COUNT};
use splat4d_core::render::Camera;
use splat4d_core::scene::{import_ply, make_primitive, GaussianCloud, ImportOptions, PrimitiveKind};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrimitiveSpec {
    pub kind: PrimitiveKind,
    pub points: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_color")]
    pub color: [f64; 3],
    #[serde(default = "one")]
    pub scale: f64,
}

fn default_color() -> [f64; 3] {
    [0.8; 3]
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectEntry {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ply: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub primitive: Option<PrimitiveSpec>,
    #[serde(default)]
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateSection {
    pub mode: GateKind,
    pub seed: u64,
}

impl Default for GateSection {
    fn default() -> Self {
        Self {
            mode: GateKind::Threshold,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSection {
    pub hidden: Vec<usize>,
    pub bands_x: usize,
    pub bands_t: usize,
    pub w_trans: f64,
    pub seed: u64,
    pub shared_transition: bool,
}

impl Default for NetSection {
    fn default() -> Self {
        let shape = NetShape::default();
        Self {
            hidden: shape.hidden,
            bands_x: shape.bands_x,
            bands_t: shape.bands_t,
            w_trans: DEFAULT_W_TRANS,
            seed: 0,
            shared_transition: false,
        }
    }
}

impl NetSection {
    pub fn shape(&self) -> NetShape {
        NetShape {
            hidden: self.hidden.clone(),
            bands_x: self.bands_x,
            bands_t: self.bands_t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Plan document or compiled timeline.
    pub plan: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_frames")]
    pub frame_count: usize,
    #[serde(default)]
    pub prompt: String,
    #[serde(default)]
    pub gate: GateSection,
    #[serde(default)]
    pub camera: Camera,
    #[serde(default)]
    pub net: NetSection,
    pub objects: Vec<ObjectEntry>,
}

fn default_frames() -> usize {
    DEFAULT_FRAME_COUNT
}

impl Manifest {
    /// Reads TOML, or JSON when the extension is `.json`. Relative paths are
    /// resolved against the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        let mut m: Manifest = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        } else {
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut m.plan);
        if let Some(c) = &mut m.checkpoint {
            resolve(c);
        }
        for o in &mut m.objects {
            if let Some(p) = &mut o.ply {
                resolve(p);
            }
        }
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<()> {
        ensure!(!self.objects.is_empty(), "manifest lists no objects");
        ensure!(self.frame_count > 0, "frame_count must be at least 1");
        ensure!(self.plan.is_file(), "plan {} does not exist", self.plan.display());
        if let Some(c) = &self.checkpoint {
            ensure!(c.is_file(), "checkpoint {} does not exist", c.display());
        }
        let mut labels = HashSet::new();
        for o in &self.objects {
            ensure!(labels.insert(o.label.as_str()), "duplicate object label `{}`", o.label);
            match (&o.ply, &o.primitive) {
                (Some(p), None) => ensure!(p.is_file(), "object `{}`: {} does not exist", o.label, p.display()),
                (None, Some(_)) => {}
                _ => bail!("object `{}` needs exactly one of `ply` and `primitive`", o.label),
            }
        }
        self.camera.validate()?;
        Ok(())
    }

    pub fn gate(&self) -> GateMode {
        GateMode::new(self.gate.mode, self.gate.seed)
    }

    pub fn timeline(&self) -> Result<TimelineProgram> {
        let bytes = std::fs::read(&self.plan).with_context(|| format!("reading {}", self.plan.display()))?;
        let value: serde_json::Value =
            serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", self.plan.display()))?;
        if value.get("sample").is_some() {
            let doc = parse_plan(&bytes)?;
            Ok(compile_timeline(&doc, self.frame_count)?)
        } else {
            Ok(TimelineProgram::from_json(std::str::from_utf8(&bytes)?)?)
        }
    }

    pub fn clouds(&self) -> Result<Vec<GaussianCloud>> {
        self.objects
            .iter()
            .map(|o| -> Result<GaussianCloud> {
                if let Some(p) = &o.ply {
                    let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
                    let options = ImportOptions {
                        canonical: true,
                        label: o.label.clone(),
                    };
                    return import_ply(&bytes, &options).with_context(|| format!("importing {}", p.display()));
                }
                let s = o.primitive.as_ref().expect("checked at load");
                let cloud = make_primitive(s.kind, s.points, s.seed, s.color.into())?;
                Ok(cloud.scaled(s.scale).with_label(o.label.clone()))
            })
            .collect()
    }

    /// Fresh networks for this layout, or the checkpoint when one is named.
    pub fn nets(&self, timeline: &TimelineProgram) -> Result<SceneNets> {
        let fresh = SceneNets::new(
            self.objects.len(),
            timeline.transitions.len(),
            self.net.shared_transition,
            &self.net.shape(),
            self.net.w_trans,
            self.net.seed,
        )?;
        match &self.checkpoint {
            None => Ok(fresh),
            Some(path) => {
                let loaded = load_checkpoint(path)?;
                check_compatible(&fresh, &loaded)?;
                Ok(loaded)
            }
        }
    }

    pub fn scene(&self) -> Result<Scene> {
        let timeline = self.timeline()?;
        ensure!(
            timeline.objects.len() == self.objects.len(),
            "plan has {} objects, manifest has {}",
            timeline.objects.len(),
            self.objects.len()
        );
        let nets = self.nets(&timeline)?;
        Ok(Scene::new(self.clouds()?, timeline, nets)?)
    }
}
