//! Frame directories: what `render` writes and `train` / `eval` read.

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use splat4d_core::gate::GateKind;
use splat4d_core::pipeline::FrameBatch;
use splat4d_core::render::{psnr, Camera, Image};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub const SIDECAR: &str = "render.json";

pub fn frame_name(k: usize, ext: &str) -> String {
    format!("frame_{k:04}.{ext}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    /// Relative to the sidecar's directory.
    pub dir: String,
    /// One camera per frame.
    pub cameras: Vec<Camera>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub mode: GateKind,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderRecord {
    pub frames: usize,
    pub times: Vec<f64>,
    pub gate: GateRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub pfm: bool,
    pub views: Vec<ViewRecord>,
}

/// Writes one view's frames into `dir`.
pub fn write_frames(dir: &Path, batch: &FrameBatch, pfm: bool) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (k, img) in batch.images.iter().enumerate() {
        fs::write(dir.join(frame_name(k, "png")), img.to_png()?)?;
        if pfm {
            fs::write(dir.join(frame_name(k, "pfm")), img.to_pfm())?;
        }
    }
    Ok(())
}

pub fn write_record(dir: &Path, record: &RenderRecord) -> Result<()> {
    let text = serde_json::to_string_pretty(record)?;
    fs::write(dir.join(SIDECAR), text + "\n")?;
    Ok(())
}

pub fn read_record(dir: &Path) -> Result<RenderRecord> {
    let path = dir.join(SIDECAR);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// PFM when present, PNG otherwise.
fn load_frame(dir: &Path, k: usize) -> Result<Image> {
    let pfm = dir.join(frame_name(k, "pfm"));
    let path = if pfm.is_file() { pfm } else { dir.join(frame_name(k, "png")) };
    Ok(Image::load(&path)?)
}

/// One batch per recorded view, ready for reconstruction guidance.
pub fn load_targets(dir: &Path) -> Result<Vec<FrameBatch>> {
    let record = read_record(dir)?;
    ensure!(!record.views.is_empty(), "{} lists no views", dir.join(SIDECAR).display());
    record
        .views
        .iter()
        .map(|view| {
            ensure!(view.cameras.len() == record.frames, "view `{}` camera count differs from frame count", view.dir);
            let vdir = dir.join(&view.dir);
            let images = (0..record.frames)
                .map(|k| load_frame(&vdir, k))
                .collect::<Result<Vec<_>>>()?;
            Ok(FrameBatch {
                images,
                times: record.times.clone(),
                cameras: view.cameras.clone(),
            })
        })
        .collect()
}

/// Frame files under `dir` (one subdirectory level deep), keyed by relative
/// path without extension. PFM wins over PNG for the same key.
fn frame_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    fn scan(dir: &Path, prefix: &str, depth: usize, out: &mut BTreeMap<String, PathBuf>) -> Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let path = e.path();
            let name = e.file_name().to_string_lossy().into_owned();
            if path.is_dir() {
                if depth > 0 {
                    scan(&path, &format!("{prefix}{name}/"), depth - 1, out)?;
                }
                continue;
            }
            let Some((stem, ext)) = name.rsplit_once('.') else { continue };
            if !stem.starts_with("frame_") || !(ext == "png" || ext == "pfm") {
                continue;
            }
            let key = format!("{prefix}{stem}");
            if ext == "pfm" || !out.contains_key(&key) {
                out.insert(key, path);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    scan(dir, "", 1, &mut out)?;
    Ok(out)
}

pub fn format_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{:.6}", v + 0.0)
    }
}

/// `frame,psnr` rows plus a final `mean` row.
pub fn eval_dirs(pred: &Path, reference: &Path) -> Result<String> {
    let p = frame_files(pred)?;
    let r = frame_files(reference)?;
    ensure!(!r.is_empty(), "no frames in {}", reference.display());
    if p.keys().ne(r.keys()) {
        bail!("frame sets differ: {} in {}, {} in {}", p.len(), pred.display(), r.len(), reference.display());
    }
    let mut out = String::from("frame,psnr\n");
    let mut sum = 0.0;
    for (key, path) in &p {
        let a = Image::load(path)?;
        let b = Image::load(&r[key])?;
        let v = psnr(&a, &b).with_context(|| format!("frame {key}"))?;
        sum += v;
        out.push_str(&format!("{key},{}\n", format_psnr(v)));
    }
    out.push_str(&format!("mean,{}\n", format_psnr(sum / p.len() as f64)));
    Ok(out)
}
