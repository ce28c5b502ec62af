//! The `train` command and its run directory.

use crate::frames::load_targets;
use crate::manifest::Manifest;
use crate::Exit;
use anyhow::{Context, Result};
use serde::Serialize;
use splat4d_core::neural::encode_checkpoint;
use splat4d_core::pipeline::Scene;
use splat4d_core::scene::export_ply;
use splat4d_core::trainer::{ReconstructionGuidance, TrainConfig, TrainError, TrainState, Trainer};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Serialize)]
struct RunConfig<'a> {
    manifest_path: &'a Path,
    manifest: &'a Manifest,
    target: &'a Path,
    resume: Option<&'a Path>,
    checkpoint_every: usize,
    train: &'a TrainConfig,
}

fn file_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Networks, clouds and (optionally) the train state into `dir`.
pub fn write_snapshot(dir: &Path, scene: &Scene, state: Option<&TrainState>) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("nets.t4dn"), encode_checkpoint(&scene.nets))?;
    for (i, cloud) in scene.objects.iter().enumerate() {
        let name = format!("{i:02}_{}.ply", file_label(cloud.label()));
        fs::write(dir.join(name), export_ply(cloud))?;
    }
    if let Some(s) = state {
        fs::write(dir.join("state.json"), s.to_json())?;
    }
    Ok(())
}

pub struct TrainJob {
    pub manifest_path: PathBuf,
    pub target: PathBuf,
    pub out: PathBuf,
    pub config: TrainConfig,
    pub checkpoint_every: usize,
    pub resume: Option<PathBuf>,
}

fn train_exit(e: TrainError) -> Exit {
    match e {
        TrainError::NonFinite { step } => Exit::numeric(format!("non-finite gradient at step {step}, training aborted")),
        other => Exit::input(other),
    }
}

pub fn run(job: TrainJob) -> Result<(), Exit> {
    let manifest = Manifest::load(&job.manifest_path)?;
    let scene = manifest.scene()?;
    let targets = load_targets(&job.target)?;
    let guidance = ReconstructionGuidance::new(targets).map_err(Exit::input)?;

    let mut trainer = match &job.resume {
        None => Trainer::new(scene, &guidance, job.config.clone()),
        Some(dir) => {
            let path = dir.join("state.json");
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let state = TrainState::from_json(&text).map_err(Exit::input)?;
            Trainer::resume(scene, &guidance, job.config.clone(), state)
        }
    }
    .map_err(train_exit)?;

    fs::create_dir_all(&job.out).with_context(|| format!("creating {}", job.out.display()))?;
    let run_config = RunConfig {
        manifest_path: &job.manifest_path,
        manifest: &manifest,
        target: &job.target,
        resume: job.resume.as_deref(),
        checkpoint_every: job.checkpoint_every,
        train: &job.config,
    };
    fs::write(job.out.join("config.json"), serde_json::to_string_pretty(&run_config).map_err(Exit::input)? + "\n")
        .context("writing config.json")?;

    let mut csv = String::from("step,loss,wall_ms\n");
    for r in &trainer.state().history {
        csv.push_str(&format!("{},{},\n", r.step, r.loss));
    }
    let loss_path = job.out.join("loss.csv");
    let mut loss_file = fs::File::create(&loss_path).with_context(|| format!("creating {}", loss_path.display()))?;
    loss_file.write_all(csv.as_bytes()).context("writing loss.csv")?;

    let started = Instant::now();
    while (trainer.step_index() as usize) < job.config.steps {
        let step = trainer.step_index();
        let loss = trainer.step().map_err(train_exit)?;
        writeln!(loss_file, "{step},{loss},{}", started.elapsed().as_millis()).context("writing loss.csv")?;
        let done = trainer.step_index() as usize;
        if job.checkpoint_every > 0 && done % job.checkpoint_every == 0 && done < job.config.steps {
            let dir = job.out.join("checkpoints").join(format!("step_{done:06}"));
            write_snapshot(&dir, trainer.scene(), Some(trainer.state()))?;
        }
    }
    trainer.check_frozen().map_err(train_exit)?;
    write_snapshot(&job.out.join("final"), trainer.scene(), Some(trainer.state()))?;
    let last = trainer.state().history.last().map_or(f64::NAN, |r| r.loss);
    eprintln!(
        "{} steps, final loss {last:.6e}, points {:?}",
        trainer.step_index(),
        trainer.scene().point_counts()
    );
    Ok(())
}
