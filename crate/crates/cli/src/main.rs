mod frames;
mod manifest;
mod train;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use frames::{eval_dirs, write_frames, write_record, GateRecord, RenderRecord, ViewRecord};
use manifest::Manifest;
use splat4d_core::gate::{GateKind, GateMode};
use splat4d_core::pipeline::{frame_times, render_sequence};
use splat4d_core::plan::{compile_timeline_with, parse_plan, validate_plan_with, CompileOptions, ValidateOptions};
use splat4d_core::planner::{record_fixture, request_plan, PlannerConfig};
use splat4d_core::render::Camera;
use splat4d_core::scene::{export_ply, make_primitive, PrimitiveKind};
use splat4d_core::trainer::{Phase, TrainConfig, DEFAULT_DYNAMICS_STEPS, DEFAULT_REFINE_STEPS};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// A failed command: message for stderr and the process exit code.
pub struct Exit {
    code: u8,
    message: String,
}

impl Exit {
    pub const FINDINGS: u8 = 1;
    pub const INPUT: u8 = 2;
    pub const NUMERIC: u8 = 3;

    pub fn input(e: impl Display) -> Self {
        Self {
            code: Self::INPUT,
            message: e.to_string(),
        }
    }

    pub fn numeric(message: String) -> Self {
        Self {
            code: Self::NUMERIC,
            message,
        }
    }

    fn findings() -> Self {
        Self {
            code: Self::FINDINGS,
            message: String::new(),
        }
    }
}

impl From<anyhow::Error> for Exit {
    fn from(e: anyhow::Error) -> Self {
        Self {
            code: Self::INPUT,
            message: format!("{e:#}"),
        }
    }
}

/// Plan, render and train dynamic Gaussian scenes.
///
/// Exit codes: 0 success, 1 validation findings, 2 input or configuration
/// error, 3 numeric abort.
#[derive(Parser)]
#[command(name = "splat4d", version, about, long_about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ask the planning model for a plan (or replay recorded answers).
    Plan(PlanArgs),
    /// Check a plan; prints CODE<TAB>OBJ<TAB>MESSAGE per finding.
    Validate(ValidateArgs),
    /// Compile a plan into a timeline.
    Compile(CompileArgs),
    /// Write a synthetic primitive cloud as PLY.
    Init(InitArgs),
    /// Render a manifest's scene to frame files.
    Render(RenderArgs),
    /// Train networks (dynamics) or clouds (refine) against target frames.
    Train(TrainArgs),
    /// PSNR of predicted frames against reference frames, as CSV.
    Eval(EvalArgs),
}

#[derive(Args)]
struct PlanArgs {
    /// Scene prompt.
    prompt: String,
    /// Replay recorded responses from this directory; no network use.
    #[arg(long, conflicts_with = "record")]
    replay: Option<PathBuf>,
    /// Record every response into this directory.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Chat endpoint URL [default: $PLANNER_ENDPOINT].
    #[arg(long)]
    endpoint: Option<String>,
    /// Model id [default: $PLANNER_MODEL].
    #[arg(long)]
    model: Option<String>,
    /// Request timeout, seconds.
    #[arg(long)]
    timeout: Option<u64>,
    /// Extra attempts on transport failure or invalid plans.
    #[arg(long)]
    retries: Option<usize>,
    /// Output file; stdout when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    plan: PathBuf,
    /// Treat missing movement segments as stationary.
    #[arg(long)]
    lenient: bool,
    #[arg(long, default_value_t = 16)]
    frames: usize,
}

#[derive(Args)]
struct CompileArgs {
    plan: PathBuf,
    #[arg(long)]
    lenient: bool,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    /// Output file; stdout when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InitArgs {
    /// sphere, box, torus or disk.
    #[arg(long)]
    primitive: String,
    #[arg(long)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// r,g,b in [0, 1].
    #[arg(long, value_parser = parse_triple, default_value = "0.8,0.8,0.8")]
    color: [f64; 3],
    /// Uniform scale applied to the unit primitive.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// The six evaluation azimuths −120, −60, 0, 60, 120, 180.
    EvalOrbit,
}

#[derive(Args)]
struct RenderArgs {
    manifest: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    /// Frame count [default: the manifest's].
    #[arg(long)]
    frames: Option<usize>,
    /// az,el,r in degrees and scene units [default: the manifest's camera].
    #[arg(long, value_parser = parse_triple)]
    camera: Option<[f64; 3]>,
    /// Gate mode [default: the manifest's].
    #[arg(long)]
    mode: Option<String>,
    /// Gate seed [default: the manifest's].
    #[arg(long)]
    gate_seed: Option<u64>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Also write float PFM frames.
    #[arg(long)]
    pfm: bool,
}

#[derive(Args)]
struct TrainArgs {
    manifest: PathBuf,
    #[arg(long, value_parser = ["dynamics", "refine"])]
    phase: String,
    /// Directory written by `render` holding the target frames.
    #[arg(long)]
    target: PathBuf,
    /// Run directory.
    #[arg(long, short)]
    out: PathBuf,
    /// [default: 4500 dynamics, 4000 refine]
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dynamics: require exactly this many points per object.
    #[arg(long)]
    fixed_points: Option<usize>,
    /// Multiply every learning rate.
    #[arg(long, default_value_t = 1.0)]
    lr_scale: f64,
    /// Weight of the transition schedule penalty; 0 disables it.
    #[arg(long, default_value_t = 0.0)]
    schedule_weight: f64,
    /// Refine: turn densification off.
    #[arg(long)]
    no_densify: bool,
    /// Refine: steps between densifications.
    #[arg(long)]
    densify_interval: Option<usize>,
    /// Refine: per-object point cap.
    #[arg(long)]
    max_points: Option<usize>,
    /// Steps between checkpoints; 0 disables them.
    #[arg(long, default_value_t = 500)]
    checkpoint_every: usize,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
}

fn parse_triple(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated numbers, got `{s}`"));
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| format!("`{p}` is not a number"))?;
    }
    Ok(out)
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), Exit> {
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_plan(args: PlanArgs) -> Result<(), Exit> {
    let mut config = PlannerConfig::from_env();
    if let Some(e) = args.endpoint {
        config.endpoint = e;
    }
    if let Some(m) = args.model {
        config.model = m;
    }
    if let Some(t) = args.timeout {
        config.timeout_secs = t;
    }
    if let Some(r) = args.retries {
        config.retries = r;
    }
    config.replay = args.replay;
    let doc = match &args.record {
        Some(dir) => record_fixture(&config, &args.prompt, dir),
        None => request_plan(&config, &args.prompt),
    }
    .map_err(Exit::input)?;
    let text = serde_json::to_string_pretty(&doc.to_json()).map_err(Exit::input)? + "\n";
    write_output(args.out.as_deref(), &text)
}

fn read_plan(path: &Path) -> Result<splat4d_core::plan::PlanDocument, Exit> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    parse_plan(&bytes).map_err(Exit::input)
}

fn cmd_validate(args: ValidateArgs) -> Result<(), Exit> {
    let doc = read_plan(&args.plan)?;
    let report = validate_plan_with(
        &doc,
        ValidateOptions {
            lenient: args.lenient,
            frame_count: args.frames,
        },
    );
    print!("{report}");
    if report.has_errors() {
        return Err(Exit::findings());
    }
    Ok(())
}

fn cmd_compile(args: CompileArgs) -> Result<(), Exit> {
    let doc = read_plan(&args.plan)?;
    let options = CompileOptions {
        frame_count: args.frames,
        lenient: args.lenient,
    };
    match compile_timeline_with(&doc, options) {
        Ok(timeline) => write_output(args.out.as_deref(), &(timeline.to_json() + "\n")),
        Err(splat4d_core::plan::CompileError::Invalid(report)) => {
            print!("{report}");
            Err(Exit::findings())
        }
        Err(e) => Err(Exit::input(e)),
    }
}

fn cmd_init(args: InitArgs) -> Result<(), Exit> {
    let kind: PrimitiveKind = args.primitive.parse().map_err(Exit::input)?;
    let cloud = make_primitive(kind, args.points, args.seed, args.color.into()).map_err(Exit::input)?;
    let cloud = cloud.scaled(args.scale);
    std::fs::write(&args.out, export_ply(&cloud)).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}

fn cmd_render(args: RenderArgs) -> Result<(), Exit> {
    let manifest = Manifest::load(&args.manifest)?;
    let scene = manifest.scene()?;
    let frames = args.frames.unwrap_or(manifest.frame_count);
    if frames == 0 {
        return Err(Exit::input("--frames must be at least 1"));
    }
    let mut gate = manifest.gate();
    if let Some(m) = &args.mode {
        gate.kind = m.parse::<GateKind>().map_err(Exit::input)?;
    }
    if let Some(s) = args.gate_seed {
        gate.seed = s;
    }
    let mut camera: Camera = manifest.camera;
    if let Some([az, el, r]) = args.camera {
        camera.azimuth = az;
        camera.elevation = el;
        camera.radius = r;
    }
    camera.validate().map_err(Exit::input)?;
    let (cameras, preset) = match args.preset {
        Some(Preset::EvalOrbit) => (camera.eval_orbit(), Some("eval-orbit".to_string())),
        None => (vec![camera], None),
    };
    let mut views = Vec::new();
    for (v, cam) in cameras.iter().enumerate() {
        let dir = if preset.is_some() { format!("view_{v}") } else { ".".to_string() };
        let batch = render_sequence(&scene, gate, &[*cam], frames).map_err(Exit::input)?;
        let path = if preset.is_some() { args.out.join(&dir) } else { args.out.clone() };
        write_frames(&path, &batch, args.pfm)?;
        views.push(ViewRecord {
            dir,
            cameras: batch.cameras,
        });
    }
    let record = RenderRecord {
        frames,
        times: frame_times(frames),
        gate: gate_record(gate),
        preset,
        pfm: args.pfm,
        views,
    };
    write_record(&args.out, &record)?;
    Ok(())
}

fn gate_record(gate: GateMode) -> GateRecord {
    GateRecord {
        mode: gate.kind,
        seed: gate.seed,
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), Exit> {
    let phase: Phase = args.phase.parse().map_err(Exit::input)?;
    let mut config = match phase {
        Phase::Dynamics => TrainConfig::dynamics(args.steps.unwrap_or(DEFAULT_DYNAMICS_STEPS), args.seed),
        Phase::Refine => TrainConfig::refine(args.steps.unwrap_or(DEFAULT_REFINE_STEPS), args.seed),
    };
    let lr = &mut config.lr;
    for rate in [&mut lr.nets, &mut lr.position, &mut lr.scale, &mut lr.rotation, &mut lr.opacity, &mut lr.color] {
        *rate *= args.lr_scale;
    }
    config.fixed_points = args.fixed_points;
    config.schedule_weight = args.schedule_weight;
    if phase == Phase::Refine {
        config.densify.enabled = !args.no_densify;
        if let Some(i) = args.densify_interval {
            config.densify.interval = i;
        }
        if let Some(m) = args.max_points {
            config.densify.max_points = m;
        }
    }
    let manifest = Manifest::load(&args.manifest)?;
    config.prompt = if manifest.prompt.is_empty() {
        manifest.objects.iter().map(|o| o.prompt.as_str()).collect::<Vec<_>>().join("; ")
    } else {
        manifest.prompt.clone()
    };
    train::run(train::TrainJob {
        manifest_path: args.manifest,
        target: args.target,
        out: args.out,
        config,
        checkpoint_every: args.checkpoint_every,
        resume: args.resume,
    })
}

fn cmd_eval(args: EvalArgs) -> Result<(), Exit> {
    print!("{}", eval_dirs(&args.pred, &args.reference)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Plan(a) => cmd_plan(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Compile(a) => cmd_compile(a),
        Command::Init(a) => cmd_init(a),
        Command::Render(a) => cmd_render(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !e.message.is_empty() {
                eprintln!("error: {}", e.message);
            }
            ExitCode::from(e.code)
        }
    }
}
