use std::path::{Component, Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use lw_core::layers::centroid;
use lw_core::optimize::{self, GuidanceProvider, HttpGuidance, LossRecord, Problem, ZeroGuidance};
use lw_core::propagate::{interpolate_layers, propagate_edit};
use lw_core::session::{self, frame_name};
use lw_core::synth::{generate_scene, SceneSpec};
use lw_core::{imageio, EditBundle, LayeredVideo, Raster};
use serde::Serialize;

use crate::exit::{staged, usage, PortBusy, Stage};
use crate::server;

/// Frame size accepted without `--full-res`.
pub const DESK_CAP: (usize, usize) = (192, 108);
/// Largest frame size accepted at all.
pub const FULL_RES_CAP: (usize, usize) = (768, 432);
/// Propagation output directory inside a session.
pub const DEFAULT_OUT: &str = "out";

#[derive(Debug, Parser)]
#[command(name = "lw", version, about = "Shape-aware deformation of layered videos")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic session with closed-form ground truth.
    Synth(SynthArgs),
    /// Propagate the keyframe edit to every frame.
    Propagate(PropagateArgs),
    /// Refine the propagated edit under a guidance gradient.
    Optimize(OptimizeArgs),
    /// Render the shape interpolated between source and edit.
    Interpolate(InterpolateArgs),
    /// Serve the correspondence-editor API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct Resolution {
    /// Allow frames up to 768x432 (default cap is 192x108).
    #[arg(long)]
    pub full_res: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene spec as JSON.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub spec: Option<PathBuf>,
    /// Built-in scene: s1, s2 or miniature.
    #[arg(long)]
    pub preset: Option<String>,
    /// Session directory to write.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub resolution: Resolution,
}

#[derive(Debug, Args)]
pub struct PropagateArgs {
    pub session: PathBuf,
    /// Keyframe index (1-based); defaults to the session's.
    #[arg(long)]
    pub keyframe: Option<usize>,
    /// Output directory, relative to the session.
    #[arg(long, default_value = DEFAULT_OUT)]
    pub out: PathBuf,
    #[command(flatten)]
    pub resolution: Resolution,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    pub session: PathBuf,
    #[arg(long, default_value_t = optimize::DEFAULT_ITERATIONS)]
    pub iters: usize,
    /// Comma-separated 1-based frame indices; defaults to first, keyframe and last.
    #[arg(long, value_delimiter = ',')]
    pub frames: Vec<usize>,
    /// zero | target:DIR | http:URL
    #[arg(long, default_value = "zero")]
    pub guidance: String,
    #[arg(long, default_value_t = optimize::DEFAULT_STEP)]
    pub step: f64,
    #[arg(long, env = "LW_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Guidance request timeout in seconds.
    #[arg(long, default_value_t = 30.0)]
    pub timeout: f64,
    #[arg(long, default_value = DEFAULT_OUT)]
    pub out: PathBuf,
    #[command(flatten)]
    pub resolution: Resolution,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    pub session: PathBuf,
    /// Interpolation parameter in [0, 1].
    #[arg(long, allow_negative_numbers = true)]
    pub t: f64,
    #[arg(long, default_value = DEFAULT_OUT)]
    pub out: PathBuf,
    #[command(flatten)]
    pub resolution: Resolution,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    pub session: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Directory of static UI assets served at `/`.
    #[arg(long)]
    pub ui: Option<PathBuf>,
    #[command(flatten)]
    pub resolution: Resolution,
}

pub fn run(cli: Cli, threads: Option<usize>) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Propagate(a) => propagate(&a),
        Command::Optimize(a) => optimize_cmd(&a),
        Command::Interpolate(a) => interpolate(&a),
        Command::Serve(a) => serve(&a, threads),
    }
}

pub fn check_resolution((w, h): (usize, usize), full_res: bool) -> Result<()> {
    let (cw, ch) = if full_res { FULL_RES_CAP } else { DESK_CAP };
    if w > cw || h > ch {
        let hint = if full_res { "" } else { "; pass --full-res for up to 768x432" };
        return Err(usage(format!("frame size {w}x{h} exceeds the {cw}x{ch} cap{hint}")));
    }
    Ok(())
}

/// Resolves an output path inside the session directory.
pub fn output_dir(session: &Path, out: &Path) -> Result<PathBuf> {
    let escapes = out.is_absolute() || out.components().any(|c| matches!(c, Component::ParentDir | Component::Prefix(_)));
    if escapes {
        return Err(usage(format!("output {} must be a relative path inside the session", out.display())));
    }
    Ok(session.join(out))
}

fn load_spec(a: &SynthArgs) -> Result<SceneSpec> {
    if let Some(name) = &a.preset {
        return match name.as_str() {
            "s1" => Ok(SceneSpec::s1()),
            "s2" => Ok(SceneSpec::s2()),
            "miniature" => Ok(SceneSpec::miniature()),
            other => Err(usage(format!("unknown preset {other:?} (expected s1, s2 or miniature)"))),
        };
    }
    let path = a.spec.as_ref().expect("clap requires spec or preset");
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read spec {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("spec {}: {e}", path.display())))
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let spec = load_spec(a)?;
    spec.validate()?;
    check_resolution((spec.frame_size[0], spec.frame_size[1]), a.resolution.full_res)?;
    let scene = generate_scene(&spec)?;
    session::write_synthetic(&a.out, &scene).map_err(staged("write"))?;
    println!("wrote {} frames to {}", spec.frame_count, a.out.display());
    Ok(())
}

struct Loaded {
    video: LayeredVideo,
    bundle: EditBundle,
}

fn load_session(root: &Path, keyframe: Option<usize>, full_res: bool) -> Result<Loaded> {
    let config = session::read_config(root).map_err(staged("load"))?;
    check_resolution((config.frame_size[0], config.frame_size[1]), full_res)?;
    if let Some(k) = keyframe {
        if !(1..=config.frame_count).contains(&k) {
            return Err(usage(format!("keyframe {k} outside 1..={}", config.frame_count)));
        }
    }
    let video = session::load_video(root, keyframe).map_err(staged("load"))?;
    let bundle = session::load_bundle(root, video.keyframe_index()).map_err(staged("load"))?;
    Ok(Loaded { video, bundle })
}

fn require_propagation(out: &Path) -> Result<()> {
    let report = out.join("report.json");
    if !report.is_file() {
        return Err(anyhow::anyhow!(
            "propagation output {} not found; run `lw propagate` first",
            report.display()
        ))
        .context(Stage("load"));
    }
    Ok(())
}

pub fn propagate(a: &PropagateArgs) -> Result<()> {
    let out = output_dir(&a.session, &a.out)?;
    let s = load_session(&a.session, a.keyframe, a.resolution.full_res)?;
    let result = propagate_edit(&s.video, &s.bundle).map_err(staged("propagate"))?;
    session::write_result(&out, &result).map_err(staged("write"))?;
    let report = session::build_report(&a.session, &s.video, &s.bundle, &result).map_err(staged("report"))?;
    session::write_report(&out.join("report.json"), &report).map_err(staged("write"))?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    match &report.oracle {
        Some(o) => println!("propagated {} frames; worst oracle error {:.3}/255", report.frames, o.max_mae * 255.0),
        None => println!("propagated {} frames", report.frames),
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct OptimizeReport {
    input_hash: String,
    iterations: usize,
    frames: Vec<usize>,
    guidance: String,
    seed: u64,
    step: f64,
    initial: LossRecord,
    last: LossRecord,
}

fn reference_frames(root: &Path, dir: &str, frames: &[usize]) -> Result<optimize::TargetImageGuidance> {
    let dir = match dir {
        "oracle" | "oracle_frames" => root.join("oracle/frames"),
        other => output_dir(root, Path::new(other))?,
    };
    let refs = frames
        .iter()
        .map(|&j| Ok((j, imageio::read_rgb(&dir.join(frame_name(j, "png"))).map_err(staged("load"))?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(optimize::guidance_target_image(refs))
}

fn guidance(a: &OptimizeArgs, frames: &[usize]) -> Result<Box<dyn GuidanceProvider>> {
    let g = a.guidance.trim();
    if g == "zero" {
        return Ok(Box::new(ZeroGuidance));
    }
    if let Some(dir) = g.strip_prefix("target:") {
        return Ok(Box::new(reference_frames(&a.session, dir, frames)?));
    }
    if g.starts_with("http://") || g.starts_with("https://") || g.starts_with("http:") {
        let url = match g.strip_prefix("http:") {
            Some(rest) if !rest.starts_with("//") => format!("http://{rest}"),
            _ => g.to_string(),
        };
        if !(a.timeout > 0.0 && a.timeout.is_finite()) {
            return Err(usage(format!("timeout must be positive, got {}", a.timeout)));
        }
        return Ok(Box::new(HttpGuidance::new(&url, Duration::from_secs_f64(a.timeout), a.seed)));
    }
    Err(usage(format!("unknown guidance {g:?} (expected zero, target:DIR or http:URL)")))
}

pub fn optimize_cmd(a: &OptimizeArgs) -> Result<()> {
    let out = output_dir(&a.session, &a.out)?;
    if !(a.step > 0.0 && a.step.is_finite()) {
        return Err(usage(format!("step must be positive, got {}", a.step)));
    }
    let s = load_session(&a.session, None, a.resolution.full_res)?;
    require_propagation(&out)?;
    let n = s.video.frame_count();
    let frames = if a.frames.is_empty() {
        optimize::select_frames(n, s.video.keyframe_index(), optimize::DEFAULT_FRAME_COUNT)
    } else {
        if let Some(bad) = a.frames.iter().find(|j| !(1..=n).contains(*j)) {
            return Err(usage(format!("frame {bad} outside 1..={n}")));
        }
        a.frames.clone()
    };
    let provider = guidance(a, &frames)?;
    let problem = Problem::new(&s.video, &s.bundle, &frames).map_err(staged("optimize"))?;
    let state = problem.initial_state(optimize::LossWeights::DEFAULT, a.step);
    let run = optimize::optimize_from(&problem, state, provider.as_ref(), a.iters).map_err(staged("optimize"))?;
    let mut records = run.records();
    if records.is_empty() {
        let e = problem.evaluate(&run.state, &ZeroGuidance).map_err(staged("optimize"))?;
        records.push(LossRecord {
            iteration: 0,
            l_k: e.losses.keyframe,
            l_a: e.losses.tv,
            l_sc: e.losses.semantic,
            total: e.total,
        });
    }
    let result = problem.render_state(&run.state).map_err(staged("render"))?;
    let opt = out.join("opt");
    session::write_result(&opt, &result).map_err(staged("write"))?;
    optimize::write_loss_csv(&opt.join("loss.csv"), &records).map_err(staged("write"))?;
    let report = OptimizeReport {
        input_hash: session::input_hash(&a.session).map_err(staged("report"))?,
        iterations: a.iters,
        frames,
        guidance: a.guidance.clone(),
        seed: a.seed,
        step: a.step,
        initial: records[0],
        last: *records.last().expect("at least one record"),
    };
    session::write_report(&opt.join("report.json"), &report).map_err(staged("write"))?;
    println!(
        "optimized {} iterations; objective {:.6e} -> {:.6e}",
        a.iters, report.initial.total, report.last.total
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct CentroidRow {
    frame: usize,
    source: Option<[f64; 2]>,
    interpolated: Option<[f64; 2]>,
    edited: Option<[f64; 2]>,
    /// Distance from the interpolated centroid to the linear blend of the endpoints.
    linearity_error: Option<f64>,
}

#[derive(Debug, Serialize)]
struct InterpolateReport {
    input_hash: String,
    t: f64,
    frames: usize,
    centroids: Vec<CentroidRow>,
    max_linearity_error: f64,
}

pub fn interp_dir_name(t: f64) -> String {
    format!("interp_t{t:.2}")
}

pub fn interpolate(a: &InterpolateArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.t) {
        return Err(usage(format!("t = {} outside [0, 1]", a.t)));
    }
    let out = output_dir(&a.session, &a.out)?;
    let s = load_session(&a.session, None, a.resolution.full_res)?;
    require_propagation(&out)?;
    let result = propagate_edit(&s.video, &s.bundle).map_err(staged("propagate"))?;
    let at = |t| interpolate_layers(&result, &s.video, t).map_err(staged("interpolate"));
    let (l0, lt, l1) = (at(0.0)?, at(a.t)?, at(1.0)?);
    let dir = out.join(interp_dir_name(a.t));
    let frames: Vec<Raster> = lt.iter().map(|(f, _)| f.clone()).collect();
    session::write_frames(&dir.join("frames"), &frames).map_err(staged("write"))?;
    let mattes: Vec<Raster> = lt.iter().map(|(_, m)| m.clone()).collect();
    session::write_frames(&dir.join("alpha"), &mattes).map_err(staged("write"))?;

    let xy = |v: lw_core::Vec2| [v.x, v.y];
    let centroids: Vec<CentroidRow> = (0..frames.len())
        .map(|i| {
            let (c0, ct, c1) = (centroid(&l0[i].1), centroid(&lt[i].1), centroid(&l1[i].1));
            let linearity_error = match (c0, ct, c1) {
                (Some(c0), Some(ct), Some(c1)) => Some((ct - (c0 * (1.0 - a.t) + c1 * a.t)).norm()),
                _ => None,
            };
            CentroidRow {
                frame: i + 1,
                source: c0.map(xy),
                interpolated: ct.map(xy),
                edited: c1.map(xy),
                linearity_error,
            }
        })
        .collect();
    let report = InterpolateReport {
        input_hash: session::input_hash(&a.session).map_err(staged("report"))?,
        t: a.t,
        frames: frames.len(),
        max_linearity_error: centroids.iter().filter_map(|c| c.linearity_error).fold(0.0, f64::max),
        centroids,
    };
    session::write_report(&dir.join("report.json"), &report).map_err(staged("write"))?;
    println!("wrote {} frames to {}", report.frames, dir.display());
    Ok(())
}

pub fn serve(a: &ServeArgs, threads: Option<usize>) -> Result<()> {
    let state = server::AppState::open(&a.session, a.resolution.full_res, a.ui.clone())?;
    let mut builder = tokio::runtime::Builder::new_multi_thread();
    if let Some(n) = threads {
        builder.worker_threads(n);
    }
    let runtime = builder.enable_all().build().context(Stage("serve"))?;
    runtime.block_on(async move {
        let addr = format!("{}:{}", a.host, a.port);
        let listener = match tokio::net::TcpListener::bind(&addr).await {
            Ok(l) => l,
            Err(e) if e.kind() == std::io::ErrorKind::AddrInUse => return Err(anyhow::Error::new(PortBusy(addr))),
            Err(e) => return Err(anyhow::Error::new(e).context(Stage("serve"))),
        };
        eprintln!("serving {} on http://{}", a.session.display(), listener.local_addr()?);
        axum::serve(listener, server::router(state)).await.context(Stage("serve"))
    })
}
