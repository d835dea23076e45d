//! `crosspaint`: cross-embodiment visual retargeting from the command line.

mod scene;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crosspaint_core::dynamics::fit_forward_dynamics;
use crosspaint_core::error::{Error, Result};
use crosspaint_core::files;
use crosspaint_core::geometry::{parse_pose_record, CameraModel};
use crosspaint_core::harness::{run_grid, workspace_camera, ExperimentSpec};
use crosspaint_core::kinematics::{remove_mount_offset, solve_ik, IkParams};
use crosspaint_core::pipeline::{Crosspainter, CrosspaintConfig, TargetObservation};
use crosspaint_core::urdf::JointState;

#[derive(Parser)]
#[command(name = "crosspaint", version, about = "Cross-embodiment visual retargeting engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cross-paint a directory of frame sets.
    Run(RunArgs),
    /// Reproject frame sets from one camera pose into another.
    Reproject(ReprojectArgs),
    /// Render a scene file to a frame set.
    Render(RenderArgs),
    /// Fit a per-dimension forward dynamics model from trajectory data.
    FitDynamics(FitArgs),
    /// Run an experiment grid and write a CSV report.
    Simulate(SimulateArgs),
    /// Solve IK for a pose and report residuals.
    IkCheck(IkArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// Pipeline config file (TOML); flags below override its values.
    #[arg(long)]
    config: PathBuf,
    /// Directory of input frame sets plus `<name>.obs.toml` state files.
    #[arg(long, value_name = "DIR")]
    r#in: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long)]
    dilate_arm_iters: Option<u32>,
    #[arg(long)]
    dilate_gripper_iters: Option<u32>,
    #[arg(long)]
    inpaint_radius: Option<u32>,
    #[arg(long)]
    use_depth_occlusion: Option<bool>,
    #[arg(long)]
    reproject: Option<bool>,
    #[arg(long)]
    mask_offset_px: Option<i32>,
    #[arg(long)]
    luminance_offset: Option<i32>,
    /// Frame-set prefix (`dir/name`) of a pre-captured background plate.
    #[arg(long)]
    background_plate: Option<String>,
}

#[derive(clap::Args)]
struct ReprojectArgs {
    #[arg(long, value_name = "DIR")]
    r#in: PathBuf,
    #[arg(long)]
    from_cam: PathBuf,
    #[arg(long)]
    to_cam: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct RenderArgs {
    /// Scene description file (TOML).
    #[arg(long)]
    scene: PathBuf,
    /// Camera file, or `workspace` for the built-in fixture camera.
    #[arg(long)]
    camera: String,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value = "frame_000000")]
    name: String,
}

#[derive(clap::Args)]
struct FitArgs {
    /// Trajectory file (`# frame=.. rotation=..` header).
    #[arg(long)]
    data: PathBuf,
    /// Output dynamics model file (TOML).
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct SimulateArgs {
    /// Experiment spec file (TOML).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value = "report.csv")]
    out: PathBuf,
    /// Master seed; overrides the spec file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct IkArgs {
    /// Fixture name (`hexa`, `septa`) or `robot.urdf:robot.toml`.
    #[arg(long)]
    robot: String,
    /// Target tool pose record: `tx ty tz qw qx qy qz [width]`.
    #[arg(long)]
    pose: String,
    /// Seed joint values (comma separated); defaults to limit midpoints.
    #[arg(long)]
    seed_joints: Option<String>,
}

/// Pipeline config file for `run`. Every field has a CLI-flag equivalent;
/// flags override file values, which override built-in defaults.
#[derive(Debug, Serialize, Deserialize)]
struct RunConfigFile {
    source_robot: String,
    target_robot: String,
    /// Camera file path or `workspace` for the built-in camera.
    source_camera: String,
    target_camera: String,
    #[serde(default = "identity_record")]
    source_base: String,
    #[serde(default = "identity_record")]
    target_base: String,
    #[serde(default)]
    dilate_arm_iters: Option<u32>,
    #[serde(default)]
    dilate_gripper_iters: Option<u32>,
    #[serde(default)]
    inpaint_radius: Option<u32>,
    #[serde(default)]
    use_depth_occlusion: Option<bool>,
    #[serde(default)]
    reproject: Option<bool>,
    #[serde(default)]
    mask_offset_px: Option<i32>,
    #[serde(default)]
    luminance_offset: Option<i32>,
    #[serde(default)]
    background_plate: Option<String>,
}

fn identity_record() -> String {
    "0 0 0 1 0 0 0 0".into()
}

fn load_camera_ref(spec: &str, base_dir: &Path) -> Result<CameraModel> {
    if spec == "workspace" {
        return Ok(workspace_camera());
    }
    let path = if Path::new(spec).is_absolute() {
        PathBuf::from(spec)
    } else {
        base_dir.join(spec)
    };
    files::load_camera(&path)
}

fn load_plate(spec: &str) -> Result<crosspaint_core::raster::FrameSet> {
    let path = Path::new(spec);
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("bad background plate `{spec}`")))?
        .to_string_lossy();
    files::load_frameset(dir, &name)
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg_dir = args.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let file: RunConfigFile = toml::from_str(&std::fs::read_to_string(&args.config)?)
        .map_err(|e| Error::Parse(format!("run config: {e}")))?;

    let source = scene::resolve_robot(&file.source_robot)?;
    let target = scene::resolve_robot(&file.target_robot)?;
    let (source_base, _) = parse_pose_record(&file.source_base)?;
    let (target_base, _) = parse_pose_record(&file.target_base)?;
    let source_camera = load_camera_ref(&file.source_camera, &cfg_dir)?;
    let target_camera = load_camera_ref(&file.target_camera, &cfg_dir)?;

    let mut cfg = CrosspaintConfig::new(
        source, source_base, target, target_base, source_camera, target_camera,
    );
    // Precedence: CLI flag > config file > built-in default.
    cfg.dilate_arm_iters = args
        .dilate_arm_iters
        .or(file.dilate_arm_iters)
        .unwrap_or(cfg.dilate_arm_iters);
    cfg.dilate_gripper_iters = args
        .dilate_gripper_iters
        .or(file.dilate_gripper_iters)
        .unwrap_or(cfg.dilate_gripper_iters);
    cfg.inpaint_radius = args
        .inpaint_radius
        .or(file.inpaint_radius)
        .unwrap_or(cfg.inpaint_radius);
    cfg.use_depth_occlusion = args
        .use_depth_occlusion
        .or(file.use_depth_occlusion)
        .unwrap_or(cfg.use_depth_occlusion);
    cfg.reproject = args.reproject.or(file.reproject).unwrap_or(cfg.reproject);
    cfg.mask_offset_px = args
        .mask_offset_px
        .or(file.mask_offset_px)
        .unwrap_or(cfg.mask_offset_px);
    cfg.luminance_offset = args
        .luminance_offset
        .or(file.luminance_offset)
        .unwrap_or(cfg.luminance_offset);
    if let Some(plate) = args.background_plate.as_ref().or(file.background_plate.as_ref()) {
        cfg.background_plate = Some(load_plate(plate)?);
    }

    let mut painter = Crosspainter::new(cfg)?;
    let names = files::list_frameset_names(&args.r#in)?;
    if names.is_empty() {
        return Err(Error::Config(format!(
            "no frame sets (*.rgb.png) found in {}",
            args.r#in.display()
        )));
    }
    std::fs::create_dir_all(&args.out)?;
    let mut diag_lines =
        String::from("name,ik_converged,ik_pos_residual,ik_rot_residual,hole_fraction,ms\n");
    let started = Instant::now();
    for name in &names {
        let frame = files::load_frameset(&args.r#in, name)?;
        let obs_file = files::load_observation(&args.r#in, name)?;
        let (eef, width) = parse_pose_record(&obs_file.eef)?;
        let joint_state = JointState::new(painter.config().target.as_ref(), obs_file.q.clone(), width)?;
        let obs = TargetObservation {
            frame,
            joint_state,
            eef,
            timestamp: obs_file.t,
            external: obs_file.external,
        };
        let frame_start = Instant::now();
        let (painted, diag) = painter.cross_paint(&obs)?;
        let ms = frame_start.elapsed().as_secs_f64() * 1e3;
        files::save_frameset(&args.out, name, &painted)?;
        diag_lines.push_str(&format!(
            "{name},{},{:.6},{:.6},{:.4},{:.2}\n",
            diag.ik_converged, diag.ik_pos_residual, diag.ik_rot_residual, diag.hole_fraction, ms
        ));
    }
    std::fs::write(args.out.join("diagnostics.csv"), diag_lines)?;
    let total = started.elapsed().as_secs_f64();
    println!(
        "painted {} frames in {:.2}s ({:.1} frames/s)",
        names.len(),
        total,
        names.len() as f64 / total
    );
    Ok(())
}

fn cmd_reproject(args: &ReprojectArgs) -> Result<()> {
    let from_cam = files::load_camera(&args.from_cam)?;
    let to_cam = files::load_camera(&args.to_cam)?;
    let names = files::list_frameset_names(&args.r#in)?;
    if names.is_empty() {
        return Err(Error::Config(format!(
            "no frame sets found in {}",
            args.r#in.display()
        )));
    }
    std::fs::create_dir_all(&args.out)?;
    for name in &names {
        let frame = files::load_frameset(&args.r#in, name)?;
        let res = crosspaint_core::reproject::reproject_frame(&frame, &from_cam, &to_cam)?;
        files::save_frameset(&args.out, name, &res.frame)?;
        files::save_mask(&args.out.join(format!("{name}.holes.png")), &res.holes)?;
        println!(
            "{name}: {} hole px ({:.2}%)",
            res.holes.count(),
            100.0 * res.holes.count() as f64 / res.frame.pixel_count() as f64
        );
    }
    Ok(())
}

fn cmd_render(args: &RenderArgs) -> Result<()> {
    let base_dir = args.scene.parent().unwrap_or(Path::new(".")).to_path_buf();
    let file = scene::SceneFile::from_toml(&std::fs::read_to_string(&args.scene)?)?;
    let scene = file.build(&base_dir)?;
    let camera = load_camera_ref(&args.camera, &base_dir)?;
    let frame = crosspaint_core::raster::render(&scene, &camera)?;
    files::save_frameset(&args.out, &args.name, &frame)?;
    println!(
        "rendered {}x{} -> {}",
        frame.width,
        frame.height,
        args.out.join(&args.name).display()
    );
    Ok(())
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let data = files::load_dataset(&args.data)?;
    let model = fit_forward_dynamics(&data)?;
    std::fs::write(&args.out, files::dynamics_to_toml(&model))?;
    for (name, dim) in crosspaint_core::dynamics::POSE_DIM_NAMES.iter().zip(&model.dims) {
        println!(
            "{name}: slope {:.6} intercept {:.6} residual_rms {:.2e}{}",
            dim.slope,
            dim.intercept,
            dim.residual_rms,
            if dim.rank_deficient { " (rank deficient)" } else { "" }
        );
    }
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let mut spec = ExperimentSpec::from_toml(&std::fs::read_to_string(&args.spec)?)?;
    if let Some(seed) = args.seed {
        spec.master_seed = seed;
    }
    let report = run_grid(&spec)?;
    std::fs::write(&args.out, report.to_csv())?;
    for cell in &report.cells {
        println!(
            "{} {}->{} [{}] {}: {}/{} ({:.0}%), {} invalid",
            cell.task,
            cell.source,
            cell.target,
            cell.mode,
            cell.perturbation,
            cell.successes,
            cell.episodes,
            100.0 * cell.success_rate(),
            cell.invalid
        );
    }
    println!("report written to {}", args.out.display());
    Ok(())
}

fn cmd_ik(args: &IkArgs) -> Result<()> {
    let model = scene::resolve_robot(&args.robot)?;
    let (tool, _) = parse_pose_record(&args.pose)?;
    let flange = remove_mount_offset(&model, &tool);
    let seed = match &args.seed_joints {
        Some(s) => {
            let vals: Vec<f64> = s
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.parse()
                        .map_err(|_| Error::Parse(format!("bad seed joint `{t}`")))
                })
                .collect::<Result<_>>()?;
            JointState::new(&model, vals, 0.0)?
        }
        None => JointState::mid_range(&model),
    };
    let report = solve_ik(&model, &flange, &seed, &IkParams::default())?;
    println!("converged: {}", report.converged);
    println!("iterations: {}", report.iterations);
    println!("position residual (m): {:.6e}", report.pos_residual);
    println!("rotation residual (rad): {:.6e}", report.rot_residual);
    println!(
        "joints: {}",
        report
            .joints
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect::<Vec<_>>()
            .join(" ")
    );
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Reproject(args) => cmd_reproject(args),
        Command::Render(args) => cmd_render(args),
        Command::FitDynamics(args) => cmd_fit(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::IkCheck(args) => cmd_ik(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
