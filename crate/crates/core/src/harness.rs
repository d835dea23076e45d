//! Synthetic tasks, episode execution, and experiment grids.
//!
//! The world is kinematic: a table, one or two cubes, and a first-order pose
//! plant for the target robot. An object rigidly follows the tool while the
//! grasp predicate holds (tool within reach of the object center, gripper
//! width within tolerance of the object size); there is no contact
//! dynamics. Episodes are deterministic given their seed; grids are
//! deterministic given the master seed regardless of worker count.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    blocking_step, delta_step, playback_step, predict_desired_pose, ControllerConfig,
    DynamicsModel, PosePlant, RotationConvention,
};
use crate::error::{Error, Result};
use crate::fixtures;
use crate::geometry::{transform_pose, CameraModel, RigidTransform};
use crate::kinematics::{remove_mount_offset, solve_ik, IkParams};
use crate::pipeline::{make_policy_query, Crosspainter, CrosspaintConfig, TargetObservation};
use crate::policy::{
    gripper_key_for, ExternalPolicy, PolicyEndpoint, ScriptKind, ScriptedConfig, ScriptedPolicy,
    VisionServoPolicy,
};
use crate::raster::{render, Scene, SceneObject, SceneRobot};
use crate::urdf::{GeometryPrimitive, JointState, RobotModel};

// ---------------------------------------------------------------------------
// Tasks and world constants
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Reach,
    Lift,
    Stack,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Reach => "reach",
            TaskKind::Lift => "lift",
            TaskKind::Stack => "stack",
        }
    }

    fn script(&self) -> ScriptKind {
        match self {
            TaskKind::Reach => ScriptKind::Reach,
            TaskKind::Lift => ScriptKind::PickPlace,
            TaskKind::Stack => ScriptKind::Stack,
        }
    }
}

const CUBE_SIZE: f64 = 0.04;
const GRASP_RADIUS: f64 = 0.025;
const WIDTH_TOL: f64 = 0.015;
const RELEASE_WIDTH: f64 = CUBE_SIZE + 0.02;
const SUCCESS_TOL: f64 = 0.02;
const WORKSPACE: Vector3<f64> = Vector3::new(0.42, 0.02, 0.02);
const OPEN_WIDTH: f64 = 0.065;
const CLOSE_WIDTH: f64 = 0.03;

/// Side camera framing just the workspace; narrow enough that pixel-level
/// mask offsets translate into centimeter-level servo error.
pub fn workspace_camera() -> CameraModel {
    CameraModel::look_at(
        260.0,
        260.0,
        42.0,
        42.0,
        84,
        84,
        Vector3::new(0.42, -0.30, 0.35),
        Vector3::new(0.42, 0.02, 0.02),
        Vector3::new(0.0, 0.0, 1.0),
    )
    .expect("workspace camera is valid")
}

/// Elbow-bent IK seeds per fixture; arbitrary models fall back to limits
/// midpoints.
fn ready_pose(model: &RobotModel) -> JointState {
    let vals = match model.name.as_str() {
        "hexa" => vec![0.0, 0.6, 1.2, 0.0, 1.2, 0.0],
        "septa" => vec![0.0, 0.6, 0.0, 1.2, 0.0, 1.3, 0.0],
        _ => return JointState::mid_range(model),
    };
    JointState::new(model, vals, OPEN_WIDTH).expect("ready pose within limits")
}

// ---------------------------------------------------------------------------
// Experiment specification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    Blocking,
    Delta,
    Playback,
}

impl ExecMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExecMode::Blocking => "blocking",
            ExecMode::Delta => "delta",
            ExecMode::Playback => "playback",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObsMode {
    /// Scripted policy on ground-truth state; no rendering.
    State,
    /// Vision-servo policy on the cross-painted image.
    Vision,
    /// Vision-servo policy on a ground-truth render of the source robot
    /// mirroring the target (the oracle upper bound).
    Oracle,
}

/// One sensitivity-grid cell's knob settings. Cells sharing `seed_key` run
/// on identical per-episode worlds, which makes comparisons paired.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub label: String,
    #[serde(default)]
    pub seed_key: Option<String>,
    #[serde(default)]
    pub mask_offset_px: i32,
    #[serde(default)]
    pub luminance_offset: i32,
    #[serde(default = "one")]
    pub gain_mul: f64,
    #[serde(default)]
    pub proprio_offset: [f64; 3],
    /// (meters, degrees) bound on a per-episode random camera pose change.
    #[serde(default)]
    pub camera_mismatch: Option<(f64, f64)>,
    #[serde(default)]
    pub reproject: bool,
    /// Grasp-point estimation noise fed to the scripted policy.
    #[serde(default)]
    pub object_noise: f64,
    #[serde(default = "yes")]
    pub retry: bool,
}

fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            label: "none".into(),
            seed_key: None,
            mask_offset_px: 0,
            luminance_offset: 0,
            gain_mul: 1.0,
            proprio_offset: [0.0; 3],
            camera_mismatch: None,
            reproject: false,
            object_noise: 0.0,
            retry: true,
        }
    }
}

impl PerturbationSpec {
    pub fn named(label: &str) -> Self {
        Self {
            label: label.into(),
            ..Default::default()
        }
    }

    fn seed_key(&self) -> &str {
        self.seed_key.as_deref().unwrap_or(&self.label)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub tasks: Vec<TaskKind>,
    /// (source, target) fixture names or `urdf.toml`-style config paths.
    pub pairs: Vec<(String, String)>,
    pub modes: Vec<ExecMode>,
    pub observation: ObsMode,
    #[serde(default, rename = "perturbation")]
    pub perturbations: Vec<PerturbationSpec>,
    pub episodes: u32,
    #[serde(default = "default_horizon")]
    pub horizon: u32,
    pub master_seed: u64,
    /// The target plant's intrinsic gain (1.0 = matched to the source).
    #[serde(default = "one")]
    pub target_gain: f64,
    /// External policy command (stdio JSONL); replaces the scripted policy.
    #[serde(default)]
    pub external_command: Option<Vec<String>>,
}

fn default_horizon() -> u32 {
    60
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut spec: ExperimentSpec =
            toml::from_str(text).map_err(|e| Error::Parse(format!("experiment spec: {e}")))?;
        if spec.perturbations.is_empty() {
            spec.perturbations.push(PerturbationSpec::default());
        }
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }
}

// ---------------------------------------------------------------------------
// Episode execution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EpisodeSetup {
    pub task: TaskKind,
    pub source: Arc<RobotModel>,
    pub target: Arc<RobotModel>,
    pub mode: ExecMode,
    pub observation: ObsMode,
    pub perturbation: PerturbationSpec,
    pub horizon: u32,
    pub target_gain: f64,
    pub external_command: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default)]
pub struct EpisodeRecord {
    pub success: bool,
    /// Protocol failures (external policy) make an episode invalid; invalid
    /// episodes are excluded from success rates.
    pub invalid: bool,
    pub steps: u32,
    pub ticks: u32,
    pub blocks_not_converged: u32,
    pub mean_hole_fraction: f64,
}

struct World {
    objects: Vec<(RigidTransform, [f64; 3], u8)>,
    goal: Vector3<f64>,
    attached: Option<(usize, RigidTransform)>,
    table_z: f64,
}

impl World {
    fn scene(&self) -> Scene {
        let mut s = Scene::empty();
        s.objects.push(SceneObject {
            id: 1,
            geometry: GeometryPrimitive::Box {
                size: [3.0, 3.0, 0.05],
            },
            pose: RigidTransform::from_translation(0.35, 0.0, -0.025),
            albedo: [0.74, 0.74, 0.70],
        });
        for (pose, albedo, id) in &self.objects {
            s.objects.push(SceneObject {
                id: *id,
                geometry: GeometryPrimitive::Box {
                    size: [CUBE_SIZE; 3],
                },
                pose: *pose,
                albedo: *albedo,
            });
        }
        s
    }

    fn update_attachment(&mut self, tool_world: &RigidTransform, width: f64) {
        match self.attached {
            Some((idx, rel)) => {
                self.objects[idx].0 = tool_world.compose(&rel);
                if width > RELEASE_WIDTH {
                    self.attached = None;
                }
            }
            None => {
                if (width - CUBE_SIZE).abs() <= WIDTH_TOL {
                    let candidate = 0usize;
                    if let Some((pose, _, _)) = self.objects.get(candidate) {
                        if (pose.translation - tool_world.translation).norm() <= GRASP_RADIUS {
                            // Parallel jaws self-center the cube on closing:
                            // the grasp keeps relative orientation but snaps
                            // the object center to the tool point.
                            let rel = RigidTransform::new(
                                Vector3::zeros(),
                                tool_world.inverse().compose(pose).rotation,
                            );
                            self.attached = Some((candidate, rel));
                        }
                    }
                }
            }
        }
    }

    fn succeeded(&self, task: TaskKind, tool_world: &RigidTransform) -> bool {
        match task {
            TaskKind::Reach => (tool_world.translation - self.goal).norm() <= SUCCESS_TOL,
            TaskKind::Lift => {
                let obj = self.objects[0].0.translation;
                (obj - self.goal).norm() <= SUCCESS_TOL && obj.z > self.table_z + 0.05
            }
            TaskKind::Stack => {
                let a = self.objects[0].0.translation;
                let b = self.objects[1].0.translation;
                let dx = (a.x - b.x).hypot(a.y - b.y);
                dx <= SUCCESS_TOL && (a.z - (b.z + CUBE_SIZE)).abs() <= 0.012
            }
        }
    }
}

fn seeded_world(task: TaskKind, rng: &mut ChaCha8Rng) -> World {
    let jitter = |rng: &mut ChaCha8Rng, s: f64| rng.gen_range(-s..s);
    let cube0 = RigidTransform::from_translation(
        WORKSPACE.x + jitter(rng, 0.03),
        WORKSPACE.y + jitter(rng, 0.03),
        CUBE_SIZE / 2.0,
    );
    let mut objects = vec![(cube0, [0.10, 0.72, 0.20], 2u8)];
    let goal = match task {
        TaskKind::Reach => Vector3::new(
            WORKSPACE.x + jitter(rng, 0.03),
            WORKSPACE.y + jitter(rng, 0.03),
            0.10 + jitter(rng, 0.02),
        ),
        TaskKind::Lift => cube0.translation + Vector3::new(0.0, 0.0, 0.12),
        TaskKind::Stack => {
            let cube1 = RigidTransform::from_translation(
                WORKSPACE.x - 0.05 + jitter(rng, 0.015),
                WORKSPACE.y - 0.05 + jitter(rng, 0.015),
                CUBE_SIZE / 2.0,
            );
            let goal = cube1.translation + Vector3::new(0.0, 0.0, CUBE_SIZE);
            objects.push((cube1, [0.85, 0.78, 0.12], 3u8));
            goal
        }
    };
    World {
        objects,
        goal,
        attached: None,
        table_z: 0.0,
    }
}

/// World-from-base pose of each robot. The target stands at the origin; the
/// source stands slightly displaced and rotated, so the frame conversion
/// `T_T^S` is nontrivial while both reach the shared workspace.
pub fn target_base_pose() -> RigidTransform {
    RigidTransform::identity()
}

pub fn source_base_pose() -> RigidTransform {
    RigidTransform::new(
        Vector3::new(-0.05, 0.04, 0.0),
        UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.0, 12f64.to_radians())),
    )
}

fn sample_camera_mismatch(
    base: &CameraModel,
    mismatch: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> CameraModel {
    let dir = Vector3::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    );
    let dir = if dir.norm() < 1e-6 { Vector3::x() } else { dir.normalize() };
    let axis = Vector3::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    );
    let axis = if axis.norm() < 1e-6 { Vector3::y() } else { axis.normalize() };
    let t_mag = mismatch.0 * rng.gen_range(0.5..1.0);
    let r_mag = mismatch.1.to_radians() * rng.gen_range(0.5..1.0);
    let offset = RigidTransform::new(dir * t_mag, UnitQuaternion::from_scaled_axis(axis * r_mag));
    CameraModel {
        world_from_camera: base.world_from_camera.compose(&offset),
        ..base.clone()
    }
}

enum PolicyDriver {
    Scripted(ScriptedPolicy),
    Vision(VisionServoPolicy),
    External(ExternalPolicy),
}

struct IkCache {
    seed: JointState,
}

impl IkCache {
    fn new(model: &RobotModel) -> Self {
        Self {
            seed: ready_pose(model),
        }
    }

    /// Joint state whose flange matches `tool` (best effort); also tracks
    /// the solution as the next seed.
    fn solve(&mut self, model: &RobotModel, tool: &RigidTransform, width: f64) -> JointState {
        let flange = remove_mount_offset(model, tool);
        let report = solve_ik(model, &flange, &self.seed, &IkParams::default())
            .expect("dimensions match by construction");
        let state = JointState::new(model, report.joints, width)
            .expect("dimensions match by construction");
        self.seed = state.clone();
        state
    }
}

/// Runs one episode. The virtual source robot mirrors the target every step
/// in blocking mode; in delta mode it rolls forward on its own dynamics and
/// the target replays the same delta actions; playback replays a recorded
/// source demonstration through the blocking controller.
pub fn run_episode(setup: &EpisodeSetup, seed: u64) -> Result<EpisodeRecord> {
    if setup.mode == ExecMode::Delta && setup.observation != ObsMode::State {
        return Err(Error::Config(
            "delta mode replays raw source actions; only state observation is meaningful".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut world = seeded_world(setup.task, &mut rng);

    let t_ts = source_base_pose().inverse().compose(&target_base_pose());
    let t_st = t_ts.inverse();
    let dynamics = DynamicsModel::identity(RotationConvention::AxisAngle, "source");
    let ctrl = ControllerConfig {
        gain: setup.perturbation.gain_mul,
        ..Default::default()
    };

    // Start tool pose (target base frame), facing down over the workspace.
    let down = UnitQuaternion::from_scaled_axis(Vector3::y() * std::f64::consts::PI);
    let start_tool = RigidTransform::new(
        Vector3::new(
            WORKSPACE.x - 0.02 + rng.gen_range(-0.015..0.015),
            WORKSPACE.y + rng.gen_range(-0.015..0.015),
            0.16,
        ),
        down,
    );
    let mut plant = PosePlant::new(start_tool, OPEN_WIDTH, setup.target_gain);
    plant.proprio_offset = Vector3::from(setup.perturbation.proprio_offset);

    // Playback: record a demonstration on the source robot first.
    let demo = if setup.mode == ExecMode::Playback {
        Some(record_source_demo(setup, seed)?)
    } else {
        None
    };

    // Cameras and painter for vision observation.
    let source_camera = workspace_camera();
    let target_camera = match setup.perturbation.camera_mismatch {
        Some(m) => sample_camera_mismatch(&source_camera, m, &mut rng),
        None => source_camera.clone(),
    };
    let mut painter = if setup.observation == ObsMode::Vision {
        let mut cfg = CrosspaintConfig::new(
            Arc::clone(&setup.source),
            source_base_pose(),
            Arc::clone(&setup.target),
            target_base_pose(),
            source_camera.clone(),
            target_camera.clone(),
        );
        cfg.mask_offset_px = setup.perturbation.mask_offset_px;
        cfg.luminance_offset = setup.perturbation.luminance_offset;
        cfg.reproject = setup.perturbation.reproject;
        cfg.use_depth_occlusion = true;
        Some(Crosspainter::new(cfg)?)
    } else {
        None
    };

    let script_cfg = ScriptedConfig {
        open_width: OPEN_WIDTH,
        close_width: CLOSE_WIDTH,
        retry: setup.perturbation.retry,
        object_noise: setup.perturbation.object_noise,
        ..Default::default()
    };
    let mut driver = match &setup.external_command {
        Some(cmd) => PolicyDriver::External(ExternalPolicy::connect(
            &PolicyEndpoint::Stdio { command: cmd.clone() },
            5000,
        )?),
        None => match setup.observation {
            ObsMode::State => PolicyDriver::Scripted(ScriptedPolicy::new(
                setup.task.script(),
                script_cfg,
                seed ^ 0x5eed,
            )),
            ObsMode::Vision | ObsMode::Oracle => {
                // The policy's camera frame is the source base frame.
                let mut cam = source_camera.clone();
                cam.world_from_camera =
                    source_base_pose().inverse().compose(&cam.world_from_camera);
                let servo = VisionServoPolicy::new(
                    ScriptedPolicy::new(setup.task.script(), script_cfg, seed ^ 0x5eed),
                    cam,
                    gripper_key_for(&setup.source),
                    Arc::clone(&setup.source),
                )
                .with_ik_seed(ready_pose(&setup.source).arm);
                PolicyDriver::Vision(servo)
            }
        },
    };

    let mut target_ik = IkCache::new(&setup.target);
    let mut oracle_ik = IkCache::new(&setup.source);
    let mut record = EpisodeRecord::default();
    let mut hole_sum = 0.0;
    let mut shadow = transform_pose(&t_ts, &plant.measured());

    for step in 0..setup.horizon {
        record.steps = step + 1;
        let measured = plant.measured();
        let measured_width = plant.measured_width();

        // Source-frame ground truth for the scripted policies.
        let objects_src: Vec<Vector3<f64>> = world
            .objects
            .iter()
            .map(|(p, _, _)| source_base_pose().inverse().transform_point(&p.translation))
            .collect();
        let goal_src = source_base_pose().inverse().transform_point(&world.goal);
        let proprio_src = transform_pose(&t_ts, &measured);

        // The mirrored source pose the policy is queried at.
        let believed_src = match setup.mode {
            ExecMode::Delta => shadow,
            _ => proprio_src,
        };

        let action = match &mut driver {
            PolicyDriver::Scripted(p) => {
                let view = crate::policy::WorldView {
                    tool: believed_src,
                    width: measured_width,
                    objects: objects_src.clone(),
                    goal: goal_src,
                };
                let a = p.act(&view);
                if p.is_done() {
                    break;
                }
                a
            }
            PolicyDriver::Vision(p) => {
                let image = match setup.observation {
                    ObsMode::Vision => {
                        let mut scene = world.scene();
                        scene.robots.push(SceneRobot {
                            model: Arc::clone(&setup.target),
                            state: target_ik.solve(&setup.target, &plant.pose, plant.width),
                            base: target_base_pose(),
                            seg_base: 100,
                        });
                        let frame = render(&scene, &target_camera)?;
                        let obs = TargetObservation {
                            frame,
                            joint_state: target_ik.seed.clone(),
                            eef: measured,
                            timestamp: step as f64,
                            external: setup.perturbation.proprio_offset != [0.0; 3],
                        };
                        let (painted, diag) =
                            painter.as_mut().expect("vision mode").cross_paint(&obs)?;
                        hole_sum += diag.hole_fraction;
                        painted
                    }
                    ObsMode::Oracle => {
                        // Ground-truth render of the source robot mirroring
                        // the target, in the source camera.
                        let tool_src = transform_pose(&t_ts, &plant.pose);
                        let mut scene = world.scene();
                        scene.robots.push(SceneRobot {
                            model: Arc::clone(&setup.source),
                            state: oracle_ik.solve(&setup.source, &tool_src, plant.width),
                            base: source_base_pose(),
                            seg_base: 100,
                        });
                        render(&scene, &source_camera)?
                    }
                    ObsMode::State => unreachable!("vision driver implies vision observation"),
                };
                let a = p.act(&image, &proprio_src, measured_width, objects_src.clone(), goal_src);
                if p.is_done() {
                    break;
                }
                a
            }
            PolicyDriver::External(p) => {
                let image = crate::raster::FrameSet::new_rgb(1, 1, [0, 0, 0]);
                let obs = TargetObservation {
                    frame: image.clone(),
                    joint_state: JointState {
                        arm: vec![],
                        gripper_width: measured_width,
                        clamped: false,
                    },
                    eef: measured,
                    timestamp: step as f64,
                    external: true,
                };
                let query = make_policy_query(&obs, &image, &t_ts, step as u64)?;
                match p.query(&query) {
                    Ok(reply) => {
                        if reply.done {
                            break;
                        }
                        reply.action
                    }
                    Err(Error::Timeout(_)) | Err(Error::Protocol(_)) => {
                        record.invalid = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
        };

        match setup.mode {
            ExecMode::Blocking => {
                let (desired_t, width_cmd) = predict_desired_pose(
                    &dynamics,
                    &believed_src,
                    &action,
                    RotationConvention::AxisAngle,
                    &t_st,
                )?;
                let width_cmd = width_cmd.clamp(0.0, setup.target.gripper.max_width);
                let out = blocking_step(&ctrl, &desired_t, width_cmd, &mut plant);
                record.ticks += out.ticks;
                if !out.converged {
                    record.blocks_not_converged += 1;
                }
            }
            ExecMode::Delta => {
                let (next_shadow, _) = predict_desired_pose(
                    &dynamics,
                    &shadow,
                    &action,
                    RotationConvention::AxisAngle,
                    &RigidTransform::identity(),
                )?;
                shadow = next_shadow;
                let out = delta_step(&action, RotationConvention::AxisAngle, &ctrl, &mut plant);
                record.ticks += out.ticks;
            }
            ExecMode::Playback => {
                let demo = demo.as_ref().expect("recorded above");
                let idx = (step as usize).min(demo.len().saturating_sub(1));
                let (pose_src, width_src) = demo[idx];
                let desired_t = transform_pose(&t_st, &pose_src);
                let width_cmd = width_src.clamp(0.0, setup.target.gripper.max_width);
                let out = playback_step(&desired_t, width_cmd, &ctrl, &mut plant);
                record.ticks += out.ticks;
                if !out.converged {
                    record.blocks_not_converged += 1;
                }
            }
        }

        let tool_world = target_base_pose().compose(&plant.pose);
        world.update_attachment(&tool_world, plant.width);

        if world.succeeded(setup.task, &tool_world) {
            record.success = true;
            break;
        }
        if setup.mode == ExecMode::Playback {
            let demo = demo.as_ref().expect("recorded above");
            if step as usize >= demo.len() {
                break;
            }
        }
    }

    if !record.success && !record.invalid {
        // Terminal check for policies that finish exactly at the horizon.
        let tool_world = target_base_pose().compose(&plant.pose);
        record.success = world.succeeded(setup.task, &tool_world);
    }
    if record.steps > 0 {
        record.mean_hole_fraction = hole_sum / record.steps as f64;
    }
    Ok(record)
}

/// Rolls the scripted policy out on the source robot's own plant (gain 1,
/// blocking, no perturbations) and records the achieved tool poses in the
/// source base frame.
fn record_source_demo(setup: &EpisodeSetup, seed: u64) -> Result<Vec<(RigidTransform, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut world = seeded_world(setup.task, &mut rng);
    let ctrl = ControllerConfig::default();
    let down = UnitQuaternion::from_scaled_axis(Vector3::y() * std::f64::consts::PI);
    let start_tool_t = RigidTransform::new(
        Vector3::new(
            WORKSPACE.x - 0.02 + rng.gen_range(-0.015..0.015),
            WORKSPACE.y + rng.gen_range(-0.015..0.015),
            0.16,
        ),
        down,
    );
    // Same start pose expressed in the source frame; the source robot acts
    // in its own base frame on the same world.
    let t_ts = source_base_pose().inverse().compose(&target_base_pose());
    let start_src = transform_pose(&t_ts, &start_tool_t);
    let mut plant = PosePlant::new(start_src, OPEN_WIDTH, 1.0);
    let mut policy = ScriptedPolicy::new(
        setup.task.script(),
        ScriptedConfig {
            open_width: OPEN_WIDTH,
            close_width: CLOSE_WIDTH,
            ..Default::default()
        },
        seed ^ 0x5eed,
    );
    let mut demo = Vec::new();
    for _ in 0..setup.horizon {
        let measured = plant.measured();
        let objects_src: Vec<Vector3<f64>> = world
            .objects
            .iter()
            .map(|(p, _, _)| source_base_pose().inverse().transform_point(&p.translation))
            .collect();
        let goal_src = source_base_pose().inverse().transform_point(&world.goal);
        let view = crate::policy::WorldView {
            tool: measured,
            width: plant.width,
            objects: objects_src,
            goal: goal_src,
        };
        let action = policy.act(&view);
        if policy.is_done() {
            break;
        }
        let (desired, width_cmd) = crate::dynamics::apply_action(
            &measured,
            &action,
            RotationConvention::AxisAngle,
        );
        blocking_step(&ctrl, &desired, width_cmd, &mut plant);
        demo.push((plant.measured(), plant.width));
        let tool_world = source_base_pose().compose(&plant.pose);
        world.update_attachment(&tool_world, plant.width);
        if world.succeeded(setup.task, &tool_world) {
            break;
        }
    }
    Ok(demo)
}

// ---------------------------------------------------------------------------
// Grids
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct CellReport {
    pub task: String,
    pub source: String,
    pub target: String,
    pub mode: String,
    pub perturbation: String,
    pub episodes: u32,
    pub successes: u32,
    pub invalid: u32,
    pub mean_ticks: f64,
}

impl CellReport {
    pub fn success_rate(&self) -> f64 {
        let valid = self.episodes - self.invalid;
        if valid == 0 {
            0.0
        } else {
            self.successes as f64 / valid as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub cells: Vec<CellReport>,
    pub notes: Vec<String>,
}

impl ExperimentReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for note in &self.notes {
            out.push_str(&format!("# {note}\n"));
        }
        out.push_str("task,source,target,mode,perturbation,episodes,successes,invalid,mean_ticks\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{:.3}\n",
                c.task,
                c.source,
                c.target,
                c.mode,
                c.perturbation,
                c.episodes,
                c.successes,
                c.invalid,
                c.mean_ticks
            ));
        }
        out
    }

    pub fn cell(
        &self,
        task: &str,
        mode: &str,
        perturbation: &str,
    ) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.task == task && c.mode == mode && c.perturbation == perturbation)
    }
}

fn resolve_robot(name: &str) -> Result<Arc<RobotModel>> {
    if let Some(m) = fixtures::by_name(name) {
        return Ok(Arc::new(m));
    }
    // `<stem>.urdf:<stem>.toml` or a bare URDF path with a sibling config.
    let (urdf, cfg) = match name.split_once(':') {
        Some((u, c)) => (u.to_string(), c.to_string()),
        None => {
            let stem = name.trim_end_matches(".urdf");
            (format!("{stem}.urdf"), format!("{stem}.toml"))
        }
    };
    Ok(Arc::new(crate::files::load_robot(
        std::path::Path::new(&urdf),
        std::path::Path::new(&cfg),
    )?))
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn episode_seed(master: u64, task: TaskKind, pair: &(String, String), key: &str, ep: u32) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    task.as_str().hash(&mut h);
    pair.0.hash(&mut h);
    pair.1.hash(&mut h);
    key.hash(&mut h);
    ep.hash(&mut h);
    splitmix(master ^ h.finish())
}

/// Runs every cell of the grid. Deterministic given the master seed: episode
/// seeds depend on (task, pair, perturbation seed key, episode index) but not
/// on the execution mode, so mode comparisons are paired; cells run in a
/// worker pool capped by `CROSSPAINT_THREADS` and results assemble in spec
/// order.
pub fn run_grid(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    struct Cell {
        task: TaskKind,
        pair: (String, String),
        mode: ExecMode,
        pert: PerturbationSpec,
    }
    let mut cells = Vec::new();
    for task in &spec.tasks {
        for pair in &spec.pairs {
            for mode in &spec.modes {
                for pert in &spec.perturbations {
                    cells.push(Cell {
                        task: *task,
                        pair: pair.clone(),
                        mode: *mode,
                        pert: pert.clone(),
                    });
                }
            }
        }
    }

    let workers = std::env::var("CROSSPAINT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
        .min(cells.len().max(1));

    let results: Mutex<Vec<Option<CellReport>>> = Mutex::new(vec![None; cells.len()]);
    let next: AtomicUsize = AtomicUsize::new(0);
    let errors: Mutex<Vec<Error>> = Mutex::new(Vec::new());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= cells.len() {
                    break;
                }
                let cell = &cells[idx];
                let outcome = (|| -> Result<CellReport> {
                    let source = resolve_robot(&cell.pair.0)?;
                    let target = resolve_robot(&cell.pair.1)?;
                    let setup = EpisodeSetup {
                        task: cell.task,
                        source,
                        target,
                        mode: cell.mode,
                        observation: spec.observation,
                        perturbation: cell.pert.clone(),
                        horizon: spec.horizon,
                        target_gain: spec.target_gain,
                        external_command: spec.external_command.clone(),
                    };
                    let mut successes = 0;
                    let mut invalid = 0;
                    let mut ticks = 0u64;
                    for ep in 0..spec.episodes {
                        let seed = episode_seed(
                            spec.master_seed,
                            cell.task,
                            &cell.pair,
                            cell.pert.seed_key(),
                            ep,
                        );
                        let rec = run_episode(&setup, seed)?;
                        if rec.invalid {
                            invalid += 1;
                        } else if rec.success {
                            successes += 1;
                        }
                        ticks += rec.ticks as u64;
                    }
                    Ok(CellReport {
                        task: cell.task.as_str().into(),
                        source: cell.pair.0.clone(),
                        target: cell.pair.1.clone(),
                        mode: cell.mode.as_str().into(),
                        perturbation: cell.pert.label.clone(),
                        episodes: spec.episodes,
                        successes,
                        invalid,
                        mean_ticks: if spec.episodes > 0 {
                            ticks as f64 / spec.episodes as f64
                        } else {
                            0.0
                        },
                    })
                })();
                match outcome {
                    Ok(report) => results.lock().unwrap()[idx] = Some(report),
                    Err(e) => errors.lock().unwrap().push(e),
                }
            });
        }
    });

    let errors = errors.into_inner().unwrap();
    if let Some(e) = errors.into_iter().next() {
        return Err(e);
    }
    let cells = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|c| c.expect("all cells completed"))
        .collect();
    Ok(ExperimentReport {
        cells,
        notes: vec![
            "kinematic grasp model: width match is the only gripper-transfer difficulty; pad friction is unmodeled".into(),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_setup(task: TaskKind, mode: ExecMode, gain: f64) -> EpisodeSetup {
        EpisodeSetup {
            task,
            source: Arc::new(fixtures::hexa()),
            target: Arc::new(fixtures::hexa()),
            mode,
            observation: ObsMode::State,
            perturbation: PerturbationSpec::default(),
            horizon: 60,
            target_gain: gain,
            external_command: None,
        }
    }

    fn rate(setup: &EpisodeSetup, seeds: std::ops::Range<u64>) -> f64 {
        let total = seeds.end - seeds.start;
        let mut ok = 0;
        for s in seeds {
            if run_episode(setup, s).unwrap().success {
                ok += 1;
            }
        }
        ok as f64 / total as f64
    }

    #[test]
    fn sanity_anchor_lift_on_matched_plant() {
        let setup = base_setup(TaskKind::Lift, ExecMode::Blocking, 1.0);
        assert_eq!(rate(&setup, 0..50), 1.0);
    }

    #[test]
    fn scripted_pick_place_succeeds_on_source_plant() {
        // The oracle policy is correct by construction on its own plant.
        for task in [TaskKind::Reach, TaskKind::Stack] {
            let setup = base_setup(task, ExecMode::Blocking, 1.0);
            let r = rate(&setup, 0..50);
            assert_eq!(r, 1.0, "{task:?}: {r}");
        }
    }

    #[test]
    fn delta_mode_collapses_under_gain_mismatch() {
        let blocking = base_setup(TaskKind::Lift, ExecMode::Blocking, 0.5);
        let delta = base_setup(TaskKind::Lift, ExecMode::Delta, 0.5);
        let rb = rate(&blocking, 0..40);
        let rd = rate(&delta, 0..40);
        assert!(
            rb > rd,
            "blocking {rb} must beat delta {rd} on the mismatched plant"
        );
        assert!(rb - rd >= 0.2, "gap {rb} - {rd} too small");
    }

    #[test]
    fn delta_mode_matches_blocking_on_matched_plant() {
        let delta = base_setup(TaskKind::Reach, ExecMode::Delta, 1.0);
        assert!(rate(&delta, 0..30) >= 0.95);
    }

    #[test]
    fn playback_tracks_blocking_on_matched_kinematics() {
        let blocking = base_setup(TaskKind::Lift, ExecMode::Blocking, 0.5);
        let playback = base_setup(TaskKind::Lift, ExecMode::Playback, 0.5);
        let rb = rate(&blocking, 0..60);
        let rp = rate(&playback, 0..60);
        assert!(
            (rb - rp).abs() <= 0.05,
            "blocking {rb} vs playback {rp} drifted apart"
        );
    }

    #[test]
    fn proprio_offset_kills_success() {
        let mut setup = base_setup(TaskKind::Lift, ExecMode::Blocking, 1.0);
        setup.perturbation.proprio_offset = [0.0, 0.0, 0.08];
        assert_eq!(rate(&setup, 0..30), 0.0);
    }

    #[test]
    fn retry_recovers_noisy_grasps() {
        let mut with_retry = base_setup(TaskKind::Lift, ExecMode::Blocking, 1.0);
        with_retry.perturbation.object_noise = 0.022;
        with_retry.perturbation.retry = true;
        let mut no_retry = with_retry.clone();
        no_retry.perturbation.retry = false;
        let r_on = rate(&with_retry, 0..60);
        let r_off = rate(&no_retry, 0..60);
        assert!(
            r_on > r_off,
            "retry on ({r_on}) must beat retry off ({r_off})"
        );
    }

    #[test]
    fn cross_embodiment_state_transfer_succeeds() {
        // hexa policy driving the septa arm, and vice versa.
        let mut setup = base_setup(TaskKind::Lift, ExecMode::Blocking, 0.8);
        setup.target = Arc::new(fixtures::septa());
        let r = rate(&setup, 0..30);
        assert!(r >= 0.9, "hexa->septa state transfer: {r}");
    }

    #[test]
    fn vision_mode_lifts_with_clean_painting() {
        let mut setup = base_setup(TaskKind::Lift, ExecMode::Blocking, 1.0);
        setup.observation = ObsMode::Vision;
        let r = rate(&setup, 0..15);
        assert!(r >= 0.8, "clean vision lift rate {r}");
    }

    #[test]
    fn vision_mask_offset_degrades_monotonically() {
        let mut rates = Vec::new();
        for offset in [0, 10, 30] {
            let mut setup = base_setup(TaskKind::Lift, ExecMode::Blocking, 1.0);
            setup.observation = ObsMode::Vision;
            setup.perturbation.mask_offset_px = offset;
            setup.perturbation.seed_key = Some("mask".into());
            rates.push(rate(&setup, 0..15));
        }
        assert!(
            rates[0] >= rates[1] && rates[1] >= rates[2],
            "mask offsets 0/10/30 gave {rates:?}"
        );
        assert!(rates[0] - rates[2] >= 0.3, "{rates:?}");
    }

    #[test]
    fn grid_runs_and_is_deterministic() {
        let spec = ExperimentSpec {
            tasks: vec![TaskKind::Reach, TaskKind::Lift],
            pairs: vec![("hexa".into(), "hexa".into())],
            modes: vec![ExecMode::Blocking, ExecMode::Delta],
            observation: ObsMode::State,
            perturbations: vec![PerturbationSpec::default()],
            episodes: 10,
            horizon: 60,
            master_seed: 42,
            target_gain: 0.5,
            external_command: None,
        };
        let a = run_grid(&spec).unwrap().to_csv();
        let b = run_grid(&spec).unwrap().to_csv();
        assert_eq!(a, b);
        assert!(a.contains("reach,hexa,hexa,blocking"));
        assert_eq!(a.lines().filter(|l| !l.starts_with('#')).count(), 5);
    }

    #[test]
    fn one_cell_grid_equals_episode_aggregation() {
        let spec = ExperimentSpec {
            tasks: vec![TaskKind::Lift],
            pairs: vec![("hexa".into(), "hexa".into())],
            modes: vec![ExecMode::Blocking],
            observation: ObsMode::State,
            perturbations: vec![PerturbationSpec::default()],
            episodes: 12,
            horizon: 60,
            master_seed: 9,
            target_gain: 1.0,
            external_command: None,
        };
        let report = run_grid(&spec).unwrap();
        assert_eq!(report.cells.len(), 1);
        let setup = base_setup(TaskKind::Lift, ExecMode::Blocking, 1.0);
        let mut successes = 0;
        for ep in 0..12 {
            let seed = episode_seed(
                9,
                TaskKind::Lift,
                &("hexa".into(), "hexa".into()),
                "none",
                ep,
            );
            if run_episode(&setup, seed).unwrap().success {
                successes += 1;
            }
        }
        assert_eq!(report.cells[0].successes, successes);
    }

    #[test]
    fn invalid_episodes_are_excluded() {
        let mut setup = base_setup(TaskKind::Reach, ExecMode::Blocking, 1.0);
        // A stub that answers garbage marks the episode invalid, not failed.
        setup.external_command = Some(vec![
            "sh".into(),
            "-c".into(),
            "while read -r l; do echo not-json; done".into(),
        ]);
        let rec = run_episode(&setup, 3).unwrap();
        assert!(rec.invalid);
        assert!(!rec.success);
    }

    #[test]
    fn spec_toml_round_trip() {
        let spec = ExperimentSpec {
            tasks: vec![TaskKind::Lift],
            pairs: vec![("hexa".into(), "septa".into())],
            modes: vec![ExecMode::Blocking, ExecMode::Playback],
            observation: ObsMode::State,
            perturbations: vec![PerturbationSpec::named("none")],
            episodes: 5,
            horizon: 40,
            master_seed: 1,
            target_gain: 0.5,
            external_command: None,
        };
        let text = spec.to_toml();
        let back = ExperimentSpec::from_toml(&text).unwrap();
        assert_eq!(back.tasks, spec.tasks);
        assert_eq!(back.modes, spec.modes);
        assert_eq!(back.episodes, 5);
    }
}
