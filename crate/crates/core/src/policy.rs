//! Policy adapters: the process-boundary contract for querying an external
//! policy, plus built-in scripted policies for the harness.
//!
//! Wire format: one JSON object per line, UTF-8, newline-delimited. Query
//! fields `image` (base64 PNG or a file path, per adapter config), `proprio`
//! (8 numbers: pose record + gripper width), `step`; reply fields `action`
//! (7 numbers) and `done`.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::Action;
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, RigidTransform};
use crate::urdf::JointState;
use crate::raster::FrameSet;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PolicyQuery {
    pub image: String,
    pub proprio: [f64; 8],
    pub step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PolicyReply {
    pub action: [f64; 7],
    pub done: bool,
}

pub fn encode_query(q: &PolicyQuery) -> String {
    serde_json::to_string(q).expect("query serializes")
}

pub fn parse_query(line: &str) -> Result<PolicyQuery> {
    serde_json::from_str(line).map_err(|e| Error::Protocol(format!("bad query: {e}")))
}

pub fn encode_reply(r: &PolicyReply) -> String {
    serde_json::to_string(r).expect("reply serializes")
}

pub fn parse_reply(line: &str) -> Result<PolicyReply> {
    let reply: PolicyReply =
        serde_json::from_str(line).map_err(|e| Error::Protocol(format!("bad reply: {e}")))?;
    if reply.action.iter().any(|a| !a.is_finite()) {
        return Err(Error::Protocol("reply action has non-finite values".into()));
    }
    Ok(reply)
}

/// Where an external policy lives: a child process speaking over standard
/// streams, or a TCP socket.
#[derive(Debug, Clone)]
pub enum PolicyEndpoint {
    Stdio { command: Vec<String> },
    Tcp { addr: String },
}

enum Transport {
    Stdio {
        child: Child,
        stdin: std::process::ChildStdin,
        lines: mpsc::Receiver<std::io::Result<String>>,
    },
    Tcp {
        stream: TcpStream,
        reader: BufReader<TcpStream>,
    },
}

/// One connection to an external policy; one request, one reply per step.
pub struct ExternalPolicy {
    transport: Transport,
    timeout: Duration,
    pub last_latency_ms: f64,
}

impl ExternalPolicy {
    pub fn connect(endpoint: &PolicyEndpoint, timeout_ms: u64) -> Result<Self> {
        let timeout = Duration::from_millis(timeout_ms);
        let transport = match endpoint {
            PolicyEndpoint::Stdio { command } => {
                if command.is_empty() {
                    return Err(Error::Config("empty policy command".into()));
                }
                let mut child = Command::new(&command[0])
                    .args(&command[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .spawn()?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                let (tx, rx) = mpsc::channel();
                std::thread::spawn(move || {
                    let reader = BufReader::new(stdout);
                    for line in reader.lines() {
                        if tx.send(line).is_err() {
                            break;
                        }
                    }
                });
                Transport::Stdio {
                    child,
                    stdin,
                    lines: rx,
                }
            }
            PolicyEndpoint::Tcp { addr } => {
                let stream = TcpStream::connect(addr)?;
                stream.set_read_timeout(Some(timeout))?;
                let reader = BufReader::new(stream.try_clone()?);
                Transport::Tcp { stream, reader }
            }
        };
        Ok(Self {
            transport,
            timeout,
            last_latency_ms: 0.0,
        })
    }

    /// Sends one query and waits for one reply line. Timeouts and malformed
    /// replies are distinct errors so episodes can be marked invalid rather
    /// than failed.
    pub fn query(&mut self, q: &PolicyQuery) -> Result<PolicyReply> {
        let started = Instant::now();
        let line = encode_query(q) + "\n";
        let reply_line = match &mut self.transport {
            Transport::Stdio { stdin, lines, .. } => {
                stdin.write_all(line.as_bytes())?;
                stdin.flush()?;
                match lines.recv_timeout(self.timeout) {
                    Ok(Ok(l)) => l,
                    Ok(Err(e)) => return Err(Error::Io(e)),
                    Err(_) => return Err(Error::Timeout(self.timeout.as_millis() as u64)),
                }
            }
            Transport::Tcp { stream, reader } => {
                stream.write_all(line.as_bytes())?;
                stream.flush()?;
                let mut buf = String::new();
                match reader.read_line(&mut buf) {
                    Ok(0) => return Err(Error::Protocol("endpoint closed the stream".into())),
                    Ok(_) => {}
                    Err(e)
                        if e.kind() == std::io::ErrorKind::WouldBlock
                            || e.kind() == std::io::ErrorKind::TimedOut =>
                    {
                        return Err(Error::Timeout(self.timeout.as_millis() as u64))
                    }
                    Err(e) => return Err(Error::Io(e)),
                }
                buf
            }
        };
        self.last_latency_ms = started.elapsed().as_secs_f64() * 1000.0;
        parse_reply(reply_line.trim_end())
    }
}

impl Drop for ExternalPolicy {
    fn drop(&mut self) {
        if let Transport::Stdio { child, .. } = &mut self.transport {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

// ---------------------------------------------------------------------------
// Scripted policies
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScriptKind {
    Reach,
    PickPlace,
    Stack,
}

/// Ground-truth view handed to a scripted policy, all in the source robot
/// base frame (mirroring the state-based study's use of converted poses).
#[derive(Debug, Clone)]
pub struct WorldView {
    pub tool: RigidTransform,
    pub width: f64,
    /// Object centers; index 0 is the manipuland, index 1 (when present)
    /// the stack base.
    pub objects: Vec<Vector3<f64>>,
    pub goal: Vector3<f64>,
}

#[derive(Debug, Clone)]
pub struct ScriptedConfig {
    /// Per-step position delta bound (m).
    pub max_step: f64,
    /// Approach height above the grasp point.
    pub clearance: f64,
    /// Width commands, in source gripper units.
    pub open_width: f64,
    pub close_width: f64,
    /// Waypoint arrival tolerance.
    pub arrive_tol: f64,
    /// Re-approach after a missed grasp.
    pub retry: bool,
    pub max_retries: u32,
    /// Std-dev of the per-attempt perturbation of the perceived object
    /// position; models grasp-point estimation error.
    pub object_noise: f64,
}

impl Default for ScriptedConfig {
    fn default() -> Self {
        Self {
            max_step: 0.05,
            clearance: 0.06,
            open_width: 0.07,
            close_width: 0.03,
            // Must exceed the blocking controller's 0.015 pose-error bound,
            // or waypoints can hover just outside arrival forever.
            arrive_tol: 0.017,
            retry: true,
            max_retries: 2,
            object_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    ApproachAbove,
    Descend,
    Close(u32),
    Lift,
    Transit,
    Release(u32),
    Done,
}

/// Waypoint state machine emitting bounded delta actions. Deterministic
/// given its seed; the seed only feeds the per-attempt object-position
/// perturbation.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    pub kind: ScriptKind,
    pub cfg: ScriptedConfig,
    phase: Phase,
    retries_left: u32,
    rng: ChaCha8Rng,
    attempt_offset: Vector3<f64>,
    needs_resample: bool,
}

const CLOSE_DWELL: u32 = 2;
const RELEASE_DWELL: u32 = 2;
const ROT_STEP_CAP: f64 = 0.2;

impl ScriptedPolicy {
    pub fn new(kind: ScriptKind, cfg: ScriptedConfig, seed: u64) -> Self {
        let phase = match kind {
            ScriptKind::Reach => Phase::Transit,
            _ => Phase::ApproachAbove,
        };
        let retries_left = cfg.max_retries;
        Self {
            kind,
            cfg,
            phase,
            retries_left,
            rng: ChaCha8Rng::seed_from_u64(seed),
            attempt_offset: Vector3::zeros(),
            needs_resample: true,
        }
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    fn resample_offset(&mut self) {
        self.attempt_offset = if self.cfg.object_noise > 0.0 {
            let s = self.cfg.object_noise;
            Vector3::new(
                self.rng.gen_range(-s..s),
                self.rng.gen_range(-s..s),
                0.0,
            )
        } else {
            Vector3::zeros()
        };
        self.needs_resample = false;
    }

    /// Bounded step toward `target`, plus orientation steering toward a
    /// top-down grasp (tool +z pointing at -z world). Roll about the
    /// approach axis is left free so mount offsets do not fight the script.
    fn step_toward(&self, view: &WorldView, target: Vector3<f64>, width_cmd: f64) -> Action {
        let dp = target - view.tool.translation;
        let dist = dp.norm();
        let dp = if dist > self.cfg.max_step {
            dp * (self.cfg.max_step / dist)
        } else {
            dp
        };
        let z_tool = view.tool.rotation * Vector3::z();
        let want = -Vector3::z();
        let axis = z_tool.cross(&want);
        let angle = z_tool.dot(&want).clamp(-1.0, 1.0).acos();
        let dr = if axis.norm() > 1e-9 && angle > 1e-9 {
            axis.normalize() * angle.min(ROT_STEP_CAP)
        } else {
            Vector3::zeros()
        };
        [dp.x, dp.y, dp.z, dr.x, dr.y, dr.z, width_cmd]
    }

    fn arrived(&self, view: &WorldView, target: Vector3<f64>) -> bool {
        (view.tool.translation - target).norm() < self.cfg.arrive_tol
    }

    pub fn act(&mut self, view: &WorldView) -> Action {
        if self.needs_resample {
            self.resample_offset();
        }
        let object = view
            .objects
            .first()
            .copied()
            .unwrap_or(view.goal)
            + self.attempt_offset;
        match self.kind {
            ScriptKind::Reach => {
                let target = view.goal;
                if self.arrived(view, target) {
                    self.phase = Phase::Done;
                }
                if self.phase == Phase::Done {
                    return [0.0; 7];
                }
                self.step_toward(view, target, self.cfg.open_width)
            }
            ScriptKind::PickPlace | ScriptKind::Stack => self.act_pick(view, object),
        }
    }

    fn act_pick(&mut self, view: &WorldView, object: Vector3<f64>) -> Action {
        let above = object + Vector3::new(0.0, 0.0, self.cfg.clearance);
        match self.phase {
            Phase::ApproachAbove => {
                if self.arrived(view, above) {
                    self.phase = Phase::Descend;
                }
                self.step_toward(view, above, self.cfg.open_width)
            }
            Phase::Descend => {
                if self.arrived(view, object) {
                    self.phase = Phase::Close(CLOSE_DWELL);
                }
                self.step_toward(view, object, self.cfg.open_width)
            }
            Phase::Close(k) => {
                self.phase = if k <= 1 { Phase::Lift } else { Phase::Close(k - 1) };
                self.step_toward(view, view.tool.translation, self.cfg.close_width)
            }
            Phase::Lift => {
                let up = Vector3::new(
                    view.tool.translation.x,
                    view.tool.translation.y,
                    view.goal.z + 0.02,
                );
                if self.arrived(view, up) {
                    // Did the object come along?
                    let carried = view
                        .objects
                        .first()
                        .map_or(false, |o| (o - view.tool.translation).norm() < 0.04);
                    if carried {
                        self.phase = Phase::Transit;
                    } else if self.cfg.retry && self.retries_left > 0 {
                        self.retries_left -= 1;
                        self.needs_resample = true;
                        self.phase = Phase::ApproachAbove;
                    } else {
                        self.phase = Phase::Transit;
                    }
                }
                self.step_toward(view, up, self.cfg.close_width)
            }
            Phase::Transit => {
                if self.arrived(view, view.goal) {
                    self.phase = Phase::Release(RELEASE_DWELL);
                }
                self.step_toward(view, view.goal, self.cfg.close_width)
            }
            Phase::Release(k) => {
                self.phase = if k <= 1 { Phase::Done } else { Phase::Release(k - 1) };
                self.step_toward(view, view.tool.translation, self.cfg.open_width)
            }
            Phase::Done => [0.0; 7],
        }
    }
}

// ---------------------------------------------------------------------------
// Vision-servo variant
// ---------------------------------------------------------------------------

/// Chromaticity key for locating the source gripper in a painted image:
/// a pixel matches when its color direction is close to the reference and
/// the reference's dominant channel dominates.
#[derive(Debug, Clone)]
pub struct VisionKeyConfig {
    pub reference_rgb: [f64; 3],
    pub min_cos: f64,
    pub dominance: f64,
    pub min_value: u8,
}

impl Default for VisionKeyConfig {
    fn default() -> Self {
        Self {
            reference_rgb: [0.9, 0.15, 0.1],
            min_cos: 0.97,
            dominance: 1.25,
            min_value: 50,
        }
    }
}

/// A scripted policy whose tool-position belief comes from the image.
///
/// Using the source URDF and camera (knowledge the transfer protocol
/// assumes), the policy renders a reference layer of the source robot at
/// its proprio pose and compares the key-colored gripper centroid of the
/// painted image against the reference's. The pixel shift between the two,
/// back-projected at the tool depth, corrects the believed tool position.
/// A clean cross-painting yields zero shift regardless of viewpoint or
/// self-occlusion; mask offsets, remnants, and camera mismatch without
/// reprojection move the centroid and the belief with it.
pub struct VisionServoPolicy {
    pub inner: ScriptedPolicy,
    /// Source camera with its extrinsic expressed base-from-camera, i.e.
    /// "world" here is the source robot base frame.
    pub camera: CameraModel,
    pub key: VisionKeyConfig,
    source: std::sync::Arc<crate::urdf::RobotModel>,
    ik_seed: Vec<f64>,
    /// Pixels matched in the painted image on the last act.
    pub last_match_count: usize,
    /// Pixel shift (painted minus reference) on the last act.
    pub last_shift_px: (f64, f64),
}

impl VisionServoPolicy {
    pub fn new(
        inner: ScriptedPolicy,
        camera: CameraModel,
        key: VisionKeyConfig,
        source: std::sync::Arc<crate::urdf::RobotModel>,
    ) -> Self {
        let ik_seed = JointState::mid_range(&source).arm;
        Self {
            inner,
            camera,
            key,
            source,
            ik_seed,
            last_match_count: 0,
            last_shift_px: (0.0, 0.0),
        }
    }

    /// Seeds the internal IK that poses the reference render.
    pub fn with_ik_seed(mut self, seed: Vec<f64>) -> Self {
        if seed.len() == self.source.arm_dof() {
            self.ik_seed = seed;
        }
        self
    }

    pub fn is_done(&self) -> bool {
        self.inner.is_done()
    }

    fn key_centroid(&self, image: &FrameSet) -> Option<(f64, f64, usize)> {
        let kref = Vector3::new(
            self.key.reference_rgb[0],
            self.key.reference_rgb[1],
            self.key.reference_rgb[2],
        )
        .normalize();
        let dom = (0..3)
            .max_by(|&a, &b| {
                self.key.reference_rgb[a]
                    .partial_cmp(&self.key.reference_rgb[b])
                    .unwrap()
            })
            .unwrap_or(0);
        let mut sum_u = 0.0;
        let mut sum_v = 0.0;
        let mut count = 0usize;
        for y in 0..image.height {
            for x in 0..image.width {
                let c = image.rgb_at(x, y);
                let v = Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64);
                if c[dom] < self.key.min_value {
                    continue;
                }
                let dominant =
                    (0..3).all(|i| i == dom || v[dom] >= self.key.dominance * v[i].max(1.0));
                if !dominant {
                    continue;
                }
                if v.normalize().dot(&kref) < self.key.min_cos {
                    continue;
                }
                sum_u += x as f64;
                sum_v += y as f64;
                count += 1;
            }
        }
        (count > 0).then(|| (sum_u / count as f64, sum_v / count as f64, count))
    }

    /// Where the source gripper should appear: the source robot rendered at
    /// the proprio pose through the source camera (base frame).
    fn reference_layer(&mut self, proprio_tool: &RigidTransform, width: f64) -> Result<FrameSet> {
        use crate::kinematics::{remove_mount_offset, solve_ik, IkParams};
        let flange = remove_mount_offset(&self.source, proprio_tool);
        let seed = JointState::new(&self.source, self.ik_seed.clone(), 0.0)?;
        let report = solve_ik(&self.source, &flange, &seed, &IkParams::default())?;
        self.ik_seed = report.joints.clone();
        let state = JointState::new(&self.source, report.joints, width)?;
        crate::raster::render_robot_layer(
            &self.source,
            &state,
            &RigidTransform::identity(),
            &self.camera,
        )
    }

    /// Believed tool position: proprio corrected by the back-projected
    /// pixel shift between the painted and reference gripper centroids.
    pub fn estimate_tool_position(
        &mut self,
        image: &FrameSet,
        proprio_tool: &RigidTransform,
        width: f64,
    ) -> Vector3<f64> {
        let measured = self.key_centroid(image);
        self.last_match_count = measured.map_or(0, |(_, _, n)| n);
        let reference = match self.reference_layer(proprio_tool, width) {
            Ok(layer) => self.key_centroid(&layer),
            Err(_) => None,
        };
        let (Some((mu, mv, _)), Some((ru, rv, _))) = (measured, reference) else {
            self.last_shift_px = (0.0, 0.0);
            return proprio_tool.translation;
        };
        self.last_shift_px = (mu - ru, mv - rv);
        let depth = self
            .camera
            .camera_from_world()
            .transform_point(&proprio_tool.translation)
            .z;
        let (Ok(at_measured), Ok(at_reference)) = (
            self.camera.backproject_pixel(mu, mv, depth),
            self.camera.backproject_pixel(ru, rv, depth),
        ) else {
            return proprio_tool.translation;
        };
        proprio_tool.translation + (at_measured - at_reference)
    }

    /// One step: estimate the tool from the painted image, then run the
    /// scripted machine with that belief. Object poses stay ground truth.
    pub fn act(
        &mut self,
        image: &FrameSet,
        proprio_tool: &RigidTransform,
        width: f64,
        objects: Vec<Vector3<f64>>,
        goal: Vector3<f64>,
    ) -> Action {
        let est = self.estimate_tool_position(image, proprio_tool, width);
        let view = WorldView {
            tool: RigidTransform::new(est, proprio_tool.rotation),
            width,
            objects,
            goal,
        };
        self.inner.act(&view)
    }
}

/// Builds the vision key for a robot's gripper from its fingertip color.
pub fn gripper_key_for(model: &crate::urdf::RobotModel) -> VisionKeyConfig {
    let mut key = VisionKeyConfig::default();
    for &li in &model.gripper_links() {
        if model.links[li].name.contains("finger") {
            if let Some(v) = model.links[li].visuals.first() {
                key.reference_rgb = v.color;
                break;
            }
        }
    }
    key
}
