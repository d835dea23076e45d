//! Forward-dynamics fitting and execution-mode simulation.
//!
//! A per-dimension affine model maps (current pose dim, action dim) to the
//! next pose dim: `next_i = cur_i + slope_i * a_i + intercept_i`, fitted by
//! ordinary least squares on trajectory transitions. Rotation is handled
//! per-dimension on the dataset's declared parameterization (per-axis
//! axis-angle deltas, or intrinsic XYZ Euler deltas, composed onto the
//! quaternion). Execution modes run against a first-order proportional pose
//! plant: blocking (iterate until the mixed position+quaternion error norm
//! drops below threshold), delta (single tick, no convergence enforcement),
//! and playback (blocking toward recorded poses).

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pose_error_norm, RigidTransform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RotationConvention {
    #[serde(rename = "axis-angle")]
    AxisAngle,
    #[serde(rename = "euler-xyz")]
    EulerXyz,
}

impl RotationConvention {
    pub fn as_str(&self) -> &'static str {
        match self {
            RotationConvention::AxisAngle => "axis-angle",
            RotationConvention::EulerXyz => "euler-xyz",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "axis-angle" => Ok(Self::AxisAngle),
            "euler-xyz" => Ok(Self::EulerXyz),
            other => Err(Error::Parse(format!("unknown rotation convention `{other}`"))),
        }
    }
}

/// Action layout: delta position (3), delta rotation (3, per the declared
/// convention), gripper width command (absolute).
pub type Action = [f64; 7];

pub const POSE_DIM_NAMES: [&str; 7] = ["x", "y", "z", "rx", "ry", "rz", "gripper"];

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub t: f64,
    pub pose: RigidTransform,
    pub gripper_width: f64,
    pub action: Action,
}

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub records: Vec<TrajectoryRecord>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.records.len()
    }

    pub fn validate(&self) -> Result<()> {
        for pair in self.records.windows(2) {
            if pair[1].t <= pair[0].t {
                return Err(Error::Parse(format!(
                    "timestamps must strictly increase: {} then {}",
                    pair[0].t, pair[1].t
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub frame_id: String,
    pub convention: RotationConvention,
}

impl Dataset {
    pub fn new(frame_id: impl Into<String>, convention: RotationConvention) -> Self {
        Self {
            trajectories: Vec::new(),
            frame_id: frame_id.into(),
            convention,
        }
    }

    pub fn transition_count(&self) -> usize {
        self.trajectories
            .iter()
            .map(|t| t.horizon().saturating_sub(1))
            .sum()
    }
}

/// Per-dimension pose delta between consecutive states, on `convention`.
pub fn pose_delta(
    cur: &RigidTransform,
    cur_width: f64,
    next: &RigidTransform,
    next_width: f64,
    convention: RotationConvention,
) -> [f64; 7] {
    let dp = next.translation - cur.translation;
    let rel = next.rotation * cur.rotation.inverse();
    let dr = match convention {
        RotationConvention::AxisAngle => rel.scaled_axis(),
        RotationConvention::EulerXyz => {
            let (r, p, y) = rel.euler_angles();
            Vector3::new(r, p, y)
        }
    };
    [dp.x, dp.y, dp.z, dr.x, dr.y, dr.z, next_width - cur_width]
}

/// `current ⊕ a`: applies an action to a pose. Position and rotation are
/// incremental; the gripper component is an absolute width command.
pub fn apply_action(
    pose: &RigidTransform,
    a: &Action,
    convention: RotationConvention,
) -> (RigidTransform, f64) {
    let dp = Vector3::new(a[0], a[1], a[2]);
    let rot = match convention {
        RotationConvention::AxisAngle => {
            UnitQuaternion::from_scaled_axis(Vector3::new(a[3], a[4], a[5]))
        }
        RotationConvention::EulerXyz => UnitQuaternion::from_euler_angles(a[3], a[4], a[5]),
    };
    (
        RigidTransform::new(pose.translation + dp, rot * pose.rotation),
        a[6],
    )
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DimFit {
    pub slope: f64,
    pub intercept: f64,
    pub residual_rms: f64,
    /// Set when the action column had no variance and the fit fell back to
    /// the identity mapping (slope 1, intercept 0).
    pub rank_deficient: bool,
}

/// Per-dimension affine forward dynamics, plus the convention and frame it
/// was fitted under so fits and predictions cannot be mixed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DynamicsModel {
    pub dims: [DimFit; 7],
    pub convention: RotationConvention,
    pub frame_id: String,
}

impl DynamicsModel {
    /// Identity dynamics: the plant achieves exactly what the action asks.
    pub fn identity(convention: RotationConvention, frame_id: impl Into<String>) -> Self {
        Self {
            dims: [DimFit {
                slope: 1.0,
                intercept: 0.0,
                residual_rms: 0.0,
                rank_deficient: false,
            }; 7],
            convention,
            frame_id: frame_id.into(),
        }
    }
}

/// Ordinary least squares per pose dimension on (action component) ->
/// (achieved delta). Needs at least 3 transitions; a zero-variance action
/// column falls back to the identity mapping with `rank_deficient` set.
pub fn fit_forward_dynamics(data: &Dataset) -> Result<DynamicsModel> {
    let n = data.transition_count();
    if n < 3 {
        return Err(Error::InsufficientData(format!(
            "need at least 3 transitions per dimension, got {n}"
        )));
    }
    let mut actions: Vec<[f64; 7]> = Vec::with_capacity(n);
    let mut deltas: Vec<[f64; 7]> = Vec::with_capacity(n);
    for traj in &data.trajectories {
        traj.validate()?;
        for pair in traj.records.windows(2) {
            let mut a = pair[0].action;
            // The gripper action is an absolute width command; express it as
            // the implied delta so the affine form covers it too.
            a[6] -= pair[0].gripper_width;
            actions.push(a);
            deltas.push(pose_delta(
                &pair[0].pose,
                pair[0].gripper_width,
                &pair[1].pose,
                pair[1].gripper_width,
                data.convention,
            ));
        }
    }

    let nf = n as f64;
    let mut dims = [DimFit {
        slope: 1.0,
        intercept: 0.0,
        residual_rms: 0.0,
        rank_deficient: false,
    }; 7];
    for d in 0..7 {
        let mean_a = actions.iter().map(|a| a[d]).sum::<f64>() / nf;
        let mean_y = deltas.iter().map(|y| y[d]).sum::<f64>() / nf;
        let mut var_a = 0.0;
        let mut cov = 0.0;
        for (a, y) in actions.iter().zip(&deltas) {
            var_a += (a[d] - mean_a) * (a[d] - mean_a);
            cov += (a[d] - mean_a) * (y[d] - mean_y);
        }
        let (slope, intercept, rank_deficient) = if var_a < 1e-12 {
            (1.0, 0.0, true)
        } else {
            let s = cov / var_a;
            (s, mean_y - s * mean_a, false)
        };
        let mut ss = 0.0;
        for (a, y) in actions.iter().zip(&deltas) {
            let r = y[d] - (slope * a[d] + intercept);
            ss += r * r;
        }
        dims[d] = DimFit {
            slope,
            intercept,
            residual_rms: (ss / nf).sqrt(),
            rank_deficient,
        };
    }
    Ok(DynamicsModel {
        dims,
        convention: data.convention,
        frame_id: data.frame_id.clone(),
    })
}

/// Desired pose and gripper command after one action, converted to the
/// target frame: `T_st ∘ f(p_src, a)`. The gripper command passes through.
pub fn predict_desired_pose(
    model: &DynamicsModel,
    p_src: &RigidTransform,
    a: &Action,
    a_convention: RotationConvention,
    t_source_to_target: &RigidTransform,
) -> Result<(RigidTransform, f64)> {
    if a_convention != model.convention {
        return Err(Error::ConventionMismatch {
            fitted: model.convention.as_str().into(),
            given: a_convention.as_str().into(),
        });
    }
    let mut fa = [0.0; 7];
    for d in 0..6 {
        fa[d] = model.dims[d].slope * a[d] + model.dims[d].intercept;
    }
    fa[6] = a[6];
    let (p_next, width) = apply_action(p_src, &fa, model.convention);
    Ok((t_source_to_target.compose(&p_next), width))
}

/// First-order proportional pose tracker: each tick closes `gain` of the
/// remaining error between the measured pose and the command. The proprio
/// offset biases measurements (and therefore where feedback converges to),
/// not the true pose.
#[derive(Debug, Clone)]
pub struct PosePlant {
    pub pose: RigidTransform,
    pub width: f64,
    pub gain: f64,
    pub proprio_offset: Vector3<f64>,
}

impl PosePlant {
    pub fn new(pose: RigidTransform, width: f64, gain: f64) -> Self {
        Self {
            pose,
            width,
            gain,
            proprio_offset: Vector3::zeros(),
        }
    }

    /// What the robot reports: true pose shifted by the proprio offset.
    pub fn measured(&self) -> RigidTransform {
        RigidTransform::new(self.pose.translation + self.proprio_offset, self.pose.rotation)
    }

    pub fn measured_width(&self) -> f64 {
        self.width
    }

    /// One proportional step toward `desired`, servoing on measurements.
    /// `gain_mul` is the controller gain knob; effective gain is
    /// `self.gain * gain_mul`, and values above 1 overshoot.
    pub fn tick(&mut self, desired: &RigidTransform, desired_width: f64, gain_mul: f64) {
        let g = self.gain * gain_mul;
        let meas = self.measured();
        self.pose.translation += (desired.translation - meas.translation) * g;
        let rel = desired.rotation * meas.rotation.inverse();
        let step = UnitQuaternion::from_scaled_axis(rel.scaled_axis() * g);
        self.pose.rotation = step * self.pose.rotation;
        self.tick_width(desired_width, gain_mul);
    }

    /// Gripper-only step; the jaws actuate independently of the arm.
    pub fn tick_width(&mut self, desired_width: f64, gain_mul: f64) {
        self.width += (desired_width - self.width) * self.gain * gain_mul;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerConfig {
    /// Gain multiplier knob applied on top of the plant's own gain.
    pub gain: f64,
    /// Mixed position (m) + quaternion error norm below which a blocking
    /// command is considered reached.
    pub threshold: f64,
    pub max_ticks: u32,
    /// Measurement bias injected into the plant for sensitivity studies.
    pub proprio_offset: [f64; 3],
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            gain: 1.0,
            threshold: 0.015,
            max_ticks: 100,
            proprio_offset: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// True plant pose after stepping.
    pub achieved: RigidTransform,
    pub width: f64,
    pub ticks: u32,
    pub converged: bool,
}

/// Drives the plant toward `desired` until the pose error norm drops below
/// the threshold or `max_ticks` elapse. Non-convergence is a flagged result,
/// not an error.
pub fn blocking_step(
    ctrl: &ControllerConfig,
    desired: &RigidTransform,
    desired_width: f64,
    plant: &mut PosePlant,
) -> StepOutcome {
    let mut ticks = 0;
    let mut converged = false;
    loop {
        if pose_error_norm(&plant.measured(), desired) < ctrl.threshold {
            converged = true;
            break;
        }
        if ticks >= ctrl.max_ticks {
            break;
        }
        plant.tick(desired, desired_width, ctrl.gain);
        ticks += 1;
    }
    if ticks == 0 {
        // Pose already within threshold; the gripper command still executes.
        plant.tick_width(desired_width, ctrl.gain);
    }
    StepOutcome {
        achieved: plant.pose,
        width: plant.width,
        ticks,
        converged,
    }
}

/// Executes a delta action with a single non-blocking tick: the command is
/// `measured ⊕ a` and no convergence is enforced, so plant gain mismatch
/// shows up directly in the achieved pose.
pub fn delta_step(
    a: &Action,
    convention: RotationConvention,
    ctrl: &ControllerConfig,
    plant: &mut PosePlant,
) -> StepOutcome {
    let (desired, width) = apply_action(&plant.measured(), a, convention);
    plant.tick(&desired, width, ctrl.gain);
    StepOutcome {
        achieved: plant.pose,
        width: plant.width,
        ticks: 1,
        converged: true,
    }
}

/// Blocking step toward a recorded pose, bypassing any policy.
pub fn playback_step(
    recorded_next: &RigidTransform,
    recorded_width: f64,
    ctrl: &ControllerConfig,
    plant: &mut PosePlant,
) -> StepOutcome {
    blocking_step(ctrl, recorded_next, recorded_width, plant)
}
