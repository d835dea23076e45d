//! The cross-painting pipeline: (optional reproject) -> mask the target
//! robot -> dilate -> inpaint -> IK-pose the source robot -> render ->
//! composite -> luminance, producing the image handed to the source policy.

use std::sync::Arc;
use std::time::Instant;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;

use crate::error::{Error, Result};
use crate::files::rgb_png_bytes;
use crate::geometry::{format_pose_record, transform_pose, CameraModel, RigidTransform};
use crate::imageops::{adjust_luminance, composite_overlay, dilate_mask, inpaint_fast_marching, Mask};
use crate::kinematics::{remove_mount_offset, solve_ik, IkParams};
use crate::policy::PolicyQuery;
use crate::raster::{render_robot_layer, FrameSet};
use crate::reproject::reproject_frame;
use crate::urdf::{JointState, RobotModel};

/// Free parameters of the pipeline. Robot base poses are world-from-base;
/// the frame conversion `T_T^S` derives from them.
#[derive(Debug, Clone)]
pub struct CrosspaintConfig {
    pub source: Arc<RobotModel>,
    pub source_base: RigidTransform,
    pub target: Arc<RobotModel>,
    pub target_base: RigidTransform,
    pub source_camera: CameraModel,
    pub target_camera: CameraModel,
    pub dilate_arm_iters: u32,
    pub dilate_gripper_iters: u32,
    pub inpaint_radius: u32,
    pub use_depth_occlusion: bool,
    pub reproject: bool,
    /// Calibration-error knob: shifts the mask and the rendered source
    /// robot by this many pixels along +x.
    pub mask_offset_px: i32,
    /// Applied to composited robot pixels.
    pub luminance_offset: i32,
    /// Pre-captured background frame; when set, masked pixels fill from it
    /// instead of inpainting. Valid only for a fixed camera.
    pub background_plate: Option<FrameSet>,
}

impl CrosspaintConfig {
    pub fn new(
        source: Arc<RobotModel>,
        source_base: RigidTransform,
        target: Arc<RobotModel>,
        target_base: RigidTransform,
        source_camera: CameraModel,
        target_camera: CameraModel,
    ) -> Self {
        Self {
            source,
            source_base,
            target,
            target_base,
            source_camera,
            target_camera,
            dilate_arm_iters: 20,
            dilate_gripper_iters: 10,
            inpaint_radius: 3,
            use_depth_occlusion: true,
            reproject: false,
            mask_offset_px: 0,
            luminance_offset: 0,
            background_plate: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.source_camera.validate()?;
        self.target_camera.validate()?;
        if self.inpaint_radius < 1 {
            return Err(Error::Config("inpaint radius must be >= 1".into()));
        }
        if let Some(plate) = &self.background_plate {
            if plate.width != self.target_camera.width || plate.height != self.target_camera.height
            {
                return Err(Error::Config(
                    "background plate dimensions must match the target camera".into(),
                ));
            }
        }
        Ok(())
    }

    /// `T_T^S`: target-base poses re-expressed in the source base frame.
    pub fn t_target_to_source(&self) -> RigidTransform {
        self.source_base.inverse().compose(&self.target_base)
    }

    pub fn t_source_to_target(&self) -> RigidTransform {
        self.target_base.inverse().compose(&self.source_base)
    }
}

/// One observation from the target robot.
#[derive(Debug, Clone)]
pub struct TargetObservation {
    pub frame: FrameSet,
    pub joint_state: JointState,
    /// Tool pose in the target base frame (proprioception).
    pub eef: RigidTransform,
    pub timestamp: f64,
    /// Set when the proprio cannot be assumed consistent with
    /// `FK(joint_state)` (externally captured, or deliberately offset).
    pub external: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    pub ik_pos_residual: f64,
    pub ik_rot_residual: f64,
    pub ik_converged: bool,
    pub ik_iterations: u32,
    /// Reprojection disocclusion holes as a fraction of the frame; 0 when
    /// reprojection and the background plate are off.
    pub hole_fraction: f64,
    pub inpaint_fallback: bool,
    /// No-depth mode: robot pixels drawn on top even though scene depth
    /// would have occluded them.
    pub occluded_override_px: usize,
    pub stage_ms: Vec<(&'static str, f64)>,
}

/// Stateful pipeline: carries the previous frame's IK solution as the next
/// seed so renders stay temporally coherent along a trajectory.
pub struct Crosspainter {
    cfg: CrosspaintConfig,
    ik_params: IkParams,
    last_ik: Option<Vec<f64>>,
}

impl Crosspainter {
    pub fn new(cfg: CrosspaintConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            ik_params: IkParams::default(),
            last_ik: None,
        })
    }

    pub fn config(&self) -> &CrosspaintConfig {
        &self.cfg
    }

    pub fn reset(&mut self) {
        self.last_ik = None;
    }

    /// Runs the full pipeline on one observation. IK non-convergence is a
    /// diagnostic, not a failure: the best-effort pose still renders.
    pub fn cross_paint(&mut self, obs: &TargetObservation) -> Result<(FrameSet, Diagnostics)> {
        let cfg = &self.cfg;
        if obs.frame.width != cfg.target_camera.width
            || obs.frame.height != cfg.target_camera.height
        {
            return Err(Error::DimensionMismatch {
                expected: (cfg.target_camera.width * cfg.target_camera.height) as usize,
                got: obs.frame.pixel_count(),
            });
        }
        let mut diag = Diagnostics::default();
        let mut clock = Instant::now();
        let mut lap = |label: &'static str, diag: &mut Diagnostics| {
            let now = Instant::now();
            diag.stage_ms.push((label, (now - clock).as_secs_f64() * 1e3));
            clock = now;
        };

        // Reprojection into the source camera pose, when requested. All
        // later stages then operate in the paint camera.
        let (mut working, reproj_holes, paint_cam) = if cfg.reproject {
            let res = reproject_frame(&obs.frame, &cfg.target_camera, &cfg.source_camera)?;
            diag.hole_fraction = res.holes.count() as f64 / res.frame.pixel_count() as f64;
            (res.frame, res.holes, &cfg.source_camera)
        } else {
            let empty = Mask::new(obs.frame.width, obs.frame.height);
            (obs.frame.clone(), empty, &cfg.target_camera)
        };
        lap("reproject", &mut diag);

        // Mask the target robot: render it at the reported joint state,
        // split arm from gripper links, shift by the calibration offset,
        // dilate each, and union with reprojection holes.
        let target_layer =
            render_robot_layer(&cfg.target, &obs.joint_state, &cfg.target_base, paint_cam)?;
        let gripper_ids: Vec<u8> = cfg
            .target
            .gripper_links()
            .iter()
            .map(|&l| cfg.target.link_seg_id(l))
            .collect();
        let gripper_mask = Mask::from_seg(&target_layer, |id| gripper_ids.contains(&id));
        let arm_mask = Mask::from_seg(&target_layer, |id| !gripper_ids.contains(&id));
        let robot_mask = dilate_mask(&arm_mask.shifted(cfg.mask_offset_px, 0), cfg.dilate_arm_iters)
            .union(&dilate_mask(
                &gripper_mask.shifted(cfg.mask_offset_px, 0),
                cfg.dilate_gripper_iters,
            ));
        let holes = robot_mask.union(&reproj_holes);
        lap("mask", &mut diag);

        // Remove the target robot: fill from the background plate or by
        // fast-marching inpainting, then treat the content under the mask
        // as depthless so the source robot can occupy it.
        match &cfg.background_plate {
            Some(plate) => {
                for i in 0..holes.data.len() {
                    if holes.data[i] {
                        working.rgb[i * 3..i * 3 + 3]
                            .copy_from_slice(&plate.rgb[i * 3..i * 3 + 3]);
                    }
                }
                diag.hole_fraction =
                    holes.count() as f64 / working.pixel_count() as f64;
            }
            None => {
                let res = inpaint_fast_marching(&working, &holes, cfg.inpaint_radius)?;
                working = res.frame;
                diag.inpaint_fallback = res.all_hole_fallback;
            }
        }
        if let Some(depth) = working.depth.as_mut() {
            for (i, &hole) in holes.data.iter().enumerate() {
                if hole {
                    depth[i] = f32::INFINITY;
                }
            }
        }
        if let Some(seg) = working.seg.as_mut() {
            for (i, &hole) in holes.data.iter().enumerate() {
                if hole {
                    seg[i] = 0;
                }
            }
        }
        lap("inpaint", &mut diag);

        // Source end-effector pose: convert the target tool pose into the
        // source base frame and strip the source mount offset for IK.
        let tool_source = transform_pose(&cfg.t_target_to_source(), &obs.eef);
        let flange_target = remove_mount_offset(&cfg.source, &tool_source);
        let seed_vals = match &self.last_ik {
            Some(prev) => prev.clone(),
            None if obs.joint_state.arm.len() == cfg.source.arm_dof() => {
                obs.joint_state.arm.clone()
            }
            None => JointState::mid_range(&cfg.source).arm,
        };
        let seed = JointState::new(&cfg.source, seed_vals, 0.0)?;
        let report = solve_ik(&cfg.source, &flange_target, &seed, &self.ik_params)?;
        diag.ik_pos_residual = report.pos_residual;
        diag.ik_rot_residual = report.rot_residual;
        diag.ik_converged = report.converged;
        diag.ik_iterations = report.iterations;
        self.last_ik = Some(report.joints.clone());
        let source_state = JointState::new(
            &cfg.source,
            report.joints,
            obs.joint_state.gripper_width,
        )?;
        lap("ik", &mut diag);

        let source_layer =
            render_robot_layer(&cfg.source, &source_state, &cfg.source_base, paint_cam)?;
        let source_layer = shift_frame(&source_layer, cfg.mask_offset_px, 0);
        lap("render", &mut diag);

        if !cfg.use_depth_occlusion {
            diag.occluded_override_px = (0..working.pixel_count())
                .filter(|&i| {
                    source_layer.seg.as_ref().map_or(false, |s| s[i] != 0) && {
                        let base_d = working.depth.as_ref().map_or(f32::INFINITY, |d| d[i]);
                        let layer_d = source_layer.depth.as_ref().map_or(f32::INFINITY, |d| d[i]);
                        base_d.is_finite() && base_d < layer_d
                    }
                })
                .count();
        }
        let composited = composite_overlay(&working, &source_layer, cfg.use_depth_occlusion)?;
        lap("composite", &mut diag);

        let robot_pixels = won_mask(&working, &source_layer, cfg.use_depth_occlusion);
        let lit = adjust_luminance(&composited, &robot_pixels, cfg.luminance_offset);
        lap("luminance", &mut diag);

        let painted = FrameSet {
            width: lit.width,
            height: lit.height,
            rgb: lit.rgb,
            depth: None,
            seg: None,
        };
        Ok((painted, diag))
    }
}

fn won_mask(base: &FrameSet, layer: &FrameSet, use_depth: bool) -> Mask {
    let mut m = Mask::new(base.width, base.height);
    for y in 0..base.height {
        for x in 0..base.width {
            let wins = if use_depth {
                layer.depth_at(x, y) < base.depth_at(x, y)
            } else {
                layer.seg_at(x, y) != 0
            };
            m.set(x, y, wins);
        }
    }
    m
}

/// Translates all buffers by whole pixels; vacated pixels become background
/// (black, infinite depth, label 0).
pub fn shift_frame(frame: &FrameSet, dx: i32, dy: i32) -> FrameSet {
    if dx == 0 && dy == 0 {
        return frame.clone();
    }
    let mut out = FrameSet::new_rgb(frame.width, frame.height, [0, 0, 0]);
    out.depth = frame.depth.as_ref().map(|_| vec![f32::INFINITY; frame.pixel_count()]);
    out.seg = frame.seg.as_ref().map(|_| vec![0; frame.pixel_count()]);
    for y in 0..frame.height {
        for x in 0..frame.width {
            let nx = x as i64 + dx as i64;
            let ny = y as i64 + dy as i64;
            if nx < 0 || ny < 0 || nx >= frame.width as i64 || ny >= frame.height as i64 {
                continue;
            }
            let (nx, ny) = (nx as u32, ny as u32);
            out.set_rgb(nx, ny, frame.rgb_at(x, y));
            let from = frame.idx(x, y);
            let to = frame.idx(nx, ny);
            if let (Some(src), Some(dst)) = (frame.depth.as_ref(), out.depth.as_mut()) {
                dst[to] = src[from];
            }
            if let (Some(src), Some(dst)) = (frame.seg.as_ref(), out.seg.as_mut()) {
                dst[to] = src[from];
            }
        }
    }
    out
}

/// One-shot convenience wrapper; seeds IK from the observation itself.
pub fn cross_paint(
    cfg: &CrosspaintConfig,
    obs: &TargetObservation,
) -> Result<(FrameSet, Diagnostics)> {
    Crosspainter::new(cfg.clone())?.cross_paint(obs)
}

/// Bundles proprio converted to the source frame with the painted image.
/// The gripper width passes through unchanged (width normalization is the
/// adapter config's business).
pub fn make_policy_query(
    obs: &TargetObservation,
    painted: &FrameSet,
    t_target_to_source: &RigidTransform,
    step: u64,
) -> Result<PolicyQuery> {
    let proprio_pose = transform_pose(t_target_to_source, &obs.eef);
    let q = proprio_pose.quaternion_wxyz();
    let proprio = [
        proprio_pose.translation.x,
        proprio_pose.translation.y,
        proprio_pose.translation.z,
        q[0],
        q[1],
        q[2],
        q[3],
        obs.joint_state.gripper_width,
    ];
    Ok(PolicyQuery {
        image: BASE64.encode(rgb_png_bytes(painted)?),
        proprio,
        step,
    })
}

/// Pose-record view of a query's proprio, for logs and adapters.
pub fn proprio_record(q: &PolicyQuery) -> String {
    let pose = RigidTransform::from_parts(
        [q.proprio[0], q.proprio[1], q.proprio[2]],
        [q.proprio[3], q.proprio[4], q.proprio[5], q.proprio[6]],
    );
    format_pose_record(&pose, q.proprio[7])
}
