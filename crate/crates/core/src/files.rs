//! On-disk formats: camera calibration files, trajectory datasets, dynamics
//! model files, PNG frame sets, masks, and robot loading with mesh
//! resolution.
//!
//! A frame set named `X` is stored as `X.rgb.png` (8-bit RGB), `X.depth.png`
//! (16-bit grayscale, millimeters, 0 = missing/infinite), and `X.seg.png`
//! (8-bit label ids). Structured-text files are TOML; pose records embed as
//! strings in the `tx ty tz qw qx qy qz width` form.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, ImageReader, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    Dataset, DimFit, DynamicsModel, RotationConvention, Trajectory, TrajectoryRecord,
    POSE_DIM_NAMES,
};
use crate::error::{Error, Result};
use crate::geometry::{format_pose_record, parse_pose_record, CameraModel, RigidTransform};
use crate::imageops::Mask;
use crate::raster::FrameSet;
use crate::urdf::{
    apply_robot_config, parse_mesh_ascii, parse_urdf, GeometryPrimitive, RobotConfig, RobotModel,
};

// ---------------------------------------------------------------------------
// Camera calibration files
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CameraFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    /// World-from-camera pose record.
    extrinsic: String,
}

pub fn camera_to_toml(cam: &CameraModel) -> String {
    let file = CameraFile {
        fx: cam.fx,
        fy: cam.fy,
        cx: cam.cx,
        cy: cam.cy,
        width: cam.width,
        height: cam.height,
        extrinsic: format_pose_record(&cam.world_from_camera, 0.0),
    };
    toml::to_string(&file).expect("camera file serializes")
}

pub fn camera_from_toml(text: &str) -> Result<CameraModel> {
    let file: CameraFile =
        toml::from_str(text).map_err(|e| Error::Parse(format!("camera file: {e}")))?;
    let (extrinsic, _) = parse_pose_record(&file.extrinsic)?;
    CameraModel::new(
        file.fx,
        file.fy,
        file.cx,
        file.cy,
        file.width,
        file.height,
        extrinsic,
    )
}

pub fn load_camera(path: &Path) -> Result<CameraModel> {
    camera_from_toml(&std::fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// Trajectory files
// ---------------------------------------------------------------------------

/// Header: `# frame=<id> rotation=<axis-angle|euler-xyz>`, then one record
/// per line: `t tx ty tz qw qx qy qz width ax ay az arx ary arz agrip`.
/// Blank lines separate trajectories.
pub fn dataset_to_string(data: &Dataset) -> String {
    let mut out = format!(
        "# frame={} rotation={}\n",
        data.frame_id,
        data.convention.as_str()
    );
    for (i, traj) in data.trajectories.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for r in &traj.records {
            let q = r.pose.quaternion_wxyz();
            out.push_str(&format!(
                "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {}\n",
                r.t,
                r.pose.translation.x,
                r.pose.translation.y,
                r.pose.translation.z,
                q[0],
                q[1],
                q[2],
                q[3],
                r.gripper_width,
                r.action[0],
                r.action[1],
                r.action[2],
                r.action[3],
                r.action[4],
                r.action[5],
                r.action[6],
            ));
        }
    }
    out
}

pub fn dataset_from_string(text: &str) -> Result<Dataset> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty trajectory file".into()))?;
    if !header.trim_start().starts_with('#') {
        return Err(Error::Parse(
            "trajectory file must start with a `# frame=.. rotation=..` header".into(),
        ));
    }
    let mut frame_id = None;
    let mut convention = None;
    for token in header.trim_start_matches(['#', ' ']).split_whitespace() {
        if let Some(v) = token.strip_prefix("frame=") {
            frame_id = Some(v.to_string());
        } else if let Some(v) = token.strip_prefix("rotation=") {
            convention = Some(RotationConvention::parse(v)?);
        }
    }
    let frame_id = frame_id.ok_or_else(|| Error::Parse("header missing frame=".into()))?;
    let convention = convention.ok_or_else(|| Error::Parse("header missing rotation=".into()))?;

    let mut data = Dataset::new(frame_id, convention);
    let mut current = Trajectory::default();
    for (lineno, line) in lines.enumerate() {
        let line = line.trim();
        if line.starts_with('#') {
            continue;
        }
        if line.is_empty() {
            if !current.records.is_empty() {
                current.validate()?;
                data.trajectories.push(std::mem::take(&mut current));
            }
            continue;
        }
        let nums: Vec<f64> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::Parse(format!("trajectory line {}: bad number `{t}`", lineno + 2)))
            })
            .collect::<Result<_>>()?;
        if nums.len() != 16 {
            return Err(Error::Parse(format!(
                "trajectory line {}: expected 16 numbers, got {}",
                lineno + 2,
                nums.len()
            )));
        }
        current.records.push(TrajectoryRecord {
            t: nums[0],
            pose: RigidTransform::from_parts(
                [nums[1], nums[2], nums[3]],
                [nums[4], nums[5], nums[6], nums[7]],
            ),
            gripper_width: nums[8],
            action: [
                nums[9], nums[10], nums[11], nums[12], nums[13], nums[14], nums[15],
            ],
        });
    }
    if !current.records.is_empty() {
        current.validate()?;
        data.trajectories.push(current);
    }
    Ok(data)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_string(&std::fs::read_to_string(path)?)
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    Ok(std::fs::write(path, dataset_to_string(data))?)
}

// ---------------------------------------------------------------------------
// Dynamics model files
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct DynamicsFile {
    frame: String,
    rotation: RotationConvention,
    dim: Vec<DimEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DimEntry {
    name: String,
    slope: f64,
    intercept: f64,
    residual_rms: f64,
    #[serde(default)]
    rank_deficient: bool,
}

pub fn dynamics_to_toml(model: &DynamicsModel) -> String {
    let file = DynamicsFile {
        frame: model.frame_id.clone(),
        rotation: model.convention,
        dim: model
            .dims
            .iter()
            .zip(POSE_DIM_NAMES)
            .map(|(d, name)| DimEntry {
                name: name.into(),
                slope: d.slope,
                intercept: d.intercept,
                residual_rms: d.residual_rms,
                rank_deficient: d.rank_deficient,
            })
            .collect(),
    };
    toml::to_string(&file).expect("dynamics file serializes")
}

pub fn dynamics_from_toml(text: &str) -> Result<DynamicsModel> {
    let file: DynamicsFile =
        toml::from_str(text).map_err(|e| Error::Parse(format!("dynamics file: {e}")))?;
    if file.dim.len() != 7 {
        return Err(Error::Parse(format!(
            "dynamics file needs 7 dimensions, got {}",
            file.dim.len()
        )));
    }
    let mut dims = [DimFit {
        slope: 1.0,
        intercept: 0.0,
        residual_rms: 0.0,
        rank_deficient: false,
    }; 7];
    for (i, name) in POSE_DIM_NAMES.iter().enumerate() {
        let entry = file
            .dim
            .iter()
            .find(|d| d.name == *name)
            .ok_or_else(|| Error::Parse(format!("dynamics file missing dimension `{name}`")))?;
        if !(entry.slope.is_finite() && entry.intercept.is_finite()) {
            return Err(Error::Parse(format!(
                "dynamics dimension `{name}` has non-finite coefficients"
            )));
        }
        dims[i] = DimFit {
            slope: entry.slope,
            intercept: entry.intercept,
            residual_rms: entry.residual_rms,
            rank_deficient: entry.rank_deficient,
        };
    }
    Ok(DynamicsModel {
        dims,
        convention: file.rotation,
        frame_id: file.frame,
    })
}

// ---------------------------------------------------------------------------
// FrameSet PNG IO
// ---------------------------------------------------------------------------

pub fn rgb_png_bytes(frame: &FrameSet) -> Result<Vec<u8>> {
    let img: RgbImage =
        ImageBuffer::from_raw(frame.width, frame.height, frame.rgb.clone()).ok_or_else(|| {
            Error::DimensionMismatch {
                expected: frame.pixel_count() * 3,
                got: frame.rgb.len(),
            }
        })?;
    let mut bytes = Vec::new();
    img.write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    Ok(bytes)
}

pub fn frameset_from_rgb_png_bytes(bytes: &[u8]) -> Result<FrameSet> {
    let img = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()?
        .decode()?
        .into_rgb8();
    Ok(FrameSet {
        width: img.width(),
        height: img.height(),
        rgb: img.into_raw(),
        depth: None,
        seg: None,
    })
}

/// Writes `<name>.rgb.png` plus `.depth.png` / `.seg.png` when present.
pub fn save_frameset(dir: &Path, name: &str, frame: &FrameSet) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{name}.rgb.png")), rgb_png_bytes(frame)?)?;
    if let Some(depth) = &frame.depth {
        let data: Vec<u16> = depth
            .iter()
            .map(|&d| {
                if d.is_finite() {
                    ((d * 1000.0).round() as i64).clamp(1, u16::MAX as i64) as u16
                } else {
                    0
                }
            })
            .collect();
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(frame.width, frame.height, data).expect("sized above");
        img.save_with_format(
            dir.join(format!("{name}.depth.png")),
            image::ImageFormat::Png,
        )?;
    }
    if let Some(seg) = &frame.seg {
        let img: GrayImage = ImageBuffer::from_raw(frame.width, frame.height, seg.clone())
            .expect("sized above");
        img.save_with_format(dir.join(format!("{name}.seg.png")), image::ImageFormat::Png)?;
    }
    Ok(())
}

/// Loads a frame set; depth and segmentation are optional on disk.
pub fn load_frameset(dir: &Path, name: &str) -> Result<FrameSet> {
    let rgb_img = image::open(dir.join(format!("{name}.rgb.png")))?.into_rgb8();
    let (width, height) = rgb_img.dimensions();
    let mut frame = FrameSet {
        width,
        height,
        rgb: rgb_img.into_raw(),
        depth: None,
        seg: None,
    };
    let depth_path = dir.join(format!("{name}.depth.png"));
    if depth_path.exists() {
        let img = image::open(&depth_path)?.into_luma16();
        if img.dimensions() != (width, height) {
            return Err(Error::DimensionMismatch {
                expected: (width * height) as usize,
                got: (img.width() * img.height()) as usize,
            });
        }
        frame.depth = Some(
            img.into_raw()
                .into_iter()
                .map(|mm| {
                    if mm == 0 {
                        f32::INFINITY
                    } else {
                        mm as f32 / 1000.0
                    }
                })
                .collect(),
        );
    }
    let seg_path = dir.join(format!("{name}.seg.png"));
    if seg_path.exists() {
        let img = image::open(&seg_path)?.into_luma8();
        if img.dimensions() != (width, height) {
            return Err(Error::DimensionMismatch {
                expected: (width * height) as usize,
                got: (img.width() * img.height()) as usize,
            });
        }
        frame.seg = Some(img.into_raw());
    }
    Ok(frame)
}

/// Frame-set names in a directory (sorted), from `*.rgb.png` files.
pub fn list_frameset_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let fname = entry.file_name();
        let fname = fname.to_string_lossy();
        if let Some(stem) = fname.strip_suffix(".rgb.png") {
            names.push(stem.to_string());
        }
    }
    names.sort();
    Ok(names)
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    let data: Vec<u8> = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let img: GrayImage =
        ImageBuffer::from_raw(mask.width, mask.height, data).expect("sized above");
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path)?.into_luma8();
    Ok(Mask {
        width: img.width(),
        height: img.height(),
        data: img.into_raw().into_iter().map(|v| v >= 128).collect(),
    })
}

// ---------------------------------------------------------------------------
// Observation state files
// ---------------------------------------------------------------------------

/// Sidecar `<name>.obs.toml` accompanying an on-disk frame set: timestamp,
/// tool pose record (with gripper width), and arm joint values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservationFile {
    pub t: f64,
    /// Pose record: tool pose in the target robot base frame + width.
    pub eef: String,
    pub q: Vec<f64>,
    #[serde(default)]
    pub external: bool,
}

pub fn save_observation(dir: &Path, name: &str, obs: &ObservationFile) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let text = toml::to_string(obs).expect("observation serializes");
    Ok(std::fs::write(dir.join(format!("{name}.obs.toml")), text)?)
}

pub fn load_observation(dir: &Path, name: &str) -> Result<ObservationFile> {
    let text = std::fs::read_to_string(dir.join(format!("{name}.obs.toml")))?;
    toml::from_str(&text).map_err(|e| Error::Parse(format!("observation file: {e}")))
}

// ---------------------------------------------------------------------------
// Robot loading
// ---------------------------------------------------------------------------

/// Parses a URDF, applies its sidecar config, and resolves mesh references
/// against `mesh_dir` (default: the URDF's directory).
pub fn load_robot(urdf_path: &Path, config_path: &Path) -> Result<RobotModel> {
    let urdf_text = std::fs::read_to_string(urdf_path)?;
    let mut model = parse_urdf(&urdf_text)?.model;
    let cfg = RobotConfig::from_toml(&std::fs::read_to_string(config_path)?)?;
    apply_robot_config(&mut model, &cfg)?;
    let mesh_dir: PathBuf = match &cfg.mesh_dir {
        Some(d) => config_path.parent().unwrap_or(Path::new(".")).join(d),
        None => urdf_path.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    resolve_meshes(&mut model, &mesh_dir)?;
    Ok(model)
}

/// Loads every unresolved mesh reference from `dir`.
pub fn resolve_meshes(model: &mut RobotModel, dir: &Path) -> Result<()> {
    for link in &mut model.links {
        for vis in &mut link.visuals {
            if let GeometryPrimitive::Mesh { filename, vertices } = &mut vis.geometry {
                if vertices.is_empty() {
                    let text = std::fs::read_to_string(dir.join(&filename[..]))?;
                    *vertices = parse_mesh_ascii(&text)?;
                }
            }
        }
    }
    Ok(())
}
