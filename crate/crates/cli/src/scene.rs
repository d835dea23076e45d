//! Scene description files for the `render` subcommand.

use std::path::Path;
use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crosspaint_core::error::{Error, Result};
use crosspaint_core::geometry::parse_pose_record;
use crosspaint_core::raster::{Scene, SceneObject, SceneRobot};
use crosspaint_core::urdf::{GeometryPrimitive, JointState, RobotModel};

#[derive(Debug, Serialize, Deserialize)]
pub struct SceneFile {
    #[serde(default = "default_background")]
    pub background: [u8; 3],
    #[serde(default = "default_ambient")]
    pub ambient: f64,
    #[serde(default = "default_light")]
    pub light_dir: [f64; 3],
    #[serde(default, rename = "object")]
    pub objects: Vec<ObjectEntry>,
    #[serde(default, rename = "robot")]
    pub robots: Vec<RobotEntry>,
}

fn default_background() -> [u8; 3] {
    [210, 210, 215]
}
fn default_ambient() -> f64 {
    0.45
}
fn default_light() -> [f64; 3] {
    [-0.3, 0.25, -1.0]
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub id: u8,
    pub shape: String,
    #[serde(default)]
    pub size: Option<[f64; 3]>,
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default)]
    pub length: Option<f64>,
    #[serde(default)]
    pub file: Option<String>,
    /// Pose record `tx ty tz qw qx qy qz [w]`.
    pub pose: String,
    pub albedo: [f64; 3],
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RobotEntry {
    /// Fixture name (`hexa`, `septa`) or `path.urdf:path.toml`.
    pub model: String,
    pub base: String,
    pub joints: Vec<f64>,
    #[serde(default)]
    pub width: f64,
    #[serde(default = "default_seg_base")]
    pub seg_base: u8,
}

fn default_seg_base() -> u8 {
    100
}

pub fn resolve_robot(name: &str) -> Result<Arc<RobotModel>> {
    if let Some(m) = crosspaint_core::fixtures::by_name(name) {
        return Ok(Arc::new(m));
    }
    let (urdf, cfg) = match name.split_once(':') {
        Some((u, c)) => (u.to_string(), c.to_string()),
        None => {
            let stem = name.trim_end_matches(".urdf");
            (format!("{stem}.urdf"), format!("{stem}.toml"))
        }
    };
    Ok(Arc::new(crosspaint_core::files::load_robot(
        Path::new(&urdf),
        Path::new(&cfg),
    )?))
}

impl SceneFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("scene file: {e}")))
    }

    pub fn build(&self, base_dir: &Path) -> Result<Scene> {
        let mut scene = Scene::empty();
        scene.background = self.background;
        scene.ambient = self.ambient;
        scene.light_dir = Vector3::from(self.light_dir);
        for obj in &self.objects {
            let geometry = match obj.shape.as_str() {
                "box" => GeometryPrimitive::Box {
                    size: obj
                        .size
                        .ok_or_else(|| Error::Config(format!("object {}: box needs size", obj.id)))?,
                },
                "cylinder" => GeometryPrimitive::Cylinder {
                    radius: obj.radius.ok_or_else(|| {
                        Error::Config(format!("object {}: cylinder needs radius", obj.id))
                    })?,
                    length: obj.length.ok_or_else(|| {
                        Error::Config(format!("object {}: cylinder needs length", obj.id))
                    })?,
                },
                "sphere" => GeometryPrimitive::Sphere {
                    radius: obj.radius.ok_or_else(|| {
                        Error::Config(format!("object {}: sphere needs radius", obj.id))
                    })?,
                },
                "mesh" => {
                    let file = obj.file.as_ref().ok_or_else(|| {
                        Error::Config(format!("object {}: mesh needs file", obj.id))
                    })?;
                    let text = std::fs::read_to_string(base_dir.join(file))?;
                    GeometryPrimitive::Mesh {
                        filename: file.clone(),
                        vertices: crosspaint_core::urdf::parse_mesh_ascii(&text)?,
                    }
                }
                other => {
                    return Err(Error::Config(format!(
                        "object {}: unknown shape `{other}`",
                        obj.id
                    )))
                }
            };
            let (pose, _) = parse_pose_record(&obj.pose)?;
            scene.objects.push(SceneObject {
                id: obj.id,
                geometry,
                pose,
                albedo: obj.albedo,
            });
        }
        for rob in &self.robots {
            let model = resolve_robot(&rob.model)?;
            let state = JointState::new(&model, rob.joints.clone(), rob.width)?;
            let (base, _) = parse_pose_record(&rob.base)?;
            scene.robots.push(SceneRobot {
                model,
                state,
                base,
                seg_base: rob.seg_base,
            });
        }
        Ok(scene)
    }
}
