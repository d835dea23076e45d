//! URDF subset parsing and the robot model it produces.
//!
//! Supported elements: `robot`, `link/visual/origin/geometry/material`,
//! geometry `box|cylinder|sphere|mesh`, and
//! `joint(axis, limit, origin, parent, child)` with types revolute,
//! prismatic, fixed. Anything else is collected as a warning, not an error.
//! Mesh references point at sidecar files in a plain ASCII triangle-list
//! format (one `x y z` vertex per line, three lines per triangle) and are
//! resolved separately so parsing stays pure.

use std::collections::HashMap;

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{parse_pose_record, RigidTransform};

#[derive(Debug, Clone, PartialEq)]
pub enum GeometryPrimitive {
    Box { size: [f64; 3] },
    Cylinder { radius: f64, length: f64 },
    Sphere { radius: f64 },
    /// Triangle mesh; `vertices` is empty until resolved against the mesh
    /// directory (three consecutive vertices per triangle).
    Mesh {
        filename: String,
        vertices: Vec<Vector3<f64>>,
    },
}

impl GeometryPrimitive {
    fn validate(&self) -> Result<()> {
        let ok = match self {
            GeometryPrimitive::Box { size } => size.iter().all(|s| *s > 0.0),
            GeometryPrimitive::Cylinder { radius, length } => *radius > 0.0 && *length > 0.0,
            GeometryPrimitive::Sphere { radius } => *radius > 0.0,
            GeometryPrimitive::Mesh { .. } => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Parse(format!(
                "geometry dimensions must be strictly positive: {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Visual {
    pub origin: RigidTransform,
    pub geometry: GeometryPrimitive,
    /// Albedo from `<material><color rgba=...>`, linear 0..1.
    pub color: [f64; 3],
}

pub const DEFAULT_LINK_COLOR: [f64; 3] = [0.6, 0.6, 0.6];

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub name: String,
    pub visuals: Vec<Visual>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointType {
    Revolute,
    Prismatic,
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub kind: JointType,
    pub parent_link: usize,
    pub child_link: usize,
    pub origin: RigidTransform,
    pub axis: Vector3<f64>,
    pub limits: [f64; 2],
}

impl Joint {
    pub fn is_actuated(&self) -> bool {
        self.kind != JointType::Fixed
    }
}

/// Affine width-to-joint mapping for one gripper finger joint:
/// `value = slope * width + intercept`, clamped to the joint's limits.
#[derive(Debug, Clone, PartialEq)]
pub struct GripperJoint {
    pub joint: usize,
    pub slope: f64,
    pub intercept: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GripperModel {
    pub joints: Vec<GripperJoint>,
    pub max_width: f64,
}

/// A parsed kinematic chain: links with visual geometry, a joint tree rooted
/// at a single base link, an ordered arm chain, and gripper/mount data from
/// the sidecar config.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotModel {
    pub name: String,
    pub links: Vec<Link>,
    pub joints: Vec<Joint>,
    /// Joint indices forming the base-to-flange path. Fixed joints may
    /// appear; they contribute origins but no degree of freedom.
    pub arm_chain: Vec<usize>,
    pub gripper: GripperModel,
    /// Tool-from-flange transform (e.g. a 45 degree roll between a robot's
    /// flange and its installed gripper).
    pub mount_offset: RigidTransform,
    pub base_link: usize,
}

impl RobotModel {
    pub fn link_index(&self, name: &str) -> Option<usize> {
        self.links.iter().position(|l| l.name == name)
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    /// Number of actuated joints in the arm chain (the dimension of a
    /// joint-state vector).
    pub fn arm_dof(&self) -> usize {
        self.arm_chain
            .iter()
            .filter(|&&j| self.joints[j].is_actuated())
            .count()
    }

    /// Joint indices of children of `link`, in declaration order.
    pub fn child_joints(&self, link: usize) -> impl Iterator<Item = usize> + '_ {
        self.joints
            .iter()
            .enumerate()
            .filter(move |(_, j)| j.parent_link == link)
            .map(|(i, _)| i)
    }

    /// Flange link: child of the last arm-chain joint.
    pub fn flange_link(&self) -> usize {
        self.arm_chain
            .last()
            .map(|&j| self.joints[j].child_link)
            .unwrap_or(self.base_link)
    }

    /// Links at or below the flange (palm, fingers): the gripper portion of
    /// the segmentation mask. Everything else counts as arm.
    pub fn gripper_links(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![self.flange_link()];
        while let Some(l) = stack.pop() {
            out.push(l);
            for j in self.child_joints(l) {
                stack.push(self.joints[j].child_link);
            }
        }
        out
    }

    /// Per-link segmentation label within a robot-only layer: link index + 1.
    pub fn link_seg_id(&self, link: usize) -> u8 {
        (link + 1).min(u8::MAX as usize) as u8
    }
}

/// Joint values for the arm chain plus a gripper opening width. Values are
/// clamped to limits on construction; `clamped` records whether any input
/// was out of range.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub arm: Vec<f64>,
    pub gripper_width: f64,
    pub clamped: bool,
}

impl JointState {
    pub fn new(model: &RobotModel, arm: Vec<f64>, gripper_width: f64) -> Result<Self> {
        let dof = model.arm_dof();
        if arm.len() != dof {
            return Err(Error::DimensionMismatch {
                expected: dof,
                got: arm.len(),
            });
        }
        let mut clamped = false;
        let mut vals = arm;
        let mut k = 0;
        for &ji in &model.arm_chain {
            let joint = &model.joints[ji];
            if !joint.is_actuated() {
                continue;
            }
            let v = vals[k].clamp(joint.limits[0], joint.limits[1]);
            if v != vals[k] {
                clamped = true;
            }
            vals[k] = v;
            k += 1;
        }
        let max_w = model.gripper.max_width;
        let w = gripper_width.clamp(0.0, max_w.max(0.0));
        if w != gripper_width {
            clamped = true;
        }
        Ok(Self {
            arm: vals,
            gripper_width: w,
            clamped,
        })
    }

    pub fn zeros(model: &RobotModel) -> Self {
        Self::new(model, vec![0.0; model.arm_dof()], 0.0).expect("dimension matches by construction")
    }

    /// Midpoint of each joint's limit range; the IK seed of last resort.
    pub fn mid_range(model: &RobotModel) -> Self {
        let vals = model
            .arm_chain
            .iter()
            .filter(|&&j| model.joints[j].is_actuated())
            .map(|&j| 0.5 * (model.joints[j].limits[0] + model.joints[j].limits[1]))
            .collect();
        Self::new(model, vals, 0.5 * model.gripper.max_width)
            .expect("dimension matches by construction")
    }
}

/// Result of [`parse_urdf`]: the model plus non-fatal warnings about
/// ignored elements.
#[derive(Debug, Clone)]
pub struct UrdfParse {
    pub model: RobotModel,
    pub warnings: Vec<String>,
}

const KNOWN_LINK_CHILDREN: &[&str] = &["visual"];
const KNOWN_VISUAL_CHILDREN: &[&str] = &["origin", "geometry", "material"];
const KNOWN_JOINT_CHILDREN: &[&str] = &["origin", "parent", "child", "axis", "limit"];

/// Parses the URDF subset. Malformed XML and structural problems (unknown
/// joint types, missing links, a joint graph that is not a tree) are errors;
/// unsupported elements are recorded as warnings.
pub fn parse_urdf(text: &str) -> Result<UrdfParse> {
    let doc = roxmltree::Document::parse(text).map_err(|e| Error::Parse(e.to_string()))?;
    let root = doc.root_element();
    if root.tag_name().name() != "robot" {
        return Err(Error::Parse(format!(
            "expected <robot> root element, got <{}>",
            root.tag_name().name()
        )));
    }
    let name = root.attribute("name").unwrap_or("robot").to_string();

    let mut warnings = Vec::new();
    let mut links: Vec<Link> = Vec::new();
    let mut raw_joints: Vec<(String, JointType, String, String, RigidTransform, Vector3<f64>, [f64; 2])> =
        Vec::new();

    for node in root.children().filter(|n| n.is_element()) {
        match node.tag_name().name() {
            "link" => links.push(parse_link(&node, &mut warnings)?),
            "joint" => raw_joints.push(parse_joint(&node, &mut warnings)?),
            other => warnings.push(format!("ignored element <{other}>")),
        }
    }

    if links.is_empty() {
        return Err(Error::Parse("robot has no links".into()));
    }
    let link_idx: HashMap<&str, usize> = links
        .iter()
        .enumerate()
        .map(|(i, l)| (l.name.as_str(), i))
        .collect();
    if link_idx.len() != links.len() {
        return Err(Error::Parse("duplicate link names".into()));
    }

    let mut joints = Vec::new();
    for (jname, kind, parent, child, origin, axis, limits) in raw_joints {
        let parent_link = *link_idx
            .get(parent.as_str())
            .ok_or_else(|| Error::Parse(format!("joint `{jname}` parent `{parent}` not a link")))?;
        let child_link = *link_idx
            .get(child.as_str())
            .ok_or_else(|| Error::Parse(format!("joint `{jname}` child `{child}` not a link")))?;
        if kind != JointType::Fixed {
            if !limits.iter().all(|l| l.is_finite()) || limits[0] > limits[1] {
                return Err(Error::Parse(format!(
                    "joint `{jname}` needs finite limits with lower <= upper, got {limits:?}"
                )));
            }
        }
        joints.push(Joint {
            name: jname,
            kind,
            parent_link,
            child_link,
            origin,
            axis,
            limits,
        });
    }

    let base_link = find_base_and_check_tree(&links, &joints)?;
    let arm_chain = infer_arm_chain(&links, &joints, base_link);

    let model = RobotModel {
        name,
        links,
        joints,
        arm_chain,
        gripper: GripperModel::default(),
        mount_offset: RigidTransform::identity(),
        base_link,
    };
    Ok(UrdfParse { model, warnings })
}

fn parse_origin(node: &roxmltree::Node) -> Result<RigidTransform> {
    let xyz = parse_vec3_attr(node, "xyz", Vector3::zeros())?;
    let rpy = parse_vec3_attr(node, "rpy", Vector3::zeros())?;
    // URDF fixed-axis convention: R = Rz(yaw) Ry(pitch) Rx(roll).
    let rot = UnitQuaternion::from_euler_angles(rpy.x, rpy.y, rpy.z);
    Ok(RigidTransform::new(xyz, rot))
}

fn parse_vec3_attr(
    node: &roxmltree::Node,
    attr: &str,
    default: Vector3<f64>,
) -> Result<Vector3<f64>> {
    match node.attribute(attr) {
        None => Ok(default),
        Some(s) => {
            let v: Vec<f64> = s
                .split_whitespace()
                .map(|t| {
                    t.parse()
                        .map_err(|_| Error::Parse(format!("bad number `{t}` in {attr}")))
                })
                .collect::<Result<_>>()?;
            if v.len() != 3 {
                return Err(Error::Parse(format!(
                    "attribute {attr} needs 3 numbers, got {}",
                    v.len()
                )));
            }
            Ok(Vector3::new(v[0], v[1], v[2]))
        }
    }
}

fn req_attr_f64(node: &roxmltree::Node, attr: &str, ctx: &str) -> Result<f64> {
    node.attribute(attr)
        .ok_or_else(|| Error::Parse(format!("{ctx} missing attribute `{attr}`")))?
        .parse()
        .map_err(|_| Error::Parse(format!("{ctx} attribute `{attr}` not a number")))
}

fn parse_link(node: &roxmltree::Node, warnings: &mut Vec<String>) -> Result<Link> {
    let name = node
        .attribute("name")
        .ok_or_else(|| Error::Parse("link missing `name`".into()))?
        .to_string();
    let mut visuals = Vec::new();
    for child in node.children().filter(|n| n.is_element()) {
        match child.tag_name().name() {
            "visual" => visuals.push(parse_visual(&child, &name, warnings)?),
            other if !KNOWN_LINK_CHILDREN.contains(&other) => {
                warnings.push(format!("ignored element <{other}> in link `{name}`"))
            }
            _ => {}
        }
    }
    Ok(Link { name, visuals })
}

fn parse_visual(
    node: &roxmltree::Node,
    link: &str,
    warnings: &mut Vec<String>,
) -> Result<Visual> {
    let mut origin = RigidTransform::identity();
    let mut geometry = None;
    let mut color = DEFAULT_LINK_COLOR;
    for child in node.children().filter(|n| n.is_element()) {
        match child.tag_name().name() {
            "origin" => origin = parse_origin(&child)?,
            "geometry" => geometry = Some(parse_geometry(&child, link)?),
            "material" => {
                for m in child.children().filter(|n| n.is_element()) {
                    if m.tag_name().name() == "color" {
                        if let Some(rgba) = m.attribute("rgba") {
                            let v: Vec<f64> = rgba
                                .split_whitespace()
                                .filter_map(|t| t.parse().ok())
                                .collect();
                            if v.len() >= 3 {
                                color = [v[0], v[1], v[2]];
                            }
                        }
                    }
                }
            }
            other if !KNOWN_VISUAL_CHILDREN.contains(&other) => {
                warnings.push(format!("ignored element <{other}> in visual of `{link}`"))
            }
            _ => {}
        }
    }
    let geometry = geometry
        .ok_or_else(|| Error::Parse(format!("visual in link `{link}` missing <geometry>")))?;
    geometry.validate()?;
    Ok(Visual {
        origin,
        geometry,
        color,
    })
}

fn parse_geometry(node: &roxmltree::Node, link: &str) -> Result<GeometryPrimitive> {
    let shape = node
        .children()
        .find(|n| n.is_element())
        .ok_or_else(|| Error::Parse(format!("empty <geometry> in link `{link}`")))?;
    let ctx = format!("geometry in link `{link}`");
    match shape.tag_name().name() {
        "box" => {
            let size = parse_vec3_attr(&shape, "size", Vector3::zeros())?;
            Ok(GeometryPrimitive::Box {
                size: [size.x, size.y, size.z],
            })
        }
        "cylinder" => Ok(GeometryPrimitive::Cylinder {
            radius: req_attr_f64(&shape, "radius", &ctx)?,
            length: req_attr_f64(&shape, "length", &ctx)?,
        }),
        "sphere" => Ok(GeometryPrimitive::Sphere {
            radius: req_attr_f64(&shape, "radius", &ctx)?,
        }),
        "mesh" => Ok(GeometryPrimitive::Mesh {
            filename: shape
                .attribute("filename")
                .ok_or_else(|| Error::Parse(format!("{ctx}: mesh missing `filename`")))?
                .to_string(),
            vertices: Vec::new(),
        }),
        other => Err(Error::Parse(format!("{ctx}: unsupported shape <{other}>"))),
    }
}

fn parse_joint(
    node: &roxmltree::Node,
    warnings: &mut Vec<String>,
) -> Result<(String, JointType, String, String, RigidTransform, Vector3<f64>, [f64; 2])> {
    let name = node
        .attribute("name")
        .ok_or_else(|| Error::Parse("joint missing `name`".into()))?
        .to_string();
    let kind = match node.attribute("type") {
        Some("revolute") | Some("continuous") => JointType::Revolute,
        Some("prismatic") => JointType::Prismatic,
        Some("fixed") => JointType::Fixed,
        other => {
            return Err(Error::Parse(format!(
                "joint `{name}` has unsupported type {other:?}"
            )))
        }
    };
    let mut origin = RigidTransform::identity();
    let mut axis = Vector3::new(1.0, 0.0, 0.0);
    let mut parent = None;
    let mut child = None;
    let mut limits = [0.0, 0.0];
    let mut saw_limits = false;
    for c in node.children().filter(|n| n.is_element()) {
        match c.tag_name().name() {
            "origin" => origin = parse_origin(&c)?,
            "parent" => parent = c.attribute("link").map(str::to_string),
            "child" => child = c.attribute("link").map(str::to_string),
            "axis" => {
                axis = parse_vec3_attr(&c, "xyz", Vector3::new(1.0, 0.0, 0.0))?;
                let n = axis.norm();
                if n < 1e-9 {
                    return Err(Error::Parse(format!("joint `{name}` axis has zero norm")));
                }
                axis /= n;
            }
            "limit" => {
                limits = [
                    req_attr_f64(&c, "lower", &format!("joint `{name}` limit"))?,
                    req_attr_f64(&c, "upper", &format!("joint `{name}` limit"))?,
                ];
                saw_limits = true;
            }
            other if !KNOWN_JOINT_CHILDREN.contains(&other) => {
                warnings.push(format!("ignored element <{other}> in joint `{name}`"))
            }
            _ => {}
        }
    }
    if kind != JointType::Fixed && !saw_limits {
        return Err(Error::Parse(format!(
            "non-fixed joint `{name}` missing <limit>"
        )));
    }
    let parent =
        parent.ok_or_else(|| Error::Parse(format!("joint `{name}` missing <parent link=..>")))?;
    let child =
        child.ok_or_else(|| Error::Parse(format!("joint `{name}` missing <child link=..>")))?;
    Ok((name, kind, parent, child, origin, axis, limits))
}

/// The joint graph must be a tree: every link has at most one parent joint,
/// exactly one link has none (the base), and all links hang off the base.
fn find_base_and_check_tree(links: &[Link], joints: &[Joint]) -> Result<usize> {
    let mut parent_of: Vec<Option<usize>> = vec![None; links.len()];
    for (ji, j) in joints.iter().enumerate() {
        if let Some(prev) = parent_of[j.child_link] {
            return Err(Error::JointCycle(format!(
                "link `{}` is child of both `{}` and `{}`",
                links[j.child_link].name, joints[prev].name, j.name
            )));
        }
        parent_of[j.child_link] = Some(ji);
    }
    let roots: Vec<usize> = (0..links.len()).filter(|&l| parent_of[l].is_none()).collect();
    if roots.len() != 1 {
        return Err(Error::JointCycle(format!(
            "expected exactly one base link, found {} root(s)",
            roots.len()
        )));
    }
    let base = roots[0];
    // Reachability doubles as the cycle check: with one parent per link and a
    // single root, an unreachable link implies a cycle among the others.
    let mut seen = vec![false; links.len()];
    let mut stack = vec![base];
    while let Some(l) = stack.pop() {
        if seen[l] {
            return Err(Error::JointCycle(links[l].name.clone()));
        }
        seen[l] = true;
        for (_, j) in joints.iter().enumerate().filter(|(_, j)| j.parent_link == l) {
            stack.push(j.child_link);
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::JointCycle(format!(
            "link `{}` unreachable from base",
            links[missing].name
        )));
    }
    Ok(base)
}

/// Default arm chain: walk from the base while each link has exactly one
/// child joint; stop at a branch (e.g. where gripper fingers split off) or a
/// leaf. A sidecar config normally overrides this.
fn infer_arm_chain(links: &[Link], joints: &[Joint], base: usize) -> Vec<usize> {
    let mut chain = Vec::new();
    let mut link = base;
    loop {
        let children: Vec<usize> = joints
            .iter()
            .enumerate()
            .filter(|(_, j)| j.parent_link == link)
            .map(|(i, _)| i)
            .collect();
        if children.len() != 1 {
            break;
        }
        chain.push(children[0]);
        link = joints[children[0]].child_link;
        if chain.len() > links.len() {
            break; // tree check makes this unreachable; guard anyway
        }
    }
    chain
}

/// Prints the supported URDF subset; `parse_urdf(print_urdf(m))` round-trips
/// the chain, limits, and geometry semantically.
pub fn print_urdf(model: &RobotModel) -> String {
    let mut out = String::new();
    out.push_str(&format!("<robot name=\"{}\">\n", model.name));
    for link in &model.links {
        if link.visuals.is_empty() {
            out.push_str(&format!("  <link name=\"{}\"/>\n", link.name));
            continue;
        }
        out.push_str(&format!("  <link name=\"{}\">\n", link.name));
        for v in &link.visuals {
            out.push_str("    <visual>\n");
            out.push_str(&format!("      {}\n", origin_tag(&v.origin)));
            out.push_str("      <geometry>");
            match &v.geometry {
                GeometryPrimitive::Box { size } => out.push_str(&format!(
                    "<box size=\"{} {} {}\"/>",
                    size[0], size[1], size[2]
                )),
                GeometryPrimitive::Cylinder { radius, length } => out.push_str(&format!(
                    "<cylinder radius=\"{radius}\" length=\"{length}\"/>"
                )),
                GeometryPrimitive::Sphere { radius } => {
                    out.push_str(&format!("<sphere radius=\"{radius}\"/>"))
                }
                GeometryPrimitive::Mesh { filename, .. } => {
                    out.push_str(&format!("<mesh filename=\"{filename}\"/>"))
                }
            }
            out.push_str("</geometry>\n");
            out.push_str(&format!(
                "      <material name=\"\"><color rgba=\"{} {} {} 1\"/></material>\n",
                v.color[0], v.color[1], v.color[2]
            ));
            out.push_str("    </visual>\n");
        }
        out.push_str("  </link>\n");
    }
    for j in &model.joints {
        let ty = match j.kind {
            JointType::Revolute => "revolute",
            JointType::Prismatic => "prismatic",
            JointType::Fixed => "fixed",
        };
        out.push_str(&format!("  <joint name=\"{}\" type=\"{ty}\">\n", j.name));
        out.push_str(&format!("    {}\n", origin_tag(&j.origin)));
        out.push_str(&format!(
            "    <parent link=\"{}\"/>\n",
            model.links[j.parent_link].name
        ));
        out.push_str(&format!(
            "    <child link=\"{}\"/>\n",
            model.links[j.child_link].name
        ));
        out.push_str(&format!(
            "    <axis xyz=\"{} {} {}\"/>\n",
            j.axis.x, j.axis.y, j.axis.z
        ));
        if j.kind != JointType::Fixed {
            out.push_str(&format!(
                "    <limit lower=\"{}\" upper=\"{}\"/>\n",
                j.limits[0], j.limits[1]
            ));
        }
        out.push_str("  </joint>\n");
    }
    out.push_str("</robot>\n");
    out
}

fn origin_tag(t: &RigidTransform) -> String {
    let (r, p, y) = t.rotation.euler_angles();
    format!(
        "<origin xyz=\"{} {} {}\" rpy=\"{r} {p} {y}\"/>",
        t.translation.x, t.translation.y, t.translation.z
    )
}

/// Sidecar robot config: arm chain, gripper width mapping, mount offset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobotConfig {
    pub arm_chain: Vec<String>,
    /// Pose record `tx ty tz qw qx qy qz [w]`; tool-from-flange.
    #[serde(default)]
    pub mount_offset: Option<String>,
    #[serde(default)]
    pub max_width: f64,
    /// Directory for mesh files, relative to the config file.
    #[serde(default)]
    pub mesh_dir: Option<String>,
    #[serde(default)]
    pub gripper_joint: Vec<GripperJointConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GripperJointConfig {
    pub joint: String,
    pub slope: f64,
    pub intercept: f64,
}

impl RobotConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("robot config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("robot config serializes")
    }
}

/// Applies a sidecar config to a parsed model: named arm chain (validated as
/// a connected base-to-tip path), gripper mapping, and mount offset.
pub fn apply_robot_config(model: &mut RobotModel, cfg: &RobotConfig) -> Result<()> {
    if !cfg.arm_chain.is_empty() {
        let mut chain = Vec::with_capacity(cfg.arm_chain.len());
        for name in &cfg.arm_chain {
            let ji = model
                .joint_index(name)
                .ok_or_else(|| Error::Config(format!("arm_chain joint `{name}` not in URDF")))?;
            chain.push(ji);
        }
        for pair in chain.windows(2) {
            let (a, b) = (&model.joints[pair[0]], &model.joints[pair[1]]);
            if a.child_link != b.parent_link {
                return Err(Error::Config(format!(
                    "arm_chain joints `{}` and `{}` are not connected",
                    a.name, b.name
                )));
            }
        }
        if let Some(&first) = chain.first() {
            if model.joints[first].parent_link != model.base_link {
                return Err(Error::Config(format!(
                    "arm_chain must start at the base link `{}`",
                    model.links[model.base_link].name
                )));
            }
        }
        model.arm_chain = chain;
    }
    if let Some(rec) = &cfg.mount_offset {
        let (pose, _) = parse_pose_record(rec)?;
        model.mount_offset = pose;
    }
    let mut joints = Vec::with_capacity(cfg.gripper_joint.len());
    for g in &cfg.gripper_joint {
        let ji = model
            .joint_index(&g.joint)
            .ok_or_else(|| Error::Config(format!("gripper joint `{}` not in URDF", g.joint)))?;
        joints.push(GripperJoint {
            joint: ji,
            slope: g.slope,
            intercept: g.intercept,
        });
    }
    model.gripper = GripperModel {
        joints,
        max_width: cfg.max_width,
    };
    Ok(())
}

/// Parses an ASCII triangle list: one `x y z` vertex per line (blank lines
/// and `#` comments allowed), three consecutive vertices per triangle.
pub fn parse_mesh_ascii(text: &str) -> Result<Vec<Vector3<f64>>> {
    let mut verts = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let nums: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::Parse(format!("mesh line {}: bad number `{t}`", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        if nums.len() != 3 {
            return Err(Error::Parse(format!(
                "mesh line {}: expected 3 coordinates, got {}",
                lineno + 1,
                nums.len()
            )));
        }
        verts.push(Vector3::new(nums[0], nums[1], nums[2]));
    }
    if verts.is_empty() || verts.len() % 3 != 0 {
        return Err(Error::Parse(format!(
            "mesh must contain a positive multiple of 3 vertices, got {}",
            verts.len()
        )));
    }
    Ok(verts)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
<robot name="mini">
  <link name="base">
    <visual>
      <geometry><box size="0.1 0.1 0.1"/></geometry>
    </visual>
  </link>
  <link name="tip">
    <visual>
      <origin xyz="0 0 0.2" rpy="0 0 0"/>
      <geometry><cylinder radius="0.02" length="0.4"/></geometry>
      <material name="m"><color rgba="0.9 0.2 0.1 1"/></material>
    </visual>
  </link>
  <joint name="j1" type="revolute">
    <origin xyz="0 0 0.1"/>
    <parent link="base"/>
    <child link="tip"/>
    <axis xyz="0 0 1"/>
    <limit lower="-1.5" upper="1.5"/>
  </joint>
</robot>
"#;

    #[test]
    fn minimal_fixture_parses() {
        let parsed = parse_urdf(MINIMAL).unwrap();
        let m = &parsed.model;
        assert_eq!(m.links.len(), 2);
        assert_eq!(m.joints.len(), 1);
        assert_eq!(m.arm_chain, vec![0]);
        assert_eq!(m.joints[0].limits, [-1.5, 1.5]);
        assert_eq!(m.links[1].visuals[0].color, [0.9, 0.2, 0.1]);
        assert!(parsed.warnings.is_empty());
    }

    #[test]
    fn truncated_xml_is_parse_error() {
        let truncated = &MINIMAL[..MINIMAL.len() / 2];
        match parse_urdf(truncated) {
            Err(Error::Parse(_)) => {}
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn joint_cycle_is_detected() {
        let cyclic = r#"
<robot name="c">
  <link name="a"/><link name="b"/>
  <joint name="j1" type="fixed"><parent link="a"/><child link="b"/></joint>
  <joint name="j2" type="fixed"><parent link="b"/><child link="a"/></joint>
</robot>"#;
        match parse_urdf(cyclic) {
            Err(Error::JointCycle(_)) => {}
            other => panic!("expected cycle error, got {other:?}"),
        }
    }

    #[test]
    fn missing_limits_rejected() {
        let bad = r#"
<robot name="c">
  <link name="a"/><link name="b"/>
  <joint name="j1" type="revolute"><parent link="a"/><child link="b"/><axis xyz="0 0 1"/></joint>
</robot>"#;
        assert!(parse_urdf(bad).is_err());
    }

    #[test]
    fn unknown_elements_become_warnings() {
        let odd = r#"
<robot name="c">
  <link name="a">
    <inertial><mass value="1"/></inertial>
    <visual><geometry><sphere radius="0.1"/></geometry></visual>
  </link>
  <gazebo/>
</robot>"#;
        let parsed = parse_urdf(odd).unwrap();
        assert_eq!(parsed.warnings.len(), 2);
        assert!(parsed.warnings.iter().any(|w| w.contains("inertial")));
        assert!(parsed.warnings.iter().any(|w| w.contains("gazebo")));
    }

    #[test]
    fn nonpositive_geometry_rejected() {
        let bad = r#"
<robot name="c">
  <link name="a"><visual><geometry><sphere radius="0"/></geometry></visual></link>
</robot>"#;
        assert!(parse_urdf(bad).is_err());
    }

    #[test]
    fn print_parse_round_trip() {
        let parsed = parse_urdf(MINIMAL).unwrap();
        let printed = print_urdf(&parsed.model);
        let reparsed = parse_urdf(&printed).unwrap().model;
        assert_eq!(reparsed.links.len(), parsed.model.links.len());
        assert_eq!(reparsed.joints.len(), parsed.model.joints.len());
        for (a, b) in parsed.model.joints.iter().zip(&reparsed.joints) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.kind, b.kind);
            assert_eq!(a.limits, b.limits);
            assert!((a.origin.translation - b.origin.translation).norm() < 1e-12);
            assert!((a.axis - b.axis).norm() < 1e-12);
        }
        for (a, b) in parsed.model.links.iter().zip(&reparsed.links) {
            assert_eq!(a.name, b.name);
            for (va, vb) in a.visuals.iter().zip(&b.visuals) {
                match (&va.geometry, &vb.geometry) {
                    (GeometryPrimitive::Box { size: sa }, GeometryPrimitive::Box { size: sb }) => {
                        for (x, y) in sa.iter().zip(sb) {
                            assert!((x - y).abs() < 1e-12);
                        }
                    }
                    (ga, gb) => assert_eq!(ga, gb),
                }
            }
        }
    }

    #[test]
    fn mesh_ascii_parses_and_validates() {
        let good = "0 0 0\n1 0 0\n0 1 0\n";
        assert_eq!(parse_mesh_ascii(good).unwrap().len(), 3);
        assert!(parse_mesh_ascii("0 0 0\n1 0 0\n").is_err());
        assert!(parse_mesh_ascii("").is_err());
        assert!(parse_mesh_ascii("a b c\n1 0 0\n0 1 0\n").is_err());
    }

    #[test]
    fn joint_state_clamps_and_flags() {
        let model = parse_urdf(MINIMAL).unwrap().model;
        let js = JointState::new(&model, vec![2.0], 0.0).unwrap();
        assert!(js.clamped);
        assert_eq!(js.arm[0], 1.5);
        let js = JointState::new(&model, vec![0.5], 0.0).unwrap();
        assert!(!js.clamped);
        assert!(JointState::new(&model, vec![0.0, 0.0], 0.0).is_err());
    }
}
