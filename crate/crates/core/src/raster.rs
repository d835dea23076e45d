//! Deterministic software rasterizer producing RGB, depth, and per-link
//! segmentation buffers for posed robots and simple scene objects.
//!
//! Triangles are z-buffered with perspective-correct depth (1/z interpolated
//! in screen space), shaded flat Lambertian with an ambient term, and
//! primitives tessellate at a fixed resolution so identical inputs give
//! byte-identical buffers. No anti-aliasing: hard edges keep segmentation
//! masks exact.

use std::sync::Arc;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, RigidTransform};
use crate::kinematics::forward_kinematics;
use crate::urdf::{GeometryPrimitive, JointState, RobotModel};

/// One camera observation: RGB plus optional depth (meters, +inf empty) and
/// per-link/object segmentation labels (0 background).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet {
    pub width: u32,
    pub height: u32,
    /// Row-major, 3 bytes per pixel.
    pub rgb: Vec<u8>,
    pub depth: Option<Vec<f32>>,
    pub seg: Option<Vec<u8>>,
}

impl FrameSet {
    /// RGB-only frame filled with one color.
    pub fn new_rgb(width: u32, height: u32, fill: [u8; 3]) -> Self {
        let n = (width * height) as usize;
        let mut rgb = Vec::with_capacity(n * 3);
        for _ in 0..n {
            rgb.extend_from_slice(&fill);
        }
        Self {
            width,
            height,
            rgb,
            depth: None,
            seg: None,
        }
    }

    /// Frame with all three buffers: RGB at `background`, depth +inf, seg 0.
    pub fn new_full(width: u32, height: u32, background: [u8; 3]) -> Self {
        let n = (width * height) as usize;
        let mut f = Self::new_rgb(width, height, background);
        f.depth = Some(vec![f32::INFINITY; n]);
        f.seg = Some(vec![0; n]);
        f
    }

    #[inline]
    pub fn idx(&self, x: u32, y: u32) -> usize {
        (y * self.width + x) as usize
    }

    pub fn rgb_at(&self, x: u32, y: u32) -> [u8; 3] {
        let i = self.idx(x, y) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn set_rgb(&mut self, x: u32, y: u32, c: [u8; 3]) {
        let i = self.idx(x, y) * 3;
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    pub fn depth_at(&self, x: u32, y: u32) -> f32 {
        match &self.depth {
            Some(d) => d[self.idx(x, y)],
            None => f32::INFINITY,
        }
    }

    pub fn seg_at(&self, x: u32, y: u32) -> u8 {
        match &self.seg {
            Some(s) => s[self.idx(x, y)],
            None => 0,
        }
    }

    pub fn pixel_count(&self) -> usize {
        (self.width * self.height) as usize
    }

    /// Checks the buffer invariants: matching dimensions, non-background
    /// segmentation only where depth is finite, finite depths positive.
    pub fn validate(&self) -> Result<()> {
        let n = self.pixel_count();
        if self.rgb.len() != n * 3 {
            return Err(Error::DimensionMismatch {
                expected: n * 3,
                got: self.rgb.len(),
            });
        }
        if let Some(d) = &self.depth {
            if d.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: d.len(),
                });
            }
            if d.iter().any(|v| v.is_finite() && *v <= 0.0) {
                return Err(Error::InvalidDepth(0.0));
            }
        }
        if let Some(s) = &self.seg {
            if s.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: s.len(),
                });
            }
            if let Some(d) = &self.depth {
                if s.iter().zip(d).any(|(&id, &z)| id != 0 && !z.is_finite()) {
                    return Err(Error::InvalidScene(
                        "segmentation label with infinite depth".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SceneObject {
    /// Segmentation label; unique and nonzero within a scene.
    pub id: u8,
    pub geometry: GeometryPrimitive,
    pub pose: RigidTransform,
    /// Linear albedo, 0..1 per channel.
    pub albedo: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct SceneRobot {
    pub model: Arc<RobotModel>,
    pub state: JointState,
    pub base: RigidTransform,
    /// Links label as `seg_base + link_index`.
    pub seg_base: u8,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub robots: Vec<SceneRobot>,
    /// Direction light travels (will be normalized); surfaces facing against
    /// it are lit.
    pub light_dir: Vector3<f64>,
    /// Fraction of full brightness every surface receives regardless of the
    /// light direction, 0..1.
    pub ambient: f64,
    pub background: [u8; 3],
}

impl Scene {
    pub fn empty() -> Self {
        Self {
            objects: Vec::new(),
            robots: Vec::new(),
            light_dir: Vector3::new(-0.3, 0.25, -1.0),
            ambient: 0.45,
            background: [210, 210, 215],
        }
    }

    fn validate(&self) -> Result<()> {
        let mut ids: Vec<u8> = self.objects.iter().map(|o| o.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.objects.len() || ids.contains(&0) {
            return Err(Error::InvalidScene(
                "object ids must be unique and nonzero".into(),
            ));
        }
        if self.light_dir.norm() < 1e-9 {
            return Err(Error::InvalidScene("light direction has zero norm".into()));
        }
        if !(0.0..=1.0).contains(&self.ambient) {
            return Err(Error::InvalidScene("ambient must be in [0, 1]".into()));
        }
        Ok(())
    }
}

const SEGMENTS: usize = 32;
const RINGS: usize = 16;
const Z_NEAR: f64 = 1e-3;

/// World-space triangle carrying its shading inputs.
struct Tri {
    v: [Vector3<f64>; 3],
    albedo: [f64; 3],
    seg: u8,
}

fn tessellate(
    geom: &GeometryPrimitive,
    world: &RigidTransform,
    albedo: [f64; 3],
    seg: u8,
    out: &mut Vec<Tri>,
) -> Result<()> {
    let mut push = |a: Vector3<f64>, b: Vector3<f64>, c: Vector3<f64>| {
        out.push(Tri {
            v: [
                world.transform_point(&a),
                world.transform_point(&b),
                world.transform_point(&c),
            ],
            albedo,
            seg,
        });
    };
    match geom {
        GeometryPrimitive::Box { size } => {
            let h = [size[0] / 2.0, size[1] / 2.0, size[2] / 2.0];
            let corner = |i: usize| {
                Vector3::new(
                    if i & 1 == 0 { -h[0] } else { h[0] },
                    if i & 2 == 0 { -h[1] } else { h[1] },
                    if i & 4 == 0 { -h[2] } else { h[2] },
                )
            };
            // Faces as corner-index quads, consistent outward winding.
            const FACES: [[usize; 4]; 6] = [
                [0, 2, 6, 4], // -x
                [1, 5, 7, 3], // +x
                [0, 4, 5, 1], // -y
                [2, 3, 7, 6], // +y
                [0, 1, 3, 2], // -z
                [4, 6, 7, 5], // +z
            ];
            for f in FACES {
                let (a, b, c, d) = (corner(f[0]), corner(f[1]), corner(f[2]), corner(f[3]));
                push(a, b, c);
                push(a, c, d);
            }
        }
        GeometryPrimitive::Sphere { radius } => {
            let pt = |ring: usize, seg_i: usize| {
                let theta = std::f64::consts::PI * ring as f64 / RINGS as f64;
                let phi = std::f64::consts::TAU * seg_i as f64 / SEGMENTS as f64;
                Vector3::new(
                    radius * theta.sin() * phi.cos(),
                    radius * theta.sin() * phi.sin(),
                    radius * theta.cos(),
                )
            };
            for ring in 0..RINGS {
                for s in 0..SEGMENTS {
                    let s1 = (s + 1) % SEGMENTS;
                    let (a, b, c, d) = (
                        pt(ring, s),
                        pt(ring + 1, s),
                        pt(ring + 1, s1),
                        pt(ring, s1),
                    );
                    if ring > 0 {
                        push(a, b, d);
                    }
                    if ring + 1 < RINGS {
                        push(b, c, d);
                    } else {
                        // Bottom cap: b == c == pole
                        push(a, b, d);
                    }
                }
            }
        }
        GeometryPrimitive::Cylinder { radius, length } => {
            let half = length / 2.0;
            let rim = |seg_i: usize, z: f64| {
                let phi = std::f64::consts::TAU * seg_i as f64 / SEGMENTS as f64;
                Vector3::new(radius * phi.cos(), radius * phi.sin(), z)
            };
            let top_c = Vector3::new(0.0, 0.0, half);
            let bot_c = Vector3::new(0.0, 0.0, -half);
            for s in 0..SEGMENTS {
                let s1 = (s + 1) % SEGMENTS;
                let (bt, bt1) = (rim(s, -half), rim(s1, -half));
                let (tp, tp1) = (rim(s, half), rim(s1, half));
                push(bt, bt1, tp1);
                push(bt, tp1, tp);
                push(top_c, tp, tp1);
                push(bot_c, bt1, bt);
            }
        }
        GeometryPrimitive::Mesh { filename, vertices } => {
            if vertices.is_empty() {
                return Err(Error::Config(format!(
                    "mesh `{filename}` not resolved before rendering"
                )));
            }
            for tri in vertices.chunks_exact(3) {
                push(tri[0], tri[1], tri[2]);
            }
        }
    }
    Ok(())
}

fn collect_robot_tris(robot: &SceneRobot, out: &mut Vec<Tri>) -> Result<()> {
    let fk = forward_kinematics(&robot.model, &robot.state)?;
    for (li, link) in robot.model.links.iter().enumerate() {
        let link_world = robot.base.compose(&fk.link_poses[li]);
        let seg = robot.seg_base.saturating_add(li as u8);
        for vis in &link.visuals {
            let world = link_world.compose(&vis.origin);
            tessellate(&vis.geometry, &world, vis.color, seg, out)?;
        }
    }
    Ok(())
}

/// Sutherland-Hodgman clip of a triangle against the z >= Z_NEAR plane in
/// camera space; yields 0-2 triangles.
fn clip_near(v: [Vector3<f64>; 3]) -> Vec<[Vector3<f64>; 3]> {
    let inside = |p: &Vector3<f64>| p.z >= Z_NEAR;
    if v.iter().all(inside) {
        return vec![v];
    }
    let mut poly: Vec<Vector3<f64>> = Vec::with_capacity(4);
    for i in 0..3 {
        let (a, b) = (v[i], v[(i + 1) % 3]);
        let (ia, ib) = (inside(&a), inside(&b));
        if ia {
            poly.push(a);
        }
        if ia != ib {
            let t = (Z_NEAR - a.z) / (b.z - a.z);
            poly.push(a + (b - a) * t);
        }
    }
    match poly.len() {
        3 => vec![[poly[0], poly[1], poly[2]]],
        4 => vec![[poly[0], poly[1], poly[2]], [poly[0], poly[2], poly[3]]],
        _ => Vec::new(),
    }
}

struct Buffers<'a> {
    frame: &'a mut FrameSet,
}

fn rasterize_tris(tris: &[Tri], cam: &CameraModel, scene: &Scene, frame: &mut FrameSet) {
    let cam_from_world = cam.camera_from_world();
    let cam_pos = cam.world_from_camera.translation;
    let light = scene.light_dir.normalize();
    let (w, h) = (frame.width as i64, frame.height as i64);
    let mut bufs = Buffers { frame };

    for tri in tris {
        // Flat shading from the world-space face normal, oriented toward
        // the camera so thin/open meshes light from both sides.
        let e1 = tri.v[1] - tri.v[0];
        let e2 = tri.v[2] - tri.v[0];
        let mut normal = e1.cross(&e2);
        let nn = normal.norm();
        if nn < 1e-15 {
            continue; // degenerate triangle
        }
        normal /= nn;
        let centroid = (tri.v[0] + tri.v[1] + tri.v[2]) / 3.0;
        if normal.dot(&(centroid - cam_pos)) > 0.0 {
            normal = -normal;
        }
        let diffuse = normal.dot(&-light).max(0.0);
        let intensity = scene.ambient + (1.0 - scene.ambient) * diffuse;
        let shade = |a: f64| ((a * intensity * 255.0).round()).clamp(0.0, 255.0) as u8;
        let color = [shade(tri.albedo[0]), shade(tri.albedo[1]), shade(tri.albedo[2])];

        let cam_space = [
            cam_from_world.transform_point(&tri.v[0]),
            cam_from_world.transform_point(&tri.v[1]),
            cam_from_world.transform_point(&tri.v[2]),
        ];
        for clipped in clip_near(cam_space) {
            raster_one(&clipped, cam, color, tri.seg, w, h, &mut bufs);
        }
    }
}

fn raster_one(
    v: &[Vector3<f64>; 3],
    cam: &CameraModel,
    color: [u8; 3],
    seg: u8,
    w: i64,
    h: i64,
    bufs: &mut Buffers,
) {
    // Screen positions; pixel centers sit at integer coordinates.
    let mut p = [[0.0f64; 2]; 3];
    let mut inv_z = [0.0f64; 3];
    for i in 0..3 {
        p[i][0] = cam.fx * v[i].x / v[i].z + cam.cx;
        p[i][1] = cam.fy * v[i].y / v[i].z + cam.cy;
        inv_z[i] = 1.0 / v[i].z;
    }
    let area = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[1][1] - p[0][1]) * (p[2][0] - p[0][0]);
    if area.abs() < 1e-12 {
        return;
    }
    // Normalize winding so edge functions are nonnegative inside.
    let (i1, i2) = if area > 0.0 { (1, 2) } else { (2, 1) };
    let (p0, p1, p2) = (p[0], p[i1], p[i2]);
    let (z0, z1, z2) = (inv_z[0], inv_z[i1], inv_z[i2]);
    let area = area.abs();

    let min_x = p0[0].min(p1[0]).min(p2[0]).ceil().max(0.0) as i64;
    let max_x = (p0[0].max(p1[0]).max(p2[0]).floor() as i64).min(w - 1);
    let min_y = p0[1].min(p1[1]).min(p2[1]).ceil().max(0.0) as i64;
    let max_y = (p0[1].max(p1[1]).max(p2[1]).floor() as i64).min(h - 1);
    if min_x > max_x || min_y > max_y {
        return;
    }

    let edge = |a: [f64; 2], b: [f64; 2], x: f64, y: f64| {
        (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0])
    };
    for py in min_y..=max_y {
        for px in min_x..=max_x {
            let (x, y) = (px as f64, py as f64);
            let w0 = edge(p1, p2, x, y);
            let w1 = edge(p2, p0, x, y);
            let w2 = edge(p0, p1, x, y);
            if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                continue;
            }
            let zi = (w0 * z0 + w1 * z1 + w2 * z2) / area;
            if zi <= 0.0 {
                continue;
            }
            let depth = (1.0 / zi) as f32;
            let idx = (py * w + px) as usize;
            let dbuf = bufs.frame.depth.as_mut().expect("render allocates depth");
            if depth < dbuf[idx] {
                dbuf[idx] = depth;
                bufs.frame.seg.as_mut().expect("render allocates seg")[idx] = seg;
                let ri = idx * 3;
                bufs.frame.rgb[ri..ri + 3].copy_from_slice(&color);
            }
        }
    }
}

/// Renders the full scene: z-buffered triangles, Lambertian shading with an
/// ambient term, per-link/object segmentation. Deterministic: identical
/// inputs give bit-identical buffers.
pub fn render(scene: &Scene, cam: &CameraModel) -> Result<FrameSet> {
    scene.validate()?;
    cam.validate()?;
    let mut tris = Vec::new();
    for obj in &scene.objects {
        tessellate(&obj.geometry, &obj.pose, obj.albedo, obj.id, &mut tris)?;
    }
    for robot in &scene.robots {
        collect_robot_tris(robot, &mut tris)?;
    }
    let mut frame = FrameSet::new_full(cam.width, cam.height, scene.background);
    rasterize_tris(&tris, cam, scene, &mut frame);
    Ok(frame)
}

/// Renders only a robot, background transparent: seg is nonzero exactly
/// where robot pixels exist (labels `1 + link_index`), rgb black elsewhere.
pub fn render_robot_layer(
    model: &Arc<RobotModel>,
    state: &JointState,
    base: &RigidTransform,
    cam: &CameraModel,
) -> Result<FrameSet> {
    let scene = Scene {
        objects: Vec::new(),
        robots: vec![SceneRobot {
            model: Arc::clone(model),
            state: state.clone(),
            base: *base,
            seg_base: 1,
        }],
        background: [0, 0, 0],
        ..Scene::empty()
    };
    render(&scene, cam)
}
