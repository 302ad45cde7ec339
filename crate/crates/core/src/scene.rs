//! Analytic multi-agent scenes.
//!
//! A [`Scene`] is a set of constant-density solids (some of them moving along
//! piecewise-linear trajectories) observed by agents carrying camera rigs.
//! Everything here is closed-form, so the scene doubles as the ground-truth
//! oracle for densities, colors, masks and flows.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{FlowGrid, Image, MaskGrid};

pub type Vec3 = Vector3<f64>;

pub fn vec3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn center(&self) -> Vec3 {
        (vec3(self.min) + vec3(self.max)) * 0.5
    }

    pub fn half_extents(&self) -> Vec3 {
        (vec3(self.max) - vec3(self.min)) * 0.5
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn contains_box(&self, lo: &Vec3, hi: &Vec3) -> bool {
        (0..3).all(|a| lo[a] >= self.min[a] - 1e-9 && hi[a] <= self.max[a] + 1e-9)
    }

    /// Parametric interval `[t0, t1]` where the ray is inside the box.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        slab_interval(origin, dir, &vec3(self.min), &vec3(self.max))
    }
}

fn slab_interval(origin: &Vec3, dir: &Vec3, lo: &Vec3, hi: &Vec3) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut ta, mut tb) = ((lo[a] - origin[a]) * inv, (hi[a] - origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 <= t1).then_some((t0, t1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Shape {
    /// Axis-aligned box centred on the primitive position.
    Box {
        half_extents: [f64; 3],
    },
    Sphere {
        radius: f64,
    },
    /// Solid half-space below the primitive's z coordinate.
    GroundPlane,
}

impl Shape {
    fn contains(&self, center: &Vec3, x: &Vec3) -> bool {
        match self {
            Shape::Box { half_extents } => (0..3).all(|a| (x[a] - center[a]).abs() <= half_extents[a]),
            Shape::Sphere { radius } => (x - center).norm_squared() <= radius * radius,
            Shape::GroundPlane => x.z <= center.z,
        }
    }

    /// Interval of the ray inside the solid, if any.
    fn interval(&self, center: &Vec3, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        match self {
            Shape::Box { half_extents } => {
                let h = vec3(*half_extents);
                slab_interval(origin, dir, &(center - h), &(center + h))
            }
            Shape::Sphere { radius } => {
                let oc = origin - center;
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                Some((-b - s, -b + s))
            }
            Shape::GroundPlane => {
                let h = center.z;
                if dir.z.abs() < 1e-15 {
                    return (origin.z <= h).then_some((f64::NEG_INFINITY, f64::INFINITY));
                }
                let t = (h - origin.z) / dir.z;
                if dir.z < 0.0 {
                    Some((t, f64::INFINITY))
                } else {
                    Some((f64::NEG_INFINITY, t))
                }
            }
        }
    }

    fn bounds(&self, center: &Vec3) -> Option<(Vec3, Vec3)> {
        match self {
            Shape::Box { half_extents } => {
                let h = vec3(*half_extents);
                Some((center - h, center + h))
            }
            Shape::Sphere { radius } => {
                let h = Vec3::repeat(*radius);
                Some((center - h, center + h))
            }
            Shape::GroundPlane => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticPrimitive {
    pub shape: Shape,
    pub center: [f64; 3],
    pub density: f64,
    pub albedo: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicPrimitive {
    pub shape: Shape,
    pub density: f64,
    pub albedo: [f64; 3],
    /// Centre position at each scene timestamp, in timestamp order.
    pub trajectory: Vec<[f64; 3]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentPose {
    pub position: [f64; 3],
    pub yaw_deg: f64,
}

/// A camera mounted on an agent. Angles are relative to the agent heading;
/// positive pitch tilts the camera down.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub id: String,
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub offset: [f64; 3],
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub id: String,
    /// One pose per scene timestamp.
    pub poses: Vec<AgentPose>,
    pub cameras: Vec<CameraRig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub name: String,
    pub bounds: Aabb,
    pub background: [f64; 3],
    pub timestamps: Vec<i64>,
    #[serde(default)]
    pub static_primitives: Vec<StaticPrimitive>,
    #[serde(default)]
    pub dynamic_primitives: Vec<DynamicPrimitive>,
    #[serde(default)]
    pub agents: Vec<Agent>,
}

/// Identifies one image: a camera of an agent at a timestamp.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ViewId {
    pub agent: String,
    pub camera: String,
    pub t: i64,
}

impl ViewId {
    pub fn new(agent: impl Into<String>, camera: impl Into<String>, t: i64) -> Self {
        Self {
            agent: agent.into(),
            camera: camera.into(),
            t,
        }
    }

    /// File-name friendly identifier.
    pub fn stem(&self) -> String {
        format!("{}_{}_t{}", self.agent, self.camera, self.t)
    }
}

impl std::fmt::Display for ViewId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}@{}", self.agent, self.camera, self.t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Pinhole camera. `rotation` maps camera axes (x right, y down, z forward)
/// to world axes; `translation` is the camera centre in world coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub id: String,
    pub agent_id: String,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::input(format!("camera {}: rotation is not a proper rotation", self.id)));
        }
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(Error::input(format!("camera {}: focal lengths must be positive", self.id)));
        }
        if !(k.cx >= 0.0 && k.cx <= self.width as f64 && k.cy >= 0.0 && k.cy <= self.height as f64) {
            return Err(Error::input(format!("camera {}: principal point outside the image", self.id)));
        }
        Ok(())
    }

    /// World point to camera coordinates.
    pub fn to_camera(&self, x: &Vec3) -> Vec3 {
        self.rotation.transpose() * (x - self.translation)
    }

    /// Continuous pixel coordinates `(u, v)`; pixel `(row, col)` covers
    /// `[col, col+1) x [row, row+1)`.
    pub fn project(&self, x: &Vec3) -> Result<[f64; 2]> {
        let pc = self.to_camera(x);
        if pc.z <= 1e-9 {
            return Err(Error::input(format!("point {:?} is behind camera {}", x.as_slice(), self.id)));
        }
        let k = &self.intrinsics;
        Ok([k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy])
    }

    /// Projection together with its 2x3 Jacobian with respect to the world point.
    pub fn project_with_jacobian(&self, x: &Vec3) -> Result<([f64; 2], [[f64; 3]; 2])> {
        let uv = self.project(x)?;
        let pc = self.to_camera(x);
        let k = &self.intrinsics;
        let iz = 1.0 / pc.z;
        // d(u,v)/d(pc)
        let du = Vec3::new(k.fx * iz, 0.0, -k.fx * pc.x * iz * iz);
        let dv = Vec3::new(0.0, k.fy * iz, -k.fy * pc.y * iz * iz);
        // pc = R^T (x - t), so d/dx = (d/dpc) R^T  ->  row vector (R du)^T
        let ju = self.rotation * du;
        let jv = self.rotation * dv;
        Ok((uv, [[ju.x, ju.y, ju.z], [jv.x, jv.y, jv.z]]))
    }

    pub fn optical_axis(&self) -> Vec3 {
        self.rotation.column(2).into_owned()
    }

    /// Unit viewing direction through the centre of pixel `(row, col)`.
    pub fn pixel_direction(&self, row: usize, col: usize) -> Vec3 {
        let k = &self.intrinsics;
        let dc = Vec3::new((col as f64 + 0.5 - k.cx) / k.fx, (row as f64 + 0.5 - k.cy) / k.fy, 1.0);
        (self.rotation * dc).normalize()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
    pub pixel: (usize, usize),
    pub camera_id: String,
    pub time: i64,
}

impl Ray {
    pub fn at(&self, u: f64) -> Vec3 {
        self.origin + self.direction * u
    }
}

/// Fractional padding applied to the bounds interval of every generated ray.
pub const RANGE_PADDING: f64 = 0.05;

/// Near/far range of a ray against the scene bounds, padded by 5%.
pub fn ray_range(bounds: &Aabb, origin: &Vec3, dir: &Vec3) -> (f64, f64) {
    match bounds.intersect(origin, dir) {
        Some((t0, t1)) if t1 > 0.0 => {
            let t0 = t0.max(0.0);
            let pad = RANGE_PADDING * (t1 - t0);
            ((t0 - pad).max(0.0), t1 + pad)
        }
        _ => (0.0, 1e-6),
    }
}

/// One ray per requested `(row, col)` pixel.
pub fn generate_rays(camera: &Camera, pixels: &[(usize, usize)], bounds: &Aabb, time: i64) -> Result<Vec<Ray>> {
    camera.validate()?;
    pixels
        .iter()
        .map(|&(row, col)| {
            if row >= camera.height || col >= camera.width {
                return Err(Error::input(format!(
                    "pixel ({row}, {col}) outside {}x{} image",
                    camera.width, camera.height
                )));
            }
            let direction = camera.pixel_direction(row, col);
            let (near, far) = ray_range(bounds, &camera.translation, &direction);
            Ok(Ray {
                origin: camera.translation,
                direction,
                near,
                far,
                pixel: (row, col),
                camera_id: camera.id.clone(),
                time,
            })
        })
        .collect()
}

/// Every pixel of the camera in row-major order.
pub fn all_pixels(camera: &Camera) -> Vec<(usize, usize)> {
    (0..camera.height).flat_map(|r| (0..camera.width).map(move |c| (r, c))).collect()
}

/// Result of [`query_scene`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScenePoint {
    pub density: f64,
    pub color: [f64; 3],
    pub is_dynamic: bool,
    pub flow_fw: Vec3,
    pub flow_bw: Vec3,
}

fn rot_z(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn rot_y(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

impl Scene {
    pub fn time_index(&self, t: i64) -> Result<usize> {
        self.timestamps
            .iter()
            .position(|&x| x == t)
            .ok_or_else(|| Error::input(format!("timestamp {t} is not part of the scene")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.timestamps.is_empty() {
            return Err(Error::input("scene has no timestamps"));
        }
        if self.timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::input("timestamps must be strictly increasing"));
        }
        let n_t = self.timestamps.len();
        for (i, p) in self.static_primitives.iter().enumerate() {
            if !(p.density >= 0.0) {
                return Err(Error::input(format!("static primitive {i}: negative density")));
            }
            if let Some((lo, hi)) = p.shape.bounds(&vec3(p.center)) {
                if !self.bounds.contains_box(&lo, &hi) {
                    return Err(Error::input(format!("static primitive {i} leaves the scene bounds")));
                }
            }
        }
        for (i, p) in self.dynamic_primitives.iter().enumerate() {
            if !(p.density >= 0.0) {
                return Err(Error::input(format!("dynamic primitive {i}: negative density")));
            }
            if p.trajectory.len() != n_t {
                return Err(Error::input(format!(
                    "dynamic primitive {i}: trajectory has {} positions for {n_t} timestamps",
                    p.trajectory.len()
                )));
            }
            for c in &p.trajectory {
                if let Some((lo, hi)) = p.shape.bounds(&vec3(*c)) {
                    if !self.bounds.contains_box(&lo, &hi) {
                        return Err(Error::input(format!("dynamic primitive {i} leaves the scene bounds")));
                    }
                }
            }
        }
        for a in &self.agents {
            if a.poses.len() != n_t {
                return Err(Error::input(format!(
                    "agent {}: {} poses for {n_t} timestamps",
                    a.id,
                    a.poses.len()
                )));
            }
        }
        Ok(())
    }

    /// Concrete camera for rig `camera` of agent `agent` at timestamp `t`.
    pub fn camera(&self, agent: &str, camera: &str, t: i64) -> Result<Camera> {
        let ti = self.time_index(t)?;
        let a = self
            .agents
            .iter()
            .find(|a| a.id == agent)
            .ok_or_else(|| Error::input(format!("unknown agent {agent}")))?;
        let rig = a
            .cameras
            .iter()
            .find(|c| c.id == camera)
            .ok_or_else(|| Error::input(format!("unknown camera {camera} on agent {agent}")))?;
        let pose = a.poses[ti];
        // Columns: camera x (right), y (down), z (forward) in the agent body frame.
        let body_from_cam = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
        let rotation = rot_z(pose.yaw_deg + rig.yaw_deg) * rot_y(rig.pitch_deg) * body_from_cam;
        let translation = vec3(pose.position) + rot_z(pose.yaw_deg) * vec3(rig.offset);
        Ok(Camera {
            id: format!("{}/{}", a.id, rig.id),
            agent_id: a.id.clone(),
            rotation,
            translation,
            intrinsics: Intrinsics {
                fx: rig.focal,
                fy: rig.focal,
                cx: rig.width as f64 / 2.0,
                cy: rig.height as f64 / 2.0,
            },
            width: rig.width,
            height: rig.height,
        })
    }

    /// All view ids at timestamp `t`, agent-major.
    pub fn views_at(&self, t: i64) -> Vec<ViewId> {
        self.agents
            .iter()
            .flat_map(|a| a.cameras.iter().map(move |c| ViewId::new(&a.id, &c.id, t)))
            .collect()
    }

    pub fn all_views(&self) -> Vec<ViewId> {
        self.timestamps.iter().flat_map(|&t| self.views_at(t)).collect()
    }

    pub fn view_camera(&self, v: &ViewId) -> Result<Camera> {
        self.camera(&v.agent, &v.camera, v.t)
    }

    fn dynamic_displacements(&self, ti: usize, p: &DynamicPrimitive) -> (Vec3, Vec3) {
        let here = vec3(p.trajectory[ti]);
        let fw = p.trajectory.get(ti + 1).map(|n| vec3(*n) - here).unwrap_or_else(Vec3::zeros);
        let bw = if ti > 0 { vec3(p.trajectory[ti - 1]) - here } else { Vec3::zeros() };
        (fw, bw)
    }

    /// Number of primitives, static first, in tie-breaking order.
    pub fn primitive_count(&self) -> usize {
        self.static_primitives.len() + self.dynamic_primitives.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let scene: Scene = toml::from_str(&text).map_err(|e| Error::corrupt(path, format!("invalid scene document: {e}")))?;
        scene.validate()?;
        Ok(scene)
    }
}

/// Analytic density, color and motion at `x` and timestamp `t`.
///
/// Overlapping solids add their densities and mix albedos by density; flow is
/// taken from the lowest-index dynamic primitive containing `x`.
pub fn query_scene(scene: &Scene, x: &Vec3, t: i64) -> Result<ScenePoint> {
    let ti = scene.time_index(t)?;
    Ok(query_at_index(scene, x, ti))
}

pub(crate) fn query_at_index(scene: &Scene, x: &Vec3, ti: usize) -> ScenePoint {
    query_primitives(scene, x, Some(ti))
}

/// Density and color of the static primitives alone.
pub fn query_static(scene: &Scene, x: &Vec3) -> ScenePoint {
    query_primitives(scene, x, None)
}

fn query_primitives(scene: &Scene, x: &Vec3, ti: Option<usize>) -> ScenePoint {
    let mut density = 0.0;
    let mut weighted = [0.0; 3];
    let mut out = ScenePoint {
        density: 0.0,
        color: scene.background,
        is_dynamic: false,
        flow_fw: Vec3::zeros(),
        flow_bw: Vec3::zeros(),
    };
    let mut add = |d: f64, albedo: &[f64; 3]| {
        density += d;
        for c in 0..3 {
            weighted[c] += d * albedo[c];
        }
    };
    for p in &scene.static_primitives {
        if p.shape.contains(&vec3(p.center), x) {
            add(p.density, &p.albedo);
        }
    }
    for p in &scene.dynamic_primitives {
        let Some(ti) = ti else { break };
        if p.shape.contains(&vec3(p.trajectory[ti]), x) {
            add(p.density, &p.albedo);
            if !out.is_dynamic {
                out.is_dynamic = true;
                let (fw, bw) = scene.dynamic_displacements(ti, p);
                out.flow_fw = fw;
                out.flow_bw = bw;
            }
        }
    }
    if density > 0.0 {
        out.density = density;
        out.color = weighted.map(|w| w / density);
    }
    out
}

/// Brute-force emission-absorption integral along `ray` with `steps` uniform
/// midpoint samples; the background is an emitter at infinity.
pub fn oracle_render(scene: &Scene, ray: &Ray, t: i64, steps: usize) -> Result<[f64; 3]> {
    if steps == 0 {
        return Err(Error::input("oracle_render needs at least one step"));
    }
    let ti = scene.time_index(t)?;
    Ok(oracle_render_at(scene, ray, ti, steps))
}

pub(crate) fn oracle_render_at(scene: &Scene, ray: &Ray, ti: usize, steps: usize) -> [f64; 3] {
    let delta = (ray.far - ray.near) / steps as f64;
    let mut trans = 1.0;
    let mut color = [0.0; 3];
    for k in 0..steps {
        let u = ray.near + (k as f64 + 0.5) * delta;
        let q = query_at_index(scene, &ray.at(u), ti);
        if q.density > 0.0 {
            let alpha = 1.0 - (-q.density * delta).exp();
            for c in 0..3 {
                color[c] += trans * alpha * q.color[c];
            }
            trans *= 1.0 - alpha;
        }
    }
    for c in 0..3 {
        color[c] += trans * scene.background[c];
    }
    color
}

/// Nearest primitive entered by the ray within `[near, far]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub distance: f64,
    /// Index into the combined static-then-dynamic primitive list.
    pub primitive: usize,
    pub is_dynamic: bool,
}

pub fn first_hit(scene: &Scene, ray: &Ray, ti: usize) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut consider = |interval: Option<(f64, f64)>, primitive: usize, is_dynamic: bool| {
        let Some((t0, t1)) = interval else { return };
        if t1 < ray.near || t0 > ray.far {
            return;
        }
        let distance = t0.max(ray.near);
        // Strict comparison keeps the lower index on ties.
        if best.map_or(true, |b| distance < b.distance) {
            best = Some(Hit {
                distance,
                primitive,
                is_dynamic,
            });
        }
    };
    for (i, p) in scene.static_primitives.iter().enumerate() {
        if p.density > 0.0 {
            consider(p.shape.interval(&vec3(p.center), &ray.origin, &ray.direction), i, false);
        }
    }
    let offset = scene.static_primitives.len();
    for (j, p) in scene.dynamic_primitives.iter().enumerate() {
        if p.density > 0.0 {
            consider(
                p.shape.interval(&vec3(p.trajectory[ti]), &ray.origin, &ray.direction),
                offset + j,
                true,
            );
        }
    }
    best
}

/// Ground-truth image, foreground mask and 2D flows of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewLabels {
    pub image: Image,
    pub mask: MaskGrid,
    pub flow_fw: FlowGrid,
    pub flow_bw: FlowGrid,
}

/// Default quadrature resolution for ground-truth images.
pub const LABEL_STEPS: usize = 512;

/// Renders image, mask and flows of `camera` at `t` from the analytic scene.
///
/// Flows are the displacement of the first-hit surface point projected through
/// the same camera pose, so they carry object motion only.
pub fn render_labels(scene: &Scene, camera: &Camera, t: i64, steps: usize) -> Result<ViewLabels> {
    let ti = scene.time_index(t)?;
    let rays = generate_rays(camera, &all_pixels(camera), &scene.bounds, t)?;
    let (w, h) = (camera.width, camera.height);
    let mut image = Image::new(w, h);
    let mut mask = MaskGrid::new(w, h);
    let mut flow_fw = FlowGrid::new(w, h);
    let mut flow_bw = FlowGrid::new(w, h);
    let n_static = scene.static_primitives.len();
    for (i, ray) in rays.iter().enumerate() {
        image.data[i] = oracle_render_at(scene, ray, ti, steps);
        let Some(hit) = first_hit(scene, ray, ti) else { continue };
        if !hit.is_dynamic {
            continue;
        }
        mask.data[i] = 1;
        let prim = &scene.dynamic_primitives[hit.primitive - n_static];
        let (fw, bw) = scene.dynamic_displacements(ti, prim);
        let p = ray.at(hit.distance);
        let base = camera.project(&p)?;
        let shift = |disp: Vec3| -> [f64; 2] {
            match camera.project(&(p + disp)) {
                Ok(q) => [q[0] - base[0], q[1] - base[1]],
                Err(_) => [0.0, 0.0],
            }
        };
        flow_fw.data[i] = shift(fw);
        flow_bw.data[i] = shift(bw);
    }
    Ok(ViewLabels {
        image,
        mask,
        flow_fw,
        flow_bw,
    })
}
