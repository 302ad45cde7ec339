//! Two-phase optimization of the static and dynamic fields.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bev::{lift, toy_encode, toy_encode_static, BevConfig, BevVolume};
use crate::error::{Error, Result};
use crate::fields::{col, Field, FieldConfig, FieldGrad, FieldTape, SceneFrame};
use crate::losses::{loss_cycle, loss_optical, loss_smooth, loss_total, LossComponents, LossWeights};
use crate::raster::Image;
use crate::render::{
    composite_full_channels, composite_full_channels_grad, composite_static_channels, composite_static_channels_grad, quadrature_into,
    FullSamples, DEFAULT_CHUNK,
};
use crate::scene::{all_pixels, generate_rays, render_labels, Aabb, Camera, Ray, Scene, Vec3, ViewId, ViewLabels, LABEL_STEPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Cosine,
    Exponential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub schedule: Schedule,
    /// Per-step decay factor of the exponential schedule.
    pub gamma: f64,
    pub static_steps: u64,
    pub dynamic_steps: u64,
    pub rays_per_batch: usize,
    pub samples_per_ray: usize,
    pub stratified: bool,
    /// Share of dynamic-phase rays drawn from pixels covered by moving objects.
    pub dynamic_ray_fraction: f64,
    pub weights: LossWeights,
    /// Global gradient norm cap; none by default.
    pub grad_clip: Option<f64>,
    pub chunk: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 5e-4,
            schedule: Schedule::Cosine,
            gamma: 0.999,
            static_steps: 2000,
            dynamic_steps: 2000,
            rays_per_batch: 1024,
            samples_per_ray: 64,
            stratified: true,
            dynamic_ray_fraction: 0.5,
            weights: LossWeights::default(),
            grad_clip: None,
            chunk: DEFAULT_CHUNK,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0) || !self.lr_init.is_finite() {
            return Err(Error::Config(format!("lr_init must be positive, got {}", self.lr_init)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.rays_per_batch == 0 || self.samples_per_ray == 0 || self.chunk == 0 {
            return Err(Error::Config("rays_per_batch, samples_per_ray and chunk must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.dynamic_ray_fraction) {
            return Err(Error::Config("dynamic_ray_fraction must lie in [0, 1]".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        self.weights.validate()
    }
}

/// Learning rate at `step` of a phase lasting `steps` steps.
pub fn lr_at(config: &TrainConfig, step: u64, steps: u64) -> f64 {
    match config.schedule {
        Schedule::Cosine if steps == 0 => config.lr_init,
        Schedule::Cosine => {
            let s = step.min(steps) as f64 / steps as f64;
            config.lr_init * (1.0 + (PI * s).cos()) / 2.0
        }
        Schedule::Exponential => config.lr_init * config.gamma.powf(step as f64),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Static,
    Dynamic,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Static => "static",
            Phase::Dynamic => "dynamic",
        }
    }
}

/// Adam moments for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("optimizer tensor count mismatch"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powf(self.step as f64);
        let bc2 = 1.0 - self.beta2.powf(self.step as f64);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(Error::shape(format!("optimizer tensor {i} has the wrong length")));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let step = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                if step != 0.0 {
                    p[j] -= step;
                }
            }
        }
        Ok(())
    }
}

/// Fields, scene frame and BEV volumes: one time-invariant volume of the
/// static geometry for the static field, one per timestamp for the dynamic
/// field.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub field_config: FieldConfig,
    pub bev_config: BevConfig,
    pub bounds: Aabb,
    pub background: [f64; 3],
    pub timestamps: Vec<i64>,
    pub static_field: Field,
    pub dynamic_field: Field,
    pub static_volume: BevVolume,
    pub volumes: Vec<BevVolume>,
}

impl Model {
    /// Fresh model whose BEV volumes see every camera except `exclude`. The
    /// static volume pools the remaining cameras of all timestamps.
    pub fn build(scene: &Scene, exclude: &[ViewId], field: &FieldConfig, bev: &BevConfig, seed: u64) -> Result<Self> {
        scene.validate()?;
        bev.validate()?;
        let frame = SceneFrame::from_bounds(&scene.bounds);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let static_field = Field::new_static(field, frame, bev.channels, &mut rng)?;
        let dynamic_field = Field::new_dynamic(field, frame, bev.channels, &scene.timestamps, &mut rng)?;
        let cameras_at = |t: i64| -> Result<Vec<Camera>> {
            scene
                .views_at(t)
                .iter()
                .filter(|v| !exclude.contains(v))
                .map(|v| scene.view_camera(v))
                .collect()
        };
        let volumes = scene
            .timestamps
            .par_iter()
            .map(|&t| lift(&toy_encode(scene, &cameras_at(t)?, t, bev)?))
            .collect::<Result<Vec<_>>>()?;
        let mut all = Vec::new();
        for &t in &scene.timestamps {
            all.extend(cameras_at(t)?);
        }
        let static_volume = lift(&toy_encode_static(scene, &all, bev)?)?;
        Ok(Self {
            field_config: field.clone(),
            bev_config: bev.clone(),
            bounds: scene.bounds,
            background: scene.background,
            timestamps: scene.timestamps.clone(),
            static_field,
            dynamic_field,
            static_volume,
            volumes,
        })
    }

    pub fn time_index(&self, t: i64) -> Result<usize> {
        self.timestamps
            .iter()
            .position(|&s| s == t)
            .ok_or_else(|| Error::input(format!("timestamp {t} is not part of the model")))
    }

    pub fn feature_dim(&self) -> usize {
        self.bev_config.channels
    }

    /// BEV features of `points` from the volume at time index `ti`, or from
    /// the static volume when `ti` is `None`.
    fn features_into(&self, ti: Option<usize>, points: &[Vec3], out: &mut Vec<f64>) {
        let c = self.feature_dim();
        let volume = ti.map_or(&self.static_volume, |i| &self.volumes[i]);
        out.resize(points.len() * c, 0.0);
        for (p, row) in points.iter().zip(out.chunks_exact_mut(c)) {
            volume.sample_into(p, row);
        }
    }
}

/// One training image with its labels and precomputed rays.
#[derive(Clone, Debug)]
pub struct ViewData {
    pub id: ViewId,
    pub camera: Camera,
    pub labels: ViewLabels,
    pub rays: Vec<Ray>,
    pub dynamic_pixels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub timestamps: Vec<i64>,
    pub views: Vec<ViewData>,
}

impl Dataset {
    pub fn new(scene: &Scene, labels: Vec<(ViewId, ViewLabels)>) -> Result<Self> {
        let mut views = Vec::with_capacity(labels.len());
        for (id, labels) in labels {
            let camera = scene.view_camera(&id)?;
            if labels.image.width != camera.width || labels.image.height != camera.height {
                return Err(Error::shape(format!("labels of {id} do not match the camera size")));
            }
            let rays = generate_rays(&camera, &all_pixels(&camera), &scene.bounds, id.t)?;
            let dynamic_pixels = (0..labels.mask.data.len()).filter(|&i| labels.mask.data[i] == 1).collect();
            views.push(ViewData {
                id,
                camera,
                labels,
                rays,
                dynamic_pixels,
            });
        }
        if views.is_empty() {
            return Err(Error::input("no training views"));
        }
        Ok(Self {
            timestamps: scene.timestamps.clone(),
            views,
        })
    }

    /// Renders labels for every view except `exclude` from the analytic scene.
    pub fn render(scene: &Scene, exclude: &[ViewId]) -> Result<Self> {
        let ids: Vec<ViewId> = scene.all_views().into_iter().filter(|v| !exclude.contains(v)).collect();
        let labels = ids
            .par_iter()
            .map(|id| Ok((id.clone(), render_labels(scene, &scene.view_camera(id)?, id.t, LABEL_STEPS)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(scene, labels)
    }
}

/// Rays of one optimization step with their labels and quadrature.
#[derive(Clone, Debug)]
pub struct RayBatch {
    pub phase: Phase,
    pub rays: Vec<Ray>,
    /// Index of each ray's timestamp in the model.
    pub time_index: Vec<usize>,
    pub gt: Vec<[f64; 3]>,
    pub mask: Vec<u8>,
    pub flow_fw: Vec<[f64; 2]>,
    pub flow_bw: Vec<[f64; 2]>,
    pub cameras: Vec<Camera>,
    /// Index into `cameras` for each ray.
    pub camera_index: Vec<usize>,
    pub samples_per_ray: usize,
    /// Sample depths and segment lengths, `samples_per_ray` per ray.
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

/// Seeded generator for one step of one phase.
pub fn step_rng(seed: u64, phase: Phase, step: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&step.to_le_bytes());
    key[16] = match phase {
        Phase::Static => 1,
        Phase::Dynamic => 2,
    };
    ChaCha8Rng::from_seed(key)
}

/// Draws a batch for `phase`. Dynamic batches come from a single keyframe
/// unit `{t - 1, t, t + 1}` with `t` an interior timestamp.
pub fn sample_batch(data: &Dataset, model: &Model, config: &TrainConfig, phase: Phase, rng: &mut ChaCha8Rng) -> Result<RayBatch> {
    let candidates: Vec<usize> = match phase {
        Phase::Static => (0..data.views.len()).collect(),
        Phase::Dynamic => {
            let n = data.timestamps.len();
            if n < 3 {
                return Err(Error::Config("dynamic training needs at least 3 timestamps".into()));
            }
            let t = data.timestamps[rng.random_range(1..n - 1)];
            (0..data.views.len()).filter(|&v| data.views[v].id.t == t).collect()
        }
    };
    if candidates.is_empty() {
        return Err(Error::input("no training views for the sampled keyframe unit"));
    }
    let b = config.rays_per_batch;
    let k = config.samples_per_ray;
    let mut batch = RayBatch {
        phase,
        rays: Vec::with_capacity(b),
        time_index: Vec::with_capacity(b),
        gt: Vec::with_capacity(b),
        mask: Vec::with_capacity(b),
        flow_fw: Vec::with_capacity(b),
        flow_bw: Vec::with_capacity(b),
        cameras: Vec::new(),
        camera_index: Vec::with_capacity(b),
        samples_per_ray: k,
        u: vec![0.0; b * k],
        delta: vec![0.0; b * k],
    };
    let mut cam_slot = vec![usize::MAX; data.views.len()];
    for i in 0..b {
        let v = candidates[rng.random_range(0..candidates.len())];
        let view = &data.views[v];
        let p = if phase == Phase::Dynamic && !view.dynamic_pixels.is_empty() && rng.random::<f64>() < config.dynamic_ray_fraction {
            view.dynamic_pixels[rng.random_range(0..view.dynamic_pixels.len())]
        } else {
            rng.random_range(0..view.rays.len())
        };
        if cam_slot[v] == usize::MAX {
            cam_slot[v] = batch.cameras.len();
            batch.cameras.push(view.camera.clone());
        }
        let ray = view.rays[p].clone();
        let jitter = if config.stratified { Some(&mut *rng) } else { None };
        quadrature_into(
            ray.near,
            ray.far,
            k,
            jitter,
            &mut batch.u[i * k..(i + 1) * k],
            &mut batch.delta[i * k..(i + 1) * k],
        );
        batch.time_index.push(model.time_index(view.id.t)?);
        batch.rays.push(ray);
        batch.gt.push(view.labels.image.data[p]);
        batch.mask.push(view.labels.mask.data[p]);
        batch.flow_fw.push(view.labels.flow_fw.data[p]);
        batch.flow_bw.push(view.labels.flow_bw.data[p]);
        batch.camera_index.push(cam_slot[v]);
    }
    Ok(batch)
}

/// Normalized loss components plus the gradient of the weighted total with
/// respect to the parameters trained in the batch's phase.
#[derive(Clone, Debug)]
pub struct BatchResult {
    pub components: LossComponents,
    pub total: f64,
    pub grad: FieldGrad,
}

fn add_components(a: &mut LossComponents, b: &LossComponents) {
    a.static_rgb += b.static_rgb;
    a.dynamic_rgb += b.dynamic_rgb;
    a.optical += b.optical;
    a.cycle += b.cycle;
    a.smooth += b.smooth;
}

fn add_grad(a: &mut FieldGrad, b: &FieldGrad) {
    for (x, y) in a
        .grid
        .iter_mut()
        .chain(a.net.iter_mut())
        .chain(a.codes.iter_mut())
        .zip(b.grid.iter().chain(&b.net).chain(&b.codes))
    {
        *x += *y;
    }
}

/// Loss and gradient of a batch. Rays are processed in parallel chunks whose
/// results are reduced in chunk order, so the output does not depend on the
/// thread count.
pub fn evaluate_batch(model: &Model, batch: &RayBatch, weights: &LossWeights, chunk: usize) -> Result<BatchResult> {
    if batch.is_empty() || chunk == 0 {
        return Err(Error::input("empty batch or zero chunk size"));
    }
    let k = batch.samples_per_ray;
    if batch.u.len() != batch.len() * k || batch.delta.len() != batch.len() * k {
        return Err(Error::shape("batch quadrature does not match its rays"));
    }
    let norm = Norm {
        rays: batch.len() as f64,
        samples: (batch.len() * k) as f64,
    };
    let ranges: Vec<(usize, usize)> = (0..batch.len()).step_by(chunk).map(|s| (s, (s + chunk).min(batch.len()))).collect();
    let parts = ranges
        .par_iter()
        .map(|&(s, e)| match batch.phase {
            Phase::Static => static_chunk(model, batch, s..e, weights, &norm),
            Phase::Dynamic => dynamic_chunk(model, batch, s..e, weights, &norm),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut parts = parts.into_iter();
    let (mut components, mut grad) = parts.next().expect("at least one chunk");
    for (c, g) in parts {
        add_components(&mut components, &c);
        add_grad(&mut grad, &g);
    }
    components.static_rgb /= norm.rays;
    components.dynamic_rgb /= norm.rays;
    components.optical /= norm.rays;
    components.cycle /= norm.samples;
    components.smooth /= norm.samples;
    let total = loss_total(&components, weights);
    Ok(BatchResult { components, total, grad })
}

struct Norm {
    rays: f64,
    samples: f64,
}

/// Sample positions, directions and BEV features of a ray range. Dynamic
/// features are only gathered for the dynamic phase.
struct Inputs {
    points: Vec<Vec3>,
    dirs: Vec<Vec3>,
    static_features: Vec<f64>,
    features: Vec<f64>,
}

fn chunk_inputs(model: &Model, batch: &RayBatch, range: std::ops::Range<usize>) -> Inputs {
    let k = batch.samples_per_ray;
    let n = range.len() * k;
    let mut points = Vec::with_capacity(n);
    let mut dirs = Vec::with_capacity(n);
    let fd = model.feature_dim();
    let dynamic = batch.phase == Phase::Dynamic;
    let mut features = vec![0.0; if dynamic { n * fd } else { 0 }];
    for (j, r) in range.enumerate() {
        let ray = &batch.rays[r];
        for s in 0..k {
            let p = ray.at(batch.u[r * k + s]);
            if dynamic {
                let i = j * k + s;
                model.volumes[batch.time_index[r]].sample_into(&p, &mut features[i * fd..(i + 1) * fd]);
            }
            points.push(p);
            dirs.push(ray.direction);
        }
    }
    let mut static_features = Vec::new();
    model.features_into(None, &points, &mut static_features);
    Inputs {
        points,
        dirs,
        static_features,
        features,
    }
}

fn static_chunk(
    model: &Model,
    batch: &RayBatch,
    range: std::ops::Range<usize>,
    weights: &LossWeights,
    norm: &Norm,
) -> Result<(LossComponents, FieldGrad)> {
    let k = batch.samples_per_ray;
    let field = &model.static_field;
    let inputs = chunk_inputs(model, batch, range.clone());
    let mut tape = FieldTape::default();
    field.forward(&inputs.points, &inputs.dirs, &inputs.static_features, None, &mut tape)?;
    let w = col::S_WIDTH;
    let mut d_out = vec![0.0; tape.out.len()];
    let mut comps = LossComponents::default();
    let mut sigma = vec![0.0; k];
    let mut color = vec![0.0; 3 * k];
    let scale = weights.static_rgb / norm.rays;
    for (j, r) in range.enumerate() {
        for s in 0..k {
            let o = tape.row(j * k + s);
            sigma[s] = o[col::S_SIGMA];
            color[3 * s..3 * s + 3].copy_from_slice(&o[col::S_COLOR..col::S_COLOR + 3]);
        }
        let delta = &batch.delta[r * k..(r + 1) * k];
        let c = composite_static_channels(&sigma, &color, delta, &model.background);
        if batch.mask[r] > 1 {
            return Err(Error::input(format!("mask value {} is not binary", batch.mask[r])));
        }
        if batch.mask[r] == 1 {
            continue;
        }
        let mut up = [0.0; 3];
        for ch in 0..3 {
            let res = c[ch] - batch.gt[r][ch];
            comps.static_rgb += res * res;
            up[ch] = scale * 2.0 * res;
        }
        let (ds, dc) = composite_static_channels_grad(&sigma, &color, delta, &model.background, &up);
        for s in 0..k {
            let row = &mut d_out[(j * k + s) * w..(j * k + s + 1) * w];
            row[col::S_SIGMA] = ds[s];
            row[col::S_COLOR..col::S_COLOR + 3].copy_from_slice(&dc[3 * s..3 * s + 3]);
        }
    }
    let mut grad = field.zero_grad();
    field.backward(&mut tape, &d_out, &mut grad, None)?;
    Ok((comps, grad))
}

// Channel layout of the main dynamic-phase composite.
const M_RGB: usize = 0;
const M_DEPTH: usize = 3;
const M_ONE: usize = 4;
const M_FW: usize = 5;
const M_BW: usize = 8;
const M_DYN: usize = 11;
const M_DIM: usize = 12;
const FLOW_EPS: f64 = 1e-6;
const DEPTH_EPS: f64 = 1e-9;

fn dynamic_chunk(
    model: &Model,
    batch: &RayBatch,
    range: std::ops::Range<usize>,
    weights: &LossWeights,
    norm: &Norm,
) -> Result<(LossComponents, FieldGrad)> {
    let k = batch.samples_per_ray;
    let nr = range.len();
    let n = nr * k;
    let dynf = &model.dynamic_field;
    let inputs = chunk_inputs(model, batch, range.clone());
    let ti = batch.time_index[range.start];
    if range.clone().any(|r| batch.time_index[r] != ti) {
        return Err(Error::input("dynamic batch mixes reference times"));
    }
    if ti == 0 || ti + 1 >= model.timestamps.len() {
        return Err(Error::input("keyframe unit needs both neighbouring timestamps"));
    }
    let t = model.timestamps[ti] as f64;

    let mut tape_s = FieldTape::default();
    model
        .static_field
        .forward(&inputs.points, &inputs.dirs, &inputs.static_features, None, &mut tape_s)?;
    let mut tape = FieldTape::default();
    dynf.forward(&inputs.points, &inputs.dirs, &inputs.features, Some(&vec![t; n]), &mut tape)?;
    let dw = col::D_WIDTH;
    let flow = |tp: &FieldTape, i: usize, c: usize| {
        let o = &tp.out[i * dw + c..i * dw + c + 3];
        Vec3::new(o[0], o[1], o[2])
    };
    let s_fw: Vec<Vec3> = (0..n).map(|i| flow(&tape, i, col::D_FW)).collect();
    let s_bw: Vec<Vec3> = (0..n).map(|i| flow(&tape, i, col::D_BW)).collect();
    let x_next: Vec<Vec3> = (0..n).map(|i| inputs.points[i] + s_fw[i]).collect();
    let x_prev: Vec<Vec3> = (0..n).map(|i| inputs.points[i] + s_bw[i]).collect();
    let mut tape_next = FieldTape::default();
    dynf.forward(&x_next, &inputs.dirs, &inputs.features, Some(&vec![t + 1.0; n]), &mut tape_next)?;
    let mut tape_prev = FieldTape::default();
    dynf.forward(&x_prev, &inputs.dirs, &inputs.features, Some(&vec![t - 1.0; n]), &mut tape_prev)?;

    let mut comps = LossComponents::default();
    let mut d_ref = vec![0.0; n * dw];
    let mut d_next = vec![0.0; n * dw];
    let mut d_prev = vec![0.0; n * dw];
    let dyn_scale = weights.dynamic_rgb / norm.rays;
    let bg = model.background;

    // Per-ray composites. Static density and color are shared by the three
    // renders; the warped renders swap in the dynamic outputs at t +- 1.
    let mut sigma_s = vec![0.0; k];
    let mut sigma_d = vec![0.0; k];
    let mut blend = vec![0.0; k];
    let mut cs = vec![0.0; k * M_DIM];
    let mut cd = vec![0.0; k * M_DIM];
    let mut cs3 = vec![0.0; k * 3];
    let mut cw3 = vec![0.0; k * 3];
    let mut sigma_w = vec![0.0; k];
    let mut mains = Vec::with_capacity(nr);
    let mut x_hat = Vec::with_capacity(nr);
    let mut s_hat_fw = Vec::with_capacity(nr);
    let mut s_hat_bw = Vec::with_capacity(nr);
    for (j, r) in range.clone().enumerate() {
        let ray = &batch.rays[r];
        let delta = &batch.delta[r * k..(r + 1) * k];
        for s in 0..k {
            let i = j * k + s;
            let os = tape_s.row(i);
            let od = tape.row(i);
            sigma_s[s] = os[col::S_SIGMA];
            sigma_d[s] = od[col::D_SIGMA];
            blend[s] = od[col::D_BLEND];
            let u = batch.u[r * k + s];
            let rs = &mut cs[s * M_DIM..(s + 1) * M_DIM];
            rs.fill(0.0);
            rs[..3].copy_from_slice(&os[col::S_COLOR..col::S_COLOR + 3]);
            rs[M_DEPTH] = u;
            rs[M_ONE] = 1.0;
            cs3[3 * s..3 * s + 3].copy_from_slice(&os[col::S_COLOR..col::S_COLOR + 3]);
            let rd = &mut cd[s * M_DIM..(s + 1) * M_DIM];
            rd[..3].copy_from_slice(&od[col::D_COLOR..col::D_COLOR + 3]);
            rd[M_DEPTH] = u;
            rd[M_ONE] = 1.0;
            rd[M_FW..M_FW + 3].copy_from_slice(&od[col::D_FW..col::D_FW + 3]);
            rd[M_BW..M_BW + 3].copy_from_slice(&od[col::D_BW..col::D_BW + 3]);
            rd[M_DYN] = 1.0;
        }
        let mut bgm = [0.0; M_DIM];
        bgm[..3].copy_from_slice(&bg);
        bgm[M_DEPTH] = ray.far;
        bgm[M_ONE] = 1.0;
        let fs = FullSamples {
            sigma_s: &sigma_s,
            sigma_d: &sigma_d,
            blend: &blend,
            delta,
        };
        let main = composite_full_channels(&fs, &cs, &cd, &bgm);
        let depth = main[M_DEPTH] / (main[M_ONE] + DEPTH_EPS);
        let wd = main[M_DYN] + FLOW_EPS;
        x_hat.push(ray.at(depth));
        s_hat_fw.push(Vec3::new(main[M_FW], main[M_FW + 1], main[M_FW + 2]) / wd);
        s_hat_bw.push(Vec3::new(main[M_BW], main[M_BW + 1], main[M_BW + 2]) / wd);

        // Static loss is logged in this phase but the static field is frozen.
        if batch.mask[r] == 0 {
            let c = composite_static_channels(&sigma_s, &cs3, delta, &bg);
            comps.static_rgb += (0..3).map(|ch| (c[ch] - batch.gt[r][ch]).powi(2)).sum::<f64>();
        }

        for (warped, d_w) in [(&tape_next, &mut d_next), (&tape_prev, &mut d_prev)] {
            for s in 0..k {
                let o = warped.row(j * k + s);
                sigma_w[s] = o[col::D_SIGMA];
                cw3[3 * s..3 * s + 3].copy_from_slice(&o[col::D_COLOR..col::D_COLOR + 3]);
            }
            let fw = FullSamples {
                sigma_s: &sigma_s,
                sigma_d: &sigma_w,
                blend: &blend,
                delta,
            };
            let c = composite_full_channels(&fw, &cs3, &cw3, &bg);
            let mut up = [0.0; 3];
            for ch in 0..3 {
                let res = c[ch] - batch.gt[r][ch];
                comps.dynamic_rgb += res * res;
                up[ch] = dyn_scale * 2.0 * res;
            }
            let g = composite_full_channels_grad(&fw, &cs3, &cw3, &bg, &up);
            for s in 0..k {
                let i = j * k + s;
                d_w[i * dw + col::D_SIGMA] += g.sigma_d[s];
                for ch in 0..3 {
                    d_w[i * dw + col::D_COLOR + ch] += g.color_d[3 * s + ch];
                }
                d_ref[i * dw + col::D_BLEND] += g.blend[s];
            }
        }
        mains.push(main);
    }

    // Optical flow supervision on the expected surface point.
    let cams: Vec<&Camera> = range.clone().map(|r| &batch.cameras[batch.camera_index[r]]).collect();
    let (l_opt, g_opt) = loss_optical(
        &cams,
        &x_hat,
        &s_hat_fw,
        &s_hat_bw,
        &batch.flow_fw[range.clone()],
        &batch.flow_bw[range.clone()],
    )?;
    comps.optical += l_opt;
    let opt_scale = weights.optical / norm.rays;

    for (j, r) in range.clone().enumerate() {
        let ray = &batch.rays[r];
        let delta = &batch.delta[r * k..(r + 1) * k];
        let main = &mains[j];
        let mut up = [0.0; M_DIM];
        for ch in 0..3 {
            let res = main[M_RGB + ch] - batch.gt[r][ch];
            comps.dynamic_rgb += res * res;
            up[M_RGB + ch] = dyn_scale * 2.0 * res;
        }
        let w_all = main[M_ONE] + DEPTH_EPS;
        let depth = main[M_DEPTH] / w_all;
        let g_depth = opt_scale * g_opt.x_hat[j].dot(&ray.direction);
        up[M_DEPTH] = g_depth / w_all;
        up[M_ONE] = -g_depth * depth / w_all;
        let wd = main[M_DYN] + FLOW_EPS;
        let gf = g_opt.s_fw[j] * opt_scale;
        let gb = g_opt.s_bw[j] * opt_scale;
        for a in 0..3 {
            up[M_FW + a] = gf[a] / wd;
            up[M_BW + a] = gb[a] / wd;
        }
        up[M_DYN] = -(gf.dot(&s_hat_fw[j]) + gb.dot(&s_hat_bw[j])) / wd;
        if up.iter().all(|v| *v == 0.0) {
            continue;
        }
        for s in 0..k {
            let i = j * k + s;
            let os = tape_s.row(i);
            let od = tape.row(i);
            sigma_s[s] = os[col::S_SIGMA];
            sigma_d[s] = od[col::D_SIGMA];
            blend[s] = od[col::D_BLEND];
            let u = batch.u[r * k + s];
            let rs = &mut cs[s * M_DIM..(s + 1) * M_DIM];
            rs.fill(0.0);
            rs[..3].copy_from_slice(&os[col::S_COLOR..col::S_COLOR + 3]);
            rs[M_DEPTH] = u;
            rs[M_ONE] = 1.0;
            let rd = &mut cd[s * M_DIM..(s + 1) * M_DIM];
            rd[..3].copy_from_slice(&od[col::D_COLOR..col::D_COLOR + 3]);
            rd[M_DEPTH] = u;
            rd[M_ONE] = 1.0;
            rd[M_FW..M_FW + 3].copy_from_slice(&od[col::D_FW..col::D_FW + 3]);
            rd[M_BW..M_BW + 3].copy_from_slice(&od[col::D_BW..col::D_BW + 3]);
            rd[M_DYN] = 1.0;
        }
        let mut bgm = [0.0; M_DIM];
        bgm[..3].copy_from_slice(&bg);
        bgm[M_DEPTH] = ray.far;
        bgm[M_ONE] = 1.0;
        let fs = FullSamples {
            sigma_s: &sigma_s,
            sigma_d: &sigma_d,
            blend: &blend,
            delta,
        };
        let g = composite_full_channels_grad(&fs, &cs, &cd, &bgm, &up);
        for s in 0..k {
            let i = j * k + s;
            let row = &mut d_ref[i * dw..(i + 1) * dw];
            row[col::D_SIGMA] += g.sigma_d[s];
            row[col::D_BLEND] += g.blend[s];
            let gc = &g.color_d[s * M_DIM..(s + 1) * M_DIM];
            for a in 0..3 {
                row[col::D_COLOR + a] += gc[M_RGB + a];
                row[col::D_FW + a] += gc[M_FW + a];
                row[col::D_BW + a] += gc[M_BW + a];
            }
        }
    }

    // Cycle consistency between the reference flows and the flows predicted
    // at the warped points, plus smoothness along each ray.
    let bw_next: Vec<Vec3> = (0..n).map(|i| flow(&tape_next, i, col::D_BW)).collect();
    let fw_prev: Vec<Vec3> = (0..n).map(|i| flow(&tape_prev, i, col::D_FW)).collect();
    let (l_cyc, g_cyc) = loss_cycle(&s_fw, &bw_next, &s_bw, &fw_prev)?;
    comps.cycle += l_cyc;
    let (l_sf, g_sf) = loss_smooth(&s_fw, k)?;
    let (l_sb, g_sb) = loss_smooth(&s_bw, k)?;
    comps.smooth += l_sf + l_sb;
    let cyc_scale = weights.cycle / norm.samples;
    let smooth_scale = weights.cycle * weights.smooth / norm.samples;
    for i in 0..n {
        for a in 0..3 {
            d_ref[i * dw + col::D_FW + a] += cyc_scale * g_cyc.s_fw[i][a] + smooth_scale * g_sf[i][a];
            d_ref[i * dw + col::D_BW + a] += cyc_scale * g_cyc.s_bw[i][a] + smooth_scale * g_sb[i][a];
            d_next[i * dw + col::D_BW + a] += cyc_scale * g_cyc.s_bw_next[i][a];
            d_prev[i * dw + col::D_FW + a] += cyc_scale * g_cyc.s_fw_prev[i][a];
        }
    }

    let mut grad = dynf.zero_grad();
    let mut dp = vec![Vec3::zeros(); n];
    dynf.backward(&mut tape_next, &d_next, &mut grad, Some(&mut dp))?;
    for i in 0..n {
        for a in 0..3 {
            d_ref[i * dw + col::D_FW + a] += dp[i][a];
        }
    }
    dynf.backward(&mut tape_prev, &d_prev, &mut grad, Some(&mut dp))?;
    for i in 0..n {
        for a in 0..3 {
            d_ref[i * dw + col::D_BW + a] += dp[i][a];
        }
    }
    dynf.backward(&mut tape, &d_ref, &mut grad, None)?;
    Ok((comps, grad))
}

/// One logged optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub phase: Phase,
    pub step: u64,
    pub lr: f64,
    pub components: LossComponents,
    pub total: f64,
}

pub const METRICS_HEADER: &str = "phase,step,lr,static,dynamic,optical,cycle,smooth,total";

impl MetricRow {
    pub fn to_line(&self) -> String {
        let c = &self.components;
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.phase.name(),
            self.step,
            self.lr,
            c.static_rgb,
            c.dynamic_rgb,
            c.optical,
            c.cycle,
            c.smooth,
            self.total
        )
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Model, optimizer state, step counters and metric history.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub static_opt: Adam,
    pub dynamic_opt: Adam,
    pub static_step: u64,
    pub dynamic_step: u64,
    pub history: Vec<MetricRow>,
}

fn field_sizes(f: &Field) -> Vec<usize> {
    let mut v = vec![f.grid.params.len(), f.net.params.len()];
    if let Some(c) = &f.codes {
        v.push(c.values.len());
    }
    v
}

fn field_params(f: &mut Field) -> Vec<&mut [f64]> {
    let mut v: Vec<&mut [f64]> = vec![&mut f.grid.params, &mut f.net.params];
    if let Some(c) = &mut f.codes {
        v.push(&mut c.values);
    }
    v
}

fn grad_slices(g: &FieldGrad, with_codes: bool) -> Vec<&[f64]> {
    let mut v: Vec<&[f64]> = vec![&g.grid, &g.net];
    if with_codes {
        v.push(&g.codes);
    }
    v
}

impl TrainState {
    pub fn new(config: TrainConfig, model: Model) -> Result<Self> {
        config.validate()?;
        let static_opt = Adam::new(&field_sizes(&model.static_field));
        let dynamic_opt = Adam::new(&field_sizes(&model.dynamic_field));
        Ok(Self {
            config,
            model,
            static_opt,
            dynamic_opt,
            static_step: 0,
            dynamic_step: 0,
            history: Vec::new(),
        })
    }

    /// Phase of the next step, or `None` once both phases are complete.
    pub fn next_phase(&self) -> Option<Phase> {
        if self.static_step < self.config.static_steps {
            Some(Phase::Static)
        } else if self.dynamic_step < self.config.dynamic_steps {
            Some(Phase::Dynamic)
        } else {
            None
        }
    }

    /// Static-only rendering until the dynamic field has been trained.
    pub fn render_mode(&self) -> RenderMode {
        if self.dynamic_step > 0 {
            RenderMode::Full
        } else {
            RenderMode::Static
        }
    }

    /// Samples a batch for the next step and applies one update.
    pub fn step(&mut self, data: &Dataset) -> Result<Option<MetricRow>> {
        let Some(phase) = self.next_phase() else {
            return Ok(None);
        };
        let step = match phase {
            Phase::Static => self.static_step,
            Phase::Dynamic => self.dynamic_step,
        };
        let mut rng = step_rng(self.config.seed, phase, step);
        let batch = sample_batch(data, &self.model, &self.config, phase, &mut rng)?;
        self.train_step(&batch).map(Some)
    }

    /// One scheduled update on a given batch.
    pub fn train_step(&mut self, batch: &RayBatch) -> Result<MetricRow> {
        let (step, steps) = match batch.phase {
            Phase::Static => (self.static_step, self.config.static_steps),
            Phase::Dynamic => (self.dynamic_step, self.config.dynamic_steps),
        };
        self.apply_step(batch, lr_at(&self.config, step, steps))
    }

    /// One update with an explicit learning rate; only the batch phase's
    /// field changes.
    pub fn apply_step(&mut self, batch: &RayBatch, lr: f64) -> Result<MetricRow> {
        let phase = batch.phase;
        let step = match phase {
            Phase::Static => self.static_step,
            Phase::Dynamic => self.dynamic_step,
        };
        let mut res = evaluate_batch(&self.model, batch, &self.config.weights, self.config.chunk)?;
        if !res.total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at {} step {step}: {:?}",
                phase.name(),
                res.components
            )));
        }
        if let Some(cap) = self.config.grad_clip {
            let g = &mut res.grad;
            let norm = g.grid.iter().chain(&g.net).chain(&g.codes).map(|v| v * v).sum::<f64>().sqrt();
            if norm > cap {
                let s = cap / norm;
                g.grid
                    .iter_mut()
                    .chain(g.net.iter_mut())
                    .chain(g.codes.iter_mut())
                    .for_each(|v| *v *= s);
            }
        }
        match phase {
            Phase::Static => {
                let mut params = field_params(&mut self.model.static_field);
                self.static_opt.update(&mut params, &grad_slices(&res.grad, false), lr)?;
                self.static_step += 1;
            }
            Phase::Dynamic => {
                let mut params = field_params(&mut self.model.dynamic_field);
                self.dynamic_opt.update(&mut params, &grad_slices(&res.grad, true), lr)?;
                self.dynamic_step += 1;
            }
        }
        let row = MetricRow {
            phase,
            step,
            lr,
            components: res.components,
            total: res.total,
        };
        self.history.push(row.clone());
        Ok(row)
    }

    /// Runs the remaining steps of both phases, calling `on_step` after each.
    pub fn run(&mut self, data: &Dataset, mut on_step: impl FnMut(&TrainState, &MetricRow) -> Result<()>) -> Result<()> {
        while let Some(row) = self.step(data)? {
            on_step(self, &row)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RenderMode {
    Static,
    Full,
}

/// Renders colors of `rays` at timestamp `t` with uniform quadrature.
pub fn render_rays(model: &Model, rays: &[Ray], t: i64, samples: usize, mode: RenderMode, chunk: usize) -> Result<Vec<[f64; 3]>> {
    if samples == 0 || chunk == 0 {
        return Err(Error::input("render needs positive sample count and chunk size"));
    }
    let ti = model.time_index(t)?;
    let parts = rays
        .par_chunks(chunk)
        .map(|part| render_chunk(model, part, ti, samples, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

fn render_chunk(model: &Model, rays: &[Ray], ti: usize, k: usize, mode: RenderMode) -> Result<Vec<[f64; 3]>> {
    let n = rays.len() * k;
    let mut u = vec![0.0; n];
    let mut delta = vec![0.0; n];
    let mut points = Vec::with_capacity(n);
    let mut dirs = Vec::with_capacity(n);
    for (j, ray) in rays.iter().enumerate() {
        quadrature_into(
            ray.near,
            ray.far,
            k,
            None,
            &mut u[j * k..(j + 1) * k],
            &mut delta[j * k..(j + 1) * k],
        );
        for s in 0..k {
            points.push(ray.at(u[j * k + s]));
            dirs.push(ray.direction);
        }
    }
    let mut features = Vec::new();
    model.features_into(None, &points, &mut features);
    let mut tape_s = FieldTape::default();
    model.static_field.forward(&points, &dirs, &features, None, &mut tape_s)?;
    let mut tape_d = FieldTape::default();
    if mode == RenderMode::Full {
        model.features_into(Some(ti), &points, &mut features);
        let t = model.timestamps[ti] as f64;
        model
            .dynamic_field
            .forward(&points, &dirs, &features, Some(&vec![t; n]), &mut tape_d)?;
    }
    let bg = model.background;
    let mut out = Vec::with_capacity(rays.len());
    let (mut ss, mut sd, mut b) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    let (mut cs, mut cd) = (vec![0.0; 3 * k], vec![0.0; 3 * k]);
    for j in 0..rays.len() {
        for s in 0..k {
            let os = tape_s.row(j * k + s);
            ss[s] = os[col::S_SIGMA];
            cs[3 * s..3 * s + 3].copy_from_slice(&os[col::S_COLOR..col::S_COLOR + 3]);
            if mode == RenderMode::Full {
                let od = tape_d.row(j * k + s);
                sd[s] = od[col::D_SIGMA];
                b[s] = od[col::D_BLEND];
                cd[3 * s..3 * s + 3].copy_from_slice(&od[col::D_COLOR..col::D_COLOR + 3]);
            }
        }
        let delta = &delta[j * k..(j + 1) * k];
        let c = match mode {
            RenderMode::Static => composite_static_channels(&ss, &cs, delta, &bg),
            RenderMode::Full => composite_full_channels(
                &FullSamples {
                    sigma_s: &ss,
                    sigma_d: &sd,
                    blend: &b,
                    delta,
                },
                &cs,
                &cd,
                &bg,
            ),
        };
        out.push([c[0], c[1], c[2]]);
    }
    Ok(out)
}

pub fn render_view(model: &Model, camera: &Camera, t: i64, samples: usize, mode: RenderMode, chunk: usize) -> Result<Image> {
    let rays = generate_rays(camera, &all_pixels(camera), &model.bounds, t)?;
    let colors = render_rays(model, &rays, t, samples, mode, chunk)?;
    let mut img = Image::new(camera.width, camera.height);
    img.data = colors;
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{small_bev, small_field, small_scene};

    fn setup(name: &str, config: TrainConfig) -> (Dataset, TrainState) {
        let scene = small_scene(name);
        let data = Dataset::render(&scene, &[]).unwrap();
        let model = Model::build(&scene, &[], &small_field(), &small_bev(), config.seed).unwrap();
        (data, TrainState::new(config, model).unwrap())
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            static_steps: 4,
            dynamic_steps: 4,
            rays_per_batch: 32,
            samples_per_ray: 16,
            ..TrainConfig::default()
        }
    }

    fn digest(f: &Field) -> Vec<u64> {
        let codes = f.codes.as_ref().map(|c| c.values.clone()).unwrap_or_default();
        f.grid
            .params
            .iter()
            .chain(&f.net.params)
            .chain(&codes)
            .map(|v| v.to_bits())
            .collect()
    }

    #[test]
    fn schedule_endpoints() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_init, 5e-4);
        assert_eq!(lr_at(&c, 0, 2000), 5e-4);
        assert_eq!(lr_at(&c, 2000, 2000), 0.0);
        assert!((lr_at(&c, 1000, 2000) - 2.5e-4).abs() < 1e-18);
        let e = TrainConfig {
            schedule: Schedule::Exponential,
            gamma: 0.5,
            ..c
        };
        assert_eq!(lr_at(&e, 0, 10), 5e-4);
        assert_eq!(lr_at(&e, 3, 10), 5e-4 / 8.0);
    }

    #[test]
    fn default_weights() {
        let w = TrainConfig::default().weights;
        assert_eq!((w.static_rgb, w.dynamic_rgb, w.optical, w.cycle), (1.0, 1.0, 0.1, 1.0));
    }

    #[test]
    fn invalid_configs_rejected() {
        for c in [
            TrainConfig {
                lr_init: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                rays_per_batch: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                weights: LossWeights {
                    optical: -1.0,
                    ..LossWeights::default()
                },
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let (data, mut st) = setup("moving-box", small_config());
        for phase in [Phase::Static, Phase::Dynamic] {
            let before = (digest(&st.model.static_field), digest(&st.model.dynamic_field));
            let mut rng = step_rng(1, phase, 0);
            let batch = sample_batch(&data, &st.model, &st.config, phase, &mut rng).unwrap();
            st.apply_step(&batch, 0.0).unwrap();
            assert_eq!(before, (digest(&st.model.static_field), digest(&st.model.dynamic_field)));
        }
    }

    #[test]
    fn phases_touch_only_their_field() {
        let (data, mut st) = setup("moving-box", small_config());
        let dyn0 = digest(&st.model.dynamic_field);
        let stat0 = digest(&st.model.static_field);
        st.step(&data).unwrap();
        assert_eq!(st.next_phase(), Some(Phase::Static));
        assert_eq!(digest(&st.model.dynamic_field), dyn0);
        assert_ne!(digest(&st.model.static_field), stat0);
        while st.next_phase() == Some(Phase::Static) {
            st.step(&data).unwrap();
        }
        assert_eq!(st.render_mode(), RenderMode::Static);
        let stat1 = digest(&st.model.static_field);
        st.step(&data).unwrap();
        assert_eq!(digest(&st.model.static_field), stat1);
        assert_ne!(digest(&st.model.dynamic_field), dyn0);
        assert_eq!(st.render_mode(), RenderMode::Full);
    }

    fn ema_trend(losses: &[f64]) -> Vec<f64> {
        let a = 2.0 / 21.0;
        let mut e = losses[0];
        let mut out = Vec::new();
        for (i, l) in losses.iter().enumerate() {
            e = a * l + (1.0 - a) * e;
            if (i + 1) % 20 == 0 {
                out.push(e);
            }
        }
        out
    }

    #[test]
    fn overfitting_one_batch_decreases_loss() {
        for phase in [Phase::Static, Phase::Dynamic] {
            let config = TrainConfig {
                static_steps: 200,
                dynamic_steps: 200,
                ..small_config()
            };
            let (data, mut st) = setup("moving-box", config);
            let mut rng = step_rng(3, phase, 0);
            let batch = sample_batch(&data, &st.model, &st.config, phase, &mut rng).unwrap();
            let losses: Vec<f64> = (0..200).map(|_| st.train_step(&batch).unwrap().total).collect();
            let trend = ema_trend(&losses);
            assert!(trend.windows(2).all(|w| w[1] < w[0]), "{phase:?}: {trend:?}");
        }
    }

    #[test]
    fn logged_total_uses_configured_weights() {
        let (data, mut st) = setup("moving-box", small_config());
        while st.step(&data).unwrap().is_some() {}
        for row in &st.history {
            let expect = loss_total(&row.components, &LossWeights::default());
            assert_eq!(row.total, expect);
        }
        let last = st.history.last().unwrap();
        assert_eq!(last.phase, Phase::Dynamic);
        assert!(last.components.dynamic_rgb > 0.0 && last.components.cycle >= 0.0);
    }

    #[test]
    fn training_is_reproducible() {
        let run = || {
            let (data, mut st) = setup("moving-box", small_config());
            st.run(&data, |_, _| Ok(())).unwrap();
            st
        };
        let (a, b) = (run(), run());
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn chunking_does_not_change_the_result() {
        let (data, st) = setup("moving-box", small_config());
        for phase in [Phase::Static, Phase::Dynamic] {
            let mut rng = step_rng(9, phase, 0);
            let batch = sample_batch(&data, &st.model, &st.config, phase, &mut rng).unwrap();
            let w = LossWeights::default();
            let a = evaluate_batch(&st.model, &batch, &w, 5).unwrap();
            let b = evaluate_batch(&st.model, &batch, &w, 4096).unwrap();
            assert!((a.total - b.total).abs() < 1e-12 * b.total.abs().max(1.0));
            for (x, y) in a.grad.net.iter().zip(&b.grad.net) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_loss_aborts() {
        let (data, mut st) = setup("moving-box", small_config());
        st.model.static_field.net.params.fill(f64::NAN);
        let err = st.step(&data).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
    }

    #[test]
    fn dynamic_phase_needs_neighbours() {
        let mut scene = small_scene("moving-box");
        scene.timestamps.truncate(2);
        for a in &mut scene.agents {
            a.poses.truncate(2);
        }
        for d in &mut scene.dynamic_primitives {
            d.trajectory.truncate(2);
        }
        let data = Dataset::render(&scene, &[]).unwrap();
        let model = Model::build(&scene, &[], &small_field(), &small_bev(), 0).unwrap();
        let mut rng = step_rng(0, Phase::Dynamic, 0);
        assert!(matches!(
            sample_batch(&data, &model, &small_config(), Phase::Dynamic, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rendering_is_deterministic_and_bounded() {
        let (_, st) = setup("moving-box", small_config());
        let scene = small_scene("moving-box");
        let cam = scene.view_camera(&ViewId::new("a", "left", 2)).unwrap();
        let a = render_view(&st.model, &cam, 2, 16, RenderMode::Full, 37).unwrap();
        let b = render_view(&st.model, &cam, 2, 16, RenderMode::Full, 4096).unwrap();
        assert_eq!(a, b);
        assert!(a.data.iter().flatten().all(|v| (0.0..=1.0 + 1e-12).contains(v)));
        assert!(render_view(&st.model, &cam, 7, 16, RenderMode::Full, 64).is_err());
    }

    #[test]
    fn metrics_lines_have_every_column() {
        let row = MetricRow {
            phase: Phase::Dynamic,
            step: 3,
            lr: 5e-4,
            components: LossComponents::default(),
            total: 0.0,
        };
        let line = row.to_line();
        assert_eq!(line.split(',').count(), METRICS_HEADER.split(',').count());
        assert!(line.starts_with("dynamic,3,5e-4,"));
    }
}
