//! Static and dynamic radiance fields.
//!
//! A field is a hash grid plus a small network. The network input is
//! `[grid features | keyframe code (dynamic only) | direction embedding | BEV feature]`.
//! Output columns go through fixed head activations: softplus for densities,
//! sigmoid for colors and the blend weight, identity for scene flow.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{contract_jacobian, contract_unchecked, HashGrid, HashGridConfig, LevelSample};
use crate::error::{Error, Result};
use crate::mlp::{Activation, Mlp, MlpCache};
use crate::scene::{Aabb, Vec3};

pub mod col {
    //! Output column layout of the two heads.
    pub const S_SIGMA: usize = 0;
    pub const S_COLOR: usize = 1;
    pub const S_WIDTH: usize = 4;

    pub const D_FW: usize = 0;
    pub const D_BW: usize = 3;
    pub const D_SIGMA: usize = 6;
    pub const D_COLOR: usize = 7;
    pub const D_BLEND: usize = 10;
    pub const D_WIDTH: usize = 11;
}

/// Initial blend logit (its weights start at zero); sigmoid(2) ~ 0.88 starts mostly static.
const BLEND_BIAS: f64 = 2.0;
/// Initial bias of the dynamic density; softplus(-3) ~ 0.05.
const DYNAMIC_SIGMA_BIAS: f64 = -3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldKind {
    Static,
    Dynamic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub grid: HashGridConfig,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
    pub dir_frequencies: usize,
    pub code_dim: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            grid: HashGridConfig::default(),
            hidden_width: 64,
            hidden_layers: 2,
            activation: Activation::Relu,
            dir_frequencies: 4,
            code_dim: 16,
        }
    }
}

impl FieldConfig {
    pub fn dir_dim(&self) -> usize {
        3 + 6 * self.dir_frequencies
    }
}

/// `d, sin(2^k pi d), cos(2^k pi d)` for `k < frequencies`.
pub fn embed_direction(d: &Vec3, frequencies: usize, out: &mut [f64]) {
    out[..3].copy_from_slice(d.as_slice());
    let mut o = 3;
    for k in 0..frequencies {
        let w = std::f64::consts::PI * (1u64 << k) as f64;
        for a in 0..3 {
            let (s, c) = (w * d[a]).sin_cos();
            out[o + a] = s;
            out[o + 3 + a] = c;
        }
        o += 6;
    }
}

/// Maps world coordinates into the frame where the scene bounds fit in the
/// unit cube before contraction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFrame {
    pub center: [f64; 3],
    pub scale: f64,
}

impl SceneFrame {
    pub fn from_bounds(b: &Aabb) -> Self {
        let c = b.center();
        Self {
            center: [c.x, c.y, c.z],
            scale: b.half_extents().max(),
        }
    }

    pub fn to_local(&self, x: &Vec3) -> Vec3 {
        (x - Vec3::from(self.center)) / self.scale
    }
}

/// Latent codes at integer keyframe times, linearly interpolated between.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyframeCodes {
    pub times: Vec<i64>,
    pub dim: usize,
    /// `times.len() x dim`, row-major.
    pub values: Vec<f64>,
}

impl KeyframeCodes {
    pub fn zeros(times: &[i64], dim: usize) -> Result<Self> {
        if times.is_empty() || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::input("keyframe times must be non-empty and increasing"));
        }
        Ok(Self {
            times: times.to_vec(),
            dim,
            values: vec![0.0; times.len() * dim],
        })
    }

    pub fn code(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Enclosing keyframes `(i, j)` and the weight of `j`.
    pub fn bracket(&self, t: f64) -> Result<(usize, usize, f64)> {
        let first = self.times[0] as f64;
        let last = *self.times.last().unwrap() as f64;
        if !(t >= first && t <= last) {
            return Err(Error::input(format!("time {t} outside keyframe range [{first}, {last}]")));
        }
        let j = self.times.partition_point(|&k| (k as f64) < t);
        if j == 0 || self.times[j] as f64 == t {
            return Ok((j, j, 0.0));
        }
        let (a, b) = (self.times[j - 1] as f64, self.times[j] as f64);
        Ok((j - 1, j, (t - a) / (b - a)))
    }

    pub fn temporal_interp(&self, t: f64) -> Result<Vec<f64>> {
        let (i, j, w) = self.bracket(t)?;
        Ok(self
            .code(i)
            .iter()
            .zip(self.code(j))
            .map(|(a, b)| if w == 0.0 { *a } else { (1.0 - w) * a + w * b })
            .collect())
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Head {
    Linear,
    Softplus,
    Sigmoid,
}

const STATIC_HEADS: [Head; col::S_WIDTH] = [Head::Softplus, Head::Sigmoid, Head::Sigmoid, Head::Sigmoid];
const DYNAMIC_HEADS: [Head; col::D_WIDTH] = [
    Head::Linear,
    Head::Linear,
    Head::Linear,
    Head::Linear,
    Head::Linear,
    Head::Linear,
    Head::Softplus,
    Head::Sigmoid,
    Head::Sigmoid,
    Head::Sigmoid,
    Head::Sigmoid,
];

/// Everything the backward pass needs from one batched forward pass.
#[derive(Clone, Debug, Default)]
pub struct FieldTape {
    n: usize,
    local: Vec<Vec3>,
    records: Vec<LevelSample>,
    brackets: Vec<(usize, usize, f64)>,
    input: Vec<f64>,
    cache: MlpCache,
    /// Activated outputs, `n x width`.
    pub out: Vec<f64>,
}

impl FieldTape {
    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.out.len() / self.n.max(1);
        &self.out[i * w..(i + 1) * w]
    }
}

/// Dense gradient buffers matching a field's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGrad {
    pub grid: Vec<f64>,
    pub net: Vec<f64>,
    pub codes: Vec<f64>,
}

impl FieldGrad {
    pub fn zero(&mut self) {
        self.grid.fill(0.0);
        self.net.fill(0.0);
        self.codes.fill(0.0);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub kind: FieldKind,
    pub grid: HashGrid,
    pub net: Mlp,
    pub codes: Option<KeyframeCodes>,
    pub frame: SceneFrame,
    pub dir_frequencies: usize,
    pub feature_dim: usize,
}

/// Density and color of one static query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StaticSample {
    pub sigma: f64,
    pub color: [f64; 3],
}

/// All outputs of one dynamic query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DynamicSample {
    pub s_fw: Vec3,
    pub s_bw: Vec3,
    pub sigma: f64,
    pub color: [f64; 3],
    pub blend: f64,
}

impl Field {
    pub fn new_static(config: &FieldConfig, frame: SceneFrame, feature_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::build(FieldKind::Static, config, frame, feature_dim, None, rng)
    }

    pub fn new_dynamic(config: &FieldConfig, frame: SceneFrame, feature_dim: usize, times: &[i64], rng: &mut impl Rng) -> Result<Self> {
        let codes = KeyframeCodes::zeros(times, config.code_dim)?;
        Self::build(FieldKind::Dynamic, config, frame, feature_dim, Some(codes), rng)
    }

    fn build(
        kind: FieldKind,
        config: &FieldConfig,
        frame: SceneFrame,
        feature_dim: usize,
        codes: Option<KeyframeCodes>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let grid = HashGrid::new(config.grid.clone(), rng)?;
        let code_dim = codes.as_ref().map_or(0, |c| c.dim);
        let input = grid.output_dim() + code_dim + config.dir_dim() + feature_dim;
        let width = match kind {
            FieldKind::Static => col::S_WIDTH,
            FieldKind::Dynamic => col::D_WIDTH,
        };
        let mut sizes = vec![input];
        sizes.extend(std::iter::repeat(config.hidden_width).take(config.hidden_layers));
        sizes.push(width);
        let mut net = Mlp::new(&sizes, config.activation, rng)?;
        let last = net.layers() - 1;
        let fan_in = sizes[sizes.len() - 2];
        if kind == FieldKind::Dynamic {
            // Flow rows start at zero so the first warps are the identity.
            net.weight_mut(last)[..6 * fan_in].fill(0.0);
            net.weight_mut(last)[col::D_BLEND * fan_in..(col::D_BLEND + 1) * fan_in].fill(0.0);
            net.bias_mut(last)[col::D_BLEND] = BLEND_BIAS;
            net.bias_mut(last)[col::D_SIGMA] = DYNAMIC_SIGMA_BIAS;
        }
        Ok(Self {
            kind,
            grid,
            net,
            codes,
            frame,
            dir_frequencies: config.dir_frequencies,
            feature_dim,
        })
    }

    pub fn width(&self) -> usize {
        self.net.output_dim()
    }

    fn heads(&self) -> &'static [Head] {
        match self.kind {
            FieldKind::Static => &STATIC_HEADS,
            FieldKind::Dynamic => &DYNAMIC_HEADS,
        }
    }

    fn code_dim(&self) -> usize {
        self.codes.as_ref().map_or(0, |c| c.dim)
    }

    pub fn zero_grad(&self) -> FieldGrad {
        FieldGrad {
            grid: vec![0.0; self.grid.params.len()],
            net: vec![0.0; self.net.param_count()],
            codes: vec![0.0; self.codes.as_ref().map_or(0, |c| c.values.len())],
        }
    }

    /// Batched forward pass. `features` is `n x feature_dim`; `times` is
    /// required for dynamic fields and ignored otherwise.
    pub fn forward(&self, points: &[Vec3], dirs: &[Vec3], features: &[f64], times: Option<&[f64]>, tape: &mut FieldTape) -> Result<()> {
        let n = points.len();
        if dirs.len() != n || features.len() != n * self.feature_dim {
            return Err(Error::shape(format!(
                "field query with {n} points, {} directions, {} feature values",
                dirs.len(),
                features.len()
            )));
        }
        let times = match (self.kind, times) {
            (FieldKind::Dynamic, Some(t)) if t.len() == n => Some(t),
            (FieldKind::Dynamic, _) => return Err(Error::shape("dynamic query needs one time per point")),
            (FieldKind::Static, _) => None,
        };
        let levels = self.grid.levels();
        let enc = self.grid.output_dim();
        let cd = self.code_dim();
        let dd = 3 + 6 * self.dir_frequencies;
        let fd = self.feature_dim;
        let in_dim = enc + cd + dd + fd;
        tape.n = n;
        tape.local.clear();
        tape.records.resize(n * levels, LevelSample::default());
        tape.brackets.clear();
        tape.input.resize(n * in_dim, 0.0);
        for i in 0..n {
            let (x, d) = (&points[i], &dirs[i]);
            if !x.iter().all(|v| v.is_finite()) || !d.iter().all(|v| v.is_finite()) {
                return Err(Error::input("non-finite field query"));
            }
            if (d.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::input(format!("direction norm {} is not 1", d.norm())));
            }
            let local = self.frame.to_local(x);
            tape.local.push(local);
            let row = &mut tape.input[i * in_dim..(i + 1) * in_dim];
            let p = contract_unchecked(&local);
            self.grid
                .encode_into(&p, &mut row[..enc], &mut tape.records[i * levels..(i + 1) * levels]);
            if let (Some(codes), Some(ts)) = (&self.codes, times) {
                let (a, b, w) = codes.bracket(ts[i])?;
                tape.brackets.push((a, b, w));
                let (ca, cb) = (codes.code(a), codes.code(b));
                for k in 0..cd {
                    row[enc + k] = if w == 0.0 { ca[k] } else { (1.0 - w) * ca[k] + w * cb[k] };
                }
            }
            embed_direction(d, self.dir_frequencies, &mut row[enc + cd..enc + cd + dd]);
            let f = &features[i * fd..(i + 1) * fd];
            if !f.iter().all(|v| v.is_finite()) {
                return Err(Error::input("non-finite BEV feature"));
            }
            row[enc + cd + dd..].copy_from_slice(f);
        }
        self.net.forward(&tape.input, n, &mut tape.cache)?;
        let heads = self.heads();
        let w = heads.len();
        tape.out.resize(n * w, 0.0);
        for (o, r) in tape.out.chunks_exact_mut(w).zip(tape.cache.output().chunks_exact(w)) {
            for k in 0..w {
                o[k] = match heads[k] {
                    Head::Linear => r[k],
                    Head::Softplus => softplus(r[k]),
                    Head::Sigmoid => sigmoid(r[k]),
                };
            }
        }
        Ok(())
    }

    /// Adjoint of [`Field::forward`]: `d_out` is the gradient with respect to
    /// the activated outputs. Parameter gradients are added to `grad`; world
    /// point gradients are written to `d_points` when requested.
    pub fn backward(&self, tape: &mut FieldTape, d_out: &[f64], grad: &mut FieldGrad, d_points: Option<&mut [Vec3]>) -> Result<()> {
        let n = tape.n;
        let heads = self.heads();
        let w = heads.len();
        if d_out.len() != n * w {
            return Err(Error::shape(format!(
                "field gradient has {} values, expected {n} x {w}",
                d_out.len()
            )));
        }
        if grad.grid.len() != self.grid.params.len() || grad.net.len() != self.net.param_count() {
            return Err(Error::shape("gradient buffers do not belong to this field"));
        }
        let mut d_raw = vec![0.0; n * w];
        for i in 0..n {
            for k in 0..w {
                let g = d_out[i * w + k];
                if g == 0.0 {
                    continue;
                }
                let a = tape.out[i * w + k];
                d_raw[i * w + k] = match heads[k] {
                    Head::Linear => g,
                    // softplus' = sigmoid(raw) = 1 - exp(-softplus)
                    Head::Softplus => g * -(-a).exp_m1(),
                    Head::Sigmoid => g * a * (1.0 - a),
                };
            }
        }
        let in_dim = self.net.input_dim();
        let mut d_in = vec![0.0; n * in_dim];
        self.net.backward(&mut tape.cache, &d_raw, &mut grad.net, Some(&mut d_in))?;
        let levels = self.grid.levels();
        let enc = self.grid.output_dim();
        let cd = self.code_dim();
        let mut d_points = d_points;
        if let Some(dp) = d_points.as_deref() {
            if dp.len() != n {
                return Err(Error::shape("point gradient buffer has the wrong length"));
            }
        }
        for i in 0..n {
            let row = &d_in[i * in_dim..(i + 1) * in_dim];
            let recs = &tape.records[i * levels..(i + 1) * levels];
            self.grid.accumulate_table_grad(recs, &row[..enc], &mut grad.grid);
            if let Some(dp) = d_points.as_deref_mut() {
                let gp = self.grid.point_grad(recs, &row[..enc]);
                dp[i] = contract_jacobian(&tape.local[i]) * gp / self.frame.scale;
            }
            if cd > 0 {
                let (a, b, wb) = tape.brackets[i];
                for k in 0..cd {
                    let g = row[enc + k];
                    if wb == 0.0 {
                        grad.codes[a * cd + k] += g;
                    } else {
                        grad.codes[a * cd + k] += (1.0 - wb) * g;
                        grad.codes[b * cd + k] += wb * g;
                    }
                }
            }
        }
        Ok(())
    }

    fn query_one(&self, x: &Vec3, d: &Vec3, f: &[f64], t: Option<f64>) -> Result<Vec<f64>> {
        let mut tape = FieldTape::default();
        let times = t.map(|t| [t]);
        self.forward(&[*x], &[*d], f, times.as_ref().map(|t| &t[..]), &mut tape)?;
        Ok(tape.out)
    }

    pub fn static_query(&self, x: &Vec3, d: &Vec3, f: &[f64]) -> Result<StaticSample> {
        if self.kind != FieldKind::Static {
            return Err(Error::input("static_query on a dynamic field"));
        }
        let o = self.query_one(x, d, f, None)?;
        Ok(StaticSample {
            sigma: o[col::S_SIGMA],
            color: [o[1], o[2], o[3]],
        })
    }

    pub fn dynamic_query(&self, x: &Vec3, d: &Vec3, t: f64, f: &[f64]) -> Result<DynamicSample> {
        if self.kind != FieldKind::Dynamic {
            return Err(Error::input("dynamic_query on a static field"));
        }
        let o = self.query_one(x, d, f, Some(t))?;
        Ok(decode_dynamic(&o))
    }

    /// Density and color at the forward warp `(x + s_fw, t + 1)` and the
    /// backward warp `(x + s_bw, t - 1)`. The BEV feature `f` of the unwarped
    /// point is reused for both.
    pub fn warped_query(&self, x: &Vec3, d: &Vec3, t: f64, f: &[f64], s_fw: &Vec3, s_bw: &Vec3) -> Result<(StaticSample, StaticSample)> {
        let codes = self.codes.as_ref().ok_or_else(|| Error::input("warped_query on a static field"))?;
        for tt in [t - 1.0, t + 1.0] {
            codes.bracket(tt)?;
        }
        let next = decode_dynamic(&self.query_one(&(x + s_fw), d, f, Some(t + 1.0))?);
        let prev = decode_dynamic(&self.query_one(&(x + s_bw), d, f, Some(t - 1.0))?);
        let strip = |s: DynamicSample| StaticSample {
            sigma: s.sigma,
            color: s.color,
        };
        Ok((strip(next), strip(prev)))
    }
}

pub fn decode_dynamic(o: &[f64]) -> DynamicSample {
    DynamicSample {
        s_fw: Vec3::new(o[0], o[1], o[2]),
        s_bw: Vec3::new(o[3], o[4], o[5]),
        sigma: o[col::D_SIGMA],
        color: [o[7], o[8], o[9]],
        blend: o[col::D_BLEND],
    }
}
