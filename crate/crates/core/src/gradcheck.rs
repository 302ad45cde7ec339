//! Finite-difference verification of every analytic gradient in the
//! training pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::contract;
use crate::error::Result;
use crate::fields::{Field, FieldGrad, FieldTape};
use crate::losses::{loss_cycle, loss_dynamic, loss_optical, loss_smooth, loss_static};
use crate::mlp::{Activation, Mlp, MlpCache};
use crate::render::{
    composite_full_channels, composite_full_channels_grad, composite_static_channels, composite_static_channels_grad, FullSamples,
};
use crate::scene::{Camera, Vec3};
use crate::train::{evaluate_batch, sample_batch, step_rng, Dataset, Model, Phase, TrainConfig, TrainState};

/// Step of the five-point central differences.
pub const FD_STEP: f64 = 1e-5;
/// Magnitude below which errors are measured absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub probes: usize,
    /// Probes redrawn because the objective is not smooth across them.
    pub kinks: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub groups: Vec<GroupReport>,
}

impl GradReport {
    pub fn get(&self, group: &str) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.group == group)
    }

    /// Worst error over all groups except the linear control.
    pub fn worst(&self) -> f64 {
        self.groups
            .iter()
            .filter(|g| g.group != LINEAR_CONTROL)
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,probes,kinks,max_rel_error\n");
        for g in &self.groups {
            s.push_str(&format!("{},{},{},{:e}\n", g.group, g.probes, g.kinks, g.max_rel_error));
        }
        s
    }
}

pub const LINEAR_CONTROL: &str = "linear-control";

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Picks a probe index, favouring entries with a nonzero analytic gradient
/// for three probes out of four.
fn pick(grad: &[f64], i: usize, rng: &mut ChaCha8Rng) -> usize {
    if i % 4 != 3 {
        let live = grad.iter().filter(|&&g| g != 0.0).count();
        if live > 0 {
            let k = rng.random_range(0..live);
            return grad
                .iter()
                .enumerate()
                .filter(|(_, &g)| g != 0.0)
                .nth(k)
                .map(|(i, _)| i)
                .expect("k < live");
        }
    }
    rng.random_range(0..grad.len())
}

/// Relative disagreement between the central differences at `h` and `2h`
/// above which a probe is taken to straddle a kink (ReLU, absolute value,
/// hash cell boundary). A smooth objective agrees to `O(h^2)`.
pub const KINK_TOLERANCE: f64 = 1e-3;

/// Compares `grad[j]` against five-point central differences of `f` over
/// `x[j]`. Probes where `f` is not smooth within `2h` are redrawn and
/// counted in `kinks`; a wrong gradient still shows up because both
/// difference quotients then agree with each other but not with `grad`.
fn probe_vec(
    x: &mut [f64],
    grad: &[f64],
    count: usize,
    h: f64,
    rng: &mut ChaCha8Rng,
    kinks: &mut usize,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<f64> {
    let mut worst = 0.0f64;
    let mut done = 0;
    let mut attempts = 0;
    while done < count && attempts < 8 * count {
        attempts += 1;
        let j = pick(grad, done, rng);
        let keep = x[j];
        let mut at = |off: f64| -> Result<f64> {
            x[j] = keep + off;
            f(x)
        };
        let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
        x[j] = keep;
        let (c1, c2) = ((p1 - m1) / (2.0 * h), (p2 - m2) / (4.0 * h));
        if (c1 - c2).abs() > KINK_TOLERANCE * c1.abs().max(c2.abs()).max(REL_FLOOR) {
            *kinks += 1;
            continue;
        }
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
        worst = worst.max(rel_error(grad[j], numeric));
        done += 1;
    }
    Ok(worst)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if v.norm() > 0.1 {
            return v.normalize();
        }
    }
}

struct Checker {
    rng: ChaCha8Rng,
    probes: usize,
    kinks: usize,
    report: GradReport,
}

impl Checker {
    fn record(&mut self, group: &str, err: f64) {
        self.report.groups.push(GroupReport {
            group: group.into(),
            probes: self.probes,
            kinks: std::mem::take(&mut self.kinks),
            max_rel_error: err,
        });
    }

    /// `L = u . mlp(x)` for a linear network: exact adjoint, so only
    /// rounding separates analytic and numeric values.
    fn linear_control(&mut self) -> Result<()> {
        let n = 5;
        let net = Mlp::new(&[6, 8, 8, 3], Activation::Identity, &mut self.rng)?;
        let x = uniform(&mut self.rng, n * 6, -1.0, 1.0);
        let up = uniform(&mut self.rng, n * 3, -1.0, 1.0);
        let mut cache = MlpCache::default();
        net.forward(&x, n, &mut cache)?;
        let mut grad = vec![0.0; net.param_count()];
        net.backward(&mut cache, &up, &mut grad, None)?;
        let mut params = net.params.clone();
        let mut probe_net = net.clone();
        // A linear objective has no truncation error, so a large step keeps
        // rounding small.
        let err = probe_vec(&mut params, &grad, self.probes, 1e-2, &mut self.rng, &mut self.kinks, |p| {
            probe_net.params.copy_from_slice(p);
            let mut c = MlpCache::default();
            probe_net.forward(&x, n, &mut c)?;
            Ok(dot(c.output(), &up))
        })?;
        self.record(LINEAR_CONTROL, err);
        Ok(())
    }

    fn encoding(&mut self, field: &Field) -> Result<()> {
        let grid = &field.grid;
        let up = uniform(&mut self.rng, grid.output_dim(), -1.0, 1.0);
        let mut worst = 0.0f64;
        let mut table = grid.params.clone();
        let mut probe_grid = grid.clone();
        for _ in 0..self.probes.div_ceil(4).max(1) {
            let x = Vec3::new(
                self.rng.random_range(-1.8..1.8),
                self.rng.random_range(-1.8..1.8),
                self.rng.random_range(-1.8..1.8),
            );
            let (sparse, gx) = grid.encode_grad(&x, &up)?;
            let mut dense = vec![0.0; table.len()];
            for (i, v) in sparse {
                dense[i] += v;
            }
            let e = probe_vec(&mut table, &dense, 2, FD_STEP, &mut self.rng, &mut self.kinks, |t| {
                probe_grid.params.copy_from_slice(t);
                Ok(dot(&probe_grid.encode(&contract(&x)?), &up))
            })?;
            worst = worst.max(e);
            let mut xs = [x[0], x[1], x[2]];
            let e = probe_vec(&mut xs, gx.as_slice(), 2, FD_STEP, &mut self.rng, &mut self.kinks, |p| {
                Ok(dot(&grid.encode(&contract(&Vec3::new(p[0], p[1], p[2]))?), &up))
            })?;
            worst = worst.max(e);
        }
        self.record("encoding", worst);
        Ok(())
    }

    /// `L = u . field(x, d, f, t)` with respect to network, table and code
    /// parameters and the query points.
    fn field(&mut self, name: &str, field: &Field, times: &[i64]) -> Result<()> {
        let n = 6;
        let points: Vec<Vec3> = (0..n)
            .map(|_| {
                Vec3::new(
                    self.rng.random_range(-5.0..5.0),
                    self.rng.random_range(-5.0..5.0),
                    self.rng.random_range(0.0..3.0),
                )
            })
            .collect();
        let dirs: Vec<Vec3> = (0..n).map(|_| unit(&mut self.rng)).collect();
        let feats = uniform(&mut self.rng, n * field.feature_dim, 0.0, 1.0);
        let t: Option<Vec<f64>> = field.codes.as_ref().map(|_| {
            let (lo, hi) = (times[0] as f64, times[times.len() - 1] as f64);
            (0..n).map(|_| self.rng.random_range(lo..=hi)).collect()
        });
        let up = uniform(&mut self.rng, n * field.width(), -1.0, 1.0);
        let mut tape = FieldTape::default();
        field.forward(&points, &dirs, &feats, t.as_deref(), &mut tape)?;
        let mut grad = field.zero_grad();
        let mut dp = vec![Vec3::zeros(); n];
        field.backward(&mut tape, &up, &mut grad, Some(&mut dp))?;
        let eval = |f: &Field, pts: &[Vec3]| -> Result<f64> {
            let mut tp = FieldTape::default();
            f.forward(pts, &dirs, &feats, t.as_deref(), &mut tp)?;
            Ok(dot(&tp.out, &up))
        };
        let mut probe = field.clone();
        let k = self.probes.div_ceil(4).max(1);
        let mut worst = 0.0f64;
        let mut v = field.net.params.clone();
        worst = worst.max(probe_vec(&mut v, &grad.net, k, FD_STEP, &mut self.rng, &mut self.kinks, |p| {
            probe.net.params.copy_from_slice(p);
            eval(&probe, &points)
        })?);
        probe.net.params.copy_from_slice(&field.net.params);
        let mut v = field.grid.params.clone();
        worst = worst.max(probe_vec(&mut v, &grad.grid, k, FD_STEP, &mut self.rng, &mut self.kinks, |p| {
            probe.grid.params.copy_from_slice(p);
            eval(&probe, &points)
        })?);
        probe.grid.params.copy_from_slice(&field.grid.params);
        if let Some(codes) = &field.codes {
            let mut v = codes.values.clone();
            worst = worst.max(probe_vec(&mut v, &grad.codes, k, FD_STEP, &mut self.rng, &mut self.kinks, |p| {
                probe.codes.as_mut().expect("dynamic field").values.copy_from_slice(p);
                eval(&probe, &points)
            })?);
            probe.codes.as_mut().expect("dynamic field").values.copy_from_slice(&codes.values);
        }
        let mut flat: Vec<f64> = points.iter().flat_map(|p| [p[0], p[1], p[2]]).collect();
        let dflat: Vec<f64> = dp.iter().flat_map(|p| [p[0], p[1], p[2]]).collect();
        worst = worst.max(probe_vec(&mut flat, &dflat, k, FD_STEP, &mut self.rng, &mut self.kinks, |p| {
            let pts: Vec<Vec3> = p.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
            eval(field, &pts)
        })?);
        self.record(name, worst);
        Ok(())
    }

    fn compositing(&mut self) -> Result<()> {
        let k = 16;
        let dim = 4;
        let mut sigma = uniform(&mut self.rng, k, 0.0, 3.0);
        let mut sigma_d = uniform(&mut self.rng, k, 0.0, 3.0);
        let mut blend = uniform(&mut self.rng, k, 0.0, 1.0);
        let delta = uniform(&mut self.rng, k, 0.05, 0.3);
        let mut cs = uniform(&mut self.rng, k * dim, 0.0, 1.0);
        let mut cd = uniform(&mut self.rng, k * dim, 0.0, 1.0);
        let bg = uniform(&mut self.rng, dim, 0.0, 1.0);
        let up = uniform(&mut self.rng, dim, -1.0, 1.0);
        let n = self.probes.div_ceil(2).max(1);

        let (gs, gc) = composite_static_channels_grad(&sigma, &cs, &delta, &bg, &up);
        let mut w = probe_vec(&mut sigma, &gs, n, FD_STEP, &mut self.rng, &mut self.kinks, |s| {
            Ok(dot(&composite_static_channels(s, &cs, &delta, &bg), &up))
        })?;
        let sig = sigma.clone();
        w = w.max(probe_vec(&mut cs, &gc, n, FD_STEP, &mut self.rng, &mut self.kinks, |c| {
            Ok(dot(&composite_static_channels(&sig, c, &delta, &bg), &up))
        })?);
        self.record("composite-static", w);

        let fs = FullSamples {
            sigma_s: &sigma,
            sigma_d: &sigma_d,
            blend: &blend,
            delta: &delta,
        };
        let g = composite_full_channels_grad(&fs, &cs, &cd, &bg, &up);
        let full = |s: &[f64], sd: &[f64], b: &[f64], cs: &[f64], cd: &[f64]| {
            let fs = FullSamples {
                sigma_s: s,
                sigma_d: sd,
                blend: b,
                delta: &delta,
            };
            dot(&composite_full_channels(&fs, cs, cd, &bg), &up)
        };
        let (s0, sd0, b0, cs0, cd0) = (sigma.clone(), sigma_d.clone(), blend.clone(), cs.clone(), cd.clone());
        let mut w = probe_vec(&mut sigma, &g.sigma_s, n, FD_STEP, &mut self.rng, &mut self.kinks, |v| {
            Ok(full(v, &sd0, &b0, &cs0, &cd0))
        })?;
        w = w.max(probe_vec(
            &mut sigma_d,
            &g.sigma_d,
            n,
            FD_STEP,
            &mut self.rng,
            &mut self.kinks,
            |v| Ok(full(&s0, v, &b0, &cs0, &cd0)),
        )?);
        w = w.max(probe_vec(&mut blend, &g.blend, n, FD_STEP, &mut self.rng, &mut self.kinks, |v| {
            Ok(full(&s0, &sd0, v, &cs0, &cd0))
        })?);
        w = w.max(probe_vec(&mut cs, &g.color_s, n, FD_STEP, &mut self.rng, &mut self.kinks, |v| {
            Ok(full(&s0, &sd0, &b0, v, &cd0))
        })?);
        w = w.max(probe_vec(&mut cd, &g.color_d, n, FD_STEP, &mut self.rng, &mut self.kinks, |v| {
            Ok(full(&s0, &sd0, &b0, &cs0, v))
        })?);
        self.record("composite-full", w);
        Ok(())
    }

    fn losses(&mut self, camera: &Camera) -> Result<()> {
        let n = 8;
        let probes = self.probes;
        let rgb = |v: &[f64]| -> Vec<[f64; 3]> { v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect() };
        let vecs = |v: &[f64]| -> Vec<Vec3> { v.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect() };
        let flat_rgb = |v: &[[f64; 3]]| -> Vec<f64> { v.iter().flatten().copied().collect() };
        let flat_vec = |v: &[Vec3]| -> Vec<f64> { v.iter().flat_map(|p| [p[0], p[1], p[2]]).collect() };

        let mut pred = uniform(&mut self.rng, 3 * n, 0.0, 1.0);
        let gt = rgb(&uniform(&mut self.rng, 3 * n, 0.0, 1.0));
        let mask: Vec<u8> = (0..n).map(|i| (i % 3 == 0) as u8).collect();
        let (_, g) = loss_static(&rgb(&pred), &gt, &mask)?;
        let e = probe_vec(&mut pred, &flat_rgb(&g), probes, FD_STEP, &mut self.rng, &mut self.kinks, |p| {
            Ok(loss_static(&rgb(p), &gt, &mask)?.0)
        })?;
        self.record("loss-static", e);

        let mut preds = uniform(&mut self.rng, 9 * n, 0.0, 1.0);
        let gts: Vec<Vec<[f64; 3]>> = (0..3).map(|_| rgb(&uniform(&mut self.rng, 3 * n, 0.0, 1.0))).collect();
        let split = |p: &[f64]| -> Vec<Vec<[f64; 3]>> { p.chunks_exact(3 * n).map(rgb).collect() };
        let (_, g) = loss_dynamic(&split(&preds), &gts)?;
        let gflat: Vec<f64> = g.iter().flat_map(|v| flat_rgb(v)).collect();
        let e = probe_vec(&mut preds, &gflat, probes, FD_STEP, &mut self.rng, &mut self.kinks, |p| {
            Ok(loss_dynamic(&split(p), &gts)?.0)
        })?;
        self.record("loss-dynamic", e);

        // Points in front of the camera, flows of a few centimetres.
        let x: Vec<Vec3> = (0..n)
            .map(|_| {
                let d = camera.pixel_direction(self.rng.random_range(0..camera.height), self.rng.random_range(0..camera.width));
                camera.translation + d * self.rng.random_range(3.0..8.0)
            })
            .collect();
        let sf = vecs(&uniform(&mut self.rng, 3 * n, -0.3, 0.3));
        let sb = vecs(&uniform(&mut self.rng, 3 * n, -0.3, 0.3));
        let gf: Vec<[f64; 2]> = (0..n)
            .map(|_| [self.rng.random_range(-2.0..2.0), self.rng.random_range(-2.0..2.0)])
            .collect();
        let gb: Vec<[f64; 2]> = (0..n)
            .map(|_| [self.rng.random_range(-2.0..2.0), self.rng.random_range(-2.0..2.0)])
            .collect();
        let cams = vec![camera; n];
        let (_, g) = loss_optical(&cams, &x, &sf, &sb, &gf, &gb)?;
        let mut all = flat_vec(&x);
        all.extend(flat_vec(&sf));
        all.extend(flat_vec(&sb));
        let mut gall = flat_vec(&g.x_hat);
        gall.extend(flat_vec(&g.s_fw));
        gall.extend(flat_vec(&g.s_bw));
        let e = probe_vec(&mut all, &gall, probes, FD_STEP, &mut self.rng, &mut self.kinks, |p| {
            let v = vecs(p);
            Ok(loss_optical(&cams, &v[..n], &v[n..2 * n], &v[2 * n..], &gf, &gb)?.0)
        })?;
        self.record("loss-optical", e);

        let mut all = uniform(&mut self.rng, 12 * n, -0.5, 0.5);
        let v = vecs(&all);
        let (_, g) = loss_cycle(&v[..n], &v[n..2 * n], &v[2 * n..3 * n], &v[3 * n..])?;
        let mut gall = flat_vec(&g.s_fw);
        gall.extend(flat_vec(&g.s_bw_next));
        gall.extend(flat_vec(&g.s_bw));
        gall.extend(flat_vec(&g.s_fw_prev));
        let e = probe_vec(&mut all, &gall, probes, FD_STEP, &mut self.rng, &mut self.kinks, |p| {
            let v = vecs(p);
            Ok(loss_cycle(&v[..n], &v[n..2 * n], &v[2 * n..3 * n], &v[3 * n..])?.0)
        })?;
        self.record("loss-cycle", e);

        let mut flows = uniform(&mut self.rng, 3 * n, -0.5, 0.5);
        let (_, g) = loss_smooth(&vecs(&flows), 4)?;
        let e = probe_vec(&mut flows, &flat_vec(&g), probes, FD_STEP, &mut self.rng, &mut self.kinks, |p| {
            Ok(loss_smooth(&vecs(p), 4)?.0)
        })?;
        self.record("loss-smooth", e);
        Ok(())
    }

    /// Total training loss of a small batch against every parameter tensor
    /// of the phase's field.
    fn pipeline(&mut self, state: &TrainState, data: &Dataset, phase: Phase) -> Result<()> {
        let config = TrainConfig {
            rays_per_batch: 8,
            samples_per_ray: 12,
            dynamic_ray_fraction: 0.75,
            ..state.config.clone()
        };
        let mut brng = step_rng(self.rng.random(), phase, 0);
        let batch = sample_batch(data, &state.model, &config, phase, &mut brng)?;
        let w = config.weights;
        let res = evaluate_batch(&state.model, &batch, &w, config.chunk)?;
        let FieldGrad { grid, net, codes } = res.grad;
        let mut model = state.model.clone();
        let k = self.probes.div_ceil(3).max(1);
        let mut worst = 0.0f64;
        for (tensor, grad) in [(0, &grid), (1, &net), (2, &codes)] {
            if grad.is_empty() {
                continue;
            }
            let original = tensor_mut(phase_field(&mut model, phase), tensor).to_vec();
            let mut x = original.clone();
            worst = worst.max(probe_vec(&mut x, grad, k, FD_STEP, &mut self.rng, &mut self.kinks, |p| {
                tensor_mut(phase_field(&mut model, phase), tensor).copy_from_slice(p);
                Ok(evaluate_batch(&model, &batch, &w, config.chunk)?.total)
            })?);
            tensor_mut(phase_field(&mut model, phase), tensor).copy_from_slice(&original);
        }
        self.record(
            match phase {
                Phase::Static => "pipeline-static",
                Phase::Dynamic => "pipeline-dynamic",
            },
            worst,
        );
        Ok(())
    }
}

fn phase_field(m: &mut Model, phase: Phase) -> &mut Field {
    match phase {
        Phase::Static => &mut m.static_field,
        Phase::Dynamic => &mut m.dynamic_field,
    }
}

fn tensor_mut(f: &mut Field, i: usize) -> &mut [f64] {
    match i {
        0 => &mut f.grid.params,
        1 => &mut f.net.params,
        _ => &mut f.codes.as_mut().expect("dynamic field").values,
    }
}

/// Central-difference check of randomly probed inputs and parameters in
/// every gradient group. `probes == 0` returns an empty report.
pub fn verify_gradients(state: &TrainState, data: &Dataset, probes: usize, seed: u64) -> Result<GradReport> {
    let mut c = Checker {
        rng: ChaCha8Rng::seed_from_u64(seed),
        probes,
        kinks: 0,
        report: GradReport::default(),
    };
    if probes == 0 {
        return Ok(c.report);
    }
    c.linear_control()?;
    c.encoding(&state.model.static_field)?;
    c.field("static-field", &state.model.static_field, &state.model.timestamps)?;
    c.field("dynamic-field", &state.model.dynamic_field, &state.model.timestamps)?;
    c.compositing()?;
    c.losses(&data.views[0].camera)?;
    c.pipeline(state, data, Phase::Static)?;
    if data.timestamps.len() >= 3 {
        c.pipeline(state, data, Phase::Dynamic)?;
    }
    Ok(c.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{small_bev, small_field, small_scene};

    fn state() -> (TrainState, Dataset) {
        let scene = small_scene("moving-box");
        let data = Dataset::render(&scene, &[]).unwrap();
        let model = Model::build(&scene, &[], &small_field(), &small_bev(), 1).unwrap();
        (TrainState::new(TrainConfig::default(), model).unwrap(), data)
    }

    #[test]
    fn zero_probes_give_an_empty_report() {
        let (st, data) = state();
        assert!(verify_gradients(&st, &data, 0, 0).unwrap().groups.is_empty());
    }

    #[test]
    fn all_groups_pass() {
        let (st, data) = state();
        let r = verify_gradients(&st, &data, 12, 7).unwrap();
        assert_eq!(r.groups.len(), 13);
        assert!(r.get(LINEAR_CONTROL).unwrap().max_rel_error < 1e-8, "{}", r.to_csv());
        assert!(r.worst() < 1e-3, "{}", r.to_csv());
    }
}
