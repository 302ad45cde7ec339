//! Quadrature along rays and emission-absorption compositing.
//!
//! Compositing is written for an arbitrary number of channels so the same
//! code (and adjoint) produces colors, expected depths and expected flows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scene::Ray;

/// Rays rendered per parallel work item.
pub const DEFAULT_CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    /// Ascending sample depths.
    pub u: Vec<f64>,
    /// Segment lengths; the last one is the configured cap.
    pub delta: Vec<f64>,
}

/// Fills `u` and `delta` with `k` samples over `[near, far]`: bin midpoints,
/// or one uniform draw per bin when `jitter` is given. The last segment is
/// capped at the bin width.
pub fn quadrature_into(near: f64, far: f64, k: usize, jitter: Option<&mut ChaCha8Rng>, u: &mut [f64], delta: &mut [f64]) {
    debug_assert!(u.len() == k && delta.len() == k);
    let bin = (far - near) / k as f64;
    match jitter {
        Some(rng) => u
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = near + (i as f64 + rng.random::<f64>()) * bin),
        None => u.iter_mut().enumerate().for_each(|(i, v)| *v = near + (i as f64 + 0.5) * bin),
    }
    for i in 0..k.saturating_sub(1) {
        delta[i] = u[i + 1] - u[i];
    }
    if k > 0 {
        delta[k - 1] = bin;
    }
}

pub fn sample_quadrature(ray: &Ray, k: usize, stratified: bool, seed: u64) -> Result<RaySamples> {
    if k == 0 {
        return Err(Error::input("quadrature needs at least one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut u, mut delta) = (vec![0.0; k], vec![0.0; k]);
    quadrature_into(ray.near, ray.far, k, stratified.then_some(&mut rng), &mut u, &mut delta);
    Ok(RaySamples { u, delta })
}

/// `T_k = exp(-sum_{j<k} sigma_j delta_j)` for each of the K samples.
pub fn transmittance(sigma: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
    if sigma.len() != delta.len() {
        return Err(Error::shape("densities and segment lengths differ in length"));
    }
    if let Some(s) = sigma.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::input(format!("negative density {s}")));
    }
    let mut acc = 0.0f64;
    Ok(sigma
        .iter()
        .zip(delta)
        .map(|(s, d)| {
            let t = (-acc).exp();
            acc += s * d;
            t
        })
        .collect())
}

fn alpha(x: f64) -> f64 {
    -(-x).exp_m1()
}

/// Static composite of `dim`-channel sample values (`color` is K x dim).
pub fn composite_static_channels(sigma: &[f64], color: &[f64], delta: &[f64], background: &[f64]) -> Vec<f64> {
    let dim = background.len();
    let mut out = vec![0.0; dim];
    let mut trans = 1.0;
    for k in 0..sigma.len() {
        let w = trans * alpha(sigma[k] * delta[k]);
        for c in 0..dim {
            out[c] += w * color[k * dim + c];
        }
        trans *= (-sigma[k] * delta[k]).exp();
    }
    for c in 0..dim {
        out[c] += trans * background[c];
    }
    out
}

/// Gradients of `upstream . composite_static_channels(...)` with respect to
/// densities and sample values.
pub fn composite_static_channels_grad(
    sigma: &[f64],
    color: &[f64],
    delta: &[f64],
    background: &[f64],
    upstream: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let dim = background.len();
    let k_n = sigma.len();
    let dot = |row: &[f64]| row.iter().zip(upstream).map(|(a, b)| a * b).sum::<f64>();
    let mut trans = vec![0.0; k_n + 1];
    trans[0] = 1.0;
    for k in 0..k_n {
        trans[k + 1] = trans[k] * (-sigma[k] * delta[k]).exp();
    }
    let mut d_sigma = vec![0.0; k_n];
    let mut d_color = vec![0.0; k_n * dim];
    // suffix: everything composited after sample k, projected on upstream
    let mut suffix = trans[k_n] * dot(background);
    for k in (0..k_n).rev() {
        let e = (-sigma[k] * delta[k]).exp();
        let cu = dot(&color[k * dim..(k + 1) * dim]);
        d_sigma[k] = delta[k] * (trans[k] * e * cu - suffix);
        let w = trans[k] * alpha(sigma[k] * delta[k]);
        for c in 0..dim {
            d_color[k * dim + c] = w * upstream[c];
        }
        suffix += w * cu;
    }
    (d_sigma, d_color)
}

pub fn composite_static(sigma: &[f64], color: &[[f64; 3]], delta: &[f64], background: [f64; 3]) -> Result<[f64; 3]> {
    check_lengths(sigma.len(), &[color.len(), delta.len()])?;
    let flat: Vec<f64> = color.iter().flatten().copied().collect();
    let c = composite_static_channels(sigma, &flat, delta, &background);
    Ok([c[0], c[1], c[2]])
}

fn check_lengths(k: usize, others: &[usize]) -> Result<()> {
    if k == 0 || others.iter().any(|&o| o != k) {
        return Err(Error::shape(format!("sample arrays must all have length {k} > 0")));
    }
    Ok(())
}

/// Per-sample inputs of the blended static + dynamic composite.
#[derive(Clone, Copy, Debug)]
pub struct FullSamples<'a> {
    pub sigma_s: &'a [f64],
    pub sigma_d: &'a [f64],
    pub blend: &'a [f64],
    pub delta: &'a [f64],
}

impl FullSamples<'_> {
    fn len(&self) -> usize {
        self.sigma_s.len()
    }

    fn step(&self, k: usize) -> (f64, f64, f64) {
        let d = self.delta[k];
        let b = self.blend[k];
        let es = (-self.sigma_s[k] * d).exp();
        let ed = (-self.sigma_d[k] * d).exp();
        let eb = (-(b * self.sigma_s[k] + (1.0 - b) * self.sigma_d[k]) * d).exp();
        (es, ed, eb)
    }
}

/// Blended composite: static and dynamic emissions weighted by `b` and
/// `1 - b`, attenuated by the blended density `b sigma_s + (1 - b) sigma_d`.
pub fn composite_full_channels(s: &FullSamples, color_s: &[f64], color_d: &[f64], background: &[f64]) -> Vec<f64> {
    let dim = background.len();
    let mut out = vec![0.0; dim];
    let mut trans = 1.0;
    for k in 0..s.len() {
        let (es, ed, eb) = s.step(k);
        let b = s.blend[k];
        let ws = trans * (1.0 - es) * b;
        let wd = trans * (1.0 - ed) * (1.0 - b);
        for c in 0..dim {
            out[c] += ws * color_s[k * dim + c] + wd * color_d[k * dim + c];
        }
        trans *= eb;
    }
    for c in 0..dim {
        out[c] += trans * background[c];
    }
    out
}

/// Gradients of the blended composite projected on `upstream`.
#[derive(Clone, Debug, PartialEq)]
pub struct FullGrad {
    pub sigma_s: Vec<f64>,
    pub sigma_d: Vec<f64>,
    pub blend: Vec<f64>,
    pub color_s: Vec<f64>,
    pub color_d: Vec<f64>,
}

pub fn composite_full_channels_grad(s: &FullSamples, color_s: &[f64], color_d: &[f64], background: &[f64], upstream: &[f64]) -> FullGrad {
    let dim = background.len();
    let k_n = s.len();
    let dot = |row: &[f64]| row.iter().zip(upstream).map(|(a, b)| a * b).sum::<f64>();
    let mut trans = vec![0.0; k_n + 1];
    trans[0] = 1.0;
    for k in 0..k_n {
        trans[k + 1] = trans[k] * s.step(k).2;
    }
    let mut g = FullGrad {
        sigma_s: vec![0.0; k_n],
        sigma_d: vec![0.0; k_n],
        blend: vec![0.0; k_n],
        color_s: vec![0.0; k_n * dim],
        color_d: vec![0.0; k_n * dim],
    };
    let mut suffix = trans[k_n] * dot(background);
    for k in (0..k_n).rev() {
        let (es, ed, _) = s.step(k);
        let (b, d, t) = (s.blend[k], s.delta[k], trans[k]);
        let us = dot(&color_s[k * dim..(k + 1) * dim]);
        let ud = dot(&color_d[k * dim..(k + 1) * dim]);
        g.sigma_s[k] = b * d * (t * es * us - suffix);
        g.sigma_d[k] = (1.0 - b) * d * (t * ed * ud - suffix);
        g.blend[k] = t * ((1.0 - es) * us - (1.0 - ed) * ud) - (s.sigma_s[k] - s.sigma_d[k]) * d * suffix;
        let ws = t * (1.0 - es) * b;
        let wd = t * (1.0 - ed) * (1.0 - b);
        for c in 0..dim {
            g.color_s[k * dim + c] = ws * upstream[c];
            g.color_d[k * dim + c] = wd * upstream[c];
        }
        suffix += ws * us + wd * ud;
    }
    g
}

pub fn composite_full(s: &FullSamples, color_s: &[[f64; 3]], color_d: &[[f64; 3]], background: [f64; 3]) -> Result<[f64; 3]> {
    check_lengths(
        s.len(),
        &[s.sigma_d.len(), s.blend.len(), s.delta.len(), color_s.len(), color_d.len()],
    )?;
    if s.blend.iter().any(|b| !(0.0..=1.0).contains(b)) {
        return Err(Error::input("blend weights must lie in [0, 1]"));
    }
    let cs: Vec<f64> = color_s.iter().flatten().copied().collect();
    let cd: Vec<f64> = color_d.iter().flatten().copied().collect();
    let c = composite_full_channels(s, &cs, &cd, &background);
    Ok([c[0], c[1], c[2]])
}
