//! Bird's-eye-view geometry features and their lift into a 3D volume.
//!
//! The feature extractor is a stand-in for a learned multi-camera backbone:
//! it reads occupancy and albedo from the analytic scene, restricted to the
//! columns that at least one contributing camera can see.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{query_scene, query_static, Aabb, Camera, Scene, ScenePoint, Vec3};

/// Magnitude of the height logits written by [`toy_encode`].
pub const HEIGHT_LOGIT: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BevConfig {
    /// One coverage channel plus RGB albedo for each height band.
    pub channels: usize,
    /// Voxel counts along x, y, z.
    pub dims: [usize; 3],
    /// Columns farther than this from a camera are not covered by it.
    pub max_range: f64,
}

impl Default for BevConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            dims: [32, 32, 32],
            max_range: 30.0,
        }
    }
}

impl BevConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 4 || (self.channels - 1) % 3 != 0 {
            return Err(Error::Config(format!(
                "BEV channels must be 1 + 3k with k >= 1, got {}",
                self.channels
            )));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("BEV dims must be positive".into()));
        }
        let bands = (self.channels - 1) / 3;
        if bands > self.dims[2] {
            return Err(Error::Config(format!("{bands} height bands need at least as many z voxels")));
        }
        Ok(())
    }
}

/// `values` is C x X x Y, `heights` is Z x X x Y, both row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BevFeature {
    pub channels: usize,
    pub dims: [usize; 3],
    pub extent: Aabb,
    /// `None` for the time-invariant static feature.
    pub t: Option<i64>,
    pub values: Vec<f64>,
    pub heights: Vec<f64>,
}

/// Lifted volume, stored channel-last as X x Y x Z x C.
#[derive(Clone, Debug, PartialEq)]
pub struct BevVolume {
    pub channels: usize,
    pub dims: [usize; 3],
    pub extent: Aabb,
    /// `None` for the time-invariant static volume.
    pub t: Option<i64>,
    pub data: Vec<f64>,
}

fn voxel_size(extent: &Aabb, dims: [usize; 3]) -> Vec3 {
    let span = Vec3::from(extent.max) - Vec3::from(extent.min);
    Vec3::new(span.x / dims[0] as f64, span.y / dims[1] as f64, span.z / dims[2] as f64)
}

fn voxel_center(extent: &Aabb, size: &Vec3, i: [usize; 3]) -> Vec3 {
    Vec3::new(
        extent.min[0] + (i[0] as f64 + 0.5) * size.x,
        extent.min[1] + (i[1] as f64 + 0.5) * size.y,
        extent.min[2] + (i[2] as f64 + 0.5) * size.z,
    )
}

/// X x Y mask of columns seen by `camera`: some voxel centre of the column
/// projects into the image and lies within `max_range`.
pub fn column_coverage(camera: &Camera, extent: &Aabb, dims: [usize; 3], max_range: f64) -> Vec<bool> {
    let size = voxel_size(extent, dims);
    let mut out = vec![false; dims[0] * dims[1]];
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            out[x * dims[1] + y] = (0..dims[2]).any(|z| {
                let p = voxel_center(extent, &size, [x, y, z]);
                if (p - camera.translation).norm() > max_range {
                    return false;
                }
                match camera.project(&p) {
                    Ok([u, v]) => u >= 0.0 && v >= 0.0 && u < camera.width as f64 && v < camera.height as f64,
                    Err(_) => false,
                }
            });
        }
    }
    out
}

/// BEV feature at `t` from the columns covered by `cameras` (union over cameras).
pub fn toy_encode(scene: &Scene, cameras: &[Camera], t: i64, config: &BevConfig) -> Result<BevFeature> {
    scene.time_index(t)?;
    encode_columns(scene, cameras, Some(t), config, |p| query_scene(scene, p, t))
}

/// Time-invariant feature of the static primitives over the columns covered
/// by `cameras`, which may come from any timestamps.
pub fn toy_encode_static(scene: &Scene, cameras: &[Camera], config: &BevConfig) -> Result<BevFeature> {
    encode_columns(scene, cameras, None, config, |p| Ok(query_static(scene, p)))
}

fn encode_columns(
    scene: &Scene,
    cameras: &[Camera],
    t: Option<i64>,
    config: &BevConfig,
    query: impl Fn(&Vec3) -> Result<ScenePoint>,
) -> Result<BevFeature> {
    config.validate()?;
    let [nx, ny, nz] = config.dims;
    let extent = scene.bounds;
    let size = voxel_size(&extent, config.dims);
    let mut covered = vec![0.0f64; nx * ny];
    for cam in cameras {
        let cov = column_coverage(cam, &extent, config.dims, config.max_range);
        for (c, &v) in covered.iter_mut().zip(&cov) {
            *c = c.max(if v { 1.0 } else { 0.0 });
        }
    }
    let bands = (config.channels - 1) / 3;
    let mut values = vec![0.0; config.channels * nx * ny];
    let mut heights = vec![-HEIGHT_LOGIT; nz * nx * ny];
    for x in 0..nx {
        for y in 0..ny {
            let col = x * ny + y;
            if covered[col] == 0.0 {
                continue;
            }
            values[col] = 1.0;
            let mut sums = vec![[0.0f64; 4]; bands];
            for z in 0..nz {
                let q = query(&voxel_center(&extent, &size, [x, y, z]))?;
                let occupied = q.density > 0.0;
                heights[z * nx * ny + col] = if occupied { HEIGHT_LOGIT } else { -HEIGHT_LOGIT };
                if occupied {
                    let b = z * bands / nz;
                    for c in 0..3 {
                        sums[b][c] += q.color[c];
                    }
                    sums[b][3] += 1.0;
                }
            }
            for (b, s) in sums.iter().enumerate() {
                if s[3] > 0.0 {
                    for c in 0..3 {
                        values[(1 + 3 * b + c) * nx * ny + col] = s[c] / s[3];
                    }
                }
            }
        }
    }
    Ok(BevFeature {
        channels: config.channels,
        dims: config.dims,
        extent,
        t,
        values,
        heights,
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `V[c, z, x, y] = sigmoid(F_height[z, x, y]) * F'[c, x, y]`.
pub fn lift(feature: &BevFeature) -> Result<BevVolume> {
    let [nx, ny, nz] = feature.dims;
    let c_n = feature.channels;
    if feature.values.len() != c_n * nx * ny || feature.heights.len() != nz * nx * ny {
        return Err(Error::input(format!(
            "BEV feature buffers ({} values, {} heights) do not match {c_n} x {nx} x {ny} x {nz}",
            feature.values.len(),
            feature.heights.len()
        )));
    }
    if feature.values.iter().chain(&feature.heights).any(|v| !v.is_finite()) {
        return Err(Error::input("BEV feature contains non-finite values"));
    }
    let mut data = vec![0.0; nx * ny * nz * c_n];
    for x in 0..nx {
        for y in 0..ny {
            let col = x * ny + y;
            for z in 0..nz {
                let gate = sigmoid(feature.heights[z * nx * ny + col]);
                let base = ((x * ny + y) * nz + z) * c_n;
                for c in 0..c_n {
                    data[base + c] = gate * feature.values[c * nx * ny + col];
                }
            }
        }
    }
    Ok(BevVolume {
        channels: c_n,
        dims: feature.dims,
        extent: feature.extent,
        t: feature.t,
        data,
    })
}

impl BevVolume {
    pub fn value(&self, c: usize, z: usize, x: usize, y: usize) -> f64 {
        let [_, ny, nz] = self.dims;
        self.data[((x * ny + y) * nz + z) * self.channels + c]
    }

    /// Trilinear interpolation over voxel centres; zero outside the extent.
    pub fn sample_into(&self, x: &Vec3, out: &mut [f64]) {
        out.fill(0.0);
        if !self.extent.contains(x) {
            return;
        }
        let size = voxel_size(&self.extent, self.dims);
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let g = ((x[a] - self.extent.min[a]) / size[a] - 0.5).clamp(0.0, (n - 1) as f64);
            let i = (g.floor() as usize).min(n.saturating_sub(2));
            base[a] = i;
            frac[a] = if n == 1 { 0.0 } else { g - i as f64 };
        }
        let [_, ny, nz] = self.dims;
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = base;
            for a in 0..3 {
                if (corner >> a) & 1 == 1 {
                    w *= frac[a];
                    idx[a] = (idx[a] + 1).min(self.dims[a] - 1);
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            if w == 0.0 {
                continue;
            }
            let off = ((idx[0] * ny + idx[1]) * nz + idx[2]) * self.channels;
            for (o, v) in out.iter_mut().zip(&self.data[off..off + self.channels]) {
                *o += w * v;
            }
        }
    }

    pub fn sample(&self, x: &Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.sample_into(x, &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Shape, StaticPrimitive};
    use crate::templates::template;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn box_scene() -> Scene {
        let mut s = template("static-room", 0).unwrap();
        s.static_primitives = vec![StaticPrimitive {
            shape: Shape::Box {
                half_extents: [1.0, 1.0, 0.5],
            },
            center: [0.0, 0.0, 1.5],
            density: 10.0,
            albedo: [0.2, 0.4, 0.6],
        }];
        s
    }

    fn cameras(s: &Scene, t: i64) -> Vec<Camera> {
        s.views_at(t).iter().map(|v| s.view_camera(v).unwrap()).collect()
    }

    fn small() -> BevConfig {
        BevConfig {
            channels: 7,
            dims: [12, 12, 9],
            max_range: 30.0,
        }
    }

    #[test]
    fn empty_scene_lifts_to_nearly_zero() {
        let mut s = box_scene();
        s.static_primitives.clear();
        let f = toy_encode(&s, &cameras(&s, 0), 0, &small()).unwrap();
        assert!(f.heights.iter().all(|&h| h <= -HEIGHT_LOGIT));
        let v = lift(&f).unwrap();
        assert!(v.data.iter().all(|&x| x.abs() < 1e-4));
    }

    #[test]
    fn box_logits_are_positive_only_in_its_slab() {
        // z in [-0.5, 4] over 9 voxels: 0.5 m voxels, centres at -0.25, 0.25, ...
        // The box spans z in [1, 2] and x, y in [-1, 1].
        let s = box_scene();
        let cfg = small();
        let f = toy_encode(&s, &cameras(&s, 0), 0, &cfg).unwrap();
        let [nx, ny, nz] = cfg.dims;
        let size = voxel_size(&s.bounds, cfg.dims);
        for z in 0..nz {
            for x in 0..nx {
                for y in 0..ny {
                    let c = voxel_center(&s.bounds, &size, [x, y, z]);
                    let inside = c.z >= 1.0 && c.z <= 2.0 && c.x.abs() <= 1.0 && c.y.abs() <= 1.0;
                    let h = f.heights[z * nx * ny + x * ny + y];
                    if h > 0.0 {
                        assert!(inside, "positive logit outside the box at {c:?}");
                    }
                    if inside && f.values[x * ny + y] == 1.0 {
                        assert!(h > 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn coverage_union_is_elementwise_max() {
        let s = template("two-agent-intersection", 0).unwrap();
        let cfg = BevConfig::default();
        // Forward camera of one agent and rear camera of the other look apart.
        let a = vec![s.camera("a", "front", 2).unwrap()];
        let b = vec![s.camera("b", "rear", 2).unwrap()];
        let fa = toy_encode(&s, &a, 2, &cfg).unwrap();
        let fb = toy_encode(&s, &b, 2, &cfg).unwrap();
        let all: Vec<_> = a.iter().chain(&b).cloned().collect();
        let fu = toy_encode(&s, &all, 2, &cfg).unwrap();
        let n = cfg.dims[0] * cfg.dims[1];
        for i in 0..n {
            assert_eq!(fu.values[i], fa.values[i].max(fb.values[i]));
        }
        let count = |f: &BevFeature| f.values[..n].iter().sum::<f64>();
        assert!(count(&fu) > count(&fa) && count(&fu) > count(&fb));
    }

    #[test]
    fn encoding_is_deterministic() {
        let s = box_scene();
        let a = lift(&toy_encode(&s, &cameras(&s, 1), 1, &small()).unwrap()).unwrap();
        let b = lift(&toy_encode(&s, &cameras(&s, 1), 1, &small()).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn static_feature_ignores_moving_objects() {
        let s = template("moving-box", 0).unwrap();
        let mut still = s.clone();
        still.dynamic_primitives.clear();
        let cams = cameras(&s, 2);
        // Fine enough that voxel centres land inside the box.
        let cfg = BevConfig {
            dims: [48, 48, 12],
            ..small()
        };
        let f = toy_encode_static(&s, &cams, &cfg).unwrap();
        assert_eq!(f.t, None);
        // Without moving objects the static and per-time features agree.
        let g = toy_encode(&still, &cams, 2, &cfg).unwrap();
        assert_eq!(f.values, g.values);
        assert_eq!(f.heights, g.heights);
        // With them, some column differs at t = 2.
        let h = toy_encode(&s, &cams, 2, &cfg).unwrap();
        assert_ne!(f.values, h.values);
    }

    #[test]
    fn static_feature_pools_cameras_across_time() {
        let s = template("static-room", 0).unwrap();
        let cfg = small();
        let n = cfg.dims[0] * cfg.dims[1];
        let early = toy_encode_static(&s, &cameras(&s, 0), &cfg).unwrap();
        let mut both = cameras(&s, 0);
        both.extend(cameras(&s, 4));
        let pooled = toy_encode_static(&s, &both, &cfg).unwrap();
        let late = toy_encode_static(&s, &cameras(&s, 4), &cfg).unwrap();
        for i in 0..n {
            assert_eq!(pooled.values[i], early.values[i].max(late.values[i]));
        }
    }

    fn feature(values: Vec<f64>, heights: Vec<f64>, dims: [usize; 3], channels: usize) -> BevFeature {
        BevFeature {
            channels,
            dims,
            extent: Aabb {
                min: [0.0; 3],
                max: [dims[0] as f64, dims[1] as f64, dims[2] as f64],
            },
            t: Some(0),
            values,
            heights,
        }
    }

    #[test]
    fn lift_gate_cases() {
        let dims = [3, 2, 4];
        let vals: Vec<f64> = (0..2 * 6).map(|i| i as f64 - 5.0).collect();
        let v = lift(&feature(vals.clone(), vec![0.0; 24], dims, 2)).unwrap();
        for c in 0..2 {
            for x in 0..3 {
                for y in 0..2 {
                    for z in 0..4 {
                        assert_eq!(v.value(c, z, x, y), 0.5 * vals[c * 6 + x * 2 + y]);
                    }
                }
            }
        }
        let v = lift(&feature(vec![0.0; 12], vec![3.0; 24], dims, 2)).unwrap();
        assert!(v.data.iter().all(|&x| x == 0.0));

        let heights: Vec<f64> = (0..24).map(|i| if i / 6 == 2 { 20.0 } else { -20.0 }).collect();
        // sigmoid(20) = 1 - 2.06e-9, so unit-scale features saturate to 1e-8.
        let unit: Vec<f64> = vals.iter().map(|v| v / 6.0).collect();
        let v = lift(&feature(unit.clone(), heights, dims, 2)).unwrap();
        for c in 0..2 {
            for x in 0..3 {
                for y in 0..2 {
                    let f = unit[c * 6 + x * 2 + y];
                    for z in 0..4 {
                        let expect = if z == 2 { f } else { 0.0 };
                        assert!((v.value(c, z, x, y) - expect).abs() < 1e-8);
                    }
                }
            }
        }
        assert!(lift(&feature(vec![0.0; 5], vec![0.0; 24], dims, 2)).is_err());
    }

    fn volume_from(dims: [usize; 3], f: impl Fn(Vec3) -> f64) -> BevVolume {
        let extent = Aabb {
            min: [-1.0, 0.0, 2.0],
            max: [3.0, 2.0, 5.0],
        };
        let size = voxel_size(&extent, dims);
        let mut data = vec![0.0; dims[0] * dims[1] * dims[2] * 2];
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    let c = voxel_center(&extent, &size, [x, y, z]);
                    let off = ((x * dims[1] + y) * dims[2] + z) * 2;
                    data[off] = f(c);
                    data[off + 1] = -f(c);
                }
            }
        }
        BevVolume {
            channels: 2,
            dims,
            extent,
            t: Some(0),
            data,
        }
    }

    #[test]
    fn sample_at_voxel_centre_and_outside() {
        let v = volume_from([4, 5, 6], |p| p.x * 3.0 + p.y * p.z);
        let size = voxel_size(&v.extent, v.dims);
        let c = voxel_center(&v.extent, &size, [2, 3, 1]);
        assert_eq!(v.sample(&c), vec![v.value(0, 1, 2, 3), v.value(1, 1, 2, 3)]);
        assert_eq!(v.sample(&Vec3::new(3.5, 1.0, 3.0)), vec![0.0, 0.0]);
        assert_eq!(v.sample(&Vec3::new(0.0, 1.0, 1.99)), vec![0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn constant_volume_samples_constant(
            x in -1.0f64..3.0, y in 0.0f64..2.0, z in 2.0f64..5.0,
        ) {
            let v = volume_from([4, 5, 6], |_| 0.7);
            let s = v.sample(&Vec3::new(x, y, z));
            prop_assert!((s[0] - 0.7).abs() < 1e-12);
        }

        #[test]
        fn linear_field_is_reproduced(
            // Between the outermost voxel centres, where no clamping occurs.
            x in -0.5f64..2.5, y in 0.2f64..1.8, z in 2.25f64..4.75,
        ) {
            let v = volume_from([4, 5, 6], |p| 2.0 * p.x - 0.5 * p.y + 0.25 * p.z + 1.0);
            let p = Vec3::new(x, y, z);
            let s = v.sample(&p);
            prop_assert!((s[0] - (2.0 * x - 0.5 * y + 0.25 * z + 1.0)).abs() < 1e-12);
            prop_assert!((s[1] + s[0]).abs() < 1e-12);
        }

        #[test]
        fn lift_keeps_sign_and_shrinks(vals in prop::collection::vec(-5.0f64..5.0, 12), h in prop::collection::vec(-30.0f64..30.0, 24)) {
            let f = feature(vals.clone(), h, [3, 2, 4], 2);
            let v = lift(&f).unwrap();
            for c in 0..2 { for x in 0..3 { for y in 0..2 { for z in 0..4 {
                let a = vals[c * 6 + x * 2 + y];
                let b = v.value(c, z, x, y);
                prop_assert!(b.abs() <= a.abs());
                prop_assert!(a == 0.0 || b == 0.0 || a.signum() == b.signum());
            }}}}
        }
    }

    #[test]
    fn sample_is_continuous_across_voxel_faces() {
        let v = volume_from([4, 5, 6], |p| (p.x * 1.3).sin() + p.y * p.z);
        // x voxel centres at -0.5, 0.5, ...: the interpolation cell boundary is at 0.5.
        let lo = v.sample(&Vec3::new(0.5 - 1e-12, 1.1, 3.3));
        let hi = v.sample(&Vec3::new(0.5 + 1e-12, 1.1, 3.3));
        assert_relative_eq!(lo[0], hi[0], epsilon = 1e-9);
    }
}
