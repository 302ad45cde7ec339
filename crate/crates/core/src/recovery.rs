//! Camera failure injection, failed-view recovery and the toy perception
//! head used to score it.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bev::column_coverage;
use crate::error::{Error, Result};
use crate::raster::Image;
use crate::scene::{render_labels, Aabb, Camera, Scene, Shape, Vec3, ViewId, LABEL_STEPS};
use crate::train::{render_view, Model, RenderMode};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureMode {
    /// The view is delivered as an all-zero image.
    #[default]
    Failed,
    /// The view is missing entirely.
    Dropped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FailureSpec {
    pub mode: FailureMode,
    /// Number of failed cameras.
    pub count: usize,
    /// Timestamp of the failures; the middle timestamp when unset.
    pub t: Option<i64>,
    /// Explicit failed views; overrides seeded selection.
    pub views: Option<Vec<ViewId>>,
    pub seed: u64,
    /// Minimum share of a camera's BEV columns that other agents also see
    /// for it to be a failure candidate.
    pub min_overlap: f64,
}

impl Default for FailureSpec {
    fn default() -> Self {
        Self {
            mode: FailureMode::Failed,
            count: 0,
            t: None,
            views: None,
            seed: 0,
            min_overlap: 0.3,
        }
    }
}

impl FailureSpec {
    pub fn time(&self, scene: &Scene) -> i64 {
        self.t.unwrap_or(scene.timestamps[scene.timestamps.len() / 2])
    }
}

/// Columns of the coverage grid used to measure camera overlap.
const OVERLAP_DIMS: [usize; 3] = [32, 32, 8];
const OVERLAP_RANGE: f64 = 30.0;

/// Cameras at `t` whose ground coverage is shared with other agents.
pub fn candidates(scene: &Scene, t: i64, min_overlap: f64) -> Result<Vec<ViewId>> {
    let views = scene.views_at(t);
    let cover: Vec<Vec<bool>> = views
        .iter()
        .map(|v| Ok(column_coverage(&scene.view_camera(v)?, &scene.bounds, OVERLAP_DIMS, OVERLAP_RANGE)))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (i, v) in views.iter().enumerate() {
        let own = cover[i].iter().filter(|&&c| c).count();
        if own == 0 {
            continue;
        }
        let shared = (0..cover[i].len())
            .filter(|&c| cover[i][c] && views.iter().enumerate().any(|(j, w)| w.agent != v.agent && cover[j][c]))
            .count();
        if shared as f64 >= min_overlap * own as f64 {
            out.push(v.clone());
        }
    }
    out.sort();
    Ok(out)
}

/// Failed views for `spec`. Seeded selections for smaller counts are
/// prefixes of those for larger counts.
pub fn select_failures(scene: &Scene, spec: &FailureSpec) -> Result<Vec<ViewId>> {
    let t = spec.time(scene);
    scene.time_index(t)?;
    if let Some(v) = &spec.views {
        for id in v {
            scene.view_camera(id)?;
        }
        return Ok(v.clone());
    }
    let mut pool = candidates(scene, t, spec.min_overlap)?;
    if spec.count > pool.len() {
        return Err(Error::input(format!(
            "{} failures requested but only {} cameras at t={t} have overlap coverage",
            spec.count,
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    pool.shuffle(&mut rng);
    pool.truncate(spec.count);
    Ok(pool)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureManifest {
    pub mode: FailureMode,
    pub views: Vec<ViewId>,
}

/// Applies the failures of `spec` to `views`.
pub fn inject_failure(scene: &Scene, views: &[(ViewId, Image)], spec: &FailureSpec) -> Result<(Vec<(ViewId, Image)>, FailureManifest)> {
    let hit = if spec.count == 0 && spec.views.is_none() {
        Vec::new()
    } else {
        select_failures(scene, spec)?
    };
    let manifest = FailureManifest {
        mode: spec.mode,
        views: hit,
    };
    Ok((apply_manifest(views, &manifest), manifest))
}

pub fn apply_manifest(views: &[(ViewId, Image)], manifest: &FailureManifest) -> Vec<(ViewId, Image)> {
    views
        .iter()
        .filter_map(|(id, img)| {
            if !manifest.views.contains(id) {
                return Some((id.clone(), img.clone()));
            }
            match manifest.mode {
                FailureMode::Failed => Some((id.clone(), Image::new(img.width, img.height))),
                FailureMode::Dropped => None,
            }
        })
        .collect()
}

/// Renders every failed view of `manifest` from the trained model.
pub fn recover_views(
    model: &Model,
    scene: &Scene,
    manifest: &FailureManifest,
    mode: RenderMode,
    samples: usize,
    chunk: usize,
) -> Result<Vec<(ViewId, Image)>> {
    manifest
        .views
        .iter()
        .map(|id| {
            let cam = scene.view_camera(id)?;
            Ok((id.clone(), render_view(model, &cam, id.t, samples, mode, chunk)?))
        })
        .collect()
}

/// Replaces the failed views in `views` with their recovered images and
/// restores dropped ones.
pub fn merge_recovered(views: &[(ViewId, Image)], recovered: &[(ViewId, Image)]) -> Vec<(ViewId, Image)> {
    let mut out: BTreeMap<ViewId, Image> = views.iter().cloned().collect();
    for (id, img) in recovered {
        out.insert(id.clone(), img.clone());
    }
    out.into_iter().collect()
}

/// Oracle images of every view at `t`.
pub fn true_views(scene: &Scene, t: i64) -> Result<Vec<(ViewId, Image)>> {
    scene
        .views_at(t)
        .par_iter()
        .map(|id| {
            let cam = scene.view_camera(id)?;
            Ok((id.clone(), render_labels(scene, &cam, t, LABEL_STEPS)?.image))
        })
        .collect()
}

/// Reported in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 99.0;

/// `10 log10(1 / MSE)`; identical images give infinity.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::input(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let n = (a.data.len() * 3) as f64;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .flat_map(|(p, q)| (0..3).map(move |c| (p[c] - q[c]).powi(2)))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Class {
    Free,
    Static,
    Dynamic,
}

pub const CLASSES: [Class; 3] = [Class::Free, Class::Static, Class::Dynamic];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptionMap {
    pub dims: [usize; 2],
    pub extent: Aabb,
    /// Row-major over x then y.
    pub cells: Vec<Class>,
}

impl PerceptionMap {
    pub fn count(&self, class: Class) -> usize {
        self.cells.iter().filter(|&&c| c == class).count()
    }

    fn cell_center(&self, x: usize, y: usize, height: f64) -> Vec3 {
        let (lo, hi) = (self.extent.min, self.extent.max);
        Vec3::new(
            lo[0] + (x as f64 + 0.5) * (hi[0] - lo[0]) / self.dims[0] as f64,
            lo[1] + (y as f64 + 0.5) * (hi[1] - lo[1]) / self.dims[1] as f64,
            height,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptionConfig {
    pub dims: [usize; 2],
    /// Height of the probed cell centres above the ground.
    pub height: f64,
    /// Maximum color distance for a palette match.
    pub tolerance: f64,
    pub max_range: f64,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            dims: [32, 32],
            height: 0.3,
            tolerance: 0.2,
            max_range: 30.0,
        }
    }
}

/// Reference colors of free space (ground, sky) and of static and dynamic
/// objects.
#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    pub entries: Vec<([f64; 3], Class)>,
}

impl Palette {
    pub fn from_scene(scene: &Scene) -> Self {
        let mut entries = vec![(scene.background, Class::Free)];
        for p in &scene.static_primitives {
            let class = match p.shape {
                Shape::GroundPlane => Class::Free,
                _ => Class::Static,
            };
            entries.push((p.albedo, class));
        }
        for p in &scene.dynamic_primitives {
            entries.push((p.albedo, Class::Dynamic));
        }
        Self { entries }
    }

    /// Class of the nearest entry within `tolerance`, free otherwise.
    pub fn classify(&self, c: &[f64; 3], tolerance: f64) -> Class {
        let mut best = (f64::INFINITY, Class::Free);
        for (p, class) in &self.entries {
            let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt();
            if d < best.0 {
                best = (d, *class);
            }
        }
        if best.0 <= tolerance {
            best.1
        } else {
            Class::Free
        }
    }
}

/// Space carving on a BEV grid. Every view that sees a cell centre votes
/// with the palette class of the pixel it lands on; a cell is occupied only
/// when all observing views vote occupied, and dynamic when all of them
/// see a dynamic color.
/// Unobserved cells are free.
pub fn toy_perception(palette: &Palette, views: &[(Camera, Image)], extent: &Aabb, config: &PerceptionConfig) -> Result<PerceptionMap> {
    if views.is_empty() {
        return Err(Error::input("perception needs at least one view"));
    }
    let [nx, ny] = config.dims;
    if nx == 0 || ny == 0 {
        return Err(Error::Config("perception grid must be non-empty".into()));
    }
    let mut map = PerceptionMap {
        dims: config.dims,
        extent: *extent,
        cells: vec![Class::Free; nx * ny],
    };
    for x in 0..nx {
        for y in 0..ny {
            let p = map.cell_center(x, y, config.height);
            let (mut seen, mut free, mut stat) = (false, false, false);
            for (cam, img) in views {
                if (p - cam.translation).norm() > config.max_range {
                    continue;
                }
                let Ok([u, v]) = cam.project(&p) else { continue };
                if u < 0.0 || v < 0.0 || u >= img.width as f64 || v >= img.height as f64 {
                    continue;
                }
                seen = true;
                match palette.classify(&img.get(v as usize, u as usize), config.tolerance) {
                    Class::Free => free = true,
                    Class::Static => stat = true,
                    Class::Dynamic => {}
                }
            }
            map.cells[x * ny + y] = if !seen || free {
                Class::Free
            } else if !stat {
                Class::Dynamic
            } else {
                Class::Static
            };
        }
    }
    Ok(map)
}

/// Ground-truth classes of the cell centres from the analytic scene.
pub fn ground_truth_map(scene: &Scene, t: i64, config: &PerceptionConfig) -> Result<PerceptionMap> {
    let ti = scene.time_index(t)?;
    let [nx, ny] = config.dims;
    let mut map = PerceptionMap {
        dims: config.dims,
        extent: scene.bounds,
        cells: vec![Class::Free; nx * ny],
    };
    for x in 0..nx {
        for y in 0..ny {
            let p = map.cell_center(x, y, config.height);
            let q = crate::scene::query_at_index(scene, &p, ti);
            map.cells[x * ny + y] = if q.density <= 0.0 {
                Class::Free
            } else if q.is_dynamic {
                Class::Dynamic
            } else {
                Class::Static
            };
        }
    }
    Ok(map)
}

/// Intersection over union of one class; an empty union counts as 1.
pub fn iou(pred: &PerceptionMap, gt: &PerceptionMap, class: Class) -> Result<f64> {
    if pred.dims != gt.dims {
        return Err(Error::input(format!("map dims differ: {:?} vs {:?}", pred.dims, gt.dims)));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, g) in pred.cells.iter().zip(&gt.cells) {
        let (a, b) = (*p == class, *g == class);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub counts: Vec<usize>,
    pub samples: usize,
    pub chunk: usize,
    pub perception: PerceptionConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            counts: vec![0, 1, 2, 3],
            samples: 128,
            chunk: crate::render::DEFAULT_CHUNK,
            perception: PerceptionConfig::default(),
        }
    }
}

/// One row of the evaluation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub n: usize,
    pub recovery: bool,
    pub iou_free: f64,
    pub iou_static: f64,
    pub iou_dynamic: f64,
    /// Mean PSNR of the failed views against their true images, capped.
    pub psnr: f64,
}

impl ReportRow {
    pub fn iou(&self, class: Class) -> f64 {
        match class {
            Class::Free => self.iou_free,
            Class::Static => self.iou_static,
            Class::Dynamic => self.iou_dynamic,
        }
    }

    /// Mean IoU over the object classes.
    pub fn object_iou(&self) -> f64 {
        (self.iou_static + self.iou_dynamic) / 2.0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// Failed views per count.
    pub manifests: Vec<FailureManifest>,
}

pub const REPORT_HEADER: &str = "n,recovery,iou_free,iou_static,iou_dynamic,psnr";

impl Report {
    pub fn row(&self, n: usize, recovery: bool) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.n == n && r.recovery == recovery)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.4}",
                r.n, r.recovery, r.iou_free, r.iou_static, r.iou_dynamic, r.psnr
            );
        }
        s
    }
}

/// Output of [`evaluate`]: the table and the recovered images per count.
pub struct Evaluation {
    pub report: Report,
    pub recovered: Vec<(usize, Vec<(ViewId, Image)>)>,
}

/// Failure sweep at the timestamp of `spec`. `truth` holds the true image of
/// every view at that time. For each count `n`, the first `n` seeded
/// failures are injected and perception runs with and without the
/// recovered views.
pub fn evaluate(
    model: &Model,
    mode: RenderMode,
    scene: &Scene,
    truth: &[(ViewId, Image)],
    spec: &FailureSpec,
    config: &EvalConfig,
) -> Result<Evaluation> {
    let t = spec.time(scene);
    let palette = Palette::from_scene(scene);
    let gt_map = ground_truth_map(scene, t, &config.perception)?;
    let perceive = |views: &[(ViewId, Image)]| -> Result<PerceptionMap> {
        let with_cams = views
            .iter()
            .map(|(id, img)| Ok((scene.view_camera(id)?, img.clone())))
            .collect::<Result<Vec<_>>>()?;
        if with_cams.is_empty() {
            // Every view dropped: nothing is observed.
            return Ok(PerceptionMap {
                dims: config.perception.dims,
                extent: scene.bounds,
                cells: vec![Class::Free; config.perception.dims[0] * config.perception.dims[1]],
            });
        }
        toy_perception(&palette, &with_cams, &scene.bounds, &config.perception)
    };
    let scores = |map: &PerceptionMap| -> Result<[f64; 3]> {
        Ok([
            iou(map, &gt_map, Class::Free)?,
            iou(map, &gt_map, Class::Static)?,
            iou(map, &gt_map, Class::Dynamic)?,
        ])
    };
    let truth_at: Vec<(ViewId, Image)> = truth.iter().filter(|(id, _)| id.t == t).cloned().collect();
    if truth_at.is_empty() {
        return Err(Error::input(format!("no true views at t={t}")));
    }
    let mut report = Report::default();
    let mut recovered_all = Vec::new();
    let mut cache: BTreeMap<ViewId, Image> = BTreeMap::new();
    for &n in &config.counts {
        let sweep = FailureSpec {
            count: n,
            t: Some(t),
            ..spec.clone()
        };
        let (broken, manifest) = inject_failure(scene, &truth_at, &sweep)?;
        let missing: Vec<ViewId> = manifest.views.iter().filter(|v| !cache.contains_key(*v)).cloned().collect();
        let fresh = recover_views(
            model,
            scene,
            &FailureManifest {
                mode: manifest.mode,
                views: missing,
            },
            mode,
            config.samples,
            config.chunk,
        )?;
        cache.extend(fresh);
        let recovered: Vec<(ViewId, Image)> = manifest.views.iter().map(|v| (v.clone(), cache[v].clone())).collect();
        let restored = merge_recovered(&broken, &recovered);
        let true_of = |id: &ViewId| -> Result<&Image> {
            truth_at
                .iter()
                .find(|(v, _)| v == id)
                .map(|(_, img)| img)
                .ok_or_else(|| Error::input(format!("no true image for {id}")))
        };
        let mean_psnr = |imgs: &dyn Fn(&ViewId) -> Image| -> Result<f64> {
            if manifest.views.is_empty() {
                return Ok(PSNR_CAP);
            }
            let mut s = 0.0;
            for id in &manifest.views {
                s += psnr(&imgs(id), true_of(id)?)?.min(PSNR_CAP);
            }
            Ok(s / manifest.views.len() as f64)
        };
        let [f0, s0, d0] = scores(&perceive(&broken)?)?;
        let p0 = mean_psnr(&|id| {
            Image::new(
                true_of(id).map(|i| i.width).unwrap_or(0),
                true_of(id).map(|i| i.height).unwrap_or(0),
            )
        })?;
        report.rows.push(ReportRow {
            n,
            recovery: false,
            iou_free: f0,
            iou_static: s0,
            iou_dynamic: d0,
            psnr: p0,
        });
        let [f1, s1, d1] = scores(&perceive(&restored)?)?;
        let p1 = mean_psnr(&|id| cache[id].clone())?;
        report.rows.push(ReportRow {
            n,
            recovery: true,
            iou_free: f1,
            iou_static: s1,
            iou_dynamic: d1,
            psnr: p1,
        });
        report.manifests.push(manifest);
        recovered_all.push((n, recovered));
    }
    Ok(Evaluation {
        report,
        recovered: recovered_all,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{small_bev, small_field, small_scene};
    use proptest::prelude::*;

    fn solid(c: [f64; 3]) -> Image {
        Image::filled(4, 3, c)
    }

    fn map(dims: [usize; 2], cells: Vec<Class>) -> PerceptionMap {
        PerceptionMap {
            dims,
            extent: Aabb {
                min: [0.0; 3],
                max: [1.0; 3],
            },
            cells,
        }
    }

    #[test]
    fn psnr_closed_form() {
        let a = solid([0.5, 0.5, 0.5]);
        let b = solid([0.6, 0.6, 0.6]);
        // MSE = 0.01 exactly up to the representation of 0.1.
        let mse: f64 = (0.6f64 - 0.5).powi(2);
        let expect = 10.0 * (1.0 / mse).log10();
        assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-12);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!(matches!(psnr(&a, &Image::new(3, 3)), Err(Error::Input(_))));
    }

    proptest! {
        #[test]
        fn psnr_symmetric_and_shift_invariant(
            px in proptest::collection::vec(0.0f64..0.5, 12),
            qx in proptest::collection::vec(0.0f64..0.5, 12),
            shift in 0.0f64..0.5,
        ) {
            let mut a = Image::new(2, 2);
            let mut b = Image::new(2, 2);
            for i in 0..4 {
                a.data[i] = [px[3 * i], px[3 * i + 1], px[3 * i + 2]];
                b.data[i] = [qx[3 * i], qx[3 * i + 1], qx[3 * i + 2]];
            }
            let p = psnr(&a, &b).unwrap();
            prop_assert_eq!(p, psnr(&b, &a).unwrap());
            let (mut a2, mut b2) = (a.clone(), b.clone());
            for px in a2.data.iter_mut().chain(b2.data.iter_mut()) {
                for c in px.iter_mut() {
                    *c += shift;
                }
            }
            let q = psnr(&a2, &b2).unwrap();
            if p.is_finite() {
                prop_assert!((p - q).abs() < 1e-6 * p.abs().max(1.0));
            }
        }
    }

    #[test]
    fn iou_cases() {
        use Class::*;
        let a = map([2, 2], vec![Static, Static, Free, Free]);
        assert_eq!(iou(&a, &a, Static).unwrap(), 1.0);
        let b = map([2, 2], vec![Free, Free, Static, Static]);
        assert_eq!(iou(&a, &b, Static).unwrap(), 0.0);
        let half = map([2, 2], vec![Static, Free, Free, Free]);
        assert_eq!(iou(&half, &a, Static).unwrap(), 0.5);
        assert_eq!(iou(&a, &a, Dynamic).unwrap(), 1.0);
        assert!(iou(&a, &map([1, 4], a.cells.clone()), Free).is_err());
    }

    fn truth(scene: &Scene, t: i64) -> Vec<(ViewId, Image)> {
        true_views(scene, t).unwrap()
    }

    #[test]
    fn empty_spec_is_identity() {
        let scene = small_scene("two-agent-intersection");
        let views = truth(&scene, 2);
        let (out, manifest) = inject_failure(&scene, &views, &FailureSpec::default()).unwrap();
        assert!(manifest.views.is_empty());
        assert_eq!(out, views);
    }

    #[test]
    fn failed_views_are_zeroed_and_others_untouched() {
        let scene = small_scene("two-agent-intersection");
        let views = truth(&scene, 2);
        let spec = FailureSpec {
            count: 2,
            seed: 7,
            ..Default::default()
        };
        let (out, manifest) = inject_failure(&scene, &views, &spec).unwrap();
        assert_eq!(manifest.views.len(), 2);
        assert_eq!(out.len(), views.len());
        for ((id, a), (id2, b)) in views.iter().zip(&out) {
            assert_eq!(id, id2);
            if manifest.views.contains(id) {
                assert!(b.data.iter().all(|p| *p == [0.0; 3]));
            } else {
                assert_eq!(a, b);
            }
        }
        let (_, again) = inject_failure(&scene, &views, &spec).unwrap();
        assert_eq!(again, manifest);

        let dropped = FailureSpec {
            mode: FailureMode::Dropped,
            ..spec
        };
        let (out, m) = inject_failure(&scene, &views, &dropped).unwrap();
        assert_eq!(out.len(), views.len() - 2);
        assert!(out.iter().all(|(id, _)| !m.views.contains(id)));
    }

    #[test]
    fn seeded_selections_are_nested() {
        let scene = small_scene("two-agent-intersection");
        let pool = candidates(&scene, 2, 0.3).unwrap();
        assert!(pool.len() >= 3);
        let pick = |n| {
            select_failures(
                &scene,
                &FailureSpec {
                    count: n,
                    seed: 3,
                    ..Default::default()
                },
            )
            .unwrap()
        };
        let all = pick(3);
        assert_eq!(pick(1)[..], all[..1]);
        assert_eq!(pick(2)[..], all[..2]);
        assert!(all.iter().all(|v| pool.contains(v)));
    }

    #[test]
    fn too_many_failures_is_an_input_error() {
        let scene = small_scene("two-agent-intersection");
        let spec = FailureSpec {
            count: 100,
            ..Default::default()
        };
        assert!(matches!(select_failures(&scene, &spec), Err(Error::Input(_))));
    }

    #[test]
    fn unknown_camera_is_an_input_error() {
        let scene = small_scene("static-room");
        let model = Model::build(&scene, &[], &small_field(), &small_bev(), 0).unwrap();
        let manifest = FailureManifest {
            mode: FailureMode::Failed,
            views: vec![ViewId::new("nobody", "front", 0)],
        };
        assert!(matches!(
            recover_views(&model, &scene, &manifest, RenderMode::Static, 8, 256),
            Err(Error::Input(_))
        ));
        let empty = FailureManifest::default();
        assert!(recover_views(&model, &scene, &empty, RenderMode::Static, 8, 256)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn recovery_is_deterministic() {
        let scene = small_scene("static-room");
        let model = Model::build(&scene, &[], &small_field(), &small_bev(), 0).unwrap();
        let manifest = FailureManifest {
            mode: FailureMode::Failed,
            views: vec![scene.views_at(0)[0].clone()],
        };
        let a = recover_views(&model, &scene, &manifest, RenderMode::Static, 8, 256).unwrap();
        let b = recover_views(&model, &scene, &manifest, RenderMode::Static, 8, 64).unwrap();
        assert_eq!(a, b);
    }

    fn with_cams(scene: &Scene, views: &[(ViewId, Image)]) -> Vec<(Camera, Image)> {
        views
            .iter()
            .map(|(id, img)| (scene.view_camera(id).unwrap(), img.clone()))
            .collect()
    }

    #[test]
    fn perception_on_true_views() {
        let scene = template_scene();
        let cfg = PerceptionConfig::default();
        let views = truth(&scene, 2);
        let palette = Palette::from_scene(&scene);
        let pred = toy_perception(&palette, &with_cams(&scene, &views), &scene.bounds, &cfg).unwrap();
        let gt = ground_truth_map(&scene, 2, &cfg).unwrap();
        assert_eq!(pred.cells.len(), 32 * 32);
        for class in CLASSES {
            let v = iou(&pred, &gt, class).unwrap();
            assert!(v > 0.4, "{class:?} iou {v}");
        }

        // Evidence is idempotent.
        let mut doubled = views.clone();
        doubled.push(views[0].clone());
        let again = toy_perception(&palette, &with_cams(&scene, &doubled), &scene.bounds, &cfg).unwrap();
        assert_eq!(again, pred);

        // All views zeroed: everything is free.
        let black: Vec<_> = views.iter().map(|(id, i)| (id.clone(), Image::new(i.width, i.height))).collect();
        let dark = toy_perception(&palette, &with_cams(&scene, &black), &scene.bounds, &cfg).unwrap();
        assert_eq!(dark.count(Class::Free), dark.cells.len());

        assert!(matches!(toy_perception(&palette, &[], &scene.bounds, &cfg), Err(Error::Input(_))));
    }

    fn template_scene() -> Scene {
        crate::templates::template("two-agent-intersection", 0).unwrap()
    }

    #[test]
    fn palette_classification() {
        let scene = template_scene();
        let p = Palette::from_scene(&scene);
        assert_eq!(p.classify(&[0.0; 3], 0.2), Class::Free);
        assert_eq!(p.classify(&scene.background, 0.2), Class::Free);
        let dynamic = scene.dynamic_primitives[0].albedo;
        assert_eq!(p.classify(&dynamic, 0.2), Class::Dynamic);
    }

    #[test]
    fn report_grid_and_identity_rows() {
        let scene = small_scene("two-agent-intersection");
        let model = Model::build(&scene, &[], &small_field(), &small_bev(), 0).unwrap();
        let t = 2;
        let views = truth(&scene, t);
        let spec = FailureSpec {
            seed: 1,
            ..Default::default()
        };
        let cfg = EvalConfig {
            samples: 8,
            perception: PerceptionConfig {
                dims: [8, 8],
                ..Default::default()
            },
            ..Default::default()
        };
        let ev = evaluate(&model, RenderMode::Static, &scene, &views, &spec, &cfg).unwrap();
        assert_eq!(ev.report.rows.len(), 8);
        let zero_a = ev.report.row(0, false).unwrap();
        let zero_b = ev.report.row(0, true).unwrap();
        assert_eq!(zero_a.iou_free, zero_b.iou_free);
        assert_eq!(zero_a.iou_static, zero_b.iou_static);
        assert_eq!(zero_a.iou_dynamic, zero_b.iou_dynamic);
        assert_eq!(zero_a.psnr, PSNR_CAP);
        let csv = ev.report.to_csv();
        assert_eq!(csv.lines().count(), 9);
        assert_eq!(csv.lines().next().unwrap(), REPORT_HEADER);
        for line in csv.lines() {
            assert_eq!(line.split(',').count(), 6);
        }
        let again = evaluate(&model, RenderMode::Static, &scene, &views, &spec, &cfg).unwrap();
        assert_eq!(again.report.to_csv(), csv);
        assert_eq!(ev.recovered[3].1.len(), 3);
    }
}
