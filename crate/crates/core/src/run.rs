//! Run configuration and the on-disk layout of scenes and runs.
//!
//! A scene directory holds `scene.toml` and, under `views/`, one PPM image,
//! mask grid and forward/backward flow grid per view. A run directory holds
//! the resolved `config.toml`, `metrics.csv`, `checkpoint.cfck` and the
//! evaluation outputs.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bev::BevConfig;
use crate::error::{Error, Result};
use crate::fields::FieldConfig;
use crate::raster::{FlowGrid, Image, MaskGrid};
use crate::recovery::{select_failures, EvalConfig, Evaluation, FailureSpec};
use crate::render::DEFAULT_CHUNK;
use crate::scene::{render_labels, Scene, ViewId, ViewLabels, LABEL_STEPS};
use crate::train::TrainConfig;

pub const SCENE_FILE: &str = "scene.toml";
pub const VIEWS_DIR: &str = "views";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.cfck";
pub const REPORT_FILE: &str = "report.csv";
pub const RECOVERED_DIR: &str = "recovered";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSettings {
    pub samples: usize,
    pub chunk: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            samples: 128,
            chunk: DEFAULT_CHUNK,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Scene directory written by `gen-scene`.
    pub scene: PathBuf,
    pub out: PathBuf,
    /// Seeds model initialization and ray sampling.
    pub seed: u64,
    /// Steps between checkpoint writes during training; 0 writes only the
    /// initial and final checkpoints.
    pub checkpoint_every: u64,
    pub train: TrainConfig,
    pub field: FieldConfig,
    pub bev: BevConfig,
    pub failure: FailureSpec,
    pub render: RenderSettings,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: PathBuf::from("scene"),
            out: PathBuf::from("run"),
            seed: 0,
            checkpoint_every: 500,
            train: TrainConfig::default(),
            field: FieldConfig::default(),
            bev: BevConfig::default(),
            failure: FailureSpec::default(),
            render: RenderSettings::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Propagates the run seed and checks every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.train.validate()?;
        if self.render.samples == 0 || self.render.chunk == 0 || self.eval.samples == 0 || self.eval.chunk == 0 {
            return Err(Error::Config("render samples and chunk must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.failure.min_overlap) {
            return Err(Error::Config("failure.min_overlap must be in [0, 1]".into()));
        }
        Ok(self)
    }

    /// Writes the resolved config into the run directory.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))
    }

    /// Views kept out of training: the failures of the largest evaluated
    /// count. Seeded selections are nested, so every sweep entry only
    /// recovers views the model never saw.
    pub fn held_out(&self, scene: &Scene) -> Result<Vec<ViewId>> {
        let count = self.eval.counts.iter().copied().max().unwrap_or(0).max(self.failure.count);
        if count == 0 && self.failure.views.is_none() {
            return Ok(Vec::new());
        }
        select_failures(
            scene,
            &FailureSpec {
                count,
                ..self.failure.clone()
            },
        )
    }
}

fn view_paths(dir: &Path, id: &ViewId) -> [PathBuf; 4] {
    let base = dir.join(VIEWS_DIR);
    let stem = id.stem();
    [
        base.join(format!("{stem}.ppm")),
        base.join(format!("{stem}.mask.grid")),
        base.join(format!("{stem}.fw.grid")),
        base.join(format!("{stem}.bw.grid")),
    ]
}

/// Writes the scene file and oracle labels of every view.
pub fn write_scene_dir(scene: &Scene, dir: &Path) -> Result<()> {
    scene.validate()?;
    let views = dir.join(VIEWS_DIR);
    fs::create_dir_all(&views).map_err(|e| Error::io(&views, e))?;
    scene.save(&dir.join(SCENE_FILE))?;
    scene.all_views().par_iter().try_for_each(|id| {
        let labels = render_labels(scene, &scene.view_camera(id)?, id.t, LABEL_STEPS)?;
        let [img, mask, fw, bw] = view_paths(dir, id);
        labels.image.write_ppm(&img)?;
        labels.mask.save(&mask)?;
        labels.flow_fw.save(&fw)?;
        labels.flow_bw.save(&bw)
    })
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    Scene::load(&dir.join(SCENE_FILE))
}

/// Labels of every view of the scene directory.
pub fn load_labels(dir: &Path, scene: &Scene) -> Result<Vec<(ViewId, ViewLabels)>> {
    scene
        .all_views()
        .into_iter()
        .map(|id| {
            let [img, mask, fw, bw] = view_paths(dir, &id);
            let labels = ViewLabels {
                image: Image::read_ppm(&img)?,
                mask: MaskGrid::load(&mask)?,
                flow_fw: FlowGrid::load(&fw)?,
                flow_bw: FlowGrid::load(&bw)?,
            };
            Ok((id, labels))
        })
        .collect()
}

/// Writes the report table and the recovered images of every count.
pub fn write_evaluation(dir: &Path, ev: &Evaluation) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let report = dir.join(REPORT_FILE);
    fs::write(&report, ev.report.to_csv()).map_err(|e| Error::io(&report, e))?;
    for (n, views) in &ev.recovered {
        let sub = dir.join(RECOVERED_DIR).join(format!("n{n}"));
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for (id, img) in views {
            img.write_ppm(&sub.join(format!("{}.ppm", id.stem())))?;
        }
    }
    Ok(())
}
