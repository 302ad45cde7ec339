//! Small scenes and models for fast unit tests.

use crate::bev::BevConfig;
use crate::encoding::HashGridConfig;
use crate::fields::FieldConfig;
use crate::mlp::Activation;
use crate::scene::Scene;
use crate::templates::template;

/// A template with 16x16 cameras.
pub fn small_scene(name: &str) -> Scene {
    let mut s = template(name, 0).unwrap();
    for a in &mut s.agents {
        for c in &mut a.cameras {
            c.focal *= 16.0 / c.width as f64;
            c.width = 16;
            c.height = 16;
        }
    }
    s
}

pub fn small_field() -> FieldConfig {
    FieldConfig {
        grid: HashGridConfig {
            levels: 2,
            base_resolution: 8,
            max_resolution: 16,
            log2_table_size: 10,
            features_per_level: 2,
        },
        hidden_width: 16,
        hidden_layers: 1,
        activation: Activation::Relu,
        dir_frequencies: 2,
        code_dim: 4,
    }
}

pub fn small_bev() -> BevConfig {
    BevConfig {
        channels: 16,
        dims: [8, 8, 8],
        max_range: 30.0,
    }
}
