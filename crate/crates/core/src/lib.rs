//! Collaborative neural rendering fields for recovering failed camera views
//! in multi-agent scenes.

pub mod bev;
pub mod checkpoint;
pub mod encoding;
pub mod error;
pub mod fields;
pub mod gradcheck;
pub mod losses;
pub mod mlp;
pub mod raster;
pub mod recovery;
pub mod render;
pub mod run;
pub mod scene;
pub mod templates;
pub mod train;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
