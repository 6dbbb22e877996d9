//! Two-stage multi-camera 3D object detection on synthetic surround-view scenes.

pub mod autodiff;
pub mod detection_head;
pub mod encoder;
pub mod geometry;
pub mod loss;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod proposal_head;
pub mod scene_sim;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
    #[error(transparent)]
    Sim(#[from] scene_sim::SimError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
