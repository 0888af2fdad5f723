//! Synthetic scenes, depth rasters and training samples.

mod dataset;
pub mod raster;
mod sample;
pub mod scene;

use thiserror::Error;

use crate::decomposition::DecompError;

pub use dataset::{
    build_dataset, generate_samples, read_manifest, scene_seed, write_manifest, Dataset,
    DatasetConfig, ManifestRecord, Split, SplitSamples, MANIFEST_FILE,
};
pub(crate) use dataset::splitmix64;
pub use raster::{load_depth_raster, save_depth_raster, DepthFormat};
pub use sample::{make_sample, Sample};
pub use scene::{random_room, render_scene, Camera, Primitive, RoomParams, SceneSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("scene has no primitives")]
    EmptyScene,
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("cannot read {0}")]
    UnreadableFile(String),
    #[error("bad raster header: {0}")]
    BadHeader(String),
    #[error("unknown depth format {0:?}")]
    UnknownFormat(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Decomposition(#[from] DecompError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
