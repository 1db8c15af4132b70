//! Training-free feature fields on pre-trained 3D Gaussian Splatting scenes.
//!
//! The rasterizer records how much each Gaussian contributes to each pixel.
//! Back-projection turns those weights plus 2D feature maps into one feature
//! vector per Gaussian. Queries then segment, edit and label the scene by
//! feature similarity.

pub mod backproject;
pub mod error;
pub mod exec;
pub mod identity;
pub mod maps;
pub mod query;
pub mod raster;
pub mod scene_io;
pub mod splat;
pub mod synthetic;

pub use backproject::{
    backproject, backproject_timed, backproject_with, prune_cloud, BackprojectionConfig, BackprojectionMode,
    BackprojectionReport, Backprojector, IndexMap,
};
pub use error::{Error, Result};
pub use exec::Execution;
pub use identity::{
    classify_pixels, encode_scene, grouping_miou, orthogonal_codes, train_contrastive, IdentityCodebook, LabeledView,
    TrainConfig,
};
pub use maps::{FeatureMap, LabelImage, Mask, Tensor};
pub use query::{
    delete, extract, knn_transfer, mask_metrics, segment_2d, segment_3d, similarity, AffordanceSource, KnnOptions,
    QuerySpec, SegmentationResult,
};
pub use raster::{accumulate_weights, oracle_render, render, render_features, RenderOptions, RenderOutput, WeightSink};
pub use scene_io::{FeatureStore, PromptBank, SceneBundle};
pub use splat::{Camera, Gaussian, GaussianCloud};
