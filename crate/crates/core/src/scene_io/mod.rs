//! Reading and writing every on-disk artifact: PLY scenes, camera JSON,
//! FTN1 tensors, feature stores, prompt banks, PGM masks and PNG renders.

mod cameras;
mod pgm;
mod ply;
mod png;
mod prompts;
mod store;
mod tensor;

pub use cameras::{cameras_from_json, cameras_to_json, load_cameras, save_cameras, CameraRecord};
pub use pgm::{load_label_image, load_mask, save_label_image, save_mask};
pub use ply::{load_ply, read_ply, save_ply, write_ply};
pub use png::{encode_gray_png, encode_rgb_png, save_gray_png, save_rgb_png};
pub use prompts::{load_prompt_bank, save_prompt_bank, PromptBank};
pub use store::{load_feature_store, read_feature_store, save_feature_store, write_feature_store, FeatureStore};
pub use tensor::{load_feature_map, load_tensor, read_tensor, save_feature_map, save_tensor, write_tensor};

use std::path::Path;

use crate::error::{Error, Result};
use crate::splat::{Camera, GaussianCloud};

/// A scene ready to render: the cloud, its views and a background color.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub cloud: GaussianCloud,
    /// `cameras[n].view == n`.
    pub cameras: Vec<Camera>,
    pub background: [f64; 3],
}

impl SceneBundle {
    pub fn new(cloud: GaussianCloud, cameras: Vec<Camera>, background: [f64; 3]) -> Result<Self> {
        for (i, cam) in cameras.iter().enumerate() {
            cam.validate()?;
            if cam.view != i {
                return Err(Error::Camera(format!(
                    "view indices must be contiguous from 0; position {i} holds view {}",
                    cam.view
                )));
            }
        }
        if !background.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(Error::InvalidArgument(format!(
                "background {background:?} outside [0,1]"
            )));
        }
        Ok(SceneBundle {
            cloud,
            cameras,
            background,
        })
    }

    /// Loads a PLY scene plus its camera file.
    pub fn load(ply: &Path, cameras: &Path, background: [f64; 3]) -> Result<Self> {
        SceneBundle::new(load_ply(ply)?, load_cameras(cameras)?, background)
    }

    pub fn view_count(&self) -> usize {
        self.cameras.len()
    }

    pub fn camera(&self, view: usize) -> Result<&Camera> {
        self.cameras.get(view).ok_or(Error::InvalidView {
            view,
            count: self.cameras.len(),
        })
    }

    /// Same cameras and background over a different cloud.
    pub fn with_cloud(&self, cloud: GaussianCloud) -> SceneBundle {
        SceneBundle {
            cloud,
            cameras: self.cameras.clone(),
            background: self.background,
        }
    }
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<std::io::BufReader<std::fs::File>> {
    std::fs::File::open(path)
        .map(std::io::BufReader::new)
        .map_err(|e| Error::io(path, e))
}
