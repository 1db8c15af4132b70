use std::collections::BTreeMap;
use std::path::Path;

use glam::{DMat3, DVec3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splat::Camera;

/// One camera as stored in the JSON array. `R` is row-major and maps world
/// to camera coordinates: `x_cam = R·x_world + t`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub view: usize,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(rename = "R")]
    pub rotation: [f64; 9],
    pub t: [f64; 3],
}

impl CameraRecord {
    pub fn to_camera(&self) -> Result<Camera> {
        let rotation = DMat3::from_cols_array(&self.rotation).transpose();
        Camera::new(
            self.view,
            self.width,
            self.height,
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            rotation,
            DVec3::from_array(self.t),
        )
    }

    pub fn from_camera(cam: &Camera) -> Self {
        CameraRecord {
            view: cam.view,
            width: cam.width,
            height: cam.height,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            rotation: cam.rotation.transpose().to_cols_array(),
            t: cam.translation.to_array(),
        }
    }
}

/// Parses a camera array, ordered by view index.
pub fn cameras_from_json(text: &str) -> Result<Vec<Camera>> {
    let records: Vec<CameraRecord> =
        serde_json::from_str(text).map_err(|e| Error::parse("cameras", e.to_string()))?;
    let mut by_view = BTreeMap::new();
    for rec in records {
        let cam = rec.to_camera()?;
        if by_view.insert(rec.view, cam).is_some() {
            return Err(Error::Camera(format!("duplicate view index {}", rec.view)));
        }
    }
    Ok(by_view.into_values().collect())
}

pub fn cameras_to_json(cameras: &[Camera]) -> String {
    let records: Vec<CameraRecord> = cameras.iter().map(CameraRecord::from_camera).collect();
    serde_json::to_string_pretty(&records).expect("camera records serialize")
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    cameras_from_json(&text)
}

pub fn save_cameras(cameras: &[Camera], path: &Path) -> Result<()> {
    std::fs::write(path, cameras_to_json(cameras)).map_err(|e| Error::io(path, e))
}
