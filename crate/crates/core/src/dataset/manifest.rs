use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationParams;
use crate::dataset::state::StateLayout;
use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Vec3};
use crate::kinematics::KinematicChain;

/// Quaternion columns are always read scalar-first.
pub const QUATERNION_ORDER: &str = "wxyz";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClipTags {
    pub material: String,
    pub structure: String,
    #[serde(default)]
    pub position: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    /// Clip directory, relative to the manifest file.
    pub path: String,
    #[serde(flatten)]
    pub tags: ClipTags,
}

/// Pinhole camera: `extrinsic` maps camera-frame points into the robot base frame.
/// Camera axes: x right, y down, z along the optical axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub extrinsic: RigidTransform,
    pub focal: f64,
    pub principal: [f64; 2],
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    /// Pixel coordinates and depth of a base-frame point; `None` behind the camera.
    pub fn project(&self, p_base: &Vec3) -> Option<(f64, f64, f64)> {
        let p = self.extrinsic.invert().apply(p_base);
        if p.z <= 1e-9 {
            return None;
        }
        Some((
            self.focal * p.x / p.z + self.principal[0],
            self.focal * p.y / p.z + self.principal[1],
            p.z,
        ))
    }

    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let p = Vec3::new(
            (u - self.principal[0]) * depth / self.focal,
            (v - self.principal[1]) * depth / self.focal,
            depth,
        );
        self.extrinsic.apply(&p)
    }
}

fn one() -> f64 {
    1.0
}

fn default_order() -> String {
    QUATERNION_ORDER.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub clips: Vec<ClipEntry>,
    pub video_rate: f64,
    pub state_rate: f64,
    pub layout: StateLayout,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<KinematicChain>,
    #[serde(default)]
    pub calibration: CalibrationParams,
    #[serde(default = "one")]
    pub zoom: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<CameraModel>,
    /// Sensor-to-tool transform is `pose(p_E, o_E) ∘ sensor_mount`.
    #[serde(default)]
    pub sensor_mount: RigidTransform,
    /// When true `forces.csv` already holds tool-frame forces.
    #[serde(default)]
    pub forces_calibrated: bool,
    #[serde(default = "default_order")]
    pub quaternion_order: String,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn clip_dir(&self, entry: &ClipEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Structural checks; clip directory existence is checked by [`load_manifest`].
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::config("name", "must not be empty"));
        }
        if !(self.video_rate.is_finite() && self.video_rate > 0.0) {
            return Err(Error::config("video_rate", "must be > 0"));
        }
        if !(self.state_rate.is_finite() && self.state_rate > 0.0) {
            return Err(Error::config("state_rate", "must be > 0"));
        }
        if self.state_rate < self.video_rate {
            return Err(Error::config(
                "state_rate",
                format!(
                    "state rate {} Hz is below the video rate {} Hz",
                    self.state_rate, self.video_rate
                ),
            ));
        }
        if !(self.zoom.is_finite() && self.zoom >= 1.0) {
            return Err(Error::config("zoom", format!("must be >= 1, got {}", self.zoom)));
        }
        if self.quaternion_order != QUATERNION_ORDER {
            return Err(Error::config(
                "quaternion_order",
                format!("only \"{QUATERNION_ORDER}\" is supported"),
            ));
        }
        self.layout.validate()?;
        self.calibration.validate()?;
        if let Some(chain) = &self.chain {
            chain.validate()?;
        }
        if let Some(cam) = &self.camera {
            crate::geometry::check_rotation(&cam.extrinsic.rotation, 1e-6)?;
            if !(cam.focal > 0.0) {
                return Err(Error::config("camera.focal", "must be > 0"));
            }
        }
        for (i, c) in self.clips.iter().enumerate() {
            if c.path.is_empty() {
                return Err(Error::config(format!("clips[{i}].path"), "must not be empty"));
            }
        }
        Ok(())
    }
}

pub fn parse_manifest(text: &str, root: impl Into<PathBuf>) -> Result<DatasetManifest> {
    let mut m: DatasetManifest = serde_json::from_str(text)?;
    m.root = root.into();
    m.validate()?;
    Ok(m)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = parse_manifest(&text, root)?;
    for (i, c) in m.clips.iter().enumerate() {
        let dir = m.clip_dir(c);
        if !dir.is_dir() {
            return Err(Error::config(
                format!("clips[{i}].path"),
                format!("clip directory {} does not exist", dir.display()),
            ));
        }
    }
    Ok(m)
}

pub fn manifest_to_string(m: &DatasetManifest) -> Result<String> {
    let mut s = serde_json::to_string_pretty(m)?;
    s.push('\n');
    Ok(s)
}

pub fn save_manifest(m: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, manifest_to_string(m)?).map_err(|e| Error::io(path, e))
}
