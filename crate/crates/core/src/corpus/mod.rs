//! On-disk scan corpus: scenes with per-point instance labels and posed RGB-D frames.
//!
//! A scene is described by a JSON manifest that points at a binary PLY point
//! cloud, an instance table and a list of frames. Depth frames are 16-bit
//! grayscale PNGs in millimeters with 0 marking invalid pixels. Poses are
//! camera-to-world and the loader refuses any other convention.

mod manifest;
mod ply;
pub mod synthetic;

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, RgbImage};
use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use manifest::{load_manifest, write_manifest, Manifest, ManifestFrame};
pub use ply::{read_ply, write_ply};
pub use synthetic::{generate_synthetic_scene, Primitive, SyntheticSpec};

/// 16-bit depth image, values in millimeters, 0 = invalid.
pub type DepthImage = ImageBuffer<Luma<u16>, Vec<u16>>;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("missing file for `{field}`: {}", path.display())]
    MissingFile { field: String, path: PathBuf },
    #[error("schema violation in `{field}`: {detail}")]
    SchemaViolation { field: String, detail: String },
    #[error("invariant violation in `{field}`: {detail}")]
    InvariantViolation { field: String, detail: String },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl CorpusError {
    pub(crate) fn schema(field: impl Into<String>, detail: impl Into<String>) -> Self {
        CorpusError::SchemaViolation {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn invariant(field: impl Into<String>, detail: impl Into<String>) -> Self {
        CorpusError::InvariantViolation {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.into(),
            source,
        }
    }
}

/// A colored point, position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub r: u8,
    pub g: u8,
    pub b: u8,
}

impl Point {
    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.x as f64, self.y as f64, self.z as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub instance_id: i64,
    pub category: String,
    pub point_indices: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn validate(&self, field: &str) -> Result<(), CorpusError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(CorpusError::invariant(field, "focal lengths must be positive"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(CorpusError::invariant(field, "cx outside [0, width)"));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(CorpusError::invariant(field, "cy outside [0, height)"));
        }
        Ok(())
    }
}

/// Rigid camera-to-world transform stored as a row-major 4x4 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pose(pub [f64; 16]);

impl Pose {
    pub fn identity() -> Self {
        let mut m = [0.0; 16];
        m[0] = 1.0;
        m[5] = 1.0;
        m[10] = 1.0;
        m[15] = 1.0;
        Pose(m)
    }

    pub fn from_rotation_translation(rot: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        let mut m = [0.0; 16];
        for r in 0..3 {
            for c in 0..3 {
                m[r * 4 + c] = rot[(r, c)];
            }
            m[r * 4 + 3] = t[r];
        }
        m[15] = 1.0;
        Pose(m)
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        Matrix4::from_row_slice(&self.0)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let m = &self.0;
        Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10])
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.0[3], self.0[7], self.0[11])
    }

    /// World-to-camera transform, using the rigid-body inverse.
    pub fn world_to_camera(&self) -> (Matrix3<f64>, Vector3<f64>) {
        let rt = self.rotation().transpose();
        let t = -(rt * self.translation());
        (rt, t)
    }

    pub fn validate(&self, field: &str) -> Result<(), CorpusError> {
        let m = &self.0;
        if m.iter().any(|v| !v.is_finite()) {
            return Err(CorpusError::invariant(field, "non-finite pose entry"));
        }
        let bottom = [m[12], m[13], m[14], m[15] - 1.0];
        if bottom.iter().any(|v| v.abs() > 1e-6) {
            return Err(CorpusError::invariant(field, "bottom row must be (0,0,0,1)"));
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-4 {
            return Err(CorpusError::invariant(
                field,
                format!("rotation block not orthonormal (max error {err:.2e})"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: i64,
    pub rgb_path: PathBuf,
    pub depth_path: PathBuf,
    pub intrinsics: CameraIntrinsics,
    pub pose_c2w: Pose,
}

impl FrameRecord {
    pub fn load_rgb(&self) -> Result<RgbImage, CorpusError> {
        let img = image::open(&self.rgb_path).map_err(|source| CorpusError::Image {
            path: self.rgb_path.clone(),
            source,
        })?;
        Ok(img.to_rgb8())
    }

    pub fn load_depth(&self) -> Result<DepthImage, CorpusError> {
        let img = image::open(&self.depth_path).map_err(|source| CorpusError::Image {
            path: self.depth_path.clone(),
            source,
        })?;
        match img {
            image::DynamicImage::ImageLuma16(d) => Ok(d),
            _ => Err(CorpusError::schema(
                "depth bit depth",
                format!("{} is not 16-bit grayscale", self.depth_path.display()),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    pub points: Vec<Point>,
    pub instances: Vec<ObjectInstance>,
    pub frames: Vec<FrameRecord>,
    pub superpoint_ids: Option<Vec<i64>>,
}

impl SceneRecord {
    pub fn instance(&self, instance_id: i64) -> Option<&ObjectInstance> {
        self.instances.iter().find(|i| i.instance_id == instance_id)
    }

    pub fn frame(&self, frame_id: i64) -> Option<&FrameRecord> {
        self.frames.iter().find(|f| f.frame_id == frame_id)
    }

    /// Checks the structural invariants that do not need the filesystem.
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.scene_id.trim().is_empty() {
            return Err(CorpusError::schema("scene_id", "empty"));
        }
        if self.points.is_empty() {
            return Err(CorpusError::invariant("points", "point cloud is empty"));
        }
        let n = self.points.len();
        let mut owner: Vec<Option<i64>> = vec![None; n];
        let mut seen_ids = std::collections::HashSet::new();
        for (k, inst) in self.instances.iter().enumerate() {
            let field = format!("instances[{k}]");
            if !seen_ids.insert(inst.instance_id) {
                return Err(CorpusError::invariant(
                    format!("{field}.instance_id"),
                    format!("duplicate instance id {}", inst.instance_id),
                ));
            }
            if inst.category.is_empty() {
                return Err(CorpusError::invariant(format!("{field}.category"), "empty"));
            }
            if inst.point_indices.is_empty() {
                return Err(CorpusError::invariant(
                    format!("{field}.point_indices"),
                    "instance has no points",
                ));
            }
            for w in inst.point_indices.windows(2) {
                if w[0] >= w[1] {
                    return Err(CorpusError::invariant(
                        format!("{field}.point_indices"),
                        "indices must be sorted and unique",
                    ));
                }
            }
            for &idx in &inst.point_indices {
                let idx = idx as usize;
                if idx >= n {
                    return Err(CorpusError::invariant(
                        format!("{field}.point_indices"),
                        format!("index {idx} out of range for {n} points"),
                    ));
                }
                if let Some(other) = owner[idx] {
                    return Err(CorpusError::invariant(
                        format!("{field}.point_indices"),
                        format!("point {idx} also belongs to instance {other}"),
                    ));
                }
                owner[idx] = Some(inst.instance_id);
            }
        }
        if let Some(sp) = &self.superpoint_ids {
            if sp.len() != n {
                return Err(CorpusError::invariant(
                    "superpoints",
                    format!("{} ids for {} points", sp.len(), n),
                ));
            }
        }
        for (k, frame) in self.frames.iter().enumerate() {
            frame.intrinsics.validate(&format!("frames[{k}].intrinsics"))?;
            frame.pose_c2w.validate(&format!("frames[{k}].pose_c2w"))?;
        }
        Ok(())
    }

    /// The points of one instance in index order.
    pub fn instance_points(&self, inst: &ObjectInstance) -> Vec<Point> {
        inst.point_indices
            .iter()
            .map(|&i| self.points[i as usize])
            .collect()
    }
}

/// Lowercase, trim and collapse internal whitespace.
pub fn normalize_category(raw: &str) -> String {
    raw.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

pub(crate) fn require_file(field: &str, path: &Path) -> Result<(), CorpusError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CorpusError::MissingFile {
            field: field.to_string(),
            path: path.to_path_buf(),
        })
    }
}
