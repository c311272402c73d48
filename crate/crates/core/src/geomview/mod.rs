//! Pinhole projection of instance points, depth-tested visibility and
//! per-frame binary object masks.

mod mask;

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mask::BinaryMask;

use crate::corpus::{
    CameraIntrinsics, CorpusError, DepthImage, FrameRecord, ObjectInstance, Pose, SceneRecord,
};

/// Points closer than this to the camera plane count as behind it.
pub const MIN_CAMERA_DEPTH_M: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("depth image is {found:?} but intrinsics are {expected:?}")]
    DimensionMismatch {
        expected: (u32, u32),
        found: (u32, u32),
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointStatus {
    /// Inside the image rectangle, not yet depth tested.
    InFrame,
    Visible,
    Occluded,
    OutOfFrame,
    BehindCamera,
    InvalidDepth,
}

impl PointStatus {
    fn in_frame(self) -> bool {
        matches!(
            self,
            PointStatus::InFrame
                | PointStatus::Visible
                | PointStatus::Occluded
                | PointStatus::InvalidDepth
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub u: f64,
    pub v: f64,
    pub z_cam: f64,
    pub status: PointStatus,
}

impl ProjectedPoint {
    /// Nearest pixel, clamped into the image for in-frame points.
    pub fn pixel(&self, width: u32, height: u32) -> (u32, u32) {
        let px = (self.u.round() as i64).clamp(0, width as i64 - 1) as u32;
        let py = (self.v.round() as i64).clamp(0, height as i64 - 1) as u32;
        (px, py)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub frame_id: i64,
    pub width: u32,
    pub height: u32,
    pub points: Vec<ProjectedPoint>,
}

impl ProjectionResult {
    pub fn count(&self, status: PointStatus) -> usize {
        self.points.iter().filter(|p| p.status == status).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectFrameStats {
    pub frame_id: i64,
    pub visible_point_count: usize,
    /// Number of set pixels in `mask`.
    pub pixel_area: usize,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewParams {
    pub tolerance_m: f64,
    pub splat_radius: u32,
    pub close_kernel: u32,
}

impl Default for ViewParams {
    fn default() -> Self {
        ViewParams {
            tolerance_m: 0.05,
            splat_radius: 2,
            close_kernel: 5,
        }
    }
}

pub fn project_points(points: &[Vector3<f64>], frame: &FrameRecord) -> ProjectionResult {
    project_with(points, frame.frame_id, &frame.intrinsics, &frame.pose_c2w)
}

pub fn project_with(
    points: &[Vector3<f64>],
    frame_id: i64,
    intr: &CameraIntrinsics,
    pose_c2w: &Pose,
) -> ProjectionResult {
    let (rot, t) = pose_c2w.world_to_camera();
    let (w, h) = (intr.width as f64, intr.height as f64);
    let points = points
        .iter()
        .map(|p| {
            let c = rot * p + t;
            if c.z <= MIN_CAMERA_DEPTH_M {
                return ProjectedPoint {
                    u: f64::NAN,
                    v: f64::NAN,
                    z_cam: c.z,
                    status: PointStatus::BehindCamera,
                };
            }
            let u = intr.fx * c.x / c.z + intr.cx;
            let v = intr.fy * c.y / c.z + intr.cy;
            let status = if (0.0..w).contains(&u) && (0.0..h).contains(&v) {
                PointStatus::InFrame
            } else {
                PointStatus::OutOfFrame
            };
            ProjectedPoint {
                u,
                v,
                z_cam: c.z,
                status,
            }
        })
        .collect();
    ProjectionResult {
        frame_id,
        width: intr.width,
        height: intr.height,
        points,
    }
}

/// Classifies every in-frame point against the depth map with a
/// nearest-pixel lookup. Already-tested points are re-tested, so one
/// projection can be checked at several tolerances.
pub fn visibility_test(
    proj: &ProjectionResult,
    depth: &DepthImage,
    tolerance_m: f64,
) -> Result<ProjectionResult, GeomError> {
    if depth.dimensions() != (proj.width, proj.height) {
        return Err(GeomError::DimensionMismatch {
            expected: (proj.width, proj.height),
            found: depth.dimensions(),
        });
    }
    let points = proj
        .points
        .iter()
        .map(|p| {
            if !p.status.in_frame() {
                return *p;
            }
            let (px, py) = p.pixel(proj.width, proj.height);
            let raw = depth.get_pixel(px, py).0[0];
            let status = if raw == 0 {
                PointStatus::InvalidDepth
            } else if p.z_cam - raw as f64 / 1000.0 > tolerance_m {
                PointStatus::Occluded
            } else {
                PointStatus::Visible
            };
            ProjectedPoint { status, ..*p }
        })
        .collect();
    Ok(ProjectionResult {
        points,
        ..proj.clone()
    })
}

/// Splats a disc per visible point, then applies a square closing.
pub fn rasterize_mask(
    proj: &ProjectionResult,
    splat_radius: u32,
    close_kernel: u32,
) -> ObjectFrameStats {
    let mut mask = BinaryMask::new(proj.width, proj.height);
    let r = splat_radius as i64;
    let mut visible = 0;
    for p in proj.points.iter().filter(|p| p.status == PointStatus::Visible) {
        visible += 1;
        let (cx, cy) = p.pixel(proj.width, proj.height);
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    mask.set_checked(cx as i64 + dx, cy as i64 + dy);
                }
            }
        }
    }
    let mask = mask.closed(close_kernel);
    ObjectFrameStats {
        frame_id: proj.frame_id,
        visible_point_count: visible,
        pixel_area: mask.count(),
        mask,
    }
}

/// Visibility and mask for one instance in one frame.
pub fn object_frame_stats(
    positions: &[Vector3<f64>],
    frame: &FrameRecord,
    depth: &DepthImage,
    params: &ViewParams,
) -> Result<ObjectFrameStats, GeomError> {
    let proj = project_points(positions, frame);
    let tested = visibility_test(&proj, depth, params.tolerance_m)?;
    Ok(rasterize_mask(
        &tested,
        params.splat_radius,
        params.close_kernel,
    ))
}

/// One entry per frame, in frame order. Loads depth maps from disk.
pub fn object_frame_table(
    scene: &SceneRecord,
    instance: &ObjectInstance,
    params: &ViewParams,
) -> Result<Vec<ObjectFrameStats>, GeomError> {
    let depths = scene
        .frames
        .par_iter()
        .map(|f| f.load_depth())
        .collect::<Result<Vec<_>, _>>()?;
    object_frame_table_with(scene, instance, &depths, params)
}

/// As [`object_frame_table`] with depth maps already in memory
/// (`depths[k]` belongs to `scene.frames[k]`).
pub fn object_frame_table_with(
    scene: &SceneRecord,
    instance: &ObjectInstance,
    depths: &[DepthImage],
    params: &ViewParams,
) -> Result<Vec<ObjectFrameStats>, GeomError> {
    let positions: Vec<Vector3<f64>> = scene
        .instance_points(instance)
        .iter()
        .map(|p| p.position())
        .collect();
    scene
        .frames
        .par_iter()
        .zip(depths.par_iter())
        .map(|(frame, depth)| object_frame_stats(&positions, frame, depth, params))
        .collect()
}

/// Writes the `frame_id,visible_points,pixel_area` debug table.
pub fn write_frame_table_csv(path: &Path, table: &[ObjectFrameStats]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "frame_id,visible_points,pixel_area")?;
    for row in table {
        writeln!(
            out,
            "{},{},{}",
            row.frame_id, row.visible_point_count, row.pixel_area
        )?;
    }
    out.flush()
}
