//! Frame selection and the three image stimuli shown to the captioner: the
//! masked crop of the best frame, the same frame with the object outlined, and
//! up to eight outlined context frames sampled over the frames where the
//! object is visible.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geomview::{BinaryMask, ObjectFrameStats};

pub const HIGHLIGHT_YELLOW: [u8; 3] = [255, 255, 0];

#[derive(Debug, Error)]
pub enum StageError {
    #[error("object is unannotatable: {0}")]
    Unannotatable(String),
    #[error("mask is empty")]
    EmptyMask,
    #[error("mask is {mask:?} but image is {image:?}")]
    SizeMismatch { mask: (u32, u32), image: (u32, u32) },
    #[error("frame {0} missing from scene")]
    UnknownFrame(i64),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error("image error on {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageParams {
    pub min_area: usize,
    pub context_count: usize,
    pub crop_margin: f64,
    pub highlight_color: [u8; 3],
    pub highlight_thickness: u32,
}

impl Default for StageParams {
    fn default() -> Self {
        StageParams {
            min_area: 50,
            context_count: 8,
            crop_margin: 0.1,
            highlight_color: HIGHLIGHT_YELLOW,
            highlight_thickness: 3,
        }
    }
}

/// Frame with the largest mask area; ties go to the lowest frame id.
pub fn select_best_frame(table: &[ObjectFrameStats], min_area: usize) -> Result<i64, StageError> {
    let best = table
        .iter()
        .max_by(|a, b| {
            a.pixel_area
                .cmp(&b.pixel_area)
                .then_with(|| b.frame_id.cmp(&a.frame_id))
        })
        .ok_or_else(|| StageError::Unannotatable("no frames".into()))?;
    if best.pixel_area < min_area {
        return Err(StageError::Unannotatable(format!(
            "largest area {} px is below {min_area} px",
            best.pixel_area
        )));
    }
    Ok(best.frame_id)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSelection {
    pub frame_ids: Vec<i64>,
    /// Fewer eligible frames than requested; every eligible frame was taken.
    pub fallback: bool,
}

/// Evenly spaced picks over the eligible frames (area ≥ `min_area`), always
/// including the first and last.
pub fn sample_context_frames(
    table: &[ObjectFrameStats],
    count: usize,
    min_area: usize,
) -> Result<ContextSelection, StageError> {
    let mut eligible: Vec<i64> = table
        .iter()
        .filter(|r| r.pixel_area >= min_area)
        .map(|r| r.frame_id)
        .collect();
    eligible.sort_unstable();
    let n = eligible.len();
    if n == 0 {
        return Err(StageError::Unannotatable("no frame reaches the minimum area".into()));
    }
    if n < count {
        return Ok(ContextSelection {
            frame_ids: eligible,
            fallback: true,
        });
    }
    if count <= 1 {
        return Ok(ContextSelection {
            frame_ids: eligible.into_iter().take(count).collect(),
            fallback: false,
        });
    }
    // round(i * (n-1) / (count-1)) in integers, halves rounded up.
    let (num, den) = (n - 1, count - 1);
    let mut ids: Vec<i64> = (0..count)
        .map(|i| eligible[(2 * i * num + den) / (2 * den)])
        .collect();
    ids.dedup();
    Ok(ContextSelection {
        frame_ids: ids,
        fallback: false,
    })
}

fn check_size(img: &RgbImage, mask: &BinaryMask) -> Result<(), StageError> {
    if img.dimensions() != mask.dimensions() {
        return Err(StageError::SizeMismatch {
            mask: mask.dimensions(),
            image: img.dimensions(),
        });
    }
    Ok(())
}

/// Inclusive crop rectangle: mask bounding box grown by
/// `floor(margin_frac * extent)` per side on each axis, clamped to the image.
pub fn crop_rect(mask: &BinaryMask, margin_frac: f64) -> Option<(u32, u32, u32, u32)> {
    let (x0, y0, x1, y1) = mask.bbox()?;
    let mx = (margin_frac * (x1 - x0 + 1) as f64).floor() as u32;
    let my = (margin_frac * (y1 - y0 + 1) as f64).floor() as u32;
    Some((
        x0.saturating_sub(mx),
        y0.saturating_sub(my),
        (x1 + mx).min(mask.width() - 1),
        (y1 + my).min(mask.height() - 1),
    ))
}

/// Blacks out non-object pixels and crops to the padded mask bounding box.
pub fn render_crop(
    rgb: &RgbImage,
    mask: &BinaryMask,
    margin_frac: f64,
) -> Result<RgbImage, StageError> {
    check_size(rgb, mask)?;
    let (x0, y0, x1, y1) = crop_rect(mask, margin_frac).ok_or(StageError::EmptyMask)?;
    Ok(RgbImage::from_fn(x1 - x0 + 1, y1 - y0 + 1, |x, y| {
        let (sx, sy) = (x + x0, y + y0);
        if mask.get(sx, sy) {
            *rgb.get_pixel(sx, sy)
        } else {
            Rgb([0, 0, 0])
        }
    }))
}

/// Mask pixels with at least one unset 4-neighbour; pixels past the image
/// border count as unset.
pub fn mask_boundary(mask: &BinaryMask) -> BinaryMask {
    BinaryMask::from_fn(mask.width(), mask.height(), |x, y| {
        if !mask.get(x, y) {
            return false;
        }
        let (x, y) = (x as i64, y as i64);
        [(1, 0), (-1, 0), (0, 1), (0, -1)]
            .iter()
            .any(|(dx, dy)| !mask.get_signed(x + dx, y + dy))
    })
}

/// Paints the mask contour, thickened to a band of `thickness` pixels
/// (Chebyshev distance < `thickness` from the boundary), in `color`.
pub fn render_highlight(
    rgb: &RgbImage,
    mask: &BinaryMask,
    color: [u8; 3],
    thickness: u32,
) -> Result<RgbImage, StageError> {
    check_size(rgb, mask)?;
    if mask.is_empty() {
        return Err(StageError::EmptyMask);
    }
    let mut out = rgb.clone();
    if thickness == 0 {
        return Ok(out);
    }
    let reach = thickness as i64 - 1;
    let boundary = mask_boundary(mask);
    for (bx, by) in boundary.iter_set() {
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (x, y) = (bx as i64 + dx, by as i64 + dy);
                if x >= 0 && y >= 0 && x < rgb.width() as i64 && y < rgb.height() as i64 {
                    out.put_pixel(x as u32, y as u32, Rgb(color));
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagedImages {
    pub best_frame_id: i64,
    pub crop_image: RgbImage,
    pub highlight_image: RgbImage,
    pub context: Vec<(i64, RgbImage)>,
    pub context_fallback: bool,
}

/// Relative paths (under the per-object directory) of the written stage images.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagedPaths {
    pub crop: PathBuf,
    pub highlight: PathBuf,
    pub context: Vec<PathBuf>,
}

/// Runs frame selection and renders all stage images for one object.
/// `load_rgb` supplies the color frame for a frame id.
pub fn stage_object(
    table: &[ObjectFrameStats],
    params: &StageParams,
    mut load_rgb: impl FnMut(i64) -> Result<RgbImage, StageError>,
) -> Result<StagedImages, StageError> {
    let best = select_best_frame(table, params.min_area)?;
    let ctx = sample_context_frames(table, params.context_count, params.min_area)?;
    let row = |id: i64| {
        table
            .iter()
            .find(|r| r.frame_id == id)
            .ok_or(StageError::UnknownFrame(id))
    };
    let best_row = row(best)?;
    let best_rgb = load_rgb(best)?;
    let crop_image = render_crop(&best_rgb, &best_row.mask, params.crop_margin)?;
    let highlight_image = render_highlight(
        &best_rgb,
        &best_row.mask,
        params.highlight_color,
        params.highlight_thickness,
    )?;
    let mut context = Vec::with_capacity(ctx.frame_ids.len());
    for id in &ctx.frame_ids {
        let rgb = if *id == best { best_rgb.clone() } else { load_rgb(*id)? };
        let img = render_highlight(
            &rgb,
            &row(*id)?.mask,
            params.highlight_color,
            params.highlight_thickness,
        )?;
        context.push((*id, img));
    }
    Ok(StagedImages {
        best_frame_id: best,
        crop_image,
        highlight_image,
        context,
        context_fallback: ctx.fallback,
    })
}

impl StagedImages {
    /// Writes `crop.png`, `highlight.png` and `ctx_<k>.png` into `dir`.
    pub fn write_pngs(&self, dir: &Path) -> Result<StagedPaths, StageError> {
        std::fs::create_dir_all(dir).map_err(|source| StageError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let save = |img: &RgbImage, name: String| -> Result<PathBuf, StageError> {
            let path = dir.join(&name);
            img.save(&path).map_err(|source| StageError::Image { path, source })?;
            Ok(PathBuf::from(name))
        };
        Ok(StagedPaths {
            crop: save(&self.crop_image, "crop.png".into())?,
            highlight: save(&self.highlight_image, "highlight.png".into())?,
            context: self
                .context
                .iter()
                .enumerate()
                .map(|(k, (_, img))| save(img, format!("ctx_{k}.png")))
                .collect::<Result<_, _>>()?,
        })
    }
}
