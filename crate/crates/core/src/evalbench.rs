//! Point-mask segmentation scoring (mIoU, Acc@k) and the run-length
//! prediction format.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SceneRecord;
use crate::pipeline::export::ExportRecord;

pub const DEFAULT_THRESHOLDS: [f64; 2] = [0.25, 0.5];

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("malformed RLE: {0}")]
    MalformedRle(String),
    #[error("mask length {found} does not match {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("more than one prediction for sample {0}")]
    DuplicatePrediction(String),
    #[error("prediction for unknown sample {0}")]
    UnknownSample(String),
    #[error("invalid sample {id}: {detail}")]
    InvalidSample { id: String, detail: String },
    #[error("{}: {detail}", path.display())]
    File { path: PathBuf, detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationSample {
    pub sample_id: String,
    pub scene_id: String,
    pub question_text: String,
    pub gt_point_indices: Vec<u32>,
    pub num_points: usize,
}

impl SegmentationSample {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |detail: &str| EvalError::InvalidSample {
            id: self.sample_id.clone(),
            detail: detail.to_string(),
        };
        if self.gt_point_indices.is_empty() {
            return Err(bad("empty ground truth"));
        }
        if self.gt_point_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("indices not sorted and unique"));
        }
        if *self.gt_point_indices.last().unwrap() as usize >= self.num_points {
            return Err(bad("index out of range"));
        }
        Ok(())
    }

    pub fn gt_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.num_points];
        for &i in &self.gt_point_indices {
            m[i as usize] = true;
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub scene_id: String,
    pub mask_rle: Vec<i64>,
    pub num_points: usize,
}

/// Alternating runs, the first counting zeros (and possibly 0 when the mask
/// starts with a one).
pub fn encode_rle(mask: &[bool]) -> Vec<i64> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0i64;
    for &b in mask {
        if b == current {
            len += 1;
        } else {
            runs.push(len);
            current = b;
            len = 1;
        }
    }
    if !mask.is_empty() {
        runs.push(len);
    }
    runs
}

/// Inverse of [`encode_rle`]. Only the first run may be zero.
pub fn decode_rle(runs: &[i64], num_points: usize) -> Result<Vec<bool>, EvalError> {
    let mut mask = Vec::with_capacity(num_points);
    for (k, &r) in runs.iter().enumerate() {
        if r < 0 {
            return Err(EvalError::MalformedRle(format!("run {k} is negative")));
        }
        if r == 0 && k > 0 {
            return Err(EvalError::MalformedRle(format!("run {k} is zero")));
        }
        if mask.len() as i64 + r > num_points as i64 {
            return Err(EvalError::MalformedRle(format!("runs exceed {num_points} points")));
        }
        mask.extend(std::iter::repeat_n(k % 2 == 1, r as usize));
    }
    if mask.len() != num_points {
        return Err(EvalError::MalformedRle(format!(
            "runs sum to {} but there are {num_points} points",
            mask.len()
        )));
    }
    Ok(mask)
}

/// `|a ∩ b| / |a ∪ b|` from integer counts; two empty masks score 1.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64, EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::DimensionMismatch {
            expected: gt.len(),
            found: pred.len(),
        });
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    pub iou: f64,
    #[serde(default)]
    pub missing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    #[serde(rename = "mIoU")]
    pub miou: f64,
    /// Keyed by the threshold written as a decimal, e.g. `"0.25"`.
    pub acc_at: BTreeMap<String, f64>,
    pub n_missing: usize,
    pub per_sample: Vec<SampleScore>,
}

impl MetricsReport {
    pub fn acc(&self, threshold: f64) -> Option<f64> {
        self.acc_at.get(&threshold_key(threshold)).copied()
    }
}

pub fn threshold_key(t: f64) -> String {
    format!("{t}")
}

/// Scores each sample against its prediction; a missing prediction scores 0.
/// Acc@k counts IoU strictly above k.
pub fn evaluate(
    samples: &[SegmentationSample],
    predictions: &[PredictionRecord],
    thresholds: &[f64],
) -> Result<MetricsReport, EvalError> {
    let known: HashMap<&str, &SegmentationSample> =
        samples.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    let mut by_id: HashMap<&str, &PredictionRecord> = HashMap::new();
    for p in predictions {
        if !known.contains_key(p.sample_id.as_str()) {
            return Err(EvalError::UnknownSample(p.sample_id.clone()));
        }
        if by_id.insert(p.sample_id.as_str(), p).is_some() {
            return Err(EvalError::DuplicatePrediction(p.sample_id.clone()));
        }
    }
    let per_sample: Vec<SampleScore> = samples
        .par_iter()
        .map(|s| {
            s.validate()?;
            let Some(p) = by_id.get(s.sample_id.as_str()) else {
                return Ok(SampleScore {
                    sample_id: s.sample_id.clone(),
                    iou: 0.0,
                    missing: true,
                });
            };
            if p.num_points != s.num_points {
                return Err(EvalError::DimensionMismatch {
                    expected: s.num_points,
                    found: p.num_points,
                });
            }
            let pred = decode_rle(&p.mask_rle, p.num_points)?;
            Ok(SampleScore {
                sample_id: s.sample_id.clone(),
                iou: iou(&pred, &s.gt_mask())?,
                missing: false,
            })
        })
        .collect::<Result<_, EvalError>>()?;
    let n = per_sample.len();
    let mean = |f: &dyn Fn(&SampleScore) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_sample.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let miou = mean(&|s| s.iou);
    let acc_at = thresholds
        .iter()
        .map(|&t| (threshold_key(t), mean(&|s| if s.iou > t { 1.0 } else { 0.0 })))
        .collect();
    Ok(MetricsReport {
        n_samples: n,
        miou,
        acc_at,
        n_missing: per_sample.iter().filter(|s| s.missing).count(),
        per_sample,
    })
}

/// One sample per exported question, with the instance's points as the
/// target. Ids are `scene:instance:question_index`.
pub fn samples_from_exports(
    scene: &SceneRecord,
    exports: &[ExportRecord],
) -> Result<Vec<SegmentationSample>, EvalError> {
    let mut out = Vec::new();
    for e in exports.iter().filter(|e| e.scene_id == scene.scene_id) {
        let inst = scene.instance(e.instance_id).ok_or_else(|| EvalError::InvalidSample {
            id: format!("{}:{}", e.scene_id, e.instance_id),
            detail: "instance not in scene".into(),
        })?;
        let mut gt = inst.point_indices.clone();
        gt.sort_unstable();
        gt.dedup();
        for (q, text) in e.scenario_questions.iter().enumerate() {
            let s = SegmentationSample {
                sample_id: format!("{}:{}:{q}", e.scene_id, e.instance_id),
                scene_id: e.scene_id.clone(),
                question_text: text.clone(),
                gt_point_indices: gt.clone(),
                num_points: scene.points.len(),
            };
            s.validate()?;
            out.push(s);
        }
    }
    Ok(out)
}

/// Reads a JSONL file of `T`, naming the failing line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::File {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EvalError::File {
                path: path.to_path_buf(),
                detail: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}
