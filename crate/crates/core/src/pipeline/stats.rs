use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::record::AnnotationRecord;
use super::text::word_count;

pub const HISTOGRAM_BINS: usize = 30;

/// Quartiles by linear interpolation between order statistics
/// (position `p·(n−1)` in the sorted sample).
pub fn quartiles(values: &[f64]) -> Option<(f64, f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let at = |p: f64| {
        let h = p * (v.len() - 1) as f64;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(v.len() - 1);
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    };
    Some((at(0.25), at(0.5), at(0.75)))
}

/// Bins uniform in log10 of the value. When every value is equal the range
/// is widened to one decade above the minimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges_log10: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Values must be ≥ 1; smaller ones are skipped.
    pub fn log10(values: &[f64], bins: usize) -> Option<Histogram> {
        let logs: Vec<f64> = values.iter().filter(|&&x| x >= 1.0).map(|x| x.log10()).collect();
        if logs.is_empty() || bins == 0 {
            return None;
        }
        let lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
        let mut hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            hi = lo + 1.0;
        }
        let width = (hi - lo) / bins as f64;
        let edges_log10: Vec<f64> = (0..=bins)
            .map(|i| if i == bins { hi } else { lo + i as f64 * width })
            .collect();
        let mut counts = vec![0usize; bins];
        for x in logs {
            let k = (((x - lo) / width).floor() as usize).min(bins - 1);
            counts[k] += 1;
        }
        Some(Histogram { edges_log10, counts })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextStats {
    pub count: usize,
    pub q1: Option<f64>,
    pub median: Option<f64>,
    pub q3: Option<f64>,
    pub min_words: Option<usize>,
    pub max_words: Option<usize>,
    pub histogram: Option<Histogram>,
}

impl TextStats {
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> TextStats {
        let lens: Vec<usize> = texts.into_iter().map(word_count).collect();
        let vals: Vec<f64> = lens.iter().map(|&n| n as f64).collect();
        let q = quartiles(&vals);
        TextStats {
            count: lens.len(),
            q1: q.map(|q| q.0),
            median: q.map(|q| q.1),
            q3: q.map(|q| q.2),
            min_words: lens.iter().copied().min(),
            max_words: lens.iter().copied().max(),
            histogram: Histogram::log10(&vals, HISTOGRAM_BINS),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub train_records: usize,
    pub val_records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub scene_count: usize,
    pub instance_count: usize,
    pub dense_expression_count: usize,
    pub question_count: usize,
    pub total_description_count: usize,
    pub dense_expressions: TextStats,
    pub questions: TextStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSizes>,
}

/// Statistics over the exported content of final records; other records are
/// ignored.
pub fn compute_stats(records: &[AnnotationRecord]) -> CorpusStats {
    let finals: Vec<&AnnotationRecord> = records.iter().filter(|r| r.is_final()).collect();
    let dense: Vec<&str> = finals
        .iter()
        .filter_map(|r| r.dense_referring_expression.as_deref())
        .collect();
    let questions: Vec<&str> = finals
        .iter()
        .flat_map(|r| r.exported_questions().map(|q| q.text.as_str()))
        .collect();
    let scenes: BTreeSet<&str> = finals.iter().map(|r| r.scene_id.as_str()).collect();
    CorpusStats {
        scene_count: scenes.len(),
        instance_count: finals.len(),
        dense_expression_count: dense.len(),
        question_count: questions.len(),
        total_description_count: dense.len() + questions.len(),
        dense_expressions: TextStats::from_texts(dense.iter().copied()),
        questions: TextStats::from_texts(questions.iter().copied()),
        split: None,
    }
}

/// `kind,bin,lo_log10,hi_log10,lo_words,hi_words,count` rows for both kinds.
pub fn write_histogram_csv(path: &Path, stats: &CorpusStats) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "kind,bin,lo_log10,hi_log10,lo_words,hi_words,count")?;
    for (kind, ts) in [("dense", &stats.dense_expressions), ("question", &stats.questions)] {
        let Some(h) = &ts.histogram else { continue };
        for (k, c) in h.counts.iter().enumerate() {
            let (a, b) = (h.edges_log10[k], h.edges_log10[k + 1]);
            writeln!(
                out,
                "{kind},{k},{a:.6},{b:.6},{:.3},{:.3},{c}",
                10f64.powf(a),
                10f64.powf(b)
            )?;
        }
    }
    out.flush()
}
