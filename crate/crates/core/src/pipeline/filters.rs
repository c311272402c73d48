use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::record::{AnnotationRecord, EliminationReason, Status};
use super::PipelineError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub blocked_categories: BTreeSet<String>,
    pub min_instances_per_category: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            blocked_categories: ["wall", "ceiling", "floor"].into_iter().map(String::from).collect(),
            min_instances_per_category: 5,
        }
    }
}

impl FilterConfig {
    pub fn is_blocked(&self, category: &str) -> bool {
        self.blocked_categories.contains(&category.trim().to_lowercase())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        match self.blocked_categories.iter().find(|c| **c != c.to_lowercase()) {
            Some(c) => Err(PipelineError::Config(format!("blocklist entry {c:?} is not lowercase"))),
            None => Ok(()),
        }
    }
}

/// Marks blocklisted and under-sampled categories as
/// `eliminated(category_filtered)`. Instance counts run over every record
/// given, whatever its status. Records already eliminated keep their reason.
pub fn apply_filters(records: Vec<AnnotationRecord>, config: &FilterConfig) -> Vec<AnnotationRecord> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in &records {
        *counts.entry(r.category.to_lowercase()).or_insert(0) += 1;
    }
    records
        .into_iter()
        .map(|mut r| {
            if matches!(r.status, Status::Eliminated(_)) {
                return r;
            }
            let n = counts[&r.category.to_lowercase()];
            if config.is_blocked(&r.category) || n < config.min_instances_per_category {
                r.eliminate(EliminationReason::CategoryFiltered);
            }
            r
        })
        .collect()
}

/// One scene id per line; blank lines and `#` comments are skipped.
pub fn load_scene_list(path: &Path) -> Result<BTreeSet<String>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Partitions records by scene id.
pub fn split_dataset(
    records: Vec<AnnotationRecord>,
    train_ids: &BTreeSet<String>,
    val_ids: &BTreeSet<String>,
) -> Result<(Vec<AnnotationRecord>, Vec<AnnotationRecord>), PipelineError> {
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for r in records {
        match (train_ids.contains(&r.scene_id), val_ids.contains(&r.scene_id)) {
            (true, false) => train.push(r),
            (false, true) => val.push(r),
            (true, true) => return Err(PipelineError::DoublyAssignedScene(r.scene_id)),
            (false, false) => return Err(PipelineError::UnassignedScene(r.scene_id)),
        }
    }
    Ok((train, val))
}

pub fn scene_count(records: &[AnnotationRecord]) -> usize {
    records.iter().map(|r| r.scene_id.as_str()).collect::<BTreeSet<_>>().len()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(scene: &str, id: i64, cat: &str) -> AnnotationRecord {
        let mut r = AnnotationRecord::new(scene, id, cat);
        r.status = Status::Final;
        r
    }

    #[test]
    fn wall_is_filtered() {
        let cfg = FilterConfig {
            min_instances_per_category: 0,
            ..FilterConfig::default()
        };
        let out = apply_filters(vec![rec("a", 1, "wall"), rec("a", 2, "chair")], &cfg);
        assert_eq!(out[0].status, Status::Eliminated(EliminationReason::CategoryFiltered));
        assert_eq!(out[1].status, Status::Final);
    }

    #[test]
    fn under_sampled_category_threshold() {
        let mut rs: Vec<_> = (0..3).map(|i| rec("a", i, "stick")).collect();
        rs.extend((3..8).map(|i| rec("a", i, "chair")));
        let out = apply_filters(rs, &FilterConfig::default());
        assert!(out[..3].iter().all(|r| r.status == Status::Eliminated(EliminationReason::CategoryFiltered)));
        assert!(out[3..].iter().all(|r| r.status == Status::Final));
    }

    #[test]
    fn empty_config_is_identity() {
        let cfg = FilterConfig {
            blocked_categories: BTreeSet::new(),
            min_instances_per_category: 0,
        };
        let rs = vec![rec("a", 1, "wall"), rec("b", 2, "x")];
        assert_eq!(apply_filters(rs.clone(), &cfg), rs);
    }

    #[test]
    fn split_partitions_by_scene() {
        let rs: Vec<_> = ["a", "b", "c", "d", "e"].iter().enumerate().map(|(i, s)| rec(s, i as i64, "chair")).collect();
        let set = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        let (t, v) = split_dataset(rs.clone(), &set(&["a", "b", "c"]), &set(&["d", "e"])).unwrap();
        assert_eq!((scene_count(&t), scene_count(&v)), (3, 2));
        assert!(matches!(
            split_dataset(rs, &set(&["a", "b"]), &set(&["d", "e"])),
            Err(PipelineError::UnassignedScene(s)) if s == "c"
        ));
    }
}
