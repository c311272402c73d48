//! Human review of generated questions: seeded task sampling, a leased task
//! store with a durable decisions journal, and folding verdicts back into
//! annotation records.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llmgate::cache::write_atomic;
use crate::pipeline::record::{AnnotationRecord, VerifyStatus};

pub const DEFAULT_REVIEW_RATE: f64 = 0.1;
pub const LEASE_MS: u64 = 10 * 60 * 1000;

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("task {task_id} already decided by {reviewer_id}")]
    AlreadyDecided { task_id: String, reviewer_id: String },
    #[error("invalid decision: {0}")]
    InvalidDecision(String),
    #[error("review rate {0} outside (0, 1]")]
    InvalidRate(f64),
    #[error("duplicate task id {0}")]
    DuplicateTask(String),
    #[error("{}: {detail}", path.display())]
    Store { path: PathBuf, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Open,
    Decided,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskImages {
    /// Paths relative to the staging root, served under `/images/`.
    pub highlight: String,
    pub context: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewTask {
    pub task_id: String,
    pub scene_id: String,
    pub instance_id: i64,
    pub question_index: usize,
    pub category: String,
    pub question_text: String,
    pub dense_referring_expression: String,
    pub images: TaskImages,
    pub state: TaskState,
}

pub fn task_id(scene_id: &str, instance_id: i64, question_index: usize) -> String {
    format!("{scene_id}:{instance_id}:{question_index}")
}

/// Splits `scene:instance:index`; the scene id may itself contain colons.
pub fn parse_task_id(id: &str) -> Option<(&str, i64, usize)> {
    let mut it = id.rsplitn(3, ':');
    let q = it.next()?.parse().ok()?;
    let inst = it.next()?.parse().ok()?;
    let scene = it.next().filter(|s| !s.is_empty())?;
    Some((scene, inst, q))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject,
    Edit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub task_id: String,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited_text: Option<String>,
    pub reviewer_id: String,
    /// Unix milliseconds, stamped by the store.
    pub decided_at: u64,
}

/// Body of a decision submission.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub task_id: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub edited_text: Option<String>,
    pub reviewer_id: String,
}

impl DecisionRequest {
    pub fn validate(&self) -> Result<(), ReviewError> {
        if self.reviewer_id.trim().is_empty() {
            return Err(ReviewError::InvalidDecision("empty reviewer_id".into()));
        }
        let has_text = self.edited_text.as_deref().is_some_and(|t| !t.trim().is_empty());
        match (self.verdict, has_text, self.edited_text.is_some()) {
            (Verdict::Edit, false, _) => Err(ReviewError::InvalidDecision("edit requires edited_text".into())),
            (Verdict::Accept | Verdict::Reject, _, true) => {
                Err(ReviewError::InvalidDecision("edited_text is only allowed with edit".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Seeded sample of `ceil(rate·n)` exported LLM-passed questions, allotted to
/// categories by largest remainder of their proportional share.
pub fn sample_review_set(records: &[AnnotationRecord], rate: f64, seed: u64) -> Result<Vec<ReviewTask>, ReviewError> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(ReviewError::InvalidRate(rate));
    }
    let mut by_cat: BTreeMap<&str, Vec<ReviewTask>> = BTreeMap::new();
    let mut sorted: Vec<&AnnotationRecord> = records.iter().filter(|r| r.is_final()).collect();
    sorted.sort_by(|a, b| (&a.scene_id, a.instance_id).cmp(&(&b.scene_id, b.instance_id)));
    for r in sorted {
        let dir = format!("{}/{}", r.scene_id, r.instance_id);
        let images = match &r.stage_images {
            Some(p) => TaskImages {
                highlight: format!("{dir}/{}", p.highlight.display()),
                context: p.context.iter().map(|c| format!("{dir}/{}", c.display())).collect(),
            },
            None => TaskImages {
                highlight: String::new(),
                context: Vec::new(),
            },
        };
        for (q, question) in r.scenario_questions.iter().enumerate() {
            if question.verify_status != VerifyStatus::LlmPass {
                continue;
            }
            by_cat.entry(r.category.as_str()).or_default().push(ReviewTask {
                task_id: task_id(&r.scene_id, r.instance_id, q),
                scene_id: r.scene_id.clone(),
                instance_id: r.instance_id,
                question_index: q,
                category: r.category.clone(),
                question_text: question.text.clone(),
                dense_referring_expression: r.dense_referring_expression.clone().unwrap_or_default(),
                images: images.clone(),
                state: TaskState::Open,
            });
        }
    }
    let n: usize = by_cat.values().map(Vec::len).sum();
    let target = (rate * n as f64).ceil() as usize;
    let quotas = allot(&by_cat.values().map(Vec::len).collect::<Vec<_>>(), target);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(target);
    for (mut tasks, quota) in by_cat.into_values().zip(quotas) {
        tasks.shuffle(&mut rng);
        tasks.truncate(quota);
        out.extend(tasks);
    }
    out.sort_by(|a, b| {
        (&a.scene_id, a.instance_id, a.question_index).cmp(&(&b.scene_id, b.instance_id, b.question_index))
    });
    Ok(out)
}

/// Largest-remainder apportionment of `target` over groups of the given
/// sizes; ties go to the earlier group.
pub fn allot(sizes: &[usize], target: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let target = target.min(n);
    let mut quotas: Vec<usize> = sizes.iter().map(|&s| s * target / n).collect();
    let mut rest: Vec<(usize, usize)> = sizes.iter().enumerate().map(|(i, &s)| (s * target % n, i)).collect();
    rest.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = target - quotas.iter().sum::<usize>();
    for &(_, i) in rest.iter().take(short) {
        quotas[i] += 1;
    }
    quotas
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub open: usize,
    pub decided: usize,
    /// (accept + edit) / decided; absent before the first decision.
    pub accept_rate: Option<f64>,
}

#[derive(Debug, Clone)]
struct Lease {
    reviewer: String,
    expires_at: u64,
}

/// Tasks plus their decisions. `decisions.jsonl` holds the current decision
/// per task and is replaced atomically on every write; `audit.jsonl` keeps
/// every decision ever made.
#[derive(Debug)]
pub struct TaskStore {
    tasks: Vec<ReviewTask>,
    index: HashMap<String, usize>,
    decisions: BTreeMap<String, ReviewDecision>,
    leases: HashMap<String, Lease>,
    decisions_path: PathBuf,
    audit_path: PathBuf,
}

impl TaskStore {
    /// Opens the store in `state_dir`, replaying any earlier decisions.
    pub fn open(tasks: Vec<ReviewTask>, state_dir: &Path) -> Result<TaskStore, ReviewError> {
        std::fs::create_dir_all(state_dir).map_err(|e| ReviewError::Store {
            path: state_dir.to_path_buf(),
            detail: e.to_string(),
        })?;
        let mut index = HashMap::new();
        for (i, t) in tasks.iter().enumerate() {
            if index.insert(t.task_id.clone(), i).is_some() {
                return Err(ReviewError::DuplicateTask(t.task_id.clone()));
            }
        }
        let decisions_path = state_dir.join("decisions.jsonl");
        let mut decisions = BTreeMap::new();
        if decisions_path.exists() {
            for d in read_jsonl::<ReviewDecision>(&decisions_path)? {
                if !index.contains_key(&d.task_id) {
                    return Err(ReviewError::UnknownTask(d.task_id));
                }
                decisions.insert(d.task_id.clone(), d);
            }
        }
        let mut store = TaskStore {
            tasks,
            index,
            decisions,
            leases: HashMap::new(),
            decisions_path,
            audit_path: state_dir.join("audit.jsonl"),
        };
        for t in &mut store.tasks {
            if store.decisions.contains_key(&t.task_id) {
                t.state = TaskState::Decided;
            }
        }
        Ok(store)
    }

    pub fn load_tasks(path: &Path) -> Result<Vec<ReviewTask>, ReviewError> {
        read_jsonl(path)
    }

    pub fn task(&self, id: &str) -> Option<&ReviewTask> {
        self.index.get(id).map(|&i| &self.tasks[i])
    }

    pub fn tasks(&self) -> &[ReviewTask] {
        &self.tasks
    }

    pub fn decisions(&self) -> impl Iterator<Item = &ReviewDecision> {
        self.decisions.values()
    }

    /// Hands `reviewer` an open task under a lease. A reviewer polling again
    /// while holding a live lease gets the same task back.
    pub fn next_task(&mut self, reviewer: &str, now_ms: u64) -> Option<ReviewTask> {
        self.leases.retain(|_, l| l.expires_at > now_ms);
        let held = self.tasks.iter().position(|t| {
            t.state == TaskState::Open && self.leases.get(&t.task_id).is_some_and(|l| l.reviewer == reviewer)
        });
        let pick = held.or_else(|| {
            self.tasks
                .iter()
                .position(|t| t.state == TaskState::Open && !self.leases.contains_key(&t.task_id))
        })?;
        let task = self.tasks[pick].clone();
        self.leases.insert(
            task.task_id.clone(),
            Lease {
                reviewer: reviewer.to_string(),
                expires_at: now_ms + LEASE_MS,
            },
        );
        Some(task)
    }

    /// Records a decision; it is on disk when this returns.
    pub fn decide(&mut self, req: DecisionRequest, now_ms: u64) -> Result<ReviewDecision, ReviewError> {
        let &i = self
            .index
            .get(&req.task_id)
            .ok_or_else(|| ReviewError::UnknownTask(req.task_id.clone()))?;
        req.validate()?;
        if let Some(prev) = self.decisions.get(&req.task_id) {
            if prev.reviewer_id != req.reviewer_id {
                return Err(ReviewError::AlreadyDecided {
                    task_id: req.task_id,
                    reviewer_id: prev.reviewer_id.clone(),
                });
            }
        }
        let decision = ReviewDecision {
            task_id: req.task_id,
            verdict: req.verdict,
            edited_text: req.edited_text,
            reviewer_id: req.reviewer_id,
            decided_at: now_ms,
        };
        let previous = self.decisions.insert(decision.task_id.clone(), decision.clone());
        if let Err(e) = self.flush() {
            match previous {
                Some(p) => self.decisions.insert(p.task_id.clone(), p),
                None => self.decisions.remove(&decision.task_id),
            };
            return Err(e);
        }
        self.append_audit(&decision)?;
        self.tasks[i].state = TaskState::Decided;
        self.leases.remove(&decision.task_id);
        Ok(decision)
    }

    pub fn progress(&self) -> Progress {
        let decided = self.decisions.len();
        let kept = self.decisions.values().filter(|d| d.verdict != Verdict::Reject).count();
        Progress {
            open: self.tasks.len() - decided,
            decided,
            accept_rate: (decided > 0).then(|| kept as f64 / decided as f64),
        }
    }

    fn flush(&self) -> Result<(), ReviewError> {
        let mut body = Vec::new();
        for d in self.decisions.values() {
            serde_json::to_writer(&mut body, d).expect("serializes");
            body.push(b'\n');
        }
        write_atomic(&self.decisions_path, &body).map_err(|e| ReviewError::Store {
            path: self.decisions_path.clone(),
            detail: e.to_string(),
        })
    }

    fn append_audit(&self, d: &ReviewDecision) -> Result<(), ReviewError> {
        let err = |e: std::io::Error| ReviewError::Store {
            path: self.audit_path.clone(),
            detail: e.to_string(),
        };
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.audit_path)
            .map_err(err)?;
        let mut line = serde_json::to_vec(d).expect("serializes");
        line.push(b'\n');
        f.write_all(&line).map_err(err)?;
        f.sync_data().map_err(err)
    }
}

/// Folds verdicts into the records: reject gives `human_fail`, accept gives
/// `human_pass`, edit replaces the text and gives `human_pass`. Questions
/// without a decision are untouched.
pub fn apply_decisions(
    mut records: Vec<AnnotationRecord>,
    decisions: &[ReviewDecision],
) -> Result<Vec<AnnotationRecord>, ReviewError> {
    let pos: HashMap<(String, i64), usize> = records.iter().enumerate().map(|(i, r)| (r.key(), i)).collect();
    for d in decisions {
        let unknown = || ReviewError::UnknownTask(d.task_id.clone());
        let (scene, inst, q) = parse_task_id(&d.task_id).ok_or_else(unknown)?;
        let &i = pos.get(&(scene.to_string(), inst)).ok_or_else(unknown)?;
        let rec = &mut records[i];
        let question = rec.scenario_questions.get_mut(q).ok_or_else(unknown)?;
        match d.verdict {
            Verdict::Accept => question.verify_status = VerifyStatus::HumanPass,
            Verdict::Reject => question.verify_status = VerifyStatus::HumanFail,
            Verdict::Edit => {
                let text = d
                    .edited_text
                    .clone()
                    .ok_or_else(|| ReviewError::InvalidDecision(format!("{}: edit without text", d.task_id)))?;
                question.text = text;
                question.verify_status = VerifyStatus::HumanPass;
                if !rec.provenance.human_edits.contains(&q) {
                    rec.provenance.human_edits.push(q);
                    rec.provenance.human_edits.sort_unstable();
                }
            }
        }
    }
    Ok(records)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ReviewError> {
    let text = std::fs::read_to_string(path).map_err(|e| ReviewError::Store {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ReviewError::Store {
                path: path.to_path_buf(),
                detail: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

pub fn write_tasks(path: &Path, tasks: &[ReviewTask]) -> Result<(), ReviewError> {
    let mut body = Vec::new();
    for t in tasks {
        serde_json::to_writer(&mut body, t).expect("serializes");
        body.push(b'\n');
    }
    write_atomic(path, &body).map_err(|e| ReviewError::Store {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_id_round_trip() {
        assert_eq!(parse_task_id(&task_id("scene0000_00", 7, 2)), Some(("scene0000_00", 7, 2)));
        assert_eq!(parse_task_id("a:b:7:1"), Some(("a:b", 7, 1)));
        assert_eq!(parse_task_id("7:1"), None);
        assert_eq!(parse_task_id("a:x:1"), None);
    }

    #[test]
    fn allot_largest_remainder() {
        assert_eq!(allot(&[50, 30, 20], 10), [5, 3, 2]);
        assert_eq!(allot(&[1, 1, 1], 2), [1, 1, 0]);
        assert_eq!(allot(&[7, 3], 3), [2, 1]);
        assert_eq!(allot(&[], 0), Vec::<usize>::new());
        assert_eq!(allot(&[4, 6], 10), [4, 6]);
    }

    #[test]
    fn edit_needs_text() {
        let mut r = DecisionRequest {
            task_id: "s:1:0".into(),
            verdict: Verdict::Edit,
            edited_text: None,
            reviewer_id: "r".into(),
        };
        assert!(r.validate().is_err());
        r.edited_text = Some("  ".into());
        assert!(r.validate().is_err());
        r.edited_text = Some("new".into());
        assert!(r.validate().is_ok());
        r.verdict = Verdict::Accept;
        assert!(r.validate().is_err());
    }
}
