use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::framestage::StagedPaths;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EliminationReason {
    Unannotatable,
    Inconsistent,
    CategoryFiltered,
    HumanRejected,
}

impl fmt::Display for EliminationReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EliminationReason::Unannotatable => "unannotatable",
            EliminationReason::Inconsistent => "inconsistent",
            EliminationReason::CategoryFiltered => "category_filtered",
            EliminationReason::HumanRejected => "human_rejected",
        })
    }
}

/// Progress of one object. Question generation ends in `Final` directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pending,
    Staged,
    S1Done,
    S2Done,
    S3Done,
    S4Done,
    Eliminated(EliminationReason),
    Final,
}

impl Status {
    /// Position in the stage order; terminal states rank last.
    pub fn rank(self) -> u8 {
        match self {
            Status::Pending => 0,
            Status::Staged => 1,
            Status::S1Done => 2,
            Status::S2Done => 3,
            Status::S3Done => 4,
            Status::S4Done => 5,
            Status::Final | Status::Eliminated(_) => 6,
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, Status::Final | Status::Eliminated(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyStatus {
    Pending,
    LlmPass,
    LlmFail,
    HumanPass,
    HumanFail,
}

impl VerifyStatus {
    pub fn exported(self) -> bool {
        matches!(self, VerifyStatus::LlmPass | VerifyStatus::HumanPass)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioQuestion {
    pub text: String,
    pub verify_status: VerifyStatus,
    /// Category the verifier resolved the question to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageProvenance {
    pub template_id: String,
    pub template_hash: String,
    pub request_hashes: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Keyed by stage name (`s1`, `s2`, `s3`, `s3b`, `s4_identify`, ...).
    pub stages: BTreeMap<String, StageProvenance>,
    /// Indices of questions whose text a reviewer replaced.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub human_edits: Vec<usize>,
}

impl Provenance {
    pub fn stage_mut(&mut self, stage: &str, template_id: &str, template_hash: &str) -> &mut StageProvenance {
        self.stages.entry(stage.to_string()).or_insert_with(|| StageProvenance {
            template_id: template_id.to_string(),
            template_hash: template_hash.to_string(),
            request_hashes: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub scene_id: String,
    pub instance_id: i64,
    pub category: String,
    pub status: Status,
    pub best_frame_id: Option<i64>,
    pub context_frame_ids: Vec<i64>,
    pub context_fallback: bool,
    /// Stage image paths relative to the staging root.
    pub stage_images: Option<StagedPaths>,
    pub object_caption: Option<String>,
    pub frame_caption: Option<String>,
    pub scene_caption: Option<String>,
    pub dense_referring_expression: Option<String>,
    pub scenario_questions: Vec<ScenarioQuestion>,
    /// Every generated question failed verification.
    pub zero_survivors: bool,
    pub provenance: Provenance,
}

impl AnnotationRecord {
    pub fn new(scene_id: &str, instance_id: i64, category: &str) -> AnnotationRecord {
        AnnotationRecord {
            scene_id: scene_id.to_string(),
            instance_id,
            category: category.to_string(),
            status: Status::Pending,
            best_frame_id: None,
            context_frame_ids: Vec::new(),
            context_fallback: false,
            stage_images: None,
            object_caption: None,
            frame_caption: None,
            scene_caption: None,
            dense_referring_expression: None,
            scenario_questions: Vec::new(),
            zero_survivors: false,
            provenance: Provenance::default(),
        }
    }

    pub fn key(&self) -> (String, i64) {
        (self.scene_id.clone(), self.instance_id)
    }

    pub fn eliminate(&mut self, reason: EliminationReason) {
        self.status = Status::Eliminated(reason);
    }

    pub fn is_final(&self) -> bool {
        self.status == Status::Final
    }

    pub fn exported_questions(&self) -> impl Iterator<Item = &ScenarioQuestion> {
        self.scenario_questions.iter().filter(|q| q.verify_status.exported())
    }

    /// Caption fields are filled exactly for the stages already passed. An
    /// eliminated record keeps whatever it had when it was eliminated.
    pub fn check_stage_fields(&self) -> Result<(), String> {
        let reached = self.status.rank();
        let fields = [
            (Status::Staged, self.best_frame_id.is_some(), "best_frame_id"),
            (Status::S1Done, self.object_caption.is_some(), "object_caption"),
            (Status::S2Done, self.frame_caption.is_some(), "frame_caption"),
            (Status::S3Done, self.scene_caption.is_some(), "scene_caption"),
            (Status::S3Done, self.dense_referring_expression.is_some(), "dense_referring_expression"),
        ];
        for (stage, present, name) in fields {
            if let Status::Eliminated(_) = self.status {
                continue;
            }
            let passed = reached >= stage.rank();
            if passed != present {
                return Err(format!("{name} present={present} at status {:?}", self.status));
            }
        }
        Ok(())
    }
}
