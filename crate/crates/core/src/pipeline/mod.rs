//! Five-stage annotation of scene objects with a resumable job store, plus
//! corpus filtering, splitting, statistics and export.

pub mod export;
pub mod filters;
pub mod record;
pub mod stats;
pub mod store;
pub mod text;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, DepthImage, ObjectInstance, SceneRecord};
use crate::framestage::{stage_object, StageError, StageParams, StagedPaths};
use crate::geomview::{object_frame_table_with, GeomError, ViewParams};
use crate::llmgate::{
    ChatRequest, Gateway, LlmError, RetryPolicy, CAPTION_TEMPERATURE, QUESTION_TEMPERATURE,
};

pub use export::{read_records, write_export, write_records, ExportRecord};
pub use filters::{apply_filters, load_scene_list, split_dataset, FilterConfig};
pub use record::{
    AnnotationRecord, EliminationReason, Provenance, ScenarioQuestion, StageProvenance, Status,
    VerifyStatus,
};
pub use stats::{compute_stats, quartiles, CorpusStats, Histogram, TextStats};
pub use store::{JobStore, SceneStore};
pub use text::{mask_category, Synonyms};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("scene {0} is in neither split list")]
    UnassignedScene(String),
    #[error("scene {0} is in both split lists")]
    DoublyAssignedScene(String),
    #[error("job store {}: {detail}", path.display())]
    Store { path: PathBuf, detail: String },
    #[error("config: {0}")]
    Config(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub view: ViewParams,
    pub stage: StageParams,
    pub questions_per_object: usize,
    pub filters: FilterConfig,
    pub caption_temperature: f64,
    pub question_temperature: f64,
    pub max_tokens: u32,
    /// `alias=canonical` file; the built-in table is used when unset.
    pub synonyms: Option<PathBuf>,
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            view: ViewParams::default(),
            stage: StageParams::default(),
            questions_per_object: 2,
            filters: FilterConfig::default(),
            caption_temperature: CAPTION_TEMPERATURE,
            question_temperature: QUESTION_TEMPERATURE,
            max_tokens: 512,
            synonyms: None,
            workers: 4,
        }
    }
}

const SHORT_ANSWER_TOKENS: u32 = 32;

/// The two chat roles: a vision model for the image stages and a text model
/// for rewriting and checking.
#[derive(Clone)]
pub struct Backends {
    pub vision: Arc<Gateway>,
    pub text: Arc<Gateway>,
    pub vision_retry: RetryPolicy,
    pub text_retry: RetryPolicy,
}

impl Backends {
    /// One gateway for both roles.
    pub fn shared(gateway: Arc<Gateway>, retry: RetryPolicy) -> Backends {
        Backends {
            vision: gateway.clone(),
            text: gateway,
            vision_retry: retry,
            text_retry: retry,
        }
    }
}

/// A loaded scene with its depth maps, ready for per-object work.
pub struct SceneInput<'a> {
    pub scene: &'a SceneRecord,
    pub depths: Vec<DepthImage>,
}

impl<'a> SceneInput<'a> {
    pub fn load(scene: &'a SceneRecord) -> Result<SceneInput<'a>, PipelineError> {
        let depths = scene
            .frames
            .par_iter()
            .map(|f| f.load_depth())
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SceneInput { scene, depths })
    }

    /// Distinct categories of every instance, sorted.
    pub fn candidates(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.scene.instances.iter().map(|i| i.category.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Distinct categories of the instances other than `instance_id`.
    pub fn inventory_without(&self, instance_id: i64) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .scene
            .instances
            .iter()
            .filter(|i| i.instance_id != instance_id)
            .map(|i| i.category.as_str())
            .collect();
        set.into_iter().map(str::to_string).collect()
    }
}

pub struct Annotator {
    pub config: PipelineConfig,
    pub backends: Backends,
    pub synonyms: Synonyms,
    /// Stage images go to `<stage_root>/<scene_id>/<instance_id>/`.
    pub stage_root: PathBuf,
    /// Stop each object after persisting this status (crash simulation).
    pub halt_after: Option<Status>,
}

fn join_or_none(items: &[String]) -> String {
    if items.is_empty() {
        "none".to_string()
    } else {
        items.join(", ")
    }
}

impl Annotator {
    pub fn new(config: PipelineConfig, backends: Backends, stage_root: impl Into<PathBuf>) -> Result<Annotator, PipelineError> {
        let synonyms = match &config.synonyms {
            Some(p) => Synonyms::load(p)?,
            None => Synonyms::builtin(),
        };
        Ok(Annotator {
            config,
            backends,
            synonyms,
            stage_root: stage_root.into(),
            halt_after: None,
        })
    }

    fn halts_at(&self, status: Status) -> bool {
        self.halt_after == Some(status)
    }

    fn object_dir(&self, scene_id: &str, instance_id: i64) -> PathBuf {
        self.stage_root.join(scene_id).join(instance_id.to_string())
    }

    fn read_image(&self, rec: &AnnotationRecord, rel: &Path) -> Result<Arc<[u8]>, PipelineError> {
        let path = self.object_dir(&rec.scene_id, rec.instance_id).join(rel);
        let bytes = std::fs::read(&path).map_err(|source| PipelineError::Io { path, source })?;
        Ok(Arc::from(bytes.into_boxed_slice()))
    }

    /// Renders `template_id`, sends it through `gateway` and records the
    /// request hash under `stage` in the provenance.
    #[allow(clippy::too_many_arguments)]
    fn ask(
        &self,
        rec: &mut AnnotationRecord,
        stage: &str,
        gateway: &Gateway,
        retry: &RetryPolicy,
        template_id: &str,
        vars: BTreeMap<String, String>,
        images: Vec<Arc<[u8]>>,
        temperature: f64,
        max_tokens: u32,
    ) -> Result<String, PipelineError> {
        let req = ChatRequest::from_template(gateway.backend_id(), template_id, vars, images, temperature, max_tokens)?;
        let ex = gateway.complete(&req, retry)?;
        rec.provenance
            .stage_mut(stage, &req.template_id, &req.template_hash)
            .request_hashes
            .push(ex.request_hash);
        Ok(ex.response_text.trim().to_string())
    }

    fn vision(
        &self,
        rec: &mut AnnotationRecord,
        stage: &str,
        template_id: &str,
        vars: BTreeMap<String, String>,
        images: Vec<Arc<[u8]>>,
    ) -> Result<String, PipelineError> {
        let b = &self.backends;
        self.ask(rec, stage, &b.vision, &b.vision_retry, template_id, vars, images, self.config.caption_temperature, self.config.max_tokens)
    }

    fn text(
        &self,
        rec: &mut AnnotationRecord,
        stage: &str,
        template_id: &str,
        vars: BTreeMap<String, String>,
        temperature: f64,
        max_tokens: u32,
    ) -> Result<String, PipelineError> {
        let b = &self.backends;
        self.ask(rec, stage, &b.text, &b.text_retry, template_id, vars, Vec::new(), temperature, max_tokens)
    }

    /// Drives one object from its stored state to the next halt point or to
    /// a terminal status, persisting after every stage.
    pub fn run_object(
        &self,
        input: &SceneInput<'_>,
        store: &SceneStore,
        instance: &ObjectInstance,
    ) -> Result<AnnotationRecord, PipelineError> {
        let scene = input.scene;
        let mut rec = store
            .get(instance.instance_id)
            .unwrap_or_else(|| AnnotationRecord::new(&scene.scene_id, instance.instance_id, &instance.category));
        if rec.status.is_terminal() {
            return Ok(rec);
        }
        let persist = |rec: &AnnotationRecord, stage: &str, started: Instant| -> Result<bool, PipelineError> {
            store.persist(rec)?;
            store.log_timing(rec.instance_id, stage, started.elapsed());
            Ok(self.halts_at(rec.status))
        };

        if rec.status == Status::Pending {
            let t = Instant::now();
            if self.config.filters.is_blocked(&rec.category) {
                rec.eliminate(EliminationReason::CategoryFiltered);
                persist(&rec, "blocklist", t)?;
                return Ok(rec);
            }
            let table = object_frame_table_with(scene, instance, &input.depths, &self.config.view)?;
            let staged = stage_object(&table, &self.config.stage, |id| {
                scene
                    .frame(id)
                    .ok_or(StageError::UnknownFrame(id))?
                    .load_rgb()
                    .map_err(StageError::from)
            });
            match staged {
                Err(StageError::Unannotatable(why)) => {
                    log::info!("{}:{} unannotatable: {why}", rec.scene_id, rec.instance_id);
                    rec.eliminate(EliminationReason::Unannotatable);
                    persist(&rec, "staging", t)?;
                    return Ok(rec);
                }
                Err(e) => return Err(e.into()),
                Ok(images) => {
                    let paths = images.write_pngs(&self.object_dir(&rec.scene_id, rec.instance_id))?;
                    rec.best_frame_id = Some(images.best_frame_id);
                    rec.context_frame_ids = images.context.iter().map(|(id, _)| *id).collect();
                    rec.context_fallback = images.context_fallback;
                    rec.stage_images = Some(paths);
                    rec.status = Status::Staged;
                    if persist(&rec, "staging", t)? {
                        return Ok(rec);
                    }
                }
            }
        }

        let paths: StagedPaths = rec.stage_images.clone().ok_or_else(|| PipelineError::Store {
            path: store.dir().to_path_buf(),
            detail: format!("instance {} past staging without stage images", rec.instance_id),
        })?;
        let category = rec.category.clone();

        if rec.status == Status::Staged {
            let t = Instant::now();
            let crop = self.read_image(&rec, &paths.crop)?;
            let cap = self.vision(&mut rec, "s1", "object_caption", crate::llmgate::vars([("category", &category)]), vec![crop])?;
            rec.object_caption = Some(cap);
            rec.status = Status::S1Done;
            if persist(&rec, "s1", t)? {
                return Ok(rec);
            }
        }

        if rec.status == Status::S1Done {
            let t = Instant::now();
            let hl = self.read_image(&rec, &paths.highlight)?;
            let cap = self.vision(&mut rec, "s2", "frame_caption", crate::llmgate::vars([("category", &category)]), vec![hl])?;
            rec.frame_caption = Some(cap);
            rec.status = Status::S2Done;
            if persist(&rec, "s2", t)? {
                return Ok(rec);
            }
        }

        if rec.status == Status::S2Done {
            let t = Instant::now();
            let ctx = paths
                .context
                .iter()
                .map(|p| self.read_image(&rec, p))
                .collect::<Result<Vec<_>, _>>()?;
            let frame_caption = rec.frame_caption.clone().unwrap_or_default();
            let scene_cap = self.vision(
                &mut rec,
                "s3",
                "scene_caption",
                crate::llmgate::vars([("category", &category), ("frame_caption", &frame_caption)]),
                ctx,
            )?;
            let object_caption = rec.object_caption.clone().unwrap_or_default();
            let dense = self.text(
                &mut rec,
                "s3b",
                "style_adapt",
                crate::llmgate::vars([
                    ("category", &category),
                    ("object_caption", &object_caption),
                    ("frame_caption", &frame_caption),
                    ("scene_caption", &scene_cap),
                ]),
                self.config.caption_temperature,
                self.config.max_tokens,
            )?;
            rec.scene_caption = Some(scene_cap);
            rec.dense_referring_expression = Some(dense);
            rec.status = Status::S3Done;
            if persist(&rec, "s3", t)? {
                return Ok(rec);
            }
        }

        if rec.status == Status::S3Done {
            let t = Instant::now();
            if self.consistency_check(&mut rec, &input.candidates())? {
                rec.status = Status::S4Done;
            } else {
                rec.eliminate(EliminationReason::Inconsistent);
            }
            if persist(&rec, "s4", t)? || rec.status != Status::S4Done {
                return Ok(rec);
            }
        }

        if rec.status == Status::S4Done {
            let t = Instant::now();
            let inventory = input.inventory_without(rec.instance_id);
            let questions = self.generate_questions(&mut rec, &inventory, &input.candidates())?;
            rec.zero_survivors = !questions.is_empty() && !questions.iter().any(|q| q.verify_status.exported());
            rec.scenario_questions = questions;
            rec.status = Status::Final;
            persist(&rec, "s5", t)?;
        }
        Ok(rec)
    }

    /// Identification of the category-masked expression plus a contradiction
    /// check on the unmasked one. Both must pass.
    pub fn consistency_check(&self, rec: &mut AnnotationRecord, candidates: &[String]) -> Result<bool, PipelineError> {
        let expr = rec.dense_referring_expression.clone().unwrap_or_default();
        let masked = mask_category(&expr, &rec.category);
        let answer = self.text(
            rec,
            "s4_identify",
            "identify_object",
            crate::llmgate::vars([("description", &masked), ("candidates", &join_or_none(candidates))]),
            0.0,
            SHORT_ANSWER_TOKENS,
        )?;
        if !self.synonyms.same(&text::first_answer_line(&answer), &rec.category) {
            return Ok(false);
        }
        let category = rec.category.clone();
        let verdict = self.text(
            rec,
            "s4_verify",
            "verify_question",
            crate::llmgate::vars([("category", &category), ("text", &expr)]),
            0.0,
            SHORT_ANSWER_TOKENS,
        )?;
        Ok(text::first_answer_line(&verdict).eq_ignore_ascii_case("consistent"))
    }

    /// Generates `questions_per_object` questions and verifies each one: it
    /// passes when identification over the masked question returns the
    /// target category.
    pub fn generate_questions(
        &self,
        rec: &mut AnnotationRecord,
        inventory: &[String],
        candidates: &[String],
    ) -> Result<Vec<ScenarioQuestion>, PipelineError> {
        let n = self.config.questions_per_object;
        if n == 0 {
            return Ok(Vec::new());
        }
        let category = rec.category.clone();
        let scene_caption = rec.scene_caption.clone().unwrap_or_default();
        let reply = self.text(
            rec,
            "s5_generate",
            "gen_questions",
            crate::llmgate::vars([
                ("scene_caption", &scene_caption),
                ("category", &category),
                ("inventory", &join_or_none(inventory)),
                ("count", &n.to_string()),
            ]),
            self.config.question_temperature,
            self.config.max_tokens,
        )?;
        let mut out = Vec::new();
        for q in text::parse_questions(&reply).into_iter().take(n) {
            let masked = mask_category(&q, &category);
            let answer = self.text(
                rec,
                "s5_identify",
                "identify_object",
                crate::llmgate::vars([("description", &masked), ("candidates", &join_or_none(candidates))]),
                0.0,
                SHORT_ANSWER_TOKENS,
            )?;
            let resolved = text::first_answer_line(&answer);
            let pass = self.synonyms.same(&resolved, &category);
            out.push(ScenarioQuestion {
                text: q,
                verify_status: if pass { VerifyStatus::LlmPass } else { VerifyStatus::LlmFail },
                resolved: Some(self.synonyms.normalize(&resolved)),
            });
        }
        Ok(out)
    }

    /// Runs every instance of the scene on a bounded worker pool and compacts
    /// the store. Objects that fail stay resumable; the first error is
    /// returned after all objects have been attempted.
    pub fn annotate_scene(&self, scene: &SceneRecord, store: &SceneStore) -> Result<Vec<AnnotationRecord>, PipelineError> {
        let input = SceneInput::load(scene)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.workers.max(1))
            .build()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let results: Vec<Result<AnnotationRecord, PipelineError>> = pool.install(|| {
            scene
                .instances
                .par_iter()
                .map(|inst| self.run_object(&input, store, inst))
                .collect()
        });
        store.compact()?;
        let mut records = Vec::with_capacity(results.len());
        for r in results {
            records.push(r?);
        }
        Ok(records)
    }
}

/// Per-status counts over a record set.
pub fn status_counts(records: &[AnnotationRecord]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for r in records {
        let key = match r.status {
            Status::Eliminated(reason) => format!("eliminated:{reason}"),
            s => serde_json::to_value(s).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default(),
        };
        *m.entry(key).or_insert(0) += 1;
    }
    m
}
