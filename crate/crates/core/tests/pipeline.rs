use std::path::Path;
use std::sync::Arc;

use densescan::corpus::synthetic::{Primitive, Shape, SyntheticSpec};
use densescan::corpus::{generate_synthetic_scene, SceneRecord};
use densescan::llmgate::{BackendFailure, Gateway, MockBackend, MockRule, ResponseCache, RetryPolicy};
use densescan::pipeline::export::export_lines;
use densescan::pipeline::{
    AnnotationRecord, Annotator, Backends, EliminationReason, FilterConfig, JobStore, PipelineConfig,
    PipelineError, SceneInput, Status, VerifyStatus,
};

fn primitive(category: &str, shape: Shape, color: [u8; 3]) -> Primitive {
    Primitive {
        category: category.into(),
        shape,
        color,
    }
}

/// chair, table and lamp in the open, plus a cup sealed inside the table.
fn scene(dir: &Path) -> SceneRecord {
    let spec = SyntheticSpec {
        scene_id: "room0".into(),
        objects: Some(vec![
            primitive("chair", Shape::Box { center: [-0.7, 0.0, 0.4], half: [0.3, 0.3, 0.4] }, [200, 60, 50]),
            primitive("table", Shape::Box { center: [0.6, 0.2, 0.35], half: [0.45, 0.35, 0.35] }, [120, 90, 40]),
            primitive("lamp", Shape::Sphere { center: [0.0, -0.9, 0.3], radius: 0.25 }, [240, 230, 120]),
            primitive("cup", Shape::Box { center: [0.6, 0.2, 0.35], half: [0.05, 0.05, 0.05] }, [10, 10, 200]),
        ]),
        ..SyntheticSpec::default()
    };
    generate_synthetic_scene(5, &spec, dir).unwrap().record
}

fn config() -> PipelineConfig {
    PipelineConfig {
        filters: FilterConfig {
            min_instances_per_category: 0,
            ..FilterConfig::default()
        },
        workers: 2,
        ..PipelineConfig::default()
    }
}

fn annotator(work: &Path, mock: Arc<MockBackend>, cfg: PipelineConfig) -> Annotator {
    let cache = ResponseCache::open(&work.join("cache"), "mock").unwrap();
    let gw = Arc::new(Gateway::new("mock", mock).with_cache(cache));
    Annotator::new(cfg, Backends::shared(gw, RetryPolicy::default()), work.join("stage")).unwrap()
}

fn by_category<'a>(records: &'a [AnnotationRecord], cat: &str) -> &'a AnnotationRecord {
    records.iter().find(|r| r.category == cat).unwrap()
}

#[test]
fn visible_chair_reaches_final() {
    let data = tempfile::tempdir().unwrap();
    let work = tempfile::tempdir().unwrap();
    let sc = scene(data.path());
    let a = annotator(work.path(), Arc::new(MockBackend::new(1)), config());
    let store = JobStore::new(work.path().join("jobs")).scene(&sc.scene_id).unwrap();
    let records = a.annotate_scene(&sc, &store).unwrap();
    let chair = by_category(&records, "chair");
    assert_eq!(chair.status, Status::Final);
    for text in [&chair.object_caption, &chair.frame_caption, &chair.scene_caption, &chair.dense_referring_expression] {
        assert!(text.as_deref().is_some_and(|t| !t.is_empty()));
    }
    assert!(chair.scenario_questions.iter().any(|q| q.verify_status == VerifyStatus::LlmPass));
    assert_eq!(chair.scenario_questions.len(), 2);
    let stages: Vec<&str> = chair.provenance.stages.keys().map(String::as_str).collect();
    assert_eq!(stages, ["s1", "s2", "s3", "s3b", "s4_identify", "s4_verify", "s5_generate", "s5_identify"]);
    assert!(!chair.context_frame_ids.is_empty() && chair.context_frame_ids.len() <= 8);
    assert!(chair.context_frame_ids.windows(2).all(|w| w[0] < w[1]));
    for r in &records {
        r.check_stage_fields().unwrap();
    }
    let dir = work.path().join("stage/room0").join(chair.instance_id.to_string());
    assert!(dir.join("crop.png").exists() && dir.join("highlight.png").exists() && dir.join("ctx_0.png").exists());
}

#[test]
fn hidden_object_is_unannotatable_without_backend_calls() {
    let data = tempfile::tempdir().unwrap();
    let work = tempfile::tempdir().unwrap();
    let sc = scene(data.path());
    let mock = Arc::new(MockBackend::new(1));
    let a = annotator(work.path(), mock.clone(), config());
    let store = JobStore::new(work.path().join("jobs")).scene(&sc.scene_id).unwrap();
    let input = SceneInput::load(&sc).unwrap();
    let cup = sc.instances.iter().find(|i| i.category == "cup").unwrap();
    let rec = a.run_object(&input, &store, cup).unwrap();
    assert_eq!(rec.status, Status::Eliminated(EliminationReason::Unannotatable));
    assert_eq!(mock.call_count(), 0);
    assert!(rec.stage_images.is_none());
}

#[test]
fn blocklisted_category_is_gated_before_staging() {
    let data = tempfile::tempdir().unwrap();
    let work = tempfile::tempdir().unwrap();
    let mut sc = scene(data.path());
    sc.instances[0].category = "wall".into();
    let mock = Arc::new(MockBackend::new(1));
    let a = annotator(work.path(), mock.clone(), config());
    let store = JobStore::new(work.path().join("jobs")).scene(&sc.scene_id).unwrap();
    let input = SceneInput::load(&sc).unwrap();
    let rec = a.run_object(&input, &store, &sc.instances[0]).unwrap();
    assert_eq!(rec.status, Status::Eliminated(EliminationReason::CategoryFiltered));
    assert_eq!(mock.call_count(), 0);
}

fn full_run(data: &Path) -> (Vec<AnnotationRecord>, usize) {
    let work = tempfile::tempdir().unwrap();
    let sc = scene(data);
    let mock = Arc::new(MockBackend::new(9));
    let a = annotator(work.path(), mock.clone(), config());
    let store = JobStore::new(work.path().join("jobs")).scene(&sc.scene_id).unwrap();
    (a.annotate_scene(&sc, &store).unwrap(), mock.call_count())
}

#[test]
fn resume_after_any_stage_matches_uninterrupted_run() {
    let data = tempfile::tempdir().unwrap();
    let (reference, _) = full_run(data.path());
    let sc = scene(data.path());
    for halt in [Status::Staged, Status::S1Done, Status::S2Done, Status::S3Done, Status::S4Done] {
        let work = tempfile::tempdir().unwrap();
        let jobs = JobStore::new(work.path().join("jobs"));
        let mut first = annotator(work.path(), Arc::new(MockBackend::new(9)), config());
        first.halt_after = Some(halt);
        first.annotate_scene(&sc, &jobs.scene("room0").unwrap()).unwrap();
        let stored = jobs.scene("room0").unwrap().records();
        assert!(stored.iter().all(|r| r.status == halt || r.status.is_terminal()), "{halt:?}");

        // The cache is wiped so every served stage must come from the store.
        let _ = std::fs::remove_dir_all(work.path().join("cache"));
        let mock = Arc::new(MockBackend::new(9));
        let second = annotator(work.path(), mock.clone(), config());
        let resumed = second.annotate_scene(&sc, &jobs.scene("room0").unwrap()).unwrap();
        assert_eq!(resumed, reference, "halt after {halt:?}");
        let log = mock.call_log();
        if halt.rank() >= Status::S1Done.rank() {
            assert!(!log.iter().any(|t| t == "object_caption"), "{halt:?}: {log:?}");
        }
        if halt.rank() >= Status::S2Done.rank() {
            assert!(!log.iter().any(|t| t == "frame_caption"), "{halt:?}: {log:?}");
        }
        if halt == Status::S4Done {
            assert!(log.iter().all(|t| t == "gen_questions" || t == "identify_object"), "{log:?}");
        }
    }
}

#[test]
fn backend_outage_leaves_object_resumable() {
    let data = tempfile::tempdir().unwrap();
    let (reference, _) = full_run(data.path());
    let sc = scene(data.path());
    let work = tempfile::tempdir().unwrap();
    let jobs = JobStore::new(work.path().join("jobs"));
    let down = MockBackend::new(9).with_rule(MockRule {
        template_id: Some("frame_caption".into()),
        contains: None,
        reply: densescan::llmgate::mock::MockReply::Fail(BackendFailure::Transient("503".into())),
        times: None,
    });
    let cfg = config();
    let cache = ResponseCache::open(&work.path().join("cache"), "mock").unwrap();
    let gw = Arc::new(
        Gateway::new("mock", Arc::new(down))
            .with_cache(cache)
            .with_clock(Arc::new(densescan::llmgate::VirtualClock::new())),
    );
    let a = Annotator::new(cfg.clone(), Backends::shared(gw, RetryPolicy::default()), work.path().join("stage")).unwrap();
    match a.annotate_scene(&sc, &jobs.scene("room0").unwrap()) {
        Err(PipelineError::Llm(densescan::llmgate::LlmError::BackendUnavailable { attempts: 4, .. })) => {}
        other => panic!("{other:?}"),
    }
    let stored = jobs.scene("room0").unwrap().records();
    assert!(stored.iter().any(|r| r.status == Status::S1Done));
    let again = annotator(work.path(), Arc::new(MockBackend::new(9)), cfg);
    assert_eq!(again.annotate_scene(&sc, &jobs.scene("room0").unwrap()).unwrap(), reference);
}

#[test]
fn rerun_with_warm_cache_makes_no_calls_and_same_bytes() {
    let data = tempfile::tempdir().unwrap();
    let sc = scene(data.path());
    let work = tempfile::tempdir().unwrap();
    let run = |jobs_dir: &str| {
        let mock = Arc::new(MockBackend::new(4));
        let a = annotator(work.path(), mock.clone(), config());
        let store = JobStore::new(work.path().join(jobs_dir)).scene("room0").unwrap();
        let recs = a.annotate_scene(&sc, &store).unwrap();
        let bytes: Vec<String> = export_lines(&recs).iter().map(|e| serde_json::to_string(e).unwrap()).collect();
        (bytes, mock.call_count())
    };
    let (first, calls) = run("jobs_a");
    assert!(calls > 0);
    let (same_store, calls) = run("jobs_a");
    assert_eq!(calls, 0);
    assert_eq!(same_store, first);
    let (fresh_store, calls) = run("jobs_b");
    assert_eq!(calls, 0);
    assert_eq!(fresh_store, first);
}

#[test]
fn expression_naming_another_category_is_eliminated() {
    let data = tempfile::tempdir().unwrap();
    let work = tempfile::tempdir().unwrap();
    let sc = scene(data.path());
    let mock = MockBackend::new(1).with_rule(MockRule::reply(
        "style_adapt",
        Some("Object label: chair"),
        "The t-a-b-l-e by the window, the one with four legs.",
    ));
    let a = annotator(work.path(), Arc::new(mock), config());
    let store = JobStore::new(work.path().join("jobs")).scene("room0").unwrap();
    let records = a.annotate_scene(&sc, &store).unwrap();
    assert_eq!(by_category(&records, "chair").status, Status::Eliminated(EliminationReason::Inconsistent));
    assert_eq!(by_category(&records, "table").status, Status::Final);
}

#[test]
fn inconsistency_marker_fails_verification() {
    let data = tempfile::tempdir().unwrap();
    let work = tempfile::tempdir().unwrap();
    let sc = scene(data.path());
    let a = annotator(work.path(), Arc::new(MockBackend::new(1).with_inconsistent_rate(1.0)), config());
    let store = JobStore::new(work.path().join("jobs")).scene("room0").unwrap();
    let records = a.annotate_scene(&sc, &store).unwrap();
    assert!(records.iter().all(|r| matches!(r.status, Status::Eliminated(_))));
    assert!(records.iter().filter(|r| r.status == Status::Eliminated(EliminationReason::Inconsistent)).count() >= 3);
}

fn staged_record(category: &str) -> AnnotationRecord {
    let mut r = AnnotationRecord::new("room0", 1, category);
    r.status = Status::S3Done;
    r.scene_caption = Some("A room with a chair (c-h-a-i-r) by the window.".into());
    r.dense_referring_expression = Some("The chair (c-h-a-i-r) by the window.".into());
    r
}

#[test]
fn plural_ground_truth_matches_singular_prediction() {
    let work = tempfile::tempdir().unwrap();
    let mock = MockBackend::new(1).with_rule(MockRule::reply("identify_object", None, "Chair."));
    let a = annotator(work.path(), Arc::new(mock), config());
    let mut r = staged_record("chairs");
    assert!(a.consistency_check(&mut r, &["chairs".into(), "table".into()]).unwrap());
    let mut r = staged_record("table");
    assert!(!a.consistency_check(&mut r, &["chair".into(), "table".into()]).unwrap());
}

#[test]
fn question_generation_and_uniqueness() {
    let work = tempfile::tempdir().unwrap();
    let work2 = tempfile::tempdir().unwrap();
    let work3 = tempfile::tempdir().unwrap();
    let inv = vec!["lamp".to_string(), "table".to_string()];
    let cands = vec!["chair".to_string(), "lamp".to_string(), "table".to_string()];

    let a = annotator(work.path(), Arc::new(MockBackend::new(1)), config());
    let qs = a.generate_questions(&mut staged_record("chair"), &inv, &cands).unwrap();
    assert_eq!(qs.len(), 2);
    assert!(qs.iter().all(|q| q.verify_status == VerifyStatus::LlmPass));

    let scripted = MockBackend::new(1).with_rule(MockRule::reply(
        "gen_questions",
        None,
        "1. Where would you put a mug down (t-a-b-l-e)?\n2. Where would you sit (c-h-a-i-r)?",
    ));
    let a = annotator(work2.path(), Arc::new(scripted), config());
    let qs = a.generate_questions(&mut staged_record("chair"), &inv, &cands).unwrap();
    assert_eq!(
        qs.iter().map(|q| q.verify_status).collect::<Vec<_>>(),
        [VerifyStatus::LlmFail, VerifyStatus::LlmPass]
    );
    assert_eq!(qs[0].resolved.as_deref(), Some("table"));

    let mock = Arc::new(MockBackend::new(1));
    let a = annotator(
        work3.path(),
        mock.clone(),
        PipelineConfig {
            questions_per_object: 0,
            ..config()
        },
    );
    assert!(a.generate_questions(&mut staged_record("chair"), &inv, &cands).unwrap().is_empty());
    assert_eq!(mock.call_count(), 0);
}

#[test]
fn all_questions_failing_flags_zero_survivors() {
    let data = tempfile::tempdir().unwrap();
    let work = tempfile::tempdir().unwrap();
    let sc = scene(data.path());
    let a = annotator(work.path(), Arc::new(MockBackend::new(1).with_mislead_rate(1.0)), config());
    let store = JobStore::new(work.path().join("jobs")).scene("room0").unwrap();
    let records = a.annotate_scene(&sc, &store).unwrap();
    let chair = by_category(&records, "chair");
    assert_eq!(chair.status, Status::Final);
    assert!(chair.zero_survivors);
    assert_eq!(chair.exported_questions().count(), 0);
    let lines = export_lines(&records);
    assert!(lines.iter().all(|l| l.scenario_questions.is_empty()));
}
