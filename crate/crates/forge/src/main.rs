use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use densescan::corpus::synthetic::generate_corpus;
use densescan::corpus::{load_manifest, SceneRecord, SyntheticSpec};
use densescan::evalbench::{self, PredictionRecord, SegmentationSample};
use densescan::geomview::{object_frame_table, write_frame_table_csv, ViewParams};
use densescan::llmgate::{BackendConfig, Gateway};
use densescan::pipeline::export::{export_lines, read_jsonl, write_json_pretty};
use densescan::pipeline::stats::{write_histogram_csv, SplitSizes};
use densescan::pipeline::{
    apply_filters, compute_stats, filters::scene_count, load_scene_list, read_records, split_dataset,
    status_counts, write_export, write_records, Annotator, Backends, ExportRecord, JobStore, PipelineConfig,
};
use densescan::reviewsvc::{self, apply_decisions, sample_review_set, ReviewDecision, TaskStore};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "forge", version, about = "Build, score and review dense referring annotations")]
struct Cli {
    /// Working directory for the scene registry, job store, caches and stage images.
    #[arg(long, global = true, default_value = "work")]
    work: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a seeded synthetic corpus of scene manifests.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON scene spec; the built-in default otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Validate scene manifests and register them in the working directory.
    Ingest {
        #[arg(long)]
        manifest_dir: PathBuf,
        /// Write per-object `frame_id,visible_points,pixel_area` CSVs here.
        #[arg(long)]
        dump_visibility: Option<PathBuf>,
    },
    /// Run the annotation stages over registered scenes. Resumable.
    Annotate {
        /// File with one scene id per line, or a comma-separated list, or `all`.
        #[arg(long, default_value = "all")]
        scenes: String,
        /// Job config JSON: `{pipeline, vision, text}`.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Apply category filters and review decisions, then write the benchmark file.
    Assemble {
        #[arg(long)]
        out: PathBuf,
        /// Full records of every status; `<work>/records.jsonl` by default.
        #[arg(long)]
        records: Option<PathBuf>,
        /// Review decisions JSONL to fold in before export.
        #[arg(long)]
        decisions: Option<PathBuf>,
    },
    /// Corpus statistics over assembled records.
    Stats {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        hist: Option<PathBuf>,
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long, requires = "val")]
        train: Option<PathBuf>,
        #[arg(long, requires = "train")]
        val: Option<PathBuf>,
    },
    /// Partition assembled records by scene lists.
    Split {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        records: Option<PathBuf>,
        /// Writes `train.jsonl` and `val.jsonl` exports here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Build segmentation ground truth from a benchmark export.
    Gt {
        #[arg(long)]
        export: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = evalbench::DEFAULT_THRESHOLDS)]
        thresholds: Vec<f64>,
    },
    /// Human review of generated questions.
    Review {
        #[command(subcommand)]
        cmd: ReviewCmd,
    },
}

#[derive(Subcommand)]
enum ReviewCmd {
    /// Draw a stratified sample of questions as review tasks.
    Sample {
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long, default_value_t = reviewsvc::DEFAULT_REVIEW_RATE)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve review tasks over HTTP.
    Serve {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, default_value_t = 8700)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Decisions journal directory; `<work>/review` by default.
        #[arg(long)]
        state: Option<PathBuf>,
        /// Stage image root; `<work>/stage` by default.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Built review UI bundle served at `/`.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
}

/// Everything `annotate` needs besides the scenes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JobConfig {
    #[serde(default)]
    pipeline: PipelineConfig,
    vision: BackendConfig,
    /// Falls back to the vision backend.
    #[serde(default)]
    text: Option<BackendConfig>,
}

impl Default for JobConfig {
    fn default() -> Self {
        JobConfig {
            pipeline: PipelineConfig::default(),
            vision: BackendConfig::mock("mock", 0),
            text: None,
        }
    }
}

struct Work {
    root: PathBuf,
}

impl Work {
    fn registry(&self) -> PathBuf {
        self.root.join("scenes.json")
    }
    fn jobs(&self) -> JobStore {
        JobStore::new(self.root.join("jobs"))
    }
    fn stage(&self) -> PathBuf {
        self.root.join("stage")
    }
    fn cache(&self) -> PathBuf {
        self.root.join("cache")
    }
    fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    fn records(&self, given: Option<PathBuf>) -> PathBuf {
        given.unwrap_or_else(|| self.root.join("records.jsonl"))
    }

    fn load_registry(&self) -> Result<BTreeMap<String, PathBuf>> {
        let path = self.registry();
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("{} (run `forge ingest` first)", path.display()))?;
        serde_json::from_str(&text).with_context(|| path.display().to_string())
    }

    /// The config saved by the last `annotate`, or the default.
    fn job_config(&self) -> Result<JobConfig> {
        if self.config().exists() {
            read_config(&self.config())
        } else {
            Ok(JobConfig::default())
        }
    }
}

fn read_config(path: &Path) -> Result<JobConfig> {
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
    let cfg: JobConfig = serde_json::from_str(&text).with_context(|| format!("config {}", path.display()))?;
    cfg.pipeline.filters.validate()?;
    Ok(cfg)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn manifests_under(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("manifest.json").is_file() {
        return Ok(vec![dir.join("manifest.json")]);
    }
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).with_context(|| dir.display().to_string())? {
        let p = e?.path().join("manifest.json");
        if p.is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn dump_visibility(scene: &SceneRecord, out: &Path) -> Result<()> {
    let dir = out.join(&scene.scene_id);
    std::fs::create_dir_all(&dir)?;
    let params = ViewParams::default();
    for inst in &scene.instances {
        let table = object_frame_table(scene, inst, &params)?;
        let path = dir.join(format!("{}.csv", inst.instance_id));
        write_frame_table_csv(&path, &table).with_context(|| path.display().to_string())?;
    }
    Ok(())
}

fn select_scenes(arg: &str, registry: &BTreeMap<String, PathBuf>) -> Result<Vec<String>> {
    let ids: BTreeSet<String> = if arg == "all" {
        registry.keys().cloned().collect()
    } else if Path::new(arg).is_file() {
        load_scene_list(Path::new(arg))?
    } else {
        arg.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
    };
    if let Some(missing) = ids.iter().find(|id| !registry.contains_key(*id)) {
        bail!("scene {missing} is not registered");
    }
    Ok(ids.into_iter().collect())
}

fn build_backends(cfg: &JobConfig, cache: &Path) -> Result<Backends> {
    let vision = Arc::new(Gateway::from_config(&cfg.vision, Some(cache))?);
    let (text, text_retry) = match &cfg.text {
        Some(t) => (Arc::new(Gateway::from_config(t, Some(cache))?), t.retry_policy()),
        None => (vision.clone(), cfg.vision.retry_policy()),
    };
    Ok(Backends {
        vision,
        text,
        vision_retry: cfg.vision.retry_policy(),
        text_retry,
    })
}

#[derive(Serialize)]
struct AssembleSummary {
    records: usize,
    exported: usize,
    dense_expressions: usize,
    questions: usize,
    statuses: BTreeMap<String, usize>,
}

fn run(cli: Cli) -> Result<()> {
    let work = Work { root: cli.work };
    match cli.cmd {
        Cmd::Synth { out, count, seed, spec } => {
            let spec = match spec {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(&p)?).with_context(|| p.display().to_string())?,
                None => SyntheticSpec::default(),
            };
            let scenes = generate_corpus(seed, count, &spec, &out)?;
            for s in scenes {
                println!("{}\t{}", s.record.scene_id, s.manifest_path.display());
            }
        }
        Cmd::Ingest { manifest_dir, dump_visibility: dump } => {
            let mut registry = if work.registry().exists() { work.load_registry()? } else { BTreeMap::new() };
            let manifests = manifests_under(&manifest_dir)?;
            if manifests.is_empty() {
                bail!("no manifest.json under {}", manifest_dir.display());
            }
            for m in manifests {
                let scene = load_manifest(&m)?;
                println!(
                    "{}\tpoints={}\tinstances={}\tframes={}",
                    scene.scene_id,
                    scene.points.len(),
                    scene.instances.len(),
                    scene.frames.len()
                );
                if let Some(d) = &dump {
                    dump_visibility(&scene, d)?;
                }
                registry.insert(scene.scene_id.clone(), std::path::absolute(&m)?);
            }
            std::fs::create_dir_all(&work.root)?;
            write_json_pretty(&work.registry(), &registry)?;
        }
        Cmd::Annotate { scenes, config } => {
            let cfg = match config {
                Some(p) => read_config(&p)?,
                None => work.job_config()?,
            };
            let registry = work.load_registry()?;
            let ids = select_scenes(&scenes, &registry)?;
            std::fs::create_dir_all(&work.root)?;
            write_json_pretty(&work.config(), &cfg)?;
            let annotator = Annotator::new(cfg.pipeline.clone(), build_backends(&cfg, &work.cache())?, work.stage())?;
            let jobs = work.jobs();
            let mut failed = Vec::new();
            for id in ids {
                let scene = load_manifest(&registry[&id])?;
                let store = jobs.scene(&id)?;
                match annotator.annotate_scene(&scene, &store) {
                    Ok(records) => println!("{id}\t{}", serde_json::to_string(&status_counts(&records))?),
                    Err(e) => {
                        log::error!("{id}: {e}");
                        failed.push(id);
                    }
                }
            }
            if !failed.is_empty() {
                bail!("{} scene(s) incomplete, rerun to resume: {}", failed.len(), failed.join(", "));
            }
        }
        Cmd::Assemble { out, records, decisions } => {
            let cfg = work.job_config()?;
            let mut all = apply_filters(work.jobs().all_records()?, &cfg.pipeline.filters);
            if let Some(d) = decisions {
                let ds: Vec<ReviewDecision> = reviewsvc::read_jsonl(&d)?;
                all = apply_decisions(all, &ds)?;
            }
            write_records(&work.records(records), &all)?;
            let exported = write_export(&out, &all)?;
            let lines = export_lines(&all);
            print_json(&AssembleSummary {
                records: all.len(),
                exported,
                dense_expressions: lines.len(),
                questions: lines.iter().map(|l| l.scenario_questions.len()).sum(),
                statuses: status_counts(&all),
            })?;
        }
        Cmd::Stats { out, hist, records, train, val } => {
            let all = read_records(&work.records(records))?;
            let mut stats = compute_stats(&all);
            if let (Some(t), Some(v)) = (train, val) {
                let finals: Vec<_> = all.into_iter().filter(|r| r.is_final()).collect();
                let (tr, va) = split_dataset(finals, &load_scene_list(&t)?, &load_scene_list(&v)?)?;
                stats.split = Some(SplitSizes {
                    train_scenes: scene_count(&tr),
                    val_scenes: scene_count(&va),
                    train_records: tr.len(),
                    val_records: va.len(),
                });
            }
            write_json_pretty(&out, &stats)?;
            if let Some(h) = hist {
                write_histogram_csv(&h, &stats).with_context(|| h.display().to_string())?;
            }
            println!(
                "scenes={} instances={} descriptions={} (dense={} questions={})",
                stats.scene_count,
                stats.instance_count,
                stats.total_description_count,
                stats.dense_expression_count,
                stats.question_count
            );
        }
        Cmd::Split { train, val, records, out_dir } => {
            let all = read_records(&work.records(records))?;
            let (tr, va) = split_dataset(all, &load_scene_list(&train)?, &load_scene_list(&val)?)?;
            println!(
                "train: {} scenes, {} records\nval: {} scenes, {} records",
                scene_count(&tr),
                tr.len(),
                scene_count(&va),
                va.len()
            );
            if let Some(d) = out_dir {
                std::fs::create_dir_all(&d)?;
                write_export(&d.join("train.jsonl"), &tr)?;
                write_export(&d.join("val.jsonl"), &va)?;
            }
        }
        Cmd::Gt { export, out } => {
            let exports: Vec<ExportRecord> = read_jsonl(&export)?;
            let registry = work.load_registry()?;
            let scene_ids: BTreeSet<&str> = exports.iter().map(|e| e.scene_id.as_str()).collect();
            let mut body = Vec::new();
            let mut n = 0;
            for id in scene_ids {
                let path = registry.get(id).with_context(|| format!("scene {id} is not registered"))?;
                for s in evalbench::samples_from_exports(&load_manifest(path)?, &exports)? {
                    serde_json::to_writer(&mut body, &s)?;
                    body.push(b'\n');
                    n += 1;
                }
            }
            densescan::llmgate::cache::write_atomic(&out, &body)?;
            println!("{n} samples");
        }
        Cmd::Eval { gt, pred, out, thresholds } => {
            let samples: Vec<SegmentationSample> = evalbench::read_jsonl(&gt)?;
            let preds: Vec<PredictionRecord> = evalbench::read_jsonl(&pred)?;
            let report = evalbench::evaluate(&samples, &preds, &thresholds)?;
            write_json_pretty(&out, &report)?;
            let accs: Vec<String> = report.acc_at.iter().map(|(k, v)| format!("Acc@{k}={v:.4}")).collect();
            println!(
                "n={} missing={} mIoU={:.4} {}",
                report.n_samples,
                report.n_missing,
                report.miou,
                accs.join(" ")
            );
        }
        Cmd::Review { cmd: ReviewCmd::Sample { records, rate, seed, out } } => {
            let all = read_records(&work.records(records))?;
            let tasks = sample_review_set(&all, rate, seed)?;
            reviewsvc::write_tasks(&out, &tasks)?;
            println!("{} tasks", tasks.len());
        }
        Cmd::Review {
            cmd: ReviewCmd::Serve { tasks, port, host, state, images, ui_dir },
        } => {
            let store = TaskStore::open(
                TaskStore::load_tasks(&tasks)?,
                &state.unwrap_or_else(|| work.root.join("review")),
            )?;
            let app_state = densescan_review::AppState::new(store, images.unwrap_or_else(|| work.stage()));
            let app = densescan_review::router(app_state, ui_dir.as_deref());
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
                println!("listening on http://{}", listener.local_addr()?);
                densescan_review::serve(listener, app).await
            })?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
