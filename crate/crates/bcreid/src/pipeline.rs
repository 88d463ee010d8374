//! End-to-end runs: data generation, sequential training into a run
//! directory, and evaluation of a finished run.
//!
//! Run directory layout:
//!
//! ```text
//! run_config.json        resolved configuration, benchmark digest, exclusion rule
//! checkpoints/task_{t}.ckpt
//! features/              append-only gallery feature sets, one per task
//! replay/                replay store after the last update
//! task_log.json          per task: checkpoint, gallery and replay hashes, frozen-head checks
//! loss_log.csv           per step loss terms
//! metrics.csv            backward-compatible per-dataset mAP / Rank-1 with Average row
//! unified.csv            all queries against all stored galleries
//! backfilled.csv         control: galleries re-embedded by the final model
//! compatibility.csv      mAP of queries embedded by model i against gallery j
//! evaluation.json        all of the above at full precision
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bcreid_core::eval::{self, DatasetTag, FeatureRow, MetricsTable, RetrievalMetrics, Split};
use bcreid_core::model::ModelParams;
use bcreid_core::synth::{gen_benchmark, TaskDataset};
use bcreid_core::trainer::{self, StepReport, TrainerState};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{AblationSection, Cac, Mode, RunConfig};
use crate::dataset_io::{benchmark_digest, load_benchmark, save_benchmark, Benchmark};
use crate::error::{read_string, write_atomic, Error, Result};
use crate::featstore::FeatureStore;
use crate::replay_io::save_replay;

const RUN_FORMAT: &str = "bcreid-run/1";
pub const EXCLUSION_RULE: &str = "gallery rows with the query's identity and camera are excluded before ranking";

/// Generates the benchmark described by `cfg` and writes it to `dir`.
pub fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<Benchmark> {
    let config = cfg.benchmark.config();
    let suite = gen_benchmark(&config, cfg.benchmark.seed)?;
    let b = Benchmark { config, seed: cfg.benchmark.seed, suite };
    save_benchmark(&b, dir)?;
    Ok(b)
}

/// Paths inside one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn checkpoint(&self, t: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("task_{t}.ckpt"))
    }

    pub fn features(&self) -> FeatureStore {
        FeatureStore::open(self.root.join("features"))
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

/// `{out}/{mode}/seed_{seed}`.
pub fn run_dir(out: &Path, mode: Mode, seed: u64) -> PathBuf {
    out.join(mode.name()).join(format!("seed_{seed}"))
}

/// The echo of a run's configuration, sufficient to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMeta {
    pub format: String,
    pub mode: Mode,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub benchmark_digest: String,
    pub tasks: usize,
    pub joint: bool,
    pub flags: AblationSection,
    pub exclusion_rule: String,
    pub config: RunConfig,
}

impl RunMeta {
    /// Row label in reports; custom runs spell out their flags.
    pub fn label(&self) -> String {
        match self.mode {
            Mode::Custom => {
                let f = &self.flags;
                let cac = match f.cac {
                    Cac::Off => "off",
                    Cac::Multiply => "multiply",
                    Cac::Average => "average",
                };
                format!("custom(cmcl={},pcl={},cac={},normalize_cmcl={})", f.cmcl, f.pcl, cac, f.normalize_cmcl)
            }
            m => m.name().to_string(),
        }
    }
}

/// What training recorded about one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskLog {
    pub task: usize,
    pub steps: usize,
    pub first_epoch_mean_loss: f64,
    pub last_epoch_mean_loss: f64,
    pub checkpoint_hash: String,
    /// Content hash of the gallery set written right after this task.
    pub gallery_hash: String,
    /// Digest of this task's replay entries; absent for the last task.
    pub replay_digest: Option<String>,
    pub frozen_digest_before: Option<String>,
    pub frozen_digest_after: Option<String>,
    pub max_frozen_input_grad_norm: Option<f64>,
}

fn hex(v: u64) -> String {
    format!("{v:016x}")
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_string(path)?).map_err(|e| Error::format(path, e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v).expect("value serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn load_meta(run: &Path) -> Result<RunMeta> {
    let p = run.join("run_config.json");
    if !p.exists() {
        return Err(Error::Config(format!("{} is not a run directory (no run_config.json)", run.display())));
    }
    read_json(&p)
}

pub fn load_task_log(run: &Path) -> Result<Vec<TaskLog>> {
    read_json(&run.join("task_log.json"))
}

fn loss_row(s: &mut String, r: &StepReport) {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    writeln!(s, "{},{},{},{},{},{},{},{}", r.task, r.epoch, r.step, r.total, r.ce, r.tri, opt(r.cmcl), opt(r.pcl))
        .expect("write to string");
}

/// Trains one seed of `cfg` in `mode` on the benchmark at `data_dir`, writes
/// the run directory and evaluates it.
pub fn train(
    cfg: &RunConfig,
    mode: Mode,
    seed: u64,
    data_dir: &Path,
    run: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<Evaluation> {
    let paths = RunPaths::new(run);
    if paths.file("run_config.json").exists() {
        return Err(Error::Config(format!("{} already holds a run; choose a fresh output directory", run.display())));
    }
    let bench = load_benchmark(data_dir)?;
    let digest = benchmark_digest(data_dir)?;
    let spec = cfg.mode_spec(mode);
    let suite = &bench.suite;
    let t_last = suite.len();
    let data_dir = std::fs::canonicalize(data_dir).map_err(|e| Error::io(data_dir, e))?;
    let mut echo = cfg.clone();
    echo.mode = mode;
    echo.seeds = vec![seed];
    echo.data_dir = data_dir.clone();
    echo.out_dir = run.to_path_buf();
    let meta = RunMeta {
        format: RUN_FORMAT.into(),
        mode,
        seed,
        data_dir,
        benchmark_digest: hex(digest),
        tasks: t_last,
        joint: spec.joint,
        flags: AblationSection {
            cmcl: spec.ablation.cmcl,
            pcl: spec.ablation.pcl,
            cac: Cac::from_consolidation(spec.ablation.attention),
            normalize_cmcl: spec.ablation.normalize_cmcl,
        },
        exclusion_rule: EXCLUSION_RULE.into(),
        config: echo,
    };
    write_json(&paths.file("run_config.json"), &meta)?;

    let tc = cfg.train.config(seed);
    let w = cfg.loss.weights();
    let store = paths.features();
    let mut losses = String::from("task,epoch,step,total,ce,tri,cmcl,pcl\n");
    let mut task_log = Vec::new();

    if spec.joint {
        let (params, report) = trainer::train_joint(suite, &tc, &w, &mut |r: &StepReport| loss_row(&mut losses, r))?;
        let em = report.epoch_means();
        for ds in suite {
            let t = ds.index();
            let p = ModelParams { task_index: t, ..params.clone() };
            let ckpt = paths.checkpoint(t);
            checkpoint::save(&ckpt, &p, None)?;
            let h = store.append(&eval::extract_features(&p, &ds.gallery, DatasetTag::gallery(t))?)?;
            task_log.push(TaskLog {
                task: t,
                steps: report.steps,
                first_epoch_mean_loss: em[0],
                last_epoch_mean_loss: em[em.len() - 1],
                checkpoint_hash: hex(checkpoint::file_hash(&ckpt)?),
                gallery_hash: hex(h),
                replay_digest: None,
                frozen_digest_before: None,
                frozen_digest_after: None,
                max_frozen_input_grad_norm: None,
            });
        }
        log(&format!("joint training done: {} steps", report.steps));
        write_json(&paths.file("task_log.json"), &task_log)?;
    } else {
        let mut state = TrainerState::new(seed);
        for ds in suite {
            let t = ds.index();
            let report = trainer::train_task(&mut state, ds, &tc, &spec.ablation, &w, &mut |r: &StepReport| loss_row(&mut losses, r))?;
            let params = state.params.as_ref().expect("trained");
            let ckpt = paths.checkpoint(t);
            checkpoint::save(&ckpt, params, state.frozen.as_ref())?;
            let h = store.append(&eval::extract_features(params, &ds.gallery, DatasetTag::gallery(t))?)?;
            let replay_digest = if t < t_last {
                trainer::update_replay_store(&mut state.replay, params, ds, &tc, &mut state.rng)?;
                state.replay.task_digest(t).map(hex)
            } else {
                None
            };
            let em = report.epoch_means();
            log(&format!(
                "task {t}: {} steps, epoch loss {:.4} -> {:.4}",
                report.steps,
                em[0],
                em[em.len() - 1]
            ));
            task_log.push(TaskLog {
                task: t,
                steps: report.steps,
                first_epoch_mean_loss: em[0],
                last_epoch_mean_loss: em[em.len() - 1],
                checkpoint_hash: hex(checkpoint::file_hash(&ckpt)?),
                gallery_hash: hex(h),
                replay_digest,
                frozen_digest_before: report.frozen_digest_before.map(hex),
                frozen_digest_after: report.frozen_digest_after.map(hex),
                max_frozen_input_grad_norm: report.max_frozen_input_grad_norm,
            });
            write_json(&paths.file("task_log.json"), &task_log)?;
        }
        save_replay(&state.replay, &paths.root.join("replay"))?;
    }
    write_atomic(&paths.file("loss_log.csv"), losses.as_bytes())?;
    evaluate(run)
}

/// One dataset's row at full precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRow {
    pub dataset: String,
    pub map: f64,
    pub rank1: f64,
    pub evaluated: usize,
    pub excluded: usize,
}

impl MetricRow {
    fn new(dataset: impl Into<String>, m: RetrievalMetrics) -> Self {
        Self { dataset: dataset.into(), map: m.map, rank1: m.rank1, evaluated: m.evaluated, excluded: m.excluded }
    }

    fn metrics(&self) -> RetrievalMetrics {
        RetrievalMetrics { map: self.map, rank1: self.rank1, evaluated: self.evaluated, excluded: self.excluded }
    }
}

/// Recorded versus loaded hash of one stored gallery set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GalleryCheck {
    pub task: usize,
    pub extractor_version: usize,
    pub recorded_hash: String,
    pub loaded_hash: String,
}

/// Everything `evaluate` computes for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Evaluation {
    pub exclusion_rule: String,
    pub per_dataset: Vec<MetricRow>,
    pub average_map: f64,
    pub average_rank1: f64,
    pub unified: MetricRow,
    pub backfilled: Vec<MetricRow>,
    pub backfilled_average_map: f64,
    pub backfilled_average_rank1: f64,
    /// `compatibility[i][j]`: queries of task j+1 embedded by model i+1
    /// against the stored gallery of task j+1.
    pub compatibility: Vec<Vec<f64>>,
    pub galleries: Vec<GalleryCheck>,
}

pub fn dataset_name(t: usize) -> String {
    format!("task{t}")
}

fn table(rows: &[MetricRow]) -> MetricsTable {
    MetricsTable { rows: rows.iter().map(|r| (r.dataset.clone(), r.metrics())).collect() }
}

fn query_rows(params: &ModelParams, ds: &TaskDataset) -> Result<Vec<FeatureRow>> {
    let tag = DatasetTag { task: ds.index(), split: Split::Query };
    Ok(eval::extract_features(params, &ds.query, tag)?.rows)
}

/// Loads the final model and every stored gallery (hash-verified) and writes
/// the metric files of the run. Stored feature sets are only read.
pub fn evaluate(run: &Path) -> Result<Evaluation> {
    let paths = RunPaths::new(run);
    let meta = load_meta(run)?;
    let digest = benchmark_digest(&meta.data_dir)?;
    if hex(digest) != meta.benchmark_digest {
        return Err(Error::Config(format!(
            "benchmark at {} has digest {}, the run was trained on {}",
            meta.data_dir.display(),
            hex(digest),
            meta.benchmark_digest
        )));
    }
    let bench = load_benchmark(&meta.data_dir)?;
    let suite = &bench.suite;
    let task_log = load_task_log(run)?;
    let store = paths.features();
    let mut models = Vec::with_capacity(suite.len());
    let mut galleries = Vec::with_capacity(suite.len());
    let mut checks = Vec::new();
    for ds in suite {
        let t = ds.index();
        models.push(checkpoint::load(&paths.checkpoint(t))?.0);
        let fs = store.load(DatasetTag::gallery(t))?;
        if fs.extractor_version != t {
            return Err(bcreid_core::Error::Protocol(format!(
                "gallery of task {t} was embedded by model {}, expected model {t}",
                fs.extractor_version
            ))
            .into());
        }
        let recorded = task_log
            .iter()
            .find(|l| l.task == t)
            .ok_or_else(|| Error::format(&paths.file("task_log.json"), format!("no entry for task {t}")))?;
        let loaded = hex(fs.content_hash());
        if loaded != recorded.gallery_hash {
            return Err(Error::Integrity {
                path: store.dir().to_path_buf(),
                msg: format!("gallery of task {t} changed since it was written ({} -> {loaded})", recorded.gallery_hash),
            });
        }
        checks.push(GalleryCheck {
            task: t,
            extractor_version: fs.extractor_version,
            recorded_hash: recorded.gallery_hash.clone(),
            loaded_hash: loaded,
        });
        galleries.push(fs.rows);
    }
    let last = models.last().ok_or_else(|| Error::Config("run has no tasks".into()))?;

    let mut compatibility = Vec::with_capacity(models.len());
    let mut final_queries = Vec::new();
    for (i, m) in models.iter().enumerate() {
        let mut row = Vec::with_capacity(suite.len());
        for (j, ds) in suite.iter().enumerate() {
            let q = query_rows(m, ds)?;
            row.push(eval::evaluate(&q, &galleries[j])?.map);
            if i + 1 == models.len() {
                final_queries.push(q);
            }
        }
        compatibility.push(row);
    }

    let mut per_dataset = Vec::new();
    let mut backfilled = Vec::new();
    for (j, ds) in suite.iter().enumerate() {
        let name = dataset_name(ds.index());
        per_dataset.push(MetricRow::new(&name, eval::evaluate(&final_queries[j], &galleries[j])?));
        let fresh = eval::extract_features(last, &ds.gallery, DatasetTag::gallery(ds.index()))?;
        backfilled.push(MetricRow::new(&name, eval::evaluate(&final_queries[j], &fresh.rows)?));
    }
    let all_queries: Vec<FeatureRow> = final_queries.into_iter().flatten().collect();
    let all_gallery: Vec<FeatureRow> = galleries.into_iter().flatten().collect();
    let unified = MetricRow::new("unified", eval::evaluate(&all_queries, &all_gallery)?);

    let (average_map, average_rank1) = table(&per_dataset).average();
    let (backfilled_average_map, backfilled_average_rank1) = table(&backfilled).average();
    let ev = Evaluation {
        exclusion_rule: EXCLUSION_RULE.into(),
        per_dataset,
        average_map,
        average_rank1,
        unified,
        backfilled,
        backfilled_average_map,
        backfilled_average_rank1,
        compatibility,
        galleries: checks,
    };
    write_metric_files(&paths, &ev)?;
    Ok(ev)
}

fn write_metric_files(paths: &RunPaths, ev: &Evaluation) -> Result<()> {
    write_atomic(&paths.file("metrics.csv"), table(&ev.per_dataset).to_csv().as_bytes())?;
    write_atomic(&paths.file("backfilled.csv"), table(&ev.backfilled).to_csv().as_bytes())?;
    let u = &ev.unified;
    write_atomic(&paths.file("unified.csv"), format!("dataset,mAP,rank1\nunified,{:.6},{:.6}\n", u.map, u.rank1).as_bytes())?;
    let n = ev.compatibility.len();
    let mut s = String::from("query_model");
    for j in 1..=n {
        write!(s, ",{}", dataset_name(j)).expect("write to string");
    }
    s.push('\n');
    for (i, row) in ev.compatibility.iter().enumerate() {
        write!(s, "model{}", i + 1).expect("write to string");
        for v in row {
            write!(s, ",{v:.6}").expect("write to string");
        }
        s.push('\n');
    }
    write_atomic(&paths.file("compatibility.csv"), s.as_bytes())?;
    write_json(&paths.file("evaluation.json"), ev)
}

pub fn load_evaluation(run: &Path) -> Result<Evaluation> {
    let p = run.join("evaluation.json");
    if !p.exists() {
        return Err(Error::Config(format!("{} has not been evaluated", run.display())));
    }
    read_json(&p)
}

/// Run directories under `path`: itself if it holds a run, otherwise every
/// run below it in lexicographic order.
pub fn find_runs(path: &Path) -> Result<Vec<PathBuf>> {
    if path.join("run_config.json").exists() {
        return Ok(vec![path.to_path_buf()]);
    }
    let rd = std::fs::read_dir(path).map_err(|e| Error::io(path, e))?;
    let mut dirs: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut out = Vec::new();
    for d in dirs {
        out.extend(find_runs(&d)?);
    }
    Ok(out)
}
