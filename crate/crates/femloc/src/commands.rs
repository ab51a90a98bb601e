//! The five commands. Each reads only the config file, the files written by
//! earlier phases, and explicit flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use femloc_core::data::{partition_tasks, split_support_query, synth_environment, FingerprintDataset, LocalizationTask};
use femloc_core::federation::{meta_test, AdaptationTrace, Federation, InitMode, MetaModel, RoundReport};
use femloc_core::linalg::Matrix;
use femloc_core::metrics::{distance_errors, knn_baseline};
use femloc_core::model::{ClientModel, Parts};
use femloc_core::nn::OptimizerKind;
use femloc_core::preprocess::{meta_signal_dim, preprocess};
use femloc_core::rng::{seeded, stream_id};
use femloc_core::theory::{theory_probe, ClientProblem, LinearLeastSquares, TheoryProbeReport};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{split_tasks, ExperimentConfig, ProbeProblem};
use crate::dataset::{create_dir, load_csv, read_json, read_task_bundle, write_json, write_task_bundle, CsvSchema, TaskMeta};
use crate::error::{AppError, Result};
use crate::exec::ParallelClients;
use crate::records::{improvement, read_trace_steps, run_metrics, write_cdf, write_round_log, write_trace, RunMetrics};
use crate::report::{summarize, TableRow};

pub const PREPROCESS_DIR: &str = "preprocess";
pub const TRAIN_DIR: &str = "meta-train";
pub const TEST_DIR: &str = "meta-test";
pub const PROBE_DIR: &str = "theory-probe";
pub const REPORT_DIR: &str = "report";

struct RawTask {
    id: String,
    data: FingerprintDataset,
    coord_names: Vec<String>,
    source: String,
}

fn load_raw_tasks(cfg: &ExperimentConfig) -> Result<Vec<RawTask>> {
    let mut tasks = Vec::new();
    for src in &cfg.data.csv {
        let path = cfg.resolve(&src.path);
        let schema = CsvSchema::from_file(&cfg.resolve(&src.schema))?;
        let ds = load_csv(&path, &schema)?;
        let parts = if ds.groups().is_some() {
            partition_tasks(&ds, cfg.data.partition)?
        } else {
            let stem = path.file_stem().map_or("data".into(), |s| s.to_string_lossy().into_owned());
            vec![(stem, ds)]
        };
        for (id, data) in parts {
            tasks.push(RawTask { id, data, coord_names: schema.coord_columns.clone(), source: path.display().to_string() });
        }
    }
    for s in &cfg.data.synthetic {
        tasks.push(RawTask {
            id: s.id.clone(),
            data: synth_environment(&s.spec)?,
            coord_names: vec!["x".into(), "y".into()],
            source: format!("synthetic seed {}", s.spec.seed),
        });
    }
    tasks.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = tasks.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(AppError::Config(format!("two sources produce task {:?}", w[0].id)));
    }
    Ok(tasks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub id: String,
    pub aps: usize,
    pub support: usize,
    pub query: usize,
    pub dropped_aps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub tasks: Vec<TaskSummary>,
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// Median AP count of the training tasks.
    pub meta_signal_dim: Option<usize>,
    pub latent_dim: usize,
}

fn bundles_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.experiment_dir().join(PREPROCESS_DIR)
}

/// Raw data → per-task preprocessing → support/query split → bundles.
pub fn cmd_preprocess(cfg: &ExperimentConfig) -> Result<PreprocessSummary> {
    cfg.validate()?;
    let out = bundles_dir(cfg);
    create_dir(&out)?;
    let raw = load_raw_tasks(cfg)?;
    let mut summaries = Vec::new();
    for t in &raw {
        let (clean, report) = preprocess(&t.data, &cfg.preprocess)?;
        let seed = stream_id(&[cfg.data.split_seed, fnv(&t.id)]);
        let (support, query) = split_support_query(&clean, cfg.data.support_ratio, seed)?;
        let task = LocalizationTask::new(t.id.clone(), support, query)?;
        let meta = TaskMeta {
            id: t.id.clone(),
            ap_names: task.support.ap_names().to_vec(),
            coord_names: t.coord_names.clone(),
            support_rows: task.support.len(),
            query_rows: task.query.len(),
            source: t.source.clone(),
            preprocessing: Some(report.clone()),
        };
        write_task_bundle(&out, &task, &meta)?;
        summaries.push(TaskSummary {
            id: t.id.clone(),
            aps: task.num_aps(),
            support: meta.support_rows,
            query: meta.query_rows,
            dropped_aps: report.dropped_aps.len(),
        });
    }
    let ids: Vec<String> = raw.iter().map(|t| t.id.clone()).collect();
    let (train, test) = split_tasks(cfg.split.as_ref(), &ids)?;
    let counts: Vec<usize> = summaries.iter().filter(|s| train.contains(&s.id)).map(|s| s.aps).collect();
    let summary = PreprocessSummary {
        tasks: summaries,
        meta_signal_dim: meta_signal_dim(&counts).ok(),
        latent_dim: cfg.model.latent_dim,
        train,
        test,
    };
    write_json(&out.join("report.json"), &summary)?;
    Ok(summary)
}

// Stable 64-bit FNV-1a, used to give every task its own split stream.
fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn bundle_ids(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| AppError::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| AppError::io(dir, e))?;
        if entry.path().join("meta.json").is_file() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(AppError::format(dir, "no task bundles found; run preprocess first"));
    }
    Ok(ids)
}

fn load_tasks(dir: &Path, ids: &[String]) -> Result<Vec<LocalizationTask>> {
    ids.iter().map(|id| Ok(read_task_bundle(&dir.join(id))?.0)).collect()
}

/// Train and test tasks as configured, loaded from the bundle directory.
pub fn load_split(cfg: &ExperimentConfig, bundles: Option<&Path>) -> Result<(Vec<LocalizationTask>, Vec<LocalizationTask>)> {
    let dir = bundles.map_or_else(|| bundles_dir(cfg), Path::to_path_buf);
    let ids = bundle_ids(&dir)?;
    let (train, test) = split_tasks(cfg.split.as_ref(), &ids)?;
    Ok((load_tasks(&dir, &train)?, load_tasks(&dir, &test)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub train_tasks: Vec<String>,
    pub rounds_run: u64,
    pub initial_mean_query_loss: Option<f64>,
    pub final_mean_query_loss: Option<f64>,
    pub checkpoint: PathBuf,
}

/// Meta-training on the training tasks; writes the round log and checkpoints.
pub fn cmd_meta_train(cfg: &ExperimentConfig, bundles: Option<&Path>) -> Result<(MetaModel, Vec<RoundReport>, TrainSummary)> {
    cfg.validate()?;
    let (train, _) = load_split(cfg, bundles)?;
    let out = cfg.experiment_dir().join(TRAIN_DIR);
    create_dir(&out)?;
    let ids: Vec<String> = train.iter().map(|t| t.id.clone()).collect();
    let exec = ParallelClients::new(cfg.workers)?;
    let mut fed = Federation::new(&cfg.model, &cfg.federation, train)?;
    let every = cfg.checkpoint_every;
    let ckpt_dir = out.join("checkpoints");
    if every > 0 {
        create_dir(&ckpt_dir)?;
    }
    let model_cfg = cfg.model.clone();
    let hook = Box::new(move |meta: &MetaModel, _: &RoundReport| -> femloc_core::Result<()> {
        if every > 0 && meta.round % every as u64 == 0 {
            let path = ckpt_dir.join(format!("round_{:05}.json", meta.round));
            Checkpoint::from_meta(&model_cfg, meta)
                .save(&path)
                .map_err(|e| femloc_core::Error::InvalidConfig(e.to_string()))?;
        }
        Ok(())
    });
    let log = fed.train(&exec, Some(hook))?;
    write_round_log(&out.join("round_log.csv"), &ids, &log)?;
    let checkpoint = out.join("checkpoint.json");
    Checkpoint::from_meta(&cfg.model, &fed.meta).save(&checkpoint)?;
    let summary = TrainSummary {
        train_tasks: ids,
        rounds_run: fed.meta.round,
        initial_mean_query_loss: log.first().map(|r| r.mean_query_loss),
        final_mean_query_loss: log.last().map(|r| r.mean_query_loss),
        checkpoint,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok((fed.meta, log, summary))
}

fn default_checkpoint(cfg: &ExperimentConfig) -> PathBuf {
    cfg.experiment_dir().join(TRAIN_DIR).join("checkpoint.json")
}

fn run_dir(cfg: &ExperimentConfig, task: &str, mode: &str, seed: u64) -> PathBuf {
    cfg.experiment_dir().join(TEST_DIR).join(task).join(mode).join(seed.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnResult {
    pub task: String,
    pub k: usize,
    pub mde_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSummary {
    pub runs: Vec<RunMetrics>,
    pub knn: Vec<KnnResult>,
    pub table: Vec<TableRow>,
}

fn query_errors(model: &ClientModel, task: &LocalizationTask) -> Result<Vec<f64>> {
    let pred = task.normalizer().denormalize(&model.full_forward(task.query.rssi())?);
    Ok(distance_errors(&pred, task.query.coords())?)
}

/// Paired RI/MI adaptation of every test task for every seed.
pub fn cmd_meta_test(cfg: &ExperimentConfig, checkpoint: Option<&Path>, bundles: Option<&Path>) -> Result<TestSummary> {
    cfg.validate()?;
    let ckpt_path = checkpoint.map_or_else(|| default_checkpoint(cfg), Path::to_path_buf);
    let theta = Checkpoint::load(&ckpt_path)?.theta_for(&cfg.model, &ckpt_path)?;
    let (_, test) = load_split(cfg, bundles)?;
    if test.is_empty() {
        return Err(AppError::Config("no test tasks: set split.test or split.test_fraction".into()));
    }
    let mt = &cfg.meta_test;
    let jobs: Vec<(&LocalizationTask, u64)> = test.iter().flat_map(|t| mt.seeds.iter().map(move |&s| (t, s))).collect();
    let exec = ParallelClients::new(cfg.workers)?;
    let results: Vec<Result<Vec<RunMetrics>>> = exec.pool().install(|| {
        jobs.par_iter()
            .map(|&(task, seed)| {
                let mut pair = Vec::with_capacity(2);
                for mode in [InitMode::Random, InitMode::Meta] {
                    let (trace, model) = meta_test(&cfg.model, task, mode, &theta, mt.steps, mt.batch_size, seed)?;
                    let dir = run_dir(cfg, &task.id, mode.label(), seed);
                    create_dir(&dir)?;
                    write_trace(&dir.join("trace.csv"), &trace)?;
                    write_cdf(&dir.join("cdf.csv"), &query_errors(&model, task)?)?;
                    pair.push((run_metrics(&trace, &mt.targets, &mt.n_star, mt.batch_size), dir));
                }
                let imp = improvement(&pair[1].0, &pair[0].0);
                let mut out = Vec::with_capacity(2);
                for (mut m, dir) in pair {
                    m.improvement = Some(imp.clone());
                    write_json(&dir.join("metrics.json"), &m)?;
                    out.push(m);
                }
                Ok(out)
            })
            .collect()
    });
    let mut runs = Vec::new();
    for r in results {
        runs.extend(r?);
    }
    let mut knn = Vec::new();
    if mt.knn_k > 0 {
        for task in &test {
            if task.support.len() < mt.knn_k {
                continue;
            }
            let (pred, mde_m) = knn_baseline(task, mt.knn_k)?;
            let dir = cfg.experiment_dir().join(TEST_DIR).join(&task.id).join("knn");
            create_dir(&dir)?;
            write_cdf(&dir.join("cdf.csv"), &distance_errors(&pred, task.query.coords())?)?;
            let res = KnnResult { task: task.id.clone(), k: mt.knn_k, mde_m };
            write_json(&dir.join("metrics.json"), &res)?;
            knn.push(res);
        }
    }
    let traces = read_traces(cfg, &test.iter().map(|t| t.id.clone()).collect::<Vec<_>>())?;
    let table = summarize(&traces, &mt.targets, &mt.n_star, mt.batch_size)?;
    let summary = TestSummary { runs, knn, table };
    write_json(&cfg.experiment_dir().join(TEST_DIR).join("summary.json"), &summary)?;
    Ok(summary)
}

/// Traces of finished meta-test runs, grouped by task, read back from disk.
pub fn read_traces(cfg: &ExperimentConfig, tasks: &[String]) -> Result<BTreeMap<String, Vec<AdaptationTrace>>> {
    let mut out = BTreeMap::new();
    for task in tasks {
        let mut traces = Vec::new();
        for &seed in &cfg.meta_test.seeds {
            for mode in [InitMode::Random, InitMode::Meta] {
                let dir = run_dir(cfg, task, mode.label(), seed);
                let metrics: RunMetrics = read_json(&dir.join("metrics.json"))?;
                traces.push(AdaptationTrace {
                    task_id: task.clone(),
                    mode,
                    seed,
                    initial_mde: metrics.mde_initial,
                    steps: read_trace_steps(&dir.join("trace.csv"))?,
                });
            }
        }
        out.insert(task.clone(), traces);
    }
    Ok(out)
}

/// Table of adaptation speeds from the traces on disk.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<Vec<TableRow>> {
    let dir = cfg.experiment_dir().join(TEST_DIR);
    let mut tasks = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| AppError::io(&dir, e))? {
        let entry = entry.map_err(|e| AppError::io(&dir, e))?;
        if entry.path().join(InitMode::Meta.label()).is_dir() {
            tasks.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    tasks.sort();
    if tasks.is_empty() {
        return Err(AppError::format(&dir, "no meta-test results; run meta-test first"));
    }
    let traces = read_traces(cfg, &tasks)?;
    let mt = &cfg.meta_test;
    let table = summarize(&traces, &mt.targets, &mt.n_star, mt.batch_size)?;
    let out = cfg.experiment_dir().join(REPORT_DIR);
    create_dir(&out)?;
    crate::report::write_table(&out.join("table.csv"), &table)?;
    Ok(table)
}

fn random_matrix(rows: usize, cols: usize, seed: u64, stream: u64) -> Matrix {
    let mut r = seeded(seed, stream);
    let data = (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized above")
}

/// Least-squares toy: a shared linear ground truth, the probed task, and a
/// sibling task whose gradient-descent solution serves as the warm start.
pub fn linear_toy(samples: usize, inputs: usize, seed: u64, lr: f64) -> Result<(LinearLeastSquares, LinearLeastSquares)> {
    let truth = random_matrix(inputs, 1, seed, 1);
    let draw = |stream: u64| {
        let x = random_matrix(samples, inputs, seed, stream);
        let noise = random_matrix(samples, 1, seed, stream + 1);
        let mut y = femloc_core::linalg::matmul_nn(&x, &truth);
        for (v, n) in y.as_mut_slice().iter_mut().zip(noise.as_slice()) {
            *v += 0.05 * n;
        }
        (x, y)
    };
    let train = draw(10);
    let eval = draw(20);
    let w0 = random_matrix(1, inputs, seed, 30);
    let random = LinearLeastSquares::new(w0.clone(), vec![0.5], train.clone(), eval.clone())?;
    let sibling_data = draw(40);
    let mut sibling = LinearLeastSquares::new(w0, vec![0.5], sibling_data.clone(), sibling_data)?;
    femloc_core::theory::epsilon_accuracy_steps(&mut sibling, lr, f64::MIN_POSITIVE, 200)?;
    let mut warm = random.clone();
    warm.net = sibling.net;
    Ok((random, warm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutput {
    pub problem: String,
    pub report: TheoryProbeReport,
}

/// ε-accuracy and linearization probes; always plain SGD.
pub fn cmd_theory_probe(cfg: &ExperimentConfig, checkpoint: Option<&Path>, bundles: Option<&Path>) -> Result<Vec<ProbeOutput>> {
    cfg.validate()?;
    let th = &cfg.theory;
    let out = cfg.experiment_dir().join(PROBE_DIR);
    let mut results = Vec::new();
    match th.problem {
        ProbeProblem::Linear => {
            let (mut ri, mut mi) = linear_toy(th.samples, th.inputs, th.seed, th.probe.lr)?;
            let report = theory_probe(&mut ri, &mut mi, &th.probe)?;
            results.push(ProbeOutput { problem: "linear".into(), report });
        }
        ProbeProblem::Tasks => {
            let ckpt_path = checkpoint.map_or_else(|| default_checkpoint(cfg), Path::to_path_buf);
            let theta = Checkpoint::load(&ckpt_path)?.theta_for(&cfg.model, &ckpt_path)?;
            let (_, test) = load_split(cfg, bundles)?;
            let sgd = femloc_core::model::ModelConfig { optimizers: Parts::splat(OptimizerKind::Sgd), ..cfg.model.clone() };
            for task in test {
                let mk = |mode| -> Result<ClientProblem> {
                    let model = femloc_core::federation::test_client_model(&sgd, &task, mode, &theta, th.seed)?;
                    Ok(ClientProblem { model, task: task.clone() })
                };
                let (mut ri, mut mi) = (mk(InitMode::Random)?, mk(InitMode::Meta)?);
                let report = theory_probe(&mut ri, &mut mi, &th.probe)?;
                results.push(ProbeOutput { problem: task.id.clone(), report });
            }
        }
    }
    for r in &results {
        let dir = out.join(&r.problem);
        create_dir(&dir)?;
        write_json(&dir.join("report.json"), &r.report)?;
    }
    Ok(results)
}
