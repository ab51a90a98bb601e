//! Experiment configuration: one TOML file per experiment. Relative paths
//! are resolved against the directory holding the file.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use femloc_core::data::{PartitionRule, SyntheticEnvSpec};
use femloc_core::federation::FederationConfig;
use femloc_core::model::ModelConfig;
use femloc_core::preprocess::PreprocessConfig;
use femloc_core::theory::ProbeConfig;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "FEMLOC_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    /// Schema file describing the columns of `path`.
    pub schema: PathBuf,
}

/// A synthetic environment standing in for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSource {
    pub id: String,
    #[serde(flatten)]
    pub spec: SyntheticEnvSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub csv: Vec<CsvSource>,
    #[serde(default)]
    pub synthetic: Vec<SyntheticSource>,
    #[serde(default = "default_partition")]
    pub partition: PartitionRule,
    #[serde(default = "default_support_ratio")]
    pub support_ratio: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_partition() -> PartitionRule {
    PartitionRule::BuildingFloor
}

fn default_support_ratio() -> f64 {
    0.7
}

/// Which tasks train the meta-model and which are held out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
    /// Used when `test` is empty: this fraction of tasks (rounded up) is
    /// held out, chosen by a seeded shuffle of the sorted task ids.
    #[serde(default)]
    pub test_fraction: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaTestConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Target MDEs (meters) for the accuracy-based adaptation speed.
    #[serde(default)]
    pub targets: Vec<f64>,
    /// Step counts for the step-based adaptation speed.
    #[serde(default)]
    pub n_star: Vec<usize>,
    /// Neighbours of the KNN baseline; 0 disables it.
    #[serde(default = "default_knn")]
    pub knn_k: usize,
}

fn default_steps() -> usize {
    300
}
fn default_batch() -> usize {
    32
}
fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}
fn default_knn() -> usize {
    11
}

impl Default for MetaTestConfig {
    fn default() -> Self {
        MetaTestConfig {
            steps: default_steps(),
            batch_size: default_batch(),
            seeds: default_seeds(),
            targets: vec![],
            n_star: vec![],
            knn_k: default_knn(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProbeProblem {
    /// Least squares through one linear layer on generated data.
    #[default]
    Linear,
    /// The held-out tasks with the full client model (plain SGD).
    Tasks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    #[serde(default)]
    pub problem: ProbeProblem,
    #[serde(default = "default_probe_samples")]
    pub samples: usize,
    #[serde(default = "default_probe_inputs")]
    pub inputs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(flatten)]
    pub probe: ProbeConfig,
}

fn default_probe_samples() -> usize {
    64
}
fn default_probe_inputs() -> usize {
    8
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            problem: ProbeProblem::Linear,
            samples: default_probe_samples(),
            inputs: default_probe_inputs(),
            seed: 0,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Worker threads for client training and meta-testing; 0 means one per
    /// available core.
    #[serde(default)]
    pub workers: usize,
    pub data: DataConfig,
    #[serde(default)]
    pub split: Option<SplitConfig>,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub federation: FederationConfig,
    /// Write a checkpoint every this many rounds (0: final only).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub meta_test: MetaTestConfig,
    #[serde(default)]
    pub theory: TheoryConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Output root: the config key, else `$FEMLOC_OUT`, else `./out`.
    pub fn output_root(&self) -> PathBuf {
        match &self.output_dir {
            Some(p) => self.resolve(p),
            None => std::env::var_os(OUTPUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out")),
        }
    }

    pub fn experiment_dir(&self) -> PathBuf {
        self.output_root().join(&self.name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(AppError::Config("name must be a non-empty path component".into()));
        }
        self.model.validate()?;
        self.federation.validate()?;
        self.preprocess.validate()?;
        if self.data.csv.is_empty() && self.data.synthetic.is_empty() {
            return Err(AppError::Config("data: no csv or synthetic sources".into()));
        }
        if !(self.data.support_ratio > 0.0 && self.data.support_ratio < 1.0) {
            return Err(AppError::Config("data.support_ratio must lie in (0, 1)".into()));
        }
        for src in &self.data.csv {
            for p in [&src.path, &src.schema] {
                let full = self.resolve(p);
                if !full.is_file() {
                    let missing = std::io::Error::new(std::io::ErrorKind::NotFound, "referenced by data.csv");
                    return Err(AppError::io(&full, missing));
                }
            }
        }
        let mut ids = BTreeSet::new();
        for s in &self.data.synthetic {
            s.spec.validate()?;
            if !ids.insert(s.id.as_str()) {
                return Err(AppError::Config(format!("duplicate synthetic task id {:?}", s.id)));
            }
        }
        if let Some(split) = &self.split {
            let train: BTreeSet<&String> = split.train.iter().collect();
            if let Some(dup) = split.test.iter().find(|t| train.contains(t)) {
                return Err(AppError::Config(format!("task {dup:?} is in both train and test lists")));
            }
            if let Some(f) = split.test_fraction {
                if !(f > 0.0 && f < 1.0) {
                    return Err(AppError::Config("split.test_fraction must lie in (0, 1)".into()));
                }
            }
        }
        if self.meta_test.batch_size == 0 {
            return Err(AppError::Config("meta_test.batch_size must be >= 1".into()));
        }
        if self.meta_test.targets.iter().any(|a| !(*a > 0.0)) {
            return Err(AppError::Config("meta_test.targets must be positive".into()));
        }
        Ok(())
    }
}

/// Train/test partition of `all` (sorted ids).
pub fn split_tasks(split: Option<&SplitConfig>, all: &[String]) -> Result<(Vec<String>, Vec<String>)> {
    let known: BTreeSet<&String> = all.iter().collect();
    let Some(split) = split else {
        return Ok((all.to_vec(), vec![]));
    };
    for t in split.train.iter().chain(&split.test) {
        if !known.contains(t) {
            return Err(AppError::Config(format!("split names unknown task {t:?}")));
        }
    }
    let test: Vec<String> = if !split.test.is_empty() {
        split.test.clone()
    } else if let Some(f) = split.test_fraction {
        let k = ((f * all.len() as f64 - 1e-9).ceil() as usize).clamp(1, all.len().saturating_sub(1).max(1));
        let mut ids = all.to_vec();
        ids.sort();
        use rand::seq::SliceRandom;
        ids.shuffle(&mut femloc_core::rng::seeded(split.seed, 0x5917));
        let mut t = ids[..k].to_vec();
        t.sort();
        t
    } else {
        vec![]
    };
    let train: Vec<String> = if !split.train.is_empty() {
        split.train.clone()
    } else {
        all.iter().filter(|t| !test.contains(t)).cloned().collect()
    };
    if let Some(dup) = test.iter().find(|t| train.contains(t)) {
        return Err(AppError::Config(format!("task {dup:?} is in both train and test sets")));
    }
    Ok((train, test))
}
