//! Seeded, file-based runs of the whole workflow: generate replicate
//! panels, train one model per replicate, estimate per-step effects and
//! aggregate errors against the generator's truth.
//!
//! Every command reads and writes inside one run directory:
//!
//! ```text
//! <out>/<command>.config.json      resolved configuration
//! <out>/data/manifest.json         replicate seeds and file hashes
//! <out>/data/replicate_000.csv     panels
//! <out>/models/replicate_000.json  checkpoints
//! <out>/models/replicate_000_loss.csv
//! <out>/estimates/replicate_000_<method>.csv
//! <out>/evaluation/replicate_000.csv
//! <out>/evaluation/aggregate.csv
//! <out>/evaluation/failures.csv
//! ```

mod commands;

pub use commands::{
    civ_check, estimate, evaluate, generate, train, CivCheckRequest, CivCheckResult, EvaluationSummary, Failure,
    Manifest, ReplicateEntry, TrainSummary,
};

use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::civgraph::GraphError;
use crate::estimator::{ControlSet, EstimatorError, DEFAULT_WEAK_INSTRUMENT_TOLERANCE};
use crate::seqvae::{ExtractMode, ModelConfig, SeqVaeError, TrainConfig};
use crate::synthdata::{GenConfig, SynthError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Input { path: PathBuf, message: String },
    #[error("replicate {index}: {source}")]
    Replicate {
        index: usize,
        #[source]
        source: Box<PipelineError>,
    },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    SeqVae(#[from] SeqVaeError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

impl PipelineError {
    /// 2 for configuration and usage problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Synth(SynthError::Config(_)) => 2,
            PipelineError::SeqVae(SeqVaeError::Config(_)) => 2,
            PipelineError::Replicate { source, .. } => source.exit_code(),
            _ => 1,
        }
    }

    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
        move |source| PipelineError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Learned instrument and conditioning set.
    Tdciv,
    /// Per-step OLS with observed controls.
    Naive,
    /// The generator's true instrument and conditioning set.
    Oracle,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Tdciv => "tdciv",
            Method::Naive => "naive",
            Method::Oracle => "oracle",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    pub controls: ControlSet,
    pub extract: ExtractMode,
    /// Smallest accepted first-stage coefficient.
    pub weak_instrument_tolerance: f64,
    /// Methods run by `evaluate`.
    pub methods: Vec<Method>,
    /// Steps `t >= from_step` enter the summary error printed by `evaluate`.
    pub from_step: usize,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            controls: ControlSet::LaggedHistory,
            extract: ExtractMode::Means,
            weak_instrument_tolerance: DEFAULT_WEAK_INSTRUMENT_TOLERANCE,
            methods: vec![Method::Tdciv, Method::Naive, Method::Oracle],
            from_step: 2,
        }
    }
}

/// Where inputs are read from when they do not live in the run directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub models: Option<PathBuf>,
}

/// Configuration shared by every command. `data.seed` and `training.seed`
/// are replaced per replicate by seeds derived from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub replicates: usize,
    pub data: GenConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub estimation: EstimationConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            replicates: 30,
            data: GenConfig::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            estimation: EstimationConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(PipelineError::io(path))?;
        Self::from_json(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.replicates == 0 {
            return Err(PipelineError::Config("replicates must be at least 1".into()));
        }
        self.data.validate()?;
        self.model.validate()?;
        if self.training.epochs == 0 || self.training.batch_size == 0 {
            return Err(PipelineError::Config("epochs and batch_size must be positive".into()));
        }
        let tol = self.estimation.weak_instrument_tolerance;
        if !(tol >= 0.0 && tol.is_finite()) {
            return Err(PipelineError::Config(format!("weak_instrument_tolerance must be non-negative, got {tol}")));
        }
        if self.estimation.methods.is_empty() {
            return Err(PipelineError::Config("estimation.methods is empty".into()));
        }
        Ok(())
    }

    /// Generator config for replicate `k`.
    pub fn replicate_data(&self, k: usize) -> GenConfig {
        GenConfig { seed: replicate_seed(self.seed, k), ..self.data.clone() }
    }

    /// Hex SHA-256 of the settings that determine the generated panels.
    pub fn data_hash(&self) -> String {
        let key = serde_json::json!({ "seed": self.seed, "replicates": self.replicates, "data": self.data });
        sha256_hex(key.to_string().as_bytes())
    }
}

/// Seed of replicate `k`: the first word of stream `k` of a ChaCha8
/// generator keyed by the master seed. Each replicate's seed depends only
/// on `(master, k)`.
pub fn replicate_seed(master: u64, k: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(k as u64);
    rng.next_u64()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// File locations inside a run directory.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
    pub data: PathBuf,
    pub models: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path, paths: &PathsConfig) -> Self {
        Self {
            root: root.to_path_buf(),
            data: paths.data.clone().unwrap_or_else(|| root.join("data")),
            models: paths.models.clone().unwrap_or_else(|| root.join("models")),
        }
    }

    pub fn manifest(&self) -> PathBuf {
        self.data.join("manifest.json")
    }

    pub fn panel_name(k: usize) -> String {
        format!("replicate_{k:03}.csv")
    }

    pub fn checkpoint(&self, k: usize) -> PathBuf {
        self.models.join(format!("replicate_{k:03}.json"))
    }

    pub fn loss_trace(&self, k: usize) -> PathBuf {
        self.models.join(format!("replicate_{k:03}_loss.csv"))
    }

    pub fn estimates(&self, k: usize, method: Method) -> PathBuf {
        self.root.join("estimates").join(format!("replicate_{k:03}_{}.csv", method.label()))
    }

    pub fn evaluation(&self) -> PathBuf {
        self.root.join("evaluation")
    }
}

/// Writes the resolved configuration as `<out>/<command>.config.json`.
pub fn echo_config(cfg: &RunConfig, out: &Path, command: &str) -> Result<PathBuf, PipelineError> {
    fs::create_dir_all(out).map_err(PipelineError::io(out))?;
    let path = out.join(format!("{command}.config.json"));
    let mut text = serde_json::to_string_pretty(cfg)?;
    text.push('\n');
    fs::write(&path, text).map_err(PipelineError::io(&path))?;
    Ok(path)
}
