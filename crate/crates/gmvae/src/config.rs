//! Experiment configuration as a single JSON document.

use std::fs;
use std::path::{Path, PathBuf};

use gmvae_core::corpus::CorpusConfig;
use gmvae_core::eval::ClassifierTraining;
use gmvae_core::gmvae::{ModelConfig, ModelMode, TrainConfig};
use gmvae_core::latent::DEFAULT_ALPHAS;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};
use crate::store::config_hash;

pub const SEED_ENV: &str = "GMVAE_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Percentages of train instrument labels, one model each.
    pub n_grid: Vec<f64>,
    pub w_grid: Vec<f64>,
    pub alpha_grid: Vec<f64>,
    /// Explicit `(source, target)` pairs; derived from instrument
    /// frequency when absent.
    pub transfer_pairs: Option<Vec<(usize, usize)>>,
    pub transfer_pair_count: usize,
    pub repetitions: usize,
    /// Also train the standard-normal baseline at the largest N.
    pub baseline: bool,
    pub probe: ClassifierTraining,
    pub cnn: ClassifierTraining,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub out_dir: PathBuf,
    /// Per-epoch checkpoints kept on disk (the newest ones); 0 keeps all.
    #[serde(default = "default_keep")]
    pub keep_checkpoints: usize,
}

fn default_keep() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    /// Class counts are taken from `corpus` on resolution.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentConfig,
    pub paths: Paths,
}

impl RunConfig {
    /// Desk scale: 6 instruments, 30 pitches, narrowed layers.
    pub fn desk() -> Self {
        let corpus = CorpusConfig::desk();
        let model = ModelConfig::desk(corpus.pitches, corpus.instruments, ModelMode::Gmvae);
        Self {
            corpus,
            model,
            train: TrainConfig { epochs: 100, batch_size: 32, learning_rate: 1e-3, seed: 0 },
            experiment: ExperimentConfig {
                n_grid: vec![0.0, 25.0, 50.0, 75.0, 100.0],
                w_grid: vec![0.0, 0.5, 1.0],
                alpha_grid: DEFAULT_ALPHAS.to_vec(),
                transfer_pairs: None,
                transfer_pair_count: 4,
                repetitions: 30,
                baseline: true,
                probe: ClassifierTraining::linear(),
                cnn: ClassifierTraining { epochs: 20, learning_rate: 1e-3, ..ClassifierTraining::cnn() },
            },
            paths: Paths { out_dir: PathBuf::from("runs/desk"), keep_checkpoints: default_keep() },
        }
    }

    /// Reference scale: 12 instruments, 82 pitches, 512-wide layers.
    pub fn full_scale() -> Self {
        let corpus = CorpusConfig::full_scale();
        let model = ModelConfig::reference(corpus.pitches, corpus.instruments, ModelMode::Gmvae);
        let desk = Self::desk();
        Self {
            corpus,
            model,
            train: TrainConfig::default(),
            experiment: ExperimentConfig { cnn: ClassifierTraining::cnn(), ..desk.experiment },
            paths: Paths { out_dir: PathBuf::from("runs/full"), ..desk.paths },
        }
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let text = fs::read_to_string(path).map_err(AppError::io(path))?;
        serde_json::from_str(&text).map_err(AppError::json(path))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn save(&self, path: &Path) -> AppResult<()> {
        fs::write(path, self.to_json()).map_err(AppError::io(path))
    }

    /// Applies the seed override from `env_seed` (the value of
    /// `GMVAE_SEED`), copies class counts into the model, and validates.
    pub fn resolve(mut self, env_seed: Option<&str>) -> AppResult<Self> {
        if let Some(s) = env_seed {
            self.train.seed =
                s.trim().parse().map_err(|_| AppError::Config(format!("{SEED_ENV}={s:?} is not a u64 seed")))?;
        }
        self.model.pitch_classes = self.corpus.pitches;
        self.model.instrument_classes = self.corpus.instruments;
        self.corpus.validate()?;
        self.model.validate()?;
        let e = &self.experiment;
        if self.train.batch_size < 2 {
            return Err(AppError::Config("batch size must be at least 2".into()));
        }
        if !(self.train.learning_rate > 0.0) {
            return Err(AppError::Config("learning rate must be positive".into()));
        }
        if e.n_grid.iter().any(|n| !(0.0..=100.0).contains(n)) {
            return Err(AppError::Config("N grid entries must lie in [0, 100]".into()));
        }
        if e.w_grid.iter().any(|w| !(*w >= 0.0)) {
            return Err(AppError::Config("w grid entries must be non-negative".into()));
        }
        if e.alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(AppError::Config("alpha grid entries must lie in [0, 1]".into()));
        }
        if let Some(pairs) = &e.transfer_pairs {
            if pairs.iter().any(|&(s, t)| s >= self.corpus.instruments || t >= self.corpus.instruments || s == t) {
                return Err(AppError::Config("transfer pairs must name two distinct valid instruments".into()));
            }
        }
        Ok(self)
    }

    /// Resolves with the process environment.
    pub fn resolve_env(self) -> AppResult<Self> {
        let seed = std::env::var(SEED_ENV).ok();
        self.resolve(seed.as_deref())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}
