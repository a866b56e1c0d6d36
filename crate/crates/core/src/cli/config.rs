use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::demo_selector::DEFAULT_WINDOW;
use crate::knowledge::{FrequencyMode, TripletFormat, DEFAULT_MAX_TRIPLETS};
use crate::numerics::OptimizerKind;
use crate::predictor::{LossWeights, ModelConfig, TrainConfig};
use crate::prompt::{EndpointConfig, Locale};
use crate::text::TokenizerMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    #[default]
    Stub,
    Http,
}

/// Everything a run needs. Loaded from JSON, then overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub graph_format: TripletFormat,
    /// Sessions used as demonstrations; defaults to `corpus`.
    pub demo_corpus: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub template: Option<PathBuf>,
    pub instruction: Option<PathBuf>,
    pub locale: Locale,
    pub tokenizer: TokenizerMode,

    /// Triplet cap M.
    pub max_triplets: usize,
    /// Demonstration window xi.
    pub window: usize,
    pub frequency_mode: FrequencyMode,

    pub lambda_x: f64,
    pub lambda_a: f64,
    pub lambda_kl: f64,
    pub d: usize,
    pub d_z: usize,
    pub refiner_hidden: usize,
    pub max_context_tokens: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub threshold: f64,
    pub target_entity_f1: Option<f64>,
    pub seed: u64,

    pub generator: GeneratorKind,
    pub endpoint: EndpointConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let weights = LossWeights::default();
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        Self {
            corpus: None,
            vocab: None,
            graph: None,
            graph_format: TripletFormat::Jsonl,
            demo_corpus: None,
            embeddings: None,
            checkpoint: PathBuf::from("medref-model.json"),
            template: None,
            instruction: None,
            locale: Locale::En,
            tokenizer: TokenizerMode::Auto,
            max_triplets: DEFAULT_MAX_TRIPLETS,
            window: DEFAULT_WINDOW,
            frequency_mode: FrequencyMode::ComputeOnce,
            lambda_x: weights.entity,
            lambda_a: weights.act,
            lambda_kl: weights.kl,
            d: model.d,
            d_z: model.latent_dim,
            refiner_hidden: model.refiner_hidden,
            max_context_tokens: model.max_context_tokens,
            learning_rate: train.learning_rate,
            epochs: train.epochs,
            batch_size: train.batch_size,
            optimizer: train.optimizer,
            threshold: train.threshold,
            target_entity_f1: None,
            seed: train.seed,
            generator: GeneratorKind::Stub,
            endpoint: EndpointConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.window == 0 {
            return Err("window must be at least 1".into());
        }
        if self.d == 0 || self.d_z == 0 || self.refiner_hidden == 0 {
            return Err("model dimensions must be positive".into());
        }
        self.train_config().validate().map_err(|e| e.to_string())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            entity: self.lambda_x,
            act: self.lambda_a,
            kl: self.lambda_kl,
        }
    }

    /// Parameter initialization draws from `seed`.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            latent_dim: self.d_z,
            refiner_hidden: self.refiner_hidden,
            max_context_tokens: self.max_context_tokens,
            seed: self.seed,
        }
    }

    /// Shuffling and latent noise draw from a stream derived from `seed`.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            weights: self.weights(),
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed.wrapping_add(1),
            threshold: self.threshold,
            optimizer: self.optimizer,
            evaluate: true,
            target_entity_f1: self.target_entity_f1,
        }
    }
}
