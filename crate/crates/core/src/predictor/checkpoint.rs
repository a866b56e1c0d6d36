use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MedRefModel, ModelConfig, PredictorError};
use crate::corpus::Vocab;
use crate::encoders::TokenVocab;
use crate::numerics::ParamCheckpoint;

pub const MODEL_FORMAT: &str = "medref-model";
pub const MODEL_VERSION: u32 = 1;

/// Everything needed to rebuild a [`MedRefModel`]: dimensions, vocabularies and
/// the parameter dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub tokens: Vocab,
    pub entities: Vocab,
    pub acts: Vocab,
    pub params: ParamCheckpoint,
}

impl ModelCheckpoint {
    pub fn from_model(model: &MedRefModel) -> Self {
        Self {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            config: model.config.clone(),
            tokens: model.tokens.vocab().clone(),
            entities: model.entities.clone(),
            acts: model.acts.clone(),
            params: model.store.to_checkpoint(),
        }
    }

    pub fn into_model(self) -> Result<MedRefModel, PredictorError> {
        if self.format != MODEL_FORMAT || self.version != MODEL_VERSION {
            return Err(PredictorError::Checkpoint(format!(
                "unsupported model checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut model = MedRefModel::new(
            self.config,
            TokenVocab::from_vocab(self.tokens),
            self.entities,
            self.acts,
        );
        model.store.load_checkpoint(&self.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), PredictorError> {
        let text = serde_json::to_string(self).map_err(|e| PredictorError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PredictorError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| PredictorError::Checkpoint(e.to_string()))
    }
}

impl MedRefModel {
    pub fn save(&self, path: &Path) -> Result<(), PredictorError> {
        ModelCheckpoint::from_model(self).save(path)
    }

    pub fn load(path: &Path) -> Result<Self, PredictorError> {
        ModelCheckpoint::load(path)?.into_model()
    }
}
