//! System prompt assembly and rendering.
//!
//! A prompt has four sections in fixed order: task instruction, historical
//! details, evident details and an optional demonstration. The wording lives
//! in a template resource so it can be swapped per locale without touching
//! the layout rules.

mod generate;
mod template;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DialogueContext, Speaker, Utterance};
use crate::demo_selector::DemoResult;
use crate::knowledge::Triplet;

pub use generate::{
    generate_response, stub_response, EndpointConfig, GenerationClient, GenerationError,
    GenerationRequest, DEFAULT_TIMEOUT_SECS, DEFAULT_TOKEN_ENV,
};
pub use template::{Locale, PromptTemplate, Section, TemplateError, PLACEHOLDERS};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("{count} triplets exceed the limit of {max}")]
    TooManyTriplets { count: usize, max: usize },
}

/// Labels predicted for the next response, in decoding order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedLabels {
    pub entities: Vec<String>,
    pub acts: Vec<String>,
}

/// Content of the four prompt sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSections {
    pub instruction: String,
    pub context: Vec<Utterance>,
    pub historical_entities: Vec<String>,
    pub historical_acts: Vec<String>,
    pub predicted_acts: Vec<String>,
    pub predicted_entities: Vec<String>,
    pub triplets: Vec<Triplet>,
    /// `None` drops the demonstration section entirely.
    pub demonstration: Option<Vec<Utterance>>,
}

impl PromptSections {
    pub fn section_count(&self) -> usize {
        if self.demonstration.is_some() {
            4
        } else {
            3
        }
    }
}

/// Collects the sections. `triplets` must already be filtered to at most `max_triplets`.
pub fn assemble_prompt(
    instruction: &str,
    context: &DialogueContext,
    predictions: &PredictedLabels,
    triplets: &[Triplet],
    demo: Option<&DemoResult>,
    max_triplets: usize,
) -> Result<PromptSections, PromptError> {
    if triplets.len() > max_triplets {
        return Err(PromptError::TooManyTriplets {
            count: triplets.len(),
            max: max_triplets,
        });
    }
    if demo.is_none() {
        log::info!("no demonstration; prompt has three sections");
    }
    Ok(PromptSections {
        instruction: instruction.to_string(),
        context: context.utterances.clone(),
        historical_entities: context.historical_entities.clone(),
        historical_acts: context.historical_acts.clone(),
        predicted_acts: predictions.acts.clone(),
        predicted_entities: predictions.entities.clone(),
        triplets: triplets.to_vec(),
        demonstration: demo.map(|d| d.span.clone()),
    })
}

pub fn render_prompt(sections: &PromptSections, template: &PromptTemplate) -> String {
    template.render(sections)
}

pub(crate) fn speaker_label(template: &PromptTemplate, s: Speaker) -> &str {
    match s {
        Speaker::Patient => &template.patient_label,
        Speaker::Doctor => &template.doctor_label,
    }
}
