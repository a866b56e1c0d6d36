//! Per-turn composition: retrieve and filter knowledge, pick a demonstration,
//! assemble and render the prompt.

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusError, DialogueContext};
use crate::demo_selector::{select_demo, DemoIndex, DemoResult, Embedder};
use crate::knowledge::{filter_triplets_with, FrequencyMode, KnowledgeGraph, Triplet};
use crate::prompt::{assemble_prompt, render_prompt, PredictedLabels, PromptError, PromptSections, PromptTemplate};

/// Labels for one `(session, turn)`, as stored in prediction JSONL files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub session: String,
    pub turn: usize,
    pub entities: Vec<String>,
    pub acts: Vec<String>,
}

impl PredictionRecord {
    pub fn labels(&self) -> PredictedLabels {
        PredictedLabels {
            entities: self.entities.clone(),
            acts: self.acts.clone(),
        }
    }
}

/// Demonstration pool: training sessions and their index.
pub struct DemoPool<'a> {
    pub corpus: &'a Corpus,
    pub index: &'a DemoIndex,
    pub embedder: &'a dyn Embedder,
}

pub struct PromptSettings<'a> {
    pub template: &'a PromptTemplate,
    pub max_triplets: usize,
    pub window: usize,
    pub frequency_mode: FrequencyMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnPrompt {
    pub triplets: Vec<Triplet>,
    pub tau: usize,
    pub demo: Option<DemoResult>,
    pub sections: PromptSections,
    pub text: String,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

pub fn build_turn_prompt(
    context: &DialogueContext,
    labels: &PredictedLabels,
    kg: &KnowledgeGraph,
    demos: Option<&DemoPool<'_>>,
    settings: &PromptSettings<'_>,
) -> Result<TurnPrompt, PipelineError> {
    let sub = kg.one_hop_subgraph(&context.historical_entities);
    let filtered = filter_triplets_with(&sub, settings.max_triplets, settings.frequency_mode);
    let demo = match demos {
        Some(p) => select_demo(p.index, context, p.corpus, settings.window, p.embedder)?,
        None => None,
    };
    let sections = assemble_prompt(
        &settings.template.instruction,
        context,
        labels,
        &filtered.triplets,
        demo.as_ref(),
        settings.max_triplets,
    )?;
    let text = render_prompt(&sections, settings.template);
    Ok(TurnPrompt {
        triplets: filtered.triplets,
        tau: filtered.tau,
        demo,
        sections,
        text,
    })
}
