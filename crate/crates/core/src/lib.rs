//! Knowledge-grounded medical dialogue pipeline.

pub mod cli;
pub mod corpus;
pub mod demo_selector;
pub mod encoders;
pub mod knowledge;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod predictor;
pub mod prompt;
pub mod refiner;
pub mod synthetic;
pub mod text;
