//! Core library: task definitions, datasets, inference, scoring, storage,
//! corpus curation and Q&A generation.

pub mod client;
pub mod curation;
pub mod dataset;
pub mod evaluator;
pub mod extract;
pub mod qagen;
pub(crate) mod serde_util;
pub mod store;
pub mod taskdef;
