//! Knowledge-graph driven missing-modality completion.
//!
//! Pipeline: extract a knowledge graph from the available modality with a
//! staged chat-model dialogue, expand it into several generation prompts,
//! generate candidates for the missing modality, and keep the candidate
//! whose graph and embeddings agree best with the available modality.

pub mod backends;
pub mod completion;
pub mod kgraph;
pub mod prompting;
pub mod ranking;
pub mod simeval;
pub mod store;
pub mod types;

pub use kgraph::{KnowledgeGraph, StructuredKnowledge, Triplet};
pub use types::{DomainTag, ImageData, ImageFormat, Modality, Payload};
