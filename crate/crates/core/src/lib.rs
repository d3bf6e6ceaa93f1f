//! Causal graph extraction, merging and counterfactual inference driven by a
//! language model.

pub mod cladder;
pub mod counterfactual;
pub mod evaluation;
pub mod extraction;
pub mod fixtures;
pub mod graph;
pub mod llm;
pub mod merge;
pub mod prompts;
pub mod world;

pub use graph::{CausalEdge, CausalGraph, GraphError, Intervention, NodeKind, ValidationResult, VariableNode, Violation};
pub use llm::{Gateway, GatewayOptions, LlmError};
pub use world::{NodeValue, Provenance, WorldState};
