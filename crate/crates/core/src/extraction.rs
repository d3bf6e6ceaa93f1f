//! Document → causal graph.
//!
//! One discovery prompt per document, parsed against the graph document
//! schema with the gateway's refinement loop, then checked by the graph
//! validator. Every run ends in exactly one [`ExtractionOutcome`].

use crate::graph::{CausalGraph, GraphDocument, Violation};
use crate::llm::parse::JsonParser;
use crate::llm::{Gateway, LlmError, ParseOutcome, StructuredRequest};
use crate::prompts;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionOutcome {
    OkFormatted,
    OkParsed,
    ParseError,
    BuildError,
    CycleError,
}

impl ExtractionOutcome {
    pub fn is_ok(self) -> bool {
        matches!(self, Self::OkFormatted | Self::OkParsed)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BuildError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("hidden node `{0}` must not carry a current value")]
    HiddenWithValue(String),
    #[error("graph violates {} constraint(s): {}", .0.len(), .0.iter().map(Violation::tag).collect::<Vec<_>>().join(", "))]
    Invalid(Vec<Violation>),
}

impl BuildError {
    pub fn is_cycle(&self) -> bool {
        matches!(self, BuildError::Invalid(v) if v.iter().any(|v| matches!(v, Violation::Cycle { .. })))
    }
}

/// Content hash of a document: first 8 bytes of its SHA-256, hex.
pub fn doc_id(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

/// Result of turning a schema document into a graph, with repairs applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Built {
    pub graph: CausalGraph,
    pub warnings: Vec<String>,
}

/// Builds a graph from an already parsed document. In strict mode every
/// violation is an error; otherwise edges naming unknown nodes are dropped
/// with a warning. Duplicate edges always collapse to the first occurrence.
pub fn build_graph(doc: GraphDocument, strict: bool) -> Result<Built, BuildError> {
    if let Some(h) = doc.hidden_nodes.iter().find(|n| !n.current_value.trim().is_empty()) {
        return Err(BuildError::HiddenWithValue(h.node_id.clone()));
    }
    let (nodes, mut edges) = doc.into_parts();
    let mut warnings = Vec::new();
    if !strict {
        let ids: BTreeSet<&str> = nodes.iter().map(|n| n.node_id.as_str()).collect();
        edges.retain(|e| {
            let keep = ids.contains(e.source_node_id.as_str()) && ids.contains(e.target_node_id.as_str());
            if !keep {
                warnings.push(format!(
                    "dropped edge {} -> {}: unknown endpoint",
                    e.source_node_id, e.target_node_id
                ));
            }
            keep
        });
        if nodes.is_empty() {
            return Err(BuildError::Schema("document contains no nodes".into()));
        }
    }
    let (graph, dropped) = CausalGraph::with_dropped_duplicates(nodes, edges);
    warnings.extend(
        dropped
            .iter()
            .map(|e| format!("collapsed duplicate edge {} -> {}", e.source_node_id, e.target_node_id)),
    );
    for n in graph.nodes() {
        if !n.is_hidden() && n.current_value.is_none() {
            warnings.push(format!("observed node `{}` has no current value", n.node_id));
        }
    }
    let validation = graph.validate();
    if !validation.is_ok() {
        return Err(BuildError::Invalid(validation.violations));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(Built { graph, warnings })
}

/// Strict parse of a graph document text into a validated graph.
pub fn build_graph_from_json(json_text: &str) -> Result<CausalGraph, BuildError> {
    let doc: GraphDocument =
        serde_json::from_str(json_text).map_err(|e| BuildError::Schema(e.to_string()))?;
    build_graph(doc, true).map(|b| b.graph)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionOptions {
    /// Fail on edges naming unknown nodes instead of dropping them.
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionRun {
    pub doc_id: String,
    pub document: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph: Option<CausalGraph>,
    pub outcome: ExtractionOutcome,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<Violation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub transcript: StructuredRequest,
}

/// Extracts a graph from `document`. Transport and provider failures are
/// returned as errors; everything else is a recorded outcome.
pub fn extract_graph(
    gateway: &Gateway,
    document: &str,
    options: ExtractionOptions,
) -> Result<ExtractionRun, LlmError> {
    if document.trim().is_empty() {
        return Err(LlmError::Precondition("empty document".into()));
    }
    let mut request = gateway.structured(
        prompts::DISCOVERY_SYSTEM,
        prompts::discovery_user(document),
        gateway.options().extraction_temperature,
    );
    let mut run = ExtractionRun {
        doc_id: doc_id(document),
        document: document.to_string(),
        graph: None,
        outcome: ExtractionOutcome::ParseError,
        violations: Vec::new(),
        warnings: Vec::new(),
        error: None,
        transcript: request.clone(),
    };
    let parsed = gateway.complete_structured(&mut request, &JsonParser::<GraphDocument>::default());
    run.transcript = request;
    let parsed = match parsed {
        Ok(p) => p,
        Err(LlmError::ParseFailure { last_error, .. }) => {
            run.error = Some(last_error);
            return Ok(run);
        }
        Err(e) => return Err(e),
    };
    match build_graph(parsed.value, options.strict) {
        Ok(built) => {
            run.graph = Some(built.graph.with_source_docs(vec![run.doc_id.clone()]));
            run.warnings = built.warnings;
            run.outcome = match parsed.outcome {
                ParseOutcome::ParsedWithFallback => ExtractionOutcome::OkParsed,
                _ => ExtractionOutcome::OkFormatted,
            };
        }
        Err(e) => {
            run.outcome = if e.is_cycle() { ExtractionOutcome::CycleError } else { ExtractionOutcome::BuildError };
            run.error = Some(e.to_string());
            if let BuildError::Invalid(v) = e {
                run.violations = v;
            }
        }
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::llm::MockProvider;

    const CYCLIC: &str = r#"{"observed_nodes": [{"node_id": "A", "current_value": "1"}, {"node_id": "B", "current_value": "2"}],
        "observed_edges": [{"source_node_id": "A", "target_node_id": "B"}, {"source_node_id": "B", "target_node_id": "A"}]}"#;

    #[test]
    fn minimal_document() {
        let g = build_graph_from_json(r#"{"observed_nodes": [{"node_id": "0", "current_value": "x"}]}"#).unwrap();
        assert_eq!(g.nodes().len(), 1);
        assert_eq!(g.nodes()[0].description, "");
    }

    #[test]
    fn hidden_node_with_value_is_rejected() {
        let r = build_graph_from_json(
            r#"{"observed_nodes": [], "hidden_nodes": [{"node_id": "h", "current_value": "True"}]}"#,
        );
        assert_eq!(r, Err(BuildError::HiddenWithValue("h".into())));
    }

    #[test]
    fn bursa_round_trip() {
        let g = fixtures::bursa_factual_graph();
        assert_eq!(build_graph_from_json(&g.to_json()).unwrap(), g);
    }

    #[test]
    fn dangling_edges_depend_on_mode() {
        let doc: GraphDocument = serde_json::from_str(
            r#"{"observed_nodes": [{"node_id": "a", "current_value": "1"}],
                "observed_edges": [{"source_node_id": "a", "target_node_id": "ghost"}]}"#,
        )
        .unwrap();
        assert!(matches!(build_graph(doc.clone(), true), Err(BuildError::Invalid(_))));
        let built = build_graph(doc, false).unwrap();
        assert!(built.graph.edges().is_empty());
        assert_eq!(built.warnings.len(), 1);
    }

    #[test]
    fn bursa_article_extraction() {
        let gw = Gateway::mock(fixtures::bursa_replay_provider());
        let run = extract_graph(&gw, fixtures::BURSA_ARTICLE, ExtractionOptions::default()).unwrap();
        assert_eq!(run.outcome, ExtractionOutcome::OkFormatted);
        assert_eq!(run.graph.as_ref().unwrap(), &fixtures::bursa_factual_graph());
        assert_eq!(run.graph.unwrap().source_doc_ids(), [doc_id(fixtures::BURSA_ARTICLE)]);
        assert_eq!(run.transcript.exchange.user_turns[0], prompts::discovery_user(fixtures::BURSA_ARTICLE));
    }

    #[test]
    fn cyclic_reply_is_a_cycle_error() {
        let gw = Gateway::mock(MockProvider::new().with_default(CYCLIC));
        let run = extract_graph(&gw, "doc", ExtractionOptions::default()).unwrap();
        assert_eq!(run.outcome, ExtractionOutcome::CycleError);
        assert!(run.graph.is_none());
        assert_eq!(gw.chat_calls(), 1);
    }

    #[test]
    fn malformed_replies_end_as_parse_error() {
        let gw = Gateway::mock(MockProvider::new().with_default("{\"observed_nodes\": oops"));
        let run = extract_graph(&gw, "doc", ExtractionOptions::default()).unwrap();
        assert_eq!(run.outcome, ExtractionOutcome::ParseError);
        assert_eq!(run.transcript.parse_attempts.len(), 13);
    }

    #[test]
    fn prose_wrapped_graph_is_ok_parsed() {
        let reply = format!("Here is the graph:\n{}\nDone.", fixtures::coffee_ground_truth().to_json());
        let gw = Gateway::mock(MockProvider::new().with_default(reply));
        let run = extract_graph(&gw, fixtures::COFFEE_CONTEXT, ExtractionOptions { strict: true }).unwrap();
        assert_eq!(run.outcome, ExtractionOutcome::OkParsed);
        assert_eq!(run.graph.unwrap().edges().len(), 4);
    }

    #[test]
    fn doc_id_is_content_hash() {
        assert_eq!(doc_id("a"), doc_id("a"));
        assert_ne!(doc_id("a"), doc_id("b"));
        assert_eq!(doc_id("a").len(), 16);
    }
}
