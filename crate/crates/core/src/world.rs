//! Instantiated models: a graph plus one value per node and where each value
//! came from.

use crate::graph::{CausalGraph, VariableNode};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Observed,
    Abduced,
    Intervened,
    Predicted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeValue {
    pub value: String,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl NodeValue {
    pub fn new(value: impl Into<String>, provenance: Provenance) -> Self {
        Self { value: value.into(), provenance, explanation: None, confidence: None }
    }

    pub fn with_explanation(mut self, explanation: impl Into<String>, confidence: Option<f64>) -> Self {
        self.explanation = Some(explanation.into());
        self.confidence = confidence;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub graph: CausalGraph,
    pub values: BTreeMap<String, NodeValue>,
}

impl WorldState {
    /// Seeds values from the graph's current values, all tagged observed.
    pub fn from_graph(graph: CausalGraph) -> Self {
        let values = graph
            .nodes()
            .iter()
            .filter_map(|n| {
                n.current_value
                    .as_ref()
                    .map(|v| (n.node_id.clone(), NodeValue::new(v.clone(), Provenance::Observed)))
            })
            .collect();
        Self { graph, values }
    }

    /// Adds observed values for nodes the graph leaves empty (e.g. hidden
    /// confounders whose value a dataset supplies). Unknown ids are ignored.
    pub fn with_observations<'a>(mut self, observations: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        for (id, value) in observations {
            if self.graph.contains(id) {
                self.values.insert(id.to_string(), NodeValue::new(value, Provenance::Observed));
            }
        }
        self
    }

    pub fn value(&self, node_id: &str) -> Option<&str> {
        self.values.get(node_id).map(|v| v.value.as_str())
    }

    pub fn set(&mut self, node_id: impl Into<String>, value: NodeValue) {
        self.values.insert(node_id.into(), value);
    }

    pub fn missing(&self) -> Vec<&VariableNode> {
        self.graph.nodes().iter().filter(|n| !self.values.contains_key(&n.node_id)).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.missing().is_empty()
    }

    /// The graph with every node's current value replaced by the world's
    /// value (hidden nodes included).
    pub fn instantiated_graph(&self) -> CausalGraph {
        let nodes = self
            .graph
            .nodes()
            .iter()
            .map(|n| VariableNode { current_value: self.value(&n.node_id).map(str::to_string), ..n.clone() })
            .collect();
        CausalGraph::new(nodes, self.graph.edges().to_vec()).with_source_docs(self.graph.source_doc_ids().to_vec())
    }
}
