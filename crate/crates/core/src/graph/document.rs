//! The canonical JSON document for a graph: `observed_nodes`, `hidden_nodes`,
//! `observed_edges` and `hidden_edges`, with field names exactly as the
//! discovery prompt asks the model to emit them.

use super::{CausalEdge, CausalGraph, NodeKind, VariableNode};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    #[serde(deserialize_with = "required_string")]
    pub node_id: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub description: String,
    #[serde(rename = "type", default, deserialize_with = "lenient_string")]
    pub value_type: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub values: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub current_value: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub context: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeRecord {
    #[serde(deserialize_with = "required_string")]
    pub source_node_id: String,
    #[serde(deserialize_with = "required_string")]
    pub target_node_id: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub description: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub details: String,
}

/// `observed_nodes` is required; the other lists default to empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub observed_nodes: Vec<NodeRecord>,
    #[serde(default)]
    pub hidden_nodes: Vec<NodeRecord>,
    #[serde(default)]
    pub observed_edges: Vec<EdgeRecord>,
    #[serde(default)]
    pub hidden_edges: Vec<EdgeRecord>,
}

impl GraphDocument {
    pub fn from_graph(graph: &CausalGraph) -> Self {
        let record = |n: &VariableNode| NodeRecord {
            node_id: n.node_id.clone(),
            description: n.description.clone(),
            value_type: n.value_type.clone(),
            values: n.values.clone(),
            current_value: n.current_value.clone().unwrap_or_default(),
            context: n.context.clone(),
        };
        let edge = |e: &CausalEdge| EdgeRecord {
            source_node_id: e.source_node_id.clone(),
            target_node_id: e.target_node_id.clone(),
            description: e.description.clone(),
            details: e.details.clone(),
        };
        let hidden_source = |e: &&CausalEdge| graph.node(&e.source_node_id).is_some_and(|n| n.is_hidden());
        Self {
            observed_nodes: graph.nodes().iter().filter(|n| !n.is_hidden()).map(record).collect(),
            hidden_nodes: graph.nodes().iter().filter(|n| n.is_hidden()).map(record).collect(),
            observed_edges: graph.edges().iter().filter(|e| !hidden_source(e)).map(edge).collect(),
            hidden_edges: graph.edges().iter().filter(hidden_source).map(edge).collect(),
        }
    }

    /// Converts records to graph-core values without any checking. Empty
    /// current values become `None`.
    pub fn into_parts(self) -> (Vec<VariableNode>, Vec<CausalEdge>) {
        let node = |kind: NodeKind| {
            move |r: NodeRecord| VariableNode {
                node_id: r.node_id,
                kind,
                description: r.description,
                value_type: r.value_type,
                values: r.values,
                current_value: Some(r.current_value).filter(|v| !v.is_empty()),
                context: r.context,
            }
        };
        let edge = |r: EdgeRecord| CausalEdge {
            source_node_id: r.source_node_id,
            target_node_id: r.target_node_id,
            description: r.description,
            details: r.details,
        };
        let mut nodes: Vec<_> = self.observed_nodes.into_iter().map(node(NodeKind::Observed)).collect();
        nodes.extend(self.hidden_nodes.into_iter().map(node(NodeKind::Hidden)));
        let mut edges: Vec<_> = self.observed_edges.into_iter().map(edge).collect();
        edges.extend(self.hidden_edges.into_iter().map(edge));
        (nodes, edges)
    }
}

impl Serialize for CausalGraph {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        GraphDocument::from_graph(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for CausalGraph {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let (nodes, edges) = GraphDocument::deserialize(deserializer)?.into_parts();
        Ok(CausalGraph::new(nodes, edges))
    }
}

fn scalar_to_string(value: Value) -> Result<String, &'static str> {
    match value {
        Value::String(s) => Ok(s),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(if b { "True" } else { "False" }.to_string()),
        Value::Null => Ok(String::new()),
        Value::Array(_) | Value::Object(_) => Err("expected a string, found a list or object"),
    }
}

/// Accepts strings, numbers, booleans and null (as empty).
fn lenient_string<'de, D: Deserializer<'de>>(deserializer: D) -> Result<String, D::Error> {
    scalar_to_string(Value::deserialize(deserializer)?).map_err(serde::de::Error::custom)
}

/// Like [`lenient_string`] but the result must be non-empty.
fn required_string<'de, D: Deserializer<'de>>(deserializer: D) -> Result<String, D::Error> {
    let s = lenient_string(deserializer)?;
    if s.trim().is_empty() {
        return Err(serde::de::Error::custom("identifier must be non-empty"));
    }
    Ok(s.trim().to_string())
}
