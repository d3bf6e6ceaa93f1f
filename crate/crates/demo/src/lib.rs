//! Browser demo: the engine compiled to WebAssembly with scripted models, so
//! every operation runs offline in the page.
//!
//! Each export takes and returns JSON text. The plain functions in this
//! module do the work and are what the native tests exercise; the
//! `#[wasm_bindgen]` wrappers only convert errors.

use serde_json::{json, Value};
use std::collections::BTreeMap;
use wasm_bindgen::prelude::*;
use whatif_core::counterfactual::{run_counterfactual, CounterfactualOptions};
use whatif_core::evaluation::graph_distance;
use whatif_core::extraction::build_graph_from_json;
use whatif_core::llm::{EmbeddingMode, MockProvider};
use whatif_core::merge::{merge_graphs, MergeOptions, Strategy};
use whatif_core::{fixtures, CausalGraph, Gateway, Intervention, WorldState};

fn parse_graph(text: &str) -> Result<CausalGraph, String> {
    build_graph_from_json(text).map_err(|e| e.to_string())
}

fn to_value(graph: &CausalGraph) -> Value {
    serde_json::from_str(&graph.to_json()).unwrap_or(Value::Null)
}

/// The market-news graph the replay model knows about.
pub fn example_graph_json() -> String {
    fixtures::bursa_factual_graph().to_json()
}

/// Two small graphs sharing one variable, as a JSON array.
pub fn merge_example_json() -> String {
    let (a, b) = fixtures::merge_pair();
    json!([to_value(&a), to_value(&b)]).to_string()
}

/// Runs a counterfactual on `graph` against the recorded replies for the
/// example article. `assignments` is a `{"node": "value"}` object.
pub fn counterfactual_json(graph: &str, assignments: &str) -> Result<String, String> {
    let graph = parse_graph(graph)?;
    let map: BTreeMap<String, String> =
        serde_json::from_str(assignments).map_err(|e| format!("assignments: {e}"))?;
    if map.is_empty() {
        return Err("choose at least one intervention".into());
    }
    let iv = map.into_iter().fold(Intervention::new(), |iv, (k, v)| iv.set(k, v));
    let gateway = Gateway::mock(fixtures::bursa_replay_provider());
    let world = WorldState::from_graph(graph);
    let run = run_counterfactual(&gateway, &world, &iv, CounterfactualOptions::default()).map_err(|e| e.to_string())?;
    serde_json::to_string(&run).map_err(|e| e.to_string())
}

pub fn distance_json(a: &str, b: &str) -> Result<String, String> {
    let d = graph_distance(&parse_graph(a)?, &parse_graph(b)?);
    serde_json::to_string(&d).map_err(|e| e.to_string())
}

/// Merges graphs given as a JSON array. Embeddings are word-hash vectors,
/// so nodes with similar wording cluster together.
pub fn merge_json(graphs: &str, strategy: &str, epsilon: f64, depth: usize) -> Result<String, String> {
    let docs: Vec<Value> = serde_json::from_str(graphs).map_err(|e| format!("graphs: {e}"))?;
    let graphs = docs.iter().map(|d| parse_graph(&d.to_string())).collect::<Result<Vec<_>, _>>()?;
    let options = MergeOptions { strategy: strategy.parse::<Strategy>()?, epsilon, depth, ..MergeOptions::default() };
    let gateway = Gateway::mock(MockProvider::new().with_embedding(EmbeddingMode::BagOfWords, 64));
    let report = merge_graphs(&gateway, &graphs, options).map_err(|e| e.to_string())?;
    Ok(json!({
        "graph": to_value(&report.result.graph),
        "mapping": report.result.mapping,
        "dropped_edges": report.result.dropped_edges,
        "log": report.result.log,
        "clusters": report.clustering.clusters,
    })
    .to_string())
}

#[wasm_bindgen(js_name = exampleGraph)]
pub fn example_graph() -> String {
    example_graph_json()
}

#[wasm_bindgen(js_name = mergeExample)]
pub fn merge_example() -> String {
    merge_example_json()
}

#[wasm_bindgen]
pub fn counterfactual(graph: &str, assignments: &str) -> Result<String, JsError> {
    counterfactual_json(graph, assignments).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn distance(a: &str, b: &str) -> Result<String, JsError> {
    distance_json(a, b).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn merge(graphs: &str, strategy: &str, epsilon: f64, depth: usize) -> Result<String, JsError> {
    merge_json(graphs, strategy, epsilon, depth).map_err(|e| JsError::new(&e))
}
