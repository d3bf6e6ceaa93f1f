//! Abduction, intervention and prediction over an instantiated graph.
//!
//! Hidden variables get one sampled value from their observed effects, the
//! intervention is applied by graph surgery, and only the strict descendants
//! of the intervened variables are re-predicted, parents first. Every other
//! variable keeps its factual value.

use crate::graph::{CausalGraph, GraphError, Intervention, VariableNode};
use crate::llm::parse::{field_number, field_string, RecordParser, ResponseParser};
use crate::llm::{Gateway, LlmError, ParseOutcome, StructuredRequest};
use crate::prompts;
use crate::world::{NodeValue, Provenance, WorldState};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("node `{node}` cannot be predicted: parent `{parent}` has no value")]
    MissingParentValue { node: String, parent: String },
    #[error("node `{0}` has no value")]
    MissingValue(String),
    #[error("node `{0}` has no alternative value in its domain")]
    NoAlternative(String),
    #[error("cannot resolve target `{0}`")]
    UnresolvedTarget(String),
    #[error("model call for `{node}` failed: {source}")]
    Llm { node: String, source: LlmError },
}

impl InferenceError {
    fn llm(node: &str, source: LlmError) -> Self {
        Self::Llm { node: node.to_string(), source }
    }

    /// True when the model answered but never in a parseable form.
    pub fn is_parse_failure(&self) -> bool {
        matches!(self, Self::Llm { source: LlmError::ParseFailure { .. }, .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodePrediction {
    pub node_id: String,
    pub predicted_value: String,
    pub explanation: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    pub outcome: ParseOutcome,
    /// One structured request per sample; empty when no call was needed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub transcripts: Vec<StructuredRequest>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CounterfactualOptions {
    /// Abort on the first failed prediction instead of continuing with stale
    /// values.
    pub strict: bool,
    /// Samples per prediction; the most frequent value wins (ties go to the
    /// earliest sample). 1 reproduces the single-sample procedure.
    pub samples: usize,
}

impl Default for CounterfactualOptions {
    fn default() -> Self {
        Self { strict: false, samples: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunOutcome {
    Ok,
    InferenceError,
}

/// Which step produced each counterfactual value.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValuePartition {
    pub intervened: BTreeSet<String>,
    pub abduced: BTreeSet<String>,
    pub recomputed: BTreeSet<String>,
    pub copied: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualRun {
    /// Factual world after abduction and factual completion.
    pub factual: WorldState,
    pub intervention: Intervention,
    pub abduced: BTreeMap<String, NodePrediction>,
    /// Factual values predicted because an affected node needed them.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub completed: BTreeMap<String, NodePrediction>,
    pub predictions: BTreeMap<String, NodePrediction>,
    pub counterfactual: WorldState,
    pub partition: ValuePartition,
    pub outcome: RunOutcome,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub failures: BTreeMap<String, String>,
    /// Failures were parse exhaustion rather than transport or graph errors.
    #[serde(default)]
    pub parse_failure: bool,
    /// Some reply needed the lenient parsing path.
    #[serde(default)]
    pub used_fallback: bool,
    pub llm_calls: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Reply {
    value: String,
    explanation: String,
    confidence: Option<f64>,
}

pub(crate) fn clamp_confidence(c: f64) -> Result<f64, String> {
    if c.is_nan() {
        return Err("confidence is not a number".into());
    }
    if !(0.0..=1.0).contains(&c) {
        log::warn!("confidence {c} outside [0, 1]; clamped");
    }
    Ok(c.clamp(0.0, 1.0))
}

fn prediction_parser() -> impl ResponseParser<Output = Reply> {
    RecordParser::new(&["explanation", "value", "confidence"], |m: &Map<String, Value>| {
        let value = field_string(m, "value")
            .filter(|v| !v.is_empty())
            .ok_or("missing or empty `value`")?;
        let confidence = field_number(m, "confidence").map(clamp_confidence).transpose()?;
        Ok(Reply { value, explanation: field_string(m, "explanation").unwrap_or_default(), confidence })
    })
}

/// Runs `samples` structured requests built by `make` and keeps the majority
/// value.
fn sample<P: ResponseParser<Output = Reply>>(
    gateway: &Gateway,
    node_id: &str,
    samples: usize,
    make: impl Fn() -> StructuredRequest,
    parser: &P,
) -> Result<NodePrediction, InferenceError> {
    let mut replies = Vec::new();
    let mut transcripts = Vec::new();
    let mut outcome = ParseOutcome::ParsedFormatted;
    for _ in 0..samples.max(1) {
        let mut request = make();
        let result = gateway.complete_structured(&mut request, parser);
        transcripts.push(request);
        let reply = result.map_err(|e| InferenceError::llm(node_id, e))?;
        if reply.outcome == ParseOutcome::ParsedWithFallback {
            outcome = ParseOutcome::ParsedWithFallback;
        }
        replies.push(reply.value);
    }
    let mut counts: Vec<(String, usize)> = Vec::new();
    for r in &replies {
        let key = r.value.to_lowercase();
        match counts.iter_mut().find(|(k, _)| *k == key) {
            Some((_, n)) => *n += 1,
            None => counts.push((key, 1)),
        }
    }
    let best = counts.iter().map(|(_, n)| *n).max().unwrap_or(0);
    let winner_key = &counts.iter().find(|(_, n)| *n == best).expect("at least one sample").0;
    let winner = replies.iter().find(|r| r.value.to_lowercase() == *winner_key).expect("winner exists");
    Ok(NodePrediction {
        node_id: node_id.to_string(),
        predicted_value: winner.value.clone(),
        explanation: winner.explanation.clone(),
        confidence: winner.confidence,
        outcome,
        transcripts,
    })
}

/// Prediction user prompt: target attributes, then one numbered line per
/// parent with its value and the connecting edge.
pub fn prediction_prompt(graph: &CausalGraph, world: &WorldState, node_id: &str) -> Result<String, InferenceError> {
    let node = graph.node(node_id).ok_or_else(|| GraphError::UnknownNode(node_id.into()))?;
    let mut prompt = prompts::fill(prompts::PREDICTION_USER, &[("node attributes", &prompts::node_attributes(node))]);
    for (i, (parent, edge)) in graph.parents(node_id)?.into_iter().enumerate() {
        let value = world.value(&parent.node_id).ok_or_else(|| InferenceError::MissingParentValue {
            node: node_id.into(),
            parent: parent.node_id.clone(),
        })?;
        prompt.push('\n');
        prompt.push_str(&prompts::parent_line(i + 1, parent, value, edge));
    }
    Ok(prompt)
}

/// Abduction user prompt: hidden-node attributes, then its children as
/// numbered evidence lines.
pub fn abduction_prompt(graph: &CausalGraph, world: &WorldState, node_id: &str) -> Result<String, InferenceError> {
    let node = graph.node(node_id).ok_or_else(|| GraphError::UnknownNode(node_id.into()))?;
    let mut prompt = prompts::fill(prompts::ABDUCTION_USER, &[("node attributes", &prompts::node_attributes(node))]);
    let children = graph.children(node_id)?;
    if children.is_empty() {
        prompt.push('\n');
        prompt.push_str(prompts::ABDUCTION_NO_EVIDENCE);
    }
    for (i, (child, edge)) in children.into_iter().enumerate() {
        prompt.push('\n');
        prompt.push_str(&prompts::parent_line(i + 1, child, world.value(&child.node_id).unwrap_or("unknown"), edge));
    }
    Ok(prompt)
}

/// Predicts `node_id` from its parents' values in `world`, over the
/// structure of `graph`. Roots keep their current value without a call.
pub fn predict_node(
    gateway: &Gateway,
    graph: &CausalGraph,
    world: &WorldState,
    node_id: &str,
    samples: usize,
) -> Result<NodePrediction, InferenceError> {
    if graph.parents(node_id)?.is_empty() {
        let value = world.value(node_id).ok_or_else(|| InferenceError::MissingValue(node_id.into()))?;
        return Ok(NodePrediction {
            node_id: node_id.into(),
            predicted_value: value.into(),
            explanation: "no parents; value unchanged".into(),
            confidence: None,
            outcome: ParseOutcome::ParsedFormatted,
            transcripts: Vec::new(),
        });
    }
    let user = prediction_prompt(graph, world, node_id)?;
    let system = prompts::with_format(prompts::PREDICTION_SYSTEM, prompts::PREDICTION_FORMAT);
    let temperature = gateway.options().inference_temperature;
    sample(gateway, node_id, samples, || gateway.structured(&system, user.clone(), temperature), &prediction_parser())
}

/// Infers one value for the hidden node from its children.
pub fn abduce_node(
    gateway: &Gateway,
    world: &WorldState,
    node_id: &str,
    samples: usize,
) -> Result<NodePrediction, InferenceError> {
    let user = abduction_prompt(&world.graph, world, node_id)?;
    let system = prompts::with_format(
        &format!("{}\n{}", prompts::PREDICTION_SYSTEM, prompts::ABDUCTION_NOTE),
        prompts::PREDICTION_FORMAT,
    );
    let temperature = gateway.options().inference_temperature;
    sample(gateway, node_id, samples, || gateway.structured(&system, user.clone(), temperature), &prediction_parser())
}

/// Abduces every hidden node that has no value yet.
pub fn abduce(
    gateway: &Gateway,
    world: &WorldState,
    samples: usize,
) -> BTreeMap<String, Result<NodePrediction, InferenceError>> {
    world
        .graph
        .hidden_nodes()
        .filter(|h| world.value(&h.node_id).is_none())
        .map(|h| (h.node_id.clone(), abduce_node(gateway, world, &h.node_id, samples)))
        .collect()
}

/// Longest-path rank of each node; nodes of equal rank share no edge.
fn ranks(graph: &CausalGraph) -> Result<BTreeMap<String, usize>, GraphError> {
    let mut rank = BTreeMap::new();
    for id in graph.topological_order()? {
        let r = graph
            .parents(&id)?
            .iter()
            .map(|(p, _)| rank.get(&p.node_id).map_or(0, |r| r + 1))
            .max()
            .unwrap_or(0);
        rank.insert(id, r);
    }
    Ok(rank)
}

#[cfg(feature = "parallel")]
fn predict_batch(
    gateway: &Gateway,
    graph: &CausalGraph,
    world: &WorldState,
    ids: &[String],
    samples: usize,
) -> Vec<Result<NodePrediction, InferenceError>> {
    use rayon::prelude::*;
    ids.par_iter().map(|id| predict_node(gateway, graph, world, id, samples)).collect()
}

#[cfg(not(feature = "parallel"))]
fn predict_batch(
    gateway: &Gateway,
    graph: &CausalGraph,
    world: &WorldState,
    ids: &[String],
    samples: usize,
) -> Vec<Result<NodePrediction, InferenceError>> {
    ids.iter().map(|id| predict_node(gateway, graph, world, id, samples)).collect()
}

fn calls_of(p: &NodePrediction) -> usize {
    p.transcripts.iter().map(|t| t.parse_attempts.len().max(1)).sum()
}

fn predicted_value(p: &NodePrediction, provenance: Provenance) -> NodeValue {
    let value = NodeValue::new(p.predicted_value.clone(), provenance);
    if p.transcripts.is_empty() {
        value
    } else {
        value.with_explanation(p.explanation.clone(), p.confidence)
    }
}

/// Non-affected, non-intervened ancestors of the affected nodes that still
/// lack a value; they are completed in the factual world first.
fn needed_factual(graph: &CausalGraph, world: &WorldState, iv: &Intervention, affected: &BTreeSet<String>) -> BTreeSet<String> {
    let mut needed = BTreeSet::new();
    let mut stack: Vec<String> = affected.iter().cloned().collect();
    while let Some(id) = stack.pop() {
        for (p, _) in graph.parents(&id).unwrap_or_default() {
            let pid = &p.node_id;
            if iv.contains(pid) || affected.contains(pid) || world.value(pid).is_some() || p.is_hidden() {
                continue;
            }
            if needed.insert(pid.clone()) {
                stack.push(pid.clone());
            }
        }
    }
    needed
}

/// Full abduction → intervention → prediction run.
pub fn run_counterfactual(
    gateway: &Gateway,
    world: &WorldState,
    iv: &Intervention,
    options: CounterfactualOptions,
) -> Result<CounterfactualRun, InferenceError> {
    let surgered = world.graph.apply_intervention(iv)?;
    let affected = world.graph.affected_set(iv)?;
    let mut factual = world.clone();
    let mut failures = BTreeMap::new();
    let mut llm_calls = 0;
    let mut abduced = BTreeMap::new();
    let mut aborted = false;
    let mut parse_failure = false;

    for (id, result) in abduce(gateway, &factual, options.samples) {
        match result {
            Ok(p) => {
                llm_calls += calls_of(&p);
                factual.set(id.clone(), predicted_value(&p, Provenance::Abduced));
                abduced.insert(id, p);
            }
            Err(e) => {
                parse_failure |= e.is_parse_failure();
                failures.insert(id, e.to_string());
                aborted |= options.strict;
            }
        }
    }

    let mut completed = BTreeMap::new();
    let needed = needed_factual(&world.graph, &factual, iv, &affected);
    if !aborted && !needed.is_empty() {
        for id in world.graph.topological_order()? {
            if !needed.contains(&id) {
                continue;
            }
            match predict_node(gateway, &world.graph, &factual, &id, options.samples) {
                Ok(p) => {
                    llm_calls += calls_of(&p);
                    factual.set(id.clone(), predicted_value(&p, Provenance::Predicted));
                    completed.insert(id, p);
                }
                Err(e) => {
                    parse_failure |= e.is_parse_failure();
                    failures.insert(id, e.to_string());
                    if options.strict {
                        aborted = true;
                        break;
                    }
                }
            }
        }
    }

    let mut cf = WorldState { graph: surgered.clone(), values: factual.values.clone() };
    for (id, value) in &iv.assignments {
        cf.set(id.clone(), NodeValue::new(value.clone(), Provenance::Intervened));
    }

    let mut predictions = BTreeMap::new();
    if !aborted {
        let rank = ranks(&surgered)?;
        let mut by_rank: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for id in &affected {
            by_rank.entry(rank[id]).or_default().push(id.clone());
        }
        for ids in by_rank.values() {
            let results = predict_batch(gateway, &surgered, &cf, ids, options.samples);
            for (id, result) in ids.iter().zip(results) {
                match result {
                    Ok(p) => {
                        llm_calls += calls_of(&p);
                        cf.set(id.clone(), predicted_value(&p, Provenance::Predicted));
                        predictions.insert(id.clone(), p);
                    }
                    Err(e) => {
                        parse_failure |= e.is_parse_failure();
                        failures.insert(id.clone(), e.to_string());
                        aborted |= options.strict;
                    }
                }
            }
            if aborted {
                break;
            }
        }
    }

    let intervened: BTreeSet<String> = iv.assignments.keys().cloned().collect();
    let abduced_ids: BTreeSet<String> = abduced.keys().cloned().collect();
    let copied = world
        .graph
        .nodes()
        .iter()
        .map(|n| n.node_id.clone())
        .filter(|id| !intervened.contains(id) && !abduced_ids.contains(id) && !affected.contains(id))
        .collect();
    let used_fallback = abduced
        .values()
        .chain(completed.values())
        .chain(predictions.values())
        .any(|p| p.outcome == ParseOutcome::ParsedWithFallback);
    Ok(CounterfactualRun {
        factual,
        intervention: iv.clone(),
        abduced,
        completed,
        predictions,
        counterfactual: cf,
        partition: ValuePartition { intervened, abduced: abduced_ids, recomputed: affected, copied },
        outcome: if failures.is_empty() { RunOutcome::Ok } else { RunOutcome::InferenceError },
        failures,
        parse_failure,
        used_fallback,
        llm_calls,
    })
}

/// Splits a free-text domain such as `low, moderate, high`, `{a, b}` or
/// `yes or no`. Booleans with an empty domain are `True`/`False`.
pub fn domain_values(node: &VariableNode) -> Vec<String> {
    let cleaned = node.values.trim().trim_start_matches(['{', '[', '(']).trim_end_matches(['}', ']', ')']);
    let mut out: Vec<String> = Vec::new();
    for part in cleaned.split([',', '/', '|', ';']).flat_map(|p| p.split(" or ")) {
        let v = part.trim().trim_matches(['"', '\'']).trim();
        if !v.is_empty() && !out.iter().any(|o| o.eq_ignore_ascii_case(v)) {
            out.push(v.to_string());
        }
    }
    if out.is_empty() && node.value_type.trim().eq_ignore_ascii_case("bool") {
        return vec!["True".into(), "False".into()];
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub node_id: String,
    pub factual_value: String,
    pub proposed_value: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    pub explanation: String,
    /// False when the domain left only one alternative.
    pub used_llm: bool,
}

/// Suggests a value different from the node's current one.
pub fn propose_counterfactual_value(
    gateway: &Gateway,
    world: &WorldState,
    node_id: &str,
) -> Result<Proposal, InferenceError> {
    let node = world.graph.node(node_id).ok_or_else(|| GraphError::UnknownNode(node_id.into()))?;
    let current = world.value(node_id).ok_or_else(|| InferenceError::MissingValue(node_id.into()))?;
    let domain = domain_values(node);
    let alternatives: Vec<&String> = domain.iter().filter(|v| !v.eq_ignore_ascii_case(current)).collect();
    let current_in_domain = alternatives.len() < domain.len();
    if domain.len() == 1 && current_in_domain {
        return Err(InferenceError::NoAlternative(node_id.into()));
    }
    if current_in_domain && alternatives.len() == 1 {
        return Ok(Proposal {
            node_id: node_id.into(),
            factual_value: current.into(),
            proposed_value: alternatives[0].clone(),
            confidence: Some(1.0),
            explanation: "the only other value in the domain".into(),
            used_llm: false,
        });
    }
    let current_owned = current.to_string();
    let parser = RecordParser::new(
        &["explanation", "factual_value", "counterfactual_value", "confidence"],
        move |m: &Map<String, Value>| {
            let value = field_string(m, "counterfactual_value")
                .filter(|v| !v.is_empty())
                .ok_or("missing or empty `counterfactual_value`")?;
            if value.eq_ignore_ascii_case(&current_owned) {
                return Err("the counterfactual value must differ from the current value".to_string());
            }
            let confidence = field_number(m, "confidence").map(clamp_confidence).transpose()?;
            Ok(Reply { value, explanation: field_string(m, "explanation").unwrap_or_default(), confidence })
        },
    );
    let mut request = gateway.structured(
        &prompts::with_format(prompts::PROPOSAL_SYSTEM, prompts::PROPOSAL_FORMAT),
        prompts::proposal_user(node, current),
        gateway.options().inference_temperature,
    );
    let reply = gateway
        .complete_structured(&mut request, &parser)
        .map_err(|e| InferenceError::llm(node_id, e))?;
    Ok(Proposal {
        node_id: node_id.into(),
        factual_value: current.into(),
        proposed_value: reply.value.value,
        confidence: reply.value.confidence,
        explanation: reply.value.explanation,
        used_llm: true,
    })
}

/// Finds a node by id, then by case-insensitive description, then by
/// description containment either way.
pub fn resolve_node(graph: &CausalGraph, key: &str) -> Option<String> {
    if graph.contains(key) {
        return Some(key.to_string());
    }
    let k = key.trim().to_lowercase();
    let nodes = graph.nodes();
    nodes
        .iter()
        .find(|n| n.description.to_lowercase() == k)
        .or_else(|| {
            nodes.iter().find(|n| {
                let d = n.description.to_lowercase();
                !d.is_empty() && (d.contains(&k) || k.contains(&d))
            })
        })
        .map(|n| n.node_id.clone())
}

const NEGATIONS: &[&str] = &["not", "no", "non", "never", "without", "doesn't", "don't", "isn't", "didn't"];
const ANTONYMS: &[(&str, &str)] = &[
    ("high", "low"),
    ("good", "bad"),
    ("active", "inactive"),
    ("increase", "decrease"),
    ("on", "off"),
    ("true", "false"),
    ("present", "absent"),
    ("yes", "no"),
    ("close", "far"),
];
const STOPWORDS: &[&str] = &[
    "a", "an", "the", "of", "to", "is", "are", "be", "has", "have", "had", "was", "were", "will", "would", "and",
    "or", "in", "on", "at", "for", "with", "by", "person", "employee", "individual", "value", "there",
];

pub(crate) fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

pub(crate) fn content(tokens: &[String]) -> BTreeSet<String> {
    tokens
        .iter()
        .filter(|t| !STOPWORDS.contains(&t.as_str()) && !NEGATIONS.contains(&t.as_str()))
        .cloned()
        .collect()
}

pub(crate) fn negated(tokens: &[String]) -> bool {
    tokens.iter().filter(|t| NEGATIONS.contains(&t.as_str())).count() % 2 == 1
}

/// Whether a predicted value states the questioned value. Returns the
/// verdict and whether the final lenient token heuristic was needed.
pub fn value_matches(predicted: &str, questioned: &str) -> (bool, bool) {
    let norm = |s: &str| tokens(s).join(" ");
    let (p, q) = (norm(predicted), norm(questioned));
    if p == q {
        return (true, false);
    }
    let pt = tokens(predicted);
    let qt = tokens(questioned);
    match p.as_str() {
        "yes" | "true" => return (!negated(&qt), false),
        "no" | "false" => return (negated(&qt), false),
        _ => {}
    }
    let (pc, qc) = (content(&pt), content(&qt));
    for (a, b) in ANTONYMS {
        let crossed = (pc.contains(*a) && qc.contains(*b)) || (pc.contains(*b) && qc.contains(*a));
        let shared = (pc.contains(*a) && qc.contains(*a)) || (pc.contains(*b) && qc.contains(*b));
        if crossed && !shared {
            return (negated(&pt) != negated(&qt), false);
        }
    }
    if !pc.is_disjoint(&qc) {
        return (negated(&pt) == negated(&qt), false);
    }
    match crate::llm::parse::YesNoParser.fallback(predicted) {
        Ok(yes) => (yes, true),
        Err(_) => (false, true),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAnswer {
    pub answer: bool,
    pub target_node: String,
    pub target_value: String,
    pub questioned_value: String,
    /// The answer relied on the lenient yes/no heuristic.
    pub used_fallback: bool,
    pub run: CounterfactualRun,
}

/// Runs the counterfactual and checks whether the target takes the
/// questioned value.
pub fn answer_query(
    gateway: &Gateway,
    world: &WorldState,
    iv: &Intervention,
    target: &str,
    questioned_value: &str,
    options: CounterfactualOptions,
) -> Result<QueryAnswer, InferenceError> {
    let target_node = resolve_node(&world.graph, target).ok_or_else(|| InferenceError::UnresolvedTarget(target.into()))?;
    let run = run_counterfactual(gateway, world, iv, options)?;
    if let Some(reason) = run.failures.get(&target_node) {
        return Err(InferenceError::Llm {
            node: target_node,
            source: LlmError::Provider { status: None, message: reason.clone() },
        });
    }
    let target_value = run
        .counterfactual
        .value(&target_node)
        .ok_or_else(|| InferenceError::MissingValue(target_node.clone()))?
        .to_string();
    let (answer, used_fallback) = value_matches(&target_value, questioned_value);
    Ok(QueryAnswer {
        answer,
        target_node,
        target_value,
        questioned_value: questioned_value.into(),
        used_fallback,
        run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::graph::CausalEdge;
    use crate::llm::{ChatRequest, MockProvider};
    use serde_json::json;

    fn reply(value: &str) -> String {
        json!({"explanation": "scripted", "value": value, "confidence": 0.9}).to_string()
    }

    #[test]
    fn table_six_walkthrough() {
        let gw = Gateway::mock(fixtures::bursa_replay_provider());
        let world = WorldState::from_graph(fixtures::bursa_factual_graph());
        let run = run_counterfactual(&gw, &world, &fixtures::bursa_intervention(), Default::default()).unwrap();
        assert_eq!(run.outcome, RunOutcome::Ok);
        let set = |ids: &[&str]| ids.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        assert_eq!(run.partition.recomputed, set(&["2", "3", "10", "11", "12"]));
        assert_eq!(run.partition.copied, set(&["1", "4", "5"]));
        assert_eq!(run.partition.abduced, set(&["h0"]));
        for (id, v) in fixtures::bursa_replay_values() {
            assert_eq!(run.counterfactual.value(id), Some(v), "node {id}");
        }
        assert_eq!(run.counterfactual.value("0"), Some("low"));
        assert_eq!(run.counterfactual.values["0"].provenance, Provenance::Intervened);
        assert_eq!(run.counterfactual.value("4"), Some("high"));
        assert_eq!(run.llm_calls, 6);
        assert_eq!(gw.chat_calls(), 6);
        assert!(run.counterfactual.is_complete());
    }

    #[test]
    fn prediction_prompt_lists_parents() {
        let world = WorldState::from_graph(fixtures::bursa_factual_graph()).with_observations([("h0", "False")]);
        let p = prediction_prompt(&world.graph, &world, "11").unwrap();
        let lines: Vec<_> = p.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].starts_with("The target variable has the following attributes: description: Travel restrictions"));
        assert_eq!(lines[1], "It is caused by the following variables:");
        assert!(lines[2].starts_with("1. description: Severity of COVID-19 pandemic"));
        assert!(lines[2].contains("Its value is severe."));
        assert!(lines[4].starts_with("3. description: Potential end of COVID-19 pandemic"));
        assert!(lines[4].contains("Its value is False."));
    }

    #[test]
    fn chain_propagation_is_exact() {
        // Each node's prediction concatenates its parent value with its id.
        let ids = ["a", "b", "c", "d", "e"];
        let g = CausalGraph::new(
            ids.iter().map(|i| VariableNode::observed(*i, format!("var {i}")).with_value("f")).collect(),
            ids.windows(2).map(|w| CausalEdge::new(w[0], w[1])).collect(),
        );
        let mock = MockProvider::new().with_responder(|req: &ChatRequest| {
            let u = req.first_user();
            let target = fixtures::target_description(u)?.trim_start_matches("var ").to_string();
            let parent_value = u.split("Its value is ").nth(1)?.split(". Its causal").next()?.to_string();
            Some(reply(&format!("{parent_value}{target}")))
        });
        let gw = Gateway::mock(mock);
        let run = run_counterfactual(&gw, &WorldState::from_graph(g), &Intervention::new().set("b", "X"), Default::default()).unwrap();
        let values: Vec<_> = ids.iter().map(|i| run.counterfactual.value(i).unwrap()).collect();
        assert_eq!(values, ["f", "X", "Xc", "Xcd", "Xcde"]);
        assert_eq!(gw.chat_calls(), 3);
    }

    #[test]
    fn sink_intervention_changes_only_the_sink() {
        let gw = Gateway::mock(MockProvider::new());
        let world = WorldState::from_graph(fixtures::bursa_factual_graph()).with_observations([("h0", "False")]);
        let run = run_counterfactual(&gw, &world, &Intervention::new().set("3", "1000"), Default::default()).unwrap();
        assert_eq!(gw.chat_calls(), 0);
        for (id, v) in &run.counterfactual.values {
            if id != "3" {
                assert_eq!(v, &world.values[id]);
            }
        }
    }

    #[test]
    fn zero_child_hidden_node_is_abduced_from_attributes() {
        let g = CausalGraph::new(
            vec![VariableNode::hidden("u", "lonely"), VariableNode::observed("x", "x").with_value("1")],
            vec![],
        );
        let gw = Gateway::mock(MockProvider::new().with_rule(prompts::ABDUCTION_NO_EVIDENCE, reply("scripted")));
        let out = abduce(&gw, &WorldState::from_graph(g), 1);
        assert_eq!(out["u"].as_ref().unwrap().predicted_value, "scripted");
        assert!(abduce(&gw, &WorldState::from_graph(fixtures::coffee_ground_truth()).with_observations([("H", "x")]), 1).is_empty());
    }

    #[test]
    fn failures_are_recorded_or_abort() {
        let world = WorldState::from_graph(fixtures::bursa_factual_graph());
        let gw = Gateway::mock(MockProvider::new().with_default("garbage"));
        let lenient = run_counterfactual(&gw, &world, &fixtures::bursa_intervention(), Default::default()).unwrap();
        assert_eq!(lenient.outcome, RunOutcome::InferenceError);
        assert!(lenient.parse_failure);
        assert_eq!(lenient.failures.len(), 6);
        let gw = Gateway::mock(MockProvider::new().with_default("garbage"));
        let strict = CounterfactualOptions { strict: true, ..Default::default() };
        let aborted = run_counterfactual(&gw, &world, &fixtures::bursa_intervention(), strict).unwrap();
        assert_eq!(aborted.failures.len(), 1);
        assert_eq!(gw.chat_calls(), 13);
    }

    #[test]
    fn majority_of_samples_wins() {
        let g = CausalGraph::new(
            vec![VariableNode::observed("p", "p").with_value("1"), VariableNode::observed("c", "c").with_value("0")],
            vec![CausalEdge::new("p", "c")],
        );
        let gw = Gateway::mock(MockProvider::new().with_queue([reply("up"), reply("down"), reply("Down")]));
        let options = CounterfactualOptions { samples: 3, ..Default::default() };
        let run = run_counterfactual(&gw, &WorldState::from_graph(g), &Intervention::new().set("p", "2"), options).unwrap();
        assert_eq!(run.counterfactual.value("c"), Some("down"));
        assert_eq!(run.predictions["c"].transcripts.len(), 3);
    }

    #[test]
    fn missing_factual_parents_are_completed_first() {
        let g = CausalGraph::new(
            vec![
                VariableNode::observed("r", "root").with_value("on"),
                VariableNode::observed("m", "middle"),
                VariableNode::observed("x", "lever").with_value("0"),
                VariableNode::observed("t", "target"),
            ],
            vec![CausalEdge::new("r", "m"), CausalEdge::new("m", "t"), CausalEdge::new("x", "t")],
        );
        let gw = Gateway::mock(
            MockProvider::new().with_rule("attributes: description: middle", reply("mid")).with_rule("attributes: description: target", reply("tgt")),
        );
        let run = run_counterfactual(&gw, &WorldState::from_graph(g), &Intervention::new().set("x", "1"), Default::default()).unwrap();
        assert_eq!(run.factual.value("m"), Some("mid"));
        assert_eq!(run.completed.len(), 1);
        assert_eq!(run.counterfactual.value("t"), Some("tgt"));
        assert!(run.partition.copied.contains("m"));
    }

    #[test]
    fn proposals() {
        let gw = Gateway::mock(fixtures::bursa_replay_provider());
        let world = WorldState::from_graph(fixtures::bursa_factual_graph());
        let p0 = propose_counterfactual_value(&gw, &world, "0").unwrap();
        assert_eq!((p0.factual_value.as_str(), p0.proposed_value.as_str()), ("severe", "low"));
        assert!(p0.used_llm);
        let p9 = propose_counterfactual_value(&gw, &world, "9").unwrap();
        assert_eq!(p9.proposed_value, "False");
        assert!(!p9.used_llm);
        let single = WorldState::from_graph(CausalGraph::new(
            vec![VariableNode::observed("s", "s").with_values("{a}").with_value("a")],
            vec![],
        ));
        assert_eq!(
            propose_counterfactual_value(&gw, &single, "s"),
            Err(InferenceError::NoAlternative("s".into()))
        );
    }

    #[test]
    fn proposal_equal_to_factual_is_refined() {
        let gw = Gateway::mock(MockProvider::new().with_queue([
            json!({"explanation": "", "factual_value": "a", "counterfactual_value": "A", "confidence": 0.5}).to_string(),
            json!({"explanation": "", "factual_value": "a", "counterfactual_value": "b", "confidence": 0.5}).to_string(),
        ]));
        let world = WorldState::from_graph(CausalGraph::new(
            vec![VariableNode::observed("s", "s").with_values("a, b, c").with_value("a")],
            vec![],
        ));
        assert_eq!(propose_counterfactual_value(&gw, &world, "s").unwrap().proposed_value, "b");
        assert_eq!(gw.chat_calls(), 2);
    }

    #[test]
    fn domains() {
        let d = |t: &str, v: &str| domain_values(&VariableNode::observed("x", "x").with_type(t).with_values(v));
        assert_eq!(d("", "low, moderate, high"), ["low", "moderate", "high"]);
        assert_eq!(d("", "{a}"), ["a"]);
        assert_eq!(d("bool", ""), ["True", "False"]);
        assert_eq!(d("", "yes or no"), ["yes", "no"]);
    }

    #[test]
    fn answer_matching() {
        assert_eq!(value_matches("High", "high salary"), (true, false));
        assert_eq!(value_matches("high salary", "high salary"), (true, false));
        assert_eq!(value_matches("low salary", "high salary"), (false, false));
        assert_eq!(value_matches("not drinking coffee", "drinking coffee"), (false, false));
        assert_eq!(value_matches("yes", "high salary"), (true, false));
        assert_eq!(value_matches("False", "high salary"), (false, false));
        assert_eq!(value_matches("inactive", "active"), (false, false));
        assert_eq!(value_matches("The answer is yes", "something else"), (true, true));
    }

    fn coffee_world() -> WorldState {
        WorldState::from_graph(fixtures::coffee_ground_truth())
            .with_observations([("H", "confounder inactive"), ("P", "close to a college")])
    }

    #[test]
    fn figure_five_query() {
        let iv = Intervention::new().set("C", "drinking coffee");
        let correct = Gateway::mock(MockProvider::new().with_rule("description: Salary", reply("high salary")));
        let a = answer_query(&correct, &coffee_world(), &iv, "salary", "high salary", Default::default()).unwrap();
        assert!(a.answer);
        assert_eq!(a.target_node, "S");
        assert_eq!(correct.chat_calls(), 1);
        let misread = Gateway::mock(MockProvider::new().with_rule("description: Salary", reply("low salary")));
        assert!(!answer_query(&misread, &coffee_world(), &iv, "S", "high salary", Default::default()).unwrap().answer);
    }

    #[test]
    fn intervening_on_the_target_needs_no_prediction() {
        let gw = Gateway::mock(MockProvider::new());
        let iv = Intervention::new().set("S", "high salary");
        let a = answer_query(&gw, &coffee_world(), &iv, "Salary", "high salary", Default::default()).unwrap();
        assert!(a.answer);
        assert_eq!(gw.chat_calls(), 0);
        assert!(matches!(
            answer_query(&gw, &coffee_world(), &iv, "weather", "sunny", Default::default()),
            Err(InferenceError::UnresolvedTarget(_))
        ));
    }
}
