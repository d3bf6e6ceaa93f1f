//! Self-evaluation of instantiated graphs and graph distances.

use crate::counterfactual::clamp_confidence;
use crate::graph::{CausalGraph, GraphError};
use crate::llm::parse::{field_number, field_string, RecordParser};
use crate::llm::{Gateway, LlmError, ParseOutcome, StructuredRequest};
use crate::prompts;
use crate::world::WorldState;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use thiserror::Error;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Describes the instantiated graph as numbered events in topological order,
/// each preceded by the edges coming into it. Nodes without a value read
/// `unknown`.
pub fn serialize_graph_text(world: &WorldState) -> Result<String, GraphError> {
    let graph = &world.graph;
    let order = graph.topological_order()?;
    let rank: HashMap<&str, usize> = order.iter().enumerate().map(|(i, id)| (id.as_str(), i + 1)).collect();
    let (header, edge_line, event_line) = prompts::plausibility_lines();
    let mut lines = vec![header.to_string()];
    for id in &order {
        let target = rank[id.as_str()].to_string();
        let mut incoming: Vec<_> = graph.edges().iter().filter(|e| &e.target_node_id == id).collect();
        incoming.sort_by_key(|e| rank[e.source_node_id.as_str()]);
        for e in incoming {
            let parent = rank[e.source_node_id.as_str()].to_string();
            lines.push(prompts::fill(
                edge_line,
                &[("parent rank", &parent), ("target rank", &target), ("edge description", &e.description)],
            ));
        }
        let node = graph.node(id).expect("ordered ids exist");
        lines.push(prompts::fill(
            event_line,
            &[
                ("target rank", &target),
                ("target description", &node.description),
                ("node current_value", world.value(id).unwrap_or("unknown")),
            ],
        ));
    }
    Ok(lines.join("\n"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalKind {
    Factual,
    Counterfactual,
}

impl std::str::FromStr for EvalKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "factual" => Ok(Self::Factual),
            "counterfactual" => Ok(Self::Counterfactual),
            other => Err(format!("unknown evaluation kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlausibilityReport {
    pub graph_id: String,
    pub score: f64,
    pub confidence: f64,
    pub explanation: String,
    pub kind: EvalKind,
    pub outcome: ParseOutcome,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("no well-formed plausibility report after {attempts} replies: {last_error}")]
    ReportMissing { attempts: usize, last_error: String },
    #[error(transparent)]
    Llm(LlmError),
}

#[derive(Debug, Clone, PartialEq)]
struct Scores {
    score: f64,
    confidence: f64,
    explanation: String,
    warnings: Vec<String>,
}

fn unit_interval(m: &Map<String, Value>, key: &str, warnings: &mut Vec<String>) -> Result<f64, String> {
    let raw = field_number(m, key).ok_or_else(|| format!("missing numeric `{key}`"))?;
    let v = clamp_confidence(raw).map_err(|_| format!("`{key}` is not a number"))?;
    if v != raw {
        warnings.push(format!("{key} {raw} clamped to {v}"));
    }
    Ok(v)
}

/// Asks the model to score the plausibility of the world's chain of events.
pub fn self_evaluate(
    gateway: &Gateway,
    world: &WorldState,
    kind: EvalKind,
) -> Result<(PlausibilityReport, StructuredRequest), EvalError> {
    let text = serialize_graph_text(world)?;
    let system = prompts::with_format(prompts::PLAUSIBILITY_SYSTEM, prompts::PLAUSIBILITY_FORMAT);
    let mut request = gateway.structured(&system, text, gateway.options().inference_temperature);
    let parser = RecordParser::new(&["explanation", "score", "confidence"], |m: &Map<String, Value>| {
        let mut warnings = Vec::new();
        let score = unit_interval(m, "score", &mut warnings)?;
        let confidence = unit_interval(m, "confidence", &mut warnings)?;
        Ok(Scores { score, confidence, explanation: field_string(m, "explanation").unwrap_or_default(), warnings })
    });
    let parsed = match gateway.complete_structured(&mut request, &parser) {
        Ok(p) => p,
        Err(LlmError::ParseFailure { attempts, last_error }) => {
            return Err(EvalError::ReportMissing { attempts: attempts.len(), last_error })
        }
        Err(e) => return Err(EvalError::Llm(e)),
    };
    for w in &parsed.value.warnings {
        log::warn!("self-evaluation: {w}");
    }
    let report = PlausibilityReport {
        graph_id: world.instantiated_graph().graph_id().to_string(),
        score: parsed.value.score,
        confidence: parsed.value.confidence,
        explanation: parsed.value.explanation,
        kind,
        outcome: parsed.outcome,
        warnings: parsed.value.warnings,
    };
    Ok((report, request))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GedMode {
    /// Matched nodes must carry the same normalised description, otherwise
    /// the pair costs one substitution.
    Semantic,
    /// Labels are ignored.
    Topology,
}

/// Graphs up to this many nodes (each) get an exact distance.
pub const EXACT_GED_LIMIT: usize = 8;

/// Case-folded, whitespace-collapsed description; the id when empty.
pub fn normalize_label(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn label(g: &CausalGraph, i: usize) -> String {
    node_label(&g.nodes()[i])
}

fn node_label(n: &crate::graph::VariableNode) -> String {
    let d = normalize_label(&n.description);
    if d.is_empty() {
        normalize_label(&n.node_id)
    } else {
        d
    }
}

/// Index form of a graph: labels plus directed edge set.
struct Indexed {
    ids: Vec<String>,
    labels: Vec<String>,
    edges: BTreeSet<(usize, usize)>,
}

impl Indexed {
    fn new(g: &CausalGraph) -> Self {
        let ids: Vec<String> = g.nodes().iter().map(|n| n.node_id.clone()).collect();
        let pos: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let edges = g
            .edges()
            .iter()
            .filter_map(|e| Some((*pos.get(e.source_node_id.as_str())?, *pos.get(e.target_node_id.as_str())?)))
            .collect();
        Self { labels: (0..ids.len()).map(|i| label(g, i)).collect(), ids, edges }
    }
}

fn node_cost(a: &Indexed, b: &Indexed, i: usize, j: Option<usize>, mode: GedMode) -> usize {
    match j {
        None => 1,
        Some(j) if mode == GedMode::Semantic && a.labels[i] != b.labels[j] => 1,
        Some(_) => 0,
    }
}

/// Full cost of a mapping `a → b ∪ {none}`.
fn mapping_cost(a: &Indexed, b: &Indexed, map: &[Option<usize>], mode: GedMode) -> usize {
    let mut cost: usize = (0..map.len()).map(|i| node_cost(a, b, i, map[i], mode)).sum();
    let used: BTreeSet<usize> = map.iter().flatten().copied().collect();
    cost += b.labels.len() - used.len();
    let mut covered = BTreeSet::new();
    for &(u, v) in &a.edges {
        match (map[u], map[v]) {
            (Some(x), Some(y)) if b.edges.contains(&(x, y)) => {
                covered.insert((x, y));
            }
            _ => cost += 1,
        }
    }
    cost + b.edges.len() - covered.len()
}

struct Search<'a> {
    a: &'a Indexed,
    b: &'a Indexed,
    mode: GedMode,
    best: usize,
    best_map: Vec<Option<usize>>,
    map: Vec<Option<usize>>,
    used: Vec<bool>,
}

impl Search<'_> {
    /// Cost added by assigning `a[i] → j` given `a[0..i]` already assigned:
    /// the node itself plus edges between `i` and earlier nodes.
    fn step_cost(&self, i: usize, j: Option<usize>) -> usize {
        let mut c = node_cost(self.a, self.b, i, j, self.mode);
        for k in 0..i {
            for (s, t, ms, mt) in [(i, k, j, self.map[k]), (k, i, self.map[k], j)] {
                let in_a = self.a.edges.contains(&(s, t));
                let in_b = matches!((ms, mt), (Some(x), Some(y)) if self.b.edges.contains(&(x, y)));
                if in_a != in_b {
                    c += 1;
                }
            }
        }
        c
    }

    /// Cost of inserting the unused `b` nodes and every edge touching them.
    fn closing_cost(&self) -> usize {
        let unused = self.used.iter().filter(|u| !**u).count();
        let edges = self.b.edges.iter().filter(|(x, y)| !self.used[*x] || !self.used[*y]).count();
        unused + edges
    }

    fn run(&mut self, i: usize, cost: usize) {
        let n = self.a.labels.len();
        let remaining_b = self.used.iter().filter(|u| !**u).count();
        if cost + remaining_b.saturating_sub(n - i) >= self.best {
            return;
        }
        if i == n {
            let total = cost + self.closing_cost();
            if total < self.best {
                self.best = total;
                self.best_map = self.map.clone();
            }
            return;
        }
        for j in 0..self.b.labels.len() {
            if self.used[j] {
                continue;
            }
            let c = self.step_cost(i, Some(j));
            self.map[i] = Some(j);
            self.used[j] = true;
            self.run(i + 1, cost + c);
            self.used[j] = false;
        }
        let c = self.step_cost(i, None);
        self.map[i] = None;
        self.run(i + 1, cost + c);
    }
}

fn greedy_mapping(a: &Indexed, b: &Indexed, mode: GedMode) -> Vec<Option<usize>> {
    let degree = |g: &Indexed, i: usize| {
        let out = g.edges.iter().filter(|(s, _)| *s == i).count();
        let inn = g.edges.iter().filter(|(_, t)| *t == i).count();
        (inn, out)
    };
    let mut used = vec![false; b.labels.len()];
    let mut map = vec![None; a.labels.len()];
    for (i, slot) in map.iter_mut().enumerate() {
        let candidate = (0..b.labels.len()).filter(|&j| !used[j]).min_by_key(|&j| {
            let label_miss = usize::from(mode == GedMode::Semantic && a.labels[i] != b.labels[j]);
            let (ai, ao) = degree(a, i);
            let (bi, bo) = degree(b, j);
            (label_miss, ai.abs_diff(bi) + ao.abs_diff(bo))
        });
        if let Some(j) = candidate {
            used[j] = true;
            *slot = Some(j);
        }
    }
    // Local search: reassign one node (to a free target, a swap or nothing)
    // while the total improves.
    let mut best = mapping_cost(a, b, &map, mode);
    loop {
        let mut improved = false;
        for i in 0..map.len() {
            let mut options: Vec<Vec<Option<usize>>> = Vec::new();
            for j in 0..b.labels.len() {
                let mut m = map.clone();
                if let Some(k) = map.iter().position(|x| *x == Some(j)) {
                    m[k] = map[i];
                }
                m[i] = Some(j);
                options.push(m);
            }
            let mut m = map.clone();
            m[i] = None;
            options.push(m);
            for m in options {
                let c = mapping_cost(a, b, &m, mode);
                if c < best {
                    best = c;
                    map = m;
                    improved = true;
                }
            }
        }
        if !improved {
            return map;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GedResult {
    pub distance: usize,
    /// Node ids of the first graph → matched ids in the second.
    pub matching: BTreeMap<String, String>,
    /// False when either graph exceeds [`EXACT_GED_LIMIT`] and the value is
    /// a local-search upper bound.
    pub exact: bool,
}

/// Graph edit distance with unit costs for node insertion, deletion and
/// substitution and edge insertion and deletion.
pub fn ged(g1: &CausalGraph, g2: &CausalGraph, mode: GedMode) -> GedResult {
    let a = Indexed::new(g1);
    let b = Indexed::new(g2);
    let greedy = greedy_mapping(&a, &b, mode);
    let greedy_cost = mapping_cost(&a, &b, &greedy, mode);
    let exact = a.labels.len() <= EXACT_GED_LIMIT && b.labels.len() <= EXACT_GED_LIMIT;
    let map = if exact {
        let mut s = Search {
            a: &a,
            b: &b,
            mode,
            best: greedy_cost + 1,
            best_map: greedy.clone(),
            map: vec![None; a.labels.len()],
            used: vec![false; b.labels.len()],
        };
        s.run(0, 0);
        s.best_map
    } else {
        log::debug!("graph edit distance above {EXACT_GED_LIMIT} nodes is an upper bound");
        greedy
    };
    let distance = mapping_cost(&a, &b, &map, mode);
    let matching = map
        .iter()
        .enumerate()
        .filter_map(|(i, j)| Some((a.ids[i].clone(), b.ids[(*j)?].clone())))
        .collect();
    GedResult { distance, matching, exact }
}

/// Nodes and edges of the intersection and union of two graphs under a
/// correspondence. In semantic mode a matched pair only counts as shared when
/// its labels agree.
fn intersection_and_union(
    g1: &CausalGraph,
    g2: &CausalGraph,
    matching: &BTreeMap<String, String>,
    mode: GedMode,
) -> (CausalGraph, CausalGraph) {
    use crate::graph::{CausalEdge, NodeKind, VariableNode};
    let shared: BTreeMap<&str, &str> = matching
        .iter()
        .filter(|(x, y)| {
            mode == GedMode::Topology
                || g1.node(x).map(node_label) == g2.node(y).map(node_label)
        })
        .map(|(x, y)| (x.as_str(), y.as_str()))
        .collect();
    let back: BTreeMap<&str, &str> = shared.iter().map(|(x, y)| (*y, *x)).collect();
    let id1 = |id: &str| format!("a:{id}");
    let id2 = |id: &str| back.get(id).map_or_else(|| format!("b:{id}"), |x| id1(x));
    let node = |id: String, src: &VariableNode| VariableNode { node_id: id, kind: NodeKind::Observed, ..src.clone() };
    let inter_nodes: Vec<VariableNode> =
        shared.keys().map(|x| node(id1(x), g1.node(x).expect("matched id"))).collect();
    let e1: BTreeSet<(String, String)> =
        g1.edges().iter().map(|e| (id1(&e.source_node_id), id1(&e.target_node_id))).collect();
    let e2: BTreeSet<(String, String)> =
        g2.edges().iter().map(|e| (id2(&e.source_node_id), id2(&e.target_node_id))).collect();
    let inter_edges = e1.intersection(&e2).map(|(s, t)| CausalEdge::new(s.clone(), t.clone())).collect();
    let mut union_nodes: Vec<VariableNode> = g1.nodes().iter().map(|n| node(id1(&n.node_id), n)).collect();
    union_nodes.extend(g2.nodes().iter().filter(|n| !back.contains_key(n.node_id.as_str())).map(|n| node(id2(&n.node_id), n)));
    let union_edges = e1.union(&e2).map(|(s, t)| CausalEdge::new(s.clone(), t.clone())).collect();
    (CausalGraph::new(inter_nodes, inter_edges), CausalGraph::new(union_nodes, union_edges))
}

/// Edit distance between the intersection and the union of two graphs under
/// `matching`. The intersection embeds in the union, so the distance is the
/// count of union nodes and edges missing from the intersection.
pub fn iou_ged(g1: &CausalGraph, g2: &CausalGraph, matching: &BTreeMap<String, String>, mode: GedMode) -> usize {
    let (inter, union) = intersection_and_union(g1, g2, matching, mode);
    (union.nodes().len() - inter.nodes().len()) + (union.edges().len() - inter.edges().len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDistance {
    pub ged: usize,
    pub iou_ged: usize,
    pub ged_topology: usize,
    pub iou_ged_topology: usize,
    pub matching: BTreeMap<String, String>,
    pub topology_matching: BTreeMap<String, String>,
    pub exact: bool,
}

pub fn graph_distance(g1: &CausalGraph, g2: &CausalGraph) -> GraphDistance {
    let s = ged(g1, g2, GedMode::Semantic);
    let t = ged(g1, g2, GedMode::Topology);
    GraphDistance {
        iou_ged: iou_ged(g1, g2, &s.matching, GedMode::Semantic),
        iou_ged_topology: iou_ged(g1, g2, &t.matching, GedMode::Topology),
        ged: s.distance,
        ged_topology: t.distance,
        exact: s.exact && t.exact,
        matching: s.matching,
        topology_matching: t.matching,
    }
}

/// Terminal category of one benchmark query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeCategory {
    CorrectFormatted,
    CorrectParsing,
    IncorrectAnswer,
    ErrorParsingResponse,
    ErrorBuildingGraph,
    ErrorInference,
    CyclicGraphError,
    UnknownError,
}

impl OutcomeCategory {
    pub const ALL: [OutcomeCategory; 8] = [
        Self::CorrectFormatted,
        Self::CorrectParsing,
        Self::IncorrectAnswer,
        Self::ErrorParsingResponse,
        Self::ErrorBuildingGraph,
        Self::ErrorInference,
        Self::CyclicGraphError,
        Self::UnknownError,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::CorrectFormatted => "correct + formatted",
            Self::CorrectParsing => "correct + parsing",
            Self::IncorrectAnswer => "incorrect answer",
            Self::ErrorParsingResponse => "error parsing response",
            Self::ErrorBuildingGraph => "error building graph",
            Self::ErrorInference => "error inference",
            Self::CyclicGraphError => "cyclic graph error",
            Self::UnknownError => "unknown error",
        }
    }

    /// Whether queries in this category count towards accuracy: only
    /// queries that produced an answer do.
    pub fn in_accuracy_denominator(self) -> bool {
        matches!(self, Self::CorrectFormatted | Self::CorrectParsing | Self::IncorrectAnswer)
    }

    pub fn is_correct(self) -> bool {
        matches!(self, Self::CorrectFormatted | Self::CorrectParsing)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphStage {
    /// Graph supplied rather than extracted.
    Given,
    Extracted { fallback: bool },
    ParseError,
    BuildError,
    CycleError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceStage {
    NotRun,
    Ok { fallback: bool },
    ParseError,
    Error,
}

/// Stage outcomes of one pipeline run, enough to categorise it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub graph: GraphStage,
    pub inference: InferenceStage,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gold: Option<bool>,
    /// An error outside the known stages (transport, harness).
    #[serde(default)]
    pub unknown_error: bool,
}

/// Build and cycle errors first, then parse errors, then inference errors,
/// then correctness.
pub fn categorize(r: &StageRecord) -> OutcomeCategory {
    use OutcomeCategory::*;
    match r.graph {
        GraphStage::CycleError => return CyclicGraphError,
        GraphStage::BuildError => return ErrorBuildingGraph,
        GraphStage::ParseError => return ErrorParsingResponse,
        _ => {}
    }
    match r.inference {
        InferenceStage::ParseError => return ErrorParsingResponse,
        InferenceStage::Error => return ErrorInference,
        _ => {}
    }
    let graph_fallback = matches!(r.graph, GraphStage::Extracted { fallback: true });
    match (r.inference, r.answer, r.gold) {
        _ if r.unknown_error => UnknownError,
        (InferenceStage::Ok { fallback }, Some(a), Some(g)) if a == g => {
            if fallback || graph_fallback {
                CorrectParsing
            } else {
                CorrectFormatted
            }
        }
        (InferenceStage::Ok { .. }, Some(_), Some(_)) => IncorrectAnswer,
        _ => UnknownError,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionCounts {
    pub counts: BTreeMap<OutcomeCategory, usize>,
    pub total: usize,
}

impl PartitionCounts {
    pub fn add(&mut self, c: OutcomeCategory) {
        *self.counts.entry(c).or_default() += 1;
        self.total += 1;
    }

    pub fn get(&self, c: OutcomeCategory) -> usize {
        self.counts.get(&c).copied().unwrap_or(0)
    }

    pub fn correct(&self) -> usize {
        self.counts.iter().filter(|(c, _)| c.is_correct()).map(|(_, n)| n).sum()
    }

    pub fn denominator(&self) -> usize {
        self.counts.iter().filter(|(c, _)| c.in_accuracy_denominator()).map(|(_, n)| n).sum()
    }

    /// Percentage correct among the queries that count; `None` when none do.
    pub fn accuracy(&self) -> Option<f64> {
        let d = self.denominator();
        (d > 0).then(|| 100.0 * self.correct() as f64 / d as f64)
    }
}

pub fn partition_outcome<'a>(records: impl IntoIterator<Item = &'a StageRecord>) -> PartitionCounts {
    let mut p = PartitionCounts::default();
    for r in records {
        p.add(categorize(r));
    }
    p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub graph_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub plausibility: Vec<PlausibilityReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distance: Option<GraphDistance>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionCounts>,
}

impl EvalReport {
    pub fn new(graph_id: impl Into<String>) -> Self {
        Self { schema_version: REPORT_SCHEMA_VERSION, graph_id: graph_id.into(), plausibility: Vec::new(), distance: None, partition: None }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::graph::{CausalEdge, VariableNode};
    use crate::llm::MockProvider;

    #[test]
    fn single_node_text() {
        let g = CausalGraph::new(vec![VariableNode::observed("a", "Rain").with_value("heavy")], vec![]);
        let text = serialize_graph_text(&WorldState::from_graph(g)).unwrap();
        assert_eq!(text, "The causal graph is composed of the following events:\n1. Rain. The value is heavy");
    }

    #[test]
    fn merged_graph_text_by_hand() {
        let (m1, m2) = fixtures::merge_pair();
        let r = crate::merge::merge_summarise(
            &[m1.clone(), m2.clone()],
            &[crate::merge::Cluster::new([
                (m1.graph_id().into(), "Z".into()),
                (m2.graph_id().into(), "Z".into()),
            ])],
        );
        let text = serialize_graph_text(&WorldState::from_graph(r.graph.clone())).unwrap();
        let order = r.graph.topological_order().unwrap();
        let rank = |desc: &str| {
            1 + order.iter().position(|id| r.graph.node(id).unwrap().description.starts_with(desc)).unwrap()
        };
        let (a, b, x, y, z) = (rank("Central"), rank("Mortgage"), rank("Harvest"), rank("Household"), rank("Regional"));
        let line_of = |needle: &str| text.lines().position(|l| l == needle).unwrap_or_else(|| panic!("{needle}\n{text}"));
        for (s, t) in [(a, z), (z, b), (x, y), (z, y)] {
            let edge = line_of(&format!("({s} -> {t}) ."));
            let event = text.lines().position(|l| l.starts_with(&format!("{t}. "))).unwrap();
            assert!(edge < event);
            let previous_event = text.lines().position(|l| l.starts_with(&format!("{}. ", t - 1))).unwrap_or(0);
            assert!(edge > previous_event);
        }
        assert_eq!(text.lines().count(), 1 + 5 + 4);
        assert!(text.contains(&format!("{z}. Regional interest rate level. The value is high")));
    }

    #[test]
    fn bursa_text_orders_parents_first() {
        let text = serialize_graph_text(&WorldState::from_graph(fixtures::bursa_factual_graph())).unwrap();
        let pos = |needle: &str| text.find(needle).unwrap();
        assert!(pos("Investors moving into cash. The value is True") < pos("Selling pressure on stocks. The value is high"));
        assert!(text.contains("Potential end of COVID-19 pandemic. The value is unknown"));
        assert!(text.contains(") investors moving into cash sell their stocks."));
    }

    #[test]
    fn self_evaluation_scores() {
        let gw = Gateway::mock(fixtures::bursa_replay_provider());
        let world = WorldState::from_graph(fixtures::bursa_factual_graph());
        let (r, req) = self_evaluate(&gw, &world, EvalKind::Factual).unwrap();
        assert_eq!((r.score, r.confidence), (0.85, 0.85));
        assert_eq!(r.kind, EvalKind::Factual);
        assert_eq!(req.exchange.user_turns[0], serialize_graph_text(&world).unwrap());
    }

    #[test]
    fn self_evaluation_clamps_and_falls_back() {
        let gw = Gateway::mock(MockProvider::new().with_default("score: 2.0\nconfidence: 0.5"));
        let world = WorldState::from_graph(fixtures::bursa_factual_graph());
        let (r, _) = self_evaluate(&gw, &world, EvalKind::Counterfactual).unwrap();
        assert_eq!(r.score, 1.0);
        assert_eq!(r.outcome, ParseOutcome::ParsedWithFallback);
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn self_evaluation_missing_report() {
        let gw = Gateway::mock(MockProvider::new().with_default("The events seem plausible."));
        let world = WorldState::from_graph(fixtures::bursa_factual_graph());
        let err = self_evaluate(&gw, &world, EvalKind::Factual).unwrap_err();
        assert!(matches!(err, EvalError::ReportMissing { attempts: 13, .. }));
    }

    fn without_edge(g: &CausalGraph, s: &str, t: &str) -> CausalGraph {
        let edges = g.edges().iter().filter(|e| !(e.source_node_id == s && e.target_node_id == t)).cloned().collect();
        CausalGraph::new(g.nodes().to_vec(), edges)
    }

    #[test]
    fn ged_identity_and_one_edge() {
        let g = fixtures::coffee_ground_truth();
        for mode in [GedMode::Semantic, GedMode::Topology] {
            assert_eq!(ged(&g, &g, mode).distance, 0);
        }
        let h = without_edge(&g, "P", "C");
        assert_eq!(ged(&g, &h, GedMode::Topology).distance, 1);
        let d = graph_distance(&g, &h);
        assert_eq!((d.ged, d.iou_ged, d.ged_topology, d.iou_ged_topology), (1, 1, 1, 1));
        assert_eq!(graph_distance(&g, &g).iou_ged, 0);
    }

    #[test]
    fn disjoint_labels() {
        let a = CausalGraph::new(
            vec![VariableNode::observed("1", "a"), VariableNode::observed("2", "b"), VariableNode::observed("3", "c")],
            vec![CausalEdge::new("1", "2")],
        );
        let b = CausalGraph::new(
            (4..8).map(|i| VariableNode::observed(i.to_string(), format!("other {i}"))).collect(),
            vec![CausalEdge::new("4", "5"), CausalEdge::new("6", "7")],
        );
        let s = ged(&a, &b, GedMode::Semantic);
        // Three substitutions, one node insertion, one edge kept, one edge inserted.
        assert_eq!(s.distance, 5);
        assert_eq!(iou_ged(&a, &b, &s.matching, GedMode::Semantic), 7 + 3);
    }

    #[test]
    fn large_graphs_are_flagged() {
        let g = fixtures::bursa_factual_graph();
        let r = ged(&g, &g, GedMode::Semantic);
        assert!(!r.exact);
        assert_eq!(r.distance, 0);
    }

    fn rec(graph: GraphStage, inference: InferenceStage, answer: Option<bool>) -> StageRecord {
        StageRecord { graph, inference, answer, gold: Some(true), unknown_error: false }
    }

    #[test]
    fn categories_follow_precedence() {
        use OutcomeCategory::*;
        let ok = InferenceStage::Ok { fallback: false };
        assert_eq!(categorize(&rec(GraphStage::Given, ok, Some(true))), CorrectFormatted);
        assert_eq!(categorize(&rec(GraphStage::Given, InferenceStage::Ok { fallback: true }, Some(true))), CorrectParsing);
        assert_eq!(categorize(&rec(GraphStage::Extracted { fallback: true }, ok, Some(true))), CorrectParsing);
        assert_eq!(categorize(&rec(GraphStage::Given, ok, Some(false))), IncorrectAnswer);
        assert_eq!(categorize(&rec(GraphStage::CycleError, InferenceStage::NotRun, None)), CyclicGraphError);
        assert_eq!(categorize(&rec(GraphStage::BuildError, InferenceStage::NotRun, None)), ErrorBuildingGraph);
        assert_eq!(categorize(&rec(GraphStage::ParseError, InferenceStage::NotRun, None)), ErrorParsingResponse);
        assert_eq!(categorize(&rec(GraphStage::Given, InferenceStage::ParseError, None)), ErrorParsingResponse);
        assert_eq!(categorize(&rec(GraphStage::Given, InferenceStage::Error, None)), ErrorInference);
        let mut r = rec(GraphStage::Given, InferenceStage::NotRun, None);
        r.unknown_error = true;
        assert_eq!(categorize(&r), UnknownError);
    }

    #[test]
    fn accuracy_skips_format_failures() {
        let ok = InferenceStage::Ok { fallback: false };
        let records = [
            rec(GraphStage::Given, ok, Some(true)),
            rec(GraphStage::Given, ok, Some(false)),
            rec(GraphStage::ParseError, InferenceStage::NotRun, None),
            rec(GraphStage::CycleError, InferenceStage::NotRun, None),
            rec(GraphStage::Given, InferenceStage::Error, None),
        ];
        let p = partition_outcome(&records);
        assert_eq!(p.total, 5);
        assert_eq!(p.counts.values().sum::<usize>(), 5);
        assert_eq!(p.denominator(), 2);
        assert_eq!(p.accuracy(), Some(50.0));
    }
}
