//! Attributed causal DAGs.
//!
//! A [`CausalGraph`] holds observed and hidden [`VariableNode`]s connected by
//! [`CausalEdge`]s. Graphs are immutable values: every operation that changes
//! structure (surgery, merging, repair) returns a new graph whose `graph_id`
//! is recomputed from its canonical serialization.
//!
//! Node values are plain strings whatever the declared `value_type`; the type
//! tag is metadata for the model, not something this crate interprets.

mod document;

pub use document::{EdgeRecord, GraphDocument, NodeRecord};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, VecDeque};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("graph contains a cycle: {}", .cycle.join(" -> "))]
    Cycle { cycle: Vec<String> },
    #[error("empty value assigned to node `{0}`")]
    EmptyValue(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Observed,
    Hidden,
}

/// One causal variable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableNode {
    pub node_id: String,
    pub kind: NodeKind,
    /// Short atomic description of the variable.
    pub description: String,
    /// Free-form type tag such as `bool`, `int` or `range element`.
    pub value_type: String,
    /// Free-text description of the domain; may be empty.
    pub values: String,
    pub current_value: Option<String>,
    /// `<type> : <value>` annotation carried over from the source text.
    pub context: String,
}

impl VariableNode {
    pub fn observed(node_id: impl Into<String>, description: impl Into<String>) -> Self {
        Self::new(node_id, NodeKind::Observed, description)
    }

    pub fn hidden(node_id: impl Into<String>, description: impl Into<String>) -> Self {
        Self::new(node_id, NodeKind::Hidden, description)
    }

    fn new(node_id: impl Into<String>, kind: NodeKind, description: impl Into<String>) -> Self {
        Self {
            node_id: node_id.into(),
            kind,
            description: description.into(),
            value_type: String::new(),
            values: String::new(),
            current_value: None,
            context: String::new(),
        }
    }

    pub fn with_type(mut self, value_type: impl Into<String>) -> Self {
        self.value_type = value_type.into();
        self
    }

    pub fn with_values(mut self, values: impl Into<String>) -> Self {
        self.values = values.into();
        self
    }

    pub fn with_value(mut self, value: impl Into<String>) -> Self {
        self.current_value = Some(value.into());
        self
    }

    pub fn with_context(mut self, context: impl Into<String>) -> Self {
        self.context = context.into();
        self
    }

    pub fn is_hidden(&self) -> bool {
        self.kind == NodeKind::Hidden
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalEdge {
    pub source_node_id: String,
    pub target_node_id: String,
    pub description: String,
    pub details: String,
}

impl CausalEdge {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            source_node_id: source.into(),
            target_node_id: target.into(),
            description: String::new(),
            details: String::new(),
        }
    }

    pub fn with_description(mut self, description: impl Into<String>) -> Self {
        self.description = description.into();
        self
    }

    pub fn with_details(mut self, details: impl Into<String>) -> Self {
        self.details = details.into();
        self
    }

    pub fn key(&self) -> (&str, &str) {
        (&self.source_node_id, &self.target_node_id)
    }
}

/// A set of `do(X = x)` assignments.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intervention {
    pub assignments: BTreeMap<String, String>,
}

impl Intervention {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(mut self, node_id: impl Into<String>, value: impl Into<String>) -> Self {
        self.assignments.insert(node_id.into(), value.into());
        self
    }

    pub fn contains(&self, node_id: &str) -> bool {
        self.assignments.contains_key(node_id)
    }

    pub fn get(&self, node_id: &str) -> Option<&str> {
        self.assignments.get(node_id).map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// Parses `node=value` pairs as given on the command line.
    pub fn parse_pairs<'a>(pairs: impl IntoIterator<Item = &'a str>) -> Result<Self, String> {
        let mut iv = Self::new();
        for pair in pairs {
            let (node, value) = pair
                .split_once('=')
                .ok_or_else(|| format!("expected NODE=VALUE, got `{pair}`"))?;
            let (node, value) = (node.trim(), value.trim());
            if node.is_empty() || value.is_empty() {
                return Err(format!("expected NODE=VALUE, got `{pair}`"));
            }
            iv.assignments.insert(node.to_string(), value.to_string());
        }
        Ok(iv)
    }
}

/// A structural problem found by [`CausalGraph::validate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// A strongly connected set of nodes; `nodes` is sorted.
    Cycle { nodes: Vec<String> },
    HiddenIncoming { source: String, target: String },
    DanglingEdge { source: String, target: String, missing: String },
    DuplicateId { node_id: String },
    SelfLoop { node_id: String },
}

impl Violation {
    pub fn tag(&self) -> &'static str {
        match self {
            Violation::Cycle { .. } => "cycle",
            Violation::HiddenIncoming { .. } => "hidden_incoming",
            Violation::DanglingEdge { .. } => "dangling_edge",
            Violation::DuplicateId { .. } => "duplicate_id",
            Violation::SelfLoop { .. } => "self_loop",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationResult {
    pub violations: Vec<Violation>,
}

impl ValidationResult {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_cycle(&self) -> bool {
        self.violations
            .iter()
            .any(|v| matches!(v, Violation::Cycle { .. }))
    }
}

/// Attributed causal graph. Cheap to clone relative to LLM calls; never
/// mutated in place.
#[derive(Debug, Clone)]
pub struct CausalGraph {
    graph_id: String,
    source_doc_ids: Vec<String>,
    nodes: Vec<VariableNode>,
    edges: Vec<CausalEdge>,
    index: HashMap<String, usize>,
}

impl PartialEq for CausalGraph {
    /// Content equality: nodes and edges. `source_doc_ids` is provenance
    /// metadata and does not participate.
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.edges == other.edges
    }
}

impl Eq for CausalGraph {}

impl Default for CausalGraph {
    fn default() -> Self {
        Self::new(Vec::new(), Vec::new())
    }
}

impl CausalGraph {
    /// Builds a graph in canonical order (observed nodes before hidden ones,
    /// edges from observed sources before edges from hidden sources, stable
    /// otherwise). Repeated `(source, target)` pairs keep their first
    /// occurrence. Empty current values are normalized to `None`.
    pub fn new(nodes: Vec<VariableNode>, edges: Vec<CausalEdge>) -> Self {
        Self::with_dropped_duplicates(nodes, edges).0
    }

    /// Like [`CausalGraph::new`] and also returns the duplicate edges that
    /// were collapsed.
    pub fn with_dropped_duplicates(
        nodes: Vec<VariableNode>,
        edges: Vec<CausalEdge>,
    ) -> (Self, Vec<CausalEdge>) {
        let (mut observed, hidden): (Vec<_>, Vec<_>) =
            nodes.into_iter().partition(|n| !n.is_hidden());
        observed.extend(hidden);
        let mut nodes = observed;
        for n in &mut nodes {
            if n.current_value.as_deref() == Some("") {
                n.current_value = None;
            }
        }

        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            index.entry(n.node_id.clone()).or_insert(i);
        }

        let hidden_source =
            |e: &CausalEdge| index.get(&e.source_node_id).is_some_and(|&i| nodes[i].is_hidden());
        let mut seen = BTreeSet::new();
        let mut dropped = Vec::new();
        let mut kept = Vec::with_capacity(edges.len());
        for e in edges {
            if seen.insert((e.source_node_id.clone(), e.target_node_id.clone())) {
                kept.push(e);
            } else {
                dropped.push(e);
            }
        }
        let (mut edges, hidden_edges): (Vec<_>, Vec<_>) =
            kept.into_iter().partition(|e| !hidden_source(e));
        edges.extend(hidden_edges);

        let mut graph = Self {
            graph_id: String::new(),
            source_doc_ids: Vec::new(),
            nodes,
            edges,
            index,
        };
        graph.graph_id = graph.content_hash();
        (graph, dropped)
    }

    pub fn with_source_docs(mut self, doc_ids: Vec<String>) -> Self {
        self.source_doc_ids = doc_ids;
        self
    }

    /// Content hash of the canonical serialization.
    pub fn graph_id(&self) -> &str {
        &self.graph_id
    }

    pub fn source_doc_ids(&self) -> &[String] {
        &self.source_doc_ids
    }

    pub fn nodes(&self) -> &[VariableNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[CausalEdge] {
        &self.edges
    }

    pub fn node(&self, node_id: &str) -> Option<&VariableNode> {
        self.index.get(node_id).map(|&i| &self.nodes[i])
    }

    pub fn contains(&self, node_id: &str) -> bool {
        self.index.contains_key(node_id)
    }

    pub fn edge(&self, source: &str, target: &str) -> Option<&CausalEdge> {
        self.edges
            .iter()
            .find(|e| e.source_node_id == source && e.target_node_id == target)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn hidden_nodes(&self) -> impl Iterator<Item = &VariableNode> {
        self.nodes.iter().filter(|n| n.is_hidden())
    }

    fn content_hash(&self) -> String {
        let doc = GraphDocument::from_graph(self);
        let bytes = serde_json::to_vec(&doc).expect("graph document serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    /// B.1-shaped JSON document (pretty-printed).
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&GraphDocument::from_graph(self))
            .expect("graph document serializes")
    }

    fn require(&self, node_id: &str) -> Result<(), GraphError> {
        if self.contains(node_id) {
            Ok(())
        } else {
            Err(GraphError::UnknownNode(node_id.to_string()))
        }
    }

    /// Child adjacency over edges whose endpoints both exist, excluding
    /// self-loops. Children are sorted by node id.
    fn children_map(&self) -> BTreeMap<&str, BTreeSet<&str>> {
        let mut map: BTreeMap<&str, BTreeSet<&str>> = self
            .nodes
            .iter()
            .map(|n| (n.node_id.as_str(), BTreeSet::new()))
            .collect();
        for e in &self.edges {
            let (s, t) = e.key();
            if s != t && self.contains(s) && self.contains(t) {
                map.entry(s).or_default().insert(t);
            }
        }
        map
    }

    /// Enumerates every invariant violation.
    pub fn validate(&self) -> ValidationResult {
        let mut violations = Vec::new();

        let mut seen = BTreeSet::new();
        let mut reported = BTreeSet::new();
        for n in &self.nodes {
            if !seen.insert(n.node_id.as_str()) && reported.insert(n.node_id.as_str()) {
                violations.push(Violation::DuplicateId { node_id: n.node_id.clone() });
            }
        }

        for e in &self.edges {
            let (s, t) = e.key();
            for end in [s, t] {
                if !self.contains(end) {
                    violations.push(Violation::DanglingEdge {
                        source: s.to_string(),
                        target: t.to_string(),
                        missing: end.to_string(),
                    });
                    break;
                }
            }
            if s == t {
                violations.push(Violation::SelfLoop { node_id: s.to_string() });
            }
            if self.node(t).is_some_and(VariableNode::is_hidden) {
                violations.push(Violation::HiddenIncoming {
                    source: s.to_string(),
                    target: t.to_string(),
                });
            }
        }

        for component in strongly_connected(&self.children_map()) {
            if component.len() > 1 {
                violations.push(Violation::Cycle {
                    nodes: component.into_iter().map(str::to_string).collect(),
                });
            }
        }

        ValidationResult { violations }
    }

    /// Kahn's algorithm with ascending-node-id tie-breaking.
    pub fn topological_order(&self) -> Result<Vec<String>, GraphError> {
        let children = self.children_map();
        let mut indegree: BTreeMap<&str, usize> = children.keys().map(|&k| (k, 0)).collect();
        for targets in children.values() {
            for t in targets {
                *indegree.get_mut(t).expect("target is a node") += 1;
            }
        }
        let mut ready: BinaryHeap<Reverse<&str>> = indegree
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&k, _)| Reverse(k))
            .collect();
        let mut order = Vec::with_capacity(indegree.len());
        while let Some(Reverse(n)) = ready.pop() {
            order.push(n.to_string());
            for &c in &children[n] {
                let d = indegree.get_mut(c).expect("child is a node");
                *d -= 1;
                if *d == 0 {
                    ready.push(Reverse(c));
                }
            }
        }
        if order.len() < indegree.len() {
            let cycle = find_cycle(&children).unwrap_or_default();
            return Err(GraphError::Cycle { cycle });
        }
        Ok(order)
    }

    fn check_intervention(&self, iv: &Intervention) -> Result<(), GraphError> {
        for (node, value) in &iv.assignments {
            self.require(node)?;
            if value.trim().is_empty() {
                return Err(GraphError::EmptyValue(node.clone()));
            }
        }
        Ok(())
    }

    /// Graph surgery: removes every incoming edge of each intervened node and
    /// sets its current value. Everything else is carried over unchanged.
    pub fn apply_intervention(&self, iv: &Intervention) -> Result<CausalGraph, GraphError> {
        self.check_intervention(iv)?;
        let nodes = self
            .nodes
            .iter()
            .map(|n| match iv.get(&n.node_id) {
                Some(v) => VariableNode { current_value: Some(v.to_string()), ..n.clone() },
                None => n.clone(),
            })
            .collect();
        let edges = self
            .edges
            .iter()
            .filter(|e| !iv.contains(&e.target_node_id))
            .cloned()
            .collect();
        Ok(CausalGraph::new(nodes, edges).with_source_docs(self.source_doc_ids.clone()))
    }

    /// Strict descendants of the intervened nodes in the surgered graph,
    /// excluding the intervened nodes themselves.
    pub fn affected_set(&self, iv: &Intervention) -> Result<BTreeSet<String>, GraphError> {
        let surgered = self.apply_intervention(iv)?;
        let children = surgered.children_map();
        let mut reached = BTreeSet::new();
        let mut queue: VecDeque<&str> = iv.assignments.keys().map(String::as_str).collect();
        while let Some(n) = queue.pop_front() {
            for &c in children.get(n).into_iter().flatten() {
                if reached.insert(c) {
                    queue.push_back(c);
                }
            }
        }
        Ok(reached
            .into_iter()
            .filter(|n| !iv.contains(n))
            .map(str::to_string)
            .collect())
    }

    /// In-neighbourhood with connecting edges, ordered by node id.
    pub fn parents(&self, node_id: &str) -> Result<Vec<(&VariableNode, &CausalEdge)>, GraphError> {
        self.require(node_id)?;
        let mut out: Vec<_> = self
            .edges
            .iter()
            .filter(|e| e.target_node_id == node_id)
            .filter_map(|e| self.node(&e.source_node_id).map(|n| (n, e)))
            .collect();
        out.sort_by(|a, b| a.0.node_id.cmp(&b.0.node_id));
        Ok(out)
    }

    /// Out-neighbourhood with connecting edges, ordered by node id.
    pub fn children(&self, node_id: &str) -> Result<Vec<(&VariableNode, &CausalEdge)>, GraphError> {
        self.require(node_id)?;
        let mut out: Vec<_> = self
            .edges
            .iter()
            .filter(|e| e.source_node_id == node_id)
            .filter_map(|e| self.node(&e.target_node_id).map(|n| (n, e)))
            .collect();
        out.sort_by(|a, b| a.0.node_id.cmp(&b.0.node_id));
        Ok(out)
    }

    /// Undirected BFS distances from `node_id`, up to `max_distance`.
    /// The start node is excluded.
    pub fn undirected_distances(
        &self,
        node_id: &str,
        max_distance: usize,
    ) -> Result<BTreeMap<String, usize>, GraphError> {
        self.require(node_id)?;
        let mut adjacent: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for e in &self.edges {
            let (s, t) = e.key();
            if s != t && self.contains(s) && self.contains(t) {
                adjacent.entry(s).or_default().insert(t);
                adjacent.entry(t).or_default().insert(s);
            }
        }
        let mut dist: BTreeMap<&str, usize> = BTreeMap::from([(node_id, 0)]);
        let mut queue = VecDeque::from([node_id]);
        while let Some(n) = queue.pop_front() {
            let d = dist[n];
            if d == max_distance {
                continue;
            }
            for &m in adjacent.get(n).into_iter().flatten() {
                if !dist.contains_key(m) {
                    dist.insert(m, d + 1);
                    queue.push_back(m);
                }
            }
        }
        dist.remove(node_id);
        Ok(dist.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
    }
}

/// Kosaraju over a sorted adjacency map; components come out sorted.
fn strongly_connected<'a>(children: &BTreeMap<&'a str, BTreeSet<&'a str>>) -> Vec<Vec<&'a str>> {
    let mut finished = Vec::with_capacity(children.len());
    let mut visited = BTreeSet::new();
    for &start in children.keys() {
        if !visited.insert(start) {
            continue;
        }
        let mut stack = vec![(start, children[start].iter())];
        while let Some((node, iter)) = stack.last_mut() {
            match iter.next() {
                Some(&next) => {
                    if visited.insert(next) {
                        stack.push((next, children[next].iter()));
                    }
                }
                None => {
                    finished.push(*node);
                    stack.pop();
                }
            }
        }
    }

    let mut reverse: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (&s, targets) in children {
        for &t in targets {
            reverse.entry(t).or_default().push(s);
        }
    }
    let mut assigned = BTreeSet::new();
    let mut components = Vec::new();
    for &root in finished.iter().rev() {
        if !assigned.insert(root) {
            continue;
        }
        let mut component = vec![root];
        let mut stack = vec![root];
        while let Some(n) = stack.pop() {
            for &p in reverse.get(n).into_iter().flatten() {
                if assigned.insert(p) {
                    component.push(p);
                    stack.push(p);
                }
            }
        }
        component.sort_unstable();
        components.push(component);
    }
    components.sort();
    components
}

/// One concrete cycle, starting from the smallest node of the first
/// non-trivial strongly connected component.
fn find_cycle(children: &BTreeMap<&str, BTreeSet<&str>>) -> Option<Vec<String>> {
    let component = strongly_connected(children)
        .into_iter()
        .find(|c| c.len() > 1)?;
    let members: BTreeSet<&str> = component.iter().copied().collect();
    let mut path = vec![component[0]];
    let mut position = BTreeMap::from([(component[0], 0usize)]);
    loop {
        let current = *path.last().expect("path is non-empty");
        let next = children[current]
            .iter()
            .copied()
            .find(|c| members.contains(c))
            .expect("every node of a strongly connected component has a successor in it");
        if let Some(&at) = position.get(next) {
            let mut cycle: Vec<String> = path[at..].iter().map(|s| s.to_string()).collect();
            cycle.push(next.to_string());
            return Some(cycle);
        }
        position.insert(next, path.len());
        path.push(next);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn plain(ids: &[&str], edges: &[(&str, &str)]) -> CausalGraph {
        CausalGraph::new(
            ids.iter().map(|id| VariableNode::observed(*id, *id)).collect(),
            edges.iter().map(|(s, t)| CausalEdge::new(*s, *t)).collect(),
        )
    }

    #[test]
    fn empty_graph_is_valid() {
        assert!(CausalGraph::default().validate().is_ok());
        assert!(CausalGraph::default().topological_order().unwrap().is_empty());
    }

    #[test]
    fn coffee_graph_is_valid_and_ordered() {
        let g = fixtures::coffee_ground_truth();
        assert!(g.validate().is_ok());
        assert_eq!(g.topological_order().unwrap(), ["H", "P", "C", "S"]);
    }

    #[test]
    fn two_cycle_is_reported() {
        let g = plain(&["A", "B"], &[("A", "B"), ("B", "A")]);
        let v = g.validate();
        assert_eq!(
            v.violations,
            vec![Violation::Cycle { nodes: vec!["A".into(), "B".into()] }]
        );
        match g.topological_order() {
            Err(GraphError::Cycle { cycle }) => assert_eq!(cycle, ["A", "B", "A"]),
            other => panic!("expected cycle error, got {other:?}"),
        }
    }

    #[test]
    fn every_violation_kind_is_enumerated() {
        let nodes = vec![
            VariableNode::observed("a", "a"),
            VariableNode::observed("a", "dup"),
            VariableNode::hidden("h", "h"),
            VariableNode::observed("b", "b"),
            VariableNode::observed("c", "c"),
        ];
        let edges = vec![
            CausalEdge::new("a", "h"),
            CausalEdge::new("a", "missing"),
            CausalEdge::new("b", "b"),
            CausalEdge::new("b", "c"),
            CausalEdge::new("c", "b"),
        ];
        let v = CausalGraph::new(nodes, edges).validate();
        let tags: BTreeSet<_> = v.violations.iter().map(Violation::tag).collect();
        assert_eq!(
            tags,
            BTreeSet::from(["cycle", "hidden_incoming", "dangling_edge", "duplicate_id", "self_loop"])
        );
    }

    #[test]
    fn single_node_order() {
        assert_eq!(plain(&["0"], &[]).topological_order().unwrap(), ["0"]);
    }

    #[test]
    fn bursa_chain_order() {
        let g = plain(
            &["5", "4", "11", "12", "3"],
            &[("5", "4"), ("4", "11"), ("11", "12"), ("12", "3")],
        );
        assert_eq!(g.topological_order().unwrap(), ["5", "4", "11", "12", "3"]);
    }

    #[test]
    fn bursa_full_order_puts_5_before_4() {
        let order = fixtures::bursa_factual_graph().topological_order().unwrap();
        assert_eq!(
            order,
            ["1", "5", "4", "9", "10", "h0", "0", "11", "12", "2", "3"]
        );
    }

    #[test]
    fn surgery_on_figure_two_graph() {
        let g = plain(
            &["X", "A", "B", "Y", "U"],
            &[("X", "A"), ("B", "A"), ("A", "Y"), ("U", "X"), ("U", "A"), ("U", "B")],
        );
        let iv = Intervention::new().set("X", "x");
        let s = g.apply_intervention(&iv).unwrap();
        assert!(s.edge("U", "X").is_none());
        assert!(s.edge("U", "A").is_some());
        assert!(s.edge("U", "B").is_some());
        assert_eq!(s.node("X").unwrap().current_value.as_deref(), Some("x"));
        assert_eq!(
            g.affected_set(&iv).unwrap(),
            BTreeSet::from(["A".to_string(), "Y".to_string()])
        );
    }

    #[test]
    fn surgery_on_bursa_graph() {
        let g = fixtures::bursa_factual_graph();
        let iv = fixtures::bursa_intervention();
        let s = g.apply_intervention(&iv).unwrap();
        let removed: Vec<_> = g
            .edges()
            .iter()
            .filter(|e| s.edge(&e.source_node_id, &e.target_node_id).is_none())
            .map(|e| (e.source_node_id.as_str(), e.target_node_id.as_str()))
            .collect();
        assert_eq!(removed, [("h0", "0")]);
        assert_eq!(s.node("0").unwrap().current_value.as_deref(), Some("low"));
        assert_eq!(s.node("9").unwrap().current_value.as_deref(), Some("False"));
        assert!(s.validate().is_ok());
    }

    #[test]
    fn root_intervention_keeps_edges() {
        let g = plain(&["r", "c"], &[("r", "c")]);
        let s = g.apply_intervention(&Intervention::new().set("r", "v")).unwrap();
        assert_eq!(s.edges(), g.edges());
        assert_eq!(s.node("r").unwrap().current_value.as_deref(), Some("v"));
    }

    #[test]
    fn unknown_and_empty_assignments_are_rejected() {
        let g = plain(&["r"], &[]);
        assert_eq!(
            g.apply_intervention(&Intervention::new().set("zz", "v")),
            Err(GraphError::UnknownNode("zz".into()))
        );
        assert_eq!(
            g.apply_intervention(&Intervention::new().set("r", " ")),
            Err(GraphError::EmptyValue("r".into()))
        );
        assert!(g.affected_set(&Intervention::new().set("zz", "v")).is_err());
        assert!(g.parents("zz").is_err());
    }

    #[test]
    fn bursa_affected_set() {
        let g = fixtures::bursa_factual_graph();
        let affected = g.affected_set(&fixtures::bursa_intervention()).unwrap();
        let expected: BTreeSet<String> =
            ["2", "3", "10", "11", "12"].iter().map(|s| s.to_string()).collect();
        assert_eq!(affected, expected);
    }

    #[test]
    fn sink_intervention_affects_nothing() {
        let g = fixtures::bursa_factual_graph();
        assert!(g.affected_set(&Intervention::new().set("3", "1000")).unwrap().is_empty());
    }

    #[test]
    fn neighbourhoods_on_bursa_graph() {
        let g = fixtures::bursa_factual_graph();
        let parents: Vec<_> = g.parents("3").unwrap().iter().map(|(n, _)| n.node_id.as_str()).collect();
        assert_eq!(parents, ["12", "2"]);
        let children: Vec<_> = g.children("h0").unwrap().iter().map(|(n, _)| n.node_id.as_str()).collect();
        assert_eq!(children, ["0", "11", "2"]);
        let iso = plain(&["x"], &[]);
        assert!(iso.parents("x").unwrap().is_empty());
        assert!(iso.children("x").unwrap().is_empty());
    }

    #[test]
    fn duplicate_edges_collapse_to_first() {
        let (g, dropped) = CausalGraph::with_dropped_duplicates(
            vec![VariableNode::observed("a", "a"), VariableNode::observed("b", "b")],
            vec![
                CausalEdge::new("a", "b").with_description("first"),
                CausalEdge::new("a", "b").with_description("second"),
            ],
        );
        assert_eq!(g.edges().len(), 1);
        assert_eq!(g.edges()[0].description, "first");
        assert_eq!(dropped.len(), 1);
    }

    #[test]
    fn graph_id_tracks_content() {
        let a = plain(&["a", "b"], &[("a", "b")]);
        let b = plain(&["a", "b"], &[("a", "b")]);
        let c = plain(&["a", "b"], &[]);
        assert_eq!(a.graph_id(), b.graph_id());
        assert_ne!(a.graph_id(), c.graph_id());
        assert_eq!(a.graph_id().len(), 16);
    }

    #[test]
    fn intervention_pairs_parse() {
        let iv = Intervention::parse_pairs(["0=low", " 9 = False "]).unwrap();
        assert_eq!(iv.get("0"), Some("low"));
        assert_eq!(iv.get("9"), Some("False"));
        assert!(Intervention::parse_pairs(["novalue"]).is_err());
        assert!(Intervention::parse_pairs(["x="]).is_err());
    }
}
