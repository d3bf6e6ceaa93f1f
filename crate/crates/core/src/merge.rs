//! Combining graphs through embedding-based node clustering.
//!
//! Each node is embedded from its attributes (never its value) plus those of
//! its neighbours up to a given undirected distance. DBSCAN over cosine
//! distance groups similar nodes, and the groups are either collapsed into one
//! node (summarise) or tied together by a new hidden common cause (analogy).

use crate::graph::{CausalEdge, CausalGraph, GraphError, NodeKind, VariableNode};
use crate::llm::{EmbeddingVector, Gateway, LlmError};
use crate::prompts;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MergeError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("embedding dimension mismatch: {expected} vs {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid clustering parameters: {0}")]
    InvalidParameters(String),
    #[error("nothing to merge: {0}")]
    Empty(String),
}

/// A node's embedding prompt: its own attribute line, then one line per
/// neighbour within `depth` hops (ignoring edge direction), ordered by
/// distance then id.
pub fn node_embedding_text(graph: &CausalGraph, node_id: &str, depth: usize) -> Result<String, GraphError> {
    let node = graph.node(node_id).ok_or_else(|| GraphError::UnknownNode(node_id.into()))?;
    let mut lines = vec![prompts::node_attributes(node)];
    let mut neighbours: Vec<(usize, String)> = graph
        .undirected_distances(node_id, depth)?
        .into_iter()
        .map(|(id, d)| (d, id))
        .collect();
    neighbours.sort();
    for (rank, id) in neighbours {
        lines.push(prompts::neighbour_line(rank, graph.node(&id).expect("distance map holds known ids")));
    }
    Ok(lines.join("\n"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEmbeddingRecord {
    pub graph_id: String,
    pub node_id: String,
    pub depth: usize,
    pub vector: EmbeddingVector,
    pub prompt_text: String,
}

pub type MemberId = (String, String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub members: BTreeSet<MemberId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub centroid: Option<Vec<f64>>,
}

impl Cluster {
    pub fn new(members: impl IntoIterator<Item = MemberId>) -> Self {
        Self { members: members.into_iter().collect(), centroid: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub clusters: Vec<Cluster>,
    pub noise: BTreeSet<MemberId>,
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na * nb)).max(0.0)
}

/// DBSCAN labels (`None` = noise). A point's neighbourhood includes itself,
/// so `min_points = 1` makes every point a core point.
pub fn dbscan(points: &[Vec<f64>], epsilon: f64, min_points: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| cosine_distance(&points[i], &points[j]) <= epsilon).collect())
        .collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_points).collect();
    let mut labels = vec![None; n];
    let mut next = 0;
    for start in 0..n {
        if labels[start].is_some() || !core[start] {
            continue;
        }
        labels[start] = Some(next);
        let mut queue = vec![start];
        while let Some(p) = queue.pop() {
            if !core[p] {
                continue;
            }
            for &q in &neighbours[p] {
                if labels[q].is_none() {
                    labels[q] = Some(next);
                    queue.push(q);
                }
            }
        }
        next += 1;
    }
    labels
}

/// Clusters embedding records. Records are processed in (graph id, node id)
/// order, so the partition does not depend on input order.
pub fn cluster_nodes(records: &[NodeEmbeddingRecord], epsilon: f64, min_points: usize) -> Result<Clustering, MergeError> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(MergeError::InvalidParameters(format!("epsilon must be positive, got {epsilon}")));
    }
    if min_points == 0 {
        return Err(MergeError::InvalidParameters("min_points must be at least 1".into()));
    }
    let mut sorted: Vec<&NodeEmbeddingRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.graph_id, &a.node_id).cmp(&(&b.graph_id, &b.node_id)));
    if let Some(first) = sorted.first() {
        let expected = first.vector.values.len();
        if let Some(bad) = sorted.iter().find(|r| r.vector.values.len() != expected) {
            return Err(MergeError::DimensionMismatch { expected, found: bad.vector.values.len() });
        }
    }
    let points: Vec<Vec<f64>> = sorted.iter().map(|r| r.vector.values.clone()).collect();
    let labels = dbscan(&points, epsilon, min_points);
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut noise = BTreeSet::new();
    for (i, label) in labels.iter().enumerate() {
        let id = (sorted[i].graph_id.clone(), sorted[i].node_id.clone());
        match label {
            Some(l) => groups.entry(*l).or_default().push(i),
            None => {
                noise.insert(id);
            }
        }
    }
    let clusters = groups
        .into_values()
        .map(|idx| {
            let dim = points[idx[0]].len();
            let mut centroid = vec![0.0; dim];
            for &i in &idx {
                for (c, v) in centroid.iter_mut().zip(&points[i]) {
                    *c += v / idx.len() as f64;
                }
            }
            Cluster {
                members: idx.iter().map(|&i| (sorted[i].graph_id.clone(), sorted[i].node_id.clone())).collect(),
                centroid: Some(centroid),
            }
        })
        .collect();
    Ok(Clustering { clusters, noise })
}

/// Per-input namespace keys: the graph id, suffixed when two inputs share one.
fn namespaces(graphs: &[CausalGraph]) -> Vec<String> {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    graphs
        .iter()
        .map(|g| {
            let n = seen.entry(g.graph_id()).or_insert(0);
            *n += 1;
            if *n == 1 {
                g.graph_id().to_string()
            } else {
                format!("{}#{}", g.graph_id(), n)
            }
        })
        .collect()
}

fn namespaced(ns: &str, node_id: &str) -> String {
    format!("{ns}:{node_id}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeResult {
    pub graph: CausalGraph,
    /// Input (namespace, node id) → merged node id.
    pub mapping: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped_edges: Vec<CausalEdge>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub log: Vec<String>,
}

fn multi_member(clusters: &[Cluster]) -> Vec<&Cluster> {
    let mut out: Vec<&Cluster> = clusters.iter().filter(|c| c.members.len() > 1).collect();
    out.sort_by(|a, b| a.members.iter().next().cmp(&b.members.iter().next()));
    out
}

fn source_docs(graphs: &[CausalGraph]) -> Vec<String> {
    let mut docs: Vec<String> = graphs.iter().flat_map(|g| g.source_doc_ids().iter().cloned()).collect();
    docs.sort();
    docs.dedup();
    docs
}

fn reaches(adj: &BTreeMap<String, BTreeSet<String>>, from: &str, to: &str) -> bool {
    let mut stack = vec![from];
    let mut seen = BTreeSet::new();
    while let Some(n) = stack.pop() {
        if n == to {
            return true;
        }
        if seen.insert(n) {
            if let Some(next) = adj.get(n) {
                stack.extend(next.iter().map(String::as_str));
            }
        }
    }
    false
}

/// Collapses every multi-member cluster into one node that inherits all
/// member edges. Cluster members are `(graph id, node id)` pairs.
pub fn merge_summarise(graphs: &[CausalGraph], clusters: &[Cluster]) -> MergeResult {
    let ns = namespaces(graphs);
    let lookup = |member: &MemberId| -> Option<(&str, &VariableNode)> {
        let (gi, g) = graphs.iter().enumerate().find(|(_, g)| g.graph_id() == member.0)?;
        Some((ns[gi].as_str(), g.node(&member.1)?))
    };
    let mut log = Vec::new();
    let mut mapping: BTreeMap<String, String> = BTreeMap::new();
    let mut merged_nodes: BTreeMap<String, VariableNode> = BTreeMap::new();
    for cluster in multi_member(clusters) {
        let members: Vec<(&str, &VariableNode)> = cluster.members.iter().filter_map(lookup).collect();
        if members.len() < 2 {
            continue;
        }
        let (rep_ns, rep) = members[0];
        let id = namespaced(rep_ns, &rep.node_id);
        let mut node = VariableNode { node_id: id.clone(), ..rep.clone() };
        if members.iter().any(|(_, m)| !m.is_hidden()) {
            node.kind = NodeKind::Observed;
        }
        if node.current_value.is_none() {
            node.current_value = members.iter().find_map(|(_, m)| m.current_value.clone());
        }
        let others: Vec<String> = members[1..]
            .iter()
            .map(|(n, m)| format!("{} ({})", m.description, namespaced(n, &m.node_id)))
            .collect();
        let note = format!("merged with: {}", others.join("; "));
        node.context = if node.context.is_empty() { note } else { format!("{}; {note}", node.context) };
        for (n, m) in &members {
            mapping.insert(namespaced(n, &m.node_id), id.clone());
        }
        log.push(format!("merged {} nodes into {id}", members.len()));
        merged_nodes.insert(id, node);
    }

    let mut nodes = Vec::new();
    let mut emitted = BTreeSet::new();
    for (g, n) in graphs.iter().zip(&ns) {
        for node in g.nodes() {
            let key = namespaced(n, &node.node_id);
            match mapping.get(&key) {
                Some(target) => {
                    if emitted.insert(target.clone()) {
                        nodes.push(merged_nodes[target].clone());
                    }
                }
                None => {
                    mapping.insert(key.clone(), key.clone());
                    nodes.push(VariableNode { node_id: key, ..node.clone() });
                }
            }
        }
    }

    let mut adj: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut edges: Vec<CausalEdge> = Vec::new();
    let mut dropped = Vec::new();
    for (g, n) in graphs.iter().zip(&ns) {
        for e in g.edges() {
            let s = mapping[&namespaced(n, &e.source_node_id)].clone();
            let t = mapping[&namespaced(n, &e.target_node_id)].clone();
            let edge = CausalEdge { source_node_id: s.clone(), target_node_id: t.clone(), ..e.clone() };
            if s == t {
                log.push(format!("dropped self-loop on {s}"));
                dropped.push(edge);
            } else if adj.get(&s).is_some_and(|out| out.contains(&t)) {
                log.push(format!("collapsed duplicate edge {s} -> {t}"));
            } else if reaches(&adj, &t, &s) {
                log.push(format!("dropped edge {s} -> {t}: it would close a cycle"));
                log::warn!("summarise merge dropped edge {s} -> {t} to keep the graph acyclic");
                dropped.push(edge);
            } else {
                adj.entry(s).or_default().insert(t);
                edges.push(edge);
            }
        }
    }
    let graph = CausalGraph::new(nodes, edges).with_source_docs(source_docs(graphs));
    MergeResult { graph, mapping, dropped_edges: dropped, log }
}

/// Keeps every input graph unchanged and adds, for each multi-member
/// cluster, a hidden node `u{k}` with an edge to each observed member.
/// Hidden members cannot take a parent and are left as they are; a cluster
/// with fewer than two observed members gets no ancestor.
pub fn merge_analogy(graphs: &[CausalGraph], clusters: &[Cluster]) -> MergeResult {
    let ns = namespaces(graphs);
    let mut mapping = BTreeMap::new();
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    for (g, n) in graphs.iter().zip(&ns) {
        for node in g.nodes() {
            let id = namespaced(n, &node.node_id);
            mapping.insert(id.clone(), id.clone());
            nodes.push(VariableNode { node_id: id, ..node.clone() });
        }
        for e in g.edges() {
            edges.push(CausalEdge {
                source_node_id: namespaced(n, &e.source_node_id),
                target_node_id: namespaced(n, &e.target_node_id),
                ..e.clone()
            });
        }
    }
    let taken: BTreeSet<String> = mapping.keys().cloned().collect();
    let mut log = Vec::new();
    let mut k = 0;
    for cluster in multi_member(clusters) {
        let members: Vec<(String, &VariableNode)> = cluster
            .members
            .iter()
            .filter_map(|(gid, nid)| {
                let gi = graphs.iter().position(|g| g.graph_id() == gid)?;
                Some((namespaced(&ns[gi], nid), graphs[gi].node(nid)?))
            })
            .collect();
        if members.len() < 2 {
            continue;
        }
        let skipped = members.iter().filter(|(_, m)| m.is_hidden()).count();
        let members: Vec<_> = members.into_iter().filter(|(_, m)| !m.is_hidden()).collect();
        if skipped > 0 {
            log.push(format!("{skipped} hidden cluster member(s) keep no new parent"));
        }
        if members.len() < 2 {
            continue;
        }
        let mut id = format!("u{k}");
        while taken.contains(&id) {
            k += 1;
            id = format!("u{k}");
        }
        k += 1;
        let descriptions: Vec<&str> = members.iter().map(|(_, m)| m.description.as_str()).collect();
        nodes.push(
            VariableNode::hidden(id.clone(), format!("Common cause of: {}", descriptions.join("; ")))
                .with_context("origin : analogy merge"),
        );
        for (member_id, _) in &members {
            edges.push(CausalEdge::new(id.clone(), member_id.clone()).with_description("shared mechanism"));
        }
        log.push(format!("added hidden ancestor {id} for {} nodes", members.len()));
    }
    let graph = CausalGraph::new(nodes, edges).with_source_docs(source_docs(graphs));
    MergeResult { graph, mapping, dropped_edges: Vec::new(), log }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Summarise,
    Analogy,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "summarise" | "summarize" | "summarisation" => Ok(Self::Summarise),
            "analogy" => Ok(Self::Analogy),
            other => Err(format!("unknown merge strategy `{other}` (expected summarise or analogy)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeOptions {
    pub strategy: Strategy,
    pub epsilon: f64,
    pub min_points: usize,
    pub depth: usize,
    pub include_hidden: bool,
}

impl Default for MergeOptions {
    fn default() -> Self {
        Self { strategy: Strategy::Summarise, epsilon: 0.15, min_points: 1, depth: 1, include_hidden: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub options: MergeOptions,
    pub embedding_model: String,
    /// Vectors come from the provider's embedding endpoint, not model
    /// hidden states.
    pub embedding_source: String,
    pub clustering: Clustering,
    pub result: MergeResult,
}

#[cfg(feature = "parallel")]
fn embed_all(gateway: &Gateway, texts: &[String]) -> Vec<Result<EmbeddingVector, LlmError>> {
    use rayon::prelude::*;
    texts.par_iter().map(|t| gateway.embed(t)).collect()
}

#[cfg(not(feature = "parallel"))]
fn embed_all(gateway: &Gateway, texts: &[String]) -> Vec<Result<EmbeddingVector, LlmError>> {
    texts.iter().map(|t| gateway.embed(t)).collect()
}

pub fn embed_nodes(
    gateway: &Gateway,
    graphs: &[CausalGraph],
    depth: usize,
    include_hidden: bool,
) -> Result<Vec<NodeEmbeddingRecord>, MergeError> {
    let mut keys = Vec::new();
    let mut texts = Vec::new();
    for g in graphs {
        for n in g.nodes().iter().filter(|n| include_hidden || !n.is_hidden()) {
            keys.push((g.graph_id().to_string(), n.node_id.clone()));
            texts.push(node_embedding_text(g, &n.node_id, depth)?);
        }
    }
    let vectors = embed_all(gateway, &texts);
    keys.into_iter()
        .zip(texts)
        .zip(vectors)
        .map(|(((graph_id, node_id), prompt_text), v)| {
            Ok(NodeEmbeddingRecord { graph_id, node_id, depth, vector: v?, prompt_text })
        })
        .collect()
}

/// Embeds, clusters and merges.
pub fn merge_graphs(gateway: &Gateway, graphs: &[CausalGraph], options: MergeOptions) -> Result<MergeReport, MergeError> {
    if graphs.is_empty() {
        return Err(MergeError::Empty("no input graphs".into()));
    }
    let records = embed_nodes(gateway, graphs, options.depth, options.include_hidden)?;
    let clustering = cluster_nodes(&records, options.epsilon, options.min_points)?;
    let result = match options.strategy {
        Strategy::Summarise => merge_summarise(graphs, &clustering.clusters),
        Strategy::Analogy => merge_analogy(graphs, &clustering.clusters),
    };
    Ok(MergeReport {
        options,
        embedding_model: gateway.options().embedding_model.clone(),
        embedding_source: "provider embedding endpoint".into(),
        clustering,
        result,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::llm::MockProvider;

    fn record(g: &str, n: &str, v: Vec<f64>) -> NodeEmbeddingRecord {
        NodeEmbeddingRecord {
            graph_id: g.into(),
            node_id: n.into(),
            depth: 0,
            vector: EmbeddingVector { values: v, source_text: String::new(), model_name: "t".into() },
            prompt_text: String::new(),
        }
    }

    fn unit(angle_deg: f64) -> Vec<f64> {
        let a = angle_deg.to_radians();
        vec![a.cos(), a.sin()]
    }

    #[test]
    fn embedding_text_depths() {
        let g = fixtures::bursa_factual_graph();
        let d0 = node_embedding_text(&g, "0", 0).unwrap();
        assert_eq!(d0.lines().count(), 1);
        assert_eq!(
            d0,
            "description: Severity of COVID-19 pandemic, type: range element, values: low, moderate, severe, context: market : Bursa Malaysia, date : March 2020"
        );
        let d1 = node_embedding_text(&g, "3", 1).unwrap();
        let lines: Vec<_> = d1.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("neighbour at distance 1 from node: description: Condition of oil"));
        assert!(lines[2].starts_with("neighbour at distance 1 from node: description: Bursa Malaysia"));
        let d2 = node_embedding_text(&g, "3", 2).unwrap();
        let rank2: Vec<_> = d2.lines().filter(|l| l.starts_with("neighbour at distance 2")).collect();
        assert_eq!(rank2.len(), 5);
        for desc in ["Severity of COVID-19", "Severity of oil", "Downside risks", "Travel restrictions", "Potential end"] {
            assert!(rank2.iter().any(|l| l.contains(desc)), "{desc}");
        }
        assert!(!d2.contains("1,280.63"));
    }

    #[test]
    fn identical_vectors_cluster() {
        let c = cluster_nodes(&[record("a", "x", unit(0.0)), record("b", "y", unit(0.0))], 0.1, 1).unwrap();
        assert_eq!(c.clusters.len(), 1);
        assert_eq!(c.clusters[0].members.len(), 2);
    }

    #[test]
    fn spread_points_are_noise() {
        // Cosine distance 1 - cos(θ); pick angles whose pairwise distance is
        // at least 2ε for ε = 0.05.
        let eps = 0.05;
        let recs = [record("g", "a", unit(0.0)), record("g", "b", unit(30.0)), record("g", "c", unit(60.0))];
        for (i, j) in [(0, 1), (1, 2), (0, 2)] {
            assert!(cosine_distance(&recs[i].vector.values, &recs[j].vector.values) >= 2.0 * eps);
        }
        let c = cluster_nodes(&recs, eps, 2).unwrap();
        assert!(c.clusters.is_empty());
        assert_eq!(c.noise.len(), 3);
    }

    /// Brute-force density connectivity: two core points are connected when a
    /// chain of core points links them with consecutive distances ≤ ε.
    fn oracle_partition(points: &[Vec<f64>], eps: f64, min_points: usize) -> (Vec<BTreeSet<usize>>, BTreeSet<usize>) {
        let n = points.len();
        let near = |i: usize, j: usize| cosine_distance(&points[i], &points[j]) <= eps;
        let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_points).collect();
        let mut reach = vec![vec![false; n]; n];
        for i in 0..n {
            for j in 0..n {
                reach[i][j] = i == j || (core[i] && core[j] && near(i, j));
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if reach[i][k] && reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
        let mut clusters: Vec<BTreeSet<usize>> = Vec::new();
        for i in (0..n).filter(|&i| core[i]) {
            if clusters.iter().any(|c| c.contains(&i)) {
                continue;
            }
            let mut c: BTreeSet<usize> = (0..n).filter(|&j| core[j] && reach[i][j]).collect();
            let border: Vec<usize> = (0..n).filter(|&j| !core[j] && c.iter().any(|&m| near(m, j))).collect();
            c.extend(border);
            clusters.push(c);
        }
        let noise = (0..n).filter(|i| !clusters.iter().any(|c| c.contains(i))).collect();
        (clusters, noise)
    }

    #[test]
    fn two_pairs_and_two_outliers() {
        let angles = [0.0, 2.0, 90.0, 92.0, 180.0, 250.0];
        let recs: Vec<_> = angles.iter().enumerate().map(|(i, a)| record("g", &format!("n{i}"), unit(*a))).collect();
        let c = cluster_nodes(&recs, 0.01, 2).unwrap();
        assert_eq!(c.clusters.len(), 2);
        assert_eq!(c.noise.len(), 2);
        let points: Vec<_> = angles.iter().map(|a| unit(*a)).collect();
        let (oracle, oracle_noise) = oracle_partition(&points, 0.01, 2);
        let as_ids = |s: &BTreeSet<usize>| s.iter().map(|i| ("g".to_string(), format!("n{i}"))).collect::<BTreeSet<_>>();
        let mut expected: Vec<_> = oracle.iter().map(as_ids).collect();
        expected.sort();
        let mut got: Vec<_> = c.clusters.iter().map(|c| c.members.clone()).collect();
        got.sort();
        assert_eq!(got, expected);
        assert_eq!(c.noise, as_ids(&oracle_noise));
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(matches!(
            cluster_nodes(&[record("g", "a", vec![1.0]), record("g", "b", vec![1.0, 0.0])], 0.1, 1),
            Err(MergeError::DimensionMismatch { .. })
        ));
        assert!(cluster_nodes(&[], 0.0, 1).is_err());
        assert!(cluster_nodes(&[], 0.1, 0).is_err());
    }

    fn by_description(g: &CausalGraph) -> BTreeSet<(String, String)> {
        g.edges()
            .iter()
            .map(|e| {
                let d = |id: &str| g.node(id).unwrap().description.chars().next().unwrap().to_string();
                (d(&e.source_node_id), d(&e.target_node_id))
            })
            .collect()
    }

    fn merge_clusters(m1: &CausalGraph, m2: &CausalGraph) -> Vec<Cluster> {
        vec![Cluster::new([
            (m1.graph_id().to_string(), "Z".to_string()),
            (m2.graph_id().to_string(), "Z".to_string()),
        ])]
    }

    #[test]
    fn summarise_collapses_shared_node() {
        let (m1, m2) = fixtures::merge_pair();
        let r = merge_summarise(&[m1.clone(), m2.clone()], &merge_clusters(&m1, &m2));
        assert_eq!(r.graph.nodes().len(), 5);
        assert!(r.graph.validate().is_ok());
        let expected: BTreeSet<(String, String)> =
            [("H", "H"), ("R", "H"), ("C", "R"), ("R", "M")].iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        assert_eq!(by_description(&r.graph), expected);
        let z = r.graph.nodes().iter().filter(|n| n.description.starts_with("Regional")).count();
        assert_eq!(z, 1);
    }

    #[test]
    fn no_clusters_is_a_disjoint_union() {
        let (m1, m2) = fixtures::merge_pair();
        for r in [merge_summarise(&[m1.clone(), m2.clone()], &[]), merge_analogy(&[m1.clone(), m2.clone()], &[])] {
            assert_eq!(r.graph.nodes().len(), 6);
            assert_eq!(r.graph.edges().len(), 4);
        }
    }

    #[test]
    fn summarise_drops_cycle_closing_edge() {
        let g1 = CausalGraph::new(
            vec![VariableNode::observed("X", "x one"), VariableNode::observed("Z", "zed")],
            vec![CausalEdge::new("X", "Z")],
        );
        let g2 = CausalGraph::new(
            vec![VariableNode::observed("X", "x two"), VariableNode::observed("Z", "zed")],
            vec![CausalEdge::new("Z", "X")],
        );
        let clusters = vec![
            Cluster::new([(g1.graph_id().into(), "Z".into()), (g2.graph_id().into(), "Z".into())]),
            Cluster::new([(g1.graph_id().into(), "X".into()), (g2.graph_id().into(), "X".into())]),
        ];
        let r = merge_summarise(&[g1, g2], &clusters);
        assert!(r.graph.validate().is_ok());
        assert_eq!(r.dropped_edges.len(), 1);
        assert_eq!(r.log.iter().filter(|l| l.contains("close a cycle")).count(), 1);
    }

    #[test]
    fn analogy_adds_hidden_ancestor() {
        let (m1, m2) = fixtures::merge_pair();
        let r = merge_analogy(&[m1.clone(), m2.clone()], &merge_clusters(&m1, &m2));
        assert_eq!(r.graph.nodes().len(), 7);
        assert!(r.graph.validate().is_ok());
        let u = r.graph.node("u0").unwrap();
        assert!(u.is_hidden());
        assert!(r.graph.parents("u0").unwrap().is_empty());
        assert_eq!(r.graph.children("u0").unwrap().len(), 2);
        for (g, ns) in [(&m1, m1.graph_id()), (&m2, m2.graph_id())] {
            for e in g.edges() {
                assert!(r.graph.edge(&format!("{ns}:{}", e.source_node_id), &format!("{ns}:{}", e.target_node_id)).is_some());
            }
        }
    }

    #[test]
    fn hidden_members_get_no_parent() {
        let g = |i: usize| {
            CausalGraph::new(
                vec![VariableNode::hidden("h", "mood"), VariableNode::observed("o", format!("own {i}"))],
                vec![CausalEdge::new("h", "o")],
            )
        };
        let (g1, g2) = (g(1), g(2));
        let both_hidden = Cluster::new([(g1.graph_id().into(), "h".into()), (g2.graph_id().into(), "h".into())]);
        let r = merge_analogy(&[g1.clone(), g2.clone()], &[both_hidden]);
        assert!(r.graph.validate().is_ok());
        assert_eq!(r.graph.nodes().len(), 4);
        assert_eq!(r.log, ["2 hidden cluster member(s) keep no new parent"]);

        let mixed = Cluster::new([(g1.graph_id().into(), "o".into()), (g2.graph_id().into(), "o".into())]);
        let r = merge_analogy(&[g1, g2], &[mixed]);
        assert_eq!(r.graph.nodes().len(), 5);
        assert_eq!(r.graph.children("u0").unwrap().len(), 2);
    }

    #[test]
    fn three_way_cluster_gets_one_ancestor() {
        let gs: Vec<CausalGraph> = (0..3)
            .map(|i| {
                CausalGraph::new(
                    vec![VariableNode::observed("S", "shared"), VariableNode::observed("o", format!("own {i}"))],
                    vec![CausalEdge::new("o", "S")],
                )
            })
            .collect();
        let cluster = Cluster::new(gs.iter().map(|g| (g.graph_id().to_string(), "S".to_string())));
        let r = merge_analogy(&gs, &[cluster]);
        let hidden: Vec<_> = r.graph.hidden_nodes().collect();
        assert_eq!(hidden.len(), 1);
        assert_eq!(r.graph.children(&hidden[0].node_id).unwrap().len(), 3);
    }

    #[test]
    fn orchestrated_merge_finds_the_shared_node() {
        let (m1, m2) = fixtures::merge_pair();
        let gw = Gateway::mock(MockProvider::new());
        let options = MergeOptions { depth: 0, ..MergeOptions::default() };
        let report = merge_graphs(&gw, &[m1.clone(), m2.clone()], options).unwrap();
        assert_eq!(report.result.graph.nodes().len(), 5);
        let analogy = merge_graphs(&gw, &[m1, m2], MergeOptions { strategy: Strategy::Analogy, ..options }).unwrap();
        assert_eq!(analogy.result.graph.nodes().len(), 7);
    }

    #[test]
    fn clustering_ignores_record_order() {
        let (m1, m2) = fixtures::merge_pair();
        let gw = Gateway::mock(MockProvider::new());
        let mut records = embed_nodes(&gw, &[m1, m2], 1, false).unwrap();
        let a = cluster_nodes(&records, 0.15, 1).unwrap();
        records.reverse();
        assert_eq!(cluster_nodes(&records, 0.15, 1).unwrap(), a);
    }
}
