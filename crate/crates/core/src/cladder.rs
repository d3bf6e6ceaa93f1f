//! Benchmark harness for the counterfactual subset of Cladder.
//!
//! Dataset records are JSON objects (an array, an object with a `queries`
//! array, or one object per line):
//!
//! ```json
//! {"query_id": "17", "context": "...", "question": "Would ...?",
//!  "gold_answer": "yes", "commonsense_class": "nonsensical",
//!  "rung_tag": "det-counterfactual"}
//! ```
//!
//! The original Cladder field names (`question_id`, `given_info`, `answer`,
//! `sensical` as 1/0/-1, `query_type`) are accepted too.

use crate::counterfactual::{self, answer_query, CounterfactualOptions, CounterfactualRun};
use crate::evaluation::{
    categorize, graph_distance, GraphDistance, GraphStage, InferenceStage, OutcomeCategory, PartitionCounts,
    StageRecord, REPORT_SCHEMA_VERSION,
};
use crate::extraction::{extract_graph, ExtractionOptions, ExtractionOutcome, ExtractionRun};
use crate::graph::{CausalEdge, CausalGraph, Intervention, VariableNode};
use crate::llm::parse::{field_string, RecordParser};
use crate::llm::{Gateway, LlmError, StructuredRequest};
use crate::world::WorldState;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use thiserror::Error;

pub const COUNTERFACTUAL_RUNG: &str = "det-counterfactual";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommonsenseClass {
    Commonsense,
    Nonsensical,
    Anticommonsense,
}

impl CommonsenseClass {
    pub const ALL: [CommonsenseClass; 3] = [Self::Commonsense, Self::Nonsensical, Self::Anticommonsense];

    fn from_value(v: &Value) -> Option<Self> {
        match v {
            Value::Number(n) => match n.as_i64()? {
                1 => Some(Self::Commonsense),
                0 => Some(Self::Nonsensical),
                -1 => Some(Self::Anticommonsense),
                _ => None,
            },
            Value::String(s) if s.trim() == "-1" => Some(Self::Anticommonsense),
            Value::String(s) => match s.trim().to_lowercase().replace(['-', '_', ' '], "").as_str() {
                "commonsense" | "sensical" | "1" => Some(Self::Commonsense),
                "nonsensical" | "nonsense" | "0" => Some(Self::Nonsensical),
                "anticommonsense" | "anticommon" => Some(Self::Anticommonsense),
                _ => None,
            },
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CladderQuery {
    pub query_id: String,
    pub context: String,
    pub question: String,
    /// `true` for a "yes" gold answer.
    #[serde(with = "yes_no")]
    pub gold_answer: bool,
    pub commonsense_class: CommonsenseClass,
    pub rung_tag: String,
}

mod yes_no {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(if *v { "yes" } else { "no" })
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        super::gold_from_value(&v).ok_or_else(|| serde::de::Error::custom("expected yes or no"))
    }
}

fn gold_from_value(v: &Value) -> Option<bool> {
    match v {
        Value::Bool(b) => Some(*b),
        Value::String(s) => match s.trim().to_lowercase().as_str() {
            "yes" | "true" => Some(true),
            "no" | "false" => Some(false),
            _ => None,
        },
        _ => None,
    }
}

fn first<'a>(m: &'a Map<String, Value>, keys: &[&str]) -> Option<&'a Value> {
    keys.iter().find_map(|k| m.get(*k).filter(|v| !v.is_null()))
}

fn text_field(m: &Map<String, Value>, keys: &[&str]) -> Result<String, String> {
    match first(m, keys) {
        Some(Value::String(s)) if !s.trim().is_empty() => Ok(s.trim().to_string()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        Some(_) => Err(format!("`{}` must be a non-empty string", keys[0])),
        None => Err(format!("missing `{}`", keys[0])),
    }
}

fn parse_record(v: &Value) -> Result<CladderQuery, String> {
    let m = v.as_object().ok_or("record is not an object")?;
    let gold = first(m, &["gold_answer", "answer", "label"]).ok_or("missing `gold_answer`")?;
    let class = first(m, &["commonsense_class", "sensical", "commonsense"]).ok_or("missing `commonsense_class`")?;
    Ok(CladderQuery {
        query_id: text_field(m, &["query_id", "question_id", "id"])?,
        context: text_field(m, &["context", "given_info"])?,
        question: text_field(m, &["question"])?,
        gold_answer: gold_from_value(gold).ok_or("`gold_answer` must be yes or no")?,
        commonsense_class: CommonsenseClass::from_value(class).ok_or("unknown `commonsense_class`")?,
        rung_tag: text_field(m, &["rung_tag", "query_type"])?,
    })
}

/// Numeric ids compare numerically, everything else as text.
pub fn compare_ids(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        _ => a.cmp(b),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub queries: Vec<CladderQuery>,
    /// Malformed records.
    pub skipped: Vec<SkippedRecord>,
    /// Well-formed records of another rung.
    pub excluded: usize,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("dataset is not JSON: {0}")]
    Format(String),
}

/// Parses dataset text, keeping counterfactual records ordered by id.
pub fn parse_dataset(text: &str) -> Result<Dataset, DatasetError> {
    let values: Vec<Value> = match serde_json::from_str::<Value>(text) {
        Ok(Value::Array(items)) => items,
        Ok(Value::Object(mut m)) => match m.remove("queries") {
            Some(Value::Array(items)) => items,
            _ => vec![Value::Object(m)],
        },
        Ok(_) => return Err(DatasetError::Format("expected an array or object".into())),
        Err(whole) => {
            let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
            if lines.len() < 2 {
                return Err(DatasetError::Format(whole.to_string()));
            }
            lines.iter().map(|l| serde_json::from_str(l).unwrap_or(Value::Null)).collect()
        }
    };
    let mut queries = Vec::new();
    let mut skipped = Vec::new();
    let mut excluded = 0;
    for (index, v) in values.iter().enumerate() {
        match parse_record(v) {
            Ok(q) if q.rung_tag == COUNTERFACTUAL_RUNG => queries.push(q),
            Ok(_) => excluded += 1,
            Err(reason) => {
                log::warn!("skipping dataset record {index}: {reason}");
                skipped.push(SkippedRecord { index, reason });
            }
        }
    }
    queries.sort_by(|a, b| compare_ids(&a.query_id, &b.query_id));
    Ok(Dataset { queries, skipped, excluded })
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.into(), source })?;
    parse_dataset(&text)
}

/// A reproducible subset of `n` queries, returned in id order.
pub fn sample_queries(queries: &[CladderQuery], n: usize, seed: u64) -> Vec<CladderQuery> {
    use rand::seq::IndexedRandom;
    use rand::SeedableRng;
    if n >= queries.len() {
        return queries.to_vec();
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<CladderQuery> = queries.choose_multiple(&mut rng, n).cloned().collect();
    picked.sort_by(|a, b| compare_ids(&a.query_id, &b.query_id));
    picked
}

const MATCH_STOPWORDS: &[&str] = &["lives", "person", "people", "have", "has", "gets", "get", "being"];

fn stem(token: &str) -> String {
    let t = token.strip_prefix("non").filter(|r| r.len() >= 4).unwrap_or(token);
    let t = t.strip_suffix('s').filter(|r| r.len() >= 3).unwrap_or(t);
    t.to_string()
}

fn phrase_stems(text: &str) -> BTreeSet<String> {
    counterfactual::content(&counterfactual::tokens(text))
        .into_iter()
        .filter(|t| !MATCH_STOPWORDS.contains(&t.as_str()))
        .map(|t| stem(&t))
        .collect()
}

fn stems_match(a: &str, b: &str) -> bool {
    a == b || (a.len() >= 5 && b.len() >= 5 && a[..5] == b[..5])
}

/// Index of the name that best matches a value phrase: most shared content
/// words, then names contained verbatim in the phrase, then first listed.
pub fn match_phrase<S: AsRef<str>>(names: &[S], phrase: &str) -> Option<usize> {
    let p = phrase_stems(phrase);
    let lower = phrase.to_lowercase();
    names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let n = phrase_stems(name.as_ref());
            let shared = n.iter().filter(|s| p.iter().any(|t| stems_match(s, t))).count();
            let verbatim = lower.contains(&name.as_ref().to_lowercase());
            (i, shared, verbatim)
        })
        .filter(|(_, shared, _)| *shared > 0)
        .max_by(|a, b| a.1.cmp(&b.1).then(a.2.cmp(&b.2)).then(b.0.cmp(&a.0)))
        .map(|(i, _, _)| i)
}

/// Node id in `graph` matching a phrase by description.
pub fn match_node(graph: &CausalGraph, phrase: &str) -> Option<String> {
    let names: Vec<&str> = graph.nodes().iter().map(|n| n.description.as_str()).collect();
    match_phrase(&names, phrase).map(|i| graph.nodes()[i].node_id.clone())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot parse context clause `{clause}`: {reason}")]
pub struct ContextParseError {
    pub clause: String,
    pub reason: String,
}

/// Graph, observed values and stated mechanisms read from a templated context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub graph: CausalGraph,
    /// Node id → observed phrase, hidden nodes included.
    pub observations: BTreeMap<String, String>,
    pub mechanisms: Vec<String>,
}

impl GroundTruth {
    pub fn world(&self) -> WorldState {
        WorldState::from_graph(self.graph.clone())
            .with_observations(self.observations.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }
}

fn capitalise(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn split_list(s: &str) -> Vec<String> {
    s.split(", ")
        .flat_map(|part| part.split(" and "))
        .map(|p| p.trim().trim_start_matches("and ").trim().to_string())
        .filter(|p| !p.is_empty())
        .collect()
}

fn regexes() -> &'static (Regex, Regex, Regex, Regex) {
    static R: OnceLock<(Regex, Regex, Regex, Regex)> = OnceLock::new();
    R.get_or_init(|| {
        (
            Regex::new(r"^(?P<cause>.+?) has a direct effect on (?P<effects>.+)$").unwrap(),
            Regex::new(r"^(?P<name>.+?) is unobserved$").unwrap(),
            Regex::new(r"^(?P<causes>.+?) causes (?P<effect>.+)$").unwrap(),
            Regex::new(r"(?i)^\s*(?:would|will|does|did|is|was|could)\s+(?P<target>.+?)\s+if\s+(?P<cf>.+?)\s+instead of\s+(?P<fact>.+?)\s*\?*\s*$")
                .unwrap(),
        )
    })
}

/// Reads the graph a Cladder context describes. Clauses: `X has a direct
/// effect on Y[, Z] and W`, `X is unobserved`, `We know that A or B causes
/// C` (following `... causes ...` sentences too) and `We observed A and B`.
pub fn parse_ground_truth_graph(context: &str) -> Result<GroundTruth, ContextParseError> {
    let (edge_re, hidden_re, mech_re, _) = regexes();
    let body = match context.trim().find("relationships:") {
        Some(i) if context.trim_start().starts_with("Imagine") => &context.trim()[i + "relationships:".len()..],
        _ => context.trim(),
    };
    let mut names: Vec<String> = Vec::new();
    let mut display: Vec<String> = Vec::new();
    let mut intern = |name: &str, names: &mut Vec<String>| -> usize {
        let key = name.trim().to_lowercase();
        if let Some(i) = names.iter().position(|n| *n == key) {
            return i;
        }
        names.push(key);
        display.push(capitalise(name.trim()));
        names.len() - 1
    };
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut hidden = BTreeSet::new();
    let mut mechanisms = Vec::new();
    let mut observed_phrases = Vec::new();
    let bad = |clause: &str, reason: &str| ContextParseError { clause: clause.into(), reason: reason.into() };
    for sentence in body.trim().trim_end_matches('.').split(". ").map(str::trim).filter(|s| !s.is_empty()) {
        if let Some(c) = edge_re.captures(sentence) {
            let cause = intern(&c["cause"], &mut names);
            for effect in split_list(&c["effects"]) {
                let e = intern(&effect, &mut names);
                if e == cause {
                    return Err(bad(sentence, "variable affects itself"));
                }
                if !edges.contains(&(cause, e)) {
                    edges.push((cause, e));
                }
            }
        } else if let Some(c) = hidden_re.captures(sentence) {
            hidden.insert(intern(&c["name"], &mut names));
        } else if let Some(rest) = sentence.strip_prefix("We observed ") {
            observed_phrases.extend(split_list(rest));
        } else {
            let s = sentence.strip_prefix("We know that ").unwrap_or(sentence);
            if mech_re.is_match(s) {
                mechanisms.push(s.to_string());
            } else {
                return Err(bad(sentence, "unrecognised clause"));
            }
        }
    }
    if names.is_empty() {
        return Err(bad(context, "no variables"));
    }
    if let Some(&(s, _)) = edges.iter().find(|(_, t)| hidden.contains(t)) {
        return Err(bad(&display[s], "an unobserved variable has a cause"));
    }
    let ids: Vec<String> = (0..names.len()).map(|i| format!("v{i}")).collect();
    let mut context_notes: Vec<Vec<String>> = vec![Vec::new(); names.len()];
    for m in &mechanisms {
        let effect = &mech_re.captures(m).expect("matched before")["effect"];
        match match_phrase(&display, effect) {
            Some(i) => context_notes[i].push(m.clone()),
            None => context_notes.iter_mut().for_each(|n| n.push(m.clone())),
        }
    }
    let mut observations = BTreeMap::new();
    for phrase in observed_phrases {
        let i = match_phrase(&display, &phrase).ok_or_else(|| bad(&phrase, "observation names no variable"))?;
        observations.insert(ids[i].clone(), phrase);
    }
    let nodes = (0..names.len())
        .map(|i| {
            let node = if hidden.contains(&i) {
                VariableNode::hidden(ids[i].clone(), display[i].clone())
            } else {
                VariableNode::observed(ids[i].clone(), display[i].clone())
            };
            node.with_type("bool").with_context(context_notes[i].join(". "))
        })
        .collect();
    let edges = edges
        .iter()
        .map(|&(s, t)| {
            let mut e = CausalEdge::new(ids[s].clone(), ids[t].clone());
            e.details = context_notes[t].join(". ");
            e
        })
        .collect();
    let graph = CausalGraph::new(nodes, edges);
    let v = graph.validate();
    if !v.is_ok() {
        let tags: Vec<&str> = v.violations.iter().map(|x| x.tag()).collect();
        return Err(bad(context, &format!("graph is invalid: {}", tags.join(", "))));
    }
    Ok(GroundTruth { graph, observations, mechanisms })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedQuestion {
    /// The outcome the question asks about, e.g. `the employee has a high salary`.
    pub target: String,
    /// The hypothetical condition (`if` arm).
    pub counterfactual: String,
    /// The condition it replaces (`instead of` arm).
    pub factual: String,
    /// Obtained from the model rather than the template.
    pub fallback: bool,
}

/// `Would <target> if <counterfactual> instead of <factual>?`
pub fn parse_question(question: &str) -> Option<ParsedQuestion> {
    let c = regexes().3.captures(question.trim())?;
    Some(ParsedQuestion {
        target: c["target"].trim().to_string(),
        counterfactual: c["cf"].trim().to_string(),
        factual: c["fact"].trim().to_string(),
        fallback: false,
    })
}

pub const QUESTION_SYSTEM: &str = "Your task is to split a counterfactual question into its parts: the outcome it asks about, the hypothetical condition it assumes, and the actual condition that the hypothetical one replaces. Copy the phrases from the question. Follow strictly the provided format.\nFormat:\n{\"outcome\": \"<outcome phrase>\", \"counterfactual\": \"<hypothetical condition>\", \"factual\": \"<actual condition>\"}";

/// Template parse, falling back to asking the model.
pub fn extract_question(gateway: &Gateway, question: &str) -> Result<(ParsedQuestion, Option<StructuredRequest>), LlmError> {
    if let Some(p) = parse_question(question) {
        return Ok((p, None));
    }
    let mut request = gateway.structured(QUESTION_SYSTEM, question.to_string(), gateway.options().inference_temperature);
    let parser = RecordParser::new(&["outcome", "counterfactual", "factual"], |m: &Map<String, Value>| {
        let get = |k: &str| field_string(m, k).filter(|v| !v.is_empty()).ok_or(format!("missing `{k}`"));
        Ok(ParsedQuestion { target: get("outcome")?, counterfactual: get("counterfactual")?, factual: get("factual")?, fallback: true })
    });
    let parsed = gateway.complete_structured(&mut request, &parser)?;
    Ok((parsed.value, Some(request)))
}

/// Target node and intervention for a parsed question on `graph`.
pub fn question_setup(graph: &CausalGraph, q: &ParsedQuestion) -> Result<(String, Intervention), String> {
    let target = match_node(graph, &q.target).ok_or_else(|| format!("no variable matches `{}`", q.target))?;
    let intervened = match_node(graph, &q.counterfactual)
        .or_else(|| match_node(graph, &q.factual))
        .ok_or_else(|| format!("no variable matches `{}`", q.counterfactual))?;
    Ok((target, Intervention::new().set(intervened, q.counterfactual.clone())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkMode {
    /// The model builds the graph from the context.
    Discovery,
    /// The graph is parsed from the context; the model only predicts.
    GroundTruth,
}

impl std::str::FromStr for BenchmarkMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "discovery" => Ok(Self::Discovery),
            "ggt" | "gt" | "ground_truth" | "ground-truth" => Ok(Self::GroundTruth),
            other => Err(format!("unknown mode `{other}` (expected discovery or ggt)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkOptions {
    pub mode: BenchmarkMode,
    pub counterfactual: CounterfactualOptions,
    pub extraction: ExtractionOptions,
    /// In ground-truth mode, build the graph with the model when the context
    /// cannot be parsed instead of recording an unknown error.
    pub route_unparsed_to_discovery: bool,
    /// Per-query records are written here and reused on later runs.
    pub cache_dir: Option<PathBuf>,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self {
            mode: BenchmarkMode::Discovery,
            counterfactual: CounterfactualOptions::default(),
            extraction: ExtractionOptions::default(),
            route_unparsed_to_discovery: false,
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub commonsense_class: CommonsenseClass,
    pub mode: BenchmarkMode,
    pub stages: StageRecord,
    pub category: OutcomeCategory,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub question: Option<ParsedQuestion>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intervention: Option<Intervention>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_node: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_value: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph_id: Option<String>,
    /// Distance from the built graph to the parsed ground truth.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distance: Option<GraphDistance>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub llm_calls: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extraction: Option<ExtractionRun>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub question_request: Option<StructuredRequest>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run: Option<CounterfactualRun>,
}

impl QueryRecord {
    fn new(q: &CladderQuery, mode: BenchmarkMode) -> Self {
        Self {
            query_id: q.query_id.clone(),
            commonsense_class: q.commonsense_class,
            mode,
            stages: StageRecord {
                graph: GraphStage::Given,
                inference: InferenceStage::NotRun,
                answer: None,
                gold: Some(q.gold_answer),
                unknown_error: false,
            },
            category: OutcomeCategory::UnknownError,
            question: None,
            intervention: None,
            target_node: None,
            target_value: None,
            graph_id: None,
            distance: None,
            error: None,
            llm_calls: 0,
            extraction: None,
            question_request: None,
            run: None,
        }
    }

    /// Calls are counted from the kept transcripts, so a failed prediction
    /// run contributes none.
    fn finish(mut self) -> Self {
        self.category = categorize(&self.stages);
        self.llm_calls = self.extraction.as_ref().map_or(0, |e| e.transcript.parse_attempts.len())
            + self.question_request.as_ref().map_or(0, |r| r.parse_attempts.len())
            + self.run.as_ref().map_or(0, |r| r.llm_calls);
        self
    }

    fn unknown(mut self, error: impl ToString) -> Self {
        self.stages.unknown_error = true;
        self.error = Some(error.to_string());
        self
    }
}

fn extraction_stage(run: &ExtractionRun) -> GraphStage {
    match run.outcome {
        ExtractionOutcome::OkFormatted => GraphStage::Extracted { fallback: false },
        ExtractionOutcome::OkParsed => GraphStage::Extracted { fallback: true },
        ExtractionOutcome::ParseError => GraphStage::ParseError,
        ExtractionOutcome::BuildError => GraphStage::BuildError,
        ExtractionOutcome::CycleError => GraphStage::CycleError,
    }
}

/// Runs one query end to end. Never fails: every problem ends up as a
/// category on the record.
pub fn run_query(gateway: &Gateway, query: &CladderQuery, options: &BenchmarkOptions) -> QueryRecord {
    let mut rec = QueryRecord::new(query, options.mode);
    let truth = parse_ground_truth_graph(&query.context);
    let use_truth = options.mode == BenchmarkMode::GroundTruth && truth.is_ok();
    if options.mode == BenchmarkMode::GroundTruth && !use_truth && !options.route_unparsed_to_discovery {
        let e = truth.expect_err("checked");
        return rec.unknown(e).finish();
    }
    let world = if use_truth {
        let gt = truth.as_ref().expect("checked");
        rec.graph_id = Some(gt.graph.graph_id().to_string());
        gt.world()
    } else {
        let run = match extract_graph(gateway, &query.context, options.extraction) {
            Ok(run) => run,
            Err(e) => return rec.unknown(e).finish(),
        };
        rec.stages.graph = extraction_stage(&run);
        rec.error = run.error.clone();
        let graph = run.graph.clone();
        rec.extraction = Some(run);
        let Some(graph) = graph else {
            return rec.finish();
        };
        rec.graph_id = Some(graph.graph_id().to_string());
        if let Ok(gt) = &truth {
            rec.distance = Some(graph_distance(&graph, &gt.graph));
        }
        WorldState::from_graph(graph)
    };
    let (question, request) = match extract_question(gateway, &query.question) {
        Ok(q) => q,
        Err(e) => return rec.unknown(format!("question: {e}")).finish(),
    };
    rec.question_request = request;
    rec.question = Some(question.clone());
    let (target, iv) = match question_setup(&world.graph, &question) {
        Ok(x) => x,
        Err(e) => {
            rec.stages.inference = InferenceStage::Error;
            rec.error = Some(e);
            return rec.finish();
        }
    };
    rec.intervention = Some(iv.clone());
    rec.target_node = Some(target.clone());
    match answer_query(gateway, &world, &iv, &target, &question.target, options.counterfactual) {
        Ok(a) => {
            let fallback = a.used_fallback || a.run.used_fallback || question.fallback;
            rec.stages.inference = InferenceStage::Ok { fallback };
            rec.stages.answer = Some(a.answer);
            rec.target_value = Some(a.target_value);
            rec.run = Some(a.run);
        }
        Err(e) => {
            rec.stages.inference = if e.is_parse_failure() { InferenceStage::ParseError } else { InferenceStage::Error };
            rec.error = Some(e.to_string());
        }
    }
    rec.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub correct: usize,
    pub answered: usize,
    /// Percentage; absent when nothing was answered.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyBlock {
    pub overall: ClassAccuracy,
    pub by_class: BTreeMap<CommonsenseClass, ClassAccuracy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GedBlock {
    pub graphs: usize,
    pub ged: f64,
    pub iou_ged: f64,
    pub ged_topology: f64,
    pub iou_ged_topology: f64,
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub schema_version: u32,
    pub mode: BenchmarkMode,
    pub provider: String,
    pub chat_model: String,
    pub queries: usize,
    pub accuracy: AccuracyBlock,
    pub partition: PartitionCounts,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ged: Option<GedBlock>,
    pub records: Vec<QueryRecord>,
}

fn class_accuracy<'a>(records: impl Iterator<Item = &'a QueryRecord>) -> ClassAccuracy {
    let mut p = PartitionCounts::default();
    records.for_each(|r| p.add(r.category));
    ClassAccuracy { correct: p.correct(), answered: p.denominator(), accuracy: p.accuracy() }
}

pub fn summarise(records: Vec<QueryRecord>, mode: BenchmarkMode, provider: &str, chat_model: &str) -> BenchmarkReport {
    let mut partition = PartitionCounts::default();
    records.iter().for_each(|r| partition.add(r.category));
    let by_class = CommonsenseClass::ALL
        .iter()
        .map(|c| (*c, class_accuracy(records.iter().filter(|r| r.commonsense_class == *c))))
        .collect();
    let distances: Vec<&GraphDistance> = records.iter().filter_map(|r| r.distance.as_ref()).collect();
    let ged = (!distances.is_empty()).then(|| {
        let mean = |f: fn(&GraphDistance) -> usize| distances.iter().map(|d| f(d) as f64).sum::<f64>() / distances.len() as f64;
        GedBlock {
            graphs: distances.len(),
            ged: mean(|d| d.ged),
            iou_ged: mean(|d| d.iou_ged),
            ged_topology: mean(|d| d.ged_topology),
            iou_ged_topology: mean(|d| d.iou_ged_topology),
            exact: distances.iter().all(|d| d.exact),
        }
    });
    BenchmarkReport {
        schema_version: REPORT_SCHEMA_VERSION,
        mode,
        provider: provider.into(),
        chat_model: chat_model.into(),
        queries: records.len(),
        accuracy: AccuracyBlock { overall: class_accuracy(records.iter()), by_class },
        partition,
        ged,
        records,
    }
}

fn cache_path(dir: &Path, query_id: &str) -> PathBuf {
    let safe: String = query_id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect();
    dir.join(format!("{safe}.json"))
}

fn cached(dir: &Path, q: &CladderQuery, mode: BenchmarkMode) -> Option<QueryRecord> {
    let text = std::fs::read_to_string(cache_path(dir, &q.query_id)).ok()?;
    let rec: QueryRecord = serde_json::from_str(&text).ok()?;
    (rec.query_id == q.query_id && rec.mode == mode).then_some(rec)
}

fn run_cached(gateway: &Gateway, q: &CladderQuery, options: &BenchmarkOptions) -> QueryRecord {
    if let Some(dir) = &options.cache_dir {
        if let Some(rec) = cached(dir, q, options.mode) {
            log::debug!("query {} reused from cache", q.query_id);
            return rec;
        }
    }
    let rec = run_query(gateway, q, options);
    if let Some(dir) = &options.cache_dir {
        let written = std::fs::create_dir_all(dir).and_then(|_| {
            std::fs::write(cache_path(dir, &q.query_id), serde_json::to_string(&rec).expect("record serialises"))
        });
        if let Err(e) = written {
            log::warn!("cannot cache query {}: {e}", q.query_id);
        }
    }
    rec
}

#[cfg(feature = "parallel")]
fn run_all(gateway: &Gateway, queries: &[CladderQuery], options: &BenchmarkOptions) -> Vec<QueryRecord> {
    use rayon::prelude::*;
    queries.par_iter().map(|q| run_cached(gateway, q, options)).collect()
}

#[cfg(not(feature = "parallel"))]
fn run_all(gateway: &Gateway, queries: &[CladderQuery], options: &BenchmarkOptions) -> Vec<QueryRecord> {
    queries.iter().map(|q| run_cached(gateway, q, options)).collect()
}

/// Runs every query and aggregates the report. Records keep query order.
pub fn run_benchmark(gateway: &Gateway, queries: &[CladderQuery], options: &BenchmarkOptions) -> BenchmarkReport {
    let records = run_all(gateway, queries, options);
    summarise(records, options.mode, gateway.provider_name(), &gateway.options().chat_model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::llm::MockProvider;

    #[test]
    fn figure_five_context() {
        let gt = parse_ground_truth_graph(fixtures::COFFEE_CONTEXT).unwrap();
        let g = &gt.graph;
        assert_eq!(g.nodes().len(), 4);
        let id = |d: &str| match_node(g, d).unwrap();
        let (h, p, c, s) = (id("confounders"), id("college"), id("coffee"), id("salary"));
        assert!(g.node(&h).unwrap().is_hidden());
        let edges: BTreeSet<(String, String)> =
            g.edges().iter().map(|e| (e.source_node_id.clone(), e.target_node_id.clone())).collect();
        let expected: BTreeSet<(String, String)> =
            [(&h, &c), (&h, &s), (&p, &c), (&c, &s)].iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        assert_eq!(edges, expected);
        assert!(gt.observations[&p].contains("close"));
        assert!(gt.observations[&h].contains("inactive"));
        assert_eq!(gt.observations.len(), 2);
        assert_eq!(gt.mechanisms.len(), 2);
        assert!(g.node(&s).unwrap().context.contains("causes high salary"));
        let graph_equal = fixtures::coffee_ground_truth();
        assert_eq!(crate::evaluation::ged(g, &graph_equal, crate::evaluation::GedMode::Topology).distance, 0);
    }

    #[test]
    fn small_contexts() {
        let gt = parse_ground_truth_graph("A has a direct effect on B.").unwrap();
        assert_eq!((gt.graph.nodes().len(), gt.graph.edges().len()), (2, 1));
        let gt = parse_ground_truth_graph("Xyz has a direct effect on alpha and beta. Alpha has a direct effect on beta.").unwrap();
        assert_eq!(gt.graph.edges().len(), 3);
        let fan = parse_ground_truth_graph("Q has a direct effect on r, s and t.").unwrap();
        assert_eq!(fan.graph.edges().len(), 3);
        assert!(parse_ground_truth_graph("The weather is nice.").is_err());
        assert!(parse_ground_truth_graph("A has a direct effect on B. B is unobserved.").is_err());
    }

    #[test]
    fn questions() {
        let q = parse_question(fixtures::COFFEE_QUESTION).unwrap();
        assert_eq!(q.target, "the employee has a high salary");
        assert_eq!(q.counterfactual, "drinking coffee");
        assert_eq!(q.factual, "not drinking coffee");
        let gt = parse_ground_truth_graph(fixtures::COFFEE_CONTEXT).unwrap();
        let (target, iv) = question_setup(&gt.graph, &q).unwrap();
        assert_eq!(gt.graph.node(&target).unwrap().description, "Salary");
        let (node, value) = iv.assignments.iter().next().unwrap();
        assert_eq!(gt.graph.node(node).unwrap().description, "Drinking coffee");
        assert_eq!(value, "drinking coffee");
        assert!(parse_question("What is the salary?").is_none());
    }

    #[test]
    fn question_fallback_asks_the_model() {
        let gw = Gateway::mock(MockProvider::new().with_default(
            r#"{"outcome": "high salary", "counterfactual": "drinking coffee", "factual": "no coffee"}"#,
        ));
        let (q, req) = extract_question(&gw, "Suppose coffee were drunk: high salary?").unwrap();
        assert!(q.fallback);
        assert!(req.is_some());
    }

    #[test]
    fn phrase_matching() {
        let names = ["Smoking", "Tar deposit", "Lung cancer"];
        assert_eq!(match_phrase(&names, "nonsmoking"), Some(0));
        assert_eq!(match_phrase(&names, "no tar deposit"), Some(1));
        assert_eq!(match_phrase(&names, "the person has lung cancer"), Some(2));
        assert_eq!(match_phrase(&names, "weather"), None);
    }

    const MIXED: &str = r#"[
        {"query_id": "10", "context": "A has a direct effect on B.", "question": "Would b if a instead of not a?", "gold_answer": "yes", "commonsense_class": "nonsensical", "rung_tag": "det-counterfactual"},
        {"question_id": 2, "given_info": "A has a direct effect on B.", "question": "Would b if a instead of not a?", "answer": "no", "sensical": -1, "query_type": "det-counterfactual"},
        {"query_id": "3", "context": "A has a direct effect on B.", "question": "Would b?", "gold_answer": "no", "commonsense_class": "commonsense", "rung_tag": "ate"},
        {"query_id": "4", "context": "", "question": "q", "gold_answer": "maybe"},
        {"query_id": "5", "context": "A has a direct effect on B.", "question": "Would b if a instead of not a?", "gold_answer": "no", "commonsense_class": "commonsense", "rung_tag": "det-counterfactual"}
    ]"#;

    #[test]
    fn dataset_loading() {
        let d = parse_dataset(MIXED).unwrap();
        let ids: Vec<&str> = d.queries.iter().map(|q| q.query_id.as_str()).collect();
        assert_eq!(ids, ["2", "5", "10"]);
        assert_eq!(d.skipped.len(), 1);
        assert_eq!(d.excluded, 1);
        assert_eq!(d.queries[0].commonsense_class, CommonsenseClass::Anticommonsense);
        assert!(!d.queries[0].gold_answer);
        assert!(parse_dataset("not json").is_err());
        let jsonl: String = serde_json::from_str::<Vec<Value>>(MIXED).unwrap().iter().map(|v| v.to_string() + "\n").collect();
        assert_eq!(parse_dataset(&jsonl).unwrap(), d);
    }

    #[test]
    fn figure_five_query_in_ground_truth_mode() {
        let q = CladderQuery {
            query_id: "5a".into(),
            context: fixtures::COFFEE_CONTEXT.into(),
            question: fixtures::COFFEE_QUESTION.into(),
            gold_answer: true,
            commonsense_class: CommonsenseClass::Anticommonsense,
            rung_tag: COUNTERFACTUAL_RUNG.into(),
        };
        let reply = |v: &str| serde_json::json!({"explanation": "or-gate", "value": v, "confidence": 0.9}).to_string();
        let gw = Gateway::mock(MockProvider::new().with_rule("description: Salary", reply("high salary")));
        let options = BenchmarkOptions { mode: BenchmarkMode::GroundTruth, ..Default::default() };
        let rec = run_query(&gw, &q, &options);
        assert_eq!(rec.category, OutcomeCategory::CorrectFormatted, "{:?}", rec.error);
        assert_eq!(rec.llm_calls, 1);
        let gw = Gateway::mock(MockProvider::new().with_rule("description: Salary", reply("low salary")));
        assert_eq!(run_query(&gw, &q, &options).category, OutcomeCategory::IncorrectAnswer);
    }

    #[test]
    fn sampling_is_reproducible() {
        let suite = fixtures::cladder_suite();
        let a = sample_queries(&suite, 5, 7);
        assert_eq!(a, sample_queries(&suite, 5, 7));
        assert_eq!(a.len(), 5);
        assert!(a.windows(2).all(|w| compare_ids(&w[0].query_id, &w[1].query_id) == Ordering::Less));
        assert_eq!(sample_queries(&suite, 50, 7).len(), suite.len());
    }

    #[test]
    fn scripted_suite_in_both_modes() {
        let suite = fixtures::cladder_suite();
        assert_eq!(suite.len(), 20);
        for mode in [BenchmarkMode::Discovery, BenchmarkMode::GroundTruth] {
            let gw = Gateway::mock(fixtures::cladder_scripted_provider(&suite, &[], &[]));
            let report = run_benchmark(&gw, &suite, &BenchmarkOptions { mode, ..Default::default() });
            let failures: Vec<_> = report
                .records
                .iter()
                .filter(|r| r.category != OutcomeCategory::CorrectFormatted)
                .map(|r| (&r.query_id, r.category, &r.error))
                .collect();
            assert!(failures.is_empty(), "{mode:?}: {failures:?}");
            assert_eq!(report.accuracy.overall.accuracy, Some(100.0));
        }
    }

    #[test]
    fn resumed_sweep_matches() {
        let suite = fixtures::cladder_suite();
        let dir = tempfile::tempdir().unwrap();
        let options = BenchmarkOptions { cache_dir: Some(dir.path().into()), ..Default::default() };
        let gw = Gateway::mock(fixtures::cladder_scripted_provider(&suite, &[], &[]));
        let partial = run_benchmark(&gw, &suite[..8], &options);
        assert_eq!(partial.queries, 8);
        let gw = Gateway::mock(fixtures::cladder_scripted_provider(&suite, &[], &[]));
        let resumed = run_benchmark(&gw, &suite, &options);
        let gw = Gateway::mock(fixtures::cladder_scripted_provider(&suite, &[], &[]));
        let fresh = run_benchmark(&gw, &suite, &BenchmarkOptions::default());
        assert_eq!(serde_json::to_value(&resumed).unwrap(), serde_json::to_value(&fresh).unwrap());
    }
}
