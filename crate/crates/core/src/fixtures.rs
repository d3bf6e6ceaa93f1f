//! Reference graphs, documents and scripted providers used by tests, the
//! demo and the command line `--provider mock` runs.

use crate::cladder::{self, CladderQuery};
use crate::graph::{CausalEdge, CausalGraph, Intervention, VariableNode};
use crate::llm::{ChatRequest, MockProvider, MockScript};
use crate::llm::mock::MockRule;
use crate::prompts;
use serde_json::json;

/// Market news article from March 2020 used for the worked example.
pub const BURSA_ARTICLE: &str = include_str!("../fixtures/bursa_article.txt");

/// Cladder-style context for the coffee/salary query.
pub const COFFEE_CONTEXT: &str = include_str!("../fixtures/coffee_context.txt");
pub const COFFEE_QUESTION: &str = include_str!("../fixtures/coffee_question.txt");

const MARKET_CONTEXT: &str = "market : Bursa Malaysia, date : March 2020";

/// Ground-truth coffee graph: H (unobserved confounders), P (proximity to a
/// college), C (drinking coffee), S (salary).
pub fn coffee_ground_truth() -> CausalGraph {
    CausalGraph::new(
        vec![
            VariableNode::hidden("H", "Unobserved confounders")
                .with_type("bool")
                .with_values("active, inactive"),
            VariableNode::observed("P", "Proximity to a college")
                .with_type("bool")
                .with_values("close, far"),
            VariableNode::observed("C", "Drinking coffee")
                .with_type("bool")
                .with_values("drinking coffee, not drinking coffee"),
            VariableNode::observed("S", "Salary")
                .with_type("bool")
                .with_values("high, low"),
        ],
        vec![
            CausalEdge::new("H", "C"),
            CausalEdge::new("H", "S"),
            CausalEdge::new("P", "C"),
            CausalEdge::new("C", "S"),
        ],
    )
}

struct BursaNode {
    id: &'static str,
    description: &'static str,
    value_type: &'static str,
    values: &'static str,
    factual: Option<&'static str>,
    replay: Option<(&'static str, &'static str)>,
}

const BURSA_NODES: &[BursaNode] = &[
    BursaNode {
        id: "0",
        description: "Severity of COVID-19 pandemic",
        value_type: "range element",
        values: "low, moderate, severe",
        factual: Some("severe"),
        replay: None,
    },
    BursaNode {
        id: "1",
        description: "Severity of oil price war",
        value_type: "range element",
        values: "low, moderate, severe",
        factual: Some("severe"),
        replay: None,
    },
    BursaNode {
        id: "2",
        description: "Bursa Malaysia downtrend magnitude",
        value_type: "int",
        values: "percentage decline from peak",
        factual: Some("29%"),
        replay: Some(("20", "A milder pandemic and lower earnings risk shrink the decline, but the oil price war keeps it substantial.")),
    },
    BursaNode {
        id: "3",
        description: "FBM KLCI index value",
        value_type: "float",
        values: "index points",
        factual: Some("1,280.63"),
        replay: Some(("1580", "A smaller downtrend and recovering oil, gas and airline stocks lift the index despite selling pressure.")),
    },
    BursaNode {
        id: "4",
        description: "Selling pressure on stocks",
        value_type: "range element",
        values: "low, moderate, high",
        factual: Some("high"),
        replay: None,
    },
    BursaNode {
        id: "5",
        description: "Investors moving into cash",
        value_type: "bool",
        values: "True, False",
        factual: Some("True"),
        replay: None,
    },
    BursaNode {
        id: "9",
        description: "Malaysia's change of coalition government",
        value_type: "bool",
        values: "True, False",
        factual: Some("True"),
        replay: None,
    },
    BursaNode {
        id: "10",
        description: "Downside risks to corporate earnings",
        value_type: "range element",
        values: "low, moderate, high",
        factual: Some("high"),
        replay: Some(("low", "Without a change of government the political risk to earnings disappears.")),
    },
    BursaNode {
        id: "11",
        description: "Travel restrictions imposed worldwide",
        value_type: "range element",
        values: "none, moderate, severe",
        factual: Some("severe"),
        replay: Some(("none", "A mild pandemic does not call for travel restrictions.")),
    },
    BursaNode {
        id: "12",
        description: "Condition of oil & gas and airlines sectors",
        value_type: "range element",
        values: "good, bad",
        factual: Some("bad"),
        replay: Some(("good", "With no travel restrictions the sectors operate normally.")),
    },
    BursaNode {
        id: "h0",
        description: "Potential end of COVID-19 pandemic",
        value_type: "bool",
        values: "True, False",
        factual: None,
        replay: Some(("False", "The observed effects give no sign that the pandemic is ending.")),
    },
];

const BURSA_EDGES: &[(&str, &str, &str)] = &[
    ("5", "4", "investors moving into cash sell their stocks"),
    ("4", "11", "selling pressure coincides with the spread of travel restrictions"),
    ("11", "12", "travel restrictions hurt oil & gas and airlines"),
    ("12", "3", "weak sectors drag the index down"),
    ("2", "3", "the downtrend lowers the index value"),
    ("1", "2", "the oil price war deepens the downtrend"),
    ("0", "2", "the pandemic deepens the downtrend"),
    ("0", "11", "a severe pandemic leads to travel restrictions"),
    ("10", "2", "earnings risks push the market down"),
    ("h0", "2", "an end of the pandemic would reverse the downtrend"),
    ("h0", "0", "an end of the pandemic would reduce its severity"),
    ("h0", "11", "an end of the pandemic would lift travel restrictions"),
    ("9", "10", "the change of government raises risks to corporate earnings"),
];

/// Factual graph extracted from [`BURSA_ARTICLE`]: ten observed variables
/// and one hidden cause `h0`.
pub fn bursa_factual_graph() -> CausalGraph {
    let nodes = BURSA_NODES
        .iter()
        .map(|n| {
            let node = match n.factual {
                Some(v) => VariableNode::observed(n.id, n.description).with_value(v),
                None => VariableNode::hidden(n.id, n.description),
            };
            node.with_type(n.value_type)
                .with_values(n.values)
                .with_context(MARKET_CONTEXT)
        })
        .collect();
    let edges = BURSA_EDGES
        .iter()
        .map(|(s, t, d)| CausalEdge::new(*s, *t).with_description(*d))
        .collect();
    CausalGraph::new(nodes, edges)
}

/// do(0 = low), do(9 = False).
pub fn bursa_intervention() -> Intervention {
    Intervention::new().set("0", "low").set("9", "False")
}

/// Counterfactual values the replay provider produces for
/// [`bursa_intervention`], including the abduced `h0`.
pub fn bursa_replay_values() -> Vec<(&'static str, &'static str)> {
    BURSA_NODES
        .iter()
        .filter_map(|n| n.replay.map(|(v, _)| (n.id, v)))
        .collect()
}

/// Description in the `description: ..., type:` prefix of a prediction,
/// abduction or proposal user prompt.
pub fn target_description(user_prompt: &str) -> Option<&str> {
    let start = user_prompt.find("description: ")? + "description: ".len();
    let rest = &user_prompt[start..];
    Some(&rest[..rest.find(", type: ")?])
}

/// Provider replaying the worked example: the extraction prompt returns the
/// factual graph, predictions return the recorded counterfactual values,
/// proposals suggest `low` / `False`, and self-evaluation scores 0.85.
pub fn bursa_replay_provider() -> MockProvider {
    let graph_json = bursa_factual_graph().to_json();
    MockProvider::new().with_responder(move |req: &ChatRequest| {
        let system = req.system();
        let user = req.first_user();
        if system.starts_with(&prompts::DISCOVERY_SYSTEM[..60]) {
            return Some(graph_json.clone());
        }
        if system.starts_with(&prompts::PLAUSIBILITY_SYSTEM[..60]) {
            return Some(
                json!({"explanation": "The chain of events is consistent with the article.", "score": 0.85, "confidence": 0.85})
                    .to_string(),
            );
        }
        let description = target_description(user)?;
        let node = BURSA_NODES.iter().find(|n| n.description == description)?;
        if system.starts_with(&prompts::PROPOSAL_SYSTEM[..60]) {
            let (factual, proposed) = match node.value_type {
                "bool" => (node.factual?, if node.factual? == "True" { "False" } else { "True" }),
                _ => (node.factual?, "low"),
            };
            return Some(
                json!({
                    "explanation": format!("A plausible alternative for {}.", node.description),
                    "factual_value": factual,
                    "counterfactual_value": proposed,
                    "confidence": 0.8,
                })
                .to_string(),
            );
        }
        let (value, explanation) = node.replay?;
        Some(json!({"explanation": explanation, "value": value, "confidence": 0.8}).to_string())
    })
}

/// [`bursa_replay_provider`] as a serializable script, for `--script` runs
/// of the command line tool.
pub fn bursa_replay_script() -> MockScript {
    let rule = |system: Option<&str>, contains: Option<String>, response: String| MockRule {
        contains,
        system_contains: system.map(|s| s[..60].to_string()),
        response,
    };
    let mut rules = vec![
        rule(Some(prompts::DISCOVERY_SYSTEM), None, bursa_factual_graph().to_json()),
        rule(
            Some(prompts::PLAUSIBILITY_SYSTEM),
            None,
            json!({"explanation": "The chain of events is consistent with the article.", "score": 0.85, "confidence": 0.85})
                .to_string(),
        ),
    ];
    for n in BURSA_NODES {
        // Only the target's attributes follow "has the following attributes";
        // parents are listed later in the prompt.
        let key = format!("has the following attributes: description: {}, type: ", n.description);
        if let Some(factual) = n.factual {
            let proposed = match (n.value_type, factual) {
                ("bool", "True") => "False",
                ("bool", _) => "True",
                _ => "low",
            };
            let reply = json!({
                "explanation": format!("A plausible alternative for {}.", n.description),
                "factual_value": factual,
                "counterfactual_value": proposed,
                "confidence": 0.8,
            });
            rules.push(rule(Some(prompts::PROPOSAL_SYSTEM), Some(key.clone()), reply.to_string()));
        }
        if let Some((value, explanation)) = n.replay {
            let reply = json!({"explanation": explanation, "value": value, "confidence": 0.8});
            rules.push(rule(None, Some(key), reply.to_string()));
        }
    }
    MockScript { rules, ..MockScript::default() }
}

/// Two-model merge example. Both graphs contain a variable `Z` with the same
/// attributes; the others are unrelated.
pub fn merge_pair() -> (CausalGraph, CausalGraph) {
    let z = || {
        VariableNode::observed("Z", "Regional interest rate level")
            .with_type("range element")
            .with_values("low, high")
            .with_value("high")
    };
    let m1 = CausalGraph::new(
        vec![
            VariableNode::observed("X", "Harvest yield of wheat farms").with_value("poor"),
            VariableNode::observed("Y", "Household food spending").with_value("rising"),
            z(),
        ],
        vec![CausalEdge::new("X", "Y"), CausalEdge::new("Z", "Y")],
    );
    let m2 = CausalGraph::new(
        vec![
            VariableNode::observed("A", "Central bank inflation target breach").with_value("True"),
            z(),
            VariableNode::observed("B", "Mortgage approval count").with_value("falling"),
        ],
        vec![CausalEdge::new("A", "Z"), CausalEdge::new("Z", "B")],
    );
    (m1, m2)
}

/// Twenty templated counterfactual queries (confounded, chain, collider and
/// fork graphs) whose gold answers follow from the stated mechanisms.
pub const CLADDER_SUITE: &str = include_str!("../fixtures/cladder_suite.json");

pub fn cladder_suite() -> Vec<CladderQuery> {
    cladder::parse_dataset(CLADDER_SUITE).expect("suite fixture parses").queries
}

const CYCLIC_GRAPH: &str = r#"{"observed_nodes": [
    {"node_id": "a", "description": "first", "current_value": "on"},
    {"node_id": "b", "description": "second", "current_value": "on"}],
  "observed_edges": [{"source_node_id": "a", "target_node_id": "b"}, {"source_node_id": "b", "target_node_id": "a"}]}"#;

/// Scripted model for [`cladder_suite`]-style queries. Discovery returns the
/// parsed ground-truth graph with observed values filled in (or malformed
/// JSON / a cyclic graph for the listed query ids); the target's prediction
/// agrees with the gold answer; other predictions return `unchanged`.
pub fn cladder_scripted_provider(queries: &[CladderQuery], malformed: &[&str], cyclic: &[&str]) -> MockProvider {
    let mut graphs: Vec<(String, String)> = Vec::new();
    let mut targets: Vec<(String, String)> = Vec::new();
    for q in queries {
        let Ok(gt) = cladder::parse_ground_truth_graph(&q.context) else { continue };
        let reply = if malformed.contains(&q.query_id.as_str()) {
            "{\"observed_nodes\": [{\"node_id\": ".to_string()
        } else if cyclic.contains(&q.query_id.as_str()) {
            CYCLIC_GRAPH.to_string()
        } else {
            let nodes = gt
                .graph
                .nodes()
                .iter()
                .map(|n| VariableNode {
                    kind: crate::graph::NodeKind::Observed,
                    current_value: gt.observations.get(&n.node_id).cloned(),
                    ..n.clone()
                })
                .collect();
            CausalGraph::new(nodes, gt.graph.edges().to_vec()).to_json()
        };
        graphs.push((q.context.clone(), reply));
        if let Some(pq) = cladder::parse_question(&q.question) {
            if let Some(t) = cladder::match_node(&gt.graph, &pq.target) {
                let desc = gt.graph.node(&t).expect("matched").description.clone();
                let value = if q.gold_answer { pq.target.clone() } else { format!("not {}", pq.target) };
                targets.push((desc, value));
            }
        }
    }
    MockProvider::new().with_responder(move |req: &ChatRequest| {
        let user = req.first_user();
        if req.system().starts_with(&prompts::DISCOVERY_SYSTEM[..60]) {
            return graphs.iter().find(|(ctx, _)| user.contains(ctx.as_str())).map(|(_, r)| r.clone());
        }
        let description = target_description(user)?;
        let value = targets
            .iter()
            .find(|(d, _)| d == description)
            .map_or("unchanged", |(_, v)| v.as_str());
        Some(json!({"explanation": "Follows from the stated mechanism.", "value": value, "confidence": 0.9}).to_string())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bursa_graph_shape() {
        let g = bursa_factual_graph();
        assert!(g.validate().is_ok());
        assert_eq!(g.nodes().len(), 11);
        assert_eq!(g.hidden_nodes().count(), 1);
        assert_eq!(g.edges().len(), 13);
        assert!(g.nodes().iter().all(|n| n.is_hidden() != n.current_value.is_some()));
    }

    #[test]
    fn fixture_texts_are_loaded() {
        assert!(BURSA_ARTICLE.starts_with("KUALA LUMPUR"));
        assert!(COFFEE_CONTEXT.contains("We observed"));
        assert!(COFFEE_QUESTION.trim_end().ends_with('?'));
    }

    #[test]
    fn description_is_found_in_prompts() {
        let node = &bursa_factual_graph();
        let n = node.node("11").unwrap();
        let prompt = prompts::fill(prompts::PREDICTION_USER, &[("node attributes", &prompts::node_attributes(n))]);
        assert_eq!(target_description(&prompt), Some("Travel restrictions imposed worldwide"));
    }

    #[test]
    fn script_replays_like_the_responder() {
        use crate::counterfactual::{run_counterfactual, CounterfactualOptions};
        use crate::llm::Gateway;
        use crate::world::WorldState;
        let text = serde_json::to_string(&bursa_replay_script()).unwrap();
        let script: MockScript = serde_json::from_str(&text).unwrap();
        let world = WorldState::from_graph(bursa_factual_graph());
        let run = |gw: Gateway| run_counterfactual(&gw, &world, &bursa_intervention(), CounterfactualOptions::default()).unwrap();
        let a = run(Gateway::mock(MockProvider::from_script(script)));
        let b = run(Gateway::mock(bursa_replay_provider()));
        assert_eq!(a.counterfactual.values, b.counterfactual.values);
        assert_eq!(a.partition, b.partition);
    }
}
