use serde_json::Value;
use whatif_demo::{counterfactual_json, distance_json, example_graph_json, merge_example_json, merge_json};

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn replay_reproduces_worked_example() {
    let run = parse(&counterfactual_json(&example_graph_json(), r#"{"0": "low", "9": "False"}"#).unwrap());
    let recomputed: Vec<&str> = run["partition"]["recomputed"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(recomputed, ["10", "11", "12", "2", "3"]);
    assert_eq!(run["counterfactual"]["values"]["11"]["value"], "none");
    assert_eq!(run["counterfactual"]["values"]["0"]["provenance"], "intervened");
}

#[test]
fn counterfactual_input_errors() {
    let g = example_graph_json();
    assert!(counterfactual_json(&g, "{}").unwrap_err().contains("at least one"));
    assert!(counterfactual_json(&g, "[1]").is_err());
    assert!(counterfactual_json("{", r#"{"0": "low"}"#).is_err());
    assert!(counterfactual_json(&g, r#"{"zz": "low"}"#).unwrap_err().contains("zz"));
}

#[test]
fn distance_of_a_graph_to_itself_is_zero() {
    let g = example_graph_json();
    let d = parse(&distance_json(&g, &g).unwrap());
    assert_eq!(d["ged"], 0);
    assert_eq!(d["iou_ged"], 0);

    let pair = parse(&merge_example_json());
    let d = parse(&distance_json(&pair[0].to_string(), &pair[1].to_string()).unwrap());
    assert!(d["ged"].as_u64().unwrap() > 0);
    assert!(d["ged_topology"].as_u64().unwrap() <= d["ged"].as_u64().unwrap());
}

#[test]
fn merge_example_shares_one_variable() {
    let graphs = merge_example_json();
    let s = parse(&merge_json(&graphs, "summarise", 0.15, 0).unwrap());
    assert_eq!(s["graph"]["observed_nodes"].as_array().unwrap().len(), 5);
    let a = parse(&merge_json(&graphs, "analogy", 0.15, 0).unwrap());
    assert_eq!(a["graph"]["hidden_nodes"].as_array().unwrap().len(), 1);
    assert!(merge_json(&graphs, "blend", 0.15, 0).is_err());
    assert!(merge_json(&graphs, "summarise", 0.0, 0).is_err());
}
