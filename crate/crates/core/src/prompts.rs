//! Prompt templates.
//!
//! The texts below are sent to the model verbatim. Placeholders in braces are
//! substituted by the helpers in this module; nothing else is rewritten.

/// System prompt for causal graph discovery from a document.
pub const DISCOVERY_SYSTEM: &str = r#"Your task is to summarise a text into a JSON dictionary of instantiated causal variables and the causal relationships between them. 
Variables should be as atomic and detailed as possible. Causal relationships should describe how the value of the first variable affects the value of the second. 
One sentence usually describes two or more variables and connects them. For each variable, the following questions should be answered: 
'What are the causes of this variable's value? Is it fully explained by the available information or are some causes missing?' 
If some causes seem to be missing, create new (hidden) variables. 
Hidden variables represent missing information to fully explain the value of one or more observed variables. 
They cannot have incoming edges. Identify the major and minor variables and how they are connected. 
Add the missing unknown variables when necessary. Follow carefully the instructions and write down your answer using only the given JSON format very strictly.
The format is as follows:
{
  "observed_nodes": [
    {
      "node_id": (str) "0",
      "description": (str) "<high-level short atomic description of causal variable 0>",
      "type": (str) "<variable type: e.g. bool, int, set element, range element>",
      "values": (str) "<set of possible values, if applicable>",
      "current_value": (str) "<current value>",
      "context": (str) "<contextual information type> : <value of the contextual information linked to the current instance>"
    },
    ...
  ],
  "hidden_nodes": [
    {
      "node_id": (str) "h0",
      "description": (str) "<high-level short atomic description of the hidden causal variable>",
      "type": (str) "<variable type: e.g. bool, int, set element, range element>",
      "values": (str) "<set of possible values, if applicable>",
      "current_value": (str) "", # This field is left empty because the current value of the variable is unknown since the variable is hidden
      "context": (str) "<contextual information type> : <value of the contextual information linked to the current instance>"
    },
    ...
  ],
  "observed_edges": [
    {
      "source_node_id": (str) "0",
      "target_node_id": (str) "1",
      "description": (str) "<high-level short atomic description of the causal relationship from variable 0 to 1>",
      "details": (str) "<detailed explanation of how the value of variable 0 affects the value of variable 1 in the text>"
    },
    ...
  ],
  "hidden_edges": [
    {
      "source_node_id": (str) "h0",
      "target_node_id": (str) "1",
      "description": (str) "<high-level short atomic description of the causal relationship from hidden variable 0 to 1>",
      "details": (str) "<detailed explanation of how the value of hidden variable 0 affects the value of variable 1 in the text>"
    },
    ...
  ]
}"#;

/// User prompt for discovery; `{text}` is replaced by the document.
pub const DISCOVERY_USER: &str = r#"Here is the input text:
```
{text}
```"#;

/// Node line used to build embedding inputs.
pub const EMBEDDING_NODE: &str = r#"description: {description}, type: {type}, values: {values}, context: {context}"#;

/// Neighbour line appended to [`EMBEDDING_NODE`] for each node within the
/// requested distance.
pub const EMBEDDING_NEIGHBOUR: &str = r#"neighbour at distance {rank} from node: description: {description}, type: {type}, values: {values}, context: {context}"#;

/// System prompt for predicting a variable from its parents.
pub const PREDICTION_SYSTEM: &str = r#"Your task is to predict the value of the target variable given its description, type, possible values, and context, and the attributes and values of its parent causes and the relationships connecting them. 
The value of the target variable is fully determined by its direct list of causes. Reason step-by-step. Start by describing the attributes of the target variable and explain in your own words its relationships with its parent causes, how the variables are linked, and how their values cause the value of the target. Then, predict the value of the target variable. Provide a confidence score as a float between 0 and 1. Follow strictly the provided format."#;

/// Header of the prediction user prompt.
pub const PREDICTION_USER: &str = r#"The target variable has the following attributes: {node attributes}.
It is caused by the following variables:"#;

/// One numbered parent entry in the prediction user prompt.
pub const PREDICTION_PARENT: &str = r#"{i}. {parent attributes}. Its value is {parent value}. Its causal relationship with the target is described as follows: {edge attributes}"#;

/// System prompt for proposing a counterfactual value.
pub const PROPOSAL_SYSTEM: &str = r#"Your task is to interpret the attributes of a variable and propose an alternative/counterfactual instantiation different from its current value. The variable is described by its description, type, possible values, current value, and context. The counterfactual value should be a plausible alternative instantiation of the variable given the context, type, description, and possible values. Reason step-by-step. Start by describing the attributes of the variable and explain in your own words the reasons for the choice of the counterfactual value. Then, state the factual value and propose the new counterfactual value. Provide a confidence score as a float between 0 and 1. Follow strictly the provided format."#;

/// User prompt for proposing a counterfactual value.
pub const PROPOSAL_USER: &str = r#"The variable has the following attributes: description: {description}, type: {type}, possible values: {values}, context: {context}. The current value is {current_value}. Propose a counterfactual value."#;

/// System prompt for plausibility self-evaluation.
pub const PLAUSIBILITY_SYSTEM: &str = r#"Your task is to evaluate the plausibility of a set of events linked by causal relationships. The events are described by a high-level description and a value. The events are linked by causal relationships. The causal relationships are described by a high-level description. The overall plausibility of the set of events corresponds to the factorization of the plausibility of each event's occurrence given its causes. Reason step-by-step. Start by describing the events and the causal relationships. Explain in your own words the reasons for the plausibility of each event. Finally, provide an overall score for the plausibility of the sequence of events. Give an explanation describing your reasoning. Provide an overall confidence score as a float between 0 and 1. Follow strictly the provided format."#;

/// Header, edge line and event line of the plausibility user prompt.
pub const PLAUSIBILITY_TEMPLATE: &str = r#"The causal graph is composed of the following events:
({parent rank} -> {target rank}) {edge description}.
{target rank}. {target description}. The value is {node current_value}"#;

/// Reply format appended to the prediction and abduction system prompts.
pub const PREDICTION_FORMAT: &str = r#"Format:
{"explanation": "<step-by-step reasoning>", "value": "<predicted value of the target variable>", "confidence": <float between 0 and 1>}"#;

/// Reply format appended to the proposal system prompt.
pub const PROPOSAL_FORMAT: &str = r#"Format:
{"explanation": "<step-by-step reasoning>", "factual_value": "<current value>", "counterfactual_value": "<proposed value>", "confidence": <float between 0 and 1>}"#;

/// Reply format appended to the plausibility system prompt.
pub const PLAUSIBILITY_FORMAT: &str = r#"Format:
{"explanation": "<step-by-step reasoning>", "score": <float between 0 and 1>, "confidence": <float between 0 and 1>}"#;

/// Sentence added to the prediction system prompt when inferring a hidden
/// cause from its observed effects.
pub const ABDUCTION_NOTE: &str = "The target variable is hidden: infer its most likely value from the observed variables it causes, reasoning from effects back to their cause.";

/// Header of the abduction user prompt.
pub const ABDUCTION_USER: &str =
    "The target variable has the following attributes: {node attributes}.\nIt is a hidden cause of the following observed variables:";

/// Abduction user prompt body when the hidden variable has no observed effects.
pub const ABDUCTION_NO_EVIDENCE: &str = "It has no observed effects.";

/// Corrective turn sent when a reply cannot be parsed.
pub const REFINEMENT_USER: &str = "Your previous answer could not be parsed ({error}). Answer again and write down your answer using only the given format very strictly.";

/// Substitutes `{key}` placeholders in a single left-to-right pass, so
/// substituted text is never re-scanned for placeholders.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let replaced = after.find('}').and_then(|close| {
            let key = &after[..close];
            vars.iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| (close, *v))
        });
        match replaced {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn discovery_user(text: &str) -> String {
    fill(DISCOVERY_USER, &[("text", text)])
}

/// `description: .., type: .., values: .., context: ..` for a node. Never
/// includes the current value.
pub fn node_attributes(node: &crate::graph::VariableNode) -> String {
    fill(
        EMBEDDING_NODE,
        &[
            ("description", &node.description),
            ("type", &node.value_type),
            ("values", &node.values),
            ("context", &node.context),
        ],
    )
}

pub fn neighbour_line(rank: usize, node: &crate::graph::VariableNode) -> String {
    fill(
        EMBEDDING_NEIGHBOUR,
        &[
            ("rank", &rank.to_string()),
            ("description", &node.description),
            ("type", &node.value_type),
            ("values", &node.values),
            ("context", &node.context),
        ],
    )
}

pub fn edge_attributes(edge: &crate::graph::CausalEdge) -> String {
    format!("description: {}, details: {}", edge.description, edge.details)
}

/// One entry of a numbered cause/effect list, 1-based.
pub fn parent_line(
    index: usize,
    node: &crate::graph::VariableNode,
    value: &str,
    edge: &crate::graph::CausalEdge,
) -> String {
    fill(
        PREDICTION_PARENT,
        &[
            ("i", &index.to_string()),
            ("parent attributes", &node_attributes(node)),
            ("parent value", value),
            ("edge attributes", &edge_attributes(edge)),
        ],
    )
}

pub fn proposal_user(node: &crate::graph::VariableNode, current_value: &str) -> String {
    fill(
        PROPOSAL_USER,
        &[
            ("description", &node.description),
            ("type", &node.value_type),
            ("values", &node.values),
            ("context", &node.context),
            ("current_value", current_value),
        ],
    )
}

/// The three lines of [`PLAUSIBILITY_TEMPLATE`]: header, edge line, event line.
pub fn plausibility_lines() -> (&'static str, &'static str, &'static str) {
    let mut it = PLAUSIBILITY_TEMPLATE.split('\n');
    let header = it.next().unwrap_or_default();
    let edge = it.next().unwrap_or_default();
    let event = it.next().unwrap_or_default();
    (header, edge, event)
}

pub fn with_format(system: &str, format: &str) -> String {
    format!("{system}\n{format}")
}
