//! Human-readable renderings behind `--pretty`.

use serde_json::Value;
use std::fmt::Write;
use whatif_core::cladder::BenchmarkReport;
use whatif_core::counterfactual::CounterfactualRun;
use whatif_core::evaluation::{EvalReport, OutcomeCategory};

fn text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "-".into(),
        other => other.to_string(),
    }
}

fn percent(p: Option<f64>) -> String {
    p.map_or_else(|| "n/a".into(), |p| format!("{p:.2}%"))
}

pub fn extraction(v: &Value) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "document  {}", text(&v["doc_id"]));
    let _ = writeln!(s, "outcome   {}", text(&v["outcome"]));
    if !v["graph_id"].is_null() {
        let _ = writeln!(
            s,
            "graph     {} ({} nodes, {} hidden, {} edges)",
            text(&v["graph_id"]),
            v["nodes"],
            v["hidden"],
            v["edges"]
        );
    }
    for w in v["warnings"].as_array().into_iter().flatten() {
        let _ = writeln!(s, "warning   {}", text(w));
    }
    if !v["error"].is_null() {
        let _ = writeln!(s, "error     {}", text(&v["error"]));
    }
    if !v["out"].is_null() {
        let _ = writeln!(s, "written   {}", text(&v["out"]));
    }
    s
}

pub fn merge(v: &Value) -> String {
    let mut s = format!(
        "{} merge -> {} ({} nodes, {} hidden, {} edges)\n{} clusters, {} with several members, {} edges dropped\n",
        text(&v["strategy"]),
        text(&v["graph_id"]),
        v["nodes"],
        v["hidden"],
        v["edges"],
        v["clusters"],
        v["multi_member_clusters"],
        v["dropped_edges"],
    );
    for line in v["log"].as_array().into_iter().flatten() {
        let _ = writeln!(s, "  {}", text(line));
    }
    s
}

pub fn counterfactual(run: &CounterfactualRun) -> String {
    let rows: Vec<[String; 4]> = run
        .factual
        .graph
        .nodes()
        .iter()
        .map(|n| {
            let id = &n.node_id;
            let before = run.factual.value(id).unwrap_or("?").to_string();
            let after = run.counterfactual.value(id).unwrap_or("?").to_string();
            let p = &run.partition;
            let how = if p.intervened.contains(id) {
                "intervened"
            } else if p.recomputed.contains(id) {
                "predicted"
            } else if p.abduced.contains(id) {
                "abduced"
            } else {
                "unchanged"
            };
            [id.clone(), before, after, how.to_string()]
        })
        .collect();
    let header = ["node", "factual", "counterfactual", "source"];
    let width = |i: usize| rows.iter().map(|r| r[i].chars().count()).chain([header[i].len()]).max().unwrap_or(0);
    let w = [width(0), width(1), width(2)];
    let mut s = String::new();
    let line = |s: &mut String, r: [&str; 4]| {
        let _ = writeln!(s, "{:<w0$}  {:<w1$}  {:<w2$}  {}", r[0], r[1], r[2], r[3], w0 = w[0], w1 = w[1], w2 = w[2]);
    };
    line(&mut s, header);
    for r in &rows {
        line(&mut s, [&r[0], &r[1], &r[2], &r[3]]);
    }
    for (node, err) in &run.failures {
        let _ = writeln!(s, "failed {node}: {err}");
    }
    s
}

pub fn evaluation(r: &EvalReport) -> String {
    let mut s = format!("graph {}\n", r.graph_id);
    for p in &r.plausibility {
        let _ = writeln!(s, "{:?} plausibility {:.3} (confidence {:.3})", p.kind, p.score, p.confidence);
        let _ = writeln!(s, "  {}", p.explanation);
    }
    if let Some(d) = &r.distance {
        let _ = writeln!(s, "GED {}  IoU-GED {}  (topology: {} / {}){}", d.ged, d.iou_ged, d.ged_topology, d.iou_ged_topology,
            if d.exact { "" } else { "  [approximate]" });
    }
    s
}

pub fn benchmark(r: &BenchmarkReport) -> String {
    let mut s = format!("{} queries, mode {:?}, {} / {}\n\n", r.queries, r.mode, r.provider, r.chat_model);
    let _ = writeln!(s, "{:<16} {:>8} {:>9} {:>10}", "class", "correct", "answered", "accuracy");
    let _ = writeln!(
        s,
        "{:<16} {:>8} {:>9} {:>10}",
        "overall",
        r.accuracy.overall.correct,
        r.accuracy.overall.answered,
        percent(r.accuracy.overall.accuracy)
    );
    for (class, a) in &r.accuracy.by_class {
        let name = serde_json::to_value(class).map(|v| text(&v)).unwrap_or_default();
        let _ = writeln!(s, "{:<16} {:>8} {:>9} {:>10}", name, a.correct, a.answered, percent(a.accuracy));
    }
    let _ = writeln!(s, "\noutcomes");
    for c in OutcomeCategory::ALL {
        let _ = writeln!(s, "  {:<28} {:>5}", c.label(), r.partition.get(c));
    }
    if let Some(g) = &r.ged {
        let _ = writeln!(
            s,
            "\nGED over {} graphs: {:.3} (IoU {:.3}); topology {:.3} (IoU {:.3})",
            g.graphs, g.ged, g.iou_ged, g.ged_topology, g.iou_ged_topology
        );
    }
    s
}
