use crate::error::ApiError;
use crate::store::{content_id, now_secs, ArtifactKind};
use crate::AppState;
use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use whatif_core::counterfactual::{
    propose_counterfactual_value, run_counterfactual, CounterfactualOptions, CounterfactualRun, InferenceError,
};
use whatif_core::evaluation::{graph_distance, self_evaluate, EvalError, EvalKind, EvalReport};
use whatif_core::extraction::{build_graph, extract_graph, BuildError, ExtractionOptions, ExtractionOutcome};
use whatif_core::graph::GraphDocument;
use whatif_core::merge::{merge_graphs, MergeError, MergeOptions, Strategy};
use whatif_core::{CausalGraph, GraphError, Intervention, LlmError, WorldState};

pub(crate) fn routes() -> Router<AppState> {
    Router::new()
        .route("/health", get(health))
        .route("/index", get(index))
        .route("/index/rebuild", post(rebuild_index))
        .route("/documents", post(create_document))
        .route("/documents/{id}", get(get_document))
        .route("/graphs", get(list_graphs).post(import_graph))
        .route("/graphs/extract", post(extract))
        .route("/graphs/merge", post(merge))
        .route("/graphs/{id}", get(get_graph))
        .route("/graphs/{id}/counterfactual", post(counterfactual))
        .route("/graphs/{id}/suggest", post(suggest))
        .route("/graphs/{id}/evaluate", post(evaluate))
        .route("/jobs/{id}", get(get_job))
        .route("/runs", get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/reports/{id}", get(get_report))
        .route("/transcripts/{id}", get(get_transcript))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEnvelope {
    pub graph_id: String,
    pub created: u64,
    pub config: Value,
    pub metadata: Value,
    pub graph: CausalGraph,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEnvelope {
    pub run_id: String,
    pub graph_id: String,
    pub created: u64,
    pub config: Value,
    pub options: CounterfactualOptions,
    pub run: CounterfactualRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEnvelope {
    pub report_id: String,
    pub graph_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub against: Option<String>,
    pub created: u64,
    pub config: Value,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub kind: String,
    pub status: JobStatus,
    pub doc_id: String,
    pub strict: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<ExtractionOutcome>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<crate::ErrorBody>,
    pub created: u64,
    pub config: Value,
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::invalid(format!("invalid request body: {e}")))
}

fn raw_json(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

fn fetch_raw(state: &AppState, kind: ArtifactKind, what: &str, id: &str) -> Result<Response, ApiError> {
    state.store().get(kind, id)?.map(raw_json).ok_or_else(|| ApiError::not_found(what, id))
}

fn load<T: DeserializeOwned>(state: &AppState, kind: ArtifactKind, what: &str, id: &str) -> Result<T, ApiError> {
    state.store().get_json(kind, id)?.ok_or_else(|| ApiError::not_found(what, id))
}

fn created_status(fresh: bool) -> StatusCode {
    if fresh {
        StatusCode::CREATED
    } else {
        StatusCode::OK
    }
}

/// Runs blocking engine work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)
}

/// Saves what is known about a failed provider interaction and returns its id.
fn save_transcript(state: &AppState, operation: &str, subject: &str, error: &str, request: Option<Value>) -> Option<String> {
    let id = content_id(&[operation.as_bytes(), subject.as_bytes(), error.as_bytes(), &now_secs().to_le_bytes()]);
    let body = json!({
        "transcript_id": id,
        "created": now_secs(),
        "operation": operation,
        "subject": subject,
        "error": error,
        "request": request,
        "config": state.config_snapshot(),
    });
    match state.store().put_json(ArtifactKind::Transcript, &id, &body, None) {
        Ok(_) => Some(id),
        Err(e) => {
            log::error!("cannot save transcript: {e}");
            None
        }
    }
}

fn llm_error(state: &AppState, operation: &str, subject: &str, e: &LlmError) -> ApiError {
    let attempts = match e {
        LlmError::ParseFailure { attempts, .. } => serde_json::to_value(attempts).ok(),
        _ => None,
    };
    let msg = e.to_string();
    let transcript = save_transcript(state, operation, subject, &msg, attempts);
    if let LlmError::Precondition(m) = e {
        return ApiError::invalid(m.clone());
    }
    ApiError::provider(msg, transcript)
}

fn graph_error(e: &GraphError) -> ApiError {
    match e {
        GraphError::UnknownNode(id) => ApiError::invalid(format!("unknown node `{id}`")),
        GraphError::EmptyValue(_) => ApiError::invalid(e.to_string()),
        GraphError::Cycle { .. } => ApiError::conflict(e.to_string()),
    }
}

fn inference_error(state: &AppState, operation: &str, subject: &str, e: InferenceError) -> ApiError {
    match &e {
        InferenceError::Graph(g) => graph_error(g),
        InferenceError::Llm { source, .. } => llm_error(state, operation, subject, source),
        InferenceError::UnresolvedTarget(_) => ApiError::invalid(e.to_string()),
        InferenceError::NoAlternative(_) | InferenceError::MissingValue(_) | InferenceError::MissingParentValue { .. } => {
            ApiError::conflict(e.to_string())
        }
    }
}

fn load_graph(state: &AppState, id: &str) -> Result<GraphEnvelope, ApiError> {
    load(state, ArtifactKind::Graph, "graph", id)
}

/// Stores a graph under its content id; the first metadata written wins.
fn store_graph(state: &AppState, graph: CausalGraph, metadata: Value) -> Result<(String, bool), ApiError> {
    let graph_id = graph.graph_id().to_string();
    let config = state.config_snapshot();
    let envelope = GraphEnvelope { graph_id: graph_id.clone(), created: now_secs(), config: config.clone(), metadata, graph };
    let fresh = state.store().put_json(ArtifactKind::Graph, &graph_id, &envelope, Some(config))?;
    Ok((graph_id, fresh))
}

async fn health(State(state): State<AppState>) -> Json<Value> {
    Json(json!({ "status": "ok", "config": state.config_snapshot() }))
}

async fn index(State(state): State<AppState>) -> Json<crate::Index> {
    Json(state.store().index())
}

async fn rebuild_index(State(state): State<AppState>) -> Result<Json<crate::Index>, ApiError> {
    Ok(Json(state.store().rebuild_index()?))
}

#[derive(Deserialize)]
struct DocumentRequest {
    text: String,
}

async fn create_document(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: DocumentRequest = parse_body(&body)?;
    if req.text.trim().is_empty() {
        return Err(ApiError::invalid("document text is empty"));
    }
    let doc_id = whatif_core::extraction::doc_id(&req.text);
    let doc = json!({ "doc_id": doc_id, "created": now_secs(), "text": req.text });
    let fresh = state.store().put_json(ArtifactKind::Document, &doc_id, &doc, None)?;
    Ok((created_status(fresh), Json(json!({ "doc_id": doc_id }))).into_response())
}

async fn get_document(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    fetch_raw(&state, ArtifactKind::Document, "document", &id)
}

async fn list_graphs(State(state): State<AppState>) -> Json<Vec<crate::IndexEntry>> {
    Json(state.store().list(ArtifactKind::Graph))
}

async fn get_graph(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    fetch_raw(&state, ArtifactKind::Graph, "graph", &id)
}

#[derive(Deserialize)]
struct ImportRequest {
    graph: Value,
    #[serde(default)]
    metadata: Option<Value>,
}

async fn import_graph(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: ImportRequest = parse_body(&body)?;
    let doc: GraphDocument =
        serde_json::from_value(req.graph).map_err(|e| ApiError::invalid(format!("not a graph document: {e}")))?;
    let built = build_graph(doc, true).map_err(|e| match e {
        BuildError::Invalid(v) => ApiError::violations("graph violates structural constraints", v),
        other => ApiError::invalid(other.to_string()),
    })?;
    let metadata = json!({ "kind": "imported", "user": req.metadata, "warnings": built.warnings });
    let (graph_id, fresh) = store_graph(&state, built.graph, metadata)?;
    Ok((created_status(fresh), Json(json!({ "graph_id": graph_id }))).into_response())
}

#[derive(Deserialize)]
struct ExtractRequest {
    doc_id: String,
    #[serde(default)]
    strict: bool,
}

async fn extract(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: ExtractRequest = parse_body(&body)?;
    if !state.store().contains(ArtifactKind::Document, &req.doc_id) {
        return Err(ApiError::not_found("document", &req.doc_id));
    }
    let config = state.config_snapshot();
    let job_id = content_id(&[b"extract", req.doc_id.as_bytes(), &[req.strict as u8], config.to_string().as_bytes()]);
    if let Some(job) = state.store().get_json::<JobRecord>(ArtifactKind::Job, &job_id)? {
        if job.status != JobStatus::Failed {
            return Ok(job_response(&job, state.0.config.sync_jobs));
        }
    }
    let job = JobRecord {
        job_id: job_id.clone(),
        kind: "extract".into(),
        status: JobStatus::Queued,
        doc_id: req.doc_id,
        strict: req.strict,
        graph_id: None,
        outcome: None,
        warnings: Vec::new(),
        error: None,
        created: now_secs(),
        config: config.clone(),
    };
    state.store().put_json(ArtifactKind::Job, &job_id, &job, Some(config))?;

    if state.0.config.sync_jobs {
        let st = state.clone();
        let done = blocking(move || run_extract_job(&st, job)).await?;
        return Ok(job_response(&done, true));
    }
    let st = state.clone();
    let queued = job.clone();
    tokio::spawn(async move {
        let Ok(_permit) = st.0.workers.clone().acquire_owned().await else { return };
        let inner = st.clone();
        if let Err(e) = tokio::task::spawn_blocking(move || run_extract_job(&inner, queued)).await {
            log::error!("extraction worker panicked: {e}");
        }
    });
    Ok(job_response(&job, false))
}

fn job_response(job: &JobRecord, sync: bool) -> Response {
    let status = match (&job.error, job.status, sync) {
        (Some(e), JobStatus::Failed, true) => StatusCode::from_u16(e.status).unwrap_or(StatusCode::BAD_GATEWAY),
        (_, JobStatus::Queued | JobStatus::Running, _) => StatusCode::ACCEPTED,
        _ => StatusCode::OK,
    };
    (status, Json(job)).into_response()
}

fn run_extract_job(state: &AppState, mut job: JobRecord) -> JobRecord {
    let save = |job: &JobRecord| {
        if let Err(e) = state.store().put_json(ArtifactKind::Job, &job.job_id, job, Some(job.config.clone())) {
            log::error!("cannot save job {}: {e}", job.job_id);
        }
    };
    job.status = JobStatus::Running;
    save(&job);
    let finish = |mut job: JobRecord, result: Result<(String, Option<ExtractionOutcome>, Vec<String>), ApiError>| {
        match result {
            Ok((graph_id, outcome, warnings)) => {
                job.status = JobStatus::Succeeded;
                job.graph_id = Some(graph_id);
                job.outcome = outcome;
                job.warnings = warnings;
            }
            Err(e) => {
                job.status = JobStatus::Failed;
                job.error = Some(e.0);
            }
        }
        save(&job);
        job
    };

    let text = match state.store().get_json::<Value>(ArtifactKind::Document, &job.doc_id) {
        Ok(Some(d)) => d["text"].as_str().unwrap_or_default().to_string(),
        Ok(None) => {
            let err = ApiError::not_found("document", &job.doc_id);
            return finish(job, Err(err));
        }
        Err(e) => return finish(job, Err(e.into())),
    };
    let run = match extract_graph(state.gateway(), &text, ExtractionOptions { strict: job.strict }) {
        Ok(run) => run,
        Err(e) => {
            let err = llm_error(state, "extract", &job.doc_id, &e);
            return finish(job, Err(err));
        }
    };
    let transcript_id = content_id(&[job.job_id.as_bytes(), b"transcript"]);
    let transcript = json!({
        "transcript_id": transcript_id,
        "created": now_secs(),
        "operation": "extract",
        "subject": job.doc_id,
        "request": run.transcript,
        "config": job.config,
    });
    if let Err(e) = state.store().put_json(ArtifactKind::Transcript, &transcript_id, &transcript, None) {
        log::error!("cannot save transcript: {e}");
    }
    let outcome = run.outcome;
    let result = match (run.graph, outcome) {
        (Some(graph), o) if o.is_ok() => {
            let metadata = json!({
                "kind": "extracted",
                "doc_id": job.doc_id,
                "outcome": o,
                "warnings": run.warnings,
                "transcript_id": transcript_id,
            });
            store_graph(state, graph, metadata).map(|(id, _)| (id, Some(o), run.warnings))
        }
        (_, ExtractionOutcome::ParseError) => Err(ApiError::provider(
            format!("model reply never parsed: {}", run.error.unwrap_or_default()),
            Some(transcript_id),
        )),
        _ => Err(ApiError::violations(
            format!("extracted graph rejected ({:?}): {}", outcome, run.error.unwrap_or_default()),
            run.violations,
        )),
    };
    let mut job = finish(job, result);
    if job.outcome.is_none() {
        job.outcome = Some(outcome);
        save(&job);
    }
    job
}

async fn get_job(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    fetch_raw(&state, ArtifactKind::Job, "job", &id)
}

#[derive(Deserialize)]
struct MergeRequest {
    graph_ids: Vec<String>,
    #[serde(default)]
    strategy: Option<Strategy>,
    #[serde(default)]
    params: Option<MergeOptions>,
}

async fn merge(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: MergeRequest = parse_body(&body)?;
    if req.graph_ids.is_empty() {
        return Err(ApiError::invalid("graph_ids is empty"));
    }
    let graphs = req
        .graph_ids
        .iter()
        .map(|id| load_graph(&state, id).map(|e| e.graph))
        .collect::<Result<Vec<_>, _>>()?;
    let mut options = req.params.unwrap_or_default();
    if let Some(s) = req.strategy {
        options.strategy = s;
    }
    let st = state.clone();
    let report = blocking(move || merge_graphs(st.gateway(), &graphs, options)).await?.map_err(|e| match e {
        MergeError::Llm(l) => llm_error(&state, "merge", &req.graph_ids.join(","), &l),
        MergeError::Graph(g) => graph_error(&g),
        other => ApiError::invalid(other.to_string()),
    })?;
    let metadata = json!({
        "kind": "merged",
        "sources": req.graph_ids,
        "options": report.options,
        "embedding_model": report.embedding_model,
        "embedding_source": report.embedding_source,
        "clustering": report.clustering,
        "mapping": report.result.mapping,
        "dropped_edges": report.result.dropped_edges,
        "log": report.result.log,
    });
    let (graph_id, fresh) = store_graph(&state, report.result.graph, metadata)?;
    Ok((created_status(fresh), Json(json!({ "graph_id": graph_id }))).into_response())
}

#[derive(Deserialize)]
struct CounterfactualRequest {
    assignments: BTreeMap<String, String>,
    #[serde(default)]
    strict: bool,
    #[serde(default)]
    samples: Option<usize>,
}

async fn counterfactual(
    State(state): State<AppState>,
    Path(graph_id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let envelope = load_graph(&state, &graph_id)?;
    let req: CounterfactualRequest = parse_body(&body)?;
    if req.assignments.is_empty() {
        return Err(ApiError::invalid("assignments is empty"));
    }
    let unknown: Vec<&str> =
        req.assignments.keys().filter(|id| !envelope.graph.contains(id)).map(String::as_str).collect();
    if !unknown.is_empty() {
        return Err(ApiError::invalid(format!("unknown node(s): {}", unknown.join(", "))));
    }
    let options = CounterfactualOptions { strict: req.strict, samples: req.samples.unwrap_or(1) };
    if options.samples == 0 {
        return Err(ApiError::invalid("samples must be at least 1"));
    }
    let iv = req.assignments.into_iter().fold(Intervention::new(), |iv, (k, v)| iv.set(k, v));
    let world = WorldState::from_graph(envelope.graph);
    let st = state.clone();
    let run = blocking(move || run_counterfactual(st.gateway(), &world, &iv, options))
        .await?
        .map_err(|e| inference_error(&state, "counterfactual", &graph_id, e))?;
    let config = state.config_snapshot();
    let run_json = serde_json::to_vec(&run).map_err(ApiError::internal)?;
    let options_json = serde_json::to_vec(&options).map_err(ApiError::internal)?;
    let run_id = content_id(&[graph_id.as_bytes(), &options_json, &run_json]);
    let envelope = RunEnvelope { run_id: run_id.clone(), graph_id, created: now_secs(), config: config.clone(), options, run };
    let fresh = state.store().put_json(ArtifactKind::Run, &run_id, &envelope, Some(config))?;
    let body = json!({
        "run_id": run_id,
        "outcome": envelope.run.outcome,
        "partition": envelope.run.partition,
        "failures": envelope.run.failures,
    });
    Ok((created_status(fresh), Json(body)).into_response())
}

async fn list_runs(State(state): State<AppState>) -> Json<Vec<crate::IndexEntry>> {
    Json(state.store().list(ArtifactKind::Run))
}

async fn get_run(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    fetch_raw(&state, ArtifactKind::Run, "run", &id)
}

#[derive(Deserialize)]
struct SuggestRequest {
    node_id: String,
}

async fn suggest(State(state): State<AppState>, Path(graph_id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let envelope = load_graph(&state, &graph_id)?;
    let req: SuggestRequest = parse_body(&body)?;
    let world = WorldState::from_graph(envelope.graph);
    let st = state.clone();
    let node = req.node_id.clone();
    let proposal = blocking(move || propose_counterfactual_value(st.gateway(), &world, &node))
        .await?
        .map_err(|e| inference_error(&state, "suggest", &format!("{graph_id}/{}", req.node_id), e))?;
    Ok(Json(proposal).into_response())
}

#[derive(Deserialize)]
struct EvaluateRequest {
    #[serde(default)]
    kind: Option<EvalKind>,
    #[serde(default)]
    run_id: Option<String>,
    #[serde(default)]
    against: Option<String>,
}

async fn evaluate(State(state): State<AppState>, Path(graph_id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let envelope = load_graph(&state, &graph_id)?;
    let req: EvaluateRequest = parse_body(&body)?;
    let reference = match &req.against {
        Some(id) => Some(load_graph(&state, id)?.graph),
        None => None,
    };
    let self_eval = req.kind.is_some() || reference.is_none();
    let kind = req.kind.unwrap_or(EvalKind::Factual);
    let world = match &req.run_id {
        Some(run_id) => {
            let run: RunEnvelope = load(&state, ArtifactKind::Run, "run", run_id)?;
            if run.graph_id != graph_id {
                return Err(ApiError::conflict(format!("run `{run_id}` belongs to graph `{}`", run.graph_id)));
            }
            match kind {
                EvalKind::Factual => run.run.factual,
                EvalKind::Counterfactual => run.run.counterfactual,
            }
        }
        None if self_eval && kind == EvalKind::Counterfactual => {
            return Err(ApiError::invalid("counterfactual evaluation needs a run_id"));
        }
        None => WorldState::from_graph(envelope.graph.clone()),
    };

    let mut report = EvalReport::new(graph_id.clone());
    if let Some(reference) = &reference {
        report.distance = Some(graph_distance(&envelope.graph, reference));
    }
    if self_eval {
        let st = state.clone();
        let (plausibility, _) = blocking(move || self_evaluate(st.gateway(), &world, kind)).await?.map_err(|e| match e {
            EvalError::Graph(g) => graph_error(&g),
            EvalError::Llm(l) => llm_error(&state, "evaluate", &graph_id, &l),
            missing @ EvalError::ReportMissing { .. } => {
                let transcript = save_transcript(&state, "evaluate", &graph_id, &missing.to_string(), None);
                ApiError::provider(missing.to_string(), transcript)
            }
        })?;
        report.plausibility.push(plausibility);
    }
    let config = state.config_snapshot();
    let report_json = serde_json::to_vec(&report).map_err(ApiError::internal)?;
    let report_id = content_id(&[graph_id.as_bytes(), req.run_id.as_deref().unwrap_or("").as_bytes(), &report_json]);
    let envelope = ReportEnvelope {
        report_id: report_id.clone(),
        graph_id,
        run_id: req.run_id,
        against: req.against,
        created: now_secs(),
        config: config.clone(),
        report,
    };
    let fresh = state.store().put_json(ArtifactKind::Report, &report_id, &envelope, Some(config))?;
    Ok((created_status(fresh), Json(envelope)).into_response())
}

async fn get_report(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    fetch_raw(&state, ArtifactKind::Report, "report", &id)
}

async fn get_transcript(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    fetch_raw(&state, ArtifactKind::Transcript, "transcript", &id)
}
