use std::collections::BTreeMap;
use std::sync::Arc;

use ark_core::catalog::{load_dataset, resolve, versions, CatalogError, Dataset, VersionSelector};
use ark_core::dataflow::{
    execute_plan, filter_provenance, plan_with_sources, provenance_of, DataflowError, ExecOptions, Pinned,
    PipelineDoc, ProvNode, RunRecord,
};
use ark_core::difc::{effective_label, TagSet};
use ark_core::{Digest, Label, Principal};
use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde_json::{json, Value};

use crate::{ApiError, RunEntry, RunState, Service, SubscriptionRequest};

type Svc = State<Arc<Service>>;

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/layers", get(list_layers))
        .route("/layers/{name}/versions", get(layer_versions))
        .route("/tiles/{name}/{manifest}/{band}/{tx}/{ty}", get(get_tile))
        .route("/runs", post(submit_run))
        .route("/runs/{id}", get(get_run))
        .route("/results/{id}", get(get_results))
        .route("/subscriptions", post(create_subscription))
        .route("/subscriptions/{id}", delete(delete_subscription))
        .route("/provenance/{hash}", get(get_provenance))
        .with_state(service)
}

struct Caller {
    principal: Principal,
    tags: TagSet,
}

impl Caller {
    fn reads(&self, svc: &Service, label: &Label) -> bool {
        svc.readable(label, &self.principal, &self.tags)
    }

    fn shown(&self, svc: &Service, label: &Label) -> Vec<String> {
        effective_label(label, &self.tags, svc.clock().now()).iter().map(str::to_string).collect()
    }
}

fn caller(svc: &Service, headers: &HeaderMap) -> Result<Caller, ApiError> {
    let token = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .ok_or(ApiError::Unauthenticated)?;
    let (principal, tags) = svc.authenticate(token.trim()).ok_or(ApiError::Unauthenticated)?;
    Ok(Caller { principal, tags })
}

fn describe(svc: &Service, who: &Caller, manifest: Digest, ds: &Dataset) -> Value {
    let mut v = json!({
        "name": ds.name(),
        "kind": ds.kind(),
        "manifest": manifest,
        "time_stamp": ds.time_stamp(),
        "label": who.shown(svc, ds.label()),
    });
    if let Dataset::Raster(l) = ds {
        v["crs"] = json!(l.crs.epsg());
        v["width"] = json!(l.width);
        v["height"] = json!(l.height);
        v["dtype"] = json!(l.dtype);
        v["nodata"] = json!(l.nodata);
        v["band_count"] = json!(l.band_count);
    }
    v
}

async fn list_layers(State(svc): Svc, headers: HeaderMap) -> Result<Json<Vec<Value>>, ApiError> {
    let who = caller(&svc, &headers)?;
    let mut out = Vec::new();
    for name in svc.store().list_refs().map_err(ApiError::internal)? {
        let Ok((manifest, ds)) = resolve(svc.store(), &name, VersionSelector::Latest) else { continue };
        if who.reads(&svc, ds.label()) {
            out.push(describe(&svc, &who, manifest, &ds));
        }
    }
    Ok(Json(out))
}

async fn layer_versions(State(svc): Svc, headers: HeaderMap, Path(name): Path<String>) -> Result<Json<Vec<Value>>, ApiError> {
    let who = caller(&svc, &headers)?;
    let list = versions(svc.store(), &name).map_err(|e| match e {
        CatalogError::UnknownDataset(_) => ApiError::NotFound,
        e => ApiError::internal(e),
    })?;
    let mut out = Vec::new();
    for (manifest, commit) in list {
        let ds = load_dataset(svc.store(), &manifest).map_err(ApiError::internal)?;
        if who.reads(&svc, ds.label()) {
            let mut v = describe(&svc, &who, manifest, &ds);
            v["created_at"] = json!(commit.created_at);
            out.push(v);
        }
    }
    if out.is_empty() {
        return Err(ApiError::Forbidden);
    }
    Ok(Json(out))
}

fn parse_u32(s: &str, what: &str) -> Result<u32, ApiError> {
    s.parse().map_err(|_| ApiError::BadRequest(format!("{what} must be a non-negative integer")))
}

async fn get_tile(
    State(svc): Svc,
    headers: HeaderMap,
    Path((name, manifest, band, tx, ty)): Path<(String, String, String, String, String)>,
) -> Result<Response, ApiError> {
    let who = caller(&svc, &headers)?;
    let (band, tx, ty) = (parse_u32(&band, "band")?, parse_u32(&tx, "tx")?, parse_u32(&ty, "ty")?);
    let digest = Digest::from_hex(&manifest).map_err(|_| ApiError::NotFound)?;
    let layer = match load_dataset(svc.store(), &digest) {
        Ok(Dataset::Raster(l)) if l.layer_name == name => l,
        _ => return Err(ApiError::NotFound),
    };
    if !who.reads(&svc, &layer.label) {
        return Err(ApiError::Forbidden);
    }
    let chunk = layer.chunk(band, tx, ty).ok_or(ApiError::NotFound)?;
    let store = svc.store().clone();
    let bytes = tokio::task::spawn_blocking(move || store.get_object(&chunk.0))
        .await
        .map_err(ApiError::internal)?
        .map_err(ApiError::internal)?;
    Ok((
        [(header::CONTENT_TYPE, "application/octet-stream".to_string()), (header::ETAG, format!("\"{}\"", chunk.0))],
        bytes,
    )
        .into_response())
}

fn doc_error(e: DataflowError) -> ApiError {
    match e {
        DataflowError::Unauthorized => ApiError::Forbidden,
        DataflowError::Store(e) => ApiError::internal(e),
        DataflowError::Catalog(CatalogError::Store(e)) => ApiError::internal(e),
        e => ApiError::Unprocessable(e.to_string()),
    }
}

async fn submit_run(State(svc): Svc, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let who = caller(&svc, &headers)?;
    let text = std::str::from_utf8(&body).map_err(|_| ApiError::Unprocessable("body is not UTF-8".into()))?;
    let doc = PipelineDoc::from_json(text).map_err(doc_error)?;
    doc.validate().map_err(doc_error)?;
    let mut pinned = BTreeMap::new();
    let mut sources = BTreeMap::new();
    for (alias, spec) in &doc.inputs {
        let (manifest, ds) = resolve(svc.store(), &spec.layer, spec.version).map_err(|e| doc_error(e.into()))?;
        pinned.insert(alias.clone(), Pinned { layer: spec.layer.clone(), manifest });
        sources.insert(alias.clone(), ds);
    }
    // Every input is checked before planning so a denied caller learns nothing
    // about the shape of what it may not read.
    if !sources.values().all(|ds| who.reads(&svc, ds.label())) {
        return Err(ApiError::Forbidden);
    }
    let plan = plan_with_sources(&doc, pinned, sources, Some(&who.principal)).map_err(doc_error)?;
    let run_id = uuid::Uuid::new_v4().to_string();
    svc.runs
        .write()
        .unwrap()
        .insert(run_id.clone(), RunEntry { submitter: who.principal.id.clone(), state: RunState::Running });
    let worker = svc.clone();
    let id = run_id.clone();
    tokio::task::spawn_blocking(move || {
        let opts = ExecOptions { workers: worker.config.workers, principal: Some(&who.principal), run_id: Some(id.clone()) };
        let state = match execute_plan(&worker.store, &plan, &opts) {
            Ok((digest, _)) => RunState::Succeeded(digest),
            Err(e) => RunState::Failed(e.to_string()),
        };
        if let Some(entry) = worker.runs.write().unwrap().get_mut(&id) {
            entry.state = state;
        }
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "run_id": run_id, "status": "running" }))).into_response())
}

enum Lookup {
    Running,
    Failed { submitter: String, error: String },
    Done(RunRecord),
}

fn lookup_run(svc: &Service, run_id: &str) -> Result<Lookup, ApiError> {
    let entry = svc.runs.read().unwrap().get(run_id).cloned();
    let digest = match entry {
        Some(RunEntry { state: RunState::Running, .. }) => return Ok(Lookup::Running),
        Some(RunEntry { state: RunState::Failed(error), submitter }) => return Ok(Lookup::Failed { submitter, error }),
        Some(RunEntry { state: RunState::Succeeded(d), .. }) => d,
        None => return RunRecord::load(svc.store(), run_id).map_err(ApiError::internal)?.map(|(_, r)| Lookup::Done(r)).ok_or(ApiError::NotFound),
    };
    svc.store().get_json(&digest).map(Lookup::Done).map_err(ApiError::internal)
}

/// Published outputs the caller may read, keyed by node id.
fn visible_outputs(svc: &Service, who: &Caller, record: &RunRecord) -> (BTreeMap<String, Value>, usize) {
    let mut out = BTreeMap::new();
    let mut hidden = 0;
    for id in record.outputs.keys() {
        let Some(n) = record.node(id) else { continue };
        if who.reads(svc, &n.label) {
            out.insert(id.clone(), json!({ "kind": n.kind, "object": n.object, "label": who.shown(svc, &n.label) }));
        } else {
            hidden += 1;
        }
    }
    (out, hidden)
}

async fn get_run(State(svc): Svc, headers: HeaderMap, Path(run_id): Path<String>) -> Result<Json<Value>, ApiError> {
    let who = caller(&svc, &headers)?;
    Ok(Json(match lookup_run(&svc, &run_id)? {
        Lookup::Running => json!({ "run_id": run_id, "status": "running" }),
        Lookup::Failed { submitter, error } => {
            let mut v = json!({ "run_id": run_id, "status": "failed" });
            if submitter == who.principal.id {
                v["error"] = json!(error);
            }
            v
        }
        Lookup::Done(record) => {
            let (outputs, _) = visible_outputs(&svc, &who, &record);
            json!({
                "run_id": run_id,
                "status": "succeeded",
                "executed": record.executed,
                "cache_hits": record.cache_hits,
                "started_at": record.started_at,
                "finished_at": record.finished_at,
                "outputs": outputs,
            })
        }
    }))
}

async fn get_results(State(svc): Svc, headers: HeaderMap, Path(run_id): Path<String>) -> Result<Json<Value>, ApiError> {
    let who = caller(&svc, &headers)?;
    let record = match lookup_run(&svc, &run_id)? {
        Lookup::Running => return Err(ApiError::Conflict("run is still running".into())),
        Lookup::Failed { .. } => return Err(ApiError::Conflict("run failed".into())),
        Lookup::Done(r) => r,
    };
    let (mut outputs, hidden) = visible_outputs(&svc, &who, &record);
    if outputs.is_empty() && hidden > 0 {
        return Err(ApiError::Forbidden);
    }
    for v in outputs.values_mut() {
        let object: Digest = serde_json::from_value(v["object"].clone()).map_err(ApiError::internal)?;
        v["value"] = svc.store().get_json_value(&object).map_err(ApiError::internal)?;
    }
    Ok(Json(json!({ "run_id": run_id, "outputs": outputs })))
}

async fn get_provenance(State(svc): Svc, headers: HeaderMap, Path(hash): Path<String>) -> Result<Json<Value>, ApiError> {
    let who = caller(&svc, &headers)?;
    let digest = Digest::from_hex(&hash).map_err(|_| ApiError::BadRequest("expected a 64-digit hex digest".into()))?;
    let store = svc.store().clone();
    let tree = tokio::task::spawn_blocking(move || provenance_of(&store, &digest))
        .await
        .map_err(ApiError::internal)?
        .map_err(ApiError::internal)?
        .ok_or(ApiError::NotFound)?;
    // An object without a provenance record is not a ref this endpoint knows.
    if matches!(tree, ProvNode::Missing { .. }) {
        return Err(ApiError::NotFound);
    }
    let filtered = filter_provenance(&tree, &who.principal, &who.tags, svc.clock().now());
    Ok(Json(serde_json::to_value(&filtered).map_err(ApiError::internal)?))
}

async fn create_subscription(State(svc): Svc, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let who = caller(&svc, &headers)?;
    let req: SubscriptionRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::Unprocessable(format!("invalid subscription: {e}")))?;
    let sub = svc.subscribe(&who.principal, &who.tags, req)?;
    Ok((StatusCode::CREATED, Json(json!({ "id": sub.id, "layer": sub.layer_name }))).into_response())
}

async fn delete_subscription(State(svc): Svc, headers: HeaderMap, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    let who = caller(&svc, &headers)?;
    svc.unsubscribe(&who.principal, &id)?;
    Ok(StatusCode::NO_CONTENT)
}
