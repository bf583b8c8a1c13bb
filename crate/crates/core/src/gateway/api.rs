use std::path::{Component, Path, PathBuf};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::queue::{QueueError, ReviewItem};
use super::targets::TargetResponse;
use super::AppState;
use crate::ingest::{read_embedding, read_trace, IngestError};
use crate::numkit::Vector;
use crate::router::{RoutingDecision, Thresholds};
use crate::signals::{
    score, ConfidenceBreakdown, HiddenStateTrace, ReferenceEmbedding, SignalError, REFERENCE_DIM,
};

/// Inline values or a path under the gateway's data root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum Source<T> {
    Inline(T),
    Path(PathBuf),
}

/// One query's signals on the wire. `trace` is `{"inline": [[f64; H]; L]}`
/// or `{"path": "..."}`; `ref_embedding` is `{"inline": [f64; 384]}` or a path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteRequest {
    pub query_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_text: Option<String>,
    #[serde(default)]
    pub trace: Option<Source<Vec<Vec<f64>>>>,
    #[serde(default)]
    pub ref_embedding: Option<Source<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteResponse {
    pub decision: RoutingDecision,
    pub target: TargetResponse,
    /// Position of this decision in the metrics ledger, starting at 1.
    pub sequence: u64,
}

#[derive(Debug, Clone, Deserialize)]
struct ResolveBody {
    resolution: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub field: Option<String>,
    pub message: String,
    pub decision: Option<Box<RoutingDecision>>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            field: None,
            message: message.into(),
            decision: None,
        }
    }

    fn field(status: StatusCode, field: &str, message: impl Into<String>) -> Self {
        Self {
            field: Some(field.into()),
            ..Self::new(status, message)
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        tracing::error!("internal error: {e}");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(f) = self.field {
            body["field"] = json!(f);
        }
        if let Some(d) = self.decision {
            body["decision"] = json!(d);
        }
        (self.status, Json(body)).into_response()
    }
}

impl From<QueueError> for ApiError {
    fn from(e: QueueError) -> Self {
        match e {
            QueueError::NotFound(_) => ApiError::new(StatusCode::NOT_FOUND, e.to_string()),
            QueueError::AlreadyResolved(_) => ApiError::new(StatusCode::CONFLICT, e.to_string()),
            other => ApiError::internal(other),
        }
    }
}

/// Deserializes a JSON body, reporting the offending field on failure.
fn parse_body<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.to_string();
        let field = if path == "." {
            msg.split('`')
                .nth(1)
                .filter(|_| msg.starts_with("missing field"))
                .map(str::to_string)
        } else {
            Some(path)
        };
        ApiError {
            field,
            ..ApiError::new(
                StatusCode::BAD_REQUEST,
                format!("malformed request body: {msg}"),
            )
        }
    })
}

fn resolve_path(root: Option<&Path>, rel: &Path, field: &str) -> Result<PathBuf, ApiError> {
    let root = root.ok_or_else(|| {
        ApiError::field(
            StatusCode::BAD_REQUEST,
            field,
            "path sources are disabled; send the values inline",
        )
    })?;
    if rel
        .components()
        .any(|c| !matches!(c, Component::Normal(_) | Component::CurDir))
    {
        return Err(ApiError::field(
            StatusCode::BAD_REQUEST,
            field,
            format!(
                "path `{}` must be relative to the data root without `..`",
                rel.display()
            ),
        ));
    }
    Ok(root.join(rel))
}

fn ingest_error(field: &str, e: IngestError) -> ApiError {
    match e {
        IngestError::Io { .. } => ApiError::field(StatusCode::BAD_REQUEST, field, e.to_string()),
        other => ApiError::field(StatusCode::UNPROCESSABLE_ENTITY, field, other.to_string()),
    }
}

fn load_inputs(
    state: &AppState,
    req: &RouteRequest,
    hidden_dim: usize,
) -> Result<(HiddenStateTrace, ReferenceEmbedding), ApiError> {
    let root = state.data_root();
    let trace = match &req.trace {
        None => {
            return Err(ApiError::field(
                StatusCode::BAD_REQUEST,
                "trace",
                "missing field `trace`",
            ))
        }
        Some(Source::Inline(rows)) => HiddenStateTrace::new(
            &req.query_id,
            rows.iter().cloned().map(Vector::new).collect(),
        )
        .map_err(|e| ApiError::field(StatusCode::BAD_REQUEST, "trace", e.to_string()))?,
        Some(Source::Path(p)) => {
            let mut t = read_trace(&resolve_path(root, p, "trace")?)
                .map_err(|e| ingest_error("trace", e))?;
            t.set_query_id(&req.query_id);
            t
        }
    };
    if trace.hidden_dim() != hidden_dim {
        return Err(ApiError::field(
            StatusCode::UNPROCESSABLE_ENTITY,
            "trace",
            format!(
                "trace hidden dim {} does not match bundle hidden dim {hidden_dim}",
                trace.hidden_dim()
            ),
        ));
    }
    let reference = match &req.ref_embedding {
        None => {
            return Err(ApiError::field(
                StatusCode::BAD_REQUEST,
                "ref_embedding",
                "missing field `ref_embedding`",
            ))
        }
        Some(Source::Inline(v)) => {
            if v.len() != REFERENCE_DIM {
                return Err(ApiError::field(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    "ref_embedding",
                    format!(
                        "ref_embedding dim {} does not match required dim {REFERENCE_DIM}",
                        v.len()
                    ),
                ));
            }
            ReferenceEmbedding::new(&req.query_id, Vector::new(v.clone())).map_err(|e| {
                ApiError::field(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    "ref_embedding",
                    e.to_string(),
                )
            })?
        }
        Some(Source::Path(p)) => read_embedding(&resolve_path(root, p, "ref_embedding")?)
            .map_err(|e| ingest_error("ref_embedding", e))?,
    };
    Ok((trace, reference))
}

fn score_request(
    state: &AppState,
    req: &RouteRequest,
) -> Result<(ConfidenceBreakdown, Thresholds), ApiError> {
    // one snapshot per request; a concurrent reload does not affect it
    let bundle = state.bundle();
    let (trace, reference) = load_inputs(state, req, bundle.hidden_dim())?;
    let breakdown = score(&trace, &reference, &bundle).map_err(|e| match e {
        SignalError::Dimension { .. } => {
            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())
        }
        other => ApiError::internal(other),
    })?;
    Ok((breakdown, bundle.thresholds))
}

pub(super) async fn post_score(
    State(state): State<AppState>,
    body: Bytes,
) -> Result<Json<ConfidenceBreakdown>, ApiError> {
    let req: RouteRequest = parse_body(&body)?;
    Ok(Json(score_request(&state, &req)?.0))
}

pub(super) async fn post_route(
    State(state): State<AppState>,
    body: Bytes,
) -> Result<Json<RouteResponse>, ApiError> {
    let req: RouteRequest = parse_body(&body)?;
    let (breakdown, thresholds) = score_request(&state, &req)?;
    let decision =
        RoutingDecision::new(&req.query_id, breakdown, &thresholds).map_err(ApiError::internal)?;
    let (sequence, target) = state.record(&req, &decision)?;
    match target {
        Some(target) => Ok(Json(RouteResponse {
            decision,
            target,
            sequence,
        })),
        None => {
            let t = state
                .targets()
                .for_action(decision.action)
                .expect("non-human action")
                .clone();
            match t.handle(&req, &decision) {
                Ok(target) => Ok(Json(RouteResponse {
                    decision,
                    target,
                    sequence,
                })),
                Err(e) => {
                    state.record_target_failure();
                    tracing::warn!(query_id = %req.query_id, "{e}");
                    Err(ApiError {
                        decision: Some(Box::new(decision)),
                        ..ApiError::new(StatusCode::BAD_GATEWAY, e.to_string())
                    })
                }
            }
        }
    }
}

pub(super) async fn get_pending(State(state): State<AppState>) -> Json<Vec<ReviewItem>> {
    Json(state.pending())
}

pub(super) async fn post_resolve(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<ReviewItem>, ApiError> {
    let b: ResolveBody = parse_body(&body)?;
    Ok(Json(state.resolve(&id, b.resolution)?))
}

pub(super) async fn get_health(State(state): State<AppState>) -> Json<serde_json::Value> {
    let b = state.bundle();
    Json(json!({
        "status": "ok",
        "bundle_version": b.bundle_version,
        "thresholds_version": b.thresholds_version(),
        "thresholds": b.thresholds,
        "hidden_dim": b.hidden_dim(),
    }))
}

pub(super) async fn get_metrics(State(state): State<AppState>) -> Json<super::MetricsSnapshot> {
    Json(state.metrics())
}

pub(super) async fn post_reload(
    State(state): State<AppState>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let (previous, current) = state.reload().await.map_err(ApiError::internal)?;
    Ok(Json(
        json!({ "previous_version": previous, "bundle_version": current }),
    ))
}
