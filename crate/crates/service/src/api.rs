use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use splatfield_core::query::{segment_3d, QuerySpec};
use splatfield_core::scene_io::save_ply;
use splatfield_core::Error as CoreError;

use crate::state::{AppState, RenderMode, Session};

const HISTOGRAM_BINS: usize = 32;

#[derive(Debug)]
pub(crate) struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let status = match e {
            CoreError::Dimension(_) | CoreError::InvalidView { .. } | CoreError::InvalidArgument(_) => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(json!({ "error": self.message }));
        if self.status == StatusCode::SERVICE_UNAVAILABLE {
            (self.status, [(header::RETRY_AFTER, "1")], body).into_response()
        } else {
            (self.status, body).into_response()
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub(crate) fn routes() -> Router<AppState> {
    Router::new()
        .route("/scene", get(scene))
        .route("/query", post(query))
        .route("/render", get(render))
        .route("/export", post(export))
        .fallback(not_found)
}

pub(crate) async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "no such endpoint")
}

fn session(state: &AppState) -> ApiResult<Arc<Session>> {
    state.load_state().map_err(|failed| match failed {
        None => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "scene is still loading"),
        Some(m) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("scene failed to load: {m}")),
    })
}

async fn scene(State(state): State<AppState>) -> ApiResult<Json<serde_json::Value>> {
    let s = session(&state)?;
    Ok(Json(json!({
        "gaussians": s.scene.cloud.len(),
        "pruned": s.store.pruned_count(),
        "featureDim": s.store.dim(),
        "views": s.scene.view_count(),
        "prompts": s.prompts.names(),
        "thetaDefault": s.theta_default,
    })))
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum PromptRef {
    Name(String),
    Vector(Vec<f32>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryBody {
    positive: PromptRef,
    #[serde(default)]
    negatives: Vec<PromptRef>,
    theta: Option<f64>,
    argmax: Option<bool>,
}

fn resolve(session: &Session, p: PromptRef) -> ApiResult<Vec<f32>> {
    match p {
        PromptRef::Name(name) => session
            .prompts
            .get(&name)
            .map(|v| v.to_vec())
            .ok_or_else(|| ApiError::bad_request(format!("unknown prompt '{name}'"))),
        PromptRef::Vector(v) => Ok(v),
    }
}

async fn query(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let s = session(&state)?;
    let body: QueryBody =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid query body: {e}")))?;
    let theta = body.theta.unwrap_or(s.theta_default);
    let positive = resolve(&s, body.positive)?;
    let negatives = body
        .negatives
        .into_iter()
        .map(|n| resolve(&s, n))
        .collect::<ApiResult<Vec<_>>>()?;
    let spec = QuerySpec {
        positive,
        negatives,
        theta,
        require_argmax: body.argmax.unwrap_or(true),
    };
    spec.validate(s.store.dim())?;

    let worker = s.clone();
    let (result, elapsed) = tokio::task::spawn_blocking(move || {
        let start = Instant::now();
        let r = segment_3d(&worker.store, &spec);
        (r, start.elapsed())
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let result = result?;
    let members = result.member_count();
    let histogram = result.histogram(HISTOGRAM_BINS);
    let entry = state.record_query(result);
    tracing::debug!("{} -> {members} members in {:?}", entry.id, elapsed);
    Ok(Json(json!({
        "queryId": entry.id,
        "memberCount": members,
        "scoreHistogram": histogram,
        "theta": theta,
        "latencyMs": elapsed.as_secs_f64() * 1e3,
    })))
}

async fn render(State(state): State<AppState>, Query(params): Query<HashMap<String, String>>) -> ApiResult<Response> {
    let s = session(&state)?;
    let id = params
        .get("queryId")
        .ok_or_else(|| ApiError::bad_request("missing queryId"))?;
    let view: usize = params
        .get("view")
        .ok_or_else(|| ApiError::bad_request("missing view"))?
        .parse()
        .map_err(|_| ApiError::bad_request("view must be a non-negative integer"))?;
    if view >= s.scene.view_count() {
        return Err(ApiError::bad_request(format!(
            "view {view} out of range (scene has {} views)",
            s.scene.view_count()
        )));
    }
    let mode: RenderMode = params
        .get("mode")
        .map(String::as_str)
        .unwrap_or("color")
        .parse()
        .map_err(ApiError::bad_request)?;
    let entry = state
        .query(id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown queryId '{id}'")))?;
    let png = state
        .render_cached(s, entry, view, mode)
        .await
        .map_err(|m| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, m))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png.as_ref().clone()).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct ExportBody {
    query_id: String,
    what: String,
}

async fn export(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let s = session(&state)?;
    let body: ExportBody =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid export body: {e}")))?;
    let keep = match body.what.as_str() {
        "extraction" => true,
        "deletion" => false,
        other => {
            return Err(ApiError::bad_request(format!(
                "unknown export '{other}' (expected extraction or deletion)"
            )))
        }
    };
    let entry = state
        .query(&body.query_id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown queryId '{}'", body.query_id)))?;
    let path = state.out_dir().join(format!("{}_{}.ply", entry.id, body.what));
    let target = path.clone();
    let out_dir = state.out_dir().clone();
    let written = tokio::task::spawn_blocking(move || -> ApiResult<usize> {
        let cloud = s.edited(&entry.result, keep)?;
        if cloud.is_empty() {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "the edit leaves no Gaussians to export",
            ));
        }
        std::fs::create_dir_all(&out_dir)
            .map_err(|e| ApiError::new(StatusCode::INSUFFICIENT_STORAGE, format!("{}: {e}", out_dir.display())))?;
        save_ply(&cloud, &target).map_err(|e| ApiError::new(StatusCode::INSUFFICIENT_STORAGE, e.to_string()))?;
        Ok(cloud.len())
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(json!({
        "path": path.display().to_string(),
        "gaussians": written,
    })))
}
