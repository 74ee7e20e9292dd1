use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::RwLock;

use super::{CurationStore, SurveyPoint};
use crate::error::Error;
use crate::geogrid::{CurationDecision, Decision, Tile, TileStatus};

type Shared = Arc<RwLock<CurationStore>>;

const DEFAULT_PER_PAGE: usize = 100;
const MAX_PER_PAGE: usize = 1000;

#[derive(Debug, Default, Deserialize)]
pub struct TileQuery {
    pub status: Option<TileStatus>,
    pub region: Option<String>,
    pub page: Option<usize>,
    pub per_page: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TilePage {
    pub total: usize,
    pub page: usize,
    pub per_page: usize,
    pub tiles: Vec<Tile>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TileDetail {
    pub tile: Tile,
    pub survey_points: Vec<SurveyPoint>,
    pub history: Vec<CurationDecision>,
    pub image_url: String,
    pub reference_url: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub decision: Decision,
    pub annotator: String,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ProgressResponse {
    pub total: usize,
    pub counts: BTreeMap<TileStatus, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ZeroCandidateRequest {
    pub quotas: BTreeMap<String, usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Deserialize)]
struct ImageQuery {
    layer: Option<String>,
}

struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::UnknownTile(_) | Error::Io { .. } => StatusCode::NOT_FOUND,
            Error::InvalidDecision { .. } | Error::InvalidArgument(_) | Error::QuotaExceeded { .. } => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut body = json!({ "error": self.0.to_string() });
        if let Error::QuotaExceeded { region, available, .. } = &self.0 {
            body["region"] = json!(region);
            body["available"] = json!(available);
        }
        (status, Json(body)).into_response()
    }
}

async fn list_tiles(State(store): State<Shared>, Query(q): Query<TileQuery>) -> Json<TilePage> {
    let store = store.read().await;
    let per_page = q.per_page.unwrap_or(DEFAULT_PER_PAGE).clamp(1, MAX_PER_PAGE);
    let page = q.page.unwrap_or(0);
    let matching: Vec<&Tile> = store
        .tiles()
        .iter()
        .filter(|t| q.status.is_none_or(|s| t.status == s))
        .filter(|t| q.region.as_ref().is_none_or(|r| &t.region_key == r))
        .collect();
    Json(TilePage {
        total: matching.len(),
        page,
        per_page,
        tiles: matching
            .into_iter()
            .skip(page.saturating_mul(per_page))
            .take(per_page)
            .cloned()
            .collect(),
    })
}

async fn tile_detail(State(store): State<Shared>, Path(id): Path<String>) -> Result<Json<TileDetail>, ApiError> {
    let store = store.read().await;
    let tile = store.tile_or_cell(&id).ok_or_else(|| Error::UnknownTile(id.clone()))?;
    Ok(Json(TileDetail {
        survey_points: store.survey_points(&id).to_vec(),
        history: store.history(&id).into_iter().cloned().collect(),
        image_url: format!("/api/tiles/{id}/image.png"),
        reference_url: format!("/api/tiles/{id}/image.png?layer=reference"),
        tile,
    }))
}

async fn tile_image(
    State(store): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<ImageQuery>,
) -> Result<Response, ApiError> {
    let store = store.read().await;
    let png = match q.layer.as_deref() {
        None | Some("chip") => store.chip_png(&id)?,
        Some("reference") => store.reference_png(&id)?,
        Some(other) => return Err(Error::InvalidArgument(format!("unknown layer `{other}`")).into()),
    };
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn post_decision(
    State(store): State<Shared>,
    Path(id): Path<String>,
    Json(req): Json<DecisionRequest>,
) -> Result<Json<Tile>, ApiError> {
    let mut store = store.write().await;
    Ok(Json(store.decide(&id, req.decision, &req.annotator, req.note)?))
}

async fn progress(State(store): State<Shared>) -> Json<ProgressResponse> {
    let store = store.read().await;
    Json(ProgressResponse {
        total: store.tiles().len(),
        counts: store.counts(),
    })
}

async fn zero_candidates(
    State(store): State<Shared>,
    Json(req): Json<ZeroCandidateRequest>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let store = store.read().await;
    let proposals = store.zero_candidates(&req.quotas, req.seed)?;
    Ok(Json(json!({ "proposed_status": "zero", "proposals": proposals })))
}

/// Routes of the curation API over a shared store.
pub fn router(store: CurationStore) -> Router {
    let shared: Shared = Arc::new(RwLock::new(store));
    Router::new()
        .route("/api/tiles", get(list_tiles))
        .route("/api/tiles/{id}", get(tile_detail))
        .route("/api/tiles/{id}/image.png", get(tile_image))
        .route("/api/tiles/{id}/decision", post(post_decision))
        .route("/api/progress", get(progress))
        .route("/api/zero-candidates", post(zero_candidates))
        .with_state(shared)
}

/// Opens the state directory and serves until the process is stopped.
pub async fn serve(state_dir: &std::path::Path, addr: SocketAddr) -> crate::Result<()> {
    let store = CurationStore::open(state_dir)?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(state_dir, e))?;
    tracing::info!(%addr, dir = %state_dir.display(), "curation service listening");
    axum::serve(listener, router(store))
        .await
        .map_err(|e| Error::io(state_dir, e))
}
