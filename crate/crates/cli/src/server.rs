use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use crate::segment::{ApiError, SegmentRequest, Segmenter};

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.message() }))).into_response()
    }
}

pub fn router(seg: Arc<Segmenter>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/samples", get(samples))
        .route("/v1/image/{id}", get(image))
        .route("/v1/segment", post(segment))
        .with_state(seg)
}

async fn health(State(seg): State<Arc<Segmenter>>) -> impl IntoResponse {
    let cfg = &seg.state().config;
    Json(json!({
        "status": "ok",
        "model": { "d_model": cfg.d_model, "input_size": cfg.input_size, "parameters": seg.state().num_values() },
        "splits": seg.split_names(),
        "requests": seg.requests(),
    }))
}

#[derive(Deserialize)]
struct SamplesQuery {
    split: String,
    #[serde(default)]
    page: usize,
}

async fn samples(State(seg): State<Arc<Segmenter>>, Query(q): Query<SamplesQuery>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(seg.samples(&q.split, q.page)?))
}

async fn image(State(seg): State<Arc<Segmenter>>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let png = seg.image_png(&id)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png))
}

async fn segment(
    State(seg): State<Arc<Segmenter>>,
    body: Result<Json<SegmentRequest>, axum::extract::rejection::JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    let out = tokio::task::spawn_blocking(move || seg.segment(&req))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(out))
}

pub async fn serve(seg: Arc<Segmenter>, port: u16) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(seg)).await?;
    Ok(())
}
