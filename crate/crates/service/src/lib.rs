//! HTTP backend for crowdsourced word emphasis annotation.
//!
//! Routes (payloads in `API.md`):
//!
//! * `GET /prescreen`, `GET /prescreen/{question}/audio`, `POST /prescreen`
//! * `GET /batch?annotator_id=…`
//! * `GET /audio/{utterance}`
//! * `POST /submit`
//! * `GET /export` (admin)

pub mod error;
pub mod store;

use std::io::Cursor;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap};
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use error::ServiceError;
pub use store::{AnnotationStore, Batch, ServiceConfig, SubmitOutcome, SubmittedUtterance};

type Shared = Arc<AnnotationStore>;

/// Runs a store operation off the async executor; the store locks and syncs
/// its log to disk.
async fn blocking<T, F>(store: &Shared, f: F) -> Result<T, ServiceError>
where
    T: Send + 'static,
    F: FnOnce(&AnnotationStore) -> Result<T, ServiceError> + Send + 'static,
{
    let store = store.clone();
    tokio::task::spawn_blocking(move || f(&store))
        .await
        .map_err(|e| ServiceError::Storage(e.to_string()))?
}

#[derive(Debug, Deserialize)]
pub struct PrescreenRequest {
    pub annotator_id: String,
    pub answers: Vec<u32>,
}

#[derive(Debug, Deserialize)]
pub struct BatchQuery {
    pub annotator_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchUtterance {
    pub utterance_id: String,
    pub tokens: Vec<String>,
    pub audio_url: String,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResponse {
    pub batch_id: String,
    pub annotator_id: String,
    pub status: store::BatchStatus,
    pub utterances: Vec<BatchUtterance>,
}

#[derive(Debug, Deserialize)]
pub struct SubmitRequest {
    pub annotator_id: String,
    pub batch_id: String,
    pub annotations: Vec<SubmittedUtterance>,
    #[serde(default)]
    pub request_token: Option<String>,
}

pub fn router(store: Arc<AnnotationStore>) -> Router {
    Router::new()
        .route("/prescreen", get(prescreen_info).post(prescreen))
        .route("/prescreen/{question}/audio", get(prescreen_audio))
        .route("/batch", get(batch))
        .route("/audio/{utterance}", get(audio))
        .route("/submit", axum::routing::post(submit))
        .route("/export", get(export))
        .with_state(store)
}

async fn prescreen_info(State(store): State<Shared>) -> impl IntoResponse {
    let questions: Vec<String> = (0..store.config().prescreen_key.len())
        .map(|q| format!("/prescreen/{q}/audio"))
        .collect();
    Json(json!({
        "instructions": "Count the tones in each clip.",
        "questions": questions,
        "attempts": store.config().prescreen_attempts,
    }))
}

/// `count` 440 Hz tones of 200 ms separated by 300 ms of silence, 16 kHz WAV.
pub fn tone_clip(count: u32) -> Vec<u8> {
    const RATE: u32 = 16_000;
    let mut samples = Vec::new();
    for _ in 0..count {
        samples.extend((0..RATE / 5).map(|n| {
            let t = n as f32 / RATE as f32;
            0.3 * (2.0 * std::f32::consts::PI * 440.0 * t).sin()
        }));
        samples.extend(std::iter::repeat(0.0).take((RATE * 3 / 10) as usize));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut out = Cursor::new(Vec::new());
    let mut writer = hound::WavWriter::new(&mut out, spec).expect("in-memory writer");
    for s in samples {
        writer
            .write_sample((s * i16::MAX as f32) as i16)
            .expect("in-memory write");
    }
    writer.finalize().expect("in-memory finalize");
    out.into_inner()
}

async fn prescreen_audio(
    State(store): State<Shared>,
    Path(question): Path<usize>,
) -> Result<impl IntoResponse, ServiceError> {
    let count = *store
        .config()
        .prescreen_key
        .get(question)
        .ok_or_else(|| ServiceError::NotFound(format!("question {question}")))?;
    Ok(([(header::CONTENT_TYPE, "audio/wav")], tone_clip(count)))
}

async fn prescreen(
    State(store): State<Shared>,
    Json(request): Json<PrescreenRequest>,
) -> Result<impl IntoResponse, ServiceError> {
    let outcome = blocking(&store, move |s| s.prescreen(&request.annotator_id, &request.answers)).await?;
    Ok(Json(outcome))
}

fn batch_response(store: &AnnotationStore, batch: Batch) -> BatchResponse {
    let utterances = batch
        .utterances
        .iter()
        .map(|id| {
            let entry = store.entry(id).expect("assigned utterances are in the catalog");
            BatchUtterance {
                utterance_id: id.clone(),
                tokens: entry.tokens.clone(),
                audio_url: format!("/audio/{id}"),
                duration_s: entry.duration_s,
            }
        })
        .collect();
    BatchResponse {
        batch_id: batch.batch_id,
        annotator_id: batch.annotator_id,
        status: batch.status,
        utterances,
    }
}

async fn batch(
    State(store): State<Shared>,
    Query(query): Query<BatchQuery>,
) -> Result<Json<BatchResponse>, ServiceError> {
    let assigned = blocking(&store, move |s| s.assign_batch(&query.annotator_id)).await?;
    Ok(Json(batch_response(&store, assigned)))
}

async fn audio(State(store): State<Shared>, Path(utterance): Path<String>) -> Result<impl IntoResponse, ServiceError> {
    let entry = store
        .entry(&utterance)
        .ok_or_else(|| ServiceError::NotFound(format!("utterance `{utterance}`")))?;
    let bytes = tokio::fs::read(&entry.audio).await?;
    Ok(([(header::CONTENT_TYPE, "audio/wav")], bytes))
}

async fn submit(
    State(store): State<Shared>,
    Json(request): Json<SubmitRequest>,
) -> Result<Json<SubmitOutcome>, ServiceError> {
    let outcome = blocking(&store, move |s| {
        s.submit(
            &request.annotator_id,
            &request.batch_id,
            request.annotations,
            request.request_token,
        )
    })
    .await?;
    Ok(Json(outcome))
}

async fn export(State(store): State<Shared>, headers: HeaderMap) -> Result<Json<store::Export>, ServiceError> {
    if let Some(token) = &store.config().admin_token {
        let presented = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return Err(ServiceError::Unauthorized);
        }
    }
    Ok(Json(blocking(&store, |s| s.export()).await?))
}

/// Serves until Ctrl-C.
pub async fn serve(address: SocketAddr, store: Arc<AnnotationStore>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(address).await?;
    log::info!("annotation service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(store))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
