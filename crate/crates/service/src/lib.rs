//! HTTP front end for interactive refinement. Reads are concurrent; every
//! mutation goes through one lock and at most one fine-tune job runs.
//!
//! | method | path                          | result                                  |
//! |--------|-------------------------------|-----------------------------------------|
//! | GET    | `/api/queue`                  | queued confidence records, least first  |
//! | GET    | `/api/images/{id}`            | RGB PNG                                 |
//! | GET    | `/api/predictions/{id}`       | 8-bit soft-mask PNG, `round(p·255)`     |
//! | GET    | `/api/predictions/{id}/score` | confidence record JSON                  |
//! | PUT    | `/api/rectifications/{id}`    | 0/255 PNG body; 204, or 202 mid-job     |
//! | GET    | `/api/rectifications/{id}`    | the stored mask as PNG                  |
//! | POST   | `/api/fine-tune`              | 202 `{job_id}` once the queue is full   |
//! | GET    | `/api/jobs/{id}`              | status and before/after report          |

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::watch;

use crackseg::data::{decode_binary_mask_png, encode_mask_png, encode_probability_png, encode_rgb_png, AnnotatedSample};
use crackseg::fewshot::{Author, ConfidenceRecord, RefineConfig, RefineReport, RefineSession};
use crackseg::mask::BinaryMask;
use crackseg::model::Model;
use crackseg::training::TrainConfig;
use crackseg::Error;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub train: TrainConfig,
    pub refine: RefineConfig,
    /// Learning rate the model was last trained with.
    pub prior_lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JobView {
    pub job_id: u64,
    pub status: JobStatus,
    pub round: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<RefineReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QueueEntry {
    #[serde(flatten)]
    pub record: ConfidenceRecord,
    pub rectified: bool,
}

struct Inner {
    model: Model,
    session: Option<RefineSession>,
    round: u32,
    jobs: BTreeMap<u64, JobView>,
    running: Option<u64>,
    /// Submissions received while a job runs, applied to the next round.
    deferred: Vec<(String, BinaryMask)>,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Mutex<Inner>>,
    cfg: Arc<ServiceConfig>,
    finished: watch::Sender<Option<u64>>,
}

impl AppState {
    /// Scores `eval_set` with `model` and opens the first round.
    pub fn new(model: Model, eval_set: Vec<AnnotatedSample>, cfg: ServiceConfig) -> crackseg::Result<Self> {
        let session = RefineSession::prepare(&model, eval_set, &cfg.refine, cfg.train.batch_size)?;
        Ok(Self {
            inner: Arc::new(Mutex::new(Inner {
                model,
                session: Some(session),
                round: 1,
                jobs: BTreeMap::new(),
                running: None,
                deferred: Vec::new(),
            })),
            cfg: Arc::new(cfg),
            finished: watch::channel(None).0,
        })
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Current weights.
    pub fn model(&self) -> Model {
        self.lock().model.clone()
    }

    pub fn job(&self, id: u64) -> Option<JobView> {
        self.lock().jobs.get(&id).cloned()
    }

    /// Yields the id of each job as it finishes, successfully or not.
    pub fn subscribe(&self) -> watch::Receiver<Option<u64>> {
        self.finished.subscribe()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/queue", get(queue))
        .route("/api/images/{id}", get(image))
        .route("/api/predictions/{id}", get(prediction))
        .route("/api/predictions/{id}/score", get(score))
        .route("/api/rectifications/{id}", get(rectification).put(submit))
        .route("/api/fine-tune", post(fine_tune))
        .route("/api/jobs/{id}", get(job))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

struct ApiError(StatusCode, serde_json::Value);

impl ApiError {
    fn new(status: StatusCode, msg: impl std::fmt::Display) -> Self {
        Self(status, serde_json::json!({ "error": msg.to_string() }))
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnknownId(_) => StatusCode::NOT_FOUND,
            Error::NotQueued(_) => StatusCode::CONFLICT,
            Error::Dataset(_) | Error::Image(_) | Error::ShapeMismatch { .. } | Error::Contract { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn no_round() -> ApiError {
    ApiError::new(StatusCode::GONE, "no refinement round is open")
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn queue(State(s): State<AppState>) -> Json<Vec<QueueEntry>> {
    let inner = s.lock();
    let entries = inner.session.as_ref().map_or_else(Vec::new, |sess| {
        sess.queue()
            .iter()
            .map(|r| QueueEntry {
                record: r.clone(),
                rectified: sess.rectification(&r.image_id).is_some(),
            })
            .collect()
    });
    Json(entries)
}

async fn image(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let inner = s.lock();
    let sess = inner.session.as_ref().ok_or_else(no_round)?;
    Ok(png(encode_rgb_png(&sess.sample(&id)?.image)?))
}

async fn prediction(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let inner = s.lock();
    let sess = inner.session.as_ref().ok_or_else(no_round)?;
    Ok(png(encode_probability_png(sess.prediction(&id)?.0)?))
}

async fn score(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<ConfidenceRecord>> {
    let inner = s.lock();
    let sess = inner.session.as_ref().ok_or_else(no_round)?;
    Ok(Json(sess.prediction(&id)?.1.clone()))
}

async fn rectification(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let inner = s.lock();
    let sess = inner.session.as_ref().ok_or_else(no_round)?;
    sess.sample(&id)?;
    let r = sess
        .rectification(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no rectification for `{id}`")))?;
    Ok(png(encode_mask_png(&r.mask)?))
}

async fn submit(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let mask = decode_binary_mask_png(&body)?;
    let mut inner = s.lock();
    if inner.running.is_some() {
        let sess = inner.session.as_ref().ok_or_else(no_round)?;
        let sample = sess.sample(&id)?;
        if (sample.image.height, sample.image.width) != (mask.height, mask.width) {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, "mask extents differ from the image"));
        }
        inner.deferred.retain(|(d, _)| *d != id);
        inner.deferred.push((id, mask));
        let body = serde_json::json!({ "status": "queued_for_next_round" });
        return Ok((StatusCode::ACCEPTED, Json(body)).into_response());
    }
    let sess = inner.session.as_mut().ok_or_else(no_round)?;
    sess.submit(&id, mask, Author::Human)?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

async fn job(State(s): State<AppState>, Path(id): Path<u64>) -> ApiResult<Json<JobView>> {
    s.job(id)
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown job {id}")))
}

async fn fine_tune(State(s): State<AppState>) -> ApiResult<Response> {
    let (job_id, model, session) = {
        let mut inner = s.lock();
        if let Some(running) = inner.running {
            return Err(ApiError::new(StatusCode::CONFLICT, format!("job {running} is still running")));
        }
        let sess = inner.session.as_ref().ok_or_else(no_round)?;
        let missing = sess.missing();
        if !missing.is_empty() {
            let body = serde_json::json!({ "error": "queue not fully rectified", "missing": missing });
            return Err(ApiError(StatusCode::CONFLICT, body));
        }
        let session = sess.clone();
        let job_id = inner.jobs.keys().next_back().map_or(1, |k| k + 1);
        let round = inner.round;
        inner.jobs.insert(
            job_id,
            JobView {
                job_id,
                status: JobStatus::Pending,
                round,
                report: None,
                error: None,
            },
        );
        inner.running = Some(job_id);
        (job_id, inner.model.clone(), session)
    };
    let state = s.clone();
    tokio::task::spawn_blocking(move || run_job(state, job_id, model, session));
    Ok((StatusCode::ACCEPTED, Json(serde_json::json!({ "job_id": job_id }))).into_response())
}

fn set_status(s: &AppState, job_id: u64, status: JobStatus) {
    if let Some(j) = s.lock().jobs.get_mut(&job_id) {
        j.status = status;
    }
}

fn run_job(s: AppState, job_id: u64, mut model: Model, session: RefineSession) {
    set_status(&s, job_id, JobStatus::Running);
    let cfg = &s.cfg;
    let result = session.complete(&mut model, cfg.prior_lr, &cfg.train, &cfg.refine, &[]);
    let next = result.as_ref().ok().map(|_| {
        RefineSession::prepare(&model, session.remaining_samples(), &cfg.refine, cfg.train.batch_size)
    });
    {
        let mut inner = s.lock();
        let inner = &mut *inner;
        let view = inner.jobs.get_mut(&job_id).expect("job registered");
        match result {
            Ok(report) => {
                view.status = JobStatus::Done;
                view.report = Some(report);
                inner.model = model;
                inner.round += 1;
                inner.session = match next.expect("set on success") {
                    Ok(mut sess) => {
                        for (id, mask) in inner.deferred.drain(..) {
                            if let Err(e) = sess.submit(&id, mask, Author::Human) {
                                log::warn!("dropping deferred rectification for `{id}`: {e}");
                            }
                        }
                        Some(sess)
                    }
                    Err(e) => {
                        log::info!("no further round: {e}");
                        inner.deferred.clear();
                        None
                    }
                };
            }
            Err(e) => {
                view.status = JobStatus::Failed;
                view.error = Some(e.to_string());
            }
        }
        inner.running = None;
    }
    s.finished.send_replace(Some(job_id));
}
