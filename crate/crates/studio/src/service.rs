//! JSON-over-HTTP job service and static file host for the viewer.
//!
//! | method | path | body / reply |
//! |---|---|---|
//! | GET  | `/api/health` | `{"status":"ok"}` |
//! | GET  | `/api/shapes` | `[{id, category, split}]` |
//! | GET  | `/api/shapes/{id}/payload?repr=points\|voxels[&format=json]` | SBPC/SBVX bytes |
//! | GET  | `/api/checkpoints` | `[CheckpointMeta]` |
//! | POST | `/api/transfer` | `TransferConfig` → `{job_id}` |
//! | POST | `/api/sweep` | `{config, ratios}` → `{job_id}` |
//! | GET  | `/api/jobs`, `/api/jobs/{id}` | job status and progress |
//! | GET  | `/api/jobs/{id}/result[?index=k][&format=json]` | SBPC/SBVX bytes |
//! | GET  | `/api/jobs/{id}/sidecar[?index=k]` | transfer report JSON |
//!
//! Errors are `{"error": message}` with 400, 404, 409 or 500.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path as FsPath, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::oneshot;
use tower_http::services::ServeDir;

use shapeblend_core::grad::Real;
use shapeblend_core::nets::Backend;
use shapeblend_core::transfer::{self, FrozenProvider, TransferConfig, TransferError};

use crate::jobs::{JobKind, JobProgress, JobQueue, JobStatus};
use crate::store::{Representation, ShapeStore, RESULTS_DIR};
use crate::{ops, StudioError};

pub const SBPC_CONTENT_TYPE: &str = "application/vnd.shapeblend.sbpc";
pub const SBVX_CONTENT_TYPE: &str = "application/vnd.shapeblend.sbvx";

fn content_type(repr: Representation) -> &'static str {
    match repr {
        Representation::Points => SBPC_CONTENT_TYPE,
        Representation::Voxels => SBVX_CONTENT_TYPE,
    }
}

struct Inner {
    store: ShapeStore,
    queue: JobQueue,
    providers: Mutex<HashMap<String, Arc<FrozenProvider<Real>>>>,
}

impl Inner {
    /// Loads a checkpoint once; later jobs share the same frozen copy.
    fn provider(&self, id: &str) -> Result<Arc<FrozenProvider<Real>>, StudioError> {
        let mut cache = self.providers.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(p) = cache.get(id) {
            return Ok(Arc::clone(p));
        }
        let p = Arc::new(ops::load_provider(&self.store, id)?);
        cache.insert(id.to_string(), Arc::clone(&p));
        Ok(p)
    }
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn new(store: ShapeStore, workers: usize) -> Self {
        Self { inner: Arc::new(Inner { store, queue: JobQueue::new(workers), providers: Mutex::new(HashMap::new()) }) }
    }

    pub fn store(&self) -> &ShapeStore {
        &self.inner.store
    }

    pub fn queue(&self) -> &JobQueue {
        &self.inner.queue
    }
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<StudioError> for ApiError {
    fn from(e: StudioError) -> Self {
        let status = match &e {
            StudioError::UnknownShape(_) | StudioError::UnknownCheckpoint(_) | StudioError::UnknownJob(_) => {
                StatusCode::NOT_FOUND
            }
            StudioError::NotFinished(_) => StatusCode::CONFLICT,
            StudioError::InvalidArgument(_)
            | StudioError::InvalidId(_)
            | StudioError::Json(_)
            | StudioError::Net(_) => StatusCode::BAD_REQUEST,
            StudioError::Transfer(
                TransferError::InvalidConfig(_)
                | TransferError::BackendMismatch { .. }
                | TransferError::EmptySweep
                | TransferError::InvalidRatio(_)
                | TransferError::UnsortedRatios
                | TransferError::Net(_),
            ) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

/// Parses a transfer request. A missing `backend` is taken from the
/// checkpoint; shape and checkpoint ids must exist.
fn parse_transfer(store: &ShapeStore, value: Value) -> Result<TransferConfig, ApiError> {
    let Value::Object(mut map) = value else {
        return Err(bad_request("transfer config must be a JSON object"));
    };
    let checkpoint = map
        .get("checkpoint")
        .and_then(Value::as_str)
        .ok_or_else(|| bad_request("field 'checkpoint' is required"))?
        .to_string();
    let meta = store.checkpoint_meta(&checkpoint)?;
    map.entry("backend").or_insert_with(|| json!(meta.backend));
    let cfg: TransferConfig = serde_json::from_value(Value::Object(map)).map_err(StudioError::from)?;
    let cfg = cfg.resolved();
    if cfg.backend != meta.backend {
        return Err(StudioError::from(TransferError::BackendMismatch {
            config: cfg.backend,
            checkpoint: meta.backend,
        })
        .into());
    }
    store.entry(&cfg.content)?;
    store.entry(&cfg.style)?;
    cfg.validate().map_err(StudioError::from)?;
    Ok(cfg)
}

fn parse_json(body: &Bytes) -> Result<Value, ApiError> {
    serde_json::from_slice(body).map_err(|e| bad_request(format!("invalid JSON: {e}")))
}

fn result_name(job: u64, index: usize, backend: Backend) -> String {
    format!("{RESULTS_DIR}/job-{job}-{index}.{}", Representation::for_backend(backend).extension())
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn list_shapes(State(s): State<AppState>) -> Json<Value> {
    let shapes: Vec<Value> =
        s.store().shapes().iter().map(|e| json!({ "id": e.id, "category": e.category, "split": e.split })).collect();
    Json(Value::Array(shapes))
}

async fn list_checkpoints(State(s): State<AppState>) -> ApiResult<Json<Value>> {
    Ok(Json(serde_json::to_value(s.store().checkpoints()?).map_err(StudioError::from)?))
}

#[derive(Deserialize)]
struct PayloadQuery {
    repr: Option<String>,
    format: Option<String>,
}

fn wants_json(format: &Option<String>) -> Result<bool, ApiError> {
    match format.as_deref() {
        None | Some("binary") => Ok(false),
        Some("json") => Ok(true),
        Some(other) => Err(bad_request(format!("unknown format '{other}' (expected binary or json)"))),
    }
}

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

async fn shape_payload(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<PayloadQuery>,
) -> ApiResult<Response> {
    let repr: Representation = q.repr.as_deref().unwrap_or("points").parse()?;
    let json = wants_json(&q.format)?;
    let bytes = s.store().payload_bytes(&id, repr)?;
    Ok(if json {
        Json(json!({ "id": id, "repr": repr, "content_type": content_type(repr), "payload": b64(&bytes) }))
            .into_response()
    } else {
        ([(header::CONTENT_TYPE, content_type(repr))], bytes).into_response()
    })
}

fn enqueue_transfer(s: &AppState, cfg: TransferConfig) -> u64 {
    let inner = Arc::clone(&s.inner);
    let request = serde_json::to_value(&cfg).expect("config serializes");
    s.queue().submit(JobKind::Transfer, request, move |h| {
        let provider = inner.provider(&cfg.checkpoint).map_err(|e| e.to_string())?;
        let rel = result_name(h.job_id(), 0, cfg.backend);
        let epochs = cfg.epochs;
        ops::transfer_to_file(&inner.store, &provider, &cfg, &inner.store.root().join(&rel), &mut |r| {
            h.report(JobProgress {
                run: 0,
                runs: 1,
                epoch: r.epoch,
                epochs,
                total: r.total,
                content: r.content,
                style: r.style,
            })
        })
        .map_err(|e| e.to_string())?;
        Ok(vec![rel])
    })
}

async fn post_transfer(State(s): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let cfg = parse_transfer(s.store(), parse_json(&body)?)?;
    let id = enqueue_transfer(&s, cfg);
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": id }))).into_response())
}

async fn post_sweep(State(s): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let Value::Object(mut req) = parse_json(&body)? else {
        return Err(bad_request("sweep request must be a JSON object"));
    };
    let ratios: Vec<f64> = serde_json::from_value(req.remove("ratios").unwrap_or(Value::Null))
        .map_err(|_| bad_request("field 'ratios' must be a list of numbers"))?;
    let cfg = parse_transfer(s.store(), req.remove("config").unwrap_or(Value::Null))?;
    transfer::check_ratios(&ratios).map_err(StudioError::from)?;
    for &r in &ratios {
        cfg.with_ratio(r).validate().map_err(StudioError::from)?;
    }
    let inner = Arc::clone(&s.inner);
    let request = json!({ "config": cfg, "ratios": ratios });
    let id = s.queue().submit(JobKind::Sweep, request, move |h| {
        let provider = inner.provider(&cfg.checkpoint).map_err(|e| e.to_string())?;
        let mut results = Vec::with_capacity(ratios.len());
        for (i, &r) in ratios.iter().enumerate() {
            let run_cfg = cfg.with_ratio(r);
            let rel = result_name(h.job_id(), i, cfg.backend);
            let (runs, epochs) = (ratios.len(), cfg.epochs);
            ops::transfer_to_file(&inner.store, &provider, &run_cfg, &inner.store.root().join(&rel), &mut |rec| {
                h.report(JobProgress {
                    run: i,
                    runs,
                    epoch: rec.epoch,
                    epochs,
                    total: rec.total,
                    content: rec.content,
                    style: rec.style,
                })
            })
            .map_err(|e| e.to_string())?;
            results.push(rel);
        }
        Ok(results)
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": id }))).into_response())
}

async fn list_jobs(State(s): State<AppState>) -> Json<Value> {
    Json(serde_json::to_value(s.queue().list()).expect("jobs serialize"))
}

async fn get_job(State(s): State<AppState>, Path(id): Path<u64>) -> ApiResult<Json<Value>> {
    let job = s.queue().get(id).ok_or(StudioError::UnknownJob(id))?;
    Ok(Json(serde_json::to_value(job).expect("job serializes")))
}

#[derive(Deserialize)]
struct ResultQuery {
    index: Option<usize>,
    format: Option<String>,
}

/// Absolute path of result `index` of a finished job.
fn finished_result(s: &AppState, id: u64, index: usize) -> Result<PathBuf, ApiError> {
    let job = s.queue().get(id).ok_or(StudioError::UnknownJob(id))?;
    match job.status {
        JobStatus::Done => {}
        JobStatus::Error => {
            return Err(ApiError(StatusCode::CONFLICT, format!("job {id} failed: {}", job.error.unwrap_or_default())))
        }
        _ => return Err(StudioError::NotFinished(id).into()),
    }
    let rel =
        job.results.get(index).ok_or_else(|| bad_request(format!("job {id} has {} results", job.results.len())))?;
    Ok(s.store().root().join(rel))
}

async fn job_result(
    State(s): State<AppState>,
    Path(id): Path<u64>,
    Query(q): Query<ResultQuery>,
) -> ApiResult<Response> {
    let json = wants_json(&q.format)?;
    let index = q.index.unwrap_or(0);
    let path = finished_result(&s, id, index)?;
    let repr: Representation =
        path.extension().and_then(|e| e.to_str()).unwrap_or_default().parse().map_err(ApiError::from)?;
    let bytes = std::fs::read(&path).map_err(StudioError::from)?;
    if !json {
        return Ok(([(header::CONTENT_TYPE, content_type(repr))], bytes).into_response());
    }
    let report: Value =
        serde_json::from_slice(&std::fs::read(transfer::sidecar_path(&path)).map_err(StudioError::from)?)
            .map_err(StudioError::from)?;
    let prob = transfer::probability_path(&path);
    let probabilities = if prob.is_file() { Some(b64(&std::fs::read(prob).map_err(StudioError::from)?)) } else { None };
    Ok(Json(json!({
        "job_id": id,
        "index": index,
        "repr": repr,
        "content_type": content_type(repr),
        "payload": b64(&bytes),
        "probabilities": probabilities,
        "report": report,
    }))
    .into_response())
}

async fn job_sidecar(
    State(s): State<AppState>,
    Path(id): Path<u64>,
    Query(q): Query<ResultQuery>,
) -> ApiResult<Response> {
    let path = finished_result(&s, id, q.index.unwrap_or(0))?;
    let bytes = std::fs::read(transfer::sidecar_path(&path)).map_err(StudioError::from)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

async fn not_found() -> ApiError {
    ApiError(StatusCode::NOT_FOUND, "no such endpoint".into())
}

/// Routes for `state`; static files from `viewer` answer everything else.
pub fn router(state: AppState, viewer: Option<&FsPath>) -> Router {
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/shapes", get(list_shapes))
        .route("/api/shapes/{id}/payload", get(shape_payload))
        .route("/api/checkpoints", get(list_checkpoints))
        .route("/api/transfer", post(post_transfer))
        .route("/api/sweep", post(post_sweep))
        .route("/api/jobs", get(list_jobs))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/jobs/{id}/result", get(job_result))
        .route("/api/jobs/{id}/sidecar", get(job_sidecar))
        .route("/api/{*rest}", get(not_found).post(not_found))
        .with_state(state);
    match viewer {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(not_found),
    }
}

/// A service running on its own thread.
pub struct Server {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl Server {
    /// Binds `addr` (port 0 picks a free port) and starts serving.
    pub fn start(state: AppState, addr: &str, viewer: Option<PathBuf>) -> Result<Self, StudioError> {
        let listener =
            std::net::TcpListener::bind(addr).map_err(|source| StudioError::Bind { addr: addr.to_string(), source })?;
        listener.set_nonblocking(true)?;
        let local = listener.local_addr()?;
        let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        let (tx, rx) = oneshot::channel::<()>();
        let app = router(state, viewer.as_deref());
        let thread = std::thread::Builder::new().name("http".into()).spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener)?;
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
            })
        })?;
        log::info!("listening on http://{local}");
        Ok(Self { addr: local, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) -> Result<(), StudioError> {
        match self.thread.take().map(JoinHandle::join) {
            Some(Ok(r)) => Ok(r?),
            Some(Err(_)) => Err(StudioError::InvalidArgument("server thread panicked".into())),
            None => Ok(()),
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
