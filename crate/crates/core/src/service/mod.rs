//! HTTP service for the operator workflow: upload a floorplan, annotate the
//! five wall crops, run segmentation jobs and fetch mask, probability and
//! overlay PNGs. Request and response schemas are in `docs/API.md`.
//!
//! Sessions live in memory; job artifacts are written below the work
//! directory. Jobs are polled; a semaphore bounds how many run at once.

mod models;

pub use models::{list_models, valid_model_name, ManifestSummary, ModelEntry, ModelListing, ModelWarning};

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::rejection::{BytesRejection, JsonRejection};
use axum::extract::{DefaultBodyLimit, Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;
use tower_http::cors::{Any, CorsLayer};

use crate::error::{Error, Result};
use crate::eval::{grey_crop_set, Ablation};
use crate::featx::FeatureExtractor;
use crate::infer::{overlay, segment_floorplan, InferenceConfig, DEFAULT_STRIDE, DEFAULT_THRESHOLD};
use crate::model::{FgssModel, TileModel};
use crate::pipeline::{
    normalize_by_annotated_widths, CropSidecar, CropTag, NormalizationResult, SidecarCrop, WallCropSet, CROP_SIDE,
};
use crate::raster::{decode_image, resize, resize_mask, write_mask, write_png, Raster, Resample};
use crate::segmenter::Variant;
use crate::train::{load_featx, load_model, CheckpointManifest, MANIFEST_FILE};

pub const MAX_UPLOAD_BYTES: usize = 32 * 1024 * 1024;

/// Result artifacts a finished job leaves in its directory.
pub const RESULT_KINDS: [&str; 3] = ["mask", "probability", "overlay"];

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Checkpoint directories, one per model, each holding a manifest.
    pub models_dir: PathBuf,
    /// Where job artifacts go; a fresh directory under the system temp dir
    /// when `None`.
    pub work_dir: Option<PathBuf>,
    /// Segmentation jobs that may run at the same time.
    pub workers: usize,
    pub max_upload_bytes: usize,
    /// Evaluate tiles on the rayon pool inside a job.
    pub parallel_tiles: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            models_dir: PathBuf::from("models"),
            work_dir: None,
            workers: 1,
            max_upload_bytes: MAX_UPLOAD_BYTES,
            parallel_tiles: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn in_flight(self) -> bool {
        matches!(self, JobStatus::Queued | JobStatus::Running)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SegmentRequest {
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    pub model: String,
    #[serde(default)]
    pub ablation: Ablation,
    /// Seeds the grey levels of the ablation.
    #[serde(default)]
    pub seed: u64,
}

fn default_stride() -> usize {
    DEFAULT_STRIDE
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct JobTiming {
    pub queued_unix_ms: u64,
    pub started_unix_ms: Option<u64>,
    pub finished_unix_ms: Option<u64>,
    /// Time spent in tiled inference.
    pub segmentation_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct JobView {
    pub job_id: String,
    pub session_id: String,
    pub status: JobStatus,
    pub config: SegmentRequest,
    pub error: Option<String>,
    pub timing: JobTiming,
    pub tiles: Option<usize>,
    /// Result URLs once the job is done.
    pub results: Option<HashMap<String, String>>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct CropBoxRequest {
    pub tag: CropTag,
    pub x: usize,
    pub y: usize,
    #[serde(default = "default_side")]
    pub side: usize,
    pub annotated_width_px: f64,
}

fn default_side() -> usize {
    CROP_SIDE
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct CropsRequest {
    pub crops: Vec<CropBoxRequest>,
    /// Checkpoint whose feature extractor predicts the widths; the first
    /// listed model with one when absent.
    #[serde(default)]
    pub model: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct CropsResponse {
    pub scale_factor: f64,
    /// `argmax + 1` of the width head per crop, in request order, measured
    /// in the rescaled image. `None` when no extractor is available.
    pub predicted_widths: Option<Vec<u32>>,
    /// The same predictions divided by the scale factor, comparable with the
    /// annotated widths.
    pub predicted_widths_original_px: Option<Vec<f64>>,
    pub width_model: Option<String>,
}

#[derive(Clone, Debug)]
struct Annotation {
    sidecar: CropSidecar,
    normalization: NormalizationResult,
    image: Arc<Raster>,
    crops: Arc<WallCropSet>,
    response: CropsResponse,
}

#[derive(Debug)]
struct Session {
    original: Arc<Raster>,
    annotation: Option<Annotation>,
    /// Bumped by every crop update so stale jobs cannot publish results.
    generation: u64,
    latest_job: Option<String>,
    result_dir: Option<PathBuf>,
}

#[derive(Debug)]
struct Job {
    view: JobView,
    generation: u64,
}

struct Inner {
    config: ServiceConfig,
    work_dir: PathBuf,
    // Lock order: sessions, then jobs.
    sessions: Mutex<HashMap<String, Session>>,
    jobs: Mutex<HashMap<String, Job>>,
    models: Mutex<HashMap<String, Arc<FgssModel>>>,
    extractors: Mutex<HashMap<String, Arc<FeatureExtractor<f32>>>>,
    workers: Semaphore,
}

/// Shared service state; cheap to clone.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn new_id() -> String {
    format!("{:032x}", rand::random::<u128>())
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Result<Self> {
        let work_dir = match &config.work_dir {
            Some(d) => d.clone(),
            None => std::env::temp_dir().join(format!("fgss-service-{}-{}", std::process::id(), new_id())),
        };
        std::fs::create_dir_all(&work_dir).map_err(|e| Error::file(&work_dir, e))?;
        Ok(Self {
            inner: Arc::new(Inner {
                workers: Semaphore::new(config.workers.max(1)),
                config,
                work_dir,
                sessions: Mutex::new(HashMap::new()),
                jobs: Mutex::new(HashMap::new()),
                models: Mutex::new(HashMap::new()),
                extractors: Mutex::new(HashMap::new()),
            }),
        })
    }

    pub fn work_dir(&self) -> &Path {
        &self.inner.work_dir
    }

    fn models_dir(&self) -> &Path {
        &self.inner.config.models_dir
    }

    fn manifest(&self, name: &str) -> std::result::Result<CheckpointManifest, ApiError> {
        let path = models::model_path(self.models_dir(), name)
            .map(|p| p.join(MANIFEST_FILE))
            .filter(|p| p.is_file())
            .ok_or_else(|| ApiError::unprocessable(format!("unknown model {name:?}")))?;
        let bytes = std::fs::read(&path).map_err(|e| ApiError::internal(Error::file(&path, e)))?;
        serde_json::from_slice(&bytes).map_err(|e| ApiError::unprocessable(format!("model {name:?}: {e}")))
    }

    fn model(&self, name: &str) -> Result<Arc<FgssModel>> {
        if let Some(m) = lock(&self.inner.models).get(name) {
            return Ok(m.clone());
        }
        let path = models::model_path(self.models_dir(), name)
            .ok_or_else(|| Error::InvalidArgument(format!("invalid model name {name:?}")))?;
        let model = Arc::new(load_model(&path)?.0);
        lock(&self.inner.models).insert(name.to_string(), model.clone());
        Ok(model)
    }

    fn extractor(&self, name: &str) -> Result<Arc<FeatureExtractor<f32>>> {
        if let Some(m) = lock(&self.inner.extractors).get(name) {
            return Ok(m.clone());
        }
        let path = models::model_path(self.models_dir(), name)
            .ok_or_else(|| Error::InvalidArgument(format!("invalid model name {name:?}")))?;
        let fx = Arc::new(load_featx(&path)?.0);
        lock(&self.inner.extractors).insert(name.to_string(), fx.clone());
        Ok(fx)
    }

    /// First listed checkpoint that carries a feature extractor.
    fn default_width_model(&self) -> Option<String> {
        list_models(self.models_dir())
            .models
            .into_iter()
            .find(|m| m.variant == "featx" || m.variant == "fgss")
            .map(|m| m.name)
    }
}

/// JSON error body `{"error": message}` with a status code.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(what: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("{what} not found"))
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }

    fn internal(e: Error) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Shape(_) | Error::UnusableFloorplan(_) => {
                Self::unprocessable(e.to_string())
            }
            e => Self::internal(e),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(r.status(), r.body_text())
    }
}

impl From<BytesRejection> for ApiError {
    fn from(r: BytesRejection) -> Self {
        Self::new(r.status(), r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

/// All routes, with CORS open to any origin and the upload size limit.
pub fn router(state: AppState) -> Router {
    let limit = state.inner.config.max_upload_bytes;
    Router::new()
        .route("/api/floorplans", post(upload))
        .route("/api/floorplans/{id}", get(session_view))
        .route("/api/floorplans/{id}/crops", put(set_crops))
        .route("/api/floorplans/{id}/segment", post(start_job))
        .route("/api/floorplans/{id}/result/{kind}", get(result))
        .route("/api/jobs/{id}", get(job_view))
        .route("/api/models", get(models_view))
        .layer(DefaultBodyLimit::max(limit))
        .layer(CorsLayer::new().allow_origin(Any).allow_methods(Any).allow_headers(Any))
        .with_state(state)
}

/// Binds `0.0.0.0:port` and serves until the process ends.
pub fn serve_blocking(config: ServiceConfig, port: u16) -> Result<()> {
    let state = AppState::new(config)?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
        axum::serve(listener, router(state)).await
    })?;
    Ok(())
}

async fn upload(State(state): State<AppState>, body: std::result::Result<Bytes, BytesRejection>) -> ApiResult<Response> {
    let bytes = body?;
    match image::guess_format(&bytes) {
        Ok(image::ImageFormat::Png | image::ImageFormat::Jpeg) => {}
        _ => {
            return Err(ApiError::new(
                StatusCode::UNSUPPORTED_MEDIA_TYPE,
                "body must be a PNG or JPEG image",
            ))
        }
    }
    let raster = tokio::task::spawn_blocking(move || decode_image(&bytes))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| ApiError::unprocessable(e.to_string()))?;
    let (h, w) = (raster.height(), raster.width());
    let id = new_id();
    lock(&state.inner.sessions).insert(
        id.clone(),
        Session {
            original: Arc::new(raster),
            annotation: None,
            generation: 0,
            latest_job: None,
            result_dir: None,
        },
    );
    let body = json!({ "sessionId": id, "widthPx": w, "heightPx": h });
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn session_view(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<serde_json::Value>> {
    let sessions = lock(&state.inner.sessions);
    let s = sessions.get(&id).ok_or_else(|| ApiError::not_found("session"))?;
    let jobs = lock(&state.inner.jobs);
    let latest = s.latest_job.as_ref().and_then(|j| jobs.get(j)).map(|j| &j.view);
    Ok(Json(json!({
        "sessionId": id,
        "widthPx": s.original.width(),
        "heightPx": s.original.height(),
        "crops": s.annotation.as_ref().map(|a| &a.sidecar),
        "normalization": s.annotation.as_ref().map(|a| a.normalization),
        "widths": s.annotation.as_ref().map(|a| &a.response),
        "latestJob": latest,
        "hasResult": s.result_dir.is_some(),
    })))
}

fn validate_crops(req: &CropsRequest) -> ApiResult<()> {
    if req.crops.len() != CropTag::ALL.len() {
        return Err(ApiError::unprocessable(format!(
            "expected {} crops, got {}",
            CropTag::ALL.len(),
            req.crops.len()
        )));
    }
    for c in &req.crops {
        if !(c.annotated_width_px.is_finite() && c.annotated_width_px > 0.0) {
            return Err(ApiError::unprocessable(format!("{} crop width must be positive", c.tag)));
        }
        if c.side == 0 {
            return Err(ApiError::unprocessable(format!("{} crop side must be positive", c.tag)));
        }
    }
    Ok(())
}

async fn set_crops(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: std::result::Result<Json<CropsRequest>, JsonRejection>,
) -> ApiResult<Json<CropsResponse>> {
    let original = {
        let sessions = lock(&state.inner.sessions);
        let s = sessions.get(&id).ok_or_else(|| ApiError::not_found("session"))?;
        s.original.clone()
    };
    let Json(req) = body?;
    validate_crops(&req)?;
    let width_model = match &req.model {
        Some(m) => {
            state.manifest(m)?;
            Some(m.clone())
        }
        None => state.default_width_model(),
    };
    let sidecar = CropSidecar {
        floorplan_id: id.clone(),
        crops: req
            .crops
            .iter()
            .map(|c| SidecarCrop {
                tag: c.tag,
                x: c.x,
                y: c.y,
                side: c.side,
                width_px: c.annotated_width_px,
            })
            .collect(),
    };
    let worker_state = state.clone();
    let annotation = tokio::task::spawn_blocking(move || -> Result<Annotation> {
        let (image, normalization) = normalize_by_annotated_widths(&original, &sidecar.widths())?;
        let crops = WallCropSet::from_sidecar(&image, &sidecar, normalization.scale_factor)?;
        let predicted = match &width_model {
            Some(name) => {
                let fx = worker_state.extractor(name)?;
                let widths = sidecar
                    .crops
                    .iter()
                    .map(|c| fx.predict_width(&fx.encode(&crops.get(c.tag).raster)?).map(|l| l.predicted_width()))
                    .collect::<Result<Vec<u32>>>()?;
                Some(widths)
            }
            None => None,
        };
        let response = CropsResponse {
            scale_factor: normalization.scale_factor,
            predicted_widths_original_px: predicted
                .as_ref()
                .map(|p| p.iter().map(|&w| w as f64 / normalization.scale_factor).collect()),
            predicted_widths: predicted,
            width_model,
        };
        Ok(Annotation {
            sidecar,
            normalization,
            image: Arc::new(image),
            crops: Arc::new(crops),
            response,
        })
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;

    let mut sessions = lock(&state.inner.sessions);
    let s = sessions.get_mut(&id).ok_or_else(|| ApiError::not_found("session"))?;
    let jobs = lock(&state.inner.jobs);
    if s.latest_job.as_ref().and_then(|j| jobs.get(j)).is_some_and(|j| j.view.status.in_flight()) {
        return Err(ApiError::conflict("a segmentation job is in flight for this session"));
    }
    let response = annotation.response.clone();
    s.annotation = Some(annotation);
    s.generation += 1;
    s.result_dir = None;
    Ok(Json(response))
}

async fn start_job(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: std::result::Result<Json<SegmentRequest>, JsonRejection>,
) -> ApiResult<Response> {
    if !lock(&state.inner.sessions).contains_key(&id) {
        return Err(ApiError::not_found("session"));
    }
    let Json(req) = body?;
    if req.stride == 0 || !(0.0..=1.0).contains(&req.threshold) {
        return Err(ApiError::unprocessable("stride must be positive and threshold within [0, 1]"));
    }
    let manifest = state.manifest(&req.model)?;
    let seg = manifest
        .config_snapshot
        .segmenter
        .as_ref()
        .ok_or_else(|| ApiError::unprocessable(format!("model {:?} is not a segmenter", req.model)))?;
    if req.stride > seg.tile_side {
        return Err(ApiError::unprocessable(format!(
            "stride {} exceeds the model's {} px tile",
            req.stride, seg.tile_side
        )));
    }
    let needs_crops = seg.variant == Variant::Fgss;

    let job_id = new_id();
    {
        let mut sessions = lock(&state.inner.sessions);
        let s = sessions.get_mut(&id).ok_or_else(|| ApiError::not_found("session"))?;
        let mut jobs = lock(&state.inner.jobs);
        if s.latest_job.as_ref().and_then(|j| jobs.get(j)).is_some_and(|j| j.view.status.in_flight()) {
            return Err(ApiError::conflict("a segmentation job is already in flight for this session"));
        }
        if needs_crops && s.annotation.is_none() {
            return Err(ApiError::unprocessable(format!(
                "model {:?} needs the five wall crops; PUT /api/floorplans/{id}/crops first",
                req.model
            )));
        }
        jobs.insert(
            job_id.clone(),
            Job {
                view: JobView {
                    job_id: job_id.clone(),
                    session_id: id.clone(),
                    status: JobStatus::Queued,
                    config: req,
                    error: None,
                    timing: JobTiming {
                        queued_unix_ms: now_ms(),
                        ..Default::default()
                    },
                    tiles: None,
                    results: None,
                },
                generation: s.generation,
            },
        );
        s.latest_job = Some(job_id.clone());
    }
    tokio::spawn(run_job(state, job_id.clone()));
    Ok((StatusCode::ACCEPTED, Json(json!({ "jobId": job_id }))).into_response())
}

struct JobInput {
    session_id: String,
    config: SegmentRequest,
    generation: u64,
    original: Arc<Raster>,
    annotation: Option<Annotation>,
}

struct JobOutput {
    dir: PathBuf,
    tiles: usize,
    ms: f64,
}

async fn run_job(state: AppState, job_id: String) {
    let _permit = state.inner.workers.acquire().await;
    let input = {
        let sessions = lock(&state.inner.sessions);
        let mut jobs = lock(&state.inner.jobs);
        let Some(job) = jobs.get_mut(&job_id) else { return };
        let Some(s) = sessions.get(&job.view.session_id) else { return };
        job.view.status = JobStatus::Running;
        job.view.timing.started_unix_ms = Some(now_ms());
        JobInput {
            session_id: job.view.session_id.clone(),
            config: job.view.config.clone(),
            generation: job.generation,
            original: s.original.clone(),
            annotation: s.annotation.clone(),
        }
    };
    let worker = state.clone();
    let id = job_id.clone();
    let outcome = tokio::task::spawn_blocking(move || execute(&worker, &id, &input).map(|out| (out, input)))
        .await
        .map_err(|e| Error::InvalidArgument(format!("job panicked: {e}")))
        .and_then(|r| r);

    let mut sessions = lock(&state.inner.sessions);
    let mut jobs = lock(&state.inner.jobs);
    let Some(job) = jobs.get_mut(&job_id) else { return };
    job.view.timing.finished_unix_ms = Some(now_ms());
    match outcome {
        Ok((out, input)) => {
            job.view.status = JobStatus::Done;
            job.view.tiles = Some(out.tiles);
            job.view.timing.segmentation_ms = Some(out.ms);
            job.view.results = Some(
                RESULT_KINDS
                    .iter()
                    .map(|k| (k.to_string(), format!("/api/floorplans/{}/result/{k}", input.session_id)))
                    .collect(),
            );
            if let Some(s) = sessions.get_mut(&input.session_id) {
                if s.generation == input.generation && s.latest_job.as_deref() == Some(job_id.as_str()) {
                    s.result_dir = Some(out.dir);
                }
            }
        }
        Err(e) => {
            job.view.status = JobStatus::Failed;
            job.view.error = Some(e.to_string());
        }
    }
}

fn execute(state: &AppState, job_id: &str, input: &JobInput) -> Result<JobOutput> {
    let cfg = &input.config;
    let model = state.model(&cfg.model)?;
    let (image, crops) = match &input.annotation {
        Some(a) => (a.image.clone(), Some(a.crops.clone())),
        None => (input.original.clone(), None),
    };
    let crops = match (crops, cfg.ablation) {
        (Some(c), Ablation::Grey) => Some(Arc::new(grey_crop_set(&c, cfg.seed, 0)?)),
        (c, _) => c,
    };
    let crops = if model.requires_crops() { crops } else { None };
    let inference = InferenceConfig {
        stride: cfg.stride,
        threshold: cfg.threshold,
        tile_side: model.tile_side(),
        parallel: state.inner.config.parallel_tiles,
    };
    let start = Instant::now();
    let seg = segment_floorplan(&image, crops.as_deref(), model.as_ref(), &inference)?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    let (h, w) = (input.original.height(), input.original.width());
    let mask = resize_mask(&seg.mask, h, w)?;
    let prob = resize(&seg.probability, h, w, Resample::Bilinear)?;
    let dir = state.work_dir().join(&input.session_id).join(job_id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
    write_mask(&mask, dir.join("mask.png"))?;
    write_png(&prob, dir.join("probability.png"))?;
    write_png(&overlay(&input.original, &mask)?, dir.join("overlay.png"))?;
    Ok(JobOutput {
        dir,
        tiles: seg.tiles,
        ms,
    })
}

async fn job_view(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<JobView>> {
    lock(&state.inner.jobs)
        .get(&id)
        .map(|j| Json(j.view.clone()))
        .ok_or_else(|| ApiError::not_found("job"))
}

async fn result(State(state): State<AppState>, UrlPath((id, kind)): UrlPath<(String, String)>) -> ApiResult<Response> {
    if !RESULT_KINDS.contains(&kind.as_str()) {
        return Err(ApiError::not_found("result kind"));
    }
    let dir = {
        let sessions = lock(&state.inner.sessions);
        let s = sessions.get(&id).ok_or_else(|| ApiError::not_found("session"))?;
        s.result_dir.clone().ok_or_else(|| ApiError::not_found("result"))?
    };
    let path = dir.join(format!("{kind}.png"));
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::internal(Error::file(&path, e)))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn models_view(State(state): State<AppState>) -> Json<ModelListing> {
    let dir = state.models_dir().to_path_buf();
    let listing = tokio::task::spawn_blocking(move || list_models(&dir))
        .await
        .unwrap_or_default();
    Json(listing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use axum::body::Body;
    use axum::http::Request;
    use http_body_util::BodyExt;
    use tower::ServiceExt;

    fn app() -> (Router, tempfile::TempDir) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ServiceConfig {
            models_dir: dir.path().join("models"),
            work_dir: Some(dir.path().join("work")),
            ..Default::default()
        };
        std::fs::create_dir_all(&cfg.models_dir).unwrap();
        (router(AppState::new(cfg).unwrap()), dir)
    }

    async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Bytes) {
        let resp = app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        (status, resp.into_body().collect().await.unwrap().to_bytes())
    }

    fn png(h: usize, w: usize) -> Vec<u8> {
        crate::raster::encode_png(&Raster::from_fn(h, w, |y, x| ((y + x) % 2) as f32)).unwrap()
    }

    async fn upload_png(app: &Router) -> String {
        let req = Request::post("/api/floorplans").body(Body::from(png(120, 200))).unwrap();
        let (status, body) = send(app, req).await;
        assert_eq!(status, StatusCode::CREATED);
        let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
        assert_eq!((v["widthPx"].as_u64(), v["heightPx"].as_u64()), (Some(200), Some(120)));
        v["sessionId"].as_str().unwrap().to_string()
    }

    fn crops_body(n: usize, width: f64) -> Body {
        let crops: Vec<_> = CropTag::ALL
            .iter()
            .take(n)
            .map(|t| json!({"tag": t, "x": 10, "y": 20, "side": 64, "annotatedWidthPx": width}))
            .collect();
        Body::from(json!({ "crops": crops }).to_string())
    }

    fn put_crops(id: &str, body: Body) -> Request<Body> {
        Request::put(format!("/api/floorplans/{id}/crops"))
            .header(header::CONTENT_TYPE, "application/json")
            .body(body)
            .unwrap()
    }

    #[tokio::test]
    async fn upload_checks_format_and_size() {
        let (app, _d) = app();
        upload_png(&app).await;
        let (status, _) = send(&app, Request::post("/api/floorplans").body(Body::from("plain text")).unwrap()).await;
        assert_eq!(status, StatusCode::UNSUPPORTED_MEDIA_TYPE);
        let mut big = png(8, 8);
        big.resize(40 * 1024 * 1024, 0);
        let (status, _) = send(&app, Request::post("/api/floorplans").body(Body::from(big)).unwrap()).await;
        assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    }

    #[tokio::test]
    async fn crops_contract() {
        let (app, _d) = app();
        let id = upload_png(&app).await;
        let (status, _) = send(&app, put_crops(&id, crops_body(4, 24.18))).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
        let (status, _) = send(&app, put_crops(&id, crops_body(5, 0.0))).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
        let (status, _) = send(&app, put_crops("nope", crops_body(5, 24.18))).await;
        assert_eq!(status, StatusCode::NOT_FOUND);
        let (status, body) = send(&app, put_crops(&id, crops_body(5, 24.18))).await;
        assert_eq!(status, StatusCode::OK);
        let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
        assert_eq!(v["scaleFactor"], 1.0);
        assert!(v["predictedWidths"].is_null());
        let (status, body) = send(&app, put_crops(&id, crops_body(5, 12.09))).await;
        assert_eq!(status, StatusCode::OK);
        let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
        assert!((v["scaleFactor"].as_f64().unwrap() - 2.0).abs() < 1e-12);
    }

    #[tokio::test]
    async fn unknown_ids_and_missing_results() {
        let (app, _d) = app();
        let id = upload_png(&app).await;
        for uri in [
            "/api/jobs/none".to_string(),
            "/api/floorplans/none/result/mask".to_string(),
            format!("/api/floorplans/{id}/result/mask"),
            format!("/api/floorplans/{id}/result/bogus"),
        ] {
            let (status, _) = send(&app, Request::get(uri.as_str()).body(Body::empty()).unwrap()).await;
            assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        }
        let req = Request::post(format!("/api/floorplans/{id}/segment"))
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(r#"{"model": "absent"}"#))
            .unwrap();
        assert_eq!(send(&app, req).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    }

    #[tokio::test]
    async fn empty_models_dir_lists_nothing() {
        let (app, _d) = app();
        let (status, body) = send(&app, Request::get("/api/models").body(Body::empty()).unwrap()).await;
        assert_eq!(status, StatusCode::OK);
        let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
        assert_eq!(v, json!({"models": [], "warnings": []}));
    }

    #[tokio::test]
    async fn cors_preflight_is_answered() {
        let (app, _d) = app();
        let req = Request::options("/api/models")
            .header(header::ORIGIN, "http://localhost:5173")
            .header(header::ACCESS_CONTROL_REQUEST_METHOD, "GET")
            .body(Body::empty())
            .unwrap();
        let resp = app.oneshot(req).await.unwrap();
        assert!(resp.headers().contains_key(header::ACCESS_CONTROL_ALLOW_ORIGIN));
    }
}
