//! HTTP facade over the pipeline for the review UI.
//!
//! Reads are served straight from the case directories. Stage runs go
//! through a bounded in-process queue drained by one worker, and each case
//! may have at most one queued or running job.

mod render;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::mpsc;

use thermoviab::features::{extract_region_series, locate_nodule, window_mask, NODULE_WINDOW};
use thermoviab::io::{self, rasterize_polygon, CaseError, Label, NoduleAnnotation, ThermalSequence};
use thermoviab::learning::EnsembleModel;
use thermoviab::pipeline::{self, DatasetCase, PipelineError, RunConfig, Segmenter, Stage};
use thermoviab::registration::{resample, REVIEW_RHO};

pub use render::{color, mask_png, png};

/// Jobs waiting beyond this many are refused with 503.
pub const DEFAULT_QUEUE: usize = 16;

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub root: PathBuf,
    pub model_dir: Option<PathBuf>,
    pub run: RunConfig,
    /// Built review UI, served under `/`.
    pub static_dir: Option<PathBuf>,
    pub queue_capacity: usize,
}

impl GatewayConfig {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), model_dir: None, run: RunConfig::default(), static_dir: None, queue_capacity: DEFAULT_QUEUE }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct JobRecord {
    pub job_id: u64,
    pub case_id: String,
    pub stage: Stage,
    pub state: JobState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

struct Job {
    id: u64,
    dir: PathBuf,
    stage: Stage,
    segmenter: Segmenter,
}

#[derive(Default)]
struct JobTable {
    next: u64,
    jobs: BTreeMap<u64, JobRecord>,
    /// case id → its queued or running job
    active: HashMap<String, u64>,
}

pub struct AppState {
    config: GatewayConfig,
    model: Option<Arc<EnsembleModel>>,
    jobs: Mutex<JobTable>,
    queue: mpsc::Sender<Job>,
    /// Last decimated sequence served, for frame scrubbing.
    frames: Mutex<Option<(String, Arc<ThermalSequence>)>>,
}

impl AppState {
    /// Loads the model (if any) and starts the job worker; needs a Tokio runtime.
    pub fn start(config: GatewayConfig) -> Result<Arc<Self>, PipelineError> {
        let model = match &config.model_dir {
            Some(dir) => Some(Arc::new(pipeline::load_model(dir)?.0)),
            None => None,
        };
        let (tx, rx) = mpsc::channel(config.queue_capacity.max(1));
        let state = Arc::new(Self { config, model, jobs: Mutex::default(), queue: tx, frames: Mutex::default() });
        tokio::spawn(worker(Arc::downgrade(&state), rx));
        Ok(state)
    }

    pub fn job(&self, id: u64) -> Option<JobRecord> {
        self.jobs.lock().unwrap().jobs.get(&id).cloned()
    }

    fn case(&self, case_id: &str) -> Result<DatasetCase, ApiError> {
        let cases = pipeline::list_dataset(&self.config.root)?;
        Ok(pipeline::find_case(&cases, case_id)?.clone())
    }

    fn busy(&self, case_id: &str) -> bool {
        self.jobs.lock().unwrap().active.contains_key(case_id)
    }

    fn sequence(&self, case: &DatasetCase) -> Result<Arc<ThermalSequence>, ApiError> {
        let mut slot = self.frames.lock().unwrap();
        if let Some((id, seq)) = slot.as_ref() {
            if *id == case.case_id {
                return Ok(seq.clone());
            }
        }
        let (_, seq) = pipeline::load_decimated(&case.dir)?;
        let seq = Arc::new(seq);
        *slot = Some((case.case_id.clone(), seq.clone()));
        Ok(seq)
    }
}

async fn worker(state: std::sync::Weak<AppState>, mut rx: mpsc::Receiver<Job>) {
    while let Some(job) = rx.recv().await {
        let Some(st) = state.upgrade() else { break };
        set_state(&st, job.id, JobState::Running, None, None);
        let (run, model) = (st.config.run.clone(), st.model.clone());
        drop(st);
        let id = job.id;
        let outcome = tokio::task::spawn_blocking(move || run_stage(&job, &run, model.as_deref())).await;
        let Some(st) = state.upgrade() else { break };
        match outcome {
            Ok(Ok(v)) => set_state(&st, id, JobState::Done, Some(v), None),
            Ok(Err(e)) => set_state(&st, id, JobState::Failed, None, Some(ApiError::from(e).body)),
            Err(e) => set_state(&st, id, JobState::Failed, None, Some(ErrorBody::new("internal", e.to_string()))),
        }
    }
}

fn set_state(st: &AppState, id: u64, state: JobState, result: Option<Value>, error: Option<ErrorBody>) {
    let mut t = st.jobs.lock().unwrap();
    let Some(rec) = t.jobs.get_mut(&id) else { return };
    rec.state = state;
    rec.result = result;
    rec.error = error;
    if matches!(state, JobState::Done | JobState::Failed) {
        let case = rec.case_id.clone();
        t.active.remove(&case);
    }
}

fn run_stage(job: &Job, run: &RunConfig, model: Option<&EnsembleModel>) -> Result<Value, PipelineError> {
    let dir = &job.dir;
    Ok(match job.stage {
        Stage::Align => serde_json::to_value(pipeline::align_case(dir, &run.stabilize)?)?,
        Stage::Segment => json!({ "pixels": pipeline::segment_case(dir, &job.segmenter)?.count() }),
        Stage::Features => {
            let recs = pipeline::features_case(dir)?;
            json!({ "nodules": recs.len(), "columns": recs.first().map_or(0, |r| r.names().count()) })
        }
        Stage::Predict => {
            let model = model.ok_or_else(|| PipelineError::Usage("no model loaded".into()))?;
            serde_json::to_value(pipeline::predict_case(dir, model)?)?
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

impl ErrorBody {
    fn new(error: &str, message: String) -> Self {
        Self { error: error.to_string(), message }
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        Self { status, body: ErrorBody::new(kind, message.into()) }
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let status = match &e {
            PipelineError::UnknownCase(_) => StatusCode::NOT_FOUND,
            PipelineError::StageMissing { .. } => StatusCode::CONFLICT,
            PipelineError::Usage(_) => StatusCode::BAD_REQUEST,
            PipelineError::Case(
                CaseError::InvalidAnnotation { .. } | CaseError::DegeneratePolygon { .. } | CaseError::MissingAnnotation,
            ) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let kind = match status {
            StatusCode::UNPROCESSABLE_ENTITY => "invalid",
            _ => e.kind(),
        };
        Self::new(status, kind, e.to_string())
    }
}

impl From<CaseError> for ApiError {
    fn from(e: CaseError) -> Self {
        PipelineError::from(e).into()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Shared = State<Arc<AppState>>;

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/api/cases", get(list_cases))
        .route("/api/cases/{id}", get(case_detail))
        .route("/api/cases/{id}/frames/{file}", get(frame_png))
        .route("/api/cases/{id}/curves", get(curves))
        .route("/api/cases/{id}/annotations", get(get_annotations).put(put_annotations))
        .route("/api/cases/{id}/nodules/{nodule}/mask.png", get(nodule_mask))
        .route("/api/cases/{id}/run", post(run))
        .route("/api/cases/{id}/result", get(result))
        .route("/api/cases/{id}/registration", get(registration))
        .route("/api/cases/{id}/registration/{file}", get(registration_png))
        .route("/api/jobs/{job}", get(job));
    let app = match &state.config.static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    };
    app.with_state(state)
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

fn label_json(label: Label) -> Value {
    match label {
        Label::Unknown => Value::Null,
        l => serde_json::to_value(l).unwrap(),
    }
}

async fn list_cases(State(st): Shared) -> ApiResult<Json<Value>> {
    let cases = pipeline::list_dataset(&st.config.root)?;
    let out: Vec<Value> = cases
        .iter()
        .map(|c| {
            let mut v = json!({ "case_id": c.case_id, "status": pipeline::case_status(&c.dir).label() });
            if c.label != Label::Unknown {
                v["label"] = label_json(c.label);
            }
            v
        })
        .collect();
    Ok(Json(Value::Array(out)))
}

async fn case_detail(State(st): Shared, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let case = st.case(&id)?;
    let record = io::read_record(&case.dir)?;
    let index = io::read_frame_index(&case.dir)?;
    let status = pipeline::case_status(&case.dir);
    let artifacts: BTreeMap<&str, bool> = [
        pipeline::WARPS_FILE,
        pipeline::ALIGN_FILE,
        pipeline::ROI_FILE,
        pipeline::FEATURES_FILE,
        pipeline::PREDICTION_FILE,
    ]
    .into_iter()
    .map(|n| (n, case.dir.join(n).exists()))
    .collect();
    Ok(Json(json!({
        "case_id": record.case_id,
        "participant_id": record.participant_id,
        "label": label_json(record.label),
        "provenance": record.provenance,
        "frames": index,
        "annotations": record.annotations,
        "status": status.label(),
        "stages": status,
        "busy": st.busy(&id),
        "artifacts": artifacts,
    })))
}

#[derive(Debug, Deserialize)]
struct FrameQuery {
    /// `raw` (default) or `aligned`.
    view: Option<String>,
}

fn png_response(bytes: Vec<u8>, extra: &[(&'static str, String)]) -> Response {
    let mut resp = (StatusCode::OK, Bytes::from(bytes)).into_response();
    let h = resp.headers_mut();
    h.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    for (k, v) in extra {
        h.insert(*k, HeaderValue::from_str(v).unwrap());
    }
    resp
}

/// Precool min/max: the fixed color window of a case.
fn window(seq: &ThermalSequence) -> (f64, f64) {
    let t = seq.precool().temps();
    let lo = t.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let hi = t.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    (lo, hi)
}

async fn frame_png(
    State(st): Shared,
    UrlPath((id, file)): UrlPath<(String, String)>,
    Query(q): Query<FrameQuery>,
) -> ApiResult<Response> {
    let case = st.case(&id)?;
    let name = file.strip_suffix(".png").ok_or_else(|| ApiError::not_found(format!("no frame {file}")))?;
    let seq = st.sequence(&case)?;
    let frame = if name == "precool" {
        seq.precool()
    } else {
        let k: usize = name.parse().map_err(|_| ApiError::not_found(format!("no frame {file}")))?;
        seq.frames().get(k).ok_or_else(|| ApiError::not_found(format!("no frame at t={k}")))?
    };
    let values: Vec<Option<f64>> = match q.view.as_deref() {
        None | Some("raw") => frame.temps().iter().map(|&v| Some(v as f64)).collect(),
        Some("aligned") => {
            let stab = pipeline::load_alignment(&case.dir)?;
            let warp = if name == "precool" { &stab.precool } else { &stab.frames[name.parse::<usize>().unwrap()] };
            let a = resample(frame, warp);
            (0..frame.height()).flat_map(|i| (0..frame.width()).map(move |j| (i, j))).map(|(i, j)| a.at(i, j)).collect()
        }
        Some(other) => return Err(ApiError::new(StatusCode::BAD_REQUEST, "usage", format!("unknown view {other}"))),
    };
    let (lo, hi) = window(&seq);
    let bytes = png(frame.width(), frame.height(), &values, lo, hi);
    Ok(png_response(bytes, &[("x-temperature-min", format!("{lo:.4}")), ("x-temperature-max", format!("{hi:.4}"))]))
}

async fn curves(State(st): Shared, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let case = st.case(&id)?;
    let dir = case.dir.clone();
    let out = tokio::task::spawn_blocking(move || -> Result<Value, PipelineError> {
        let ac = pipeline::aligned_case(&dir)?;
        let (w, h) = (ac.aligned.width(), ac.aligned.height());
        let mut nodules = Vec::new();
        for ann in &ac.annotations {
            let n = locate_nodule(ann, &ac.precool_warp, w, h)?;
            let series = extract_region_series(&ac.aligned, &ac.roi, n.point)?;
            nodules.push(json!({ "nodule_id": n.nodule_id, "point": [n.point.0, n.point.1], "series": series }));
        }
        Ok(json!({ "case_id": ac.case_id, "t": (0..io::DECIMATED_SAMPLES).collect::<Vec<_>>(), "nodules": nodules }))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(out))
}

async fn get_annotations(State(st): Shared, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Vec<NoduleAnnotation>>> {
    let case = st.case(&id)?;
    Ok(Json(io::read_record(&case.dir)?.annotations))
}

async fn put_annotations(
    State(st): Shared,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<Vec<NoduleAnnotation>>> {
    let case = st.case(&id)?;
    let annotations: Vec<NoduleAnnotation> = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", e.to_string()))?;
    let index = io::read_frame_index(&case.dir)?;
    for a in &annotations {
        a.validate(index.width, index.height)?;
        if let Some(poly) = &a.polygon {
            rasterize_polygon(poly, index.width, index.height)?;
        }
    }
    // hold the job table so no run can start between the check and the write
    let jobs = st.jobs.lock().unwrap();
    if jobs.active.contains_key(&id) {
        return Err(ApiError::conflict(format!("a job is running on {id}")));
    }
    let record = io::write_annotations(&case.dir, &annotations)?;
    pipeline::invalidate_annotations(&case.dir)?;
    drop(jobs);
    Ok(Json(record.annotations))
}

/// The nodule's region on the precool frame, from the shared rasterizer.
async fn nodule_mask(State(st): Shared, UrlPath((id, nodule)): UrlPath<(String, String)>) -> ApiResult<Response> {
    let case = st.case(&id)?;
    let record = io::read_record(&case.dir)?;
    let index = io::read_frame_index(&case.dir)?;
    let ann = record
        .annotations
        .iter()
        .find(|a| a.nodule_id == nodule)
        .ok_or_else(|| ApiError::not_found(format!("no nodule {nodule}")))?;
    let mask = match &ann.polygon {
        Some(poly) => rasterize_polygon(poly, index.width, index.height)?,
        None => window_mask(index.width, index.height, (ann.point[0], ann.point[1]), NODULE_WINDOW),
    };
    Ok(png_response(mask_png(index.width, index.height, mask.bits()), &[("x-mask-pixels", mask.count().to_string())]))
}

#[derive(Debug, Deserialize)]
struct RunRequest {
    stage: String,
    #[serde(default)]
    segmenter: Option<String>,
    #[serde(default)]
    model: Option<PathBuf>,
}

async fn run(State(st): Shared, UrlPath(id): UrlPath<String>, Json(req): Json<RunRequest>) -> ApiResult<Response> {
    let case = st.case(&id)?;
    let stage = Stage::from_name(&req.stage)
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "usage", format!("unknown stage {}", req.stage)))?;
    let segmenter = Segmenter::parse(req.segmenter.as_deref().unwrap_or("otsu"), req.model)?;
    for need in stage.requires() {
        if !pipeline::stage_done(&case.dir, *need) {
            return Err(ApiError::conflict(format!("{} requires {} first", stage.name(), need.name())));
        }
    }
    if stage == Stage::Predict && st.model.is_none() {
        return Err(ApiError::conflict("no model loaded"));
    }
    let mut t = st.jobs.lock().unwrap();
    if let Some(j) = t.active.get(&id) {
        return Err(ApiError::conflict(format!("job {j} is already active on {id}")));
    }
    t.next += 1;
    let job_id = t.next;
    let job = Job { id: job_id, dir: case.dir.clone(), stage, segmenter };
    if st.queue.try_send(job).is_err() {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "busy", "job queue is full"));
    }
    let rec = JobRecord { job_id, case_id: id.clone(), stage, state: JobState::Queued, result: None, error: None };
    t.jobs.insert(job_id, rec.clone());
    t.active.insert(id, job_id);
    Ok((StatusCode::ACCEPTED, Json(rec)).into_response())
}

async fn job(State(st): Shared, UrlPath(job): UrlPath<u64>) -> ApiResult<Json<JobRecord>> {
    st.job(job).map(Json).ok_or_else(|| ApiError::not_found(format!("no job {job}")))
}

async fn result(State(st): Shared, UrlPath(id): UrlPath<String>) -> ApiResult<Json<pipeline::CasePrediction>> {
    let case = st.case(&id)?;
    Ok(Json(pipeline::load_prediction(&case.dir)?))
}

async fn registration(State(st): Shared, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let case = st.case(&id)?;
    let stab = pipeline::load_alignment(&case.dir)?;
    let worst = stab.frames.iter().enumerate().min_by(|a, b| a.1.rho.total_cmp(&b.1.rho)).map_or(0, |(k, _)| k);
    let frames: Vec<Value> = stab
        .frames
        .iter()
        .enumerate()
        .map(|(k, w)| json!({ "frame_index": k, "rho": w.rho, "params": w.matrix(), "converged": w.converged }))
        .collect();
    let base = format!("/api/cases/{id}/registration/{worst}.png");
    Ok(Json(json!({
        "case_id": id,
        "review_threshold": REVIEW_RHO,
        "review_required": stab.review_required(),
        "min_rho": stab.min_frame_rho(),
        "precool": { "rho": stab.precool.rho, "params": stab.precool.matrix() },
        "frames": frames,
        "difference": { "frame_index": worst, "before": format!("{base}?view=before"), "after": format!("{base}?view=after") },
    })))
}

/// `|frame_k − frame_0|` before or after alignment, in a shared window.
async fn registration_png(
    State(st): Shared,
    UrlPath((id, file)): UrlPath<(String, String)>,
    Query(q): Query<FrameQuery>,
) -> ApiResult<Response> {
    let case = st.case(&id)?;
    let k: usize = file
        .strip_suffix(".png")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ApiError::not_found(format!("no frame {file}")))?;
    let stab = pipeline::load_alignment(&case.dir)?;
    let seq = st.sequence(&case)?;
    let frame = seq.frames().get(k).ok_or_else(|| ApiError::not_found(format!("no frame {k}")))?;
    let f0 = &seq.frames()[0];
    let before: Vec<Option<f64>> = frame.temps().iter().zip(f0.temps()).map(|(a, b)| Some((*a - *b).abs() as f64)).collect();
    let hi = before.iter().flatten().copied().fold(0.0, f64::max);
    let values = match q.view.as_deref() {
        None | Some("before") => before,
        Some("after") => {
            let a = resample(frame, &stab.frames[k]);
            let w = frame.width();
            (0..frame.temps().len()).map(|p| a.at(p / w, p % w).map(|v| (v - f0.temps()[p] as f64).abs())).collect()
        }
        Some(other) => return Err(ApiError::new(StatusCode::BAD_REQUEST, "usage", format!("unknown view {other}"))),
    };
    Ok(png_response(png(frame.width(), frame.height(), &values, 0.0, hi), &[("x-difference-max", format!("{hi:.4}"))]))
}
