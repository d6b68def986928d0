//! HTTP+JSON service: model info, sampling, rendering and long-running jobs polled by id.

use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context};
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use fenerf::imageio;
use fenerf::renderer::render;
use fenerf::training::load_generator;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tokio::sync::{oneshot, Semaphore};
use tokio::task::JoinHandle;

use crate::artifacts::{check_mask, write_render, Latents, RenderFiles};
use crate::jobs::{
    execute, latent_path, record_path, seeded_latents, store_latents, JobKind, JobRecord, JobSpec, JobStatus, JobTable, Model, PoseIn,
    Progress, SharedTable,
};

pub const MAX_STEPS: usize = 10_000;
pub const MAX_SAMPLES: usize = 16;
pub const MAX_MORPH: usize = 8;
pub const MAX_RESOLUTION: usize = 256;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub checkpoint: PathBuf,
    pub artifacts: PathBuf,
    /// Jobs executing at once.
    pub max_concurrent: usize,
    /// Jobs allowed to wait for a worker; beyond this, submissions get 429.
    pub queue_capacity: usize,
    /// Finished job records kept in memory.
    pub retention: usize,
}

impl ServiceConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.max_concurrent < 1 {
            bail!("max concurrent jobs must be >= 1");
        }
        Ok(())
    }
}

#[derive(Clone)]
struct AppState {
    model: Arc<Model>,
    artifacts: Arc<PathBuf>,
    table: SharedTable,
    permits: Arc<Semaphore>,
    capacity: usize,
}

/// A running service bound to `addr`.
pub struct Service {
    pub addr: SocketAddr,
    table: SharedTable,
    stop: oneshot::Sender<()>,
    handle: JoinHandle<()>,
}

impl Service {
    pub async fn start(cfg: ServiceConfig) -> anyhow::Result<Self> {
        cfg.validate()?;
        let ckpt = cfg.checkpoint.clone();
        let (model_cfg, gen) = tokio::task::spawn_blocking(move || load_generator(&ckpt))
            .await?
            .with_context(|| format!("loading {}", cfg.checkpoint.display()))?;
        std::fs::create_dir_all(&cfg.artifacts).with_context(|| format!("creating {}", cfg.artifacts.display()))?;
        let hash = gen.params.hash();
        let table: SharedTable = Arc::new(Mutex::new(JobTable::new(cfg.retention)));
        let state = AppState {
            model: Arc::new(Model { cfg: model_cfg, gen, hash }),
            artifacts: Arc::new(cfg.artifacts.clone()),
            table: table.clone(),
            permits: Arc::new(Semaphore::new(cfg.max_concurrent)),
            capacity: cfg.max_concurrent + cfg.queue_capacity,
        };
        let listener = tokio::net::TcpListener::bind(cfg.bind).await.with_context(|| format!("binding {}", cfg.bind))?;
        let addr = listener.local_addr()?;
        let (stop, stopped) = oneshot::channel::<()>();
        let app = router(state);
        let handle = tokio::spawn(async move {
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = stopped.await;
                })
                .await;
        });
        Ok(Self { addr, table, stop, handle })
    }

    /// Stops accepting requests and cancels unfinished jobs.
    pub async fn shutdown(self) {
        self.table.lock().unwrap().cancel_all();
        let _ = self.stop.send(());
        let _ = self.handle.await;
    }
}

fn router(state: AppState) -> Router {
    Router::new()
        .route("/model", get(model_info))
        .route("/sample", post(sample))
        .route("/render", post(render_now))
        .route("/jobs", post(create_job))
        .route("/jobs/{id}", get(get_job).delete(cancel_job))
        .route("/artifacts/{*path}", get(artifact))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into(), field: None }
    }

    fn bad(message: impl Into<String>, field: &str) -> Self {
        Self { status: StatusCode::BAD_REQUEST, message: message.into(), field: Some(field.to_string()) }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message, "field": self.field }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Deserializes with the path of the offending field in the diagnostics.
fn parse<T: DeserializeOwned>(value: Value, prefix: &str) -> ApiResult<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let field = match (prefix, path.as_str()) {
            (p, ".") => p.to_string(),
            ("", q) => q.to_string(),
            (p, q) => format!("{p}.{q}"),
        };
        ApiError::bad(e.inner().to_string(), &field)
    })
}

fn body_json(body: &Bytes) -> ApiResult<Value> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(json!({}));
    }
    serde_json::from_slice(body).map_err(|e| ApiError::bad(format!("malformed JSON: {e}"), ""))
}

async fn model_info(State(st): State<AppState>) -> Json<Value> {
    let m = &st.model;
    Json(json!({
        "classes": m.gen.cfg.classes,
        "resolution": m.resolution(),
        "z_shape": m.gen.cfg.z_shape,
        "z_texture": m.gen.cfg.z_texture,
        "samples": m.cfg.sampling.samples,
        "checkpoint_hash": m.hash,
        "job_kinds": ["invert-semantic", "invert-full", "local-edit", "render", "morph"],
    }))
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-')
}

fn load_latents(st: &AppState, id: &str, field: &str) -> ApiResult<Latents> {
    if !valid_id(id) {
        return Err(ApiError::bad("malformed latent id", field));
    }
    let path = latent_path(&st.artifacts, id);
    if !path.exists() {
        return Err(ApiError::not_found(format!("unknown latent id {id}")));
    }
    let l = Latents::load(&path).map_err(ApiError::internal)?;
    l.tensors(&st.model.gen).map_err(|e| ApiError::bad(format!("{e:#}"), field))?;
    Ok(l)
}

fn check_latents(st: &AppState, l: &Latents, field: &str) -> ApiResult<()> {
    l.tensors(&st.model.gen).map(|_| ()).map_err(|e| ApiError::bad(format!("{e:#}"), field))
}

#[derive(Serialize)]
struct RenderUrls {
    pose: PoseIn,
    rgb: String,
    mask: String,
    preview: String,
    depth: String,
}

/// Renders into a directory keyed by the inputs; identical requests reuse the files.
fn cached_render(st: &AppState, latents: &Latents, pose: PoseIn, resolution: usize) -> anyhow::Result<RenderUrls> {
    let mut h = Sha256::new();
    h.update(st.model.hash.as_bytes());
    h.update(serde_json::to_vec(latents)?);
    h.update(pose.pitch.to_le_bytes());
    h.update(pose.yaw.to_le_bytes());
    h.update((resolution as u64).to_le_bytes());
    let key: String = h.finalize()[..12].iter().map(|b| format!("{b:02x}")).collect();
    let dir = st.artifacts.join("renders").join(&key);
    let files = RenderFiles { rgb: "rgb.png".into(), mask: "mask.png".into(), preview: "preview.png".into(), depth: "depth.png".into() };
    if !dir.join(&files.depth).exists() {
        let m = &st.model;
        let (zs, zt) = latents.tensors(&m.gen)?;
        let sampling = m.sampling();
        let out = render(&m.gen, &zs, &zt, &pose.to_pose(&m.cfg), &sampling, resolution, None::<&mut ChaCha8Rng>)?;
        write_render(&dir, "", &out, sampling.near, sampling.far)?;
    }
    let url = |f: &str| format!("/artifacts/renders/{key}/{f}");
    Ok(RenderUrls { pose, rgb: url(&files.rgb), mask: url(&files.mask), preview: url(&files.preview), depth: url(&files.depth) })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRequest {
    seed: Option<u64>,
    count: Option<usize>,
    poses: Option<Vec<PoseIn>>,
}

async fn sample(State(st): State<AppState>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: SampleRequest = parse(body_json(&body)?, "")?;
    let count = req.count.unwrap_or(1);
    if count == 0 || count > MAX_SAMPLES {
        return Err(ApiError::bad(format!("count must be in 1..={MAX_SAMPLES}"), "count"));
    }
    let seed = req.seed.unwrap_or_else(rand::random);
    let poses = req.poses.unwrap_or_else(|| [-0.3, 0.0, 0.3].map(|yaw| PoseIn { pitch: 0.0, yaw }).to_vec());
    let out = tokio::task::spawn_blocking(move || -> anyhow::Result<Value> {
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let latents = seeded_latents(&st.model.gen, seed.wrapping_add(i as u64));
            let id = store_latents(&st.artifacts, &latents)?;
            let previews = poses
                .iter()
                .map(|p| cached_render(&st, &latents, *p, st.model.resolution()))
                .collect::<anyhow::Result<Vec<_>>>()?;
            samples.push(json!({ "latent_id": id, "seed": seed.wrapping_add(i as u64), "previews": previews }));
        }
        Ok(json!({ "samples": samples }))
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(|e| ApiError::internal(format!("{e:#}")))?;
    Ok(Json(out))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RenderRequest {
    latent_id: Option<String>,
    latents: Option<Latents>,
    pose: PoseIn,
    resolution: Option<usize>,
}

fn resolve_render(st: &AppState, req: RenderRequest, prefix: &str) -> ApiResult<(Latents, PoseIn, usize)> {
    let field = |f: &str| if prefix.is_empty() { f.to_string() } else { format!("{prefix}.{f}") };
    let latents = match (req.latent_id, req.latents) {
        (Some(id), None) => load_latents(st, &id, &field("latent_id"))?,
        (None, Some(l)) => {
            check_latents(st, &l, &field("latents"))?;
            l
        }
        _ => return Err(ApiError::bad("exactly one of latent_id and latents is required", &field("latent_id"))),
    };
    let res = req.resolution.unwrap_or(st.model.resolution());
    if !(2..=MAX_RESOLUTION).contains(&res) {
        return Err(ApiError::bad(format!("resolution must be in 2..={MAX_RESOLUTION}"), &field("resolution")));
    }
    check_pose(req.pose, &field("pose"))?;
    Ok((latents, req.pose, res))
}

fn check_pose(p: PoseIn, field: &str) -> ApiResult<()> {
    let ok = |v: f64| v.is_finite() && v.abs() < std::f64::consts::FRAC_PI_2;
    if !ok(p.pitch) || !ok(p.yaw) {
        return Err(ApiError::bad("pose angles must be finite and within (-pi/2, pi/2)", field));
    }
    Ok(())
}

async fn render_now(State(st): State<AppState>, body: Bytes) -> ApiResult<Json<RenderUrls>> {
    let req: RenderRequest = parse(body_json(&body)?, "")?;
    let (latents, pose, res) = resolve_render(&st, req, "")?;
    let urls = tokio::task::spawn_blocking(move || cached_render(&st, &latents, pose, res))
        .await
        .map_err(ApiError::internal)?
        .map_err(|e| ApiError::internal(format!("{e:#}")))?;
    Ok(Json(urls))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JobRequest {
    kind: String,
    #[serde(default)]
    payload: Value,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InvertPayload {
    mask: String,
    image: Option<String>,
    pose: PoseIn,
    steps: Option<usize>,
    seed: Option<u64>,
    /// Starting latents; `z_t` stays fixed for semantic inversion.
    latent_id: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EditPayload {
    latent_id: String,
    mask: String,
    pose: PoseIn,
    steps: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MorphPayload {
    a: String,
    b: String,
    n: usize,
    pose: PoseIn,
}

fn decode_b64(s: &str, field: &str) -> ApiResult<Vec<u8>> {
    base64::engine::general_purpose::STANDARD.decode(s.trim()).map_err(|e| ApiError::bad(format!("invalid base64: {e}"), field))
}

fn decode_mask(st: &AppState, s: &str, field: &str) -> ApiResult<Vec<u8>> {
    let bytes = decode_b64(s, field)?;
    let (_, mask) = imageio::decode_labels(&bytes, Path::new(field)).map_err(|e| ApiError::bad(e.to_string(), field))?;
    check_mask(&mask, st.model.resolution(), st.model.gen.cfg.classes).map_err(|e| ApiError::bad(format!("{e:#}"), field))?;
    Ok(mask)
}

fn decode_image(st: &AppState, s: &str, field: &str) -> ApiResult<Vec<f32>> {
    let d = imageio::decode(&decode_b64(s, field)?, Path::new(field)).map_err(|e| ApiError::bad(e.to_string(), field))?;
    let res = st.model.resolution();
    if d.channels != 3 || d.width != res || d.height != res {
        return Err(ApiError::bad(format!("expected a {res}x{res} RGB image, got {}x{}x{}", d.width, d.height, d.channels), field));
    }
    Ok(d.data.iter().map(|v| *v as f32 / 255.0).collect())
}

fn check_steps(steps: Option<usize>, st: &AppState) -> ApiResult<usize> {
    let s = steps.unwrap_or(st.model.cfg.inversion.steps);
    if s == 0 || s > MAX_STEPS {
        return Err(ApiError::bad(format!("steps must be in 1..={MAX_STEPS}"), "payload.steps"));
    }
    Ok(s)
}

fn build_spec(st: &AppState, kind: JobKind, payload: Value) -> ApiResult<JobSpec> {
    let model = &st.model;
    Ok(match kind {
        JobKind::InvertSemantic | JobKind::InvertFull => {
            let p: InvertPayload = parse(payload, "payload")?;
            let mask = decode_mask(st, &p.mask, "payload.mask")?;
            check_pose(p.pose, "payload.pose")?;
            let steps = check_steps(p.steps, st)?;
            let init = match &p.latent_id {
                Some(id) => load_latents(st, id, "payload.latent_id")?,
                None => seeded_latents(&model.gen, p.seed.unwrap_or(0)),
            };
            let pose = p.pose.to_pose(&model.cfg);
            match (kind, &p.image) {
                (JobKind::InvertFull, Some(img)) => {
                    let image = decode_image(st, img, "payload.image")?;
                    JobSpec::InvertFull { mask, image, pose, steps, init }
                }
                (JobKind::InvertFull, None) => return Err(ApiError::bad("invert-full needs an image", "payload.image")),
                (_, Some(_)) => return Err(ApiError::bad("invert-semantic takes no image", "payload.image")),
                (_, None) => JobSpec::InvertSemantic { mask, pose, steps, init },
            }
        }
        JobKind::LocalEdit => {
            let p: EditPayload = parse(payload, "payload")?;
            let mask = decode_mask(st, &p.mask, "payload.mask")?;
            check_pose(p.pose, "payload.pose")?;
            let steps = check_steps(p.steps, st)?;
            let start = load_latents(st, &p.latent_id, "payload.latent_id")?;
            JobSpec::LocalEdit { mask, pose: p.pose.to_pose(&model.cfg), steps, start }
        }
        JobKind::Render => {
            let req: RenderRequest = parse(payload, "payload")?;
            let (latents, pose, resolution) = resolve_render(st, req, "payload")?;
            JobSpec::Render { latents, pose: pose.to_pose(&model.cfg), resolution }
        }
        JobKind::Morph => {
            let p: MorphPayload = parse(payload, "payload")?;
            if !(2..=MAX_MORPH).contains(&p.n) {
                return Err(ApiError::bad(format!("n must be in 2..={MAX_MORPH}"), "payload.n"));
            }
            check_pose(p.pose, "payload.pose")?;
            let a = load_latents(st, &p.a, "payload.a")?;
            let b = load_latents(st, &p.b, "payload.b")?;
            JobSpec::Morph { a, b, n: p.n, pose: p.pose.to_pose(&model.cfg) }
        }
    })
}

async fn create_job(State(st): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<JobRecord>)> {
    let req: JobRequest = parse(body_json(&body)?, "")?;
    let kind = JobKind::parse(&req.kind).ok_or_else(|| {
        ApiError::bad(format!("unknown job kind {:?}; expected invert-semantic, invert-full, local-edit, render or morph", req.kind), "kind")
    })?;
    let spec = build_spec(&st, kind, req.payload)?;
    let record = JobRecord {
        id: uuid::Uuid::new_v4().simple().to_string(),
        kind,
        status: JobStatus::Queued,
        progress: Progress { iter: 0, total: spec.total() },
        result_paths: Vec::new(),
        error: None,
        latent_id: None,
        metrics: Default::default(),
    };
    let cancel = {
        let mut table = st.table.lock().unwrap();
        if table.active() >= st.capacity {
            return Err(ApiError::new(StatusCode::TOO_MANY_REQUESTS, format!("job queue is full ({} active)", st.capacity)));
        }
        table.insert(record.clone())
    };
    let id = record.id.clone();
    tokio::spawn(async move {
        let Ok(permit) = st.permits.clone().acquire_owned().await else { return };
        let _ = tokio::task::spawn_blocking(move || {
            execute(&st.model, &st.artifacts, &st.table, &id, spec, &cancel);
            drop(permit);
        })
        .await;
    });
    Ok((StatusCode::ACCEPTED, Json(record)))
}

fn stored_record(st: &AppState, id: &str) -> ApiResult<JobRecord> {
    if !valid_id(id) {
        return Err(ApiError::not_found(format!("unknown job {id}")));
    }
    if let Some(r) = st.table.lock().unwrap().get(id) {
        return Ok(r);
    }
    let path = record_path(&st.artifacts, id);
    let text = std::fs::read_to_string(&path).map_err(|_| ApiError::not_found(format!("unknown job {id}")))?;
    serde_json::from_str(&text).map_err(ApiError::internal)
}

async fn get_job(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<JobRecord>> {
    stored_record(&st, &id).map(Json)
}

async fn cancel_job(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<JobRecord>> {
    if valid_id(&id) {
        if let Some(r) = st.table.lock().unwrap().cancel(&id) {
            return Ok(Json(r));
        }
    }
    stored_record(&st, &id).map(Json)
}

async fn artifact(State(st): State<AppState>, UrlPath(path): UrlPath<String>) -> ApiResult<Response> {
    let rel = Path::new(&path);
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(ApiError::bad("artifact paths must be relative without '..'", "path"));
    }
    let full = st.artifacts.join(rel);
    let bytes = tokio::fs::read(&full).await.map_err(|_| ApiError::not_found(format!("no artifact {path}")))?;
    let mime = match rel.extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        Some("json") => "application/json",
        Some("jsonl") => "application/x-ndjson",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}
