//! Job records, payload validation and job execution.

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use anyhow::Result;
use fenerf::camera::CameraPose;
use fenerf::config::{Config, SamplingConfig};
use fenerf::generator::{interpolate_latents, Generator};
use fenerf::inversion::{invert_full, invert_semantic, local_edit, InversionSettings, Inverted, Target, TraceRecord};
use fenerf::renderer::render;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifacts::{write, write_render, Latents, RenderFiles};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JobKind {
    InvertSemantic,
    InvertFull,
    LocalEdit,
    Render,
    Morph,
}

impl JobKind {
    pub fn parse(s: &str) -> Option<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).ok()
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
    pub fn finished(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub iter: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub progress: Progress,
    /// Artifact URLs, e.g. `/artifacts/jobs/<id>/rgb.png`.
    pub result_paths: Vec<String>,
    pub error: Option<String>,
    /// Latents produced by inversion and edit jobs.
    pub latent_id: Option<String>,
    /// Metrics of the final state, such as `final_miou`.
    #[serde(default)]
    pub metrics: serde_json::Map<String, serde_json::Value>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseIn {
    pub pitch: f64,
    pub yaw: f64,
}

impl PoseIn {
    pub fn to_pose(self, cfg: &Config) -> CameraPose {
        CameraPose::with_camera(self.pitch, self.yaw, &cfg.camera)
    }
}

/// A validated job ready to run; masks are decoded and latents resolved.
#[derive(Clone, Debug)]
pub enum JobSpec {
    InvertSemantic { mask: Vec<u8>, pose: CameraPose, steps: usize, init: Latents },
    InvertFull { mask: Vec<u8>, image: Vec<f32>, pose: CameraPose, steps: usize, init: Latents },
    LocalEdit { mask: Vec<u8>, pose: CameraPose, steps: usize, start: Latents },
    Render { latents: Latents, pose: CameraPose, resolution: usize },
    Morph { a: Latents, b: Latents, n: usize, pose: CameraPose },
}

impl JobSpec {
    pub fn kind(&self) -> JobKind {
        match self {
            JobSpec::InvertSemantic { .. } => JobKind::InvertSemantic,
            JobSpec::InvertFull { .. } => JobKind::InvertFull,
            JobSpec::LocalEdit { .. } => JobKind::LocalEdit,
            JobSpec::Render { .. } => JobKind::Render,
            JobSpec::Morph { .. } => JobKind::Morph,
        }
    }

    pub fn total(&self) -> usize {
        match self {
            JobSpec::InvertSemantic { steps, .. } | JobSpec::InvertFull { steps, .. } | JobSpec::LocalEdit { steps, .. } => *steps,
            JobSpec::Render { .. } => 1,
            JobSpec::Morph { n, .. } => n * n,
        }
    }
}

pub struct Model {
    pub cfg: Config,
    pub gen: Generator<f32>,
    pub hash: String,
}

impl Model {
    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig { stratified: false, ..self.cfg.sampling }
    }

    pub fn resolution(&self) -> usize {
        self.cfg.train.resolution
    }
}

struct Slot {
    record: JobRecord,
    cancel: Arc<AtomicBool>,
}

/// The single synchronized structure of the service.
pub struct JobTable {
    slots: HashMap<String, Slot>,
    finished: VecDeque<String>,
    retention: usize,
}

impl JobTable {
    pub fn new(retention: usize) -> Self {
        Self { slots: HashMap::new(), finished: VecDeque::new(), retention }
    }

    pub fn active(&self) -> usize {
        self.slots.values().filter(|s| !s.record.status.finished()).count()
    }

    pub fn insert(&mut self, record: JobRecord) -> Arc<AtomicBool> {
        let cancel = Arc::new(AtomicBool::new(false));
        self.slots.insert(record.id.clone(), Slot { record, cancel: cancel.clone() });
        cancel
    }

    pub fn get(&self, id: &str) -> Option<JobRecord> {
        self.slots.get(id).map(|s| s.record.clone())
    }

    /// Requests cancellation; finished jobs are left as they are.
    pub fn cancel(&mut self, id: &str) -> Option<JobRecord> {
        let slot = self.slots.get(id)?;
        if !slot.record.status.finished() {
            slot.cancel.store(true, Ordering::SeqCst);
        }
        Some(slot.record.clone())
    }

    pub fn cancel_all(&mut self) {
        for s in self.slots.values().filter(|s| !s.record.status.finished()) {
            s.cancel.store(true, Ordering::SeqCst);
        }
    }

    fn update(&mut self, id: &str, f: impl FnOnce(&mut JobRecord)) {
        if let Some(s) = self.slots.get_mut(id) {
            f(&mut s.record);
        }
    }

    fn finish(&mut self, record: JobRecord) {
        let id = record.id.clone();
        if let Some(s) = self.slots.get_mut(&id) {
            s.record = record;
        }
        self.finished.push_back(id);
        while self.finished.len() > self.retention {
            if let Some(old) = self.finished.pop_front() {
                self.slots.remove(&old);
            }
        }
    }
}

pub type SharedTable = Arc<Mutex<JobTable>>;

/// Runs one job to completion on the calling thread, keeping the table current. Failures and
/// cancellation end in `failed` with a message; the finished record is also written to disk.
pub fn execute(model: &Model, artifacts: &Path, table: &SharedTable, id: &str, spec: JobSpec, cancel: &AtomicBool) {
    let cancelled = || cancel.load(Ordering::SeqCst);
    let outcome = if cancelled() {
        Err(anyhow::Error::new(fenerf::Error::Cancelled))
    } else {
        table.lock().unwrap().update(id, |r| r.status = JobStatus::Running);
        let mut on_progress = |iter: usize| -> fenerf::Result<()> {
            table.lock().unwrap().update(id, |r| r.progress.iter = r.progress.iter.max(iter));
            if cancelled() {
                return Err(fenerf::Error::Cancelled);
            }
            Ok(())
        };
        run(model, artifacts, id, spec, &mut on_progress)
    };
    let Some(mut r) = table.lock().unwrap().get(id) else { return };
    match outcome {
        Ok(out) => {
            r.status = JobStatus::Done;
            r.progress.iter = r.progress.total;
            r.result_paths = out.paths;
            r.latent_id = out.latent_id;
            r.metrics = out.metrics;
        }
        Err(e) => {
            r.status = JobStatus::Failed;
            r.error = Some(match e.downcast_ref::<fenerf::Error>() {
                Some(fenerf::Error::Cancelled) => "cancelled".to_string(),
                _ => format!("{e:#}"),
            });
        }
    }
    // on disk first, so a record evicted from the table is still served
    if let Ok(text) = serde_json::to_string_pretty(&r) {
        let _ = write(&record_path(artifacts, id), text.as_bytes());
    }
    table.lock().unwrap().finish(r);
}

pub fn record_path(artifacts: &Path, id: &str) -> std::path::PathBuf {
    artifacts.join("jobs").join(id).join("record.json")
}

pub fn latent_path(artifacts: &Path, id: &str) -> std::path::PathBuf {
    artifacts.join("latents").join(format!("{id}.json"))
}

/// Stores latents under a fresh id.
pub fn store_latents(artifacts: &Path, latents: &Latents) -> Result<String> {
    let id = uuid::Uuid::new_v4().simple().to_string();
    latents.save(&latent_path(artifacts, &id))?;
    Ok(id)
}

struct Output {
    paths: Vec<String>,
    latent_id: Option<String>,
    metrics: serde_json::Map<String, serde_json::Value>,
}

fn urls(id: &str, files: &RenderFiles) -> Vec<String> {
    [&files.rgb, &files.mask, &files.preview, &files.depth].iter().map(|f| format!("/artifacts/jobs/{id}/{f}")).collect()
}

fn run(model: &Model, artifacts: &Path, id: &str, spec: JobSpec, progress: &mut dyn FnMut(usize) -> fenerf::Result<()>) -> Result<Output> {
    let gen = &model.gen;
    let dir = artifacts.join("jobs").join(id);
    let sampling = model.sampling();
    let (near, far) = (sampling.near, sampling.far);
    let settings = |steps: usize| InversionSettings { steps, ..InversionSettings::from_config(&model.cfg) };
    let mut on_iter = |r: &TraceRecord| progress(r.iter);
    let inverted = |inv: Inverted| -> Result<Output> {
        let out = render(gen, &inv.z_s, &inv.z_t, &inv.pose, &sampling, model.resolution(), None::<&mut ChaCha8Rng>)?;
        let files = write_render(&dir, "", &out, near, far)?;
        write(&dir.join("trace.jsonl"), inv.trace.to_ndjson().as_bytes())?;
        let latent_id = store_latents(artifacts, &Latents::from_tensors(&inv.z_s, &inv.z_t))?;
        let mut paths = urls(id, &files);
        paths.push(format!("/artifacts/jobs/{id}/trace.jsonl"));
        let mut metrics = serde_json::Map::new();
        metrics.insert("final_miou".into(), inv.trace.final_miou.into());
        if let Some(p) = inv.trace.final_psnr.filter(|p| p.is_finite()) {
            metrics.insert("final_psnr".into(), p.into());
        }
        metrics.insert("pose".into(), serde_json::json!({ "pitch": inv.pose.pitch, "yaw": inv.pose.yaw }));
        Ok(Output { paths, latent_id: Some(latent_id), metrics })
    };
    match spec {
        JobSpec::InvertSemantic { mask, pose, steps, init } => {
            let (zs, zt) = init.tensors(gen)?;
            inverted(invert_semantic(gen, &mask, &pose, &settings(steps), &zs, &zt, &mut on_iter)?)
        }
        JobSpec::InvertFull { mask, image, pose, steps, init } => {
            let (zs, zt) = init.tensors(gen)?;
            let target = Target { mask, image: Some(image) };
            inverted(invert_full(gen, &target, &pose, &settings(steps), (&zs, &zt), &mut on_iter)?)
        }
        JobSpec::LocalEdit { mask, pose, steps, start } => {
            let (zs, zt) = start.tensors(gen)?;
            inverted(local_edit(gen, (&zs, &zt), &mask, &pose, &settings(steps), &mut on_iter)?)
        }
        JobSpec::Render { latents, pose, resolution } => {
            let (zs, zt) = latents.tensors(gen)?;
            let out = render(gen, &zs, &zt, &pose, &sampling, resolution, None::<&mut ChaCha8Rng>)?;
            Ok(Output { paths: urls(id, &write_render(&dir, "", &out, near, far)?), latent_id: None, metrics: Default::default() })
        }
        JobSpec::Morph { a, b, n, pose } => {
            let ((sa, ta), (sb, tb)) = (a.tensors(gen)?, b.tensors(gen)?);
            let mut paths = Vec::new();
            for i in 0..n {
                let zs = interpolate_latents(&sa, &sb, i as f64 / (n - 1) as f64)?;
                for j in 0..n {
                    progress(i * n + j)?;
                    let zt = interpolate_latents(&ta, &tb, j as f64 / (n - 1) as f64)?;
                    let cell = render(gen, &zs, &zt, &pose, &sampling, model.resolution(), None::<&mut ChaCha8Rng>)?;
                    paths.extend(urls(id, &write_render(&dir, &format!("cell_{i}_{j}_"), &cell, near, far)?));
                }
            }
            Ok(Output { paths, latent_id: None, metrics: Default::default() })
        }
    }
}

/// Seeded latents for jobs that do not name a starting point.
pub fn seeded_latents(gen: &Generator<f32>, seed: u64) -> Latents {
    Latents::sample(gen, &mut ChaCha8Rng::seed_from_u64(seed))
}

