#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine;
use fenerf::config::{Config, DatasetSpec, DiscConfig, GeneratorConfig, SamplingConfig, TrainConfig};
use fenerf::imageio;
use fenerf::training::Trainer;
use fenerf_interface::jobs::{JobRecord, JobStatus};
use fenerf_interface::service::{Service, ServiceConfig};
use serde_json::Value;

pub const RES: usize = 16;

pub fn tiny_config() -> Config {
    Config {
        dataset: DatasetSpec { n_scenes: 8, resolution: 32, ..DatasetSpec::default() },
        sampling: SamplingConfig { samples: 6, ..SamplingConfig::default() },
        generator: GeneratorConfig {
            z_shape: 6,
            z_texture: 6,
            mapping_hidden: 16,
            trunk_depth: 2,
            trunk_width: 16,
            color_width: 8,
            grid_size: 4,
            grid_features: 2,
            ..GeneratorConfig::default()
        },
        discriminator: DiscConfig { widths: vec![4, 4, 4] },
        train: TrainConfig { resolution: RES, batch: 2, iterations: 4, checkpoint_every: 2, ..TrainConfig::default() },
        ..Config::default()
    }
}

/// Untrained model checkpoint written into `dir`.
pub fn checkpoint(dir: &Path) -> PathBuf {
    let path = dir.join("model.fnrf");
    Trainer::new(&tiny_config()).unwrap().save(&path).unwrap();
    path
}

pub async fn start(ckpt: &Path, artifacts: &Path, workers: usize, queue: usize) -> Service {
    Service::start(ServiceConfig {
        bind: "127.0.0.1:0".parse().unwrap(),
        checkpoint: ckpt.to_path_buf(),
        artifacts: artifacts.to_path_buf(),
        max_concurrent: workers,
        queue_capacity: queue,
        retention: 64,
    })
    .await
    .unwrap()
}

pub fn mask_b64(labels: &[u8]) -> String {
    let res = (labels.len() as f64).sqrt() as usize;
    base64::engine::general_purpose::STANDARD.encode(imageio::encode_labels(res, labels).unwrap())
}

/// Left half class 1, right half class 0.
pub fn half_mask() -> Vec<u8> {
    (0..RES * RES).map(|i| u8::from(i % RES < RES / 2)).collect()
}

pub struct Client {
    pub http: reqwest::Client,
    pub base: String,
}

impl Client {
    pub fn new(svc: &Service) -> Self {
        Self { http: reqwest::Client::new(), base: format!("http://{}", svc.addr) }
    }

    pub async fn get(&self, path: &str) -> (u16, Value) {
        let r = self.http.get(format!("{}{path}", self.base)).send().await.unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    pub async fn bytes(&self, path: &str) -> (u16, Vec<u8>) {
        let r = self.http.get(format!("{}{path}", self.base)).send().await.unwrap();
        (r.status().as_u16(), r.bytes().await.unwrap().to_vec())
    }

    pub async fn post(&self, path: &str, body: &Value) -> (u16, Value) {
        let r = self.http.post(format!("{}{path}", self.base)).json(body).send().await.unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    pub async fn post_raw(&self, path: &str, body: &'static str) -> (u16, Value) {
        let r = self
            .http
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .body(body)
            .send()
            .await
            .unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    pub async fn delete(&self, path: &str) -> (u16, Value) {
        let r = self.http.delete(format!("{}{path}", self.base)).send().await.unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    pub async fn job(&self, id: &str) -> JobRecord {
        let (status, v) = self.get(&format!("/jobs/{id}")).await;
        assert_eq!(status, 200, "{v}");
        serde_json::from_value(v).unwrap()
    }

    /// Polls until the job finishes, returning every record seen.
    pub async fn follow(&self, id: &str, limit: Duration) -> Vec<JobRecord> {
        let start = std::time::Instant::now();
        let mut seen = Vec::new();
        loop {
            let r = self.job(id).await;
            let done = r.status.finished();
            seen.push(r);
            if done {
                return seen;
            }
            assert!(start.elapsed() < limit, "job {id} still {:?} after {limit:?}", seen.last().unwrap().status);
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
    }

    /// Polls until the job is running with at least `iter` iterations done.
    pub async fn wait_running(&self, id: &str, iter: usize) -> JobRecord {
        for _ in 0..4000 {
            let r = self.job(id).await;
            if r.status == JobStatus::Running && r.progress.iter >= iter {
                return r;
            }
            assert!(!r.status.finished(), "job {id} finished early: {r:?}");
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
        panic!("job {id} never reached iteration {iter}");
    }
}

pub fn invert_body(steps: usize) -> Value {
    serde_json::json!({
        "kind": "invert-semantic",
        "payload": { "mask": mask_b64(&half_mask()), "pose": { "pitch": 0.0, "yaw": 0.1 }, "steps": steps, "seed": 3 }
    })
}
