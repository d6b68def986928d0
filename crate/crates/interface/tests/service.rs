mod common;

use std::time::Duration;

use common::*;
use fenerf::imageio;
use fenerf_interface::jobs::{JobKind, JobStatus};
use serde_json::{json, Value};

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn model_info_reports_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let svc = start(&checkpoint(dir.path()), &dir.path().join("art"), 1, 2).await;
    let c = Client::new(&svc);
    let (status, v) = c.get("/model").await;
    assert_eq!(status, 200);
    assert_eq!(v["classes"], 4);
    assert_eq!(v["resolution"], RES);
    assert_eq!((v["z_shape"].as_u64(), v["z_texture"].as_u64()), (Some(6), Some(6)));
    assert_eq!(v["checkpoint_hash"].as_str().unwrap().len(), 64);
    svc.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn sample_and_render_serve_images() {
    let dir = tempfile::tempdir().unwrap();
    let svc = start(&checkpoint(dir.path()), &dir.path().join("art"), 1, 2).await;
    let c = Client::new(&svc);
    let (status, v) = c.post("/sample", &json!({ "seed": 5, "count": 2 })).await;
    assert_eq!(status, 200, "{v}");
    let samples = v["samples"].as_array().unwrap();
    assert_eq!(samples.len(), 2);
    assert_eq!(samples[0]["previews"].as_array().unwrap().len(), 3);
    let id = samples[0]["latent_id"].as_str().unwrap();
    let (status, mask) = c.bytes(samples[0]["previews"][1]["mask"].as_str().unwrap()).await;
    assert_eq!(status, 200);
    let (res, labels) = imageio::decode_labels(&mask, "m".as_ref()).unwrap();
    assert_eq!((res, labels.len()), (RES, RES * RES));

    let (status, r) = c.post("/render", &json!({ "latent_id": id, "pose": { "pitch": 0.0, "yaw": 0.0 } })).await;
    assert_eq!(status, 200, "{r}");
    // the frontal preview and an explicit frontal render of the same latents are the same files
    assert_eq!(r["mask"], samples[0]["previews"][1]["mask"]);
    let (status, rgb) = c.bytes(r["rgb"].as_str().unwrap()).await;
    assert_eq!(status, 200);
    let d = imageio::decode(&rgb, "r".as_ref()).unwrap();
    assert_eq!((d.width, d.channels), (RES, 3));

    let inline = json!({ "latents": { "z_s": (vec![0.1; 6]), "z_t": (vec![-0.2; 6]) }, "pose": { "pitch": 0.1, "yaw": -0.1 }, "resolution": 8 });
    let (status, r) = c.post("/render", &inline).await;
    assert_eq!(status, 200, "{r}");
    let (_, depth) = c.bytes(r["depth"].as_str().unwrap()).await;
    // 16-bit grey; width from the IHDR chunk
    assert_eq!(u32::from_be_bytes(depth[16..20].try_into().unwrap()), 8);
    assert_eq!(depth[24..26], [16, 0]);
    svc.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn malformed_requests_get_400_with_fields() {
    let dir = tempfile::tempdir().unwrap();
    let svc = start(&checkpoint(dir.path()), &dir.path().join("art"), 1, 2).await;
    let c = Client::new(&svc);
    let cases: Vec<(Value, &str)> = vec![
        (json!({ "kind": "paint", "payload": {} }), "kind"),
        (json!({ "payload": {} }), ""),
        (json!({ "kind": "invert-semantic", "payload": { "mask": "%%%", "pose": { "pitch": 0.0, "yaw": 0.0 } } }), "payload.mask"),
        (json!({ "kind": "invert-semantic", "payload": { "mask": mask_b64(&half_mask()), "pose": { "pitch": "up", "yaw": 0.0 } } }), "payload.pose.pitch"),
        (json!({ "kind": "invert-semantic", "payload": { "mask": mask_b64(&[9; RES * RES]), "pose": { "pitch": 0.0, "yaw": 0.0 } } }), "payload.mask"),
        (json!({ "kind": "invert-semantic", "payload": { "mask": mask_b64(&[0; 64]), "pose": { "pitch": 0.0, "yaw": 0.0 } } }), "payload.mask"),
        (json!({ "kind": "invert-semantic", "payload": { "mask": mask_b64(&half_mask()), "pose": { "pitch": 0.0, "yaw": 0.0 }, "steps": 0 } }), "payload.steps"),
        (json!({ "kind": "invert-full", "payload": { "mask": mask_b64(&half_mask()), "pose": { "pitch": 0.0, "yaw": 0.0 } } }), "payload.image"),
        (json!({ "kind": "render", "payload": { "pose": { "pitch": 0.0, "yaw": 0.0 } } }), "payload.latent_id"),
        (json!({ "kind": "render", "payload": { "latents": { "z_s": (vec![0.0; 3]), "z_t": (vec![0.0; 6]) }, "pose": { "pitch": 0.0, "yaw": 0.0 } } }), "payload.latents"),
        (json!({ "kind": "morph", "payload": { "a": "x", "b": "y", "n": 1, "pose": { "pitch": 0.0, "yaw": 0.0 } } }), "payload.n"),
        (json!({ "kind": "render", "payload": { "latents": { "z_s": (vec![0.0; 6]), "z_t": (vec![0.0; 6]) }, "pose": { "pitch": 0.0, "yaw": 0.0 }, "extra": 1 } }), "payload.extra"),
    ];
    for (body, field) in cases {
        let (status, v) = c.post("/jobs", &body).await;
        assert_eq!(status, 400, "{body} -> {v}");
        assert!(v["error"].as_str().is_some_and(|e| !e.is_empty()));
        assert_eq!(v["field"].as_str().unwrap_or(""), field, "{body} -> {v}");
    }
    let (status, v) = c.post_raw("/jobs", "{ not json").await;
    assert_eq!(status, 400, "{v}");
    let (status, _) = c.post("/sample", &json!({ "count": 0 })).await;
    assert_eq!(status, 400);
    let (status, v) = c.post("/render", &json!({ "latent_id": "a", "latents": { "z_s": (vec![0.0; 6]), "z_t": (vec![0.0; 6]) }, "pose": { "pitch": 0.0, "yaw": 0.0 } })).await;
    assert_eq!(status, 400, "{v}");
    let (status, v) = c.post("/render", &json!({ "latents": { "z_s": (vec![0.0; 6]), "z_t": (vec![0.0; 6]) }, "pose": { "pitch": 2.0, "yaw": 0.0 } })).await;
    assert_eq!((status, v["field"].as_str()), (400, Some("pose")));
    svc.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn unknown_ids_get_404() {
    let dir = tempfile::tempdir().unwrap();
    let svc = start(&checkpoint(dir.path()), &dir.path().join("art"), 1, 2).await;
    let c = Client::new(&svc);
    assert_eq!(c.get("/jobs/deadbeef").await.0, 404);
    assert_eq!(c.delete("/jobs/deadbeef").await.0, 404);
    assert_eq!(c.get("/jobs/..%2F..%2Fetc").await.0, 404);
    assert_eq!(c.bytes("/artifacts/nothing/here.png").await.0, 404);
    assert_eq!(c.bytes("/artifacts/a%2F..%2Fb").await.0, 400);
    let (status, _) = c.post("/render", &json!({ "latent_id": "feedface", "pose": { "pitch": 0.0, "yaw": 0.0 } })).await;
    assert_eq!(status, 404);
    let body = json!({ "kind": "local-edit", "payload": { "latent_id": "feedface", "mask": mask_b64(&half_mask()), "pose": { "pitch": 0.0, "yaw": 0.0 } } });
    assert_eq!(c.post("/jobs", &body).await.0, 404);
    svc.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn inversion_job_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let svc = start(&checkpoint(dir.path()), &dir.path().join("art"), 1, 2).await;
    let c = Client::new(&svc);
    let (status, v) = c.post("/jobs", &invert_body(60)).await;
    assert_eq!(status, 202, "{v}");
    assert_eq!(v["status"], "queued");
    let id = v["id"].as_str().unwrap().to_string();
    let seen = c.follow(&id, Duration::from_secs(60)).await;
    let last = seen.last().unwrap();
    assert_eq!(last.status, JobStatus::Done, "{last:?}");
    assert_eq!((last.progress.iter, last.progress.total), (60, 60));
    assert!(seen.windows(2).all(|w| w[0].progress.iter <= w[1].progress.iter));
    let order = |s: JobStatus| s as u8;
    assert!(seen.windows(2).all(|w| order(w[0].status) <= order(w[1].status)));
    assert!(last.metrics["final_miou"].as_f64().is_some());
    let trace = last.result_paths.iter().find(|p| p.ends_with("trace.jsonl")).unwrap();
    let (status, body) = c.bytes(trace).await;
    assert_eq!(status, 200);
    assert_eq!(String::from_utf8(body).unwrap().lines().count(), 60);
    for p in &last.result_paths {
        assert_eq!(c.bytes(p).await.0, 200, "{p}");
    }

    // the inverted latents feed a local edit and a morph
    let latent = last.latent_id.clone().unwrap();
    let flipped: Vec<u8> = half_mask().iter().map(|l| 1 - l).collect();
    let edit = json!({ "kind": "local-edit", "payload": { "latent_id": latent, "mask": mask_b64(&flipped), "pose": { "pitch": 0.0, "yaw": 0.1 }, "steps": 10 } });
    let (status, v) = c.post("/jobs", &edit).await;
    assert_eq!(status, 202, "{v}");
    let done = c.follow(v["id"].as_str().unwrap(), Duration::from_secs(60)).await.pop().unwrap();
    assert_eq!((done.kind, done.status), (JobKind::LocalEdit, JobStatus::Done), "{done:?}");

    let (_, s) = c.post("/sample", &json!({ "seed": 1 })).await;
    let other = s["samples"][0]["latent_id"].as_str().unwrap();
    let morph = json!({ "kind": "morph", "payload": { "a": latent, "b": other, "n": 2, "pose": { "pitch": 0.0, "yaw": 0.0 } } });
    let (status, v) = c.post("/jobs", &morph).await;
    assert_eq!(status, 202, "{v}");
    let done = c.follow(v["id"].as_str().unwrap(), Duration::from_secs(60)).await.pop().unwrap();
    assert_eq!(done.status, JobStatus::Done, "{done:?}");
    assert_eq!(done.result_paths.len(), 16);
    svc.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn cancellation_stops_within_one_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let svc = start(&checkpoint(dir.path()), &dir.path().join("art"), 1, 2).await;
    let c = Client::new(&svc);
    let (_, v) = c.post("/jobs", &invert_body(10_000)).await;
    let id = v["id"].as_str().unwrap().to_string();
    c.wait_running(&id, 3).await;
    let (status, at_cancel) = c.delete(&format!("/jobs/{id}")).await;
    assert_eq!(status, 200);
    let at_cancel = at_cancel["progress"]["iter"].as_u64().unwrap() as usize;
    let last = c.follow(&id, Duration::from_secs(30)).await.pop().unwrap();
    assert_eq!(last.status, JobStatus::Failed);
    assert_eq!(last.error.as_deref(), Some("cancelled"));
    assert!(last.progress.iter <= at_cancel + 1, "{} after cancel at {at_cancel}", last.progress.iter);
    assert!(last.result_paths.is_empty());
    // cancelling a finished job leaves it unchanged
    let (status, again) = c.delete(&format!("/jobs/{id}")).await;
    assert_eq!((status, again["status"].as_str()), (200, Some("failed")));
    svc.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn full_queue_gets_429_and_queued_jobs_cancel() {
    let dir = tempfile::tempdir().unwrap();
    let svc = start(&checkpoint(dir.path()), &dir.path().join("art"), 1, 1).await;
    let c = Client::new(&svc);
    let (s1, a) = c.post("/jobs", &invert_body(10_000)).await;
    let (s2, b) = c.post("/jobs", &invert_body(10_000)).await;
    let (s3, full) = c.post("/jobs", &invert_body(10)).await;
    assert_eq!((s1, s2, s3), (202, 202, 429), "{full}");
    let (a, b) = (a["id"].as_str().unwrap().to_string(), b["id"].as_str().unwrap().to_string());
    c.wait_running(&a, 1).await;
    assert_eq!(c.job(&b).await.status, JobStatus::Queued);
    c.delete(&format!("/jobs/{b}")).await;
    c.delete(&format!("/jobs/{a}")).await;
    for id in [&a, &b] {
        let last = c.follow(id, Duration::from_secs(30)).await.pop().unwrap();
        assert_eq!(last.error.as_deref(), Some("cancelled"));
    }
    assert_eq!(c.job(&b).await.progress.iter, 0);
    let (status, _) = c.post("/jobs", &invert_body(5)).await;
    assert_eq!(status, 202);
    svc.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_jobs_are_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let svc = start(&checkpoint(dir.path()), &dir.path().join("art"), 2, 2).await;
    let c = Client::new(&svc);
    let (_, a) = c.post("/jobs", &invert_body(20)).await;
    let (_, b) = c.post("/jobs", &invert_body(20)).await;
    let mut traces = Vec::new();
    for v in [a, b] {
        let last = c.follow(v["id"].as_str().unwrap(), Duration::from_secs(60)).await.pop().unwrap();
        assert_eq!(last.status, JobStatus::Done);
        let t = last.result_paths.iter().find(|p| p.ends_with("trace.jsonl")).unwrap();
        traces.push(c.bytes(t).await.1);
    }
    assert_eq!(traces[0], traces[1]);
    svc.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn restarted_service_reserves_finished_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path());
    let art = dir.path().join("art");
    let svc = start(&ckpt, &art, 1, 2).await;
    let c = Client::new(&svc);
    let (_, s) = c.post("/sample", &json!({ "seed": 2 })).await;
    let latent = s["samples"][0]["latent_id"].as_str().unwrap().to_string();
    let (_, v) = c.post("/jobs", &json!({ "kind": "render", "payload": { "latent_id": latent, "pose": { "pitch": 0.0, "yaw": 0.2 } } })).await;
    let id = v["id"].as_str().unwrap().to_string();
    let before = c.follow(&id, Duration::from_secs(30)).await.pop().unwrap();
    assert_eq!(before.status, JobStatus::Done);
    let (_, rgb) = c.bytes(&before.result_paths[0]).await;
    svc.shutdown().await;

    let svc = start(&ckpt, &art, 1, 2).await;
    let c = Client::new(&svc);
    assert_eq!(c.job(&id).await, before);
    assert_eq!(c.bytes(&before.result_paths[0]).await, (200, rgb));
    let (status, _) = c.post("/render", &json!({ "latent_id": latent, "pose": { "pitch": 0.0, "yaw": 0.0 } })).await;
    assert_eq!(status, 200);
    svc.shutdown().await;
}
