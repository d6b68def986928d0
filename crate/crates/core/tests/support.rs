use std::path::Path;

use diffmath::Tensor;
use fenerf::checkpoint::Archive;
use fenerf::config::{Config, ScheduleStage};
use fenerf::imageio;
use fenerf::optim::Adam;
use fenerf::params::ParamSet;
use proptest::prelude::*;

fn one_param(v: &[f64]) -> ParamSet<f64> {
    let mut p = ParamSet::default();
    p.push("w", Tensor::new(vec![v.len()], v.to_vec()).unwrap());
    p
}

#[test]
fn adam_matches_the_textbook_update() {
    let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
    let mut p = one_param(&[1.0, -2.0]);
    let mut opt = Adam::new(&p, lr, b1, b2);
    let grads = [[0.5, -1.0], [0.25, 3.0], [-1.0, 0.0]];
    let (mut x, mut m, mut v) = ([1.0f64, -2.0], [0.0f64; 2], [0.0f64; 2]);
    for (t, g) in grads.iter().enumerate() {
        let t = t as i32 + 1;
        for j in 0..2 {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mh = m[j] / (1.0 - b1.powi(t));
            let vh = v[j] / (1.0 - b2.powi(t));
            x[j] -= lr * mh / (vh.sqrt() + eps);
        }
        let gt = Tensor::new(vec![2], g.to_vec()).unwrap();
        opt.update(&mut p, &[Some(&gt)]).unwrap();
        for j in 0..2 {
            assert!((p.get(0).data()[j] - x[j]).abs() < 1e-12, "step {t}");
        }
    }
}

#[test]
fn adam_without_momentum_ignores_missing_gradients() {
    let mut p = one_param(&[1.0]);
    let mut opt = Adam::new(&p, 0.1, 0.0, 0.9);
    let g = Tensor::new(vec![1], vec![2.0]).unwrap();
    opt.update(&mut p, &[Some(&g)]).unwrap();
    let after = p.get(0).data()[0];
    opt.update(&mut p, &[None]).unwrap();
    assert_eq!(p.get(0).data()[0], after);
    assert!((opt.v[0].data()[0] - 0.9 * 0.1 * 4.0).abs() < 1e-12);
}

#[test]
fn param_hash_tracks_names_shapes_and_values() {
    let a = one_param(&[1.0, 2.0]);
    let mut renamed = ParamSet::default();
    renamed.push("v", a.get(0).clone());
    let mut reshaped = ParamSet::default();
    reshaped.push("w", a.get(0).reshape(vec![1, 2]).unwrap());
    let b = one_param(&[1.0, 2.000001]);
    let hashes = [a.hash(), renamed.hash(), reshaped.hash(), b.hash()];
    for i in 0..4 {
        for j in i + 1..4 {
            assert_ne!(hashes[i], hashes[j]);
        }
    }
    assert_eq!(a.hash(), one_param(&[1.0, 2.0]).hash());
    assert!(a.clone().set(0, Tensor::zeros(vec![3])).is_err());
}

#[test]
fn config_survives_toml() {
    let mut cfg = Config::default();
    cfg.train.schedule.push(ScheduleStage { iteration: 10, resolution: 64, batch: 2 });
    cfg.train.lr_g = 1.5e-4;
    cfg.inversion.optimize_pose = true;
    assert_eq!(Config::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert_eq!(cfg.train.stage_at(9), (cfg.train.resolution, cfg.train.batch));
    assert_eq!(cfg.train.stage_at(10), (64, 2));
}

#[test]
fn config_rejects_inconsistent_files() {
    assert!(Config::from_toml("[dataset]\nclasses = 5\n").is_err());
    assert!(Config::from_toml("[dataset]\nresolution = 48\n").is_err());
    assert!(Config::from_toml("[train]\nbatch = 0\n").is_err());
    assert!(Config::from_toml("[train]\nresolution = 12\n").is_err());
    assert!(Config::from_toml("[nonsense\n").is_err());
    assert!(Config::from_toml("[train]\nbatchsize = 4\n").is_err());
    assert!(Config::from_toml("[sampler]\nsamples = 4\n").is_err());
    assert!(Config::from_toml("").is_ok());
}

#[test]
fn archive_round_trips_and_detects_tampering() {
    let mut a = Archive { config: "x = 1".into(), meta: "{}".into(), rng: "seed".into(), tensors: Vec::new() };
    a.push("f", &Tensor::<f32>::new(vec![2, 2], vec![1.0, -0.5, 3.25, 0.0]).unwrap());
    a.push_set("g", &one_param(&[0.1, 0.2, 0.3]));
    let bytes = a.to_bytes();
    let back = Archive::from_bytes(&bytes).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.take_set::<f64>("g").unwrap(), one_param(&[0.1, 0.2, 0.3]));
    assert!(back.get::<f64>("f").is_err());
    assert!(back.get::<f32>("missing").is_err());
    for i in [0, 4, bytes.len() / 2, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[i] ^= 0x40;
        assert!(Archive::from_bytes(&bad).is_err(), "flip at {i}");
    }
    assert!(Archive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    a.write_atomic(&path).unwrap();
    assert_eq!(Archive::read(&path).unwrap(), a);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn png_round_trips() {
    let labels: Vec<u8> = (0..16).map(|i| (i % 4) as u8).collect();
    let png = imageio::encode_labels(4, &labels).unwrap();
    assert_eq!(imageio::decode_labels(&png, Path::new("m")).unwrap(), (4, labels.clone()));
    let rgb: Vec<f32> = (0..48).map(|i| i as f32 / 47.0).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sub/x.png");
    imageio::write_rgb(&path, 4, &rgb).unwrap();
    let (res, back) = imageio::read_rgb(&path).unwrap();
    assert_eq!(res, 4);
    assert!(back.iter().zip(&rgb).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-6));
    let color = imageio::encode_rgb(4, &rgb).unwrap();
    assert!(imageio::decode_labels(&color, Path::new("c")).is_err());
    assert!(imageio::decode(b"not a png", Path::new("n")).is_err());
}

proptest! {
    #[test]
    fn to_u8_is_monotone_and_clamped(a in -1.0f32..2.0, b in -1.0f32..2.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(imageio::to_u8(lo) <= imageio::to_u8(hi));
        prop_assert_eq!(imageio::to_u8(a.min(0.0)), 0);
        prop_assert_eq!(imageio::to_u8(a.max(1.0)), 255);
    }
}
