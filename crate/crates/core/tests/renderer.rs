use diffmath::{Tape, Tensor};
use fenerf::camera::{pose_to_rays, CameraPose};
use fenerf::config::{GeneratorConfig, SamplingConfig};
use fenerf::generator::{sample_latent, Generator};
use fenerf::renderer::{integrate_ray, render, render_vars, sample_rays, semantic_argmax, RenderOptions};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_cfg() -> GeneratorConfig {
    GeneratorConfig {
        z_shape: 8,
        z_texture: 8,
        mapping_hidden: 16,
        trunk_depth: 2,
        trunk_width: 16,
        color_width: 16,
        grid_size: 4,
        grid_features: 4,
        ..GeneratorConfig::default()
    }
}

fn uniform_ts(n: usize, near: f64, far: f64) -> Vec<f64> {
    (0..n).map(|i| near + i as f64 * (far - near) / n as f64).collect()
}

#[test]
fn constant_density_transmittance() {
    let n = 256;
    let t = uniform_ts(n, 0.0, 2.0);
    let r = integrate_ray(&vec![1.0; n], &vec![[0.0; 3]; n], &vec![vec![0.0]; n], &t, 2.0).unwrap();
    let transmitted = 1.0 - r.weights.iter().sum::<f64>();
    assert!((transmitted - (-2f64).exp()).abs() < 1e-3, "{transmitted}");
    assert!((transmitted - 0.135335).abs() < 1e-3);
}

#[test]
fn opaque_sample_takes_all_weight() {
    let t = uniform_ts(4, 1.0, 2.0);
    let sigma = [0.0, 1e9, 0.0, 5.0];
    let c = [[-9.0; 3], [0.0, 100.0, -100.0], [9.0; 3], [9.0; 3]];
    let s = vec![vec![0.0, 0.0], vec![3.0, 1.0], vec![0.0, 9.0], vec![0.0, 9.0]];
    let r = integrate_ray(&sigma, &c, &s, &t, 2.0).unwrap();
    assert_eq!(r.weights, vec![0.0, 1.0, 0.0, 0.0]);
    assert_eq!(&r.color[..2], &[0.5, 1.0]);
    assert!(r.color[2] < 1e-40);
    assert!((r.depth - 1.25).abs() < 1e-15);
    let e = (2.0f64).exp();
    assert!((r.sem[0] - e / (e + 1.0)).abs() < 1e-12);
}

#[test]
fn integrate_ray_validates_inputs() {
    let ok = uniform_ts(2, 0.0, 1.0);
    let c = [[0.0; 3]; 2];
    let s = vec![vec![0.0]; 2];
    assert!(integrate_ray(&[1.0, -1.0], &c, &s, &ok, 1.0).is_err());
    assert!(integrate_ray(&[1.0, 1.0], &c, &s, &[0.5, 0.5], 1.0).is_err());
    assert!(integrate_ray(&[1.0, 1.0], &c, &s, &ok, 0.4).is_err());
    assert!(integrate_ray(&[], &[], &[], &[], 1.0).is_err());
}

#[test]
fn uniform_samples_tile_the_ray() {
    let rays = pose_to_rays(&CameraPose::frontal(), 2, 0.8, 1.2).unwrap();
    let sampling = SamplingConfig { samples: 8, stratified: false, near: 0.8, far: 1.2 };
    let s = sample_rays::<f64, ChaCha8Rng>(std::slice::from_ref(&rays), &sampling, None).unwrap();
    assert_eq!((s.batch, s.rays, s.samples), (1, 4, 8));
    for r in 0..4 {
        let d = &s.delta.data()[r * 8..(r + 1) * 8];
        assert!((d.iter().sum::<f64>() - 0.4).abs() < 1e-12);
        assert!((s.t.data()[r * 8] - 0.8).abs() < 1e-15);
    }
    let strat = SamplingConfig { stratified: true, ..sampling };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let j = sample_rays::<f64, _>(&[rays], &strat, Some(&mut rng)).unwrap();
    for r in 0..4 {
        let t = &j.t.data()[r * 8..(r + 1) * 8];
        assert!(t.windows(2).all(|w| w[0] < w[1]));
        let d = &j.delta.data()[r * 8..(r + 1) * 8];
        assert!((t[0] + d.iter().sum::<f64>() - 1.2).abs() < 1e-12);
    }
}

fn latents(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> (Tensor<f64>, Tensor<f64>) {
    (sample_latent(rng, cfg.z_shape), sample_latent(rng, cfg.z_texture))
}

#[test]
fn one_weight_tensor_feeds_every_output() {
    let cfg = small_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let gen = Generator::<f64>::new(&cfg, &mut rng).unwrap();
    let (zs, zt) = latents(&mut rng, &cfg);
    let rays = pose_to_rays(&CameraPose::new(0.1, 0.2), 4, 0.8, 1.2).unwrap();
    let sampling = SamplingConfig { samples: 6, ..SamplingConfig::default() };
    let samples = sample_rays(&[rays], &sampling, Some(&mut rng)).unwrap();
    let tape = Tape::new();
    let vars = gen.params.bind(&tape, false);
    let zs = tape.constant(zs.reshape(vec![1, 8]).unwrap());
    let zt = tape.constant(zt.reshape(vec![1, 8]).unwrap());
    let rv = render_vars(&gen, &vars, &zs, &zt, &samples, RenderOptions { detached_color: true }).unwrap();
    let id = rv.weights.id();
    assert_eq!(rv.weight_ids, [Some(id); 3]);
    assert_eq!(rv.rgb.unwrap().value(), rv.rgb_detached.unwrap().value());
    let probs = rv.sem_probs.unwrap().value();
    for row in probs.data().chunks(cfg.classes) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn texture_code_leaves_geometry_and_semantics_untouched() {
    let cfg = small_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gen = Generator::<f32>::new(&cfg, &mut rng).unwrap();
    let zs = sample_latent::<f32, _>(&mut rng, cfg.z_shape);
    let sampling = SamplingConfig { samples: 8, stratified: false, ..SamplingConfig::default() };
    let pose = CameraPose::new(-0.1, 0.3);
    let base = render(&gen, &zs, &sample_latent(&mut rng, 8), &pose, &sampling, 8, None::<&mut ChaCha8Rng>).unwrap();
    let other = render(&gen, &zs, &sample_latent(&mut rng, 8), &pose, &sampling, 8, None::<&mut ChaCha8Rng>).unwrap();
    assert_eq!(base.weights, other.weights);
    assert_eq!(base.depth, other.depth);
    assert_eq!(base.sem_probs, other.sem_probs);
    assert_eq!(base.labels(), other.labels());
    assert_ne!(base.rgb, other.rgb);
}

#[test]
fn chunked_render_matches_one_batch() {
    let cfg = small_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gen = Generator::<f64>::new(&cfg, &mut rng).unwrap();
    let (zs, zt) = latents(&mut rng, &cfg);
    let sampling = SamplingConfig { samples: 4, stratified: false, ..SamplingConfig::default() };
    let pose = CameraPose::frontal();
    let res = 48;
    let out = render(&gen, &zs, &zt, &pose, &sampling, res, None::<&mut ChaCha8Rng>).unwrap();
    assert!(res * res > fenerf::renderer::EVAL_CHUNK);
    let rays = pose_to_rays(&pose, res, sampling.near, sampling.far).unwrap();
    let samples = sample_rays::<f64, ChaCha8Rng>(&[rays], &sampling, None).unwrap();
    let tape = Tape::new();
    let vars = gen.params.bind(&tape, false);
    let rv = render_vars(
        &gen,
        &vars,
        &tape.constant(zs.reshape(vec![1, 8]).unwrap()),
        &tape.constant(zt.reshape(vec![1, 8]).unwrap()),
        &samples,
        RenderOptions::default(),
    )
    .unwrap();
    let whole: Vec<f32> = rv.depth.value().data().iter().map(|v| *v as f32).collect();
    assert_eq!(out.depth, whole);
}

#[test]
fn disabled_branches_render_placeholders() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sampling = SamplingConfig { samples: 4, stratified: false, ..SamplingConfig::default() };
    let no_image = GeneratorConfig { image_branch: false, ..small_cfg() };
    let gen = Generator::<f32>::new(&no_image, &mut rng).unwrap();
    assert!(gen.layout.rgb.is_none() && gen.layout.map_texture.is_empty());
    let out = render(&gen, &sample_latent(&mut rng, 8), &sample_latent(&mut rng, 8), &CameraPose::frontal(), &sampling, 4, None::<&mut ChaCha8Rng>).unwrap();
    assert!(out.rgb.iter().all(|v| *v == 0.0));

    let no_sem = GeneratorConfig { semantic_branch: false, ..small_cfg() };
    let gen = Generator::<f32>::new(&no_sem, &mut rng).unwrap();
    assert!(gen.layout.sem.is_none());
    let out = render(&gen, &sample_latent(&mut rng, 8), &sample_latent(&mut rng, 8), &CameraPose::frontal(), &sampling, 4, None::<&mut ChaCha8Rng>).unwrap();
    assert!(out.sem_probs.iter().all(|v| *v == 0.25));
    assert!(out.labels().iter().all(|l| *l == 0));
}

#[test]
fn argmax_breaks_ties_low() {
    assert_eq!(semantic_argmax(&[0.5, 0.5, 0.1, 0.2, 0.7, 0.1], 3), vec![0, 1]);
}

proptest! {
    #[test]
    fn weights_are_a_sub_partition_of_unity(
        sigma in prop::collection::vec(0.0f64..50.0, 1..24),
        gap in 0.001f64..0.1,
    ) {
        let n = sigma.len();
        let t: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 * gap).collect();
        let far = t[n - 1] + gap;
        let r = integrate_ray(&sigma, &vec![[0.0; 3]; n], &vec![vec![0.0, 1.0]; n], &t, far).unwrap();
        let total: f64 = r.weights.iter().sum();
        prop_assert!(r.weights.iter().all(|w| *w >= 0.0));
        prop_assert!(total <= 1.0 + 1e-12);
        let optical: f64 = sigma.iter().map(|s| s * gap).sum();
        prop_assert!((1.0 - total - (-optical).exp()).abs() < 1e-9);
        prop_assert!(r.depth >= t[0] * total - 1e-12 && r.depth <= t[n - 1] * total + 1e-12);
    }
}
