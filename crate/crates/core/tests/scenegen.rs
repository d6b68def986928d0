use fenerf::camera::{pose_to_rays, CameraPose, Ray};
use fenerf::config::{CameraConfig, DatasetSpec};
use fenerf::scenegen::{
    raytrace_gt, sample_scene, shade, Dataset, Kind, Primitive, PrimitiveScene, SCENE_RADIUS,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn prim(kind: Kind, center: [f64; 3], size: f64, class: u8) -> Primitive {
    Primitive { kind, center, size, albedo: [0.5, 0.7, 0.9], class }
}

fn axis_ray(origin: [f64; 3], dir: [f64; 3]) -> Ray {
    Ray { origin, dir, near: 0.0, far: 10.0 }
}

#[test]
fn sphere_hit_is_analytic() {
    let s = prim(Kind::Sphere, [0.0, 0.0, 0.0], 0.1, 1);
    let (t, n) = s.intersect(&axis_ray([0.0, 0.0, 1.0], [0.0, 0.0, -1.0])).unwrap();
    assert!((t - 0.9).abs() < 1e-12);
    assert_eq!(n, [0.0, 0.0, 1.0]);
    let offset = 0.06;
    let (t, _) = s.intersect(&axis_ray([offset, 0.0, 1.0], [0.0, 0.0, -1.0])).unwrap();
    assert!((t - (1.0 - (0.01f64 - offset * offset).sqrt())).abs() < 1e-12);
    assert!(s.intersect(&axis_ray([0.2, 0.0, 1.0], [0.0, 0.0, -1.0])).is_none());
    assert!(s.intersect(&axis_ray([0.0, 0.0, 1.0], [0.0, 0.0, 1.0])).is_none());
}

#[test]
fn box_hit_reports_entry_face() {
    let b = prim(Kind::Box, [0.0, 0.0, 0.0], 0.1, 2);
    let (t, n) = b.intersect(&axis_ray([0.0, 0.0, 1.0], [0.0, 0.0, -1.0])).unwrap();
    assert!((t - 0.9).abs() < 1e-12);
    assert_eq!(n, [0.0, 0.0, 1.0]);
    let (t, n) = b.intersect(&axis_ray([-1.0, 0.05, 0.05], [1.0, 0.0, 0.0])).unwrap();
    assert!((t - 0.9).abs() < 1e-12);
    assert_eq!(n, [-1.0, 0.0, 0.0]);
    assert!(b.intersect(&axis_ray([0.0, 0.2, 1.0], [0.0, 0.0, -1.0])).is_none());
}

#[test]
fn nearer_primitive_wins() {
    let scene = PrimitiveScene {
        primitives: vec![prim(Kind::Sphere, [0.0, 0.0, -0.05], 0.05, 1), prim(Kind::Sphere, [0.0, 0.0, 0.05], 0.02, 3)],
    };
    let gt = raytrace_gt(&scene, &CameraPose::frontal(), 9).unwrap();
    let centre = 4 * 9 + 4;
    assert_eq!(gt.mask[centre], 3);
    assert!((gt.depth[centre] - 0.93).abs() < 1e-3);
    assert_eq!(gt.mask[0], 0);
    assert_eq!(&gt.image[..3], &[0.0, 0.0, 0.0]);
    assert!(gt.depth[0].is_infinite());
}

#[test]
fn shading_is_lambert_with_ambient() {
    let p = prim(Kind::Sphere, [0.0; 3], 0.1, 1);
    let l = fenerf::camera::normalize(fenerf::scenegen::LIGHT_DIR);
    let c = shade(&p, l);
    for (ci, a) in c.iter().zip(p.albedo) {
        assert!((ci - a).abs() < 1e-12);
    }
    let away = shade(&p, l.map(|v| -v));
    for (ci, a) in away.iter().zip(p.albedo) {
        assert!((ci - a * fenerf::scenegen::AMBIENT).abs() < 1e-12);
    }
}

#[test]
fn sampled_scenes_stay_in_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..500 {
        let scene = sample_scene(&mut rng, 4);
        assert!((1..=3).contains(&scene.primitives.len()));
        let mut classes: Vec<u8> = scene.primitives.iter().map(|p| p.class).collect();
        classes.sort();
        classes.dedup();
        assert_eq!(classes.len(), scene.primitives.len());
        for p in &scene.primitives {
            assert!((1..4).contains(&p.class));
            assert!(p.bounding_radius() <= SCENE_RADIUS);
        }
    }
    assert!(sample_scene(&mut rng, 1).primitives.is_empty());
}

#[test]
fn every_visible_pixel_is_inside_the_scene_ball() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pose = CameraPose::new(0.1, -0.3);
    let rays = pose_to_rays(&pose, 16, 0.0, 1.0).unwrap();
    for _ in 0..20 {
        let gt = raytrace_gt(&sample_scene(&mut rng, 4), &pose, 16).unwrap();
        for (ray, d) in rays.iter().zip(&gt.depth) {
            if d.is_finite() {
                assert!(fenerf::camera::norm(ray.at(*d)) <= SCENE_RADIUS + 1e-9);
            }
        }
    }
}

#[test]
fn dataset_is_seeded_and_round_trips() {
    let spec = DatasetSpec { n_scenes: 6, resolution: 32, classes: 4, seed: 3, ..DatasetSpec::default() };
    let cam = CameraConfig::default();
    let a = Dataset::generate(&spec, &cam).unwrap();
    assert_eq!(a, Dataset::generate(&spec, &cam).unwrap());
    let other = Dataset::generate(&DatasetSpec { seed: 4, ..spec }, &cam).unwrap();
    assert_ne!(a.masks, other.masks);
    assert!(a.masks.iter().flatten().all(|l| *l < 4));

    let dir = tempfile::tempdir().unwrap();
    let manifest = a.save(dir.path()).unwrap();
    assert_eq!(manifest.entries.len(), 6);
    assert!(dir.path().join("manifest.json").exists());
    let b = Dataset::load(dir.path(), &cam).unwrap();
    assert_eq!(a.masks, b.masks);
    assert_eq!(a.poses, b.poses);
    for (x, y) in a.images.iter().flatten().zip(b.images.iter().flatten()) {
        assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
    }
    let again = tempfile::tempdir().unwrap();
    b.save(again.path()).unwrap();
    assert_eq!(b, Dataset::load(again.path(), &cam).unwrap());
}

#[test]
fn dataset_spec_is_validated() {
    let cam = CameraConfig::default();
    assert!(Dataset::generate(&DatasetSpec { resolution: 48, ..DatasetSpec::default() }, &cam).is_err());
    assert!(Dataset::generate(&DatasetSpec { classes: 1, ..DatasetSpec::default() }, &cam).is_err());
}
