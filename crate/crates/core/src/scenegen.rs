//! Procedural scenes of spheres and boxes, ray traced into image/mask pairs.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{self, dot, normalize, pose_to_rays, sample_pose, CameraPose, Ray, Vec3};
use crate::config::{CameraConfig, DatasetSpec};
use crate::error::{io_err, Error, Result};
use crate::imageio;

/// Every primitive lies inside this ball around the origin.
pub const SCENE_RADIUS: f64 = 0.12;
pub const CENTER_RADIUS: f64 = 0.035;
pub const SIZE_RANGE: (f64, f64) = (0.02, 0.045);
pub const LIGHT_DIR: Vec3 = [0.3, 0.5, 0.8];
pub const AMBIENT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kind {
    Sphere,
    Box,
}

/// `size` is the radius of a sphere or the half-extent of an axis-aligned cube.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: Kind,
    pub center: Vec3,
    pub size: f64,
    pub albedo: [f64; 3],
    pub class: u8,
}

impl Primitive {
    pub fn bounding_radius(&self) -> f64 {
        let extent = match self.kind {
            Kind::Sphere => self.size,
            Kind::Box => self.size * 3f64.sqrt(),
        };
        camera::norm(self.center) + extent
    }

    /// Nearest positive hit distance and outward normal.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, Vec3)> {
        match self.kind {
            Kind::Sphere => {
                let oc = camera::sub(ray.origin, self.center);
                let b = dot(oc, ray.dir);
                let c = dot(oc, oc) - self.size * self.size;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t = if -b - s > 0.0 { -b - s } else { -b + s };
                (t > 0.0).then(|| {
                    let p = ray.at(t);
                    (t, normalize(camera::sub(p, self.center)))
                })
            }
            Kind::Box => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0;
                for a in 0..3 {
                    let lo = self.center[a] - self.size;
                    let hi = self.center[a] + self.size;
                    if ray.dir[a].abs() < 1e-15 {
                        if ray.origin[a] < lo || ray.origin[a] > hi {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / ray.dir[a];
                    let (mut ta, mut tb) = ((lo - ray.origin[a]) * inv, (hi - ray.origin[a]) * inv);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    if ta > t0 {
                        t0 = ta;
                        axis = a;
                    }
                    t1 = t1.min(tb);
                }
                if t0 > t1 || t0 <= 0.0 {
                    return None;
                }
                let mut n = [0.0; 3];
                n[axis] = -ray.dir[axis].signum();
                Some((t0, n))
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveScene {
    pub primitives: Vec<Primitive>,
}

fn uniform_in_ball<R: Rng + ?Sized>(rng: &mut R, radius: f64) -> Vec3 {
    loop {
        let p: Vec3 = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        if dot(p, p) <= 1.0 {
            return p.map(|v| v * radius);
        }
    }
}

/// Centres uniform in a ball of `CENTER_RADIUS`, sizes uniform in `SIZE_RANGE`, albedo uniform
/// in [0.2, 1]^3, kinds equally likely, 1..=min(3, classes-1) primitives with distinct classes.
pub fn sample_scene<R: Rng + ?Sized>(rng: &mut R, classes: usize) -> PrimitiveScene {
    let max_prims = 3.min(classes.saturating_sub(1));
    if max_prims == 0 {
        return PrimitiveScene::default();
    }
    let count = rng.random_range(1..=max_prims);
    let mut ids: Vec<u8> = (1..classes as u8).collect();
    ids.shuffle(rng);
    let primitives = ids[..count]
        .iter()
        .map(|&class| Primitive {
            kind: if rng.random_bool(0.5) { Kind::Sphere } else { Kind::Box },
            center: uniform_in_ball(rng, CENTER_RADIUS),
            size: rng.random_range(SIZE_RANGE.0..SIZE_RANGE.1),
            albedo: std::array::from_fn(|_| rng.random_range(0.2..1.0)),
            class,
        })
        .collect();
    PrimitiveScene { primitives }
}

/// Ray-traced view. `depth` is the hit distance, infinite where nothing was hit.
#[derive(Clone, Debug, PartialEq)]
pub struct GtView {
    pub resolution: usize,
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
    pub depth: Vec<f64>,
}

pub fn shade(p: &Primitive, normal: Vec3) -> [f64; 3] {
    let lambert = dot(normal, normalize(LIGHT_DIR)).max(0.0);
    p.albedo.map(|a| a * (AMBIENT + (1.0 - AMBIENT) * lambert))
}

pub fn raytrace_gt(scene: &PrimitiveScene, pose: &CameraPose, resolution: usize) -> Result<GtView> {
    let rays = pose_to_rays(pose, resolution, 1e-6, f64::MAX)?;
    let n = rays.len();
    let mut view = GtView { resolution, image: vec![0.0; n * 3], mask: vec![0; n], depth: vec![f64::INFINITY; n] };
    for (i, ray) in rays.iter().enumerate() {
        let hit = scene
            .primitives
            .iter()
            .filter_map(|p| p.intersect(ray).map(|(t, nrm)| (t, nrm, p)))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((t, nrm, p)) = hit {
            for (dst, c) in view.image[i * 3..i * 3 + 3].iter_mut().zip(shade(p, nrm)) {
                *dst = c as f32;
            }
            view.mask[i] = p.class;
            view.depth[i] = t;
        }
    }
    Ok(view)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
    pub pose: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub resolution: usize,
    pub classes: usize,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST: &str = "manifest.json";

/// In-memory corpus of (image, mask, pose) triples; images are H x W x 3 in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub resolution: usize,
    pub classes: usize,
    pub images: Vec<Vec<f32>>,
    pub masks: Vec<Vec<u8>>,
    pub poses: Vec<CameraPose>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// One scene per record, each seen from a single pose drawn from the pose prior.
    pub fn generate(spec: &DatasetSpec, cam: &CameraConfig) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let dist = spec.pose_dist();
        let mut ds = Dataset {
            resolution: spec.resolution,
            classes: spec.classes,
            images: Vec::with_capacity(spec.n_scenes),
            masks: Vec::with_capacity(spec.n_scenes),
            poses: Vec::with_capacity(spec.n_scenes),
        };
        for _ in 0..spec.n_scenes {
            let scene = sample_scene(&mut rng, spec.classes);
            let pose = sample_pose(&dist, cam, &mut rng);
            let view = raytrace_gt(&scene, &pose, spec.resolution)?;
            ds.images.push(view.image);
            ds.masks.push(view.mask);
            ds.poses.push(pose);
        }
        Ok(ds)
    }

    /// Images are quantised to 8 bits exactly as `load` would see them.
    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut entries = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let image = format!("images/{i:05}.png");
            let mask = format!("masks/{i:05}.png");
            imageio::write_rgb(&dir.join(&image), self.resolution, &self.images[i])?;
            imageio::write_labels(&dir.join(&mask), self.resolution, &self.masks[i])?;
            entries.push(ManifestEntry { image, mask, pose: [self.poses[i].pitch, self.poses[i].yaw] });
        }
        let manifest = Manifest { resolution: self.resolution, classes: self.classes, entries };
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(io_err(path))?;
        Ok(manifest)
    }

    pub fn load(dir: &Path, cam: &CameraConfig) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut ds = Dataset {
            resolution: manifest.resolution,
            classes: manifest.classes,
            images: Vec::new(),
            masks: Vec::new(),
            poses: Vec::new(),
        };
        for e in &manifest.entries {
            let (r, img) = imageio::read_rgb(&dir.join(&e.image))?;
            let (rm, mask) = imageio::read_labels(&dir.join(&e.mask))?;
            if r != ds.resolution || rm != ds.resolution {
                return Err(Error::Image { path: dir.join(&e.image), msg: "resolution differs from manifest".into() });
            }
            if let Some(bad) = mask.iter().find(|l| **l as usize >= ds.classes) {
                return Err(Error::Image { path: dir.join(&e.mask), msg: format!("label {bad} >= {}", ds.classes) });
            }
            ds.images.push(img);
            ds.masks.push(mask);
            ds.poses.push(CameraPose::with_camera(e.pose[0], e.pose[1], cam));
        }
        Ok(ds)
    }
}

/// Renders the corpus for `spec` and writes it under `out`.
pub fn generate_dataset(spec: &DatasetSpec, cam: &CameraConfig, out: &Path) -> Result<Manifest> {
    Dataset::generate(spec, cam)?.save(out)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST)
}
