//! Cameras on an origin-centred sphere, looking at the origin.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{CameraConfig, PoseDist};
use crate::error::{invalid, Result};

pub type Vec3 = [f64; 3];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add_scaled(a: Vec3, b: Vec3, s: f64) -> Vec3 {
    [a[0] + b[0] * s, a[1] + b[1] * s, a[2] + b[2] * s]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub pitch: f64,
    pub yaw: f64,
    pub radius: f64,
    pub fov_deg: f64,
}

impl CameraPose {
    pub fn new(pitch: f64, yaw: f64) -> Self {
        Self::with_camera(pitch, yaw, &CameraConfig::default())
    }

    pub fn with_camera(pitch: f64, yaw: f64, cam: &CameraConfig) -> Self {
        Self { pitch, yaw, radius: cam.radius, fov_deg: cam.fov_deg }
    }

    pub fn frontal() -> Self {
        Self::new(0.0, 0.0)
    }

    pub fn position(&self) -> Vec3 {
        let (sp, cp) = self.pitch.sin_cos();
        let (sy, cy) = self.yaw.sin_cos();
        [self.radius * cp * sy, self.radius * sp, self.radius * cp * cy]
    }

    /// (right, up, forward) camera axes with world up (0, 1, 0).
    pub fn basis(&self) -> Result<(Vec3, Vec3, Vec3)> {
        if self.pitch.cos().abs() < 1e-9 {
            return invalid(format!("pitch {} is parallel to the up vector", self.pitch));
        }
        if !(self.radius > 0.0) || !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return invalid(format!("bad camera radius {} / fov {}", self.radius, self.fov_deg));
        }
        let forward = normalize(sub([0.0; 3], self.position()));
        let right = normalize(cross(forward, [0.0, 1.0, 0.0]));
        let up = cross(right, forward);
        Ok((right, up, forward))
    }

    fn half_extent(&self) -> f64 {
        (self.fov_deg.to_radians() * 0.5).tan()
    }

    /// Projects a world point to continuous pixel coordinates (x right, y down, pixel centres at
    /// k + 0.5) and its distance from the camera. `None` for points behind the camera.
    pub fn project(&self, p: Vec3, resolution: usize) -> Result<Option<(f64, f64, f64)>> {
        let (right, up, forward) = self.basis()?;
        let rel = sub(p, self.position());
        let z = dot(rel, forward);
        if z <= 1e-12 {
            return Ok(None);
        }
        let h = self.half_extent();
        let nx = dot(rel, right) / z / h;
        let ny = dot(rel, up) / z / h;
        let res = resolution as f64;
        Ok(Some(((nx + 1.0) * 0.5 * res, (1.0 - ny) * 0.5 * res, norm(rel))))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        add_scaled(self.origin, self.dir, t)
    }
}

/// Pinhole rays through pixel centres in row-major order, row 0 at the top.
pub fn pose_to_rays(pose: &CameraPose, resolution: usize, near: f64, far: f64) -> Result<Vec<Ray>> {
    if resolution == 0 {
        return invalid("resolution must be >= 1");
    }
    if !(near < far) {
        return invalid(format!("near {near} must be below far {far}"));
    }
    let (right, up, forward) = pose.basis()?;
    let origin = pose.position();
    let h = pose.half_extent();
    let res = resolution as f64;
    let mut rays = Vec::with_capacity(resolution * resolution);
    for i in 0..resolution {
        let ny = (1.0 - 2.0 * (i as f64 + 0.5) / res) * h;
        for j in 0..resolution {
            let nx = (2.0 * (j as f64 + 0.5) / res - 1.0) * h;
            let d = add_scaled(add_scaled(forward, right, nx), up, ny);
            rays.push(Ray { origin, dir: normalize(d), near, far });
        }
    }
    Ok(rays)
}

pub fn sample_pose<R: Rng + ?Sized>(dist: &PoseDist, cam: &CameraConfig, rng: &mut R) -> CameraPose {
    let draw = |rng: &mut R, sigma: f64, max: f64| {
        if sigma <= 0.0 {
            return 0.0;
        }
        let v: f64 = Normal::new(0.0, sigma).expect("positive sigma").sample(rng);
        v.clamp(-max, max)
    };
    let pitch = draw(rng, dist.sigma_pitch, dist.max_pitch);
    let yaw = draw(rng, dist.sigma_yaw, dist.max_yaw);
    CameraPose::with_camera(pitch, yaw, cam)
}
