//! Evaluation protocols over a trained generator: inversion convergence on held-out codes and
//! multi-view reprojection consistency.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::camera::{sample_pose, CameraPose};
use crate::config::Config;
use crate::error::{invalid, Result};
use crate::generator::{sample_latent, Generator};
use crate::inversion::{invert_semantic, InversionSettings};
use crate::metrics::{reproject, rendered_view};
use crate::renderer::render;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InversionCurve {
    pub codes: usize,
    /// Mean mIoU of the state before update `i`; the last entry scores the final latents.
    pub mean_miou: Vec<f64>,
}

impl InversionCurve {
    /// Mean mIoU after `iter` updates.
    pub fn at(&self, iter: usize) -> f64 {
        self.mean_miou[iter.min(self.mean_miou.len() - 1)]
    }
}

/// Renders label maps from `n` held-out (z_s, z_t, pose) draws and inverts each from a fresh
/// random `z_s` with the true `z_t` and pose.
pub fn inversion_curve(gen: &Generator<f32>, cfg: &Config, n: usize, steps: usize, seed: u64) -> Result<InversionCurve> {
    if n == 0 {
        return invalid("inversion evaluation needs at least one code");
    }
    let settings = InversionSettings { steps, ..InversionSettings::from_config(cfg) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sums = vec![0.0; steps + 1];
    for _ in 0..n {
        let zs = sample_latent::<f32, _>(&mut rng, gen.cfg.z_shape);
        let zt = sample_latent::<f32, _>(&mut rng, gen.cfg.z_texture);
        let pose = sample_pose(&cfg.pose, &cfg.camera, &mut rng);
        let out = render(gen, &zs, &zt, &pose, &settings.sampling, settings.resolution, None::<&mut ChaCha8Rng>)?;
        let init = sample_latent::<f32, _>(&mut rng, gen.cfg.z_shape);
        let inv = invert_semantic(gen, &out.labels(), &pose, &settings, &init, &zt, &mut |_| Ok(()))?;
        for (s, r) in sums.iter_mut().zip(&inv.trace.records) {
            *s += r.miou;
        }
        sums[steps] += inv.trace.final_miou;
    }
    Ok(InversionCurve { codes: n, mean_miou: sums.into_iter().map(|s| s / n as f64).collect() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Consistency {
    /// Mean reprojection error from a prior pose to the pose rotated by the yaw offset.
    pub error: f64,
    /// Largest error of a view reprojected into itself.
    pub self_error: f64,
}

/// Reprojection consistency averaged over `n` sampled codes at the training resolution.
pub fn view_consistency(gen: &Generator<f32>, cfg: &Config, n: usize, yaw_offset: f64, seed: u64) -> Result<Consistency> {
    if n == 0 {
        return invalid("consistency evaluation needs at least one code");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let res = cfg.train.resolution;
    let (mut error, mut self_error) = (0.0, 0.0f64);
    for _ in 0..n {
        let zs = sample_latent::<f32, _>(&mut rng, gen.cfg.z_shape);
        let zt = sample_latent::<f32, _>(&mut rng, gen.cfg.z_texture);
        let a = sample_pose(&cfg.pose, &cfg.camera, &mut rng);
        let b = CameraPose { yaw: a.yaw + yaw_offset, ..a };
        let va = rendered_view(gen, &zs, &zt, &a, &cfg.sampling, res)?;
        let vb = rendered_view(gen, &zs, &zt, &b, &cfg.sampling, res)?;
        error += reproject(&va, &vb)?.error;
        self_error = self_error.max(reproject(&va, &va)?.error);
    }
    Ok(Consistency { error: error / n as f64, self_error })
}
