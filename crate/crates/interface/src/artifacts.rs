//! On-disk artifacts shared by the CLI and the service: latent files and render image sets.

use std::path::Path;

use anyhow::{bail, Context, Result};
use diffmath::Tensor;
use fenerf::generator::{sample_latent, Generator};
use fenerf::imageio;
use fenerf::renderer::RenderOutput;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// A (z_s, z_t) pair as plain vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Latents {
    pub z_s: Vec<f32>,
    pub z_t: Vec<f32>,
}

impl Latents {
    pub fn sample<R: Rng + ?Sized>(gen: &Generator<f32>, rng: &mut R) -> Self {
        Self {
            z_s: sample_latent::<f32, _>(rng, gen.cfg.z_shape).to_vec(),
            z_t: sample_latent::<f32, _>(rng, gen.cfg.z_texture).to_vec(),
        }
    }

    pub fn from_tensors(z_s: &Tensor<f32>, z_t: &Tensor<f32>) -> Self {
        Self { z_s: z_s.to_vec(), z_t: z_t.to_vec() }
    }

    /// Checks the dimensions against the generator and returns rank-1 tensors.
    pub fn tensors(&self, gen: &Generator<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let (ds, dt) = (gen.cfg.z_shape, gen.cfg.z_texture);
        if self.z_s.len() != ds || self.z_t.len() != dt {
            bail!("latents have dims ({}, {}), model expects ({ds}, {dt})", self.z_s.len(), self.z_t.len());
        }
        if self.z_s.iter().chain(&self.z_t).any(|v| !v.is_finite()) {
            bail!("latents must be finite");
        }
        Ok((Tensor::new(vec![ds], self.z_s.clone())?, Tensor::new(vec![dt], self.z_t.clone())?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, serde_json::to_string(self)?.as_bytes())
    }
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// File names of one written render, relative to its directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderFiles {
    pub rgb: String,
    pub mask: String,
    pub preview: String,
    pub depth: String,
}

/// Writes `{prefix}rgb.png`, `{prefix}mask.png` (raw labels), `{prefix}preview.png` (palette)
/// and `{prefix}depth.png` (expected hit distance, background at `far`).
pub fn write_render(dir: &Path, prefix: &str, out: &RenderOutput, near: f64, far: f64) -> Result<RenderFiles> {
    let files = RenderFiles {
        rgb: format!("{prefix}rgb.png"),
        mask: format!("{prefix}mask.png"),
        preview: format!("{prefix}preview.png"),
        depth: format!("{prefix}depth.png"),
    };
    let res = out.resolution;
    let labels = out.labels();
    let depth: Vec<f32> = out.surface_depth().into_iter().map(|d| d.min(far) as f32).collect();
    imageio::write_rgb(&dir.join(&files.rgb), res, &out.rgb)?;
    imageio::write_labels(&dir.join(&files.mask), res, &labels)?;
    imageio::write_label_preview(&dir.join(&files.preview), res, &labels)?;
    imageio::write_depth(&dir.join(&files.depth), res, &depth, near, far)?;
    Ok(files)
}

/// Checks a label map against the model's class count and resolution.
pub fn check_mask(mask: &[u8], res: usize, classes: usize) -> Result<()> {
    if mask.len() != res * res {
        bail!("mask has {} pixels, model renders {res}x{res}", mask.len());
    }
    if let Some(l) = mask.iter().find(|l| **l as usize >= classes) {
        bail!("mask label {l} is out of range for {classes} classes");
    }
    Ok(())
}
