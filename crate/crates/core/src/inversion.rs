//! Latent inversion against semantic and image targets, mask-guided local editing, texture swaps
//! and morphing grids.

use diffmath::{Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::encode_real_mask;
use crate::camera::{pose_to_rays, CameraPose};
use crate::config::{Config, SamplingConfig};
use crate::error::{invalid, Error, Result};
use crate::generator::{interpolate_latents, Generator};
use crate::metrics::{miou, psnr};
use crate::optim::Adam;
use crate::params::ParamSet;
use crate::renderer::{log_softmax, render, render_vars, sample_rays, semantic_argmax, RenderOptions, RenderOutput};

/// Central-difference step for the optional pose refinement, in radians.
const POSE_FD_STEP: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InversionSettings {
    pub steps: usize,
    pub lr: f64,
    pub w_sem: f64,
    pub w_rgb: f64,
    /// Weight of `|z_s - z_s0|^2` in local edits.
    pub proximity: f64,
    pub optimize_pose: bool,
    pub sampling: SamplingConfig,
    pub resolution: usize,
}

impl InversionSettings {
    pub fn from_config(cfg: &Config) -> Self {
        let i = &cfg.inversion;
        Self {
            steps: i.steps,
            lr: i.lr,
            w_sem: i.w_sem,
            w_rgb: i.w_rgb,
            proximity: i.proximity,
            optimize_pose: i.optimize_pose,
            sampling: SamplingConfig { stratified: false, ..cfg.sampling },
            resolution: cfg.train.resolution,
        }
    }
}

/// Label map to match, optionally with an aligned `H x W x 3` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub mask: Vec<u8>,
    pub image: Option<Vec<f32>>,
}

/// State before the update of iteration `iter`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub loss: f64,
    pub miou: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionTrace {
    pub records: Vec<TraceRecord>,
    /// Scores of a fresh render at the final latents.
    pub final_miou: f64,
    pub final_psnr: Option<f64>,
}

impl InversionTrace {
    pub fn to_ndjson(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inverted {
    pub z_s: Tensor<f32>,
    pub z_t: Tensor<f32>,
    pub pose: CameraPose,
    pub trace: InversionTrace,
}

/// Which latents receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Free {
    shape: bool,
    texture: bool,
}

struct Problem<'a> {
    gen: &'a Generator<f32>,
    target: &'a Target,
    onehot: Tensor<f32>,
    image: Option<Tensor<f32>>,
    settings: &'a InversionSettings,
    anchor: Option<Tensor<f32>>,
}

struct Evaluated<'t> {
    loss: Var<'t, f32>,
    labels: Vec<u8>,
    rgb: Option<Vec<f32>>,
}

impl<'a> Problem<'a> {
    fn new(gen: &'a Generator<f32>, target: &'a Target, settings: &'a InversionSettings, anchor: Option<Tensor<f32>>) -> Result<Self> {
        let res = settings.resolution;
        let k = gen.cfg.classes;
        if target.mask.len() != res * res {
            return invalid(format!("target mask has {} pixels, expected {}", target.mask.len(), res * res));
        }
        if settings.w_sem <= 0.0 && settings.w_rgb <= 0.0 {
            return invalid("at least one objective weight must be positive");
        }
        if settings.w_sem > 0.0 && gen.layout.sem.is_none() {
            return invalid("semantic objective needs the semantic branch");
        }
        let onehot = encode_real_mask::<f32>(&target.mask, k)?.reshape(vec![1, res * res, k])?;
        let image = match &target.image {
            Some(img) if img.len() == res * res * 3 => Some(Tensor::new(vec![1, res * res, 3], img.clone())?),
            Some(img) => return invalid(format!("target image has {} values, expected {}", img.len(), res * res * 3)),
            None => None,
        };
        Ok(Self { gen, target, onehot, image, settings, anchor })
    }

    fn evaluate<'t>(&self, tape: &'t Tape<f32>, vars: &[Var<'t, f32>], zs: &Var<'t, f32>, zt: &Var<'t, f32>, pose: &CameraPose) -> Result<Evaluated<'t>> {
        let s = self.settings;
        let rays = pose_to_rays(pose, s.resolution, s.sampling.near, s.sampling.far)?;
        let samples = sample_rays(&[rays], &s.sampling, None::<&mut ChaCha8Rng>)?;
        let rv = render_vars(self.gen, vars, zs, zt, &samples, RenderOptions::default())?;
        let k = self.gen.cfg.classes;
        let mut loss = tape.scalar(0.0);
        let labels = match (&rv.sem_logits, &rv.sem_probs) {
            (Some(logits), Some(probs)) => {
                if s.w_sem > 0.0 {
                    let ce = log_softmax(logits)?.mul(&tape.constant(self.onehot.clone()))?.sum()?;
                    loss = loss.add(&ce.scale(-s.w_sem / self.target.mask.len() as f64)?)?;
                }
                semantic_argmax(probs.value().data(), k)
            }
            _ => vec![0; self.target.mask.len()],
        };
        let rgb = rv.rgb.as_ref().map(|v| v.value().to_vec());
        if let (Some(img), Some(rgb), true) = (&self.image, &rv.rgb, s.w_rgb > 0.0) {
            let mse = rgb.sub(&tape.constant(img.clone()))?.square()?.mean()?;
            loss = loss.add(&mse.scale(s.w_rgb)?)?;
        }
        if let (Some(anchor), true) = (&self.anchor, s.proximity > 0.0) {
            let d = zs.sub(&tape.constant(anchor.clone()))?.square()?.sum()?;
            loss = loss.add(&d.scale(s.proximity)?)?;
        }
        Ok(Evaluated { loss, labels, rgb })
    }

    fn loss_only(&self, zs: &Tensor<f32>, zt: &Tensor<f32>, pose: &CameraPose) -> Result<f64> {
        let tape = Tape::new();
        let vars = self.gen.params.bind(&tape, false);
        let e = self.evaluate(&tape, &vars, &tape.constant(zs.clone()), &tape.constant(zt.clone()), pose)?;
        Ok(e.loss.item()? as f64)
    }

    fn scores(&self, labels: &[u8], rgb: Option<&[f32]>) -> Result<(f64, Option<f64>)> {
        let m = miou(labels, &self.target.mask, self.gen.cfg.classes)?;
        let p = match (rgb, &self.target.image) {
            (Some(r), Some(t)) => Some(psnr(r, t)?),
            _ => None,
        };
        Ok((m, p))
    }
}

fn as_row(z: &Tensor<f32>) -> Result<Tensor<f32>> {
    Ok(z.reshape(vec![1, z.numel()])?)
}

/// Adam on the free latents; `on_iter` sees each pre-update record and may abort the run.
fn optimise(
    problem: &Problem<'_>,
    init: (&Tensor<f32>, &Tensor<f32>),
    pose: &CameraPose,
    free: Free,
    on_iter: &mut dyn FnMut(&TraceRecord) -> Result<()>,
) -> Result<Inverted> {
    let s = problem.settings;
    let gen = problem.gen;
    if init.0.numel() != gen.cfg.z_shape || init.1.numel() != gen.cfg.z_texture {
        return invalid("initial latents do not match the generator's latent sizes");
    }
    let mut latents = ParamSet::default();
    let is = latents.push("z_s", as_row(init.0)?);
    let it = latents.push("z_t", as_row(init.1)?);
    let mut opt = Adam::new(&latents, s.lr, 0.9, 0.999);
    let mut pose = *pose;
    let mut pose_set = ParamSet::<f64>::default();
    pose_set.push("pose", Tensor::from_f64(vec![2], &[pose.pitch, pose.yaw])?);
    let mut pose_opt = Adam::new(&pose_set, s.lr, 0.9, 0.999);
    let mut records = Vec::with_capacity(s.steps);
    for iter in 0..s.steps {
        let tape = Tape::new();
        let vars = gen.params.bind(&tape, false);
        let bind = |t: &Tensor<f32>, free: bool| if free { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        let zs = bind(latents.get(is), free.shape);
        let zt = bind(latents.get(it), free.texture);
        let e = problem.evaluate(&tape, &vars, &zs, &zt, &pose)?;
        let loss = e.loss.item()? as f64;
        let (m, p) = problem.scores(&e.labels, e.rgb.as_deref())?;
        let rec = TraceRecord { iter, loss, miou: m, psnr: p };
        if !loss.is_finite() {
            records.push(rec);
            let trace = InversionTrace { records, final_miou: f64::NAN, final_psnr: None };
            return Err(Error::NonFinite { step: iter as u64, detail: trace.to_ndjson() });
        }
        on_iter(&rec)?;
        records.push(rec);
        let grads = tape.backward(&e.loss)?;
        let g = [free.shape.then(|| grads.get(&zs)).flatten(), free.texture.then(|| grads.get(&zt)).flatten()];
        opt.update(&mut latents, &g)?;
        if s.optimize_pose {
            let (zs0, zt0) = (zs.value(), zt.value());
            let mut fd = [0.0; 2];
            for (axis, slot) in fd.iter_mut().enumerate() {
                let shifted = |h: f64| {
                    let mut q = pose;
                    if axis == 0 { q.pitch += h } else { q.yaw += h }
                    q
                };
                let up = problem.loss_only(&zs0, &zt0, &shifted(POSE_FD_STEP))?;
                let down = problem.loss_only(&zs0, &zt0, &shifted(-POSE_FD_STEP))?;
                *slot = (up - down) / (2.0 * POSE_FD_STEP);
            }
            let gt = Tensor::from_f64(vec![2], &fd)?;
            pose_opt.update(&mut pose_set, &[Some(&gt)])?;
            let pv = pose_set.get(0).data();
            pose.pitch = pv[0];
            pose.yaw = pv[1];
        }
    }
    let z_s = latents.get(is).reshape(init.0.shape().to_vec())?;
    let z_t = latents.get(it).reshape(init.1.shape().to_vec())?;
    let out = render(gen, &z_s, &z_t, &pose, &s.sampling, s.resolution, None::<&mut ChaCha8Rng>)?;
    let (final_miou, final_psnr) = problem.scores(&out.labels(), Some(&out.rgb))?;
    Ok(Inverted { z_s, z_t, pose, trace: InversionTrace { records, final_miou, final_psnr } })
}

/// Fits `z_s` to a label map at a known pose, holding `z_t` fixed. Per-pixel cross-entropy.
pub fn invert_semantic(
    gen: &Generator<f32>,
    mask: &[u8],
    pose: &CameraPose,
    settings: &InversionSettings,
    init_s: &Tensor<f32>,
    z_t: &Tensor<f32>,
    on_iter: &mut dyn FnMut(&TraceRecord) -> Result<()>,
) -> Result<Inverted> {
    let target = Target { mask: mask.to_vec(), image: None };
    let s = InversionSettings { w_rgb: 0.0, ..*settings };
    let problem = Problem::new(gen, &target, &s, None)?;
    optimise(&problem, (init_s, z_t), pose, Free { shape: true, texture: false }, on_iter)
}

/// Fits both latents to an aligned (image, label map) pair: `w_rgb MSE + w_sem CE`.
pub fn invert_full(
    gen: &Generator<f32>,
    target: &Target,
    pose: &CameraPose,
    settings: &InversionSettings,
    init: (&Tensor<f32>, &Tensor<f32>),
    on_iter: &mut dyn FnMut(&TraceRecord) -> Result<()>,
) -> Result<Inverted> {
    let problem = Problem::new(gen, target, settings, None)?;
    optimise(&problem, init, pose, Free { shape: true, texture: true }, on_iter)
}

/// Re-fits `z_s` to an edited label map starting from the current latents, with `z_t` frozen and
/// a proximity pull towards the starting `z_s`.
pub fn local_edit(
    gen: &Generator<f32>,
    latents: (&Tensor<f32>, &Tensor<f32>),
    edited: &[u8],
    pose: &CameraPose,
    settings: &InversionSettings,
    on_iter: &mut dyn FnMut(&TraceRecord) -> Result<()>,
) -> Result<Inverted> {
    let target = Target { mask: edited.to_vec(), image: None };
    let s = InversionSettings { w_rgb: 0.0, ..*settings };
    let problem = Problem::new(gen, &target, &s, Some(as_row(latents.0)?))?;
    optimise(&problem, latents, pose, Free { shape: true, texture: false }, on_iter)
}

/// Renders the source shape under the target texture at each pose.
pub fn style_transfer(
    gen: &Generator<f32>,
    z_s_source: &Tensor<f32>,
    z_t_target: &Tensor<f32>,
    poses: &[CameraPose],
    sampling: &SamplingConfig,
    resolution: usize,
) -> Result<Vec<RenderOutput>> {
    let fixed = SamplingConfig { stratified: false, ..*sampling };
    poses
        .iter()
        .map(|p| render(gen, z_s_source, z_t_target, p, &fixed, resolution, None::<&mut ChaCha8Rng>))
        .collect()
}

/// `n x n` renders; cell `(i, j)` uses shape `lerp(a.0, b.0, i/(n-1))` and texture
/// `lerp(a.1, b.1, j/(n-1))`. Rows are returned in order of `i`.
pub fn morph_grid(
    gen: &Generator<f32>,
    a: (&Tensor<f32>, &Tensor<f32>),
    b: (&Tensor<f32>, &Tensor<f32>),
    n: usize,
    pose: &CameraPose,
    sampling: &SamplingConfig,
    resolution: usize,
) -> Result<Vec<Vec<RenderOutput>>> {
    if n < 2 {
        return invalid(format!("morph grid needs n >= 2, got {n}"));
    }
    let fixed = SamplingConfig { stratified: false, ..*sampling };
    let t = |i: usize| i as f64 / (n - 1) as f64;
    let mut grid = Vec::with_capacity(n);
    for i in 0..n {
        let zs = interpolate_latents(a.0, b.0, t(i))?;
        let mut row = Vec::with_capacity(n);
        for j in 0..n {
            let zt = interpolate_latents(a.1, b.1, t(j))?;
            row.push(render(gen, &zs, &zt, pose, &fixed, resolution, None::<&mut ChaCha8Rng>)?);
        }
        grid.push(row);
    }
    Ok(grid)
}
