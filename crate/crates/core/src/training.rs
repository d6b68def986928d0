//! Adversarial training: discriminator objectives with R1 penalties and pose regression, the
//! generator objective with the stop-gradient from D_s into the color branch, checkpoints, and a
//! supervised reconstruction mode.

use std::path::Path;
use std::time::Instant;

use diffmath::{GradMode, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{d_color, d_semantic, encode_real_mask, planar_batch, to_nchw, Discriminator};
use crate::camera::{pose_to_rays, sample_pose, CameraPose};
use crate::checkpoint::Archive;
use crate::config::{Config, LossWeights, SamplingConfig};
use crate::error::{invalid, Error, Result};
use crate::generator::{sample_latent, Generator};
use crate::metrics::{miou, psnr};
use crate::optim::Adam;
use crate::params::ParamSet;
use crate::renderer::{render, render_vars, sample_rays, RenderOptions};
use crate::scenegen::{Dataset, GtView};

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `f(t) = -ln(1 + e^{-t})`.
pub fn gan_f(t: f64) -> f64 {
    -softplus(-t)
}

/// Loss components of one discriminator update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DLoss {
    pub total: f64,
    pub real: f64,
    pub fake: f64,
    pub r1: f64,
    pub pose: f64,
}

/// Loss components of one generator update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GLoss {
    pub total: f64,
    pub adv_c: f64,
    pub adv_s: f64,
    pub pose: f64,
}

fn item(v: &Var<'_, f32>) -> Result<f64> {
    Ok(v.item()? as f64)
}

/// Mean of `softplus(sign * score)` over the batch.
fn mean_softplus<'t>(score: &Var<'t, f32>, sign: f64) -> Result<Var<'t, f32>> {
    Ok(score.scale(sign)?.softplus()?.mean()?)
}

/// Batch mean of the squared input-gradient norm of the summed scores.
fn r1_penalty<'t>(score: &Var<'t, f32>, input: &Var<'t, f32>) -> Result<Var<'t, f32>> {
    let g = input.tape().input_gradient(&score.sum()?, input)?;
    Ok(g.square()?.sum()?.scale(1.0 / input.shape()[0] as f64)?)
}

/// Batch mean of `|a - b|^2` (or `|a - b|` when not squared) over rows of `[B, 2]`.
pub fn pose_distance<'t>(a: &Var<'t, f32>, b: &Var<'t, f32>, squared: bool) -> Result<Var<'t, f32>> {
    let sq = a.sub(b)?.square()?.sum_axis(1, false)?;
    if squared {
        return Ok(sq.mean()?);
    }
    Ok(sq.add_scalar(1e-12)?.ln()?.scale(0.5)?.exp()?.mean()?)
}

fn finite(step: u64, what: &str, parts: &impl Serialize, total: f64) -> Result<()> {
    if total.is_finite() {
        return Ok(());
    }
    let detail = format!("{what} {}", serde_json::to_string(parts).unwrap_or_default());
    Err(Error::NonFinite { step, detail })
}

/// Image discriminator objective on a real batch `[B, 3, H, W]` and detached fakes. `real` must
/// be created after the discriminator's parameters so the R1 gradient stops at the input.
/// The pose term regresses D_c's pose head onto the poses the fakes were rendered from.
pub fn loss_dc<'t>(
    dc: &Discriminator<f32>,
    vars: &[Var<'t, f32>],
    real: &Var<'t, f32>,
    fake: &Var<'t, f32>,
    fake_poses: Option<&Var<'t, f32>>,
    lambda_c: f64,
    disc_pose: f64,
) -> Result<(Var<'t, f32>, DLoss)> {
    let (score_real, _) = d_color(dc, vars, real)?;
    let (score_fake, pose_fake) = d_color(dc, vars, &fake.detach())?;
    let l_real = mean_softplus(&score_real, -1.0)?;
    let l_fake = mean_softplus(&score_fake, 1.0)?;
    let mut total = l_real.add(&l_fake)?;
    let mut parts = DLoss { real: item(&l_real)?, fake: item(&l_fake)?, ..DLoss::default() };
    if lambda_c > 0.0 {
        let r1 = r1_penalty(&score_real, real)?;
        parts.r1 = item(&r1)?;
        total = total.add(&r1.scale(lambda_c)?)?;
    }
    if let (Some(poses), true) = (fake_poses, disc_pose > 0.0) {
        let p = pose_distance(&pose_fake, poses, true)?;
        parts.pose = item(&p)?;
        total = total.add(&p.scale(disc_pose)?)?;
    }
    parts.total = item(&total)?;
    Ok((total, parts))
}

/// Pair discriminator objective; inputs are channel-concatenated `[B, k + 3, H, W]` pairs with
/// one-hot real masks. The R1 gradient is taken with respect to the whole real pair.
pub fn loss_ds<'t>(
    ds: &Discriminator<f32>,
    vars: &[Var<'t, f32>],
    real_pair: &Var<'t, f32>,
    fake_pair: &Var<'t, f32>,
    lambda_s: f64,
) -> Result<(Var<'t, f32>, DLoss)> {
    let score_real = ds.forward(vars, real_pair)?;
    let score_fake = ds.forward(vars, &fake_pair.detach())?;
    let l_real = mean_softplus(&score_real, -1.0)?;
    let l_fake = mean_softplus(&score_fake, 1.0)?;
    let mut total = l_real.add(&l_fake)?;
    let mut parts = DLoss { real: item(&l_real)?, fake: item(&l_fake)?, ..DLoss::default() };
    if lambda_s > 0.0 {
        let r1 = r1_penalty(&score_real, real_pair)?;
        parts.r1 = item(&r1)?;
        total = total.add(&r1.scale(lambda_s)?)?;
    }
    parts.total = item(&total)?;
    Ok((total, parts))
}

/// Weights of the generator objective's terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GObjective {
    pub w_c: f64,
    pub w_s: f64,
    pub lambda_p: f64,
    pub pose_squared: bool,
}

impl GObjective {
    pub fn from_weights(w: &LossWeights) -> Self {
        Self { w_c: 1.0, w_s: 1.0, lambda_p: w.lambda_p, pose_squared: w.pose_squared }
    }

    /// Only the semantic adversarial term.
    pub fn semantic_only() -> Self {
        Self { w_c: 0.0, w_s: 1.0, lambda_p: 0.0, pose_squared: true }
    }
}

/// A rendered fake batch in planar layout.
pub struct FakeBatch<'t> {
    /// `[B, 3, H, W]`
    pub rgb: Option<Var<'t, f32>>,
    /// Same pixels as `rgb`, composited from detached color so only the weights carry gradient.
    pub rgb_detached: Option<Var<'t, f32>>,
    /// `[B, k, H, W]` probabilities.
    pub sem: Option<Var<'t, f32>>,
}

/// Generator objective. The D_s term sees `rgb_detached`, so its gradient reaches the generator
/// only through the semantic probabilities and the shared compositing weights.
pub fn loss_g<'t>(
    dc: (&Discriminator<f32>, &[Var<'t, f32>]),
    ds: (&Discriminator<f32>, &[Var<'t, f32>]),
    fake: &FakeBatch<'t>,
    poses: &Var<'t, f32>,
    obj: &GObjective,
) -> Result<(Var<'t, f32>, GLoss)> {
    let tape = poses.tape();
    let mut total = tape.scalar(0.0);
    let mut parts = GLoss::default();
    if let Some(rgb) = fake.rgb.as_ref().filter(|_| obj.w_c > 0.0 || obj.lambda_p > 0.0) {
        let (score, pose_hat) = d_color(dc.0, dc.1, rgb)?;
        if obj.w_c > 0.0 {
            let adv = mean_softplus(&score, -1.0)?;
            parts.adv_c = item(&adv)?;
            total = total.add(&adv.scale(obj.w_c)?)?;
        }
        if obj.lambda_p > 0.0 {
            let p = pose_distance(&pose_hat, poses, obj.pose_squared)?;
            parts.pose = item(&p)?;
            total = total.add(&p.scale(obj.lambda_p)?)?;
        }
    }
    if let (Some(sem), true) = (&fake.sem, obj.w_s > 0.0) {
        let image = match &fake.rgb_detached {
            Some(v) => *v,
            None => blank_image(tape, sem)?,
        };
        let adv = mean_softplus(&d_semantic(ds.0, ds.1, sem, &image)?, -1.0)?;
        parts.adv_s = item(&adv)?;
        total = total.add(&adv.scale(obj.w_s)?)?;
    }
    parts.total = item(&total)?;
    Ok((total, parts))
}

/// Zero image channels matching a semantic batch, used when the image branch is disabled.
fn blank_image<'t>(tape: &'t Tape<f32>, sem: &Var<'t, f32>) -> Result<Var<'t, f32>> {
    let s = sem.shape();
    Ok(tape.constant(Tensor::zeros(vec![s[0], 3, s[2], s[3]])))
}

/// One NDJSON training log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub iter: u64,
    #[serde(rename = "L_Dc")]
    pub l_dc: f64,
    #[serde(rename = "L_Ds")]
    pub l_ds: f64,
    #[serde(rename = "L_G")]
    pub l_g: f64,
    pub pose_loss: f64,
    pub wall_ms: f64,
    pub dc: DLoss,
    pub ds: DLoss,
    pub g: GLoss,
}

/// Latents, poses and ray samples for one fake batch.
struct FakeDraw {
    z_s: Tensor<f32>,
    z_t: Tensor<f32>,
    poses: Tensor<f32>,
    samples: crate::renderer::RaySamples<f32>,
}

fn draw_fakes(cfg: &Config, rng: &mut ChaCha8Rng, batch: usize, res: usize, jitter: bool) -> Result<FakeDraw> {
    let (ds_dim, dt_dim) = (cfg.generator.z_shape, cfg.generator.z_texture);
    let mut zs = Vec::with_capacity(batch * ds_dim);
    let mut zt = Vec::with_capacity(batch * dt_dim);
    let mut poses = Vec::with_capacity(batch * 2);
    let mut rays = Vec::with_capacity(batch);
    for _ in 0..batch {
        zs.extend(sample_latent::<f32, _>(rng, ds_dim).to_vec());
        zt.extend(sample_latent::<f32, _>(rng, dt_dim).to_vec());
        let pose = sample_pose(&cfg.pose, &cfg.camera, rng);
        poses.extend([pose.pitch as f32, pose.yaw as f32]);
        rays.push(pose_to_rays(&pose, res, cfg.sampling.near, cfg.sampling.far)?);
    }
    let sampling = SamplingConfig { stratified: jitter && cfg.sampling.stratified, ..cfg.sampling };
    let samples = sample_rays(&rays, &sampling, Some(rng))?;
    Ok(FakeDraw {
        z_s: Tensor::new(vec![batch, ds_dim], zs)?,
        z_t: Tensor::new(vec![batch, dt_dim], zt)?,
        poses: Tensor::new(vec![batch, 2], poses)?,
        samples,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    iteration: u64,
    d_resolution: usize,
    steps: [u64; 3],
}

/// Complete training state: generator, both discriminators, optimizers and the random stream.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: Config,
    pub gen: Generator<f32>,
    pub dc: Discriminator<f32>,
    pub ds: Discriminator<f32>,
    pub opt_g: Adam<f32>,
    pub opt_dc: Adam<f32>,
    pub opt_ds: Adam<f32>,
    pub rng: ChaCha8Rng,
    pub iteration: u64,
}

impl Trainer {
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let gen = Generator::new(&cfg.generator, &mut rng)?;
        let res = cfg.train.stage_at(0).0;
        let (dc, ds) = Self::discriminators(cfg, res, &mut rng)?;
        let t = &cfg.train;
        Ok(Self {
            opt_g: Adam::new(&gen.params, t.lr_g, t.beta1, t.beta2),
            opt_dc: Adam::new(&dc.params, t.lr_dc, t.beta1, t.beta2),
            opt_ds: Adam::new(&ds.params, t.lr_ds, t.beta1, t.beta2),
            cfg: cfg.clone(),
            gen,
            dc,
            ds,
            rng,
            iteration: 0,
        })
    }

    fn discriminators(cfg: &Config, res: usize, rng: &mut ChaCha8Rng) -> Result<(Discriminator<f32>, Discriminator<f32>)> {
        let dc = Discriminator::color(&cfg.discriminator, res, rng)?;
        let ds = Discriminator::semantic(&cfg.discriminator, res, cfg.generator.classes, rng)?;
        Ok((dc, ds))
    }

    /// Rebuilds both discriminators when the schedule moves to a new resolution.
    fn enter_stage(&mut self, res: usize) -> Result<()> {
        if self.dc.resolution == res {
            return Ok(());
        }
        let (dc, ds) = Self::discriminators(&self.cfg, res, &mut self.rng)?;
        let t = &self.cfg.train;
        self.opt_dc = Adam::new(&dc.params, t.lr_dc, t.beta1, t.beta2);
        self.opt_ds = Adam::new(&ds.params, t.lr_ds, t.beta1, t.beta2);
        self.dc = dc;
        self.ds = ds;
        Ok(())
    }

    /// Hex SHA-256 over all generator and discriminator parameters.
    pub fn hash(&self) -> String {
        let mut all = ParamSet::<f32>::default();
        for (prefix, set) in [("g", &self.gen.params), ("dc", &self.dc.params), ("ds", &self.ds.params)] {
            for (name, t) in set.iter() {
                all.push(format!("{prefix}/{name}"), t.clone());
            }
        }
        all.hash()
    }

    /// Renders fakes without gradients: planar rgb `[B, 3, H, W]` and semantics `[B, k, H, W]`.
    fn render_detached(&self, draw: &FakeDraw, res: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let tape = Tape::new();
        let vars = self.gen.params.bind(&tape, false);
        let rv = render_vars(
            &self.gen,
            &vars,
            &tape.constant(draw.z_s.clone()),
            &tape.constant(draw.z_t.clone()),
            &draw.samples,
            RenderOptions::default(),
        )?;
        let b = draw.samples.batch;
        let rgb = match &rv.rgb {
            Some(v) => to_nchw(v, res)?.value(),
            None => Tensor::zeros(vec![b, 3, res, res]),
        };
        let k = self.cfg.generator.classes;
        let sem = match &rv.sem_probs {
            Some(v) => to_nchw(v, res)?.value(),
            None => Tensor::full(vec![b, k, res, res], 1.0 / k as f32),
        };
        Ok((rgb, sem))
    }

    /// Random real batch: planar images `[B, 3, H, W]` and one-hot masks `[B, k, H, W]`.
    fn real_batch(&mut self, data: &Dataset, batch: usize, res: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
        if data.is_empty() {
            return invalid("empty dataset");
        }
        let k = self.cfg.generator.classes;
        let mut imgs = Vec::with_capacity(batch);
        let mut masks = Vec::with_capacity(batch);
        for _ in 0..batch {
            let i = self.rng.random_range(0..data.len());
            let (img, mask) = resample(&data.images[i], &data.masks[i], data.resolution, res)?;
            masks.push(encode_real_mask::<f32>(&mask, k)?.to_vec());
            imgs.push(img);
        }
        let img_refs: Vec<&[f32]> = imgs.iter().map(|v| v.as_slice()).collect();
        let mask_refs: Vec<&[f32]> = masks.iter().map(|v| v.as_slice()).collect();
        Ok((planar_batch(&img_refs, res, 3)?, planar_batch(&mask_refs, res, k)?))
    }

    fn grad_tape(lambda: f64) -> Tape<f32> {
        Tape::with_mode(if lambda > 0.0 { GradMode::BuildGradGraph } else { GradMode::FirstOrder })
    }

    fn step_dc(&mut self, data: &Dataset, batch: usize, res: usize) -> Result<DLoss> {
        let (real, _) = self.real_batch(data, batch, res)?;
        let draw = draw_fakes(&self.cfg, &mut self.rng, batch, res, true)?;
        if !self.cfg.generator.image_branch {
            return Ok(DLoss::default());
        }
        let (fake, _) = self.render_detached(&draw, res)?;
        let w = self.cfg.train.losses;
        let tape = Self::grad_tape(w.lambda_c);
        let vars = self.dc.params.bind(&tape, true);
        let real_v = tape.leaf(real);
        let poses = tape.constant(draw.poses);
        let (loss, parts) = loss_dc(&self.dc, &vars, &real_v, &tape.constant(fake), Some(&poses), w.lambda_c, w.disc_pose)?;
        finite(self.iteration, "L_Dc", &parts, parts.total)?;
        let grads = tape.backward(&loss)?;
        self.opt_dc.step_vars(&mut self.dc.params, &vars, &grads)?;
        Ok(parts)
    }

    fn step_ds(&mut self, data: &Dataset, batch: usize, res: usize) -> Result<DLoss> {
        let (real_img, real_mask) = self.real_batch(data, batch, res)?;
        let draw = draw_fakes(&self.cfg, &mut self.rng, batch, res, true)?;
        if !self.cfg.generator.semantic_branch {
            return Ok(DLoss::default());
        }
        let (fake_img, fake_sem) = self.render_detached(&draw, res)?;
        let blank = !self.cfg.generator.image_branch;
        let lambda = self.cfg.train.losses.lambda_s;
        let tape = Self::grad_tape(lambda);
        let vars = self.ds.params.bind(&tape, true);
        let real_pair = tape.leaf(pair(&real_mask, &real_img, blank)?);
        let fake_pair = tape.constant(pair(&fake_sem, &fake_img, blank)?);
        let (loss, parts) = loss_ds(&self.ds, &vars, &real_pair, &fake_pair, lambda)?;
        finite(self.iteration, "L_Ds", &parts, parts.total)?;
        let grads = tape.backward(&loss)?;
        self.opt_ds.step_vars(&mut self.ds.params, &vars, &grads)?;
        Ok(parts)
    }

    /// One generator update under `obj`, on a fresh fake batch.
    pub fn step_g(&mut self, batch: usize, res: usize, obj: &GObjective) -> Result<GLoss> {
        let draw = draw_fakes(&self.cfg, &mut self.rng, batch, res, true)?;
        let tape = Tape::new();
        let gvars = self.gen.params.bind(&tape, true);
        let dc_vars = self.dc.params.bind(&tape, false);
        let ds_vars = self.ds.params.bind(&tape, false);
        let rv = render_vars(
            &self.gen,
            &gvars,
            &tape.constant(draw.z_s.clone()),
            &tape.constant(draw.z_t.clone()),
            &draw.samples,
            RenderOptions { detached_color: true },
        )?;
        let fake = FakeBatch {
            rgb: planar(&rv.rgb, res)?,
            rgb_detached: planar(&rv.rgb_detached, res)?,
            sem: planar(&rv.sem_probs, res)?,
        };
        let poses = tape.constant(draw.poses);
        let (loss, parts) = loss_g((&self.dc, &dc_vars), (&self.ds, &ds_vars), &fake, &poses, obj)?;
        finite(self.iteration, "L_G", &parts, parts.total)?;
        let grads = tape.backward(&loss)?;
        self.opt_g.step_vars(&mut self.gen.params, &gvars, &grads)?;
        Ok(parts)
    }

    /// D_c update, D_s update, generator update, each on freshly drawn latents and poses.
    pub fn step(&mut self, data: &Dataset) -> Result<StepLog> {
        let start = Instant::now();
        let (res, batch) = self.cfg.train.stage_at(self.iteration);
        self.enter_stage(res)?;
        let dc = self.step_dc(data, batch, res)?;
        let ds = self.step_ds(data, batch, res)?;
        let obj = GObjective::from_weights(&self.cfg.train.losses);
        let g = self.step_g(batch, res, &obj)?;
        let log = StepLog {
            iter: self.iteration,
            l_dc: dc.total,
            l_ds: ds.total,
            l_g: g.total,
            pose_loss: g.pose,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            dc,
            ds,
            g,
        };
        self.iteration += 1;
        Ok(log)
    }

    /// Mean absolute error per axis (pitch, yaw) of D_c's pose head on `n` fresh generator
    /// samples rendered without jitter at poses drawn from the prior. Leaves the trainer untouched.
    pub fn pose_error(&self, n: usize, seed: u64) -> Result<[f64; 2]> {
        if n == 0 {
            return invalid("pose evaluation needs at least one sample");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let res = self.dc.resolution;
        let mut err = [0.0; 2];
        let mut left = n;
        while left > 0 {
            let b = left.min(8);
            left -= b;
            let draw = draw_fakes(&self.cfg, &mut rng, b, res, false)?;
            let (rgb, _) = self.render_detached(&draw, res)?;
            let tape = Tape::new();
            let vars = self.dc.params.bind(&tape, false);
            let (_, pose) = d_color(&self.dc, &vars, &tape.constant(rgb))?;
            for (p, q) in pose.value().data().chunks(2).zip(draw.poses.data().chunks(2)) {
                err[0] += (p[0] - q[0]).abs() as f64;
                err[1] += (p[1] - q[1]).abs() as f64;
            }
        }
        Ok(err.map(|e| e / n as f64))
    }

    /// Checkpoint archive holding parameters, optimizer moments, RNG state and the config.
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive {
            config: self.cfg.to_toml(),
            meta: serde_json::to_string(&Meta {
                iteration: self.iteration,
                d_resolution: self.dc.resolution,
                steps: [self.opt_g.step, self.opt_dc.step, self.opt_ds.step],
            })
            .expect("meta serializes"),
            rng: serde_json::to_string(&self.rng).expect("rng serializes"),
            tensors: Vec::new(),
        };
        for (prefix, set, opt) in [
            ("g", &self.gen.params, &self.opt_g),
            ("dc", &self.dc.params, &self.opt_dc),
            ("ds", &self.ds.params, &self.opt_ds),
        ] {
            a.push_set(prefix, set);
            for (i, (name, _)) in set.iter().enumerate() {
                a.push(format!("{prefix}.m/{name}"), &opt.m[i]);
                a.push(format!("{prefix}.v/{name}"), &opt.v[i]);
            }
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let cfg = Config::from_toml(&a.config)?;
        let meta: Meta = serde_json::from_str(&a.meta).map_err(|e| Error::Checkpoint(format!("meta: {e}")))?;
        let rng: ChaCha8Rng = serde_json::from_str(&a.rng).map_err(|e| Error::Checkpoint(format!("rng: {e}")))?;
        let gen = Generator::from_params(&cfg.generator, a.take_set("g")?)?;
        let mut scratch = ChaCha8Rng::seed_from_u64(0);
        let (dc_t, ds_t) = Self::discriminators(&cfg, meta.d_resolution, &mut scratch)?;
        let dc = Discriminator::from_params(&dc_t, a.take_set("dc")?)?;
        let ds = Discriminator::from_params(&ds_t, a.take_set("ds")?)?;
        let t = &cfg.train;
        let load_opt = |prefix: &str, set: &ParamSet<f32>, lr: f64, step: u64| -> Result<Adam<f32>> {
            let mut opt = Adam::new(set, lr, t.beta1, t.beta2);
            opt.step = step;
            for (i, (name, p)) in set.iter().enumerate() {
                opt.m[i] = a.get(&format!("{prefix}.m/{name}"))?;
                opt.v[i] = a.get(&format!("{prefix}.v/{name}"))?;
                if opt.m[i].shape() != p.shape() || opt.v[i].shape() != p.shape() {
                    return Err(Error::Checkpoint(format!("{prefix} moments for {name} have the wrong shape")));
                }
            }
            Ok(opt)
        };
        Ok(Self {
            opt_g: load_opt("g", &gen.params, t.lr_g, meta.steps[0])?,
            opt_dc: load_opt("dc", &dc.params, t.lr_dc, meta.steps[1])?,
            opt_ds: load_opt("ds", &ds.params, t.lr_ds, meta.steps[2])?,
            cfg,
            gen,
            dc,
            ds,
            rng,
            iteration: meta.iteration,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().write_atomic(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }
}

fn planar<'t>(v: &Option<Var<'t, f32>>, res: usize) -> Result<Option<Var<'t, f32>>> {
    v.as_ref().map(|v| to_nchw(v, res)).transpose()
}

/// Channel-concatenates planar semantics and images; `blank` zeroes the image channels.
fn pair(sem: &Tensor<f32>, img: &Tensor<f32>, blank: bool) -> Result<Tensor<f32>> {
    let (s, i) = (sem.shape(), img.shape());
    let (b, k, hw) = (s[0], s[1], s[2] * s[3]);
    let mut data = Vec::with_capacity(b * (k + 3) * hw);
    for n in 0..b {
        data.extend_from_slice(&sem.data()[n * k * hw..(n + 1) * k * hw]);
        if blank {
            data.extend(std::iter::repeat_n(0.0, 3 * hw));
        } else {
            data.extend_from_slice(&img.data()[n * 3 * hw..(n + 1) * 3 * hw]);
        }
    }
    Ok(Tensor::new(vec![b, k + i[1], s[2], s[3]], data)?)
}

/// Box-averages an image and takes block-centre labels when training below the data resolution.
fn resample(img: &[f32], mask: &[u8], from: usize, to: usize) -> Result<(Vec<f32>, Vec<u8>)> {
    if from == to {
        return Ok((img.to_vec(), mask.to_vec()));
    }
    if to > from || !from.is_multiple_of(to) {
        return invalid(format!("cannot resample data from {from} to {to}"));
    }
    let f = from / to;
    let mut out = vec![0.0; to * to * 3];
    let mut labels = vec![0; to * to];
    let norm = 1.0 / (f * f) as f32;
    for y in 0..to {
        for x in 0..to {
            for dy in 0..f {
                for dx in 0..f {
                    let src = (y * f + dy) * from + x * f + dx;
                    for c in 0..3 {
                        out[(y * to + x) * 3 + c] += img[src * 3 + c] * norm;
                    }
                }
            }
            labels[y * to + x] = mask[(y * f + f / 2) * from + x * f + f / 2];
        }
    }
    Ok((out, labels))
}

/// Loads only the configuration and generator from a checkpoint.
pub fn load_generator(path: &Path) -> Result<(Config, Generator<f32>)> {
    let a = Archive::read(path)?;
    let cfg = Config::from_toml(&a.config)?;
    let gen = Generator::from_params(&cfg.generator, a.take_set("g")?)?;
    Ok((cfg, gen))
}

/// Supervised fit of a generator to ground-truth views of one scene at fixed latents.
#[derive(Clone, Debug)]
pub struct SanityTask<'a> {
    pub views: &'a [(CameraPose, GtView)],
    pub z_s: Tensor<f32>,
    pub z_t: Tensor<f32>,
    pub sampling: SamplingConfig,
    pub steps: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SanityReport {
    pub steps: usize,
    pub initial_psnr: f64,
    pub psnr: f64,
    pub miou: f64,
    pub losses: Vec<f64>,
}

/// Mean PSNR and mIoU of deterministic renders against the ground-truth views.
pub fn evaluate_views(
    gen: &Generator<f32>,
    z_s: &Tensor<f32>,
    z_t: &Tensor<f32>,
    views: &[(CameraPose, GtView)],
    sampling: &SamplingConfig,
) -> Result<(f64, f64)> {
    let fixed = SamplingConfig { stratified: false, ..*sampling };
    let (mut p, mut m) = (0.0, 0.0);
    for (pose, gt) in views {
        let out = render(gen, z_s, z_t, pose, &fixed, gt.resolution, None::<&mut ChaCha8Rng>)?;
        p += psnr(&out.rgb, &gt.image)?;
        m += miou(&out.labels(), &gt.mask, gen.cfg.classes)?;
    }
    let n = views.len() as f64;
    Ok((p / n, m / n))
}

/// Minimises `MSE(rgb) + MSE(sem_probs, one-hot)` over the views (one view per step, cycled) with
/// Adam on all generator parameters. Fails when the smoothed loss exceeds 10x its initial value.
pub fn reconstruct_sanity<R: Rng + ?Sized>(gen: &mut Generator<f32>, task: &SanityTask<'_>, rng: &mut R) -> Result<SanityReport> {
    if task.views.is_empty() {
        return invalid("reconstruction needs at least one view");
    }
    let k = gen.cfg.classes;
    let initial_psnr = evaluate_views(gen, &task.z_s, &task.z_t, task.views, &task.sampling)?.0;
    let mut opt = Adam::new(&gen.params, task.lr, 0.9, 0.999);
    let zs = task.z_s.reshape(vec![1, task.z_s.numel()])?;
    let zt = task.z_t.reshape(vec![1, task.z_t.numel()])?;
    let targets: Vec<(Tensor<f32>, Tensor<f32>)> = task
        .views
        .iter()
        .map(|(_, gt)| {
            let n = gt.mask.len();
            Ok((Tensor::new(vec![1, n, 3], gt.image.clone())?, encode_real_mask::<f32>(&gt.mask, k)?.reshape(vec![1, n, k])?))
        })
        .collect::<Result<_>>()?;
    let mut losses = Vec::with_capacity(task.steps);
    let mut smooth: Option<(f64, f64)> = None;
    for step in 0..task.steps {
        let v = step % task.views.len();
        let (pose, gt) = &task.views[v];
        let rays = pose_to_rays(pose, gt.resolution, task.sampling.near, task.sampling.far)?;
        let samples = sample_rays(&[rays], &task.sampling, Some(&mut *rng))?;
        let tape = Tape::new();
        let vars = gen.params.bind(&tape, true);
        let rv = render_vars(gen, &vars, &tape.constant(zs.clone()), &tape.constant(zt.clone()), &samples, RenderOptions::default())?;
        let mut loss = tape.scalar(0.0);
        if let Some(rgb) = &rv.rgb {
            loss = loss.add(&rgb.sub(&tape.constant(targets[v].0.clone()))?.square()?.mean()?)?;
        }
        if let Some(sem) = &rv.sem_probs {
            loss = loss.add(&sem.sub(&tape.constant(targets[v].1.clone()))?.square()?.mean()?)?;
        }
        let l = loss.item()? as f64;
        if !l.is_finite() {
            return Err(Error::NonFinite { step: step as u64, detail: format!("reconstruction loss {l}") });
        }
        let (initial, ema) = smooth.map_or((l, l), |(i, e)| (i, 0.9 * e + 0.1 * l));
        if ema > 10.0 * initial {
            return Err(Error::Diverged { loss: ema, initial });
        }
        smooth = Some((initial, ema));
        losses.push(l);
        let grads = tape.backward(&loss)?;
        opt.step_vars(&mut gen.params, &vars, &grads)?;
    }
    let (psnr, miou) = evaluate_views(gen, &task.z_s, &task.z_t, task.views, &task.sampling)?;
    Ok(SanityReport { steps: task.steps, initial_psnr, psnr, miou, losses })
}
