//! Discretised volume rendering of color, semantics and depth from one shared set of weights.

use diffmath::{Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::camera::{pose_to_rays, CameraPose, Ray};
use crate::config::SamplingConfig;
use crate::error::{invalid, Result};
use crate::generator::Generator;

/// Sample positions for `B` images of `R` rays with `N` samples each.
#[derive(Clone, Debug)]
pub struct RaySamples<T: Scalar> {
    pub batch: usize,
    pub rays: usize,
    pub samples: usize,
    /// `[B, R*N, 3]`
    pub pts: Tensor<T>,
    /// `[B, R*N, 3]`
    pub dirs: Tensor<T>,
    /// `[B, R, N]`
    pub t: Tensor<T>,
    /// `[B, R, N]`
    pub delta: Tensor<T>,
}

/// `t_i = near + (i + u_i) * (far - near) / N` with `u_i` uniform when stratified and a random
/// source is given, zero otherwise. The last interval ends at `far`.
pub fn sample_rays<T: Scalar, R: Rng + ?Sized>(
    rays: &[Vec<Ray>],
    sampling: &SamplingConfig,
    mut rng: Option<&mut R>,
) -> Result<RaySamples<T>> {
    sampling.validate()?;
    let batch = rays.len();
    let nr = rays.first().map_or(0, |r| r.len());
    if batch == 0 || nr == 0 || rays.iter().any(|r| r.len() != nr) {
        return invalid("ray batch must be non-empty with equal ray counts per image");
    }
    let n = sampling.samples;
    let step = (sampling.far - sampling.near) / n as f64;
    let total = batch * nr * n;
    let (mut pts, mut dirs) = (Vec::with_capacity(total * 3), Vec::with_capacity(total * 3));
    let (mut ts, mut deltas) = (Vec::with_capacity(total), Vec::with_capacity(total));
    let mut tbuf = vec![0.0; n];
    for ray in rays.iter().flatten() {
        for (i, t) in tbuf.iter_mut().enumerate() {
            let u = match rng.as_deref_mut() {
                Some(r) if sampling.stratified => r.random::<f64>(),
                _ => 0.0,
            };
            *t = ray.near + (i as f64 + u) * step;
        }
        for i in 0..n {
            let t = tbuf[i];
            let next = if i + 1 < n { tbuf[i + 1] } else { ray.far };
            let p = ray.at(t);
            pts.extend(p.map(T::of));
            dirs.extend(ray.dir.map(T::of));
            ts.push(T::of(t));
            deltas.push(T::of(next - t));
        }
    }
    Ok(RaySamples {
        batch,
        rays: nr,
        samples: n,
        pts: Tensor::new(vec![batch, nr * n, 3], pts)?,
        dirs: Tensor::new(vec![batch, nr * n, 3], dirs)?,
        t: Tensor::new(vec![batch, nr, n], ts)?,
        delta: Tensor::new(vec![batch, nr, n], deltas)?,
    })
}

/// `w_i = T_i * alpha_i` with `alpha_i = 1 - exp(-sigma_i delta_i)` and exclusive transmittance
/// `T_i = prod_{j<i} (1 - alpha_j)`, along the last axis.
pub fn compositing_weights<'t, T: Scalar>(sigma: &Var<'t, T>, delta: &Var<'t, T>) -> Result<Var<'t, T>> {
    let survive = sigma.mul(delta)?.neg()?.exp()?;
    let alpha = survive.neg()?.add_scalar(1.0)?;
    Ok(survive.cumprod(true)?.mul(&alpha)?)
}

/// `sum_i w_i v_i` for weights `[.., N]` and values `[.., N, C]`.
pub fn accumulate<'t, T: Scalar>(w: &Var<'t, T>, values: &Var<'t, T>) -> Result<Var<'t, T>> {
    let mut ws = w.shape();
    let axis = ws.len() - 1;
    ws.push(1);
    Ok(w.reshape(&ws)?.mul(values)?.sum_axis(axis, false)?)
}

/// Softmax over the last axis. The max shift is a constant, which leaves gradients unchanged.
pub fn softmax<'t, T: Scalar>(logits: &Var<'t, T>) -> Result<Var<'t, T>> {
    let shifted = shift_by_max(logits)?;
    let e = shifted.exp()?;
    let axis = logits.shape().len() - 1;
    Ok(e.div(&e.sum_axis(axis, true)?)?)
}

pub fn log_softmax<'t, T: Scalar>(logits: &Var<'t, T>) -> Result<Var<'t, T>> {
    let shifted = shift_by_max(logits)?;
    let axis = logits.shape().len() - 1;
    let lse = shifted.exp()?.sum_axis(axis, true)?.ln()?;
    Ok(shifted.sub(&lse)?)
}

fn shift_by_max<'t, T: Scalar>(logits: &Var<'t, T>) -> Result<Var<'t, T>> {
    let v = logits.value();
    let shape = v.shape().to_vec();
    let k = *shape.last().unwrap_or(&1);
    let maxes: Vec<T> = v
        .data()
        .chunks(k.max(1))
        .map(|row| row.iter().copied().fold(T::neg_infinity(), T::max))
        .collect();
    let mut mshape = shape.clone();
    *mshape.last_mut().unwrap() = 1;
    let m = logits.tape().constant(Tensor::new(mshape, maxes)?);
    Ok(logits.sub(&m)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RenderOptions {
    /// Also composite color from detached pre-activations with the same weights.
    pub detached_color: bool,
}

/// Differentiable render of a batch; shapes use `B` images of `R` rays and `N` samples.
pub struct RenderVars<'t, T: Scalar> {
    /// `[B, R, N]`
    pub weights: Var<'t, T>,
    /// `[B, R, 3]`
    pub rgb: Option<Var<'t, T>>,
    /// Same as `rgb` but blind to the color branch; gradients reach only the weights.
    pub rgb_detached: Option<Var<'t, T>>,
    /// `[B, R, k]`, composited before the softmax.
    pub sem_logits: Option<Var<'t, T>>,
    pub sem_probs: Option<Var<'t, T>>,
    /// `[B, R]`, `sum_i w_i t_i`.
    pub depth: Var<'t, T>,
    /// `[B, R]`
    pub weight_sum: Var<'t, T>,
    /// Tape ids of the weight node consumed by the color, semantic and depth composites.
    pub weight_ids: [Option<usize>; 3],
}

/// Renders `B` images given latents `z_s [B, ds]` and `z_t [B, dt]`.
pub fn render_vars<'t, T: Scalar>(
    gen: &Generator<T>,
    vars: &[Var<'t, T>],
    z_s: &Var<'t, T>,
    z_t: &Var<'t, T>,
    samples: &RaySamples<T>,
    opts: RenderOptions,
) -> Result<RenderVars<'t, T>> {
    let tape = z_s.tape();
    if z_s.shape()[0] != samples.batch || z_t.shape()[0] != samples.batch {
        return invalid(format!(
            "latent batch {} / {} does not match {} ray sets",
            z_s.shape()[0],
            z_t.shape()[0],
            samples.batch
        ));
    }
    let (mods_s, mods_t) = gen.modulations(vars, z_s, z_t)?;
    let pts = tape.constant(samples.pts.clone());
    let dirs = tape.constant(samples.dirs.clone());
    let field = gen.query(vars, &pts, &dirs, &mods_s, &mods_t)?;
    let (b, r, n) = (samples.batch, samples.rays, samples.samples);
    let sigma = field.sigma.reshape(&[b, r, n])?;
    let delta = tape.constant(samples.delta.clone());
    let w = compositing_weights(&sigma, &delta)?;
    let mut ids = [None; 3];
    let (mut rgb, mut rgb_detached) = (None, None);
    if let Some(c) = &field.c_pre {
        let c = c.reshape(&[b, r, n, 3])?;
        rgb = Some(accumulate(&w, &c.sigmoid()?)?);
        if opts.detached_color {
            rgb_detached = Some(accumulate(&w, &c.detach().sigmoid()?)?);
        }
        ids[0] = Some(w.id());
    }
    let (mut sem_logits, mut sem_probs) = (None, None);
    if let Some(s) = &field.s_logits {
        let s = s.reshape(&[b, r, n, gen.cfg.classes])?;
        let logits = accumulate(&w, &s)?;
        sem_probs = Some(softmax(&logits)?);
        sem_logits = Some(logits);
        ids[1] = Some(w.id());
    }
    let t = tape.constant(samples.t.clone());
    let depth = w.mul(&t)?.sum_axis(2, false)?;
    ids[2] = Some(w.id());
    let weight_sum = w.sum_axis(2, false)?;
    Ok(RenderVars { weights: w, rgb, rgb_detached, sem_logits, sem_probs, depth, weight_sum, weight_ids: ids })
}

/// Plain per-pixel render of one image; images are row-major `H x W x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub resolution: usize,
    pub classes: usize,
    pub samples: usize,
    pub rgb: Vec<f32>,
    pub sem_probs: Vec<f32>,
    pub sem_logits: Vec<f32>,
    pub depth: Vec<f32>,
    pub weight_sum: Vec<f32>,
    /// `H x W x N`
    pub weights: Vec<f32>,
}

impl RenderOutput {
    pub fn labels(&self) -> Vec<u8> {
        semantic_argmax(&self.sem_probs, self.classes)
    }

    /// Depth normalised by the accumulated weight, i.e. the expected hit distance.
    pub fn surface_depth(&self) -> Vec<f64> {
        self.depth
            .iter()
            .zip(&self.weight_sum)
            .map(|(d, w)| if *w > 0.0 { *d as f64 / *w as f64 } else { f64::INFINITY })
            .collect()
    }
}

pub const EVAL_CHUNK: usize = 2048;

fn extend_f32<T: Scalar>(out: &mut Vec<f32>, v: Option<&Var<'_, T>>) {
    if let Some(v) = v {
        out.extend(v.value().data().iter().map(|x| x.as_f64() as f32));
    }
}

/// Renders one image for latents `z_s [ds]`, `z_t [dt]` in ray chunks without gradients.
pub fn render<T: Scalar, R: Rng + ?Sized>(
    gen: &Generator<T>,
    z_s: &Tensor<T>,
    z_t: &Tensor<T>,
    pose: &CameraPose,
    sampling: &SamplingConfig,
    resolution: usize,
    mut rng: Option<&mut R>,
) -> Result<RenderOutput> {
    let rays = pose_to_rays(pose, resolution, sampling.near, sampling.far)?;
    let k = gen.cfg.classes;
    let mut out = RenderOutput {
        resolution,
        classes: k,
        samples: sampling.samples,
        rgb: Vec::with_capacity(rays.len() * 3),
        sem_probs: Vec::with_capacity(rays.len() * k),
        sem_logits: Vec::with_capacity(rays.len() * k),
        depth: Vec::with_capacity(rays.len()),
        weight_sum: Vec::with_capacity(rays.len()),
        weights: Vec::with_capacity(rays.len() * sampling.samples),
    };
    let zs = z_s.reshape(vec![1, z_s.numel()])?;
    let zt = z_t.reshape(vec![1, z_t.numel()])?;
    for chunk in rays.chunks(EVAL_CHUNK) {
        let tape = Tape::new();
        let vars = gen.params.bind(&tape, false);
        let samples = sample_rays(&[chunk.to_vec()], sampling, rng.as_deref_mut())?;
        let rv = render_vars(gen, &vars, &tape.constant(zs.clone()), &tape.constant(zt.clone()), &samples, RenderOptions::default())?;
        match &rv.rgb {
            Some(_) => extend_f32(&mut out.rgb, rv.rgb.as_ref()),
            None => out.rgb.extend(std::iter::repeat_n(0.0, chunk.len() * 3)),
        }
        match &rv.sem_probs {
            Some(_) => {
                extend_f32(&mut out.sem_probs, rv.sem_probs.as_ref());
                extend_f32(&mut out.sem_logits, rv.sem_logits.as_ref());
            }
            None => {
                out.sem_probs.extend(std::iter::repeat_n(1.0 / k as f32, chunk.len() * k));
                out.sem_logits.extend(std::iter::repeat_n(0.0, chunk.len() * k));
            }
        }
        extend_f32(&mut out.depth, Some(&rv.depth));
        extend_f32(&mut out.weight_sum, Some(&rv.weight_sum));
        extend_f32(&mut out.weights, Some(&rv.weights));
    }
    Ok(out)
}

/// Per-pixel argmax over `k` probabilities, ties resolved to the lowest class.
pub fn semantic_argmax(probs: &[f32], k: usize) -> Vec<u8> {
    probs
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (c, p) in row.iter().enumerate() {
                if *p > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Composited outputs of a single ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RayIntegral {
    pub color: [f64; 3],
    pub sem: Vec<f64>,
    pub depth: f64,
    pub weights: Vec<f64>,
}

/// Integrates one ray from per-sample densities `sigma [N]`, pre-sigmoid colors `c [N][3]`,
/// logits `s [N][k]` at strictly increasing depths `t [N]` ending at `far`.
pub fn integrate_ray(sigma: &[f64], c: &[[f64; 3]], s: &[Vec<f64>], t: &[f64], far: f64) -> Result<RayIntegral> {
    let n = t.len();
    if n == 0 || sigma.len() != n || c.len() != n || s.len() != n {
        return invalid("sample arrays must be non-empty and equally long");
    }
    if t.windows(2).any(|w| !(w[0] < w[1])) || !(t[n - 1] <= far) {
        return invalid("sample depths must be strictly increasing and end before far");
    }
    if sigma.iter().any(|v| !(*v >= 0.0)) {
        return invalid("densities must be non-negative");
    }
    let k = s[0].len();
    if s.iter().any(|row| row.len() != k) {
        return invalid("semantic rows must share one length");
    }
    let tape = Tape::<f64>::new();
    let delta: Vec<f64> = (0..n).map(|i| if i + 1 < n { t[i + 1] - t[i] } else { far - t[i] }).collect();
    let w = compositing_weights(
        &tape.constant(Tensor::new(vec![n], sigma.to_vec())?),
        &tape.constant(Tensor::new(vec![n], delta)?),
    )?;
    let cv = tape.constant(Tensor::new(vec![n, 3], c.iter().flatten().copied().collect())?);
    let sv = tape.constant(Tensor::new(vec![n, k], s.iter().flatten().copied().collect())?);
    let color = accumulate(&w, &cv.sigmoid()?)?.value();
    let sem = softmax(&accumulate(&w, &sv)?)?.value();
    let depth = w.mul(&tape.constant(Tensor::new(vec![n], t.to_vec())?))?.sum()?.item()?;
    Ok(RayIntegral {
        color: [color.data()[0], color.data()[1], color.data()[2]],
        sem: sem.to_vec(),
        depth,
        weights: w.value().to_vec(),
    })
}
