//! Conditional radiance field: mapping networks, FiLM-modulated sine trunk, density / semantic
//! heads and a texture-modulated color branch fed by a learnable feature grid.

use diffmath::{Scalar, Tensor, Var};
use rand::Rng;

use crate::config::{GeneratorConfig, Injection};
use crate::error::{invalid, Error, Result};
use crate::params::ParamSet;

pub const MAPPING_SLOPE: f64 = 0.2;
/// Scale of the density head's initial weights relative to a unit-variance init.
const DENSITY_HEAD_SCALE: f64 = 0.1;
const GRID_INIT: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Shape,
    Texture,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub map_shape: Vec<Linear>,
    pub map_texture: Vec<Linear>,
    pub trunk: Vec<Linear>,
    pub sigma: Linear,
    pub sem: Option<Linear>,
    pub color: Vec<Linear>,
    pub rgb: Option<Linear>,
    pub grid: usize,
}

impl Layout {
    /// Indices of parameters that only influence color: color branch, texture mapping, and the
    /// grid when it is injected into the color branch.
    pub fn color_only(&self, cfg: &GeneratorConfig) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for l in self.map_texture.iter().chain(&self.color).chain(&self.rgb) {
            out.extend([l.w, l.b]);
        }
        if cfg.injection == Injection::ColorBranch && cfg.image_branch {
            out.push(self.grid);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T: Scalar> {
    pub cfg: GeneratorConfig,
    pub params: ParamSet<T>,
    pub layout: Layout,
}

fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 })).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

struct Builder<'a, T: Scalar, R: Rng + ?Sized> {
    params: ParamSet<T>,
    rng: &'a mut R,
}

impl<T: Scalar, R: Rng + ?Sized> Builder<'_, T, R> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, w_bound: f64, b_bound: f64) -> Linear {
        let w = uniform(self.rng, &[fan_in, fan_out], w_bound);
        let b = uniform(self.rng, &[fan_out], b_bound);
        Linear { w: self.params.push(format!("{name}.w"), w), b: self.params.push(format!("{name}.b"), b) }
    }

    fn mapping(&mut self, name: &str, z: usize, hidden: usize, widths: &[usize], omega0: f64) -> Vec<Linear> {
        let kaiming = |m: usize| (6.0 / m as f64).sqrt();
        let l0 = self.linear(&format!("{name}.0"), z, hidden, kaiming(z), 0.0);
        let l1 = self.linear(&format!("{name}.1"), hidden, hidden, kaiming(hidden), 0.0);
        let total: usize = widths.iter().sum();
        let l2 = self.linear(&format!("{name}.2"), hidden, 2 * total, kaiming(hidden), 0.0);
        // output layout: all frequencies first, then all phases; frequencies are centred on omega0
        let mut b = self.params.get(l2.b).to_vec();
        for v in &mut b[..total] {
            *v = T::of(omega0);
        }
        self.params.set(l2.b, Tensor::new(vec![2 * total], b).unwrap()).unwrap();
        vec![l0, l1, l2]
    }
}

impl<T: Scalar> Generator<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder { params: ParamSet::default(), rng };
        let w = cfg.trunk_width;
        let trunk_widths = vec![w; cfg.trunk_depth];
        let color_widths = if cfg.image_branch { vec![cfg.color_width; 2] } else { Vec::new() };
        let map_shape = b.mapping("map_shape", cfg.z_shape, cfg.mapping_hidden, &trunk_widths, cfg.omega0);
        let map_texture = if cfg.image_branch {
            b.mapping("map_texture", cfg.z_texture, cfg.mapping_hidden, &color_widths, cfg.omega0)
        } else {
            Vec::new()
        };
        let siren = |m: usize| (6.0 / m as f64).sqrt() / cfg.omega0;
        let bias = |m: usize| 1.0 / (m as f64).sqrt();
        let in0 = 3 + if cfg.injection == Injection::Trunk { cfg.grid_features } else { 0 };
        let mut trunk = vec![b.linear("trunk.0", in0, w, 1.0 / in0 as f64, bias(in0))];
        for i in 1..cfg.trunk_depth {
            trunk.push(b.linear(&format!("trunk.{i}"), w, w, siren(w), bias(w)));
        }
        let unit = |m: usize| (6.0 / m as f64).sqrt();
        let sigma = b.linear("sigma", w, 1, unit(w) * DENSITY_HEAD_SCALE, 0.0);
        let raw0 = inverse_softplus(cfg.density_init) / cfg.density_gain;
        b.params.set(sigma.b, Tensor::from_f64(vec![1], &[raw0]).unwrap()).unwrap();
        let sem = cfg.semantic_branch.then(|| b.linear("sem", w, cfg.classes, unit(w), 0.0));
        let (mut color, mut rgb) = (Vec::new(), None);
        if cfg.image_branch {
            let cin = w + 3 + if cfg.injection == Injection::ColorBranch { cfg.grid_features } else { 0 };
            let cw = cfg.color_width;
            color.push(b.linear("color.0", cin, cw, siren(cin), bias(cin)));
            color.push(b.linear("color.1", cw, cw, siren(cw), bias(cw)));
            rgb = Some(b.linear("rgb", cw, 3, unit(cw), 0.0));
        }
        let g = cfg.grid_size;
        let grid_t = uniform(b.rng, &[g, g, g, cfg.grid_features], GRID_INIT);
        let grid = b.params.push("grid", grid_t);
        let layout = Layout { map_shape, map_texture, trunk, sigma, sem, color, rgb, grid };
        Ok(Self { cfg: cfg.clone(), params: b.params, layout })
    }

    /// Rebuilds a generator around stored tensors, checking names and shapes.
    pub fn from_params(cfg: &GeneratorConfig, params: ParamSet<T>) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let template = Self::new(cfg, &mut rng)?;
        if template.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "generator expects {} tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (i, (name, t)) in template.params.iter().enumerate() {
            if params.name(i) != name || params.get(i).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "generator tensor {i}: expected {name} {:?}, found {} {:?}",
                    t.shape(),
                    params.name(i),
                    params.get(i).shape()
                )));
            }
        }
        Ok(Self { cfg: cfg.clone(), params, layout: template.layout })
    }

    pub fn cast<U: Scalar>(&self) -> Generator<U> {
        Generator { cfg: self.cfg.clone(), params: self.params.cast(), layout: self.layout.clone() }
    }

    pub fn latent_dim(&self, which: Which) -> usize {
        match which {
            Which::Shape => self.cfg.z_shape,
            Which::Texture => self.cfg.z_texture,
        }
    }

    fn modulated_widths(&self, which: Which) -> Vec<usize> {
        match which {
            Which::Shape => vec![self.cfg.trunk_width; self.cfg.trunk_depth],
            Which::Texture if self.cfg.image_branch => vec![self.cfg.color_width; 2],
            Which::Texture => Vec::new(),
        }
    }

    /// Maps latents `z [B, d]` to per-layer (gamma, beta), each shaped `[B, 1, width]`.
    pub fn map_latent<'t>(&self, vars: &[Var<'t, T>], z: &Var<'t, T>, which: Which) -> Result<Modulation<'t, T>> {
        let net = match which {
            Which::Shape => &self.layout.map_shape,
            Which::Texture => &self.layout.map_texture,
        };
        let zs = z.shape();
        if zs.len() != 2 || zs[1] != self.latent_dim(which) {
            return invalid(format!("{which:?} latent must be [B, {}], got {zs:?}", self.latent_dim(which)));
        }
        let widths = self.modulated_widths(which);
        if net.is_empty() {
            return Ok(Modulation { layers: Vec::new() });
        }
        let bsz = zs[0];
        let mut h = *z;
        for (i, l) in net.iter().enumerate() {
            h = h.matmul(&vars[l.w])?.add(&vars[l.b])?;
            if i + 1 < net.len() {
                h = h.leaky_relu(MAPPING_SLOPE)?;
            }
        }
        let total: usize = widths.iter().sum();
        let mut layers = Vec::with_capacity(widths.len());
        let mut off = 0;
        for n in widths {
            let gamma = h.slice(1, off, n)?.reshape(&[bsz, 1, n])?;
            let beta = h.slice(1, total + off, n)?.reshape(&[bsz, 1, n])?;
            layers.push((gamma, beta));
            off += n;
        }
        Ok(Modulation { layers })
    }

    /// Evaluates the field at world points `pts [B, P, 3]` seen along unit directions `dirs [B, P, 3]`.
    pub fn query<'t>(
        &self,
        vars: &[Var<'t, T>],
        pts: &Var<'t, T>,
        dirs: &Var<'t, T>,
        mods_s: &Modulation<'t, T>,
        mods_t: &Modulation<'t, T>,
    ) -> Result<FieldSample<'t, T>> {
        let ps = pts.shape();
        if ps.len() != 3 || ps[2] != 3 || dirs.shape() != ps {
            return invalid(format!("points {ps:?} and directions {:?} must both be [B, P, 3]", dirs.shape()));
        }
        if !pts.value().all_finite() || !dirs.value().all_finite() {
            return invalid("non-finite query input");
        }
        let (bsz, p) = (ps[0], ps[1]);
        let rows = bsz * p;
        let x = pts.reshape(&[rows, 3])?.scale(1.0 / self.cfg.box_half)?;
        let needs_grid = self.cfg.injection == Injection::Trunk
            || (self.cfg.injection == Injection::ColorBranch && self.cfg.image_branch);
        let e = if needs_grid {
            Some(vars[self.layout.grid].grid_sample_3d(&x, self.cfg.interp.into())?)
        } else {
            None
        };
        let mut h = match (&e, self.cfg.injection) {
            (Some(e), Injection::Trunk) => x.tape().concat(&[x, *e], 1)?,
            _ => x,
        };
        for (l, (g, b)) in self.layout.trunk.iter().zip(&mods_s.layers) {
            h = film_siren_layer(&h, &vars[l.w], &vars[l.b], g, b)?;
        }
        let raw = h.matmul(&vars[self.layout.sigma.w])?.add(&vars[self.layout.sigma.b])?;
        let sigma = raw.scale(self.cfg.density_gain)?.softplus()?.reshape(&[bsz, p])?;
        let s_logits = match self.layout.sem {
            Some(l) => Some(h.matmul(&vars[l.w])?.add(&vars[l.b])?.reshape(&[bsz, p, self.cfg.classes])?),
            None => None,
        };
        let c_pre = match self.layout.rgb {
            Some(rgb) => {
                let d = dirs.reshape(&[rows, 3])?;
                let mut parts = vec![h, d];
                if let (Some(e), Injection::ColorBranch) = (&e, self.cfg.injection) {
                    parts.push(*e);
                }
                let mut c = h.tape().concat(&parts, 1)?;
                for (l, (g, b)) in self.layout.color.iter().zip(&mods_t.layers) {
                    c = film_siren_layer(&c, &vars[l.w], &vars[l.b], g, b)?;
                }
                Some(c.matmul(&vars[rgb.w])?.add(&vars[rgb.b])?.reshape(&[bsz, p, 3])?)
            }
            None => None,
        };
        Ok(FieldSample { sigma, c_pre, s_logits })
    }

    /// Maps both latents `[B, d]`.
    pub fn modulations<'t>(
        &self,
        vars: &[Var<'t, T>],
        z_s: &Var<'t, T>,
        z_t: &Var<'t, T>,
    ) -> Result<(Modulation<'t, T>, Modulation<'t, T>)> {
        Ok((self.map_latent(vars, z_s, Which::Shape)?, self.map_latent(vars, z_t, Which::Texture)?))
    }
}

/// Per-layer frequencies and phase shifts, each `[B, 1, width]`.
pub struct Modulation<'t, T: Scalar> {
    pub layers: Vec<(Var<'t, T>, Var<'t, T>)>,
}

/// Field outputs for `[B, P]` points: density `[B, P]`, pre-sigmoid color `[B, P, 3]` and
/// semantic logits `[B, P, k]` when the respective branches exist.
pub struct FieldSample<'t, T: Scalar> {
    pub sigma: Var<'t, T>,
    pub c_pre: Option<Var<'t, T>>,
    pub s_logits: Option<Var<'t, T>>,
}

/// `sin(gamma * (x W + b) + beta)` for `x [B*P, M]` with modulation `[B, 1, N]`.
pub fn film_siren_layer<'t, T: Scalar>(
    x: &Var<'t, T>,
    w: &Var<'t, T>,
    b: &Var<'t, T>,
    gamma: &Var<'t, T>,
    beta: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    let gs = gamma.shape();
    let (rows, n) = (x.shape()[0], w.shape()[1]);
    if gs.len() != 3 || gs[1] != 1 || gs[2] != n || rows % gs[0].max(1) != 0 {
        return invalid(format!("modulation {gs:?} does not fit {rows} rows of width {n}"));
    }
    let bsz = gs[0];
    let pre = x.matmul(w)?.reshape(&[bsz, rows / bsz, n])?;
    Ok(pre.film_sine(b, gamma, beta)?.reshape(&[rows, n])?)
}

/// `(1 - t) a + t b` for t in [0, 1].
pub fn interpolate_latents<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&t) {
        return invalid(format!("interpolation weight {t} outside [0, 1]"));
    }
    if a.shape() != b.shape() {
        return invalid(format!("latent shapes differ: {:?} vs {:?}", a.shape(), b.shape()));
    }
    let (s, u) = (T::of(1.0 - t), T::of(t));
    let data = a.data().iter().zip(b.data()).map(|(x, y)| s * *x + u * *y).collect();
    Ok(Tensor::new(a.shape().to_vec(), data)?)
}

pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Standard-normal latent of length `dim`.
pub fn sample_latent<T: Scalar, R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Tensor<T> {
    use rand_distr::{Distribution, StandardNormal};
    let data = (0..dim)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::of(v)
        })
        .collect();
    Tensor::new(vec![dim], data).expect("shape matches data")
}
