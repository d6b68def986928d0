//! Convolutional discriminators with CoordConv inputs: D_c scores images and regresses the
//! camera pose, D_s scores (semantic map, image) pairs.

use diffmath::{Scalar, Tensor, Var};
use rand::Rng;

use crate::config::DiscConfig;
use crate::error::{invalid, Error, Result};
use crate::params::ParamSet;

pub const SLOPE: f64 = 0.2;
/// Blocks at or above this count get pooled 1x1 skip connections.
pub const RESIDUAL_MIN_BLOCKS: usize = 5;
const COORD_CHANNELS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Block {
    conv: usize,
    bias: usize,
    skip: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T: Scalar> {
    pub resolution: usize,
    pub in_channels: usize,
    pub outputs: usize,
    pub params: ParamSet<T>,
    blocks: Vec<Block>,
    head: (usize, usize),
}

fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect())
        .expect("shape matches data")
}

impl<T: Scalar> Discriminator<T> {
    /// `widths.len()` blocks of conv3x3 -> leaky-relu -> avg-pool2, then a linear head on the
    /// flattened features. The input gets two coordinate channels appended.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        resolution: usize,
        in_channels: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) || in_channels == 0 || outputs == 0 {
            return invalid("discriminator needs non-zero widths, channels and outputs");
        }
        if resolution >> widths.len() == 0 || !resolution.is_multiple_of(1 << widths.len()) {
            return invalid(format!("{} pooling blocks do not fit resolution {resolution}", widths.len()));
        }
        let residual = widths.len() >= RESIDUAL_MIN_BLOCKS;
        let mut params = ParamSet::default();
        let mut blocks = Vec::with_capacity(widths.len());
        let mut c = in_channels + COORD_CHANNELS;
        for (i, &w) in widths.iter().enumerate() {
            let fan_in = c * 9;
            let bound = (6.0 / ((1.0 + SLOPE * SLOPE) * fan_in as f64)).sqrt();
            let conv = params.push(format!("block{i}.conv"), uniform(rng, &[w, c, 3, 3], bound));
            let bias = params.push(format!("block{i}.bias"), Tensor::zeros(vec![1, w, 1, 1]));
            let skip = residual.then(|| {
                let b = (3.0 / c as f64).sqrt();
                params.push(format!("block{i}.skip"), uniform(rng, &[w, c, 1, 1], b))
            });
            blocks.push(Block { conv, bias, skip });
            c = w;
        }
        let side = resolution >> widths.len();
        let flat = c * side * side;
        let bound = 1.0 / (flat as f64).sqrt();
        let hw = params.push("head.w", uniform(rng, &[flat, outputs], bound));
        let hb = params.push("head.b", Tensor::zeros(vec![outputs]));
        Ok(Self { resolution, in_channels, outputs, params, blocks, head: (hw, hb) })
    }

    /// Image discriminator: RGB in, (score, pitch, yaw) out.
    pub fn color<R: Rng + ?Sized>(cfg: &DiscConfig, resolution: usize, rng: &mut R) -> Result<Self> {
        Self::new(&cfg.widths_for(resolution)?, resolution, 3, 3, rng)
    }

    /// Pair discriminator: k semantic channels followed by RGB in, one score out.
    pub fn semantic<R: Rng + ?Sized>(cfg: &DiscConfig, resolution: usize, classes: usize, rng: &mut R) -> Result<Self> {
        Self::new(&cfg.widths_for(resolution)?, resolution, classes + 3, 1, rng)
    }

    /// Rebuilds around stored tensors, checking names and shapes against a fresh template.
    pub fn from_params(template: &Self, params: ParamSet<T>) -> Result<Self> {
        if template.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "discriminator expects {} tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (i, (name, t)) in template.params.iter().enumerate() {
            if params.name(i) != name || params.get(i).shape() != t.shape() {
                return Err(Error::Checkpoint(format!("discriminator tensor {i}: expected {name} {:?}", t.shape())));
            }
        }
        Ok(Self { params, ..template.clone() })
    }

    pub fn blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn residual(&self) -> bool {
        self.blocks.first().is_some_and(|b| b.skip.is_some())
    }

    /// Raw outputs `[B, outputs]` for input `x [B, C, H, W]`.
    pub fn forward<'t>(&self, vars: &[Var<'t, T>], x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.in_channels || s[2] != self.resolution || s[3] != self.resolution {
            return invalid(format!(
                "discriminator expects [B, {}, {r}, {r}], got {s:?}",
                self.in_channels,
                r = self.resolution
            ));
        }
        let tape = x.tape();
        let coords = tape.constant(coord_channels(s[0], self.resolution));
        let mut h = tape.concat(&[*x, coords], 1)?;
        for b in &self.blocks {
            let main = h.conv2d(&vars[b.conv], 1, 1)?.add(&vars[b.bias])?.leaky_relu(SLOPE)?.avg_pool2d(2)?;
            h = match b.skip {
                Some(k) => main.add(&h.avg_pool2d(2)?.conv2d(&vars[k], 1, 0)?)?.scale(std::f64::consts::FRAC_1_SQRT_2)?,
                None => main,
            };
        }
        let flat: usize = h.shape()[1..].iter().product();
        let (w, b) = self.head;
        Ok(h.reshape(&[s[0], flat])?.matmul(&vars[w])?.add(&vars[b])?)
    }
}

/// Normalised pixel coordinates `[B, 2, H, W]`: x then y, each spanning [-1, 1].
pub fn coord_channels<T: Scalar>(batch: usize, res: usize) -> Tensor<T> {
    let lin = |i: usize| if res > 1 { -1.0 + 2.0 * i as f64 / (res - 1) as f64 } else { 0.0 };
    let mut data = Vec::with_capacity(batch * 2 * res * res);
    for _ in 0..batch {
        for _ in 0..res {
            data.extend((0..res).map(|x| T::of(lin(x))));
        }
        for y in 0..res {
            data.extend(std::iter::repeat_n(T::of(lin(y)), res));
        }
    }
    Tensor::new(vec![batch, 2, res, res], data).expect("shape matches data")
}

/// D_c on images `[B, 3, H, W]`: score `[B, 1]` and pose estimate `[B, 2]` (pitch, yaw).
pub fn d_color<'t, T: Scalar>(
    d: &Discriminator<T>,
    vars: &[Var<'t, T>],
    image: &Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    if d.outputs != 3 {
        return invalid(format!("color discriminator needs 3 outputs, has {}", d.outputs));
    }
    let out = d.forward(vars, image)?;
    Ok((out.slice(1, 0, 1)?, out.slice(1, 1, 2)?))
}

/// D_s on semantic maps `[B, k, H, W]` paired with images `[B, 3, H, W]`: score `[B, 1]`.
pub fn d_semantic<'t, T: Scalar>(
    d: &Discriminator<T>,
    vars: &[Var<'t, T>],
    sem: &Var<'t, T>,
    image: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (ss, is) = (sem.shape(), image.shape());
    if ss.len() != 4 || is.len() != 4 || ss[1] + is[1] != d.in_channels || is[1] != 3 {
        return invalid(format!(
            "semantic discriminator takes {} channels, got sem {ss:?} and image {is:?}",
            d.in_channels
        ));
    }
    d.forward(vars, &sem.tape().concat(&[*sem, *image], 1)?)
}

/// Per-pixel rows `[B, H*W, C]` to planar `[B, C, H, W]`.
pub fn to_nchw<'t, T: Scalar>(x: &Var<'t, T>, res: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 3 || s[1] != res * res {
        return invalid(format!("expected [B, {}, C], got {s:?}", res * res));
    }
    Ok(x.reshape(&[s[0], res, res, s[2]])?.permute(&[0, 3, 1, 2])?)
}

/// One-hot encoding `[H*W, k]` of a label map.
pub fn encode_real_mask<T: Scalar>(mask: &[u8], k: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); mask.len() * k];
    for (i, &l) in mask.iter().enumerate() {
        if l as usize >= k {
            return invalid(format!("label {l} at pixel {i} is not below {k}"));
        }
        data[i * k + l as usize] = T::one();
    }
    Ok(Tensor::new(vec![mask.len(), k], data)?)
}

/// Packs interleaved `[H*W, C]` images into a planar batch `[B, C, H, W]`.
pub fn planar_batch<T: Scalar>(images: &[&[T]], res: usize, channels: usize) -> Result<Tensor<T>> {
    let hw = res * res;
    let mut data = Vec::with_capacity(images.len() * hw * channels);
    for img in images {
        if img.len() != hw * channels {
            return invalid(format!("image has {} values, expected {}", img.len(), hw * channels));
        }
        for c in 0..channels {
            data.extend((0..hw).map(|p| img[p * channels + c]));
        }
    }
    Ok(Tensor::new(vec![images.len(), channels, res, res], data)?)
}
