//! Evaluation: mean IoU over label maps, PSNR, and depth-based reprojection consistency.

use diffmath::Scalar;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::camera::{pose_to_rays, CameraPose};
use crate::config::SamplingConfig;
use crate::error::{invalid, Error, Result};
use crate::generator::Generator;
use crate::renderer::render;

/// `k x k` counts, row = ground truth, column = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionTable {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl ConfusionTable {
    pub fn new(pred: &[u8], gt: &[u8], k: usize) -> Result<Self> {
        if pred.len() != gt.len() {
            return invalid(format!("label maps differ in size: {} vs {}", pred.len(), gt.len()));
        }
        let mut counts = vec![0u64; k * k];
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p as usize, g as usize);
            if p >= k || g >= k {
                return invalid(format!("label {} is not below {k}", p.max(g)));
            }
            counts[g * k + p] += 1;
        }
        Ok(Self { k, counts })
    }

    pub fn at(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    /// IoU per class; `None` for classes absent from both maps.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let inter = self.at(c, c);
                let gt: u64 = (0..self.k).map(|p| self.at(c, p)).sum();
                let pred: u64 = (0..self.k).map(|g| self.at(g, c)).sum();
                let union = gt + pred - inter;
                (union > 0).then(|| inter as f64 / union as f64)
            })
            .collect()
    }
}

/// Mean IoU over classes present in at least one of the maps. The per-class ratios are summed
/// as exact fractions so hand-countable cases come out exactly; a float sum is the fallback when
/// the common denominator overflows.
pub fn miou(pred: &[u8], gt: &[u8], k: usize) -> Result<f64> {
    if gt.is_empty() {
        return invalid("empty label maps");
    }
    let table = ConfusionTable::new(pred, gt, k)?;
    let mut ratios = Vec::with_capacity(k);
    for c in 0..k {
        let inter = table.at(c, c);
        let gt_n: u64 = (0..k).map(|p| table.at(c, p)).sum();
        let pred_n: u64 = (0..k).map(|g| table.at(g, c)).sum();
        let union = gt_n + pred_n - inter;
        if union > 0 {
            ratios.push((inter as u128, union as u128));
        }
    }
    let n = ratios.len() as u128;
    let exact = ratios.iter().try_fold((0u128, 1u128), |(a, b), &(c, d)| {
        let num = a.checked_mul(d)?.checked_add(c.checked_mul(b)?)?;
        let den = b.checked_mul(d)?;
        let g = gcd(num, den);
        Some((num / g, den / g))
    });
    match exact.and_then(|(num, den)| Some((num, den.checked_mul(n)?))) {
        Some((num, den)) if num < 1 << 53 && den < 1 << 53 => Ok(num as f64 / den as f64),
        _ => Ok(ratios.iter().map(|(i, u)| *i as f64 / *u as f64).sum::<f64>() / n as f64),
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// `10 log10(1 / MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return invalid(format!("images differ in size: {} vs {}", a.len(), b.len()));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// A rendered or ray-traced view: colors `H x W x 3` and per-pixel hit distance along the
/// unit ray (`f64::INFINITY` where nothing was hit).
#[derive(Clone, Debug)]
pub struct ViewGeometry {
    pub pose: CameraPose,
    pub resolution: usize,
    pub rgb: Vec<f32>,
    pub depth: Vec<f64>,
}

/// Relative depth disagreement above which a warped point counts as occluded in the target view.
pub const OCCLUSION_TOLERANCE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Reprojection {
    pub error: f64,
    pub pixels: usize,
}

/// Warps every valid pixel of `a` into `b` through its depth and compares colors with a bilinear
/// lookup in `b`. A pixel counts when all four lookup taps are valid and the warped distance
/// agrees with `b`'s depth within [`OCCLUSION_TOLERANCE`].
pub fn reproject(a: &ViewGeometry, b: &ViewGeometry) -> Result<Reprojection> {
    let res = a.resolution;
    if b.resolution != res || a.rgb.len() != res * res * 3 || b.rgb.len() != res * res * 3 {
        return invalid("views must share one resolution");
    }
    let rays = pose_to_rays(&a.pose, res, 0.0, 1.0)?;
    let (mut total, mut count) = (0.0, 0usize);
    for (i, ray) in rays.iter().enumerate() {
        let d = a.depth[i];
        if !d.is_finite() {
            continue;
        }
        let Some((px, py, dist)) = b.pose.project(ray.at(d), res)? else { continue };
        let (x, y) = (px - 0.5, py - 0.5);
        let (x0, y0) = (x.floor(), y.floor());
        if x0 < 0.0 || y0 < 0.0 || x0 + 1.0 > (res - 1) as f64 || y0 + 1.0 > (res - 1) as f64 {
            continue;
        }
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as usize, y0 as usize);
        let taps = [(y0, x0, (1.0 - fx) * (1.0 - fy)), (y0, x0 + 1, fx * (1.0 - fy)), (y0 + 1, x0, (1.0 - fx) * fy), (y0 + 1, x0 + 1, fx * fy)];
        if taps.iter().any(|(r, c, _)| !b.depth[r * res + c].is_finite()) {
            continue;
        }
        let depth_b: f64 = taps.iter().map(|(r, c, w)| w * b.depth[r * res + c]).sum();
        if (depth_b - dist).abs() > OCCLUSION_TOLERANCE * dist {
            continue;
        }
        for ch in 0..3 {
            let sampled: f64 = taps.iter().map(|(r, c, w)| w * b.rgb[(r * res + c) * 3 + ch] as f64).sum();
            total += (sampled - a.rgb[i * 3 + ch] as f64).abs();
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoValidPixels);
    }
    Ok(Reprojection { error: total / (3 * count) as f64, pixels: count })
}

/// Minimum accumulated weight for a rendered pixel to carry a surface.
pub const MIN_WEIGHT: f32 = 0.5;

/// Renders `pose` deterministically and keeps depth only where the weight sum reaches
/// [`MIN_WEIGHT`]; depth is normalised by the weight sum.
pub fn rendered_view<T: Scalar>(
    gen: &Generator<T>,
    z_s: &diffmath::Tensor<T>,
    z_t: &diffmath::Tensor<T>,
    pose: &CameraPose,
    sampling: &SamplingConfig,
    resolution: usize,
) -> Result<ViewGeometry> {
    let fixed = SamplingConfig { stratified: false, ..*sampling };
    let out = render(gen, z_s, z_t, pose, &fixed, resolution, None::<&mut ChaCha8Rng>)?;
    let depth = out
        .surface_depth()
        .into_iter()
        .zip(&out.weight_sum)
        .map(|(d, w)| if *w >= MIN_WEIGHT { d } else { f64::INFINITY })
        .collect();
    Ok(ViewGeometry { pose: *pose, resolution, rgb: out.rgb, depth })
}

/// Mean absolute color difference after warping the render at `pose_a` into the render at `pose_b`.
pub fn reprojection_consistency<T: Scalar>(
    gen: &Generator<T>,
    z_s: &diffmath::Tensor<T>,
    z_t: &diffmath::Tensor<T>,
    pose_a: &CameraPose,
    pose_b: &CameraPose,
    sampling: &SamplingConfig,
    resolution: usize,
) -> Result<f64> {
    let a = rendered_view(gen, z_s, z_t, pose_a, sampling, resolution)?;
    let b = rendered_view(gen, z_s, z_t, pose_b, sampling, resolution)?;
    Ok(reproject(&a, &b)?.error)
}
