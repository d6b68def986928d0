//! Raw numeric kernels over contiguous row-major buffers.

use crate::error::{arg_err, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` when viewed inside `out` (right-aligned), zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits `out` row by row (last axis), passing the offset of each row in
/// every strided operand together with that operand's last-axis stride.
fn for_each_row<const K: usize>(
    out: &[usize],
    strides: [&[usize]; K],
    mut f: impl FnMut(usize, [usize; K], [usize; K], usize),
) {
    if out.is_empty() {
        f(0, [0; K], [0; K], 1);
        return;
    }
    let rank = out.len();
    let len = out[rank - 1];
    let rows = numel(&out[..rank - 1]);
    let inner: [usize; K] = std::array::from_fn(|k| strides[k][rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let mut base = [0usize; K];
    for row in 0..rows {
        f(row * len, base, inner, len);
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            for k in 0..K {
                base[k] += strides[k][ax];
            }
            if idx[ax] < out[ax] {
                break;
            }
            for k in 0..K {
                base[k] -= strides[k][ax] * out[ax];
            }
            idx[ax] = 0;
        }
    }
}

pub fn binary<T: Scalar>(
    name: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let Some(out) = broadcast_shape(a.shape(), b.shape()) else {
        return shape_err(name, a.shape(), b.shape());
    };
    let (ad, bd) = (a.data(), b.data());
    let mut data = vec![T::zero(); numel(&out)];
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    for_each_row(&out, [&sa, &sb], |o, base, step, len| {
        let dst = &mut data[o..o + len];
        match step {
            [1, 1] => {
                for (i, d) in dst.iter_mut().enumerate() {
                    *d = f(ad[base[0] + i], bd[base[1] + i]);
                }
            }
            [1, 0] => {
                let y = bd[base[1]];
                for (i, d) in dst.iter_mut().enumerate() {
                    *d = f(ad[base[0] + i], y);
                }
            }
            [0, 1] => {
                let x = ad[base[0]];
                for (i, d) in dst.iter_mut().enumerate() {
                    *d = f(x, bd[base[1] + i]);
                }
            }
            _ => {
                for (i, d) in dst.iter_mut().enumerate() {
                    *d = f(ad[base[0] + i * step[0]], bd[base[1] + i * step[1]]);
                }
            }
        }
    });
    Ok(Tensor::from_parts(out, data))
}

pub fn broadcast_to<T: Scalar>(t: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    match broadcast_shape(t.shape(), shape) {
        Some(s) if s == shape => {}
        _ => return shape_err("broadcast", t.shape(), shape),
    }
    if t.shape() == shape {
        return Ok(t.clone());
    }
    let src = t.data();
    let st = broadcast_strides(t.shape(), shape);
    let mut data = vec![T::zero(); numel(shape)];
    for_each_row(shape, [&st], |o, base, step, len| {
        for i in 0..len {
            data[o + i] = src[base[0] + i * step[0]];
        }
    });
    Ok(Tensor::from_parts(shape.to_vec(), data))
}

/// Reduces `t` by summation onto `shape`, the inverse of broadcasting.
pub fn sum_to<T: Scalar>(t: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    match broadcast_shape(shape, t.shape()) {
        Some(s) if s == t.shape() => {}
        _ => return shape_err("sum_to", t.shape(), shape),
    }
    if t.shape() == shape {
        return Ok(t.clone());
    }
    let src = t.data();
    let st = broadcast_strides(shape, t.shape());
    let mut data = vec![T::zero(); numel(shape)];
    for_each_row(t.shape(), [&st], |o, base, step, len| {
        if step[0] == 0 {
            let mut acc = T::zero();
            for v in &src[o..o + len] {
                acc += *v;
            }
            data[base[0]] += acc;
        } else {
            for i in 0..len {
                data[base[0] + i * step[0]] += src[o + i];
            }
        }
    });
    Ok(Tensor::from_parts(shape.to_vec(), data))
}

pub fn unary<T: Scalar>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    t.map(f)
}

pub fn sin<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let mut out = vec![T::zero(); t.numel()];
    T::sin_into(t.data(), &mut out);
    Tensor::from_parts(t.shape().to_vec(), out)
}

pub fn cos<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let mut out = vec![T::zero(); t.numel()];
    T::cos_into(t.data(), &mut out);
    Tensor::from_parts(t.shape().to_vec(), out)
}

pub fn softplus_scalar<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// General matrix product on 2-D operands, optionally transposing either side.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return shape_err("matmul", a.shape(), b.shape());
    }
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return shape_err("matmul", a.shape(), b.shape());
    }
    let mut out = vec![T::zero(); m * n];
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: strides describe the row-major buffers validated above.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                a.data().as_ptr(),
                rsa,
                csa,
                b.data().as_ptr(),
                rsb,
                csb,
                T::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose_axes_valid(rank: usize, axes: &[usize]) -> bool {
    let mut seen = vec![false; rank];
    axes.len() == rank
        && axes.iter().all(|&a| {
            if a >= rank || seen[a] {
                false
            } else {
                seen[a] = true;
                true
            }
        })
}

pub fn permute<T: Scalar>(t: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    if !transpose_axes_valid(t.rank(), axes) {
        return arg_err("permute", format!("invalid axes {:?} for shape {:?}", axes, t.shape()));
    }
    let rank = t.rank();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * t.shape()[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape()[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let src = t.data();
    let mut data = vec![T::zero(); t.numel()];
    for_each_row(&out_shape, [&strides], |o, base, step, len| {
        for i in 0..len {
            data[o + i] = src[base[0] + i * step[0]];
        }
    });
    Ok(Tensor::from_parts(out_shape, data))
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let Some(first) = parts.first() else {
        return arg_err("concat", "no inputs");
    };
    if axis >= first.rank() {
        return arg_err("concat", format!("axis {axis} out of range for {:?}", first.shape()));
    }
    let mut total = 0;
    for p in parts {
        let same_rank = p.rank() == first.rank();
        let same_other = same_rank
            && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !same_other {
            return shape_err("concat", first.shape(), p.shape());
        }
        total += p.shape()[axis];
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor::from_parts(shape, data))
}

pub fn slice<T: Scalar>(t: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= t.rank() || start + len > t.shape()[axis] {
        return arg_err(
            "slice",
            format!("range {start}..{} on axis {axis} of {:?}", start + len, t.shape()),
        );
    }
    let (outer, n, inner) = split_axis(t.shape(), axis);
    let mut shape = t.shape().to_vec();
    shape[axis] = len;
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        let base = (o * n + start) * inner;
        data.extend_from_slice(&t.data()[base..base + len * inner]);
    }
    Ok(Tensor::from_parts(shape, data))
}

/// Embeds `t` into zeros of extent `total` along `axis`, starting at `start`.
pub fn pad_axis<T: Scalar>(t: &Tensor<T>, axis: usize, start: usize, total: usize) -> Result<Tensor<T>> {
    if axis >= t.rank() || start + t.shape()[axis] > total {
        return arg_err("pad", format!("cannot place {:?} at {start} in extent {total}", t.shape()));
    }
    let (outer, n, inner) = split_axis(t.shape(), axis);
    let mut shape = t.shape().to_vec();
    shape[axis] = total;
    let mut data = vec![T::zero(); numel(&shape)];
    for o in 0..outer {
        let dst = (o * total + start) * inner;
        data[dst..dst + n * inner].copy_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
    }
    Ok(Tensor::from_parts(shape, data))
}

pub fn sum_axis<T: Scalar>(t: &Tensor<T>, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
    if axis >= t.rank() {
        return arg_err("sum_axis", format!("axis {axis} out of range for {:?}", t.shape()));
    }
    let (outer, n, inner) = split_axis(t.shape(), axis);
    let mut data = vec![T::zero(); outer * inner];
    let src = t.data();
    for o in 0..outer {
        let dst = &mut data[o * inner..(o + 1) * inner];
        for j in 0..n {
            let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
            for (d, s) in dst.iter_mut().zip(row) {
                *d += *s;
            }
        }
    }
    let mut shape = t.shape().to_vec();
    if keepdim {
        shape[axis] = 1;
    } else {
        shape.remove(axis);
    }
    Ok(Tensor::from_parts(shape, data))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Conv2dGeom {
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeom {
    pub fn out_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if padded < kernel || self.stride == 0 {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims(
    x_shape: &[usize],
    w_shape: &[usize],
    geom: Conv2dGeom,
) -> Result<ConvDims> {
    if x_shape.len() != 4 || w_shape.len() != 4 || x_shape[1] != w_shape[1] {
        return shape_err("conv2d", x_shape, w_shape);
    }
    let (oh, ow) = match (geom.out_size(x_shape[2], w_shape[2]), geom.out_size(x_shape[3], w_shape[3])) {
        (Some(a), Some(b)) => (a, b),
        _ => return shape_err("conv2d", x_shape, w_shape),
    };
    Ok(ConvDims {
        n: x_shape[0],
        c: x_shape[1],
        h: x_shape[2],
        w: x_shape[3],
        o: w_shape[0],
        kh: w_shape[2],
        kw: w_shape[3],
        oh,
        ow,
    })
}

fn im2col<T: Scalar>(x: &[T], d: &ConvDims, geom: Conv2dGeom, cols: &mut [T]) {
    let plane = d.oh * d.ow;
    for c in 0..d.c {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..d.oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    for ox in 0..d.ow {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        dst[oy * d.ow + ox] = if iy >= 0 && iy < d.h as isize && ix >= 0 && ix < d.w as isize {
                            x[(c * d.h + iy as usize) * d.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], d: &ConvDims, geom: Conv2dGeom, x: &mut [T]) {
    let plane = d.oh * d.ow;
    for c in 0..d.c {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..d.oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for ox in 0..d.ow {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            x[(c * d.h + iy as usize) * d.w + ix as usize] += src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
unsafe fn gemm_rm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    T::gemm(m, k, n, T::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
}

/// Cross-correlation of `x[N,C,H,W]` with `w[O,C,KH,KW]` via im2col and gemm.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, geom: Conv2dGeom) -> Result<Tensor<T>> {
    let d = conv_dims(x.shape(), w.shape(), geom)?;
    let plane = d.oh * d.ow;
    let ckk = d.c * d.kh * d.kw;
    let mut cols = vec![T::zero(); ckk * plane];
    let mut out = vec![T::zero(); d.n * d.o * plane];
    for n in 0..d.n {
        im2col(&x.data()[n * d.c * d.h * d.w..(n + 1) * d.c * d.h * d.w], &d, geom, &mut cols);
        // SAFETY: buffers sized from the validated dimensions.
        unsafe {
            gemm_rm(d.o, ckk, plane, w.data(), false, &cols, false, T::zero(), &mut out[n * d.o * plane..(n + 1) * d.o * plane]);
        }
    }
    Ok(Tensor::from_parts(vec![d.n, d.o, d.oh, d.ow], out))
}

/// Direct-loop reference for [`conv2d`].
pub fn conv2d_direct<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, geom: Conv2dGeom) -> Result<Tensor<T>> {
    let d = conv_dims(x.shape(), w.shape(), geom)?;
    let (xs, ws) = (x.data(), w.data());
    let mut out = vec![T::zero(); d.n * d.o * d.oh * d.ow];
    for n in 0..d.n {
        for o in 0..d.o {
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let mut acc = T::zero();
                    for c in 0..d.c {
                        for ky in 0..d.kh {
                            let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            for kx in 0..d.kw {
                                let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                acc += xs[((n * d.c + c) * d.h + iy as usize) * d.w + ix as usize]
                                    * ws[((o * d.c + c) * d.kh + ky) * d.kw + kx];
                            }
                        }
                    }
                    out[((n * d.o + o) * d.oh + oy) * d.ow + ox] = acc;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![d.n, d.o, d.oh, d.ow], out))
}

/// Gradient of conv2d with respect to its input: the transposed convolution of `g`.
pub fn conv2d_input_grad<T: Scalar>(
    g: &Tensor<T>,
    w: &Tensor<T>,
    geom: Conv2dGeom,
    in_hw: (usize, usize),
) -> Result<Tensor<T>> {
    if g.rank() != 4 || w.rank() != 4 || g.shape()[1] != w.shape()[0] {
        return shape_err("conv2d_input_grad", g.shape(), w.shape());
    }
    let x_shape = [g.shape()[0], w.shape()[1], in_hw.0, in_hw.1];
    let d = conv_dims(&x_shape, w.shape(), geom)?;
    if d.oh != g.shape()[2] || d.ow != g.shape()[3] {
        return shape_err("conv2d_input_grad", g.shape(), &x_shape);
    }
    let plane = d.oh * d.ow;
    let ckk = d.c * d.kh * d.kw;
    let mut cols = vec![T::zero(); ckk * plane];
    let mut out = vec![T::zero(); d.n * d.c * d.h * d.w];
    for n in 0..d.n {
        // SAFETY: buffers sized from the validated dimensions.
        unsafe {
            gemm_rm(ckk, d.o, plane, w.data(), true, &g.data()[n * d.o * plane..(n + 1) * d.o * plane], false, T::zero(), &mut cols);
        }
        col2im(&cols, &d, geom, &mut out[n * d.c * d.h * d.w..(n + 1) * d.c * d.h * d.w]);
    }
    Ok(Tensor::from_parts(x_shape.to_vec(), out))
}

/// Gradient of conv2d with respect to its kernel, summed over the batch.
pub fn conv2d_weight_grad<T: Scalar>(
    x: &Tensor<T>,
    g: &Tensor<T>,
    geom: Conv2dGeom,
    k_hw: (usize, usize),
) -> Result<Tensor<T>> {
    if x.rank() != 4 || g.rank() != 4 || x.shape()[0] != g.shape()[0] {
        return shape_err("conv2d_weight_grad", x.shape(), g.shape());
    }
    let w_shape = [g.shape()[1], x.shape()[1], k_hw.0, k_hw.1];
    let d = conv_dims(x.shape(), &w_shape, geom)?;
    if d.oh != g.shape()[2] || d.ow != g.shape()[3] {
        return shape_err("conv2d_weight_grad", x.shape(), g.shape());
    }
    let plane = d.oh * d.ow;
    let ckk = d.c * d.kh * d.kw;
    let mut cols = vec![T::zero(); ckk * plane];
    let mut out = vec![T::zero(); d.o * ckk];
    for n in 0..d.n {
        im2col(&x.data()[n * d.c * d.h * d.w..(n + 1) * d.c * d.h * d.w], &d, geom, &mut cols);
        // SAFETY: buffers sized from the validated dimensions.
        unsafe {
            gemm_rm(d.o, plane, ckk, &g.data()[n * d.o * plane..(n + 1) * d.o * plane], false, &cols, true, T::one(), &mut out);
        }
    }
    Ok(Tensor::from_parts(w_shape.to_vec(), out))
}

pub fn avg_pool2d<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || k == 0 || !s[2].is_multiple_of(k) || !s[3].is_multiple_of(k) {
        return arg_err("avg_pool2d", format!("kernel {k} does not tile {:?}", s));
    }
    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
    let (oh, ow) = (h / k, w / k);
    let scale = T::of(1.0 / (k * k) as f64);
    let src = x.data();
    let mut out = vec![T::zero(); nc * oh * ow];
    for p in 0..nc {
        for y in 0..h {
            for xx in 0..w {
                out[(p * oh + y / k) * ow + xx / k] += src[(p * h + y) * w + xx];
            }
        }
    }
    for v in &mut out {
        *v *= scale;
    }
    Ok(Tensor::from_parts(vec![s[0], s[1], oh, ow], out))
}

/// Adjoint of [`avg_pool2d`]: spreads each pooled value evenly over its window.
pub fn avg_pool2d_grad<T: Scalar>(g: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let s = g.shape();
    if s.len() != 4 || k == 0 {
        return arg_err("avg_pool2d_grad", format!("bad input {:?}", s));
    }
    let (nc, oh, ow) = (s[0] * s[1], s[2], s[3]);
    let (h, w) = (oh * k, ow * k);
    let scale = T::of(1.0 / (k * k) as f64);
    let src = g.data();
    let mut out = vec![T::zero(); nc * h * w];
    for p in 0..nc {
        for y in 0..h {
            for xx in 0..w {
                out[(p * h + y) * w + xx] = src[(p * oh + y / k) * ow + xx / k] * scale;
            }
        }
    }
    Ok(Tensor::from_parts(vec![s[0], s[1], h, w], out))
}

/// Interpolation kernel for feature-grid lookups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Interp {
    #[default]
    Trilinear,
    /// Catmull-Rom along each axis (64 taps).
    Tricubic,
}

struct AxisTaps<T> {
    idx: [usize; 4],
    w: [T; 4],
    dw: [T; 4],
    n: usize,
}

/// Taps along one axis for a normalized coordinate in [-1, 1]; vertices sit
/// at -1 + 2i/(g-1). Outside the box the coordinate clamps and the
/// derivative vanishes.
fn axis_taps<T: Scalar>(mode: Interp, p: T, g: usize) -> AxisTaps<T> {
    let last = (g - 1) as f64;
    let pf = p.as_f64();
    let clamped = !(-1.0..=1.0).contains(&pf);
    let u = ((pf.clamp(-1.0, 1.0) + 1.0) * 0.5 * last).clamp(0.0, last);
    let du = if clamped { 0.0 } else { 0.5 * last };
    let zero = T::zero();
    if g == 1 {
        return AxisTaps { idx: [0; 4], w: [T::one(), zero, zero, zero], dw: [zero; 4], n: 1 };
    }
    match mode {
        Interp::Trilinear => {
            let i0 = (u.floor() as usize).min(g - 2);
            let t = u - i0 as f64;
            AxisTaps {
                idx: [i0, i0 + 1, 0, 0],
                w: [T::of(1.0 - t), T::of(t), zero, zero],
                dw: [T::of(-du), T::of(du), zero, zero],
                n: 2,
            }
        }
        Interp::Tricubic => {
            let i1 = (u.floor() as usize).min(g - 1);
            let t = u - i1 as f64;
            let (t2, t3) = (t * t, t * t * t);
            let w = [
                0.5 * (-t3 + 2.0 * t2 - t),
                0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
                0.5 * (-3.0 * t3 + 4.0 * t2 + t),
                0.5 * (t3 - t2),
            ];
            let dw = [
                0.5 * (-3.0 * t2 + 4.0 * t - 1.0),
                0.5 * (9.0 * t2 - 10.0 * t),
                0.5 * (-9.0 * t2 + 8.0 * t + 1.0),
                0.5 * (3.0 * t2 - 2.0 * t),
            ];
            let clampi = |i: isize| i.clamp(0, g as isize - 1) as usize;
            let base = i1 as isize;
            AxisTaps {
                idx: [clampi(base - 1), clampi(base), clampi(base + 1), clampi(base + 2)],
                w: w.map(T::of),
                dw: dw.map(|v| T::of(v * du)),
                n: 4,
            }
        }
    }
}

fn grid_dims(grid: &[usize], pts: &[usize]) -> Result<(usize, usize, usize, usize, usize)> {
    if grid.len() != 4 || pts.len() != 2 || pts[1] != 3 || grid[..3].contains(&0) {
        return shape_err("grid_sample_3d", grid, pts);
    }
    Ok((grid[0], grid[1], grid[2], grid[3], pts[0]))
}

/// Visits every (grid cell offset, weight, d weight / d point) tap for one point.
fn for_each_tap<T: Scalar>(
    mode: Interp,
    p: &[T],
    dims: (usize, usize, usize),
    mut f: impl FnMut(usize, T, [T; 3]),
) {
    let (gx, gy, gz) = dims;
    let ax = axis_taps(mode, p[0], gx);
    let ay = axis_taps(mode, p[1], gy);
    let az = axis_taps(mode, p[2], gz);
    for a in 0..ax.n {
        for b in 0..ay.n {
            let wab = ax.w[a] * ay.w[b];
            for c in 0..az.n {
                let cell = (ax.idx[a] * gy + ay.idx[b]) * gz + az.idx[c];
                let w = wab * az.w[c];
                let dw = [
                    ax.dw[a] * ay.w[b] * az.w[c],
                    ax.w[a] * ay.dw[b] * az.w[c],
                    wab * az.dw[c],
                ];
                f(cell, w, dw);
            }
        }
    }
}

/// Samples `grid[GX,GY,GZ,F]` at `pts[P,3]` (normalized to [-1,1]^3), giving `[P,F]`.
pub fn grid_sample_3d<T: Scalar>(grid: &Tensor<T>, pts: &Tensor<T>, mode: Interp) -> Result<Tensor<T>> {
    let (gx, gy, gz, f, np) = grid_dims(grid.shape(), pts.shape())?;
    let gd = grid.data();
    let mut out = vec![T::zero(); np * f];
    for (p, dst) in pts.data().chunks_exact(3).zip(out.chunks_exact_mut(f)) {
        for_each_tap(mode, p, (gx, gy, gz), |cell, w, _| {
            let src = &gd[cell * f..(cell + 1) * f];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * *s;
            }
        });
    }
    Ok(Tensor::from_parts(vec![np, f], out))
}

pub fn grid_sample_3d_grad_grid<T: Scalar>(
    pts: &Tensor<T>,
    g: &Tensor<T>,
    grid_shape: &[usize],
    mode: Interp,
) -> Result<Tensor<T>> {
    let (gx, gy, gz, f, np) = grid_dims(grid_shape, pts.shape())?;
    if g.shape() != [np, f] {
        return shape_err("grid_sample_3d_grad_grid", g.shape(), &[np, f]);
    }
    let mut out = vec![T::zero(); numel(grid_shape)];
    for (p, gr) in pts.data().chunks_exact(3).zip(g.data().chunks_exact(f)) {
        for_each_tap(mode, p, (gx, gy, gz), |cell, w, _| {
            for (d, s) in out[cell * f..(cell + 1) * f].iter_mut().zip(gr) {
                *d += w * *s;
            }
        });
    }
    Ok(Tensor::from_parts(grid_shape.to_vec(), out))
}

pub fn grid_sample_3d_grad_points<T: Scalar>(
    grid: &Tensor<T>,
    pts: &Tensor<T>,
    g: &Tensor<T>,
    mode: Interp,
) -> Result<Tensor<T>> {
    let (gx, gy, gz, f, np) = grid_dims(grid.shape(), pts.shape())?;
    if g.shape() != [np, f] {
        return shape_err("grid_sample_3d_grad_points", g.shape(), &[np, f]);
    }
    let gd = grid.data();
    let mut out = vec![T::zero(); np * 3];
    for ((p, gr), dst) in pts.data().chunks_exact(3).zip(g.data().chunks_exact(f)).zip(out.chunks_exact_mut(3)) {
        for_each_tap(mode, p, (gx, gy, gz), |cell, _, dw| {
            let dot: T = gd[cell * f..(cell + 1) * f].iter().zip(gr).map(|(a, b)| *a * *b).sum();
            for k in 0..3 {
                dst[k] += dw[k] * dot;
            }
        });
    }
    Ok(Tensor::from_parts(vec![np, 3], out))
}

fn film_dims<T: Scalar>(
    x: &Tensor<T>,
    bias: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let xs = x.shape();
    if xs.len() != 3 {
        return shape_err("film_sine", xs, gamma.shape());
    }
    let (b, p, n) = (xs[0], xs[1], xs[2]);
    if bias.shape() != [n] {
        return shape_err("film_sine", xs, bias.shape());
    }
    if gamma.shape() != [b, 1, n] {
        return shape_err("film_sine", xs, gamma.shape());
    }
    if beta.shape() != [b, 1, n] {
        return shape_err("film_sine", xs, beta.shape());
    }
    Ok((b, p, n))
}

/// `gamma * (x + bias) + beta` written row by row into `out`.
fn film_args<T: Scalar>(x: &[T], bias: &[T], gamma: &[T], beta: &[T], dims: (usize, usize, usize), out: &mut [T]) {
    let (b, p, n) = dims;
    for bi in 0..b {
        let (gr, er) = (&gamma[bi * n..(bi + 1) * n], &beta[bi * n..(bi + 1) * n]);
        let rows = bi * p * n..(bi + 1) * p * n;
        for (o, xr) in out[rows.clone()].chunks_exact_mut(n).zip(x[rows].chunks_exact(n)) {
            for ((((o, &xv), &bv), &gv), &ev) in o.iter_mut().zip(xr).zip(bias).zip(gr).zip(er) {
                *o = gv * (xv + bv) + ev;
            }
        }
    }
}

/// `sin(gamma * (x + bias) + beta)` with `x [B, P, N]`, `bias [N]`, `gamma, beta [B, 1, N]`.
pub fn film_sine<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    let dims = film_dims(x, bias, gamma, beta)?;
    let mut out = vec![T::zero(); x.numel()];
    film_args(x.data(), bias.data(), gamma.data(), beta.data(), dims, &mut out);
    T::sin_in_place(&mut out);
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Gradients of [`film_sine`] with respect to `(x, bias, gamma, beta)`.
pub fn film_sine_grads<T: Scalar>(
    x: &Tensor<T>,
    bias: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let (b, p, n) = film_dims(x, bias, gamma, beta)?;
    if g.shape() != x.shape() {
        return shape_err("film_sine", x.shape(), g.shape());
    }
    let mut gx = vec![T::zero(); x.numel()];
    film_args(x.data(), bias.data(), gamma.data(), beta.data(), (b, p, n), &mut gx);
    T::cos_in_place(&mut gx);
    let mut gbias = vec![T::zero(); n];
    let mut ggamma = vec![T::zero(); b * n];
    let mut gbeta = vec![T::zero(); b * n];
    let (xd, bd, gd) = (x.data(), bias.data(), gamma.data());
    for bi in 0..b {
        let gr = &gd[bi * n..(bi + 1) * n];
        let ggr = &mut ggamma[bi * n..(bi + 1) * n];
        let gbr = &mut gbeta[bi * n..(bi + 1) * n];
        let rows = bi * p * n..(bi + 1) * p * n;
        let it = gx[rows.clone()].chunks_exact_mut(n).zip(xd[rows.clone()].chunks_exact(n)).zip(g.data()[rows].chunks_exact(n));
        for ((out, xr), gin) in it {
            for j in 0..n {
                let ga = gin[j] * out[j];
                ggr[j] += ga * (xr[j] + bd[j]);
                gbr[j] += ga;
                out[j] = ga * gr[j];
            }
        }
        for j in 0..n {
            gbias[j] += gbr[j] * gr[j];
        }
    }
    Ok(vec![
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(vec![n], gbias),
        Tensor::from_parts(vec![b, 1, n], ggamma),
        Tensor::from_parts(vec![b, 1, n], gbeta),
    ])
}

/// Cumulative product along the last axis. The exclusive form starts each
/// row at 1 and omits the current element.
pub fn cumprod<T: Scalar>(x: &Tensor<T>, exclusive: bool) -> Result<Tensor<T>> {
    let Some(&n) = x.shape().last() else {
        return arg_err("cumprod", "scalar input");
    };
    let mut out = vec![T::zero(); x.numel()];
    if n > 0 {
        for (src, dst) in x.data().chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let mut acc = T::one();
            for (s, d) in src.iter().zip(dst.iter_mut()) {
                if exclusive {
                    *d = acc;
                    acc *= *s;
                } else {
                    acc *= *s;
                    *d = acc;
                }
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Vector-Jacobian product of [`cumprod`]; division-free so zeros in `x` are safe.
pub fn cumprod_grad<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, exclusive: bool) -> Result<Tensor<T>> {
    if x.shape() != g.shape() || x.rank() == 0 {
        return shape_err("cumprod_grad", x.shape(), g.shape());
    }
    let n = *x.shape().last().unwrap_or(&0);
    let mut out = vec![T::zero(); x.numel()];
    if n == 0 {
        return Ok(Tensor::from_parts(x.shape().to_vec(), out));
    }
    let mut prefix = vec![T::zero(); n];
    for ((xs, gs), dst) in x.data().chunks_exact(n).zip(g.data().chunks_exact(n)).zip(out.chunks_exact_mut(n)) {
        let mut acc = T::one();
        for (p, v) in prefix.iter_mut().zip(xs) {
            *p = acc;
            acc *= *v;
        }
        // suffix[k] = sum over outputs i that include x_k of g_i * prod of x_j (k < j, j in output i)
        let mut suffix = T::zero();
        for k in (0..n).rev() {
            if exclusive {
                // outputs i > k include x_k; prod over k < j < i
                dst[k] = prefix[k] * suffix;
                suffix = gs[k] + xs[k] * suffix;
            } else {
                suffix = gs[k] + if k + 1 < n { xs[k + 1] * suffix } else { T::zero() };
                dst[k] = prefix[k] * suffix;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn broadcasting_follows_numpy_rules() {
        assert_eq!(broadcast_shape(&[2, 1, 3], &[4, 1]), Some(vec![2, 4, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[3], &[10., 20., 30.]);
        let c = binary("add", &a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[11., 22., 33., 14., 25., 36.]);
        let col = t(&[2, 1], &[1., 2.]);
        let d = binary("mul", &col, &b, |x, y| x * y).unwrap();
        assert_eq!(d.data(), &[10., 20., 30., 20., 40., 60.]);
        assert_eq!(sum_to(&d, &[2, 1]).unwrap().data(), &[60., 120.]);
        assert_eq!(sum_to(&d, &[3]).unwrap().data(), &[30., 60., 90.]);
    }

    #[test]
    fn matmul_transposes() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[3, 2], &[1., 0., 0., 1., 1., 1.]);
        assert_eq!(matmul(&a, &b, false, false).unwrap().data(), &[4., 5., 10., 11.]);
        let at = permute(&a, &[1, 0]).unwrap();
        assert_eq!(matmul(&at, &b, true, false).unwrap().data(), &[4., 5., 10., 11.]);
        let bt = permute(&b, &[1, 0]).unwrap();
        assert_eq!(matmul(&a, &bt, false, true).unwrap().data(), &[4., 5., 10., 11.]);
        assert!(matmul(&a, &a, false, false).is_err());
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        let x = Tensor::<f64>::new(vec![2, 3, 7, 6], (0..252).map(|i| ((i * 37 % 11) as f64) - 5.0).collect()).unwrap();
        let w = Tensor::<f64>::new(vec![4, 3, 3, 2], (0..72).map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.7).collect()).unwrap();
        for geom in [Conv2dGeom { stride: 1, pad: 1 }, Conv2dGeom { stride: 2, pad: 0 }, Conv2dGeom { stride: 2, pad: 2 }] {
            let a = conv2d(&x, &w, geom).unwrap();
            let b = conv2d_direct(&x, &w, geom).unwrap();
            assert_eq!(a.shape(), b.shape());
            assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }

    #[test]
    fn cumprod_forms() {
        let x = t(&[2, 3], &[2., 3., 4., 0.5, 0., 2.]);
        assert_eq!(cumprod(&x, false).unwrap().data(), &[2., 6., 24., 0.5, 0., 0.]);
        assert_eq!(cumprod(&x, true).unwrap().data(), &[1., 2., 6., 1., 0.5, 0.]);
    }

    #[test]
    fn grid_sample_hits_vertices_exactly() {
        let grid = Tensor::<f64>::new(vec![3, 3, 3, 2], (0..54).map(|i| i as f64).collect()).unwrap();
        let pts = t(&[2, 3], &[-1., 0., 1., 1., 1., -1.]);
        for mode in [Interp::Trilinear, Interp::Tricubic] {
            let out = grid_sample_3d(&grid, &pts, mode).unwrap();
            let cell_a = 3 + 2;
            let cell_b = (2 * 3 + 2) * 3;
            assert_eq!(out.data(), &[(cell_a * 2) as f64, (cell_a * 2 + 1) as f64, (cell_b * 2) as f64, (cell_b * 2 + 1) as f64]);
        }
    }

    #[test]
    fn concat_and_slice_invert() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 1], &[5., 6.]);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1., 2., 5., 3., 4., 6.]);
        assert_eq!(slice(&c, 1, 2, 1).unwrap().data(), b.data());
        assert_eq!(pad_axis(&b, 1, 2, 3).unwrap().data(), &[0., 0., 5., 0., 0., 6.]);
    }
}
