use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Element type code, as stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub trait Scalar:
    Float + Default + Debug + Send + Sync + AddAssign + SubAssign + MulAssign + Sum + 'static
{
    const DTYPE: DType;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c <- alpha * a @ b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// Strides and dimensions must describe in-bounds views of the slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn sin_into(src: &[Self], dst: &mut [Self]) {
        for (d, s) in dst.iter_mut().zip(src) {
            *d = s.sin();
        }
    }

    fn cos_into(src: &[Self], dst: &mut [Self]) {
        for (d, s) in dst.iter_mut().zip(src) {
            *d = s.cos();
        }
    }

    fn sin_in_place(buf: &mut [Self]) {
        for v in buf {
            *v = v.sin();
        }
    }

    fn cos_in_place(buf: &mut [Self]) {
        for v in buf {
            *v = v.cos();
        }
    }

    fn to_le_bytes_into(self, out: &mut Vec<u8>);

    fn from_le_slice(bytes: &[u8]) -> Self;
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn to_le_bytes_into(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn sin_into(src: &[f32], dst: &mut [f32]) {
        if src.iter().all(|v| v.abs() < FAST_SIN_LIMIT) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = fast_sin_f32(s);
            }
        } else {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s.sin();
            }
        }
    }

    fn sin_in_place(buf: &mut [f32]) {
        if buf.iter().all(|v| v.abs() < FAST_SIN_LIMIT) {
            for v in buf.iter_mut() {
                *v = fast_sin_f32(*v);
            }
        } else {
            for v in buf.iter_mut() {
                *v = v.sin();
            }
        }
    }

    fn cos_in_place(buf: &mut [f32]) {
        if buf.iter().all(|v| v.abs() < FAST_SIN_LIMIT) {
            for v in buf.iter_mut() {
                *v = fast_sin_f32(*v + std::f32::consts::FRAC_PI_2);
            }
        } else {
            for v in buf.iter_mut() {
                *v = v.cos();
            }
        }
    }

    fn cos_into(src: &[f32], dst: &mut [f32]) {
        if src.iter().all(|v| v.abs() < FAST_SIN_LIMIT) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = fast_sin_f32(s + std::f32::consts::FRAC_PI_2);
            }
        } else {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s.cos();
            }
        }
    }

    fn to_le_bytes_into(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        let mut b = [0u8; 4];
        b.copy_from_slice(&bytes[..4]);
        f32::from_le_bytes(b)
    }
}

const FAST_SIN_LIMIT: f32 = 1.0e5;

/// Branch-free sine for |x| < 1e5: reduce by the nearest multiple of pi,
/// then a degree-11 odd polynomial on [-pi/2, pi/2]. Written so the
/// compiler can vectorize the enclosing loop.
#[inline(always)]
fn fast_sin_f32(x: f32) -> f32 {
    const INV_PI: f32 = std::f32::consts::FRAC_1_PI;
    // 1.5 * 2^23: adding it leaves round(x / pi) in the low mantissa bits.
    const ROUNDER: f32 = 12_582_912.0;
    const PI_A: f32 = 3.140_625;
    const PI_B: f32 = 9.670_257_6e-4;
    const PI_C: f32 = 6.278_329_5e-7;
    const PI_D: f32 = 1.215_420_1e-10;

    let shifted = x * INV_PI + ROUNDER;
    let parity = (shifted.to_bits() & 1) << 31;
    let k = shifted - ROUNDER;
    let r = ((x - k * PI_A) - k * PI_B) - k * PI_C - k * PI_D;
    let r2 = r * r;
    let p = r
        + r * r2
            * (-0.166_666_67
                + r2 * (8.333_33e-3
                    + r2 * (-1.984_080_4e-4 + r2 * (2.752_262e-6 - r2 * 2.384_668_6e-8))));
    f32::from_bits(p.to_bits() ^ parity)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_sine_tracks_libm() {
        let xs: Vec<f32> = (0..200_001).map(|i| (i as f32 - 100_000.0) * 1.3e-3).collect();
        let mut fast = vec![0.0; xs.len()];
        f32::sin_into(&xs, &mut fast);
        let mut cos = vec![0.0; xs.len()];
        f32::cos_into(&xs, &mut cos);
        for ((x, s), c) in xs.iter().zip(&fast).zip(&cos) {
            let x64 = *x as f64;
            assert!((*s as f64 - x64.sin()).abs() < 5e-7, "sin {x}");
            assert!((*c as f64 - x64.cos()).abs() < 2e-5, "cos {x}");
        }
    }

    #[test]
    fn fast_sine_falls_back_for_huge_arguments() {
        let xs = [3.0e6f32, -1.0];
        let mut out = [0.0f32; 2];
        f32::sin_into(&xs, &mut out);
        assert_eq!(out[0], 3.0e6f32.sin());
    }

    #[test]
    fn dtype_codes_round_trip() {
        for d in [DType::F32, DType::F64] {
            assert_eq!(DType::from_code(d.code()), Some(d));
        }
        assert_eq!(DType::from_code(9), None);
    }
}
