use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares reverse-mode gradients of a scalar function against central
/// differences. Returns max over coordinates of
/// `|autodiff - fd| / max(1, |fd|)`.
pub fn gradient_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&tape, xv)?;
    let analytic = tape.backward(&y)?.get_or_zeros(&xv);

    let eval = |probe: Vec<f64>| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.leaf(Tensor::new(x.shape().to_vec(), probe)?);
        f(&tape, v)?.item()
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.to_vec();
        let mut minus = x.to_vec();
        plus[i] += step;
        minus[i] -= step;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let ad = analytic.data()[i];
        if fd.is_nan() || ad.is_nan() {
            return Err(Error::NonFinite(format!("gradient_check coordinate {i}")));
        }
        worst = worst.max((ad - fd).abs() / fd.abs().max(1.0));
    }
    Ok(worst)
}
