use diffmath::{Gradients, Scalar, Tensor, Var};

use crate::error::Result;
use crate::params::ParamSet;

/// Adam with bias correction; moments are stored in the parameter dtype.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros = |p: &ParamSet<T>| (0..p.len()).map(|i| Tensor::zeros(p.get(i).shape().to_vec())).collect();
        Self { lr, beta1, beta2, eps: 1e-8, step: 0, m: zeros(params), v: zeros(params) }
    }

    /// Updates `params` in place from per-parameter gradients; `None` counts as zero.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &[Option<&Tensor<T>>]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one, eps) = (T::one(), T::of(self.eps));
        let step_size = T::of(self.lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else {
                // no gradient reached this parameter: with beta1 = 0 only the second moment changes
                if self.beta1 == 0.0 {
                    let v: Vec<T> = self.v[i].data().iter().map(|v| *v * b2).collect();
                    self.v[i] = Tensor::new(self.v[i].shape().to_vec(), v)?;
                    continue;
                }
                let zero = Tensor::zeros(params.get(i).shape().to_vec());
                self.apply(params, i, &zero, b1, b2, one, eps, step_size, inv_bc2)?;
                continue;
            };
            self.apply(params, i, g, b1, b2, one, eps, step_size, inv_bc2)?;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn apply(
        &mut self,
        params: &mut ParamSet<T>,
        i: usize,
        g: &Tensor<T>,
        b1: T,
        b2: T,
        one: T,
        eps: T,
        step_size: T,
        inv_bc2: T,
    ) -> Result<()> {
        let p = params.get(i);
        let n = p.numel();
        let mut m = self.m[i].to_vec();
        let mut v = self.v[i].to_vec();
        let mut out = p.to_vec();
        let gd = g.data();
        for j in 0..n {
            m[j] = b1 * m[j] + (one - b1) * gd[j];
            v[j] = b2 * v[j] + (one - b2) * gd[j] * gd[j];
            out[j] -= step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
        }
        let shape = p.shape().to_vec();
        self.m[i] = Tensor::new(shape.clone(), m)?;
        self.v[i] = Tensor::new(shape.clone(), v)?;
        params.set(i, Tensor::new(shape, out)?)
    }

    /// Gathers gradients for bound parameter vars and applies one step.
    pub fn step_vars(&mut self, params: &mut ParamSet<T>, vars: &[Var<'_, T>], grads: &Gradients<T>) -> Result<()> {
        let g: Vec<Option<&Tensor<T>>> = vars.iter().map(|v| grads.get(v)).collect();
        self.update(params, &g)
    }
}
