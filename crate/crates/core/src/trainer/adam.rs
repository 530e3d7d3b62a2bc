use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments of one parameter tensor and the number of
/// updates it has received (for bias correction).
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
        }
    }

    /// Zeroed moments mirroring every tensor of `params`.
    pub fn for_params(params: &ParamStore<T>) -> Vec<Self> {
        params.iter().map(|(_, t)| Self::zeros(t.shape())).collect()
    }
}

/// One bias-corrected Adam step on `param`.
pub fn adam_step<T: Scalar>(param: &mut Tensor<T>, grad: &Tensor<T>, mom: &mut Moments<T>, cfg: &AdamConfig) -> Result<()> {
    if grad.shape() != param.shape() || mom.m.shape() != param.shape() || mom.v.shape() != param.shape() {
        return Err(Error::InvalidInput(format!(
            "adam: parameter {:?}, gradient {:?}, moments {:?}",
            param.shape(),
            grad.shape(),
            mom.m.shape()
        )));
    }
    if !grad.is_finite() {
        return Err(Error::InvalidInput("adam: non-finite gradient".into()));
    }
    mom.step += 1;
    let t = mom.step as f64;
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    // lr·m̂/(√v̂+ε) = (lr/bc1)·m / (√v/√bc2 + ε)
    let step = T::from_f64(cfg.lr / (1.0 - cfg.beta1.powf(t)));
    let inv_sqrt_bc2 = T::from_f64(1.0 / (1.0 - cfg.beta2.powf(t)).sqrt());
    let eps = T::from_f64(cfg.eps);
    let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + c1 * g;
        *v = b2 * *v + c2 * g * g;
        *p = *p - step * *m / (v.sqrt() * inv_sqrt_bc2 + eps);
    }
    Ok(())
}

/// Adam over a whole store. Parameters whose gradient is `None` keep both
/// their values and their moments.
pub fn adam_update<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    moments: &mut [Moments<T>],
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || moments.len() != params.len() {
        return Err(Error::InvalidInput(format!(
            "adam: {} parameters, {} gradients, {} moment pairs",
            params.len(),
            grads.len(),
            moments.len()
        )));
    }
    for (((_, p), g), mom) in params.iter_mut().zip(grads).zip(moments.iter_mut()) {
        if let Some(g) = g {
            adam_step(p, g, mom, cfg)?;
        }
    }
    Ok(())
}
