//! Central-difference gradient checking in 64-bit.

use super::{Result, Tape, Tensor, TensorError, Var};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Max over all parameter coordinates of
/// `|analytic − numeric| / max(1, |numeric|)`.
///
/// `f` builds a scalar from variables bound to `params` (in order). It is
/// evaluated twice at the base point; differing results are rejected as
/// non-deterministic.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    grad_check_coords(f, params, h, usize::MAX)
}

/// Like [`grad_check`], probing at most `max_coords` evenly spaced
/// coordinates per parameter tensor (every coordinate when the tensor is
/// smaller).
pub fn grad_check_coords<F>(f: F, params: &[Tensor<f64>], h: f64, max_coords: usize) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    if !(h > 0.0) {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            reason: format!("step must be positive, got {h}"),
        });
    }
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_, f64>> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        tape.backward(loss)?;
        vars.iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect()
    };
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_, f64>> = values.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&tape, &vars)?;
        if out.shape().iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(out.shape()));
        }
        Ok(out.item())
    };
    let base = eval(params)?;
    if eval(params)?.to_bits() != base.to_bits() {
        return Err(TensorError::NonDeterministic);
    }

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let stride = n.div_ceil(max_coords.min(n).max(1));
        for i in (0..n).step_by(stride.max(1)) {
            let orig = p.data()[i];
            probe[pi].data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe[pi].data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (analytic[pi].data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
