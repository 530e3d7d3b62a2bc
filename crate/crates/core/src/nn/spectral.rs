use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

/// Persistent left-singular-vector estimate for one weight.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralNormState<T> {
    /// Unit-norm vector of length `rows` of the 2-D weight view.
    pub u: Tensor<T>,
}

impl<T: Scalar> SpectralNormState<T> {
    pub fn random(rows: usize, rng: &mut ChaCha8Rng) -> Self {
        loop {
            let u = Tensor::from_fn(&[rows], |_| T::from_f64(rng.sample::<f64, _>(StandardNormal)));
            let n = u.l2_norm();
            if n > T::zero() {
                return Self { u: u.map(|v| v / n) };
            }
        }
    }
}

fn normalize_in_place<T: Scalar>(v: &mut [T]) -> Result<()> {
    let n = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if !(n > T::zero()) || !n.is_finite() {
        return Err(Error::ZeroSpectrum);
    }
    v.iter_mut().for_each(|x| *x = *x / n);
    Ok(())
}

fn mat_vec<T: Scalar>(w: &[T], rows: usize, cols: usize, v: &[T]) -> Vec<T> {
    (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(v).map(|(&a, &b)| a * b).sum())
        .collect()
}

fn mat_t_vec<T: Scalar>(w: &[T], rows: usize, cols: usize, u: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for r in 0..rows {
        let ur = u[r];
        for (o, &a) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o = *o + a * ur;
        }
    }
    out
}

/// Runs `iters` power-iteration steps on the `rows × cols` matrix `w`,
/// updating `u` in place. Returns the right vector `v` and the estimate
/// `σ̂ = uᵀ W v`. With `iters == 0`, `v` is derived from the current `u`.
pub fn power_iteration<T: Scalar>(w: &[T], rows: usize, cols: usize, u: &mut [T], iters: usize) -> Result<(Vec<T>, T)> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(u.len(), rows);
    let mut v = mat_t_vec(w, rows, cols, u);
    normalize_in_place(&mut v)?;
    for step in 0..iters {
        let mut nu = mat_vec(w, rows, cols, &v);
        normalize_in_place(&mut nu)?;
        u.copy_from_slice(&nu);
        if step + 1 < iters {
            v = mat_t_vec(w, rows, cols, u);
            normalize_in_place(&mut v)?;
        }
    }
    let wv = mat_vec(w, rows, cols, &v);
    let sigma: T = u.iter().zip(&wv).map(|(&a, &b)| a * b).sum();
    if !(sigma > T::zero()) {
        return Err(Error::ZeroSpectrum);
    }
    Ok((v, sigma))
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let rows = shape[0];
    (rows, shape[1..].iter().product::<usize>().max(1))
}

/// `w / σ̂(w)` with `w` viewed as `shape[0] × rest`; `state.u` persists
/// across calls.
pub fn spectral_normalize<T: Scalar>(w: &Tensor<T>, state: &mut SpectralNormState<T>, iters: usize) -> Result<(Tensor<T>, T)> {
    if iters == 0 {
        return Err(Error::InvalidInput("spectral_normalize needs iters >= 1".into()));
    }
    let (rows, cols) = rows_cols(w.shape());
    if state.u.numel() != rows {
        return Err(Error::InvalidInput(format!("u has {} entries, weight has {rows} rows", state.u.numel())));
    }
    let (_, sigma) = power_iteration(w.data(), rows, cols, state.u.data_mut(), iters)?;
    Ok((w.map(|x| x / sigma), sigma))
}

/// Differentiable `w / σ̂` where `σ̂ = uᵀ W v` is differentiated through `W`
/// with `u`, `v` held constant. `iters == 0` leaves `u` unchanged.
pub(crate) fn spectral_normalize_var<'t, T: Scalar>(
    w: Var<'t, T>,
    u: &mut [T],
    iters: usize,
) -> Result<Var<'t, T>> {
    let value = w.value();
    let shape = value.shape().to_vec();
    let (rows, cols) = rows_cols(&shape);
    let (v, _) = power_iteration(value.data(), rows, cols, u, iters)?;
    let tape = w.tape();
    let u_c = tape.constant(Tensor::new(vec![rows, 1], u.to_vec())?);
    let v_c = tape.constant(Tensor::new(vec![cols, 1], v)?);
    let sigma = w.reshape(&[rows, cols])?.matmul(v_c)?.mul(u_c)?.sum_all()?;
    Ok(w.div(sigma)?)
}
