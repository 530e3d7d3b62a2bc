use serde::{Deserialize, Serialize};

use super::{BackwardFn, Result, Scalar, Tensor, TensorError, Var};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    Train,
    Eval,
}

/// Running per-channel statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.numel()
    }
}

/// `(batch, channels, rows)` of a channels-last `[B, ..., C]` tensor.
fn last_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(TensorError::InvalidShape {
            op,
            reason: format!("expected [B, ..., C], got {shape:?}"),
        });
    }
    let c = shape[shape.len() - 1];
    Ok((shape[0], c, shape.iter().product::<usize>() / c))
}

/// Per-channel sums of `f(x, j)` over the rows of `[N, C]`. Partial sums run
/// in `T` over short stripes of rows and are flushed into 64-bit totals.
fn column_sums<T: Scalar>(x: &[T], c: usize, f: impl Fn(T, usize) -> T) -> Vec<f64> {
    const STRIPE: usize = 32;
    let mut total = vec![0.0f64; c];
    let mut part = vec![T::zero(); c];
    for stripe in x.chunks(c * STRIPE) {
        part.iter_mut().for_each(|p| *p = T::zero());
        for row in stripe.chunks_exact(c) {
            for (j, (p, &v)) in part.iter_mut().zip(row).enumerate() {
                *p = *p + f(v, j);
            }
        }
        for (t, p) in total.iter_mut().zip(&part) {
            *t += p.as_f64();
        }
    }
    total
}

/// Per-channel sums of `a·b` (and of `a` alone) over two `[N, C]` buffers.
fn column_sums_pair<T: Scalar>(a: &[T], b: &[T], c: usize) -> (Vec<f64>, Vec<f64>) {
    const STRIPE: usize = 32;
    let (mut sa, mut sab) = (vec![0.0f64; c], vec![0.0f64; c]);
    let (mut pa, mut pab) = (vec![T::zero(); c], vec![T::zero(); c]);
    for (ra, rb) in a.chunks(c * STRIPE).zip(b.chunks(c * STRIPE)) {
        pa.iter_mut().chain(pab.iter_mut()).for_each(|p| *p = T::zero());
        for (xa, xb) in ra.chunks_exact(c).zip(rb.chunks_exact(c)) {
            for j in 0..c {
                pa[j] = pa[j] + xa[j];
                pab[j] = pab[j] + xa[j] * xb[j];
            }
        }
        for j in 0..c {
            sa[j] += pa[j].as_f64();
            sab[j] += pab[j].as_f64();
        }
    }
    (sa, sab)
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Batch normalization of `[B, C, ...]` with per-channel affine
    /// `gamma`, `beta` of shape `[C]`.
    pub fn batch_norm(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        eps: f64,
        mode: NormMode,
        state: &mut BatchNormState<T>,
    ) -> Result<Var<'t, T>> {
        self.normalize(eps, mode, state)?.channel_affine(gamma, beta)
    }

    /// `[B, C, ...]` → `[B, S, C]` with the original shape, for reuse of the
    /// channels-last kernels.
    fn to_channels_last_3d(self, op: &'static str) -> Result<(Var<'t, T>, Vec<usize>)> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(TensorError::InvalidShape {
                op,
                reason: format!("expected [B, C, ...], got {shape:?}"),
            });
        }
        let (b, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        let v = self.reshape(&[b, c, s, 1])?.channels_last()?.reshape(&[b, s, c])?;
        Ok((v, shape))
    }

    fn from_channels_last_3d(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let [b, s, c]: [usize; 3] = self.shape().try_into().expect("rank 3");
        self.reshape(&[b, s, 1, c])?.channels_first()?.reshape(shape)
    }

    /// The normalization half of [`Var::batch_norm`] (no affine). In train
    /// mode the running statistics are updated with momentum [`BN_MOMENTUM`].
    pub fn normalize(self, eps: f64, mode: NormMode, state: &mut BatchNormState<T>) -> Result<Var<'t, T>> {
        let (v, shape) = self.to_channels_last_3d("batch_norm")?;
        v.normalize_last(eps, mode, state)?.from_channels_last_3d(&shape)
    }

    /// `y = x·gamma + beta` per channel of `[B, C, ...]`. The affine
    /// parameters are shared (`[C]`) or per sample (`[B, C]`).
    pub fn channel_affine(self, gamma: Var<'t, T>, beta: Var<'t, T>) -> Result<Var<'t, T>> {
        let (v, shape) = self.to_channels_last_3d("channel_affine")?;
        v.channel_affine_last(gamma, beta)?.from_channels_last_3d(&shape)
    }

    /// [`Var::normalize`] for channels-last `[B, ..., C]`.
    pub fn normalize_last(self, eps: f64, mode: NormMode, state: &mut BatchNormState<T>) -> Result<Var<'t, T>> {
        const OP: &str = "batch_norm";
        if eps <= 0.0 || !eps.is_finite() {
            return Err(TensorError::InvalidArgument {
                op: OP,
                reason: format!("eps must be positive, got {eps}"),
            });
        }
        let x = self.value();
        let (b, c, n) = last_layout(OP, x.shape())?;
        if state.channels() != c {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                left: x.shape().to_vec(),
                right: vec![state.channels()],
            });
        }
        let xd = x.data();
        let shape = x.shape().to_vec();
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            NormMode::Train => {
                if b < 2 {
                    return Err(TensorError::InvalidArgument {
                        op: OP,
                        reason: format!("train mode needs batch >= 2, got {b}"),
                    });
                }
                let mean: Vec<f64> = column_sums(xd, c, |v, _| v).iter().map(|s| s / n as f64).collect();
                let mt: Vec<T> = mean.iter().map(|&m| T::from_f64(m)).collect();
                let var: Vec<f64> = column_sums(xd, c, |v, j| (v - mt[j]) * (v - mt[j]))
                    .iter()
                    .map(|s| s / n as f64)
                    .collect();
                let rest = 1.0 - BN_MOMENTUM;
                for j in 0..c {
                    let rm = &mut state.running_mean.data_mut()[j];
                    *rm = T::from_f64(BN_MOMENTUM * rm.as_f64() + rest * mean[j]);
                    let rv = &mut state.running_var.data_mut()[j];
                    *rv = T::from_f64(BN_MOMENTUM * rv.as_f64() + rest * var[j]);
                }
                (mean, var)
            }
            NormMode::Eval => (
                state.running_mean.to_f64_vec(),
                state.running_var.to_f64_vec(),
            ),
        };
        let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64(m)).collect();
        let inv_std: Vec<T> = var.iter().map(|&v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
        let mut y = vec![T::zero(); xd.len()];
        for (yr, xr) in y.chunks_exact_mut(c).zip(xd.chunks_exact(c)) {
            for j in 0..c {
                yr[j] = (xr[j] - mean_t[j]) * inv_std[j];
            }
        }
        drop(x);
        let xhat = std::rc::Rc::new(Tensor::new(shape, y)?);
        let saved = std::rc::Rc::clone(&xhat);
        let backward: BackwardFn<T> = match mode {
            NormMode::Train => Box::new(move |g, _| {
                let (gd, hd) = (g.data(), saved.data());
                let (sum_g, sum_gh) = column_sums_pair(gd, hd, c);
                let mg: Vec<T> = sum_g.iter().map(|s| T::from_f64(s / n as f64)).collect();
                let mgh: Vec<T> = sum_gh.iter().map(|s| T::from_f64(s / n as f64)).collect();
                let mut dx = vec![T::zero(); gd.len()];
                for ((dr, gr), hr) in dx.chunks_exact_mut(c).zip(gd.chunks_exact(c)).zip(hd.chunks_exact(c)) {
                    for j in 0..c {
                        dr[j] = inv_std[j] * (gr[j] - mg[j] - hr[j] * mgh[j]);
                    }
                }
                vec![Some(Tensor::new(saved.shape().to_vec(), dx).expect("shape"))]
            }),
            NormMode::Eval => Box::new(move |g, _| {
                let mut dx = g.data().to_vec();
                for dr in dx.chunks_exact_mut(c) {
                    for j in 0..c {
                        dr[j] = dr[j] * inv_std[j];
                    }
                }
                vec![Some(Tensor::new(g.shape().to_vec(), dx).expect("shape"))]
            }),
        };
        self.tape.custom(OP, &[self], xhat, backward)
    }

    /// [`Var::channel_affine`] for channels-last `[B, ..., C]`.
    pub fn channel_affine_last(self, gamma: Var<'t, T>, beta: Var<'t, T>) -> Result<Var<'t, T>> {
        const OP: &str = "channel_affine";
        self.tape.check_owner(&gamma)?;
        self.tape.check_owner(&beta)?;
        let x = self.value();
        let gm = gamma.value();
        let bt = beta.value();
        let (b, c, n) = last_layout(OP, x.shape())?;
        let per_sample = if gm.shape() == [c] {
            false
        } else if gm.shape() == [b, c] {
            true
        } else {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                left: x.shape().to_vec(),
                right: gm.shape().to_vec(),
            });
        };
        if bt.shape() != gm.shape() {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                left: gm.shape().to_vec(),
                right: bt.shape().to_vec(),
            });
        }
        let rows_per_sample = n / b;
        // Parameter row used by data row `r`.
        let prow = move |r: usize| if per_sample { r / rows_per_sample } else { 0 };
        let xd = x.data();
        let mut y = vec![T::zero(); xd.len()];
        for (r, (yr, xr)) in y.chunks_exact_mut(c).zip(xd.chunks_exact(c)).enumerate() {
            let p = prow(r) * c;
            let (gr, br) = (&gm.data()[p..p + c], &bt.data()[p..p + c]);
            for j in 0..c {
                yr[j] = xr[j] * gr[j] + br[j];
            }
        }
        let value = Tensor::new(x.shape().to_vec(), y)?;
        let param_shape = gm.shape().to_vec();
        self.tape.custom(
            OP,
            &[self, gamma, beta],
            value,
            Box::new(move |g, needs| {
                let gd = g.data();
                let gx = needs[0].then(|| {
                    let mut dx = vec![T::zero(); gd.len()];
                    for (r, (dr, gr)) in dx.chunks_exact_mut(c).zip(gd.chunks_exact(c)).enumerate() {
                        let p = prow(r) * c;
                        let gmr = &gm.data()[p..p + c];
                        for j in 0..c {
                            dr[j] = gr[j] * gmr[j];
                        }
                    }
                    Tensor::new(x.shape().to_vec(), dx).expect("shape")
                });
                let mut dg = vec![T::zero(); gm.numel()];
                let mut db = vec![T::zero(); gm.numel()];
                if needs[1] || needs[2] {
                    for (r, (gr, xr)) in gd.chunks_exact(c).zip(x.data().chunks_exact(c)).enumerate() {
                        let p = prow(r) * c;
                        let (dgr, dbr) = (&mut dg[p..p + c], &mut db[p..p + c]);
                        for j in 0..c {
                            dgr[j] = dgr[j] + gr[j] * xr[j];
                            dbr[j] = dbr[j] + gr[j];
                        }
                    }
                }
                vec![
                    gx,
                    needs[1].then(|| Tensor::new(param_shape.clone(), dg).expect("shape")),
                    needs[2].then(|| Tensor::new(param_shape.clone(), db).expect("shape")),
                ]
            }),
        )
    }
}
