//! Finite-difference checks of every differentiable op and loss at small
//! random shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{power_iteration, spectral_normalize_var};
use crate::objectives::{
    adv_loss_d, adv_loss_g, cosine_distance_rows, recon_bce, recon_mse, stage2_regularizer, triplet_loss,
};
use crate::tensor::gradcheck::{grad_check, DEFAULT_STEP};
use crate::tensor::{BatchNormState, NormMode, Reduce, Tape, Tensor, TensorError, Var, BN_EPS};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub name: &'static str,
    pub max_rel_error: f64,
}

impl GradRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

type Loss<'t> = std::result::Result<Var<'t, f64>, TensorError>;

fn lift<'t>(r: Result<Var<'t, f64>>) -> Loss<'t> {
    r.map_err(|e| match e {
        Error::Tensor(t) => t,
        other => TensorError::InvalidArgument { op: "loss", reason: other.to_string() },
    })
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| self.0.random_range(lo..hi))
    }

    /// Entries in `[-1, 1]` at least `gap` away from zero, keeping
    /// finite differences off the kinks.
    fn away(&mut self, shape: &[usize], gap: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            let m = self.0.random_range(gap..1.0);
            if self.0.random::<bool>() {
                m
            } else {
                -m
            }
        })
    }
}

/// `Σ y ⊙ w` for a fixed random `w`, so every output coordinate gets a
/// distinct weight.
fn probe<'t>(y: Var<'t, f64>, seed: u64) -> Loss<'t> {
    let mut g = Gen(ChaCha8Rng::seed_from_u64(seed));
    let w = g.uniform(&y.shape(), -1.0, 1.0);
    y.mul(y.tape().constant(w))?.sum_all()
}

macro_rules! check {
    ($rows:ident, $name:expr, [$($p:expr),+], |$v:ident| $body:expr) => {{
        let params = vec![$($p),+];
        let err = grad_check(|_t: &Tape<f64>, $v: &[Var<'_, f64>]| $body, &params, DEFAULT_STEP)?;
        $rows.push(GradRow { name: $name, max_rel_error: err });
    }};
}

/// Runs every check; deterministic in `seed`.
pub fn run_suite(seed: u64) -> Result<Vec<GradRow>> {
    let mut g = Gen(ChaCha8Rng::seed_from_u64(seed));
    let mut rows = Vec::new();
    let x = g.away(&[3, 4], 0.05);

    check!(rows, "neg", [x.clone()], |v| probe(v[0].neg()?, 1));
    check!(rows, "relu", [x.clone()], |v| probe(v[0].relu()?, 1));
    check!(rows, "leaky_relu", [x.clone()], |v| probe(v[0].leaky_relu(0.1)?, 1));
    check!(rows, "tanh", [x.clone()], |v| probe(v[0].tanh()?, 1));
    check!(rows, "sigmoid", [x.clone()], |v| probe(v[0].sigmoid()?, 1));
    check!(rows, "square", [x.clone()], |v| probe(v[0].square()?, 1));
    check!(rows, "max_scalar", [x.clone()], |v| probe(v[0].max_scalar(0.02)?, 1));
    check!(rows, "sqrt", [g.uniform(&[3, 4], 0.2, 2.0)], |v| probe(v[0].sqrt()?, 1));
    check!(rows, "softplus", [g.uniform(&[3, 4], -4.0, 4.0)], |v| probe(v[0].softplus()?, 1));
    check!(rows, "scale", [x.clone()], |v| probe(v[0].scale(-1.7)?, 1));
    check!(rows, "add_scalar", [x.clone()], |v| probe(v[0].add_scalar(0.3)?, 1));

    let y = g.uniform(&[3, 4], -1.0, 1.0);
    let pos = g.uniform(&[3, 4], 0.5, 2.0);
    let one = g.uniform(&[1], 0.5, 2.0);
    check!(rows, "add", [x.clone(), y.clone()], |v| probe(v[0].add(v[1])?, 2));
    check!(rows, "sub", [x.clone(), y.clone()], |v| probe(v[0].sub(v[1])?, 2));
    check!(rows, "mul", [x.clone(), y.clone()], |v| probe(v[0].mul(v[1])?, 2));
    check!(rows, "div", [x.clone(), pos.clone()], |v| probe(v[0].div(v[1])?, 2));
    check!(rows, "mul_broadcast", [x.clone(), one.clone()], |v| probe(v[0].mul(v[1])?, 2));
    check!(rows, "div_broadcast", [x.clone(), one], |v| probe(v[0].div(v[1])?, 2));
    check!(rows, "matmul", [x.clone(), g.uniform(&[4, 5], -1.0, 1.0)], |v| probe(v[0].matmul(v[1])?, 3));

    check!(rows, "reshape", [x.clone()], |v| probe(v[0].reshape(&[2, 6])?, 4));
    check!(rows, "reduce_sum", [x.clone()], |v| probe(v[0].reduce(Reduce::Sum, &[1])?, 4));
    check!(rows, "reduce_mean", [x.clone()], |v| probe(v[0].reduce(Reduce::Mean, &[0])?, 4));
    check!(rows, "reduce_max", [x.clone()], |v| probe(v[0].reduce(Reduce::Max, &[1])?, 4));
    check!(rows, "reduce_min", [x.clone()], |v| probe(v[0].reduce(Reduce::Min, &[0])?, 4));
    check!(rows, "sum_all", [x.clone()], |v| v[0].square()?.sum_all());
    check!(rows, "mean_all", [x.clone()], |v| v[0].square()?.mean_all());
    check!(rows, "gather_rows", [x.clone()], |v| probe(v[0].gather_rows(&[2, 0, 2, 1])?, 5));
    check!(rows, "slice_rows", [x.clone()], |v| probe(v[0].slice_rows(1, 3)?, 5));
    check!(rows, "concat_rows", [x.clone(), y.clone()], |v| probe(Var::concat_rows(&[v[0], v[1]])?, 5));

    let img = g.uniform(&[2, 3, 5, 5], -1.0, 1.0);
    let img_even = g.uniform(&[2, 3, 6, 6], -1.0, 1.0);
    let k = g.uniform(&[4, 3, 3, 3], -0.5, 0.5);
    let k4 = g.uniform(&[4, 3, 4, 4], -0.5, 0.5);
    let kt = g.uniform(&[3, 2, 4, 4], -0.5, 0.5);
    let nhwc = g.uniform(&[2, 6, 6, 3], -1.0, 1.0);
    check!(rows, "channels_last", [img.clone()], |v| probe(v[0].channels_last()?, 6));
    check!(rows, "channels_first", [nhwc.clone()], |v| probe(v[0].channels_first()?, 6));
    check!(rows, "conv2d", [img.clone(), k.clone()], |v| probe(v[0].conv2d(v[1], 1, 1)?, 6));
    check!(rows, "conv2d_strided", [img_even.clone(), k4.clone()], |v| probe(v[0].conv2d(v[1], 2, 1)?, 6));
    check!(rows, "conv2d_nhwc", [nhwc.clone(), k4.clone()], |v| probe(v[0].conv2d_nhwc(v[1], 2, 1)?, 6));
    check!(rows, "conv2d_transpose", [g.uniform(&[2, 3, 3, 3], -1.0, 1.0), kt.clone()], |v| {
        probe(v[0].conv2d_transpose(v[1], 2, 1)?, 6)
    });
    check!(rows, "conv2d_transpose_nhwc", [g.uniform(&[2, 3, 3, 3], -1.0, 1.0), kt], |v| {
        probe(v[0].conv2d_transpose_nhwc(v[1], 2, 1)?, 6)
    });

    let gamma = g.uniform(&[3], 0.5, 1.5);
    let beta = g.uniform(&[3], -0.5, 0.5);
    let mut eval_state = BatchNormState::new(3);
    eval_state.running_mean = g.uniform(&[3], -0.3, 0.3);
    eval_state.running_var = g.uniform(&[3], 0.5, 1.5);
    check!(rows, "batch_norm_train", [img.clone(), gamma.clone(), beta.clone()], |v| {
        let mut s = BatchNormState::new(3);
        probe(v[0].batch_norm(v[1], v[2], BN_EPS, NormMode::Train, &mut s)?, 7)
    });
    check!(rows, "batch_norm_eval", [img.clone(), gamma.clone(), beta.clone()], |v| {
        let mut s = eval_state.clone();
        probe(v[0].batch_norm(v[1], v[2], BN_EPS, NormMode::Eval, &mut s)?, 7)
    });
    check!(rows, "normalize_last_train", [nhwc.clone()], |v| {
        let mut s = BatchNormState::new(3);
        probe(v[0].normalize_last(BN_EPS, NormMode::Train, &mut s)?, 7)
    });
    check!(rows, "channel_affine", [img.clone(), gamma.clone(), beta.clone()], |v| {
        probe(v[0].channel_affine(v[1], v[2])?, 7)
    });
    check!(rows, "channel_affine_last", [nhwc, g.uniform(&[2, 3], 0.5, 1.5), g.uniform(&[2, 3], -0.5, 0.5)], |v| {
        probe(v[0].channel_affine_last(v[1], v[2])?, 7)
    });

    // With a converged left vector the held-constant u, v are exact.
    let w = g.uniform(&[4, 3, 2, 2], -1.0, 1.0);
    let mut u = vec![1.0; 4];
    power_iteration(w.data(), 4, 12, &mut u, 500)?;
    check!(rows, "spectral_normalize", [w], |v| {
        let mut u = u.clone();
        lift(spectral_normalize_var(v[0], &mut u, 0)).and_then(|y| probe(y, 8))
    });

    // Scores straddle the hinge points ±1 without touching them.
    let real = g.away(&[6], 0.05).map(|s| 1.0 + s);
    let fake = g.away(&[6], 0.05).map(|s| s - 1.0);
    check!(rows, "adv_loss_d", [real.clone(), fake.clone()], |v| lift(adv_loss_d(v[0], v[1])));
    check!(rows, "adv_loss_g", [fake], |v| lift(adv_loss_g(v[0])));
    let z_hat = g.uniform(&[4, 5], -2.0, 2.0);
    let z = g.uniform(&[4, 5], -1.0, 1.0);
    check!(rows, "recon_mse", [z_hat.clone(), z.clone()], |v| lift(recon_mse(v[0], v[1])));
    let code = z.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
    check!(rows, "recon_bce", [z_hat.clone()], |v| lift(recon_bce(v[0], v[0].tape().constant(code.clone()))));
    check!(rows, "cosine_distance", [z_hat.clone(), z.clone()], |v| {
        lift(cosine_distance_rows(v[0], v[1])).and_then(|d| probe(d, 9))
    });
    check!(rows, "stage2_regularizer", [z_hat, z], |v| lift(stage2_regularizer(v[0], v[1])));
    let anchors = g.uniform(&[3, 6], -1.0, 1.0);
    let positives = g.uniform(&[12, 6], -1.0, 1.0);
    let negatives = g.uniform(&[6, 6], -1.0, 1.0);
    check!(rows, "triplet_loss", [anchors, positives, negatives], |v| {
        lift(triplet_loss(v[0], v[1], v[2], 2.0))
    });
    Ok(rows)
}
