//! Losses and the encoding distance.
//!
//! Every loss takes and returns tape variables so it can be back-propagated;
//! all of them average over the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Reduce, Scalar, Var};
use crate::trainer::PriorKind;

/// Smallest vector norm accepted by the cosine distance.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconKind {
    Mse,
    Bce,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletKind {
    /// Stage 2 after the adversarial stage.
    TwoStage,
    /// Folded into the discriminator's stage-1 loss with weight `gamma`.
    SingleStage,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Generator reconstruction weight.
    pub beta: f64,
    /// Discriminator reconstruction (and single-stage triplet) weight.
    pub gamma: f64,
    /// Stage-2 deviation weight.
    pub lambda: f64,
    /// Triplet margin.
    pub rho: f64,
    pub recon_kind: ReconKind,
    pub triplet_kind: TripletKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            gamma: 1.0,
            lambda: 0.2,
            rho: 0.5,
            recon_kind: ReconKind::Bce,
            triplet_kind: TripletKind::TwoStage,
        }
    }
}

impl LossConfig {
    /// Checks the weights and the reconstruction/prior pairing: BCE needs
    /// binary codes, MSE needs continuous ones.
    pub fn validate(&self, prior: PriorKind) -> Result<()> {
        for (field, v) in [("beta", self.beta), ("gamma", self.gamma), ("lambda", self.lambda), ("rho", self.rho)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, format!("{v} must be finite and >= 0")));
            }
        }
        match (self.recon_kind, prior) {
            (ReconKind::Bce, PriorKind::Bernoulli) | (ReconKind::None, _) => Ok(()),
            (ReconKind::Mse, PriorKind::Uniform | PriorKind::Gaussian) => Ok(()),
            (kind, prior) => Err(Error::config(
                "recon_kind",
                format!("{kind:?} reconstruction does not pair with a {prior:?} prior"),
            )),
        }
    }
}

fn non_empty<T: Scalar>(op: &str, x: &Var<'_, T>) -> Result<()> {
    if x.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::InvalidInput(format!("{op}: empty batch")));
    }
    Ok(())
}

fn same_shape<T: Scalar>(op: &str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidInput(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// Hinge loss of the discriminator:
/// `mean(max(0, 1 − real)) + mean(max(0, 1 + fake))`.
pub fn adv_loss_d<'t, T: Scalar>(real: Var<'t, T>, fake: Var<'t, T>) -> Result<Var<'t, T>> {
    non_empty("adv_loss_d", &real)?;
    non_empty("adv_loss_d", &fake)?;
    let r = real.neg()?.add_scalar(1.0)?.relu()?.mean_all()?;
    let f = fake.add_scalar(1.0)?.relu()?.mean_all()?;
    Ok(r.add(f)?)
}

/// Generator hinge loss: `−mean(fake)`.
pub fn adv_loss_g<'t, T: Scalar>(fake: Var<'t, T>) -> Result<Var<'t, T>> {
    non_empty("adv_loss_g", &fake)?;
    Ok(fake.mean_all()?.neg()?)
}

/// Squared error summed over the code, averaged over the batch.
pub fn recon_mse<'t, T: Scalar>(z_hat: Var<'t, T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
    sq_distance_mean("recon_mse", z_hat, z)
}

/// Binary cross-entropy between `sigmoid(z_hat)` and the ±1 code `z`
/// mapped to `{0, 1}`, averaged over code entries and the batch. Uses
/// `softplus(ẑ) − t·ẑ`, which never evaluates `log(0)`.
pub fn recon_bce<'t, T: Scalar>(z_hat: Var<'t, T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape("recon_bce", &z_hat, &z)?;
    non_empty("recon_bce", &z)?;
    let code = z.value();
    if let Some(bad) = code.data().iter().find(|v| ((v.as_f64()).abs() - 1.0).abs() > 1e-6) {
        return Err(Error::InvalidInput(format!("recon_bce: code entry {bad:?} is not ±1")));
    }
    let targets = z.tape().constant(code.map(|v| T::from_f64(0.5) * (T::one() + v)));
    Ok(z_hat.softplus()?.sub(targets.mul(z_hat)?)?.mean_all()?)
}

/// `‖live − frozen‖²` per row, averaged over rows. The caller applies the
/// weight.
pub fn stage2_regularizer<'t, T: Scalar>(live: Var<'t, T>, frozen: Var<'t, T>) -> Result<Var<'t, T>> {
    sq_distance_mean("stage2_regularizer", live, frozen)
}

fn sq_distance_mean<'t, T: Scalar>(op: &str, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape(op, &a, &b)?;
    non_empty(op, &a)?;
    if a.shape().len() != 2 {
        return Err(Error::InvalidInput(format!("{op}: expected [B×d], got {:?}", a.shape())));
    }
    Ok(a.sub(b)?.square()?.reduce(Reduce::Sum, &[1])?.mean_all()?)
}

/// `1 − aᵀb / (‖a‖‖b‖)` for plain vectors, in 64-bit.
pub fn cosine_distance<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!("cosine_distance: lengths {} and {}", a.len(), b.len())));
    }
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let (na, nb) = (aa.sqrt(), bb.sqrt());
    if !(na > MIN_NORM && nb > MIN_NORM) {
        return Err(Error::InvalidInput("cosine_distance: zero vector".into()));
    }
    Ok(1.0 - ab / (na * nb))
}

/// Row-wise cosine distance of two `[N×d]` variables, giving `[N]`.
pub fn cosine_distance_rows<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape("cosine_distance", &a, &b)?;
    let norm = |v: Var<'t, T>| -> Result<Var<'t, T>> {
        let n = v.square()?.reduce(Reduce::Sum, &[1])?.sqrt()?;
        if n.value().data().iter().any(|x| !(x.as_f64() > MIN_NORM)) {
            return Err(Error::InvalidInput("cosine_distance: zero vector".into()));
        }
        Ok(n)
    };
    let dot = a.mul(b)?.reduce(Reduce::Sum, &[1])?;
    let cos = dot.div(norm(a)?.mul(norm(b)?)?)?;
    Ok(cos.neg()?.add_scalar(1.0)?)
}

/// Hardest-pair triplet loss
/// `max(0, max_i Δ(a, p_i) − min_j Δ(a, n_j) + rho)`, averaged over anchors.
///
/// `anchors` is `[A×d]`, `positives` `[A·P×d]` and `negatives` `[A·N×d]`,
/// grouped by anchor.
pub fn triplet_loss<'t, T: Scalar>(
    anchors: Var<'t, T>,
    positives: Var<'t, T>,
    negatives: Var<'t, T>,
    rho: f64,
) -> Result<Var<'t, T>> {
    let a = anchors.shape();
    if a.len() != 2 || a[0] == 0 {
        return Err(Error::InvalidInput(format!("triplet_loss: anchors must be [A×d], got {a:?}")));
    }
    let per_anchor = |set: &Var<'t, T>, what: &str| -> Result<usize> {
        let s = set.shape();
        if s.len() != 2 || s[1] != a[1] || s[0] == 0 || s[0] % a[0] != 0 {
            return Err(Error::InvalidInput(format!("triplet_loss: {what} shape {s:?} does not fit anchors {a:?}")));
        }
        Ok(s[0] / a[0])
    };
    let p = per_anchor(&positives, "positives")?;
    let n = per_anchor(&negatives, "negatives")?;
    let spread = |k: usize| (0..a[0] * k).map(|i| i / k).collect::<Vec<_>>();
    let dp = cosine_distance_rows(anchors.gather_rows(&spread(p))?, positives)?
        .reshape(&[a[0], p])?
        .reduce(Reduce::Max, &[1])?;
    let dn = cosine_distance_rows(anchors.gather_rows(&spread(n))?, negatives)?
        .reshape(&[a[0], n])?
        .reduce(Reduce::Min, &[1])?;
    Ok(dp.sub(dn)?.add_scalar(rho)?.relu()?.mean_all()?)
}

/// Loss components of one step; absent terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossParts<'t, T: Scalar> {
    pub adv: Option<Var<'t, T>>,
    pub recon: Option<Var<'t, T>>,
    pub triplet: Option<Var<'t, T>>,
    pub reg: Option<Var<'t, T>>,
}

impl<'t, T: Scalar> Default for LossParts<'t, T> {
    fn default() -> Self {
        Self {
            adv: None,
            recon: None,
            triplet: None,
            reg: None,
        }
    }
}

fn need<'t, T: Scalar>(part: Option<Var<'t, T>>, name: &str) -> Result<Var<'t, T>> {
    part.ok_or_else(|| Error::InvalidInput(format!("loss composition needs the {name} term")))
}

fn weighted<'t, T: Scalar>(total: Var<'t, T>, part: Var<'t, T>, w: f64) -> Result<Var<'t, T>> {
    Ok(total.add(part.scale(w)?)?)
}

/// `adv + β·recon` (the reconstruction term only when enabled).
pub fn total_stage1_g<'t, T: Scalar>(parts: &LossParts<'t, T>, cfg: &LossConfig) -> Result<Var<'t, T>> {
    let total = need(parts.adv, "adversarial")?;
    match cfg.recon_kind {
        ReconKind::None => Ok(total),
        _ => weighted(total, need(parts.recon, "reconstruction")?, cfg.beta),
    }
}

/// `adv + γ·recon`, plus `γ·triplet` for single-stage training.
pub fn total_stage1_d<'t, T: Scalar>(parts: &LossParts<'t, T>, cfg: &LossConfig) -> Result<Var<'t, T>> {
    let mut total = need(parts.adv, "adversarial")?;
    if cfg.recon_kind != ReconKind::None {
        total = weighted(total, need(parts.recon, "reconstruction")?, cfg.gamma)?;
    }
    if cfg.triplet_kind == TripletKind::SingleStage {
        total = weighted(total, need(parts.triplet, "triplet")?, cfg.gamma)?;
    }
    Ok(total)
}

/// `triplet + λ·reg`.
pub fn total_stage2_d<'t, T: Scalar>(parts: &LossParts<'t, T>, cfg: &LossConfig) -> Result<Var<'t, T>> {
    weighted(need(parts.triplet, "triplet")?, need(parts.reg, "regularizer")?, cfg.lambda)
}

#[cfg(test)]
mod tests;
