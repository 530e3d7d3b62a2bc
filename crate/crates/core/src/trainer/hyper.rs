use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{AdamConfig, LatentPrior, PriorKind};
use crate::error::{Error, Result};
use crate::masking::NegativeMode;
use crate::nn::NetConfig;
use crate::objectives::{LossConfig, ReconKind, TripletKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Adversarial-stage iterations (one G update and `t_inner` D updates each).
    pub t1: usize,
    /// Triplet-stage iterations.
    pub t2: usize,
    /// D updates per G update.
    pub t_inner: usize,
    pub losses: LossConfig,
    pub adam: AdamConfig,
    pub batch_stage1: usize,
    /// Anchors per triplet-stage step.
    pub batch_stage2: usize,
    pub prior: LatentPrior,
    /// Adversarial training with a generator; off only for the triplet-only variant.
    pub gan: bool,
    pub patch_size: usize,
    pub negative_mode: NegativeMode,
    /// Power iterations per spectral-norm forward.
    pub sn_iters: usize,
    pub seed: u64,
}

impl HyperParams {
    /// Full-scale settings: 64×64 images, batch 128/32.
    pub fn full() -> Self {
        Self {
            t1: 50_000,
            t2: 10_000,
            t_inner: 3,
            losses: LossConfig::default(),
            adam: AdamConfig::default(),
            batch_stage1: 128,
            batch_stage2: 32,
            prior: LatentPrior::new(PriorKind::Bernoulli, 128),
            gan: true,
            patch_size: 16,
            negative_mode: NegativeMode::AllNonCorner,
            sn_iters: 1,
            seed: 0,
        }
    }

    /// Scaled-down settings for 32×32 images on a CPU.
    pub fn desk() -> Self {
        Self {
            t1: 3000,
            t2: 1000,
            batch_stage1: 64,
            patch_size: 8,
            ..Self::full()
        }
    }

    pub fn validate(&self, net: &NetConfig) -> Result<()> {
        if self.t_inner == 0 {
            return Err(Error::config("t_inner", "must be >= 1"));
        }
        if self.batch_stage1 < 2 || self.batch_stage2 < 2 {
            return Err(Error::config("batch", "batch sizes must be >= 2 for batch-norm statistics"));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return Err(Error::config("lr", format!("{} must be positive", a.lr)));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::config("adam", "betas must lie in [0, 1) and eps be positive"));
        }
        if self.prior.d != net.d {
            return Err(Error::config("prior", format!("latent length {} differs from network d {}", self.prior.d, net.d)));
        }
        if self.sn_iters == 0 {
            return Err(Error::config("sn_iters", "must be >= 1"));
        }
        self.losses.validate(self.prior.kind)
    }

    /// Applies a named variant's prior, loss and stage settings.
    pub fn with_preset(mut self, preset: Preset) -> Self {
        let (gan, prior, recon, triplet) = preset.parts();
        self.gan = gan;
        self.prior.kind = prior;
        self.losses.recon_kind = recon;
        self.losses.triplet_kind = triplet;
        self
    }

    pub fn two_stage(&self) -> bool {
        self.gan && self.losses.triplet_kind == TripletKind::TwoStage
    }
}

/// Ablation variants: `G` adversarial training, `c`/`d` uniform or
/// Bernoulli latent codes, `M`/`B` MSE or BCE code reconstruction, `T1`/`T2`
/// triplet loss in one combined stage or a second stage. `T` is the
/// discriminator trained on the triplet loss alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    T,
    Gc,
    Gd,
    GcM,
    GdB,
    GcT1,
    GdT1,
    GcMT1,
    GdBT1,
    GcT2,
    GdT2,
    GcMT2,
    GdBT2,
}

impl Preset {
    pub const ALL: [Preset; 13] = [
        Preset::T,
        Preset::Gc,
        Preset::Gd,
        Preset::GcM,
        Preset::GdB,
        Preset::GcT1,
        Preset::GdT1,
        Preset::GcMT1,
        Preset::GdBT1,
        Preset::GcT2,
        Preset::GdT2,
        Preset::GcMT2,
        Preset::GdBT2,
    ];

    /// `(gan, prior, reconstruction, triplet)`.
    fn parts(self) -> (bool, PriorKind, ReconKind, TripletKind) {
        use PriorKind::{Bernoulli as D, Uniform as C};
        use ReconKind::{Bce, Mse, None as NoRecon};
        use TripletKind::{None as NoTriplet, SingleStage, TwoStage};
        match self {
            Preset::T => (false, C, NoRecon, TwoStage),
            Preset::Gc => (true, C, NoRecon, NoTriplet),
            Preset::Gd => (true, D, NoRecon, NoTriplet),
            Preset::GcM => (true, C, Mse, NoTriplet),
            Preset::GdB => (true, D, Bce, NoTriplet),
            Preset::GcT1 => (true, C, NoRecon, SingleStage),
            Preset::GdT1 => (true, D, NoRecon, SingleStage),
            Preset::GcMT1 => (true, C, Mse, SingleStage),
            Preset::GdBT1 => (true, D, Bce, SingleStage),
            Preset::GcT2 => (true, C, NoRecon, TwoStage),
            Preset::GdT2 => (true, D, NoRecon, TwoStage),
            Preset::GcMT2 => (true, C, Mse, TwoStage),
            Preset::GdBT2 => (true, D, Bce, TwoStage),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config("preset", format!("unknown preset {s:?}")))
    }
}
