use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adam_update, HyperParams, Moments};
use crate::data::{concat_batches, ImageSet};
use crate::error::{Error, Result};
use crate::masking::{make_grid, triplet_batch, MaskGrid};
use crate::nn::{init_params, DiscriminatorNet, FrozenDiscriminator, GeneratorNet, NetConfig, RF_HEAD_PREFIX};
use crate::objectives::{
    adv_loss_d, adv_loss_g, recon_bce, recon_mse, stage2_regularizer, total_stage1_d, total_stage1_g,
    total_stage2_d, triplet_loss, LossParts, ReconKind, TripletKind,
};
use crate::tensor::{NormMode, Scalar, Tape, Tensor, Var};

/// Stream of the training rng; parameter initialisation uses stream 0 of
/// the same seed.
const TRAIN_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    /// Completed first-stage iterations (adversarial, or triplet-only).
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub g_steps: u64,
    pub d_steps: u64,
    /// `d_steps` when the latest G step ran.
    pub d_steps_at_last_g: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    /// Global iteration index, counting from 1 across both stages.
    pub iter: usize,
    pub stage: u8,
    pub loss_g_adv: Option<f64>,
    pub loss_d_adv: Option<f64>,
    pub loss_recon: Option<f64>,
    pub loss_triplet: Option<f64>,
    pub loss_reg: Option<f64>,
    /// The discriminator's objective of the iteration.
    pub total: f64,
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState<T: Scalar> {
    pub net: NetConfig,
    pub hp: HyperParams,
    pub g: GeneratorNet<T>,
    pub d: DiscriminatorNet<T>,
    pub g_moments: Vec<Moments<T>>,
    pub d_moments: Vec<Moments<T>>,
    pub counters: Counters,
    /// Discriminator at the end of stage 1, set when stage 2 begins.
    pub d1: Option<FrozenDiscriminator<T>>,
    pub rng: ChaCha8Rng,
    grid: MaskGrid,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn scalar<T: Scalar>(v: &Option<Var<'_, T>>) -> Option<f64> {
    v.as_ref().map(|v| v.item().as_f64())
}

impl<T: Scalar> TrainState<T> {
    pub fn new(net: NetConfig, hp: HyperParams) -> Result<Self> {
        net.validate()?;
        hp.validate(&net)?;
        let (g, mut d) = init_params(&net, hp.seed)?;
        d.set_sn_iters(hp.sn_iters);
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        rng.set_stream(TRAIN_STREAM);
        Self::assemble(net, hp, g, d, rng)
    }

    pub(crate) fn assemble(
        net: NetConfig,
        hp: HyperParams,
        g: GeneratorNet<T>,
        d: DiscriminatorNet<T>,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        let grid = make_grid(net.image_size, hp.patch_size, hp.negative_mode)?;
        Ok(Self {
            g_moments: Moments::for_params(g.params()),
            d_moments: Moments::for_params(d.params()),
            net,
            hp,
            g,
            d,
            counters: Counters::default(),
            d1: None,
            rng,
            grid,
        })
    }

    pub fn grid(&self) -> &MaskGrid {
        &self.grid
    }

    fn check_data(&self, data: &ImageSet<T>) -> Result<()> {
        let want = [self.net.channels, self.net.image_size, self.net.image_size];
        if data.image_shape() != want {
            return Err(Error::InvalidInput(format!(
                "images are {:?}, network expects {want:?}",
                data.image_shape()
            )));
        }
        Ok(())
    }

    fn recon<'t>(&self, z_hat: Var<'t, T>, z: Var<'t, T>) -> Result<Option<Var<'t, T>>> {
        match self.hp.losses.recon_kind {
            ReconKind::None => Ok(None),
            ReconKind::Mse => recon_mse(z_hat, z).map(Some),
            ReconKind::Bce => recon_bce(z_hat, z).map(Some),
        }
    }

    /// Splits encodings of `[anchors; positives; negatives]` laid out as by
    /// `triplet_batch` and applies the triplet loss.
    fn triplet_from<'t>(&self, enc: Var<'t, T>, start: usize, anchors: usize) -> Result<Var<'t, T>> {
        let pos_end = start + anchors + anchors * 4;
        let end = pos_end + anchors * self.grid.negative_cells.len();
        triplet_loss(
            enc.slice_rows(start, start + anchors)?,
            enc.slice_rows(start + anchors, pos_end)?,
            enc.slice_rows(pos_end, end)?,
            self.hp.losses.rho,
        )
    }

    /// `[anchors; positives; negatives]` for `n` random training images.
    fn triplet_images(&mut self, data: &ImageSet<T>, n: usize) -> Result<Tensor<T>> {
        let anchors = data.sample_batch(n, &mut self.rng)?;
        let (pos, neg) = triplet_batch(&anchors, &self.grid)?;
        concat_batches(&[&anchors, &pos, &neg])
    }

    /// One adversarial iteration: a generator step followed by `t_inner`
    /// discriminator steps, each on fresh latent codes.
    pub fn stage1_iteration(&mut self, data: &ImageSet<T>) -> Result<LossReport> {
        self.check_data(data)?;
        let b = self.hp.batch_stage1;
        let losses = self.hp.losses.clone();

        // Generator step with D as a constant.
        let g_adv = {
            let z = self.hp.prior.sample::<T>(b, &mut self.rng)?;
            let tape = Tape::new();
            let gb = self.g.bind(&tape, true);
            let db = self.d.bind_all(&tape, false);
            let zv = tape.constant(z);
            let fake = self.g.forward(&gb, zv, NormMode::Train)?;
            let out = self.d.forward(&db, fake, NormMode::Train)?;
            let parts = LossParts {
                adv: Some(adv_loss_g(out.score)?),
                recon: self.recon(out.encoding, zv)?,
                ..Default::default()
            };
            let total = total_stage1_g(&parts, &losses)?;
            tape.backward(total)?;
            adam_update(self.g.params_mut(), &gb.grads(), &mut self.g_moments, &self.hp.adam)?;
            self.counters.g_steps += 1;
            self.counters.d_steps_at_last_g = self.counters.d_steps;
            scalar(&parts.adv)
        };

        let (mut adv, mut rec, mut tri, mut tot) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let single_stage = losses.triplet_kind == TripletKind::SingleStage;
        for _ in 0..self.hp.t_inner {
            let real = data.sample_batch(b, &mut self.rng)?;
            let z = self.hp.prior.sample::<T>(b, &mut self.rng)?;
            let fake = self.g.generate(&z, NormMode::Train)?;
            let mut parts_in = vec![&real, &fake];
            let extra = if single_stage {
                Some(self.triplet_images(data, self.hp.batch_stage2)?)
            } else {
                None
            };
            if let Some(e) = &extra {
                parts_in.push(e);
            }
            let x = concat_batches(&parts_in)?;

            let tape = Tape::new();
            let db = self.d.bind_all(&tape, true);
            let out = self.d.forward(&db, tape.constant(x), NormMode::Train)?;
            let parts = LossParts {
                adv: Some(adv_loss_d(out.score.slice_rows(0, b)?, out.score.slice_rows(b, 2 * b)?)?),
                recon: self.recon(out.encoding.slice_rows(b, 2 * b)?, tape.constant(z))?,
                triplet: if single_stage {
                    Some(self.triplet_from(out.encoding, 2 * b, self.hp.batch_stage2)?)
                } else {
                    None
                },
                reg: None,
            };
            let total = total_stage1_d(&parts, &losses)?;
            tape.backward(total)?;
            adam_update(self.d.params_mut(), &db.grads(), &mut self.d_moments, &self.hp.adam)?;
            self.counters.d_steps += 1;
            adv.extend(scalar(&parts.adv));
            rec.extend(scalar(&parts.recon));
            tri.extend(scalar(&parts.triplet));
            tot.push(total.item().as_f64());
        }
        self.counters.stage1_iters += 1;
        Ok(LossReport {
            iter: self.global_iter(),
            stage: 1,
            loss_g_adv: g_adv,
            loss_d_adv: mean(&adv),
            loss_recon: mean(&rec),
            loss_triplet: mean(&tri),
            loss_reg: None,
            total: mean(&tot).unwrap_or(0.0),
        })
    }

    /// Discriminator step on the triplet loss alone (no generator, no
    /// regulariser); the first stage of the triplet-only variant.
    pub fn triplet_only_iteration(&mut self, data: &ImageSet<T>) -> Result<LossReport> {
        self.check_data(data)?;
        let a = self.hp.batch_stage2;
        let x = self.triplet_images(data, a)?;
        let tape = Tape::new();
        let db = self.d.bind(&tape, |n| !n.starts_with(RF_HEAD_PREFIX));
        let out = self.d.forward(&db, tape.constant(x), NormMode::Train)?;
        let loss = self.triplet_from(out.encoding, 0, a)?;
        tape.backward(loss)?;
        adam_update(self.d.params_mut(), &db.grads(), &mut self.d_moments, &self.hp.adam)?;
        self.counters.d_steps += 1;
        self.counters.stage1_iters += 1;
        let v = loss.item().as_f64();
        Ok(LossReport {
            iter: self.global_iter(),
            stage: 1,
            loss_triplet: Some(v),
            total: v,
            ..Default::default()
        })
    }

    /// Freezes the current discriminator as the stage-2 reference. Called
    /// once, when stage 1 ends.
    pub fn begin_stage2(&mut self) {
        if self.d1.is_none() {
            self.d1 = Some(self.d.snapshot());
        }
    }

    /// Triplet step on the encoder with the real/fake head held fixed and
    /// the encodings pulled towards those of the stage-1 discriminator.
    pub fn stage2_iteration(&mut self, data: &ImageSet<T>) -> Result<LossReport> {
        self.check_data(data)?;
        let d1 = self.d1.clone().ok_or(Error::MissingSnapshot)?;
        let a = self.hp.batch_stage2;
        let x = self.triplet_images(data, a)?;
        let anchors = Tensor::new(
            {
                let mut s = x.shape().to_vec();
                s[0] = a;
                s
            },
            x.data()[..x.numel() / x.shape()[0] * a].to_vec(),
        )?;
        // Same spectral-norm update rule as the live pass, so the two agree
        // exactly before the first step.
        let frozen = {
            let tape = Tape::new();
            let bound = d1.net().bind_all(&tape, false);
            let out = d1.net().forward_frozen(&bound, tape.constant(anchors), NormMode::Train)?;
            Tensor::clone(&out.encoding.value())
        };
        let tape = Tape::new();
        let db = self.d.bind(&tape, |n| !n.starts_with(RF_HEAD_PREFIX));
        let out = self.d.forward(&db, tape.constant(x), NormMode::Train)?;
        let parts = LossParts {
            triplet: Some(self.triplet_from(out.encoding, 0, a)?),
            reg: Some(stage2_regularizer(out.encoding.slice_rows(0, a)?, tape.constant(frozen))?),
            ..Default::default()
        };
        let total = total_stage2_d(&parts, &self.hp.losses)?;
        tape.backward(total)?;
        adam_update(self.d.params_mut(), &db.grads(), &mut self.d_moments, &self.hp.adam)?;
        self.counters.d_steps += 1;
        self.counters.stage2_iters += 1;
        Ok(LossReport {
            iter: self.global_iter(),
            stage: 2,
            loss_triplet: scalar(&parts.triplet),
            loss_reg: scalar(&parts.reg),
            total: total.item().as_f64(),
            ..Default::default()
        })
    }

    pub fn global_iter(&self) -> usize {
        self.counters.stage1_iters + self.counters.stage2_iters
    }

    /// Whether the configured schedule has completed.
    pub fn finished(&self) -> bool {
        let c = &self.counters;
        c.stage1_iters >= self.hp.t1 && (!self.hp.two_stage() || c.stage2_iters >= self.hp.t2)
    }

    /// Runs whichever iteration comes next in the schedule; `None` once
    /// finished.
    pub fn next_iteration(&mut self, data: &ImageSet<T>) -> Result<Option<LossReport>> {
        if self.counters.stage1_iters < self.hp.t1 {
            let r = if self.hp.gan {
                self.stage1_iteration(data)?
            } else {
                self.triplet_only_iteration(data)?
            };
            return Ok(Some(r));
        }
        if self.hp.two_stage() && self.counters.stage2_iters < self.hp.t2 {
            self.begin_stage2();
            return self.stage2_iteration(data).map(Some);
        }
        Ok(None)
    }
}
