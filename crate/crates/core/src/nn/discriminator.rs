use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::spectral::spectral_normalize_var;
use super::{he_normal, linear, Bound, NetConfig, ParamId, ParamStore, SpectralNormState};
use crate::error::{Error, Result};
use crate::tensor::{NormMode, Reduce, Scalar, Tape, Tensor, Var};

/// Parameter-name prefix of the real/fake head.
pub const RF_HEAD_PREFIX: &str = "d.rf.";

/// Both heads of the discriminator for one batch.
#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorOutput<'t, T: Scalar> {
    /// Real/fake score, `[B]`.
    pub score: Var<'t, T>,
    /// Raw encoding, `[B×d]`.
    pub encoding: Var<'t, T>,
}

/// Shared trunk of `blocks` × (spectrally normalized conv k4 s2 p1 →
/// leaky ReLU), global sum pooling, then two linear heads.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorNet<T> {
    config: NetConfig,
    params: ParamStore<T>,
    convs: Vec<ParamId>,
    rf_w: ParamId,
    rf_b: ParamId,
    enc_w: ParamId,
    enc_b: ParamId,
    sn: Vec<SpectralNormState<T>>,
    sn_iters: usize,
}

impl<T: Scalar> DiscriminatorNet<T> {
    pub(crate) fn init(config: &NetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut params = ParamStore::default();
        let mut convs = Vec::with_capacity(config.blocks);
        let mut sn = Vec::with_capacity(config.blocks);
        let mut cin = config.channels;
        for i in 0..config.blocks {
            let cout = config.d_channels(i);
            convs.push(params.push(format!("d.block{i}.w"), he_normal(&[cout, cin, 4, 4], cin * 16, rng)));
            sn.push(SpectralNormState::random(cout, rng));
            cin = cout;
        }
        let rf_w = params.push(format!("{RF_HEAD_PREFIX}w"), he_normal(&[cin, 1], cin, rng));
        let rf_b = params.push(format!("{RF_HEAD_PREFIX}b"), Tensor::zeros(&[1]));
        let enc_w = params.push("d.enc.w", he_normal(&[cin, config.d], cin, rng));
        let enc_b = params.push("d.enc.b", Tensor::zeros(&[config.d]));
        Ok(Self {
            config: config.clone(),
            params,
            convs,
            rf_w,
            rf_b,
            enc_w,
            enc_b,
            sn,
            sn_iters: 1,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn sn_states(&self) -> &[SpectralNormState<T>] {
        &self.sn
    }

    pub fn sn_states_mut(&mut self) -> &mut [SpectralNormState<T>] {
        &mut self.sn
    }

    /// Power-iteration steps per train-mode forward.
    pub fn set_sn_iters(&mut self, iters: usize) {
        self.sn_iters = iters.max(1);
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound<'t, T> {
        self.params.bind(tape, trainable)
    }

    pub fn bind_all<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        self.params.bind(tape, |_| trainable)
    }

    /// Forward pass. Train mode advances each spectral-norm vector by the
    /// configured number of power iterations; eval mode uses them as stored.
    pub fn forward<'t>(&mut self, bound: &Bound<'t, T>, x: Var<'t, T>, mode: NormMode) -> Result<DiscriminatorOutput<'t, T>> {
        let iters = match mode {
            NormMode::Train => self.sn_iters,
            NormMode::Eval => 0,
        };
        let mut sn = std::mem::take(&mut self.sn);
        let out = self.run(bound, x, &mut sn, iters);
        self.sn = sn;
        out
    }

    /// Forward pass that reads but never mutates the network.
    pub fn forward_frozen<'t>(&self, bound: &Bound<'t, T>, x: Var<'t, T>, mode: NormMode) -> Result<DiscriminatorOutput<'t, T>> {
        let iters = match mode {
            NormMode::Train => self.sn_iters,
            NormMode::Eval => 0,
        };
        let mut sn = self.sn.clone();
        self.run(bound, x, &mut sn, iters)
    }

    fn run<'t>(
        &self,
        bound: &Bound<'t, T>,
        x: Var<'t, T>,
        sn: &mut [SpectralNormState<T>],
        iters: usize,
    ) -> Result<DiscriminatorOutput<'t, T>> {
        let s = x.shape();
        let c = &self.config;
        if s.len() != 4 || s[1] != c.channels || s[2] != c.image_size || s[3] != c.image_size {
            return Err(Error::InvalidInput(format!(
                "discriminator expects [B×{}×{}×{}], got {s:?}",
                c.channels, c.image_size, c.image_size
            )));
        }
        let b = s[0];
        let mut h = x.channels_last()?;
        for (&w, state) in self.convs.iter().zip(sn.iter_mut()) {
            let w_sn = spectral_normalize_var(bound.var(w), state.u.data_mut(), iters)?;
            h = h.conv2d_nhwc(w_sn, 2, 1)?.leaky_relu(c.leaky_slope)?;
        }
        let pooled = h.reduce(Reduce::Sum, &[1, 2])?;
        let score = linear(pooled, bound.var(self.rf_w), bound.var(self.rf_b))?.reshape(&[b])?;
        let encoding = linear(pooled, bound.var(self.enc_w), bound.var(self.enc_b))?;
        Ok(DiscriminatorOutput { score, encoding })
    }

    /// Eval-mode encodings of an image batch, no gradients.
    pub fn encode(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.bind_all(&tape, false);
        let out = self.forward_frozen(&bound, tape.constant(images.clone()), NormMode::Eval)?;
        Ok(Tensor::clone(&out.encoding.value()))
    }

    /// Deep, immutable copy.
    pub fn snapshot(&self) -> FrozenDiscriminator<T> {
        FrozenDiscriminator(Arc::new(self.clone()))
    }

    pub fn restore(frozen: &FrozenDiscriminator<T>) -> Self {
        (*frozen.0).clone()
    }
}

/// Read-only discriminator, cheap to share between threads.
#[derive(Clone, Debug)]
pub struct FrozenDiscriminator<T>(Arc<DiscriminatorNet<T>>);

impl<T: Scalar> FrozenDiscriminator<T> {
    pub fn net(&self) -> &DiscriminatorNet<T> {
        &self.0
    }

    pub fn encode(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.0.encode(images)
    }
}
