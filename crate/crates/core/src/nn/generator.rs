use rand_chacha::ChaCha8Rng;

use super::{he_normal, linear, Bound, NetConfig, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{BatchNormState, NormMode, Scalar, Tape, Tensor, Var, BN_EPS};

/// Affine source for one generator batch-norm.
#[derive(Clone, Debug, PartialEq)]
enum BlockAffine {
    Plain {
        gamma: ParamId,
        beta: ParamId,
    },
    /// gamma/beta predicted per sample from the latent code through one
    /// hidden ReLU layer.
    Modulated {
        hidden_w: ParamId,
        hidden_b: ParamId,
        gamma_w: ParamId,
        gamma_b: ParamId,
        beta_w: ParamId,
        beta_b: ParamId,
    },
}

#[derive(Clone, Debug, PartialEq)]
struct UpBlock {
    weight: ParamId,
    affine: BlockAffine,
}

/// Latent code `[B×d]` → image `[B×C×H×W]` in `[-1, 1]`.
///
/// linear → reshape to the base map → `blocks` × (transposed conv k4 s2 p1
/// → batch norm → ReLU) → 3×3 conv → tanh.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorNet<T> {
    config: NetConfig,
    params: ParamStore<T>,
    input_w: ParamId,
    input_b: ParamId,
    blocks: Vec<UpBlock>,
    out_w: ParamId,
    out_b: ParamId,
    bn: Vec<BatchNormState<T>>,
}

impl<T: Scalar> GeneratorNet<T> {
    pub(crate) fn init(config: &NetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut params = ParamStore::default();
        let d = config.d;
        let s0 = config.base_extent();
        let c0 = config.g_channels(0);
        let input_w = params.push("g.input.w", he_normal(&[d, c0 * s0 * s0], d, rng));
        let input_b = params.push("g.input.b", Tensor::zeros(&[c0 * s0 * s0]));
        let mut blocks = Vec::with_capacity(config.blocks);
        let mut bn = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let (cin, cout) = (config.g_channels(i), config.g_channels(i + 1));
            let weight = params.push(format!("g.block{i}.w"), he_normal(&[cin, cout, 4, 4], cin * 16, rng));
            let affine = if config.g_modulation {
                BlockAffine::Modulated {
                    hidden_w: params.push(format!("g.block{i}.mod.hidden.w"), he_normal(&[d, d], d, rng)),
                    hidden_b: params.push(format!("g.block{i}.mod.hidden.b"), Tensor::zeros(&[d])),
                    // Zero output maps: the affine starts at gamma=1, beta=0.
                    gamma_w: params.push(format!("g.block{i}.mod.gamma.w"), Tensor::zeros(&[d, cout])),
                    gamma_b: params.push(format!("g.block{i}.mod.gamma.b"), Tensor::zeros(&[cout])),
                    beta_w: params.push(format!("g.block{i}.mod.beta.w"), Tensor::zeros(&[d, cout])),
                    beta_b: params.push(format!("g.block{i}.mod.beta.b"), Tensor::zeros(&[cout])),
                }
            } else {
                BlockAffine::Plain {
                    gamma: params.push(format!("g.block{i}.bn.gamma"), Tensor::ones(&[cout])),
                    beta: params.push(format!("g.block{i}.bn.beta"), Tensor::zeros(&[cout])),
                }
            };
            blocks.push(UpBlock { weight, affine });
            bn.push(BatchNormState::new(cout));
        }
        let clast = config.g_channels(config.blocks);
        let out_w = params.push("g.out.w", he_normal(&[config.channels, clast, 3, 3], clast * 9, rng));
        let out_b = params.push("g.out.b", Tensor::zeros(&[config.channels]));
        Ok(Self {
            config: config.clone(),
            params,
            input_w,
            input_b,
            blocks,
            out_w,
            out_b,
            bn,
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

    pub fn bn_states(&self) -> &[BatchNormState<T>] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BatchNormState<T>] {
        &mut self.bn
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        self.params.bind(tape, |_| trainable)
    }

    /// Forward pass. Train mode uses batch statistics and updates the
    /// running statistics.
    pub fn forward<'t>(&mut self, bound: &Bound<'t, T>, z: Var<'t, T>, mode: NormMode) -> Result<Var<'t, T>> {
        let zs = z.shape();
        if zs.len() != 2 || zs[1] != self.config.d {
            return Err(Error::InvalidInput(format!(
                "generator expects latent [B×{}], got {zs:?}",
                self.config.d
            )));
        }
        let b = zs[0];
        let s0 = self.config.base_extent();
        let tape = z.tape();
        // The trunk runs channels-last; the base map is read as [B, s0, s0, C0].
        let mut h = linear(z, bound.var(self.input_w), bound.var(self.input_b))?.reshape(&[
            b,
            s0,
            s0,
            self.config.g_channels(0),
        ])?;
        for (block, bn) in self.blocks.iter().zip(self.bn.iter_mut()) {
            h = h.conv2d_transpose_nhwc(bound.var(block.weight), 2, 1)?;
            h = h.normalize_last(BN_EPS, mode, bn)?;
            h = match &block.affine {
                BlockAffine::Plain { gamma, beta } => h.channel_affine_last(bound.var(*gamma), bound.var(*beta))?,
                BlockAffine::Modulated {
                    hidden_w,
                    hidden_b,
                    gamma_w,
                    gamma_b,
                    beta_w,
                    beta_b,
                } => {
                    let hidden = linear(z, bound.var(*hidden_w), bound.var(*hidden_b))?.relu()?;
                    let gamma = linear(hidden, bound.var(*gamma_w), bound.var(*gamma_b))?.add_scalar(1.0)?;
                    let beta = linear(hidden, bound.var(*beta_w), bound.var(*beta_b))?;
                    h.channel_affine_last(gamma, beta)?
                }
            };
            h = h.relu()?;
        }
        let ones = tape.constant(Tensor::ones(&[self.config.channels]));
        Ok(h.channels_first()?
            .conv2d(bound.var(self.out_w), 1, 1)?
            .channel_affine(ones, bound.var(self.out_b))?
            .tanh()?)
    }

    /// Convenience: images for a latent batch, without gradients.
    pub fn generate(&mut self, z: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let out = self.forward(&bound, tape.constant(z.clone()), mode)?;
        Ok(Tensor::clone(&out.value()))
    }
}
