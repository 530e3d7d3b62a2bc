//! Generator, dual-head discriminator, spectral normalization and the
//! parameter bookkeeping shared by both networks.

mod discriminator;
mod generator;
mod spectral;
#[cfg(test)]
mod tests_nets;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub use discriminator::{DiscriminatorNet, DiscriminatorOutput, FrozenDiscriminator, RF_HEAD_PREFIX};
pub use generator::GeneratorNet;
pub use spectral::{power_iteration, spectral_normalize, SpectralNormState};
pub(crate) use spectral::spectral_normalize_var;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub image_size: usize,
    pub channels: usize,
    pub base_width: usize,
    /// Latent code and encoding length.
    pub d: usize,
    pub leaky_slope: f64,
    pub blocks: usize,
    /// Latent-conditioned batch-norm affine in the generator.
    pub g_modulation: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 3,
            base_width: 32,
            d: 128,
            leaky_slope: 0.1,
            blocks: 4,
            g_modulation: false,
        }
    }
}

impl NetConfig {
    /// 32×32 grayscale; three blocks keep the deepest map at 4×4.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            blocks: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || !self.image_size.is_power_of_two() {
            return Err(Error::config("image_size", format!("{} is not a power of two >= 16", self.image_size)));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::config("channels", format!("{} (expected 1 or 3)", self.channels)));
        }
        if self.blocks == 0 || self.blocks >= usize::BITS as usize || (self.image_size >> self.blocks) < 4 {
            return Err(Error::config(
                "blocks",
                format!("{} blocks leave the deepest map below 4 pixels at size {}", self.blocks, self.image_size),
            ));
        }
        if self.d == 0 {
            return Err(Error::config("d", "must be >= 1"));
        }
        if self.base_width == 0 {
            return Err(Error::config("base_width", "must be >= 1"));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::config("leaky_slope", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// Spatial extent of the generator input map and the discriminator's deepest map.
    pub fn base_extent(&self) -> usize {
        self.image_size >> self.blocks
    }

    /// Output channels of discriminator block `i`.
    pub fn d_channels(&self, i: usize) -> usize {
        self.base_width << i
    }

    /// Input channels of generator block `i`; `i == blocks` gives the
    /// channels fed to the output head.
    pub fn g_channels(&self, i: usize) -> usize {
        let top = self.base_width << (self.blocks - 1);
        (top >> i).max(1)
    }
}

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.entries.push((name.into(), value));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every parameter on `tape`: as a differentiable leaf when
    /// `trainable(name)` holds, otherwise as a constant.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound<'t, T> {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| {
                if trainable(n) {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters of one network recorded on a tape, in store order.
pub struct Bound<'t, T: Scalar> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    /// Gradients after `backward`, aligned with the store order; `None` for
    /// constants and for parameters the loss does not reach.
    pub fn grads(&self) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|v| v.grad()).collect()
    }
}

/// `x [B×in] · w [in×out] + b [out]`.
pub(crate) fn linear<'t, T: Scalar>(x: Var<'t, T>, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let y = x.matmul(w)?;
    let ones = x.tape().constant(Tensor::ones(&[y.shape()[1]]));
    Ok(y.channel_affine_last(ones, b)?)
}

/// He-normal tensor: zero mean, std `sqrt(2 / fan_in)`.
pub(crate) fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = rng.sample(StandardNormal);
        T::from_f64(z * std)
    })
}

/// Fresh generator and discriminator (with unit-norm spectral vectors),
/// deterministic in `seed`.
pub fn init_params<T: Scalar>(config: &NetConfig, seed: u64) -> Result<(GeneratorNet<T>, DiscriminatorNet<T>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = GeneratorNet::init(config, &mut rng)?;
    let d = DiscriminatorNet::init(config, &mut rng)?;
    Ok((g, d))
}
