use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// `U[-1, 1]` per entry.
    Uniform,
    /// `±1` with equal probability.
    Bernoulli,
    /// `N(0, 1)` per entry.
    Gaussian,
}

/// Distribution of the generator's latent codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentPrior {
    pub kind: PriorKind,
    pub d: usize,
}

impl LatentPrior {
    pub fn new(kind: PriorKind, d: usize) -> Self {
        Self { kind, d }
    }

    /// `[batch×d]` i.i.d. draws.
    pub fn sample<T: Scalar>(&self, batch: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        if batch == 0 || self.d == 0 {
            return Err(Error::InvalidInput(format!("latent batch {batch}×{} is empty", self.d)));
        }
        let draw = |rng: &mut ChaCha8Rng| -> f64 {
            match self.kind {
                PriorKind::Uniform => rng.random_range(-1.0..=1.0),
                PriorKind::Bernoulli => {
                    if rng.random::<bool>() {
                        1.0
                    } else {
                        -1.0
                    }
                }
                PriorKind::Gaussian => rng.sample(StandardNormal),
            }
        };
        Ok(Tensor::from_fn(&[batch, self.d], |_| T::from_f64(draw(rng))))
    }
}
