//! In-memory labelled image collections.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Images `[N×C×H×W]` in `[-1, 1]` with one class id each.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet<T> {
    images: Tensor<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> ImageSet<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} labels for image tensor {:?}",
                labels.len(),
                images.shape()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn images(&self) -> &Tensor<T> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Distinct class ids in ascending order.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Indices of the images of class `class`.
    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &l)| l == class).map(|(i, _)| i).collect()
    }

    /// Stacks the listed images into `[k×C×H×W]`.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let per = self.images.numel() / self.len().max(1);
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidInput(format!("image {i} out of range for {} images", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let [c, h, w] = self.image_shape();
        Ok(Tensor::new(vec![indices.len(), c, h, w], data)?)
    }

    /// `n` distinct images drawn uniformly.
    pub fn sample_batch(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        if n == 0 || n > self.len() {
            return Err(Error::InsufficientData(format!("batch of {n} from {} images", self.len())));
        }
        self.gather(&sample(rng, self.len(), n).into_vec())
    }
}

/// Concatenates image batches along the leading axis.
pub fn concat_batches<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::InvalidInput("nothing to concatenate".into()))?;
    let tail = &first.shape()[1..];
    let mut rows = 0;
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
    for p in parts {
        if &p.shape()[1..] != tail {
            return Err(Error::InvalidInput(format!("cannot concatenate {:?} with {:?}", first.shape(), p.shape())));
        }
        rows += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![rows];
    shape.extend_from_slice(tail);
    Ok(Tensor::new(shape, data)?)
}
