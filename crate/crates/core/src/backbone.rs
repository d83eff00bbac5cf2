//! Frozen feature extractor: four stages of 3×3 convolution, ReLU and 2×2
//! average pooling with seeded random weights. Stage 3 output (stride 8)
//! and stage 4 output (stride 16) play the roles of the two feature blocks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::kernels::conv2d;
use crate::tensor::{Scalar, Tensor};

/// Shallow and deep feature maps of one patch, `H×W×C` each.
#[derive(Clone, Debug, PartialEq)]
pub struct Features<T> {
    pub block3: Tensor<T>,
    pub block4: Tensor<T>,
}

impl<T: Scalar> Features<T> {
    pub fn cast<U: Scalar>(&self) -> Features<U> {
        Features {
            block3: self.block3.cast(),
            block4: self.block4.cast(),
        }
    }

    pub fn block(&self, i: usize) -> &Tensor<T> {
        if i == 0 {
            &self.block3
        } else {
            &self.block4
        }
    }
}

/// Anything that turns a patch into the two feature blocks.
pub trait FeatureExtractor<T: Scalar> {
    fn extract(&self, patch: &Image) -> Result<Features<T>>;
    /// Channel counts of (block3, block4).
    fn channels(&self) -> (usize, usize);
    /// Pixel strides of (block3, block4).
    fn strides(&self) -> (usize, usize) {
        (8, 16)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    weights: Vec<Tensor<T>>,
}

impl<T: Scalar> Backbone<T> {
    /// He-normal weights for stage widths `channels`.
    pub fn seeded(channels: [usize; 4], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let mut weights = Vec::with_capacity(4);
        for &cout in &channels {
            if cout == 0 {
                return Err(Error::invalid("backbone stage with zero channels"));
            }
            let std = (2.0 / (9 * cin) as f64).sqrt();
            let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
            let data = (0..9 * cin * cout).map(|_| T::of(dist.sample(&mut rng))).collect();
            weights.push(Tensor::new(vec![3, 3, cin, cout], data)?);
            cin = cout;
        }
        Ok(Backbone { weights })
    }

    pub fn from_weights(weights: Vec<Tensor<T>>) -> Result<Self> {
        let mut cin = 3;
        if weights.len() != 4 {
            return Err(Error::ModelFormat(format!(
                "backbone needs 4 stages, got {}",
                weights.len()
            )));
        }
        for w in &weights {
            if w.rank() != 4 || w.shape()[..3] != [3, 3, cin] {
                return Err(Error::ModelFormat(format!("bad backbone stage shape {:?}", w.shape())));
            }
            cin = w.shape()[3];
        }
        Ok(Backbone { weights })
    }

    pub fn weights(&self) -> &[Tensor<T>] {
        &self.weights
    }

    fn stage(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
        let y = conv2d(x, w, 1, 1)?.map(|v| v.max(T::zero()));
        avg_pool2(&y)
    }
}

impl<T: Scalar> FeatureExtractor<T> for Backbone<T> {
    fn extract(&self, patch: &Image) -> Result<Features<T>> {
        if patch.width() % 16 != 0 || patch.height() % 16 != 0 || patch.is_empty() {
            return Err(Error::invalid(format!(
                "patch {}x{} is not a positive multiple of 16",
                patch.width(),
                patch.height()
            )));
        }
        let mut x = patch.to_tensor::<T>();
        for w in &self.weights[..3] {
            x = Self::stage(&x, w)?;
        }
        let block4 = Self::stage(&x, &self.weights[3])?;
        Ok(Features { block3: x, block4 })
    }

    fn channels(&self) -> (usize, usize) {
        (self.weights[2].shape()[3], self.weights[3].shape()[3])
    }
}

/// 2×2 mean pooling with stride 2 on `H×W×C`.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 3 || x.shape()[0] % 2 != 0 || x.shape()[1] % 2 != 0 {
        return Err(Error::invalid(format!("cannot 2×2-pool shape {:?}", x.shape())));
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let xd = x.data();
    let mut out = vec![T::zero(); ho * wo * c];
    for i in 0..ho {
        for j in 0..wo {
            let o = &mut out[(i * wo + j) * c..][..c];
            for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let src = &xd[((2 * i + di) * w + 2 * j + dj) * c..][..c];
                for (a, &b) in o.iter_mut().zip(src) {
                    *a = *a + b;
                }
            }
            o.iter_mut().for_each(|v| *v = *v * quarter);
        }
    }
    Tensor::new(vec![ho, wo, c], out)
}
