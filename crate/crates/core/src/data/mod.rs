//! Data ingestion: InkML, rasterization, tokenization, synthetic expressions
//! and the on-disk dataset cache.

pub mod cache;
pub mod inkml;
pub mod raster;
pub mod synth;
pub mod vocab;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

pub use inkml::{parse_inkml, InkDocument};
pub use raster::{rasterize, RasterConfig};
pub use synth::{generate, SynthConfig};
pub use vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// 1×H×W, values in {0, 1}.
    pub image: Tensor,
    /// Framed by SOS and EOS.
    pub tokens: Vec<usize>,
    pub label: String,
}

impl Sample {
    pub fn new(image: Tensor, label: &str, vocab: &Vocabulary) -> Result<Self> {
        ensure!(
            image.rank() == 3 && image.shape()[0] == 1,
            "sample image must be 1×H×W, got {:?}",
            image.shape()
        );
        ensure!(
            image.data().iter().all(|&v| v == 0.0 || v == 1.0),
            "sample image must be binary"
        );
        let t = vocab.tokenize(label);
        if !t.unknown.is_empty() {
            log::warn!("label {label:?}: {} unknown symbol(s) {:?}", t.unknown.len(), t.unknown);
        }
        Ok(Self {
            image,
            tokens: t.ids,
            label: vocab::canonical(label),
        })
    }

    /// Token ids between SOS and EOS.
    pub fn body(&self) -> &[usize] {
        &self.tokens[1..self.tokens.len() - 1]
    }
}

/// Seeded split into (train, validation) index lists; validation receives
/// `n / 10` samples.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5b11_7000));
    let val = idx.split_off(n - n / 10);
    (idx, val)
}

/// Stacks images of equal height into N×1×H×Wmax, padding on the right with zeros.
pub fn batch_images(images: &[&Tensor]) -> Result<Tensor> {
    ensure!(!images.is_empty(), "cannot batch zero images");
    let h = images[0].shape()[1];
    ensure!(
        images.iter().all(|im| im.rank() == 3 && im.shape()[0] == 1 && im.shape()[1] == h),
        "batched images must all be 1×{h}×W"
    );
    let w = images.iter().map(|im| im.shape()[2]).max().unwrap_or(0);
    let mut data = vec![0.0; images.len() * h * w];
    for (n, im) in images.iter().enumerate() {
        let iw = im.shape()[2];
        for r in 0..h {
            let dst = (n * h + r) * w;
            data[dst..dst + iw].copy_from_slice(&im.data()[r * iw..(r + 1) * iw]);
        }
    }
    Tensor::new(&[images.len(), 1, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_stable_and_partitions() {
        let (a, b) = split_indices(53, 9);
        let (c, d) = split_indices(53, 9);
        assert_eq!((&a, &b), (&c, &d));
        assert_eq!(b.len(), 5);
        let mut all: Vec<_> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, (0..53).collect::<Vec<_>>());
        assert_ne!(split_indices(53, 10).1, b);
    }

    #[test]
    fn batching_pads_right() {
        let a = Tensor::new(&[1, 2, 1], vec![1.0, 1.0]).unwrap();
        let b = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let t = batch_images(&[&a, &b]).unwrap();
        assert_eq!(t.shape(), &[2, 1, 2, 2]);
        assert_eq!(t.data(), &[1., 0., 1., 0., 0., 1., 1., 0.]);
    }
}
