//! Counter-addressed Gaussian noise.
//!
//! Every draw is keyed by `(seed, purpose, chain, t)`, so a chain's noise does
//! not depend on how chains are batched or in which order they run.

use std::ops::Range;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    /// Per-step sampler noise `ε_t`.
    Step = 1,
    /// Initial latents `x_T`.
    Latent = 2,
    /// Draws of clean data `x_0`.
    Data = 3,
    /// Forward-process noise for objective sample plans.
    Plan = 4,
    /// Anything else (initialisation, minibatches, test fixtures).
    Aux = 5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseStream {
    seed: u64,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&self, purpose: Purpose, chain: u64, t: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
        key[16..24].copy_from_slice(&chain.to_le_bytes());
        key[24..].copy_from_slice(&t.to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }

    /// `d` standard normals for one chain.
    pub fn normal_row(&self, purpose: Purpose, chain: u64, t: u64, d: usize) -> Vec<f64> {
        let mut rng = self.rng(purpose, chain, t);
        (0..d).map(|_| rng.sample(StandardNormal)).collect()
    }

    /// One row of standard normals per chain in `chains`.
    pub fn normal_matrix(&self, purpose: Purpose, chains: Range<u64>, t: u64, d: usize) -> Array2<f64> {
        let n = (chains.end - chains.start) as usize;
        let mut out = Array2::zeros((n, d));
        for (row, chain) in out.rows_mut().into_iter().zip(chains) {
            let mut rng = self.rng(purpose, chain, t);
            for v in row {
                *v = rng.sample(StandardNormal);
            }
        }
        out
    }
}
