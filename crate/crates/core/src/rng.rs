//! Named, splittable random streams.
//!
//! Every stochastic operation takes an explicit [`Stream`]. A stream is keyed
//! by a 64-bit value; children are derived from the parent key and a label,
//! never from the parent's consumed state, so the draws a component sees do
//! not depend on what other components consumed before it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::numerics::Tensor;

#[derive(Clone, Debug)]
pub struct Stream {
    key: u64,
    rng: ChaCha8Rng,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Self::from_key(mix(seed))
    }

    fn from_key(key: u64) -> Self {
        // ChaCha's stream id is the counter-mode nonce; the key fills the seed.
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&key.to_le_bytes());
        seed[8..16].copy_from_slice(&mix(key).to_le_bytes());
        Self {
            key,
            rng: ChaCha8Rng::from_seed(seed),
        }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Child stream identified by a label.
    pub fn split(&self, label: &str) -> Stream {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for b in label.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        Self::from_key(mix(self.key ^ mix(h)))
    }

    /// Child stream identified by an index (items, iterations).
    pub fn split_index(&self, index: u64) -> Stream {
        Self::from_key(mix(self.key.wrapping_add(mix(index ^ 0x5bd1_e995))))
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.gen_range(lo..=hi)
    }

    pub fn range_i32(&mut self, lo: i32, hi: i32) -> i32 {
        self.rng.gen_range(lo..=hi)
    }

    pub fn pick<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.rng.gen_range(0..items.len())]
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f32 {
        self.rng.sample(StandardNormal)
    }

    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.normal()).collect();
        Tensor::from_vec(shape, data).expect("shape/data agree by construction")
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_are_independent_of_consumption() {
        let root = Stream::new(7);
        let mut used = root.clone();
        for _ in 0..10 {
            used.normal();
        }
        let a = root.split("data").normal_tensor(&[4]);
        let b = used.split("data").normal_tensor(&[4]);
        assert_eq!(a, b);
        assert_ne!(root.split("data").key(), root.split("model").key());
        assert_ne!(root.split_index(0).key(), root.split_index(1).key());
    }

    #[test]
    fn same_seed_same_draws() {
        let mut a = Stream::new(3);
        let mut b = Stream::new(3);
        for _ in 0..100 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }
}
