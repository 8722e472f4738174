//! Stable seed derivation. Every random stream in the crate is keyed by a
//! label plus integers, so one stream never depends on another's consumption.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::numerics::{Real, Tensor};

pub fn derive_seed(label: &str, keys: &[u64]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    for k in keys {
        h.update(k.to_le_bytes());
    }
    h.finalize().into()
}

pub fn rng_for(label: &str, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(label, keys))
}

/// Uniform `[-bound, bound)` entries.
pub fn uniform_tensor<T: Real>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| {
        T::from_f64(rng.gen_range(-bound..bound))
    })
}
