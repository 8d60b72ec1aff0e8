// SPDX-License-Identifier: Apache-2.0

//! Setup checksum: an iterated hash over the prover's memory image, seeded
//! by the verifier's challenge, with a simulated cost.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::crypto::{hash_fields, Digest, Nonce};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChecksumSpec {
    pub iterations: u32,
    /// Virtual microseconds per iteration.
    pub cost_per_iteration_us: u64,
    /// Extra virtual time taken when the checksum runs under emulation or
    /// over a patched image.
    pub manipulation_penalty_us: u64,
}

impl Default for ChecksumSpec {
    fn default() -> Self {
        Self {
            iterations: 64,
            cost_per_iteration_us: 50,
            manipulation_penalty_us: 2_000,
        }
    }
}

impl ChecksumSpec {
    pub fn base_duration_us(&self) -> u64 {
        u64::from(self.iterations) * self.cost_per_iteration_us
    }

    pub fn duration_us(&self, manipulated: bool) -> u64 {
        self.base_duration_us() + if manipulated { self.manipulation_penalty_us } else { 0 }
    }
}

/// `checksum(r1, image)`: `h_0 = H(r1)`, `h_{i+1} = H(h_i, image)`.
pub fn checksum(r1: &Nonce, image: &[u8], iterations: u32) -> Digest {
    let mut h = hash_fields("checksum-seed", &[r1]);
    for _ in 0..iterations {
        let mut hasher = blake3::Hasher::new();
        hasher.update(&h);
        hasher.update(image);
        h = *hasher.finalize().as_bytes();
    }
    h
}

/// A deterministic memory image of `len` bytes.
pub fn memory_image(len: usize, seed: u64) -> Vec<u8> {
    let mut image = vec![0u8; len];
    ChaCha20Rng::seed_from_u64(seed).fill_bytes(&mut image);
    image
}
