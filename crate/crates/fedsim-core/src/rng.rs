//! Seed derivation for reproducible, order-independent randomness.
//!
//! Every random decision in a run draws from its own stream, keyed by
//! (domain, trial, round, client) through a splitmix64-based mixer. Streams
//! never share state, so executing clients in parallel or changing the
//! worker-thread count cannot perturb any result.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// splitmix64 finalizer; bijective on u64.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `words` into `root` one at a time, mixing after each step.
pub fn derive_seed(root: u64, words: &[u64]) -> u64 {
    let mut h = mix64(root ^ GOLDEN);
    for &w in words {
        h = mix64(h ^ w.wrapping_add(GOLDEN));
    }
    h
}

/// A ChaCha8 stream keyed by `root` and the given derivation words.
pub fn stream(root: u64, words: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, words))
}

/// Domain separators so distinct uses of the same (trial, round, client)
/// coordinates never collide.
pub mod domain {
    pub const TRIAL: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SAMPLING: u64 = 4;
    pub const CLIENT: u64 = 5;
    pub const SYNTH: u64 = 6;
}

/// Per-trial stream factory handed to the round loop.
#[derive(Debug, Clone, Copy)]
pub struct TrialStreams {
    trial_seed: u64,
}

impl TrialStreams {
    /// `trial_seed` should come from [`trial_seed`].
    pub fn new(trial_seed: u64) -> Self {
        Self { trial_seed }
    }

    pub fn trial_seed(&self) -> u64 {
        self.trial_seed
    }

    /// Seed for the data partition of this trial.
    pub fn partition_seed(&self) -> u64 {
        derive_seed(self.trial_seed, &[domain::PARTITION])
    }

    /// Seed for model initialization of this trial.
    pub fn init_seed(&self) -> u64 {
        derive_seed(self.trial_seed, &[domain::INIT])
    }

    /// Stream that selects the participating clients of `round` (1-indexed).
    pub fn sampling_rng(&self, round: usize) -> ChaCha8Rng {
        stream(self.trial_seed, &[domain::SAMPLING, round as u64])
    }

    /// Stream driving `client`'s local mini-batch shuffling in `round`.
    pub fn client_rng(&self, round: usize, client: usize) -> ChaCha8Rng {
        stream(self.trial_seed, &[domain::CLIENT, round as u64, client as u64])
    }
}

/// Seed for trial `k` under `root_seed`. This is the mixing function the
/// README documents: `mix(mix(root ^ G) ^ (TRIAL + G)) ^ ...` where `mix`
/// is the splitmix64 finalizer and `G = 0x9e3779b97f4a7c15`.
pub fn trial_seed(root_seed: u64, trial: usize) -> u64 {
    derive_seed(root_seed, &[domain::TRIAL, trial as u64])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn derivation_is_stable_and_order_sensitive() {
        assert_eq!(derive_seed(42, &[1, 2]), derive_seed(42, &[1, 2]));
        assert_ne!(derive_seed(42, &[1, 2]), derive_seed(42, &[2, 1]));
        assert_ne!(derive_seed(42, &[1]), derive_seed(43, &[1]));
    }

    #[test]
    fn streams_are_independent_across_coordinates() {
        let s = TrialStreams::new(trial_seed(7, 0));
        let mut a = s.client_rng(1, 0);
        let mut b = s.client_rng(1, 1);
        let mut c = s.client_rng(2, 0);
        let (xa, xb, xc) = (a.next_u64(), b.next_u64(), c.next_u64());
        assert_ne!(xa, xb);
        assert_ne!(xa, xc);
        // same coordinates reproduce the same stream
        let mut a2 = s.client_rng(1, 0);
        assert_eq!(xa, a2.next_u64());
    }

    #[test]
    fn trial_seeds_differ_by_index() {
        let seeds: Vec<u64> = (0..16).map(|k| trial_seed(123, k)).collect();
        for i in 0..seeds.len() {
            for j in i + 1..seeds.len() {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
    }
}
