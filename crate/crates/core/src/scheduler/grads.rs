//! Synthetic gradient sources for the backward simulation.

use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Produces the FP16 gradient of one subgroup for one micro-batch.
pub trait GradientSource: Sync {
    fn fill(&self, iteration: u32, subgroup_id: u32, micro: u32, out: &mut [f16]);
}

/// Deterministic uniform gradients in `[-scale, scale)`, keyed by seed,
/// iteration, subgroup and micro-batch.
#[derive(Clone, Copy, Debug)]
pub struct SeededGradients {
    pub seed: u64,
    pub scale: f32,
}

impl SeededGradients {
    pub fn new(seed: u64) -> Self {
        Self { seed, scale: 1e-2 }
    }
}

impl GradientSource for SeededGradients {
    fn fill(&self, iteration: u32, subgroup_id: u32, micro: u32, out: &mut [f16]) {
        let key = self.seed
            ^ u64::from(iteration).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ u64::from(subgroup_id).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
            ^ u64::from(micro).wrapping_mul(0x1656_67B1_9E37_79F9);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        for g in out {
            *g = f16::from_f32(rng.random_range(-self.scale..self.scale));
        }
    }
}
