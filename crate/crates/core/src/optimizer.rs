//! CPU Adam update over one subgroup of FP32 optimizer state.

use std::time::Duration;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{Exec, CHUNK};

/// Where a subgroup's FP32 state currently lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Residency {
    HostCached,
    OnTier(u16),
    InFlight,
}

impl Residency {
    /// Legal moves: host -> in flight -> tier -> in flight -> host.
    pub fn can_transition_to(self, next: Residency) -> bool {
        matches!(
            (self, next),
            (Residency::HostCached, Residency::InFlight)
                | (Residency::InFlight, Residency::OnTier(_))
                | (Residency::OnTier(_), Residency::InFlight)
                | (Residency::InFlight, Residency::HostCached)
        )
    }
}

/// One shard of FP32 optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Subgroup {
    pub id: u32,
    pub params: Vec<f32>,
    pub momentum: Vec<f32>,
    pub variance: Vec<f32>,
    pub residency: Residency,
    pub step_count: u64,
}

impl Subgroup {
    pub fn zeros(id: u32, param_count: usize) -> Self {
        Self {
            id,
            params: vec![0.0; param_count],
            momentum: vec![0.0; param_count],
            variance: vec![0.0; param_count],
            residency: Residency::HostCached,
            step_count: 0,
        }
    }

    /// Fresh state with parameters drawn uniformly from [-1, 1), seeded by
    /// `(seed, id)` so every worker builds identical shards.
    pub fn seeded(id: u32, param_count: usize, seed: u64) -> Self {
        let mut sg = Self::zeros(id, param_count);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(id) << 32) ^ 0x5eed_0000);
        for p in &mut sg.params {
            *p = rng.random_range(-1.0f32..1.0);
        }
        sg
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Bytes of FP32 state (params, momentum, variance).
    pub fn state_bytes(&self) -> u64 {
        12 * self.params.len() as u64
    }

    pub fn has_consistent_lengths(&self) -> bool {
        self.momentum.len() == self.params.len() && self.variance.len() == self.params.len()
    }

    /// Compares the numeric state bit for bit.
    pub fn state_bits_eq(&self, other: &Subgroup) -> bool {
        fn bits(v: &[f32]) -> impl Iterator<Item = u32> + '_ {
            v.iter().map(|x| x.to_bits())
        }
        self.id == other.id
            && bits(&self.params).eq(bits(&other.params))
            && bits(&self.momentum).eq(bits(&other.momentum))
            && bits(&self.variance).eq(bits(&other.variance))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decoupled weight decay; 0 disables it.
    pub weight_decay: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam hyperparameters {self:?}")))
        }
    }
}

#[derive(Clone, Copy)]
struct StepConsts {
    beta1: f32,
    one_minus_beta1: f32,
    beta2: f32,
    one_minus_beta2: f32,
    inv_bias2: f32,
    step_size: f32,
    eps: f32,
    decay: f32,
}

impl StepConsts {
    fn new(h: &AdamHyper, t: u64) -> Self {
        let t = i32::try_from(t).unwrap_or(i32::MAX);
        let bias1 = 1.0 - f64::from(h.beta1).powi(t);
        let bias2 = 1.0 - f64::from(h.beta2).powi(t);
        Self {
            beta1: h.beta1,
            one_minus_beta1: 1.0 - h.beta1,
            beta2: h.beta2,
            one_minus_beta2: 1.0 - h.beta2,
            inv_bias2: (1.0 / bias2) as f32,
            step_size: (f64::from(h.lr) / bias1) as f32,
            eps: h.eps,
            decay: h.lr * h.weight_decay,
        }
    }
}

#[inline]
fn adam_chunk(p: &mut [f32], m: &mut [f32], v: &mut [f32], g: &[f32], c: &StepConsts) {
    for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
        if c.decay > 0.0 {
            *p -= c.decay * *p;
        }
        *m = c.beta1 * *m + c.one_minus_beta1 * g;
        *v = c.beta2 * *v + c.one_minus_beta2 * (g * g);
        let denom = (*v * c.inv_bias2).sqrt() + c.eps;
        *p -= c.step_size * *m / denom;
    }
}

/// Applies one bias-corrected Adam step with timestep `t` to `sg`.
pub fn adam_step(sg: &mut Subgroup, grads: &[f32], h: &AdamHyper, t: u64) -> Result<()> {
    adam_step_with(sg, grads, h, t, Exec::default())
}

pub fn adam_step_with(
    sg: &mut Subgroup,
    grads: &[f32],
    h: &AdamHyper,
    t: u64,
    exec: Exec,
) -> Result<()> {
    let n = sg.param_count();
    if !sg.has_consistent_lengths() {
        return Err(Error::LengthMismatch {
            expected: n,
            got: sg.momentum.len().min(sg.variance.len()),
        });
    }
    if grads.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: grads.len(),
        });
    }
    if t == 0 {
        return Err(Error::Config("Adam timestep starts at 1".into()));
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::GradientOverflow { index });
    }

    let c = StepConsts::new(h, t);
    let Subgroup {
        params,
        momentum,
        variance,
        ..
    } = sg;
    match exec {
        Exec::Sequential => params
            .chunks_mut(CHUNK)
            .zip(momentum.chunks_mut(CHUNK))
            .zip(variance.chunks_mut(CHUNK))
            .zip(grads.chunks(CHUNK))
            .for_each(|(((p, m), v), g)| adam_chunk(p, m, v, g, &c)),
        #[cfg(feature = "parallel")]
        Exec::Parallel => params
            .par_chunks_mut(CHUNK)
            .zip(momentum.par_chunks_mut(CHUNK))
            .zip(variance.par_chunks_mut(CHUNK))
            .zip(grads.par_chunks(CHUNK))
            .for_each(|(((p, m), v), g)| adam_chunk(p, m, v, g, &c)),
    }
    sg.step_count = t;
    Ok(())
}

/// Millions of parameters updated per second.
pub fn update_throughput(params_updated: u64, wall: Duration) -> f64 {
    params_updated as f64 / wall.as_secs_f64() / 1e6
}
