//! Benchmark configuration, read from TOML.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizer::AdamHyper;
use crate::scheduler::Flags;
use crate::tier::{ThrottleSpec, Tier, TierKind, TierSpec};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub tiers: Vec<TierConfig>,
    #[serde(default)]
    pub placement: PlacementConfig,
    #[serde(default)]
    pub optim: AdamHyper,
    #[serde(default)]
    pub schedule: ScheduleConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Parameters per worker.
    pub total_params: u64,
    pub subgroup_param_count: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TierConfig {
    pub id: u16,
    pub kind: TierKind,
    /// Directory of `local_dir` / `remote_dir` tiers.
    #[serde(default)]
    pub root: Option<PathBuf>,
    /// Bytes/s. Throttle rates of `mem_throttled` tiers, starting
    /// estimates otherwise.
    pub read_bw: f64,
    pub write_bw: f64,
    #[serde(default = "one")]
    pub io_parallelism: usize,
    #[serde(default)]
    pub persistent: bool,
    /// Extra cost per additional concurrent stream on a throttled tier.
    #[serde(default)]
    pub contention_penalty: f64,
    /// Optional rate cap for directory tiers.
    #[serde(default)]
    pub throttle: Option<ThrottleSpec>,
    /// Measure the bandwidth at startup instead of trusting `read_bw`.
    #[serde(default)]
    pub probe: bool,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PlacementConfig {
    pub alpha: f64,
    /// Fixed placement weights per tier.
    pub ratio: Option<Vec<f64>>,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            ratio: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Engine,
    Baseline,
}

/// Throttle change applied just before iteration `iteration`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThrottleChange {
    pub iteration: u32,
    pub tier: u16,
    pub read_bw: f64,
    pub write_bw: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub pool_slots: usize,
    pub cache_slots: usize,
    pub iterations: u32,
    pub warmup_iterations: u32,
    pub grad_accum_steps: u32,
    pub workers_per_node: u32,
    pub forward_ms: u64,
    pub mode: Mode,
    /// Engine-mode switches; all on when absent.
    pub flags: Option<Flags>,
    pub lock_dir: Option<PathBuf>,
    pub stall_timeout_s: f64,
    pub seed: u64,
    pub grad_scale: f32,
    pub throttle_changes: Vec<ThrottleChange>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            pool_slots: 4,
            cache_slots: 0,
            iterations: 10,
            warmup_iterations: 2,
            grad_accum_steps: 1,
            workers_per_node: 1,
            forward_ms: 0,
            mode: Mode::Engine,
            flags: None,
            lock_dir: None,
            stall_timeout_s: 30.0,
            seed: 0,
            grad_scale: 1e-2,
            throttle_changes: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let s = &self.schedule;
        if self.model.subgroup_param_count == 0 || self.model.total_params == 0 {
            return bad("model sizes must be positive".into());
        }
        if s.warmup_iterations >= s.iterations {
            return bad(format!(
                "warmup_iterations ({}) must be below iterations ({})",
                s.warmup_iterations, s.iterations
            ));
        }
        if s.workers_per_node == 0 {
            return bad("workers_per_node must be at least 1".into());
        }
        if self.tiers.is_empty() {
            return bad("no tiers configured".into());
        }
        for (k, t) in self.tiers.iter().enumerate() {
            if usize::from(t.id) != k {
                return bad(format!("tier ids must be 0..n in order; found {} at {k}", t.id));
            }
            if !(t.read_bw > 0.0 && t.write_bw > 0.0) {
                return bad(format!("tier {}: bandwidths must be positive", t.id));
            }
            if t.kind != TierKind::MemThrottled && t.root.is_none() {
                return bad(format!("tier {}: directory tiers need a root", t.id));
            }
        }
        if s.throttle_changes.iter().any(|c| usize::from(c.tier) >= self.tiers.len()) {
            return bad("throttle change names an unknown tier".into());
        }
        if s.stall_timeout_s.is_nan() || s.stall_timeout_s <= 0.0 {
            return bad("stall_timeout_s must be positive".into());
        }
        Ok(())
    }

    pub fn subgroup_sizes(&self) -> Vec<usize> {
        crate::scheduler::EngineConfig::split(
            self.model.total_params as usize,
            self.model.subgroup_param_count as usize,
        )
    }

    /// Switches in effect: baseline mode forces all off.
    pub fn flags(&self) -> Flags {
        match self.schedule.mode {
            Mode::Baseline => Flags::BASELINE,
            Mode::Engine => self.schedule.flags.unwrap_or(Flags::ENGINE),
        }
    }

    pub fn stall_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.schedule.stall_timeout_s)
    }

    /// Builds the tiers, probing those that ask for it.
    pub fn build_tiers(&self) -> Result<Vec<Arc<Tier>>> {
        self.tiers
            .iter()
            .map(|t| {
                let mut tier = match t.kind {
                    TierKind::MemThrottled => Tier::mem_with(
                        t.id,
                        ThrottleSpec {
                            read_bw: t.read_bw,
                            write_bw: t.write_bw,
                            contention_penalty: t.contention_penalty,
                        },
                    ),
                    kind => Tier::dir(
                        TierSpec {
                            tier_id: t.id,
                            kind,
                            root: t.root.clone().expect("validated"),
                            read_bw: t.read_bw,
                            write_bw: t.write_bw,
                            io_parallelism: t.io_parallelism,
                            persistent: t.persistent,
                        },
                        t.throttle,
                    )?,
                };
                if t.probe {
                    tier.probe(16 << 20, 3)?;
                }
                Ok(Arc::new(tier))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
        [model]
        total_params = 1000
        subgroup_param_count = 300

        [[tiers]]
        id = 0
        kind = "mem_throttled"
        read_bw = 2e8
        write_bw = 2e8

        [[tiers]]
        id = 1
        kind = "local_dir"
        root = "/tmp/x"
        read_bw = 1e8
        write_bw = 1e8

        [optim]
        lr = 0.01

        [schedule]
        iterations = 4
        warmup_iterations = 1
        mode = "baseline"

        [[schedule.throttle_changes]]
        iteration = 3
        tier = 1
        read_bw = 5e7
        write_bw = 5e7
    "#;

    #[test]
    fn parses_and_applies_defaults() {
        let c = RunConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(c.subgroup_sizes(), vec![300, 300, 300, 100]);
        assert_eq!(c.flags(), Flags::BASELINE);
        assert_eq!(c.optim.lr, 0.01);
        assert_eq!(c.optim.beta1, 0.9);
        assert_eq!(c.placement.alpha, 0.5);
        assert_eq!(c.schedule.pool_slots, 4);
        assert_eq!(c.schedule.throttle_changes[0].tier, 1);
        let again = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(again.subgroup_sizes(), c.subgroup_sizes());
    }

    #[test]
    fn rejects_bad_configs() {
        let warm = SAMPLE.replace("warmup_iterations = 1", "warmup_iterations = 4");
        assert!(RunConfig::from_toml(&warm).is_err());
        let ids = SAMPLE.replace("id = 1", "id = 2");
        assert!(RunConfig::from_toml(&ids).is_err());
        let root = SAMPLE.replace("root = \"/tmp/x\"", "");
        assert!(RunConfig::from_toml(&root).is_err());
        assert!(RunConfig::from_toml("model = 3").is_err());
    }
}
