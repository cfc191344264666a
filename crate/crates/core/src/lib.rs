//! Multi-level, multi-path offloading of FP32 optimizer state.
//!
//! Optimizer state is split into fixed-size [`Subgroup`]s that live either
//! in a bounded host buffer pool or on one of several third-level storage
//! tiers. Each update phase streams subgroups through an overlapped
//! prefetch / update / flush pipeline whose tier assignment follows the
//! measured bandwidth of each tier, whose processing order alternates to
//! reuse whatever the previous phase left in host memory, and whose tier
//! access is serialized per node through advisory file locks.
//!
//! The [`harness`] module drives the engine from a configuration file and
//! reports the iteration breakdown, update throughput, effective I/O
//! throughput and state distribution of every iteration.

pub mod error;
pub mod harness;
pub mod optimizer;
pub mod exec;
pub mod placement;
pub mod precision;
pub mod scheduler;
pub mod tier;
pub mod trace;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use optimizer::{adam_step, update_throughput, AdamHyper, Residency, Subgroup};
pub use placement::{assign_subgroups, AllocationVector, BandwidthEstimate};
pub use precision::{downscale_f32_to_f16, upscale_f16_to_f32, GradBufferF16};
pub use scheduler::{Engine, EngineConfig, Flags, UpdatePlan};
pub use tier::{Tier, TierKind, TierSpec};
pub use trace::{Event, EventKind, EventTrace};
