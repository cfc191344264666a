//! Benchmark harness: configuration, the iteration loop, metrics and
//! report files.

pub mod config;
pub mod lockcheck;
pub mod metrics;
pub mod report;
pub mod run;

pub use config::{Mode, RunConfig, ThrottleChange, TierConfig};
pub use metrics::{effective_io_throughput, io_samples, tier_busy, IoSample};
pub use report::{compare, emit_report, load_summary, IterationReport, Summary, WorkerIteration};
pub use run::{run_benchmark, write_trace, BenchOutcome, RunOptions};
