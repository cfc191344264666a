//! Command-line benchmark driver.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use tierflow::harness::config::Mode;
use tierflow::harness::lockcheck::{self, LockCheck};
use tierflow::harness::run::run_worker_process;
use tierflow::harness::{compare, emit_report, load_summary, run_benchmark, write_trace, RunConfig, RunOptions};
use tierflow::scheduler::Flags;
use tierflow::tier::{probe_bandwidth, Tier, TierKind, TierSpec};
use tierflow::trace::lock_overlaps;

#[derive(Parser)]
#[command(name = "bench", about = "Optimizer-state offloading benchmark")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a benchmark from a config file.
    Run(RunArgs),
    /// Measure read and write bandwidth of a directory.
    Probe {
        #[arg(long)]
        tier: PathBuf,
        #[arg(long, default_value_t = 64)]
        mib: usize,
        #[arg(long, default_value_t = 3)]
        repetitions: usize,
    },
    /// Speedup of report A over report B.
    Compare { a: PathBuf, b: PathBuf },
    /// Hammer the tier locks and check that no two holds overlap.
    Lockcheck {
        #[arg(long, default_value_t = 4)]
        workers: u32,
        #[arg(long, default_value_t = 2)]
        tiers: u16,
        /// Acquisitions per worker.
        #[arg(long, default_value_t = 200)]
        ops: u32,
        #[arg(long, default_value_t = 100)]
        hold_us: u64,
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long)]
        multiprocess: bool,
    },
    #[command(hide = true)]
    Worker {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        worker_id: u32,
        #[arg(long)]
        epoch: u64,
        #[arg(long)]
        out: PathBuf,
    },
    #[command(hide = true)]
    LockWorker {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        worker_id: u32,
        #[arg(long)]
        tiers: u16,
        #[arg(long)]
        ops: u32,
        #[arg(long)]
        hold_us: u64,
        #[arg(long)]
        epoch: u64,
        #[arg(long)]
        trace_out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long)]
    trace_out: Option<PathBuf>,
    #[arg(long)]
    report_out: Option<PathBuf>,
    /// Summary of a baseline run to compute the speedup against.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    multiprocess: bool,
    /// When any switch is given, exactly the given switches are on.
    #[arg(long)]
    enable_caching: bool,
    #[arg(long)]
    skip_gradients: bool,
    #[arg(long)]
    atomic_rw: bool,
    #[arg(long)]
    multi_path: bool,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "engine" => Ok(Mode::Engine),
        "baseline" => Ok(Mode::Baseline),
        _ => Err(format!("unknown mode {s:?} (engine or baseline)")),
    }
}

impl RunArgs {
    fn flags(&self) -> Option<Flags> {
        let f = Flags {
            enable_caching: self.enable_caching,
            skip_gradients: self.skip_gradients,
            atomic_rw: self.atomic_rw,
            multi_path: self.multi_path,
        };
        (f != Flags::BASELINE).then_some(f)
    }
}

fn run(args: RunArgs) -> tierflow::Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    if let Some(dir) = &args.report_out {
        std::fs::create_dir_all(dir).map_err(|e| tierflow::Error::Config(format!("{}: {e}", dir.display())))?;
    }
    let opts = RunOptions {
        mode: args.mode,
        flags: args.flags(),
        multiprocess: args.multiprocess,
        ..RunOptions::default()
    };
    let out = run_benchmark(&cfg, &opts)?;
    let mut summary = out.summary;
    if let Some(b) = &args.baseline {
        summary = summary.with_baseline(&load_summary(b)?);
    }
    if let Some(path) = &args.trace_out {
        write_trace(path, &out.events)?;
    }
    if let Some(dir) = &args.report_out {
        emit_report(dir, &summary, &out.iterations)?;
    }
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run(args) => run(args),
        Cmd::Probe {
            tier,
            mib,
            repetitions,
        } => Tier::dir(
            TierSpec {
                tier_id: 0,
                kind: TierKind::LocalDir,
                root: tier,
                read_bw: 1.0,
                write_bw: 1.0,
                io_parallelism: 1,
                persistent: false,
            },
            None,
        )
        .and_then(|t| probe_bandwidth(&t, mib << 20, repetitions))
        .map(|r| println!("{}", serde_json::to_string_pretty(&r).expect("probe serializes"))),
        Cmd::Compare { a, b } => load_summary(&a).and_then(|sa| {
            let sb = load_summary(&b)?;
            println!("{}", serde_json::to_string_pretty(&compare(&sa, &sb)).expect("serializes"));
            Ok(())
        }),
        Cmd::Lockcheck {
            workers,
            tiers,
            ops,
            hold_us,
            dir,
            multiprocess,
        } => (|| {
            let scratch = tempfile::tempdir().map_err(|e| tierflow::Error::Config(e.to_string()))?;
            let check = LockCheck {
                dir: dir.unwrap_or_else(|| scratch.path().to_path_buf()),
                workers,
                tiers,
                ops,
                hold: Duration::from_micros(hold_us),
            };
            let events = if multiprocess {
                let exe = std::env::current_exe().map_err(|e| tierflow::Error::Config(e.to_string()))?;
                lockcheck::run_processes(&check, &exe)?
            } else {
                lockcheck::run_threads(&check)?
            };
            let overlaps = lock_overlaps(&events).len();
            println!("lock holds: {}, overlapping pairs: {overlaps}", events.len() / 2);
            if overlaps > 0 {
                return Err(tierflow::Error::Config(format!("{overlaps} overlapping lock holds")));
            }
            Ok(())
        })(),
        Cmd::Worker {
            config,
            worker_id,
            epoch,
            out,
        } => RunConfig::load(&config).and_then(|cfg| run_worker_process(&cfg, worker_id, epoch, &out)),
        Cmd::LockWorker {
            dir,
            worker_id,
            tiers,
            ops,
            hold_us,
            epoch,
            trace_out,
        } => lockcheck::run_lock_worker_process(
            &dir,
            worker_id,
            tiers,
            ops,
            Duration::from_micros(hold_us),
            epoch,
            &trace_out,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
