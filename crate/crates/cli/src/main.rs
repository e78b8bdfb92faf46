use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use coapsd::harness::{
    self, expand_range, CanonicalParams, Execution, HarnessError, RunOptions, SweepParam, SweepSpec,
};
use coapsd::sim::Rdc;

/// Run gateway crash-recovery scenarios and delay sweeps on the simulated LLN.
#[derive(Debug, Parser)]
#[command(name = "coapsd", version)]
struct Cli {
    /// Directory for metrics, SD snapshots and traces.
    #[arg(long, global = true, env = "COAPSD_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,

    /// Write the event trace here.
    #[arg(long, global = true)]
    trace: Option<PathBuf>,

    /// Forward only, no state directory (overhead baseline).
    #[arg(long, global = true)]
    no_intercept: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run a scenario file (or a bundled scenario by name) and check its assertions.
    Run {
        scenario: PathBuf,
        /// Also report mean wall-clock interception time per packet.
        #[arg(long)]
        overhead: bool,
    },
    /// Repeat the canonical crash-recovery scenario over a parameter range.
    Sweep {
        #[arg(long)]
        param: SweepParam,
        /// `a..b` (inclusive), a comma list, or RDC names for `rdc`.
        #[arg(long)]
        range: String,
        #[arg(long, default_value_t = 30)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// CSV path; defaults to `sweep-<param>.csv` in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = harness::DEFAULT_HOPS)]
        hops: u32,
        #[arg(long, default_value = "nullrdc")]
        rdc: Rdc,
        #[arg(long, default_value_t = harness::DEFAULT_STATE_COUNT)]
        states: usize,
        /// Run repetitions one after another on this thread.
        #[arg(long)]
        sequential: bool,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let parse = e
                .downcast_ref::<HarnessError>()
                .is_some_and(|h| matches!(h, HarnessError::Parse(_)));
            ExitCode::from(if parse { 2 } else { 3 })
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.cmd {
        Cmd::Run { scenario, overhead } => {
            let opts = RunOptions {
                trace: cli.trace.is_some(),
                intercept: cli.no_intercept.then_some(false),
                measure_overhead: overhead,
            };
            match harness::run_scenario(&scenario, &cli.out_dir, cli.trace.as_deref(), &opts) {
                Ok((outcome, artifacts)) => {
                    for a in &outcome.assertions {
                        println!("ok    {:>10} {}", a.at, a.name);
                    }
                    println!(
                        "{}: {} assertions passed, {} metric rows -> {}",
                        outcome.name,
                        outcome.assertions.len(),
                        outcome.metrics.len(),
                        artifacts.metrics.display()
                    );
                    Ok(ExitCode::SUCCESS)
                }
                Err(e @ HarnessError::AssertionFailure { .. }) => {
                    println!("FAILED {e}");
                    Ok(ExitCode::from(1))
                }
                Err(e) => Err(e.into()),
            }
        }
        Cmd::Sweep {
            param,
            range,
            reps,
            seed,
            out,
            hops,
            rdc,
            states,
            sequential,
        } => {
            if cli.no_intercept {
                bail!("sweeps measure recovery and need interception");
            }
            if cli.trace.is_some() {
                log::warn!("--trace is ignored for sweeps");
            }
            let base = CanonicalParams {
                hops,
                rdc,
                state_count: states,
            };
            let spec = SweepSpec {
                points: expand_range(param, &range, base)?,
                reps,
                seed,
            };
            let exec = if sequential {
                Execution::Sequential
            } else {
                Execution::default()
            };
            let result = harness::sweep(&spec, exec)?;
            let path = out.unwrap_or_else(|| cli.out_dir.join(format!("sweep-{param}.csv")));
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            let records = result.records();
            harness::write_csv(file, &records)?;
            let flagged = result.runs.iter().filter(|r| !r.recovered).count();
            if flagged > 0 {
                eprintln!("warning: {flagged} runs had replay steps time out");
            }
            println!(
                "{} runs, {} rows -> {}",
                result.runs.len(),
                records.len(),
                path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}
