//! Command-line front end: run scenarios, validate feeders, sweep
//! penetration levels, and demonstrate grid-edge voltage inference.
//!
//! Logging verbosity comes from the `GRIDSWARM_LOG` environment variable
//! (`error`, `warn`, `info`, `debug`, `trace`); the default is `warn`.
//! Usage errors exit with code 2 (clap's convention); runtime failures
//! print one machine-readable JSON line to stderr and exit with code 1.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gridswarm::engine::{infer_demo, run_to_files, sweep, RunOptions};
use gridswarm::error::EngineError;
use gridswarm::par::{with_workers, Execution};
use gridswarm::powerflow::{residuals, solve, SolveOptions};
use gridswarm::scenario::{load_feeder, load_scenario, ControlMode};
use gridswarm::sensitivity::{exact_sensitivity, lossless_sensitivity, ExactOptions};

#[derive(Parser)]
#[command(
    name = "gridswarm",
    version,
    about = "Co-simulation of radial feeders under distributed grid-edge control"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write its CSV log, JSON summary, and optional
    /// message trace.
    Run {
        /// Scenario JSON file.
        scenario: PathBuf,
        /// Output directory for the artifacts.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Override the scenario's control mode (none | q | qp).
        #[arg(long, value_parser = parse_mode)]
        mode: Option<ControlMode>,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Pin the worker-thread count (default: rayon's choice).
        #[arg(long)]
        workers: Option<usize>,
        /// Run the per-agent updates sequentially.
        #[arg(long)]
        sequential: bool,
    },
    /// Load a feeder, solve its base case, and print the power-flow
    /// residuals plus sensitivity spot checks.
    Validate {
        /// Feeder JSON file.
        feeder: PathBuf,
    },
    /// Re-scale the DER fleet across penetration levels and report the
    /// static network extremes per level.
    Sweep {
        /// Scenario JSON file.
        scenario: PathBuf,
        /// Level range as from:to:step, e.g. 0.2:1.5:0.1.
        #[arg(long)]
        penetration: String,
        /// Pin the worker-thread count.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run the scenario open-loop and compare inferred voltages at sampled
    /// buses against the truth and the stale snapshots.
    InferDemo {
        /// Scenario JSON file.
        scenario: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<ControlMode, String> {
    match s {
        "none" => Ok(ControlMode::None),
        "q" | "q_only" => Ok(ControlMode::QOnly),
        "qp" | "q_and_p" => Ok(ControlMode::QAndP),
        other => Err(format!("unknown mode '{other}' (expected none | q | qp)")),
    }
}

/// One machine-readable error line on stderr.
fn emit_error(kind: &str, message: &str) {
    eprintln!(
        "{}",
        serde_json::json!({ "error": kind, "message": message })
    );
}

fn error_kind(e: &EngineError) -> &'static str {
    match e {
        EngineError::Config(_) => "config",
        EngineError::PowerFlow(_) => "power_flow",
        EngineError::Comms(_) => "comms",
        EngineError::Sensitivity(_) => "sensitivity",
        EngineError::NotConverged { .. } => "not_converged",
        EngineError::Output { .. } => "output",
    }
}

fn cmd_run(
    scenario: &Path,
    out: &Path,
    mode: Option<ControlMode>,
    seed: Option<u64>,
    workers: Option<usize>,
    sequential: bool,
) -> ExitCode {
    let sc = match load_scenario(scenario) {
        Ok(sc) => sc,
        Err(e) => {
            emit_error("config", &e.to_string());
            return ExitCode::from(1);
        }
    };
    let opts = RunOptions {
        mode,
        seed,
        execution: if sequential { Execution::Sequential } else { Execution::default() },
        capture_trace: false,
    };
    let result = with_workers(workers, || run_to_files(&sc, &opts, out));
    match result {
        Ok((outcome, written)) => {
            let s = &outcome.summary;
            println!("scenario   {}", s.name);
            println!("mode       {}", s.control_mode);
            println!("steps      {} ({} s horizon)", s.steps_run, s.duration_s);
            println!("v range    [{:.5}, {:.5}] pu at the last step", s.final_v_min, s.final_v_max);
            println!("curtailed  {:.3} %", s.final_curtail_pct);
            println!("losses     {:.6} pu", s.final_loss_total);
            println!("messages   {}", s.messages_sent);
            for p in &written {
                println!("wrote      {}", p.display());
            }
            if let Some(f) = &outcome.failure {
                emit_error(error_kind(f), &f.to_string());
                return ExitCode::from(1);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            emit_error(error_kind(&e), &e.to_string());
            ExitCode::from(1)
        }
    }
}

fn cmd_validate(feeder: &Path) -> ExitCode {
    let bundle = match load_feeder(feeder) {
        Ok(b) => b,
        Err(e) => {
            emit_error("config", &e.to_string());
            return ExitCode::from(1);
        }
    };
    let n = bundle.network.bus_count();
    println!("feeder     {}", bundle.name);
    println!("buses      {}", n);
    println!("devices    {} generators, {} loads", bundle.devices.ders.len(), bundle.devices.loads.len());

    let injections = bundle.devices.injections_at(n, 0.0);
    let sol = match solve(&bundle.network, &injections, SolveOptions::default()) {
        Ok(s) => s,
        Err(e) => {
            emit_error("power_flow", &e.to_string());
            return ExitCode::from(1);
        }
    };
    let res = residuals(&bundle.network, &injections, &sol);
    println!("base-case power flow: {} iterations, converged = {}", sol.iterations, sol.converged);
    println!("  residuals  real power     {:>12.3e}", res.power_p);
    println!("             reactive power {:>12.3e}", res.power_q);
    println!("             voltage drop   {:>12.3e}", res.voltage);
    println!("             branch current {:>12.3e}", res.current);
    println!(
        "  voltage range [{:.5}, {:.5}] pu, losses {:.6} pu",
        sol.v.iter().copied().fold(f64::INFINITY, f64::min),
        sol.v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        sol.total_loss()
    );

    match exact_sensitivity(&bundle.network, &sol, &ExactOptions::default()) {
        Ok(exact) => {
            let lossless = lossless_sensitivity(&bundle.network);
            println!("sensitivity spot checks (dV_k/dq_j, exact vs lossless):");
            let spots: Vec<usize> = bundle
                .devices
                .ders
                .iter()
                .map(|d| d.bus)
                .chain(1..n)
                .take(3.min(n.saturating_sub(1)))
                .collect();
            for &b in &spots {
                println!(
                    "  bus {:>4}: self {:>10.6} vs {:>10.6}",
                    b, exact.dv_dq[b][b], lossless.dv_dq[b][b]
                );
            }
        }
        Err(e) => {
            emit_error("sensitivity", &e.to_string());
            return ExitCode::from(1);
        }
    }

    if !sol.converged || res.max() > 1e-8 {
        emit_error("power_flow", "base case failed to converge to tolerance");
        return ExitCode::from(1);
    }
    ExitCode::SUCCESS
}

fn parse_range(s: &str) -> Result<(f64, f64, f64), String> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(format!("expected from:to:step, got '{s}'"));
    }
    let nums: Result<Vec<f64>, _> = parts.iter().map(|p| p.parse::<f64>()).collect();
    match nums {
        Ok(v) => Ok((v[0], v[1], v[2])),
        Err(e) => Err(format!("bad number in '{s}': {e}")),
    }
}

fn cmd_sweep(scenario: &Path, penetration: &str, workers: Option<usize>) -> ExitCode {
    let (from, to, step) = match parse_range(penetration) {
        Ok(r) => r,
        Err(m) => {
            emit_error("config", &m);
            return ExitCode::from(1);
        }
    };
    let sc = match load_scenario(scenario) {
        Ok(sc) => sc,
        Err(e) => {
            emit_error("config", &e.to_string());
            return ExitCode::from(1);
        }
    };
    let rows = match with_workers(workers, || sweep(&sc, from, to, step, Execution::default())) {
        Ok(r) => r,
        Err(e) => {
            emit_error(error_kind(&e), &e.to_string());
            return ExitCode::from(1);
        }
    };
    println!("{:>12} {:>10} {:>10} {:>10} {:>11}", "penetration", "v_max", "v_min", "violation", "converged");
    let mut knee: Option<f64> = None;
    for r in &rows {
        println!(
            "{:>12.3} {:>10.5} {:>10.5} {:>10.5} {:>11}",
            r.penetration, r.v_max, r.v_min, r.violation, r.converged
        );
        if knee.is_none() && r.converged && r.violation > 0.0 {
            knee = Some(r.penetration);
        }
    }
    match knee {
        Some(k) => println!("first violating level (knee): {k:.3}"),
        None => println!("no voltage violation inside the swept range"),
    }
    ExitCode::SUCCESS
}

fn cmd_infer_demo(scenario: &Path) -> ExitCode {
    let sc = match load_scenario(scenario) {
        Ok(sc) => sc,
        Err(e) => {
            emit_error("config", &e.to_string());
            return ExitCode::from(1);
        }
    };
    let report = match infer_demo(&sc, &RunOptions::default()) {
        Ok(r) => r,
        Err(e) => {
            emit_error(error_kind(&e), &e.to_string());
            return ExitCode::from(1);
        }
    };
    if report.is_empty() {
        println!("the scenario has no sampled buses to infer");
        return ExitCode::SUCCESS;
    }
    println!(
        "{:>5} {:>10} {:>10} {:>9} {:>10} {:>11}",
        "bus", "truth", "inferred", "err_%", "stale", "stale_err_%"
    );
    for r in &report {
        println!(
            "{:>5} {:>10.5} {:>10.5} {:>9.4} {:>10.5} {:>11.4}",
            r.bus, r.truth, r.inferred, r.error_pct, r.stale, r.stale_error_pct
        );
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("GRIDSWARM_LOG", "warn"),
    )
    .init();
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { scenario, out, mode, seed, workers, sequential } => {
            cmd_run(&scenario, &out, mode, seed, workers, sequential)
        }
        Cmd::Validate { feeder } => cmd_validate(&feeder),
        Cmd::Sweep { scenario, penetration, workers } => {
            cmd_sweep(&scenario, &penetration, workers)
        }
        Cmd::InferDemo { scenario } => cmd_infer_demo(&scenario),
    }
}
