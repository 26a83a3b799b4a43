//! Command-line front end.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::channel::draw_channels;
use crate::error::{Error, Result};
use crate::fedlearn::{gap_bound_check, train, TrainState};
use crate::numerics::RngStream;
use crate::scheduler::{check_constraints, schedule, Policy};
use crate::sensing::sense;

use super::config::{parse_config, RunConfig};
use super::experiment::{build_federation, format_float, render_csv, run_trials, summarize, ExperimentSpec};
use super::selftest::run_selftest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "otafeel", version, about = "Over-the-air federated edge learning with integrated sensing")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Configuration file with [system], [feel] and [sweep] sections
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base seed, overrides `seed` from the configuration
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output file (CSV for `sweep` and `train`)
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Monte-Carlo trials (`sweep`) or sensing blocks (`sense`)
    #[arg(long, global = true, value_name = "N")]
    trials: Option<usize>,
    /// Override a configuration key, `key=value` or `section.key=value`
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve one scheduling problem and print the outcome and trace
    Schedule {
        #[arg(long, default_value = "mp")]
        policy: String,
    },
    /// Run one scheduling solve followed by sensing; print CRB against empirical MSE
    Sense {
        #[arg(long, default_value = "mp")]
        policy: String,
    },
    /// Run federated training and print per-round metrics
    Train,
    /// Run the configured parameter sweep and write the summary CSV
    Sweep,
    /// Run the built-in oracle checks
    Selftest,
}

fn key_listing() -> String {
    let mut s = String::from("Configuration keys and defaults (file sections or --set):\n\n");
    for line in RunConfig::default().render().lines() {
        let _ = writeln!(s, "  {line}");
    }
    s.push_str("\nExit status: 0 success, 1 invalid usage or configuration, 2 runtime error, 3 infeasible experiment.");
    s
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) | Error::Parse { .. } => EXIT_VALIDATION,
        Error::InfeasibleSnrFloor { .. } => EXIT_INFEASIBLE,
        _ => EXIT_RUNTIME,
    }
}

fn load_config(global: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::InvalidConfig(vec![format!("cannot read config {}: {e}", path.display())]))?;
            parse_config(&text)?
        }
        None => RunConfig::default(),
    };
    let mut errs = Vec::new();
    for o in &global.overrides {
        if let Err(e) = cfg.apply_override(o) {
            match e {
                Error::InvalidConfig(v) => errs.extend(v.into_iter().map(|m| format!("--set {o}: {m}"))),
                other => errs.push(format!("--set {o}: {other}")),
            }
        }
    }
    if !errs.is_empty() {
        return Err(Error::InvalidConfig(errs));
    }
    if let Some(seed) = global.seed {
        cfg.system.seed = seed;
    }
    if let Some(t) = global.trials {
        cfg.sweep.trials = t;
    }
    if let Some(out) = &global.out {
        cfg.sweep.out = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_schedule(cfg: &RunConfig, policy: Policy) -> Result<i32> {
    let sys = &cfg.system;
    let real = draw_channels(sys, &mut RngStream::derive(sys.seed, &[0, 0]))?;
    let base = vec![1.0; sys.n_devices];
    let out = schedule(&real, sys, policy, &base, Some(&mut RngStream::derive(sys.seed, &[0, 1, policy as u64])))?;
    println!("{}", out.log_lines().trim_end());
    if out.feasible {
        let check = check_constraints(&out, &real, &base, sys)?;
        println!("constraints_verified={}", check.all());
        Ok(EXIT_OK)
    } else {
        Ok(EXIT_INFEASIBLE)
    }
}

fn cmd_sense(cfg: &RunConfig, policy: Policy, blocks: usize) -> Result<i32> {
    let sys = &cfg.system;
    let real = draw_channels(sys, &mut RngStream::derive(sys.seed, &[0, 0]))?;
    let base = vec![1.0; sys.n_devices];
    let out = schedule(&real, sys, policy, &base, Some(&mut RngStream::derive(sys.seed, &[0, 1, policy as u64])))?;
    let est = sense(sys, &real, &out.w, &out.scaling, true, blocks, &mut RngStream::derive(sys.seed, &[0, 2]))?;
    let mse = est.empirical_mse.unwrap_or(f64::NAN);
    println!(
        "policy={} feasible={} selected={} blocks={blocks} crb={:e} empirical_mse={:e} mse_over_crb={:.4} relative_mse={:e}",
        policy.name(),
        out.feasible,
        out.set.len(),
        est.crb,
        mse,
        mse / est.crb,
        est.relative_mse.unwrap_or(f64::NAN),
    );
    Ok(EXIT_OK)
}

pub const TRAIN_CSV_HEADER: &str = "round,loss,accuracy,gap,selected,agg_error,agg_mse,noise_budget,fallback";

/// One CSV line per round of a finished run.
pub fn train_csv(state: &TrainState) -> String {
    let mut s = String::from(TRAIN_CSV_HEADER);
    s.push('\n');
    for t in 0..state.loss_history.len() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            t + 1,
            format_float(state.loss_history[t]),
            format_float(state.acc_history[t]),
            format_float(state.gap_history[t]),
            state.selected_history[t],
            format_float(state.agg_error_history[t]),
            format_float(state.agg_mse_history[t]),
            format_float(state.noise_budget_history[t]),
            u8::from(state.fallback_rounds.contains(&t)),
        );
    }
    s
}

fn cmd_train(cfg: &RunConfig, out: Option<&Path>) -> Result<i32> {
    let sys = &cfg.system;
    let fed = build_federation(sys, &cfg.feel, &cfg.dataset, sys.seed)?;
    let state = train(sys, &fed, sys.seed)?;
    for t in 0..state.loss_history.len() {
        println!(
            "round={} loss={:.6} accuracy={:.4} gap={:.3e} selected={} agg_error={:.3e} fallback={}",
            t + 1,
            state.loss_history[t],
            state.acc_history[t],
            state.gap_history[t],
            state.selected_history[t],
            state.agg_error_history[t],
            state.fallback_rounds.contains(&t),
        );
    }
    if cfg.feel.track_gap {
        let report = gap_bound_check(&state.gap_history, cfg.feel.reg, fed.l_lip, &state.noise_budget_history);
        println!(
            "gap_recursion_holds={}/{} converged_gap={:.3e} fixed_point={:.3e}",
            report.rounds_holding, report.rounds_checked, report.converged_gap, report.fixed_point
        );
    }
    if let Some(path) = out {
        fs::write(path, train_csv(&state))?;
    }
    Ok(EXIT_OK)
}

fn cmd_sweep(cfg: &RunConfig) -> Result<i32> {
    let out = cfg.sweep.out.clone().unwrap_or_default();
    let spec = ExperimentSpec::from_config(cfg, out.clone())?;
    let records = run_trials(&spec)?;
    let rows = summarize(&spec, &records);
    let csv = render_csv(&rows);
    if out.as_os_str().is_empty() {
        print!("{csv}");
    } else {
        fs::write(&out, csv)?;
        for r in &rows {
            eprintln!(
                "{}={} policy={} mean_selected={:.3} mean_crb={:.4e} feasible_rate={:.3}",
                spec.variable.key(),
                r.sweep_value,
                r.policy.name(),
                r.mean_selected,
                r.mean_crb,
                r.feasible_rate
            );
        }
    }
    if records.iter().all(|r| !r.feasible) {
        eprintln!("every trial was infeasible");
        return Ok(EXIT_INFEASIBLE);
    }
    Ok(EXIT_OK)
}

fn cmd_selftest(cfg: &RunConfig) -> Result<i32> {
    let results = run_selftest(&cfg.system)?;
    for r in &results {
        println!("{}", r.line());
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", results.len());
    Ok(if failed == 0 { EXIT_OK } else { EXIT_RUNTIME })
}

fn dispatch(cli: Cli) -> Result<i32> {
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Schedule { policy } => cmd_schedule(&cfg, Policy::parse(&policy)?),
        Command::Sense { policy } => cmd_sense(&cfg, Policy::parse(&policy)?, cli.global.trials.unwrap_or(1).max(1)),
        Command::Train => cmd_train(&cfg, cli.global.out.as_deref()),
        Command::Sweep => cmd_sweep(&cfg),
        Command::Selftest => cmd_selftest(&cfg),
    }
}

/// Parses `args` (including the program name), runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let command = Cli::command().after_help(key_listing());
    let cli = match command.try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_VALIDATION,
            };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            match &e {
                Error::InvalidConfig(v) => {
                    eprintln!("error: invalid configuration");
                    for m in v {
                        eprintln!("  {m}");
                    }
                }
                other => eprintln!("error: {other}"),
            }
            exit_code(&e)
        }
    }
}
