//! The commands behind the `rtcluster` binary. Each one writes its normal
//! output to `out`, diagnostics to `err`, and returns the process status.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use crate::sim::{
    compute_metrics, load_scenario, run_with, LoadError, MetricsSummary, RunOptions, Scenario,
};
use crate::trace::{read_trace, write_trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success,
    ValidationFailure,
    RuntimeError,
    /// The engine's own checks caught a broken invariant during the run.
    InvariantViolation,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        match self {
            ExitStatus::Success => 0,
            ExitStatus::ValidationFailure => 1,
            ExitStatus::RuntimeError => 2,
            ExitStatus::InvariantViolation => 3,
        }
    }
}

impl fmt::Display for ExitStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunArgs {
    pub seed: Option<u64>,
    pub horizon: Option<u64>,
    pub quiet: bool,
    pub parallel: bool,
}

/// Loads and validates a scenario file, printing every diagnostic.
fn load(path: &Path, err: &mut dyn Write) -> Result<Scenario, ExitStatus> {
    let text = fs::read_to_string(path).map_err(|e| {
        let _ = writeln!(err, "{}: {e}", path.display());
        ExitStatus::RuntimeError
    })?;
    load_scenario(&text).map_err(|e| {
        match e {
            LoadError::Parse { .. } => {
                let _ = writeln!(err, "{}: {e}", path.display());
            }
            LoadError::Invalid(errors) => {
                for v in errors {
                    let _ = writeln!(err, "{}: {v}", path.display());
                }
            }
        }
        ExitStatus::ValidationFailure
    })
}

pub fn cmd_validate(path: &Path, err: &mut dyn Write) -> ExitStatus {
    match load(path, err) {
        Ok(_) => ExitStatus::Success,
        Err(status) => status,
    }
}

/// Runs a scenario, writes its trace to `trace_path` and prints a short
/// summary unless `quiet`.
pub fn cmd_run(
    path: &Path,
    trace_path: &Path,
    args: &RunArgs,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> ExitStatus {
    let mut scenario = match load(path, err) {
        Ok(s) => s,
        Err(status) => return status,
    };
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    if let Some(horizon) = args.horizon {
        scenario.horizon = horizon;
        if let Err(errors) = scenario.check() {
            for v in errors {
                let _ = writeln!(err, "{}: {v}", path.display());
            }
            return ExitStatus::ValidationFailure;
        }
    }
    log::info!(
        "running {} for {} ticks (seed {})",
        path.display(),
        scenario.horizon,
        scenario.seed
    );
    let events = run_with(
        &scenario,
        RunOptions {
            parallel: args.parallel,
        },
    );
    if let Err(e) = write_trace(trace_path, &events) {
        let _ = writeln!(err, "{}: {e}", trace_path.display());
        return ExitStatus::RuntimeError;
    }
    let metrics = compute_metrics(&events).expect("the engine writes well-formed traces");
    if !args.quiet {
        if let Err(e) = print_summary(out, &metrics, trace_path) {
            let _ = writeln!(err, "{e}");
            return ExitStatus::RuntimeError;
        }
    }
    if metrics.cluster.invariant_violations > 0 {
        let _ = writeln!(
            err,
            "{} invariant violation(s) detected; see the trace",
            metrics.cluster.invariant_violations
        );
        return ExitStatus::InvariantViolation;
    }
    ExitStatus::Success
}

fn print_summary(out: &mut dyn Write, m: &MetricsSummary, trace_path: &Path) -> io::Result<()> {
    let c = &m.cluster;
    let overload_ticks: u64 = m.nodes.values().map(|n| n.overload_ticks).sum();
    writeln!(out, "ticks                {}", c.ticks)?;
    writeln!(out, "placements           {}", c.placements)?;
    writeln!(out, "redeploys            {}", c.redeploys)?;
    writeln!(out, "rejects              {}", c.rejects)?;
    writeln!(out, "migrations           {}", c.migrations)?;
    writeln!(out, "lost                 {}", c.lost)?;
    writeln!(
        out,
        "request changes      {} granted, {} denied",
        c.request_grants, c.request_denials
    )?;
    writeln!(out, "rt violation ticks   {}", c.rt_violation_ticks)?;
    writeln!(out, "overload ticks       {overload_ticks}")?;
    for (node, n) in &m.nodes {
        writeln!(
            out,
            "  {node:<18} {} overloaded of {} up",
            n.overload_ticks, n.up_ticks
        )?;
    }
    writeln!(out, "invariant violations {}", c.invariant_violations)?;
    writeln!(out, "trace                {}", trace_path.display())
}

/// Prints the metrics of a trace as pretty JSON, optionally restricted to
/// one container or node.
pub fn cmd_metrics(
    trace_path: &Path,
    filter: Option<&str>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> ExitStatus {
    let events = match read_trace(trace_path) {
        Ok(events) => events,
        Err(e) => {
            let _ = writeln!(err, "{}: {e}", trace_path.display());
            return ExitStatus::RuntimeError;
        }
    };
    let metrics = match compute_metrics(&events) {
        Ok(m) => m,
        Err(e) => {
            let _ = writeln!(err, "{}: {e}", trace_path.display());
            return ExitStatus::RuntimeError;
        }
    };
    let metrics = match filter {
        None => metrics,
        Some(id) => match metrics.filtered(id) {
            Some(m) => m,
            None => {
                let _ = writeln!(
                    err,
                    "no container or node `{id}` in {}",
                    trace_path.display()
                );
                return ExitStatus::ValidationFailure;
            }
        },
    };
    let text = serde_json::to_string_pretty(&metrics).expect("metrics always serialize");
    match writeln!(out, "{text}") {
        Ok(()) => ExitStatus::Success,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            ExitStatus::RuntimeError
        }
    }
}
