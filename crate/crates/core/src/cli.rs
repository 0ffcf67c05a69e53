//! `offload-sim` command line.
//!
//! Exit codes: 0 success, 1 invalid configuration, 2 run aborted (broken
//! invariant or io failure), 64 usage error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::domain::{validate_config, SystemConfig};
use crate::engine::{self, read_meta, read_metrics_csv, EngineError, RunSummary, SweepAxis, SweepSpec, METRICS_FILE};
use crate::policies::Policy;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_ABORT: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

/// Environment variable that replaces the default output directory.
pub const OUT_ENV: &str = "OFFLOAD_SIM_OUT";

#[derive(Debug, Parser)]
#[command(name = "offload-sim", version, about = "Multi-edge-server service offloading simulator")]
struct Cli {
    /// Print extra diagnostics to stderr.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override a field by dotted path, e.g. `control_v=500` or
    /// `servers.*.max_queue=3000`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a configuration and list every violated invariant.
    Validate {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run one simulation and write metrics.csv and meta.json.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run seed; defaults to the configuration's rng_seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "ldso")]
        policy: Policy,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every combination of axis values, policies and seeds.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// One of control_V, poisson_mean, weight_theta, Q_max.
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long = "policy", value_delimiter = ',', default_value = "ldso")]
        policies: Vec<Policy>,
        /// Base seeds; defaults to the configuration's rng_seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Worker threads; defaults to the number of cores.
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute run summaries from metrics files and check them against
    /// the recorded metadata.
    Summarize {
        /// Run directories holding metrics.csv and meta.json.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

/// Sets `path` (dot separated, `*` matches every array element) to `value`.
/// Every addressed key must already exist.
pub fn apply_override(root: &mut Value, path: &str, value: Value) -> Result<(), String> {
    fn walk(node: &mut Value, parts: &[&str], value: &Value, full: &str) -> Result<(), String> {
        let Some((head, rest)) = parts.split_first() else {
            *node = value.clone();
            return Ok(());
        };
        match node {
            Value::Object(map) => {
                let child = map
                    .get_mut(*head)
                    .ok_or_else(|| format!("{full}: no field {head:?}"))?;
                walk(child, rest, value, full)
            }
            Value::Array(items) if *head == "*" => {
                items.iter_mut().try_for_each(|c| walk(c, rest, value, full))
            }
            Value::Array(items) => {
                let idx: usize = head
                    .parse()
                    .map_err(|_| format!("{full}: {head:?} is not an index or *"))?;
                let len = items.len();
                let child = items
                    .get_mut(idx)
                    .ok_or_else(|| format!("{full}: index {idx} out of range {len}"))?;
                walk(child, rest, value, full)
            }
            _ => Err(format!("{full}: {head:?} addresses inside a scalar")),
        }
    }
    let parts: Vec<&str> = path.split('.').collect();
    walk(root, &parts, &value, path)
}

fn parse_override(spec: &str) -> Result<(String, Value), String> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| format!("override {spec:?} is not PATH=VALUE"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path.to_string(), value))
}

/// Loads the configuration and applies the overrides.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<SystemConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut value: Value = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    for spec in overrides {
        let (p, v) = parse_override(spec)?;
        apply_override(&mut value, &p, v)?;
    }
    SystemConfig::from_value(value).map_err(|e| e.to_string())
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn engine_exit(e: &EngineError) -> i32 {
    match e {
        EngineError::Invalid(_) => EXIT_INVALID,
        _ => EXIT_ABORT,
    }
}

/// Loads and validates, reporting problems on `err`.
fn checked_config(args: &ConfigArgs, err: &mut dyn Write) -> Result<SystemConfig, i32> {
    let cfg = load_config(&args.config, &args.overrides).map_err(|e| {
        let _ = writeln!(err, "error: {e}");
        EXIT_INVALID
    })?;
    let report = validate_config(&cfg);
    if !report.is_ok() {
        for v in &report.violations {
            let _ = writeln!(err, "violation: {v}");
        }
        return Err(EXIT_INVALID);
    }
    Ok(cfg)
}

fn summary_line(s: &RunSummary) -> String {
    format!(
        "avg_cost={} avg_q_total={} offloaded_bits={} deferred_bits={} stabilization_slot={}",
        s.avg_cost,
        s.avg_q_total,
        s.total_offloaded_bits,
        s.total_deferred_bits,
        s.stabilization_slot.map_or("none".to_string(), |x| x.to_string())
    )
}

fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match cli.command {
        Command::Validate { config } => match checked_config(&config, err) {
            Ok(cfg) => {
                let _ = writeln!(
                    out,
                    "ok: {} servers, {} services, hash {}",
                    cfg.server_count(),
                    cfg.service_count(),
                    cfg.config_hash()
                );
                EXIT_OK
            }
            Err(code) => {
                let _ = writeln!(out, "invalid: {}", config.config.display());
                code
            }
        },
        Command::Run {
            config,
            seed,
            policy,
            out: dir,
        } => {
            let cfg = match checked_config(&config, err) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let seed = seed.unwrap_or(cfg.rng_seed);
            let dir = out_dir(dir);
            if cli.verbose > 0 {
                for note in engine::physics_report(&cfg).notes {
                    let _ = writeln!(err, "physics: {note}");
                }
            }
            match engine::run_to_dir(&cfg, policy, seed, &dir) {
                Ok(meta) => {
                    let _ = writeln!(
                        out,
                        "run policy={policy} seed={seed} slots={} {} dir={}",
                        meta.summary.slots,
                        summary_line(&meta.summary),
                        dir.display()
                    );
                    EXIT_OK
                }
                Err(e) => {
                    let _ = writeln!(err, "error: {e}");
                    engine_exit(&e)
                }
            }
        }
        Command::Sweep {
            config,
            axis,
            values,
            policies,
            seeds,
            threads,
            out: dir,
        } => {
            let cfg = match checked_config(&config, err) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let dir = out_dir(dir);
            let spec = SweepSpec {
                axis,
                values,
                policies,
                seeds: if seeds.is_empty() { vec![cfg.rng_seed] } else { seeds },
                threads,
            };
            match engine::sweep(&cfg, &spec, Some(&dir)) {
                Ok(runs) => {
                    let failed: Vec<_> = runs.iter().filter(|r| r.outcome.is_err()).collect();
                    for r in &failed {
                        if let Err(e) = &r.outcome {
                            let _ = writeln!(
                                err,
                                "run {}={} policy={} seed={} failed: {e}",
                                axis.name(),
                                r.value,
                                r.policy,
                                r.base_seed
                            );
                        }
                    }
                    let _ = writeln!(
                        out,
                        "sweep axis={} runs={} failed={} summary={}",
                        axis.name(),
                        runs.len(),
                        failed.len(),
                        dir.join(engine::SWEEP_SUMMARY_FILE).display()
                    );
                    if failed.is_empty() {
                        EXIT_OK
                    } else {
                        EXIT_ABORT
                    }
                }
                Err(e) => {
                    let _ = writeln!(err, "error: {e}");
                    engine_exit(&e)
                }
            }
        }
        Command::Summarize { runs } => {
            let mut code = EXIT_OK;
            for dir in runs {
                let result = read_metrics_csv(&dir.join(METRICS_FILE)).and_then(|rows| {
                    let meta = read_meta(&dir)?;
                    Ok((RunSummary::from_rows(&rows), meta))
                });
                match result {
                    Ok((recomputed, meta)) => {
                        let agrees = recomputed == meta.summary;
                        let _ = writeln!(
                            out,
                            "{} policy={} seed={} {} recorded_summary={}",
                            dir.display(),
                            meta.policy,
                            meta.seed,
                            summary_line(&recomputed),
                            if agrees { "match" } else { "MISMATCH" }
                        );
                        if !agrees {
                            code = EXIT_ABORT;
                        }
                    }
                    Err(e) => {
                        let _ = writeln!(err, "{}: {e}", dir.display());
                        code = EXIT_ABORT;
                    }
                }
            }
            code
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli, out, err),
        Err(e) => {
            use clap::error::ErrorKind;
            match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    EXIT_USAGE
                }
            }
        }
    }
}
