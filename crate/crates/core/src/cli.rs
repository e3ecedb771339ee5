//! Command-line front end.
//!
//! Exit codes: 0 success, 1 validation failure, 2 runtime failure, 3 usage error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{ColorChoice, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{parse_config_file, validate_spec, ConfigError, Mode, Policy};
use crate::dag::build_dag;
use crate::engine::{Engine, EngineError};
use crate::metrics::{build_report, summary_text, write_report};
use crate::monitor::write_samples_csv;
use crate::simgpu::{read_kernel_trace, simulate, synth_utilization, SimDevice, SimResult};
use crate::trace::{read_trace, write_json, write_trace, FORMAT_VERSION, SAMPLES_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_USAGE: i32 = 3;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Live,
    Sim,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyArg {
    Greedy,
    Partition,
}

impl From<PolicyArg> for Policy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Greedy => Policy::Greedy,
            PolicyArg::Partition => Policy::StaticPartition,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "genaibench", version, about = "Benchmark concurrent generative-AI apps on one machine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a benchmark file; prints violations and exits 1 when invalid.
    Validate { config: PathBuf },
    /// Print the execution graph of a benchmark file.
    Graph {
        config: PathBuf,
        /// Graphviz output.
        #[arg(long)]
        dot: bool,
    },
    /// Run a benchmark and write the trace and report.
    Run {
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        max_concurrency: Option<usize>,
        /// Monitor period in seconds.
        #[arg(long)]
        sample_interval: Option<f64>,
    },
    /// Rebuild the report from a trace directory.
    Report { dir: PathBuf },
    /// Replay a JSONL kernel trace on the simulated GPU.
    Sim {
        kernels: PathBuf,
        #[arg(long, value_enum, default_value = "greedy")]
        policy: PolicyArg,
        #[arg(long, default_value_t = 72)]
        sm_count: u32,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        sample_interval: f64,
    },
}

/// Failure carrying its exit code.
#[derive(Debug)]
struct Exit(i32, anyhow::Error);

fn invalid(e: anyhow::Error) -> Exit {
    Exit(EXIT_INVALID, e)
}

fn runtime(e: anyhow::Error) -> Exit {
    Exit(EXIT_RUNTIME, e)
}

static INTERRUPTED: AtomicBool = AtomicBool::new(false);

extern "C" fn on_sigint(_: libc::c_int) {
    INTERRUPTED.store(true, Ordering::SeqCst);
}

/// Forward SIGINT to `flag`; a second interrupt falls back to the default action.
fn forward_interrupts(flag: Arc<AtomicBool>) {
    // SAFETY: the handler only stores to an atomic, which is async-signal-safe.
    unsafe {
        libc::signal(libc::SIGINT, on_sigint as extern "C" fn(libc::c_int) as libc::sighandler_t);
    }
    std::thread::spawn(move || loop {
        if INTERRUPTED.load(Ordering::SeqCst) {
            flag.store(true, Ordering::SeqCst);
            // SAFETY: restoring the default disposition.
            unsafe {
                libc::signal(libc::SIGINT, libc::SIG_DFL);
            }
            return;
        }
        std::thread::sleep(Duration::from_millis(50));
    });
}

fn load(config: &Path) -> Result<crate::config::BenchmarkSpec, Exit> {
    let spec = parse_config_file(config).map_err(|e| match e {
        ConfigError::Io { .. } => runtime(e.into()),
        other => invalid(other.into()),
    })?;
    let violations = validate_spec(&spec);
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(|v| format!("  {v}")).collect();
        return Err(invalid(anyhow::anyhow!("{}: invalid benchmark:\n{}", config.display(), list.join("\n"))));
    }
    Ok(spec)
}

fn print_stdout(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes());
    let _ = out.flush();
}

fn cmd_run(
    config: &Path,
    mode: Option<ModeArg>,
    policy: Option<PolicyArg>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    max_concurrency: Option<usize>,
    sample_interval: Option<f64>,
) -> Result<(), Exit> {
    let mut spec = load(config)?;
    let o = &mut spec.options;
    if let Some(m) = mode {
        o.mode = match m {
            ModeArg::Live => Mode::Live,
            ModeArg::Sim => Mode::Simulated,
        };
    }
    if let Some(p) = policy {
        o.policy = p.into();
    }
    if let Some(s) = seed {
        o.seed = s;
    }
    if let Some(d) = out {
        o.output_dir = d;
    }
    if max_concurrency.is_some() {
        o.max_concurrency = max_concurrency;
    }
    if let Some(i) = sample_interval {
        o.sample_interval = i;
    }
    let dir = o.output_dir.clone();
    let mut engine = Engine::new();
    forward_interrupts(engine.abort_flag());
    let trace = engine.run(&spec).map_err(|e| match e {
        EngineError::InvalidSpec(_) => invalid(e.into()),
        other => runtime(other.into()),
    })?;
    write_trace(&dir, &trace)
        .with_context(|| format!("writing trace to {}", dir.display()))
        .map_err(runtime)?;
    let report = build_report(&trace);
    write_report(&dir, &report, &trace)
        .with_context(|| format!("writing report to {}", dir.display()))
        .map_err(runtime)?;
    print_stdout(&summary_text(&report));
    if trace.partial {
        return Err(runtime(anyhow::anyhow!(
            "run incomplete: {} node(s) failed{}",
            trace.failures.len(),
            if trace.interrupted { ", interrupted" } else { "" }
        )));
    }
    Ok(())
}

fn cmd_report(dir: &Path) -> Result<(), Exit> {
    let trace = read_trace(dir)
        .with_context(|| format!("reading trace from {}", dir.display()))
        .map_err(runtime)?;
    let report = build_report(&trace);
    write_report(dir, &report, &trace).map_err(|e| runtime(e.into()))?;
    print_stdout(&summary_text(&report));
    Ok(())
}

#[derive(Serialize)]
struct SimFile<'a> {
    format_version: u32,
    result: &'a SimResult,
}

fn cmd_sim(kernels: &Path, policy: PolicyArg, sm_count: u32, out: Option<PathBuf>, interval: f64) -> Result<(), Exit> {
    let text = std::fs::read_to_string(kernels)
        .with_context(|| format!("reading {}", kernels.display()))
        .map_err(runtime)?;
    let ks = read_kernel_trace(&text).map_err(|e| invalid(e.into()))?;
    let policy: Policy = policy.into();
    let device = match policy {
        Policy::Greedy => SimDevice::new(sm_count),
        Policy::StaticPartition => {
            let mut apps: Vec<String> = ks.iter().map(|k| k.app.clone()).collect();
            apps.sort();
            apps.dedup();
            let ctx = crate::orchestrator::PolicyContext::new(policy, &apps).map_err(|e| invalid(e.into()))?;
            ctx.sim_device(sm_count).map_err(|e| invalid(e.into()))?
        }
    };
    let result = simulate(&device, &ks, policy).map_err(|e| invalid(e.into()))?;
    let mut text = format!(
        "policy {}  sm_count {}  kernels {}  makespan {:.6}s\n",
        policy.as_str(),
        sm_count,
        result.kernels.len(),
        crate::clock::nanos_to_secs(result.makespan_ns())
    );
    for (app, t) in &result.app_completion {
        text.push_str(&format!("  {app:<24} done at {:.6}s\n", crate::clock::nanos_to_secs(*t)));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(runtime)?;
        write_json(
            &dir.join("sim_result.json"),
            &SimFile {
                format_version: FORMAT_VERSION,
                result: &result,
            },
        )
        .map_err(|e| runtime(e.into()))?;
        let samples = synth_utilization(&result, &device, interval);
        let path = dir.join(SAMPLES_FILE);
        let f = std::fs::File::create(&path)
            .with_context(|| format!("creating {}", path.display()))
            .map_err(runtime)?;
        write_samples_csv(std::io::BufWriter::new(f), &samples, &[]).map_err(|e| runtime(e.into()))?;
    }
    print_stdout(&text);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Exit> {
    match cli.command {
        Command::Validate { config } => load(&config).map(|_| ()),
        Command::Graph { config, dot } => {
            let spec = load(&config)?;
            let dag = build_dag(&spec);
            if dot {
                print_stdout(&dag.to_dot());
            } else {
                let mut s = String::new();
                for n in dag.nodes() {
                    let bg = if n.background { " (background)" } else { "" };
                    s.push_str(&format!("{}{bg}\n", n.id));
                    for succ in dag.successors(&n.id) {
                        s.push_str(&format!("  -> {succ}\n"));
                    }
                }
                print_stdout(&s);
            }
            Ok(())
        }
        Command::Run {
            config,
            mode,
            policy,
            seed,
            out,
            max_concurrency,
            sample_interval,
        } => cmd_run(&config, mode, policy, seed, out, max_concurrency, sample_interval),
        Command::Report { dir } => cmd_report(&dir),
        Command::Sim {
            kernels,
            policy,
            sm_count,
            out,
            sample_interval,
        } => cmd_sim(&kernels, policy, sm_count, out, sample_interval),
    }
}

/// Parse `args` (including the program name), run the command, and return the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let color = if std::env::var_os("NO_COLOR").is_some_and(|v| !v.is_empty()) {
        ColorChoice::Never
    } else {
        ColorChoice::Auto
    };
    let matches = match Cli::command().color(color).try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_USAGE;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(Exit(code, e)) => {
            eprintln!("error: {e:#}");
            code
        }
    }
}
