//! `dermpc` command-line front end.
//!
//! Exit codes: 0 success, 1 verification or simulation failure, 2 configuration error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use dermpc::error::Error;
use dermpc::qp_solver::dump_problem;
use dermpc::scenario::Scenario;
use dermpc::simulator::{capture_problem, error_surface, run, summarize};
use dermpc::verify::{run_suites, VerifyOptions};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "dermpc", version, about = "Multirate MPC dispatch of DERs for ancillary services")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write its trace, summary and solver diagnostics.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Plant steps with voltage or current violations tolerated before exiting with 1.
        #[arg(long, default_value_t = 0)]
        violation_budget: usize,
    },
    /// Linearization error surface over the (k_p, k_q) ramp grid.
    SweepError {
        #[command(flatten)]
        scenario: OptionalScenarioArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        granularity: f64,
    },
    /// Run the built-in verification suites.
    Verify {
        /// Also write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 200)]
        qp_instances: usize,
        /// Negative control: corrupt one BIBC entry before the suites run.
        #[arg(long, hide = true)]
        corrupt_bibc: bool,
    },
    /// Write the controller QP of one step in the plain-text problem format.
    DumpQp {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Control step to capture.
        #[arg(long, default_value_t = 0)]
        step: u64,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[command(flatten)]
    common: OverrideArgs,
}

#[derive(Args)]
struct OptionalScenarioArgs {
    /// Defaults to the reference fleet on the bundled IEEE 33-bus feeder.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[command(flatten)]
    common: OverrideArgs,
}

#[derive(Args)]
struct OverrideArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Override a scenario key, e.g. `--set services.vc_reserve=0.4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

/// Failure classes mapped onto exit codes.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Parse { .. } | Error::Config(_) | Error::Topology(_) | Error::Schedule(_) => {
                Failure::Config(e.into())
            }
            other => Failure::Runtime(other.into()),
        }
    }
}

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn runtime_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { scenario, out, violation_budget } => cmd_run(&scenario, &out, violation_budget),
        Command::SweepError { scenario, out, granularity } => cmd_sweep_error(&scenario, &out, granularity),
        Command::Verify { out, seed, qp_instances, corrupt_bibc } => {
            let mut opts = VerifyOptions { corrupt_bibc, qp_instances, ..VerifyOptions::default() };
            if let Some(s) = seed {
                opts.seed = s;
            }
            cmd_verify(&opts, out.as_deref())
        }
        Command::DumpQp { scenario, step, out } => cmd_dump_qp(&scenario, step, &out),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, Failure> {
    raw.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| config_err(anyhow::anyhow!("override '{s}' is not of the form key=value")))
        })
        .collect()
}

fn load_scenario(path: Option<&Path>, common: &OverrideArgs) -> Result<Scenario, Failure> {
    let overrides = parse_overrides(&common.overrides)?;
    let mut scenario = match path {
        Some(p) => Scenario::load(p, &overrides).map_err(|e| match e {
            Error::Io(io) => config_err(anyhow::Error::new(io).context(format!("cannot read {}", p.display()))),
            other => Failure::from(other).context(p),
        })?,
        None => Scenario::from_toml_str("", &overrides)?,
    };
    if let Some(seed) = common.seed {
        scenario.seed = seed;
    }
    scenario.validate()?;
    scenario.load_feeder()?;
    Ok(scenario)
}

impl Failure {
    fn context(self, path: &Path) -> Self {
        let wrap = |e: anyhow::Error| e.context(format!("in {}", path.display()));
        match self {
            Failure::Config(e) => Failure::Config(wrap(e)),
            Failure::Runtime(e) => Failure::Runtime(wrap(e)),
        }
    }
}

/// Writes `path` through a temporary file in the same directory, then renames it into place.
fn write_atomic(path: &Path, write: impl FnOnce(&mut fs::File) -> anyhow::Result<()>) -> Result<(), Failure> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("cannot create a file in {}", dir.display()))
        .map_err(config_err)?;
    write(tmp.as_file_mut()).map_err(runtime_err)?;
    tmp.as_file_mut().flush().map_err(runtime_err)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file().set_permissions(fs::Permissions::from_mode(0o644)).map_err(runtime_err)?;
    }
    tmp.persist(path).with_context(|| format!("cannot write {}", path.display())).map_err(runtime_err)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    write_atomic(path, |f| {
        serde_json::to_writer_pretty(&mut *f, value)?;
        writeln!(f)?;
        Ok(())
    })
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display())).map_err(config_err)
}

fn cmd_run(args: &ScenarioArgs, out: &Path, violation_budget: usize) -> Result<bool, Failure> {
    let scenario = load_scenario(Some(&args.scenario), &args.common)?;
    ensure_dir(out)?;
    let trace = run(&scenario)?;
    let summary = summarize(&trace);
    write_atomic(&out.join("trace.csv"), |f| Ok(trace.write_csv(f)?))?;
    write_atomic(&out.join("diagnostics.jsonl"), |f| Ok(trace.write_diagnostics(f)?))?;
    write_json(&out.join("summary.json"), &summary)?;

    println!("scenario {} (seed {}): {} steps", summary.name, summary.seed, summary.steps);
    println!(
        "solves {} failures {} median step {:.1} ms",
        summary.solves, summary.solver_failures, summary.median_step_ms
    );
    println!(
        "peak feeder deviation: dP0 {:+.4} pu, dQ0 {:+.4} pu",
        summary.peak_p_export_dev, summary.peak_q_export_dev
    );
    let violations = summary.voltage_violation_steps.max(summary.current_violation_steps);
    let mut ok = true;
    if let Some(reason) = &trace.abort {
        eprintln!("run aborted: {reason}");
        ok = false;
    }
    if summary.solver_failures > 0 {
        eprintln!("{} controller solves failed", summary.solver_failures);
        ok = false;
    }
    if violations > violation_budget {
        eprintln!("{violations} steps violate network limits (budget {violation_budget})");
        ok = false;
    }
    Ok(ok)
}

fn cmd_sweep_error(args: &OptionalScenarioArgs, out: &Path, granularity: f64) -> Result<bool, Failure> {
    let scenario = load_scenario(args.scenario.as_deref(), &args.common)?;
    ensure_dir(out)?;
    let (points, summary) = error_surface(&scenario, granularity)?;
    write_atomic(&out.join("error_surface.csv"), |f| Ok(dermpc::powerflow::write_error_surface(&points, f)?))?;
    write_json(&out.join("sweep_summary.json"), &summary)?;
    println!("{} points ({} diverged) in {:.0} ms", summary.points, summary.diverged, summary.wall_ms);
    println!("max error {:.4}%, at (1,1) {:.4}%", 100.0 * summary.max_error, 100.0 * summary.error_at_full_ramp);
    println!("max error with k_p, k_q <= 0.2: {:.4}%", 100.0 * summary.max_error_small_region);
    if summary.ray_decreases > 0 {
        println!("error decreases outward along rays at {} samples", summary.ray_decreases);
    }
    Ok(summary.diverged == 0)
}

fn cmd_verify(opts: &VerifyOptions, out: Option<&Path>) -> Result<bool, Failure> {
    let reports = run_suites(opts)?;
    println!("{:<20} {:>8} {:>8} {:>10}  result", "suite", "checks", "failed", "wall ms");
    for r in &reports {
        println!(
            "{:<20} {:>8} {:>8} {:>10.1}  {}",
            r.name,
            r.checks,
            r.failures,
            r.wall_ms,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        for d in &r.details {
            println!("    {d}");
        }
    }
    if let Some(path) = out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            ensure_dir(dir)?;
        }
        write_json(path, &reports)?;
    }
    Ok(reports.iter().all(|r| r.passed()))
}

fn cmd_dump_qp(args: &ScenarioArgs, step: u64, out: &Path) -> Result<bool, Failure> {
    let scenario = load_scenario(Some(&args.scenario), &args.common)?;
    let problem = capture_problem(&scenario, step)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    let text = dump_problem(&problem.qp);
    write_atomic(out, |f| Ok(f.write_all(text.as_bytes())?))?;
    println!(
        "step {}: {} variables, {} inequality rows ({} pruned)",
        step,
        problem.layout.n(),
        problem.qp.b_in.len(),
        problem.n_pruned
    );
    Ok(true)
}
