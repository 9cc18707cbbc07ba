//! `cooptraj`: run scenarios, sweep policy matrices, serve live sessions.
//!
//! Exit codes: 0 success, 2 invalid input, 3 runtime failure.

use std::fs;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cooptraj_core::scenario::{
    five_policy_sweep, packaged, run_matrix, run_scenario, MatrixRow, MatrixTable, RunReport, Scenario, PACKAGED,
};
use cooptraj_core::session::{SessionConfig, DEFAULT_IDLE_TIMEOUT, DEFAULT_RESUME_WINDOW};
use cooptraj_core::Error;
use cooptraj_service::ServeConfig;

#[derive(Debug, Parser)]
#[command(name = "cooptraj", version, about = "Cooperative trajectory planning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one scenario file and print its report.
    Run {
        scenario: PathBuf,
        #[command(flatten)]
        out: OutputArgs,
        /// Run the five-policy sweep over the scenario instead.
        #[arg(long)]
        sweep: bool,
    },
    /// Run every `*.json` scenario in a directory and print the table.
    Matrix {
        dir: PathBuf,
        #[command(flatten)]
        out: OutputArgs,
        #[arg(long, default_value_t = 1)]
        repetitions: usize,
        /// Expand each scenario into the five-policy sweep.
        #[arg(long)]
        sweep: bool,
    },
    /// Run a packaged scenario (tug-of-war, unsafe-blend, negotiation-demo).
    Demo {
        name: String,
        #[command(flatten)]
        out: OutputArgs,
        #[arg(long)]
        sweep: bool,
    },
    /// Start the live session service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct OutputArgs {
    /// Directory for report, table and trace files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    addr: IpAddr,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Directory with the browser client, served at `/`.
    #[arg(long)]
    static_dir: Option<PathBuf>,
    /// Simulated seconds per wall second while streaming; 0 streams unpaced.
    #[arg(long, default_value_t = 0.0)]
    real_time_factor: f64,
    /// Seconds without a client message before a session is closed.
    #[arg(long, default_value_t = DEFAULT_IDLE_TIMEOUT)]
    idle_timeout: f64,
    /// Seconds a dropped session stays resumable.
    #[arg(long, default_value_t = DEFAULT_RESUME_WINDOW)]
    resume_window: f64,
    /// Do not reveal the automation's desire with the scenario echo.
    #[arg(long)]
    hide_desire: bool,
}

/// A failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn invalid(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Self::invalid(e.to_string())
        } else {
            Self::runtime(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("COOPTRAJ_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { scenario, out, sweep } => {
            let s = load(&scenario)?;
            run_one(s, &out, sweep)
        }
        Command::Demo { name, out, sweep } => {
            let s = packaged(&name).map_err(|_| {
                Failure::invalid(format!("unknown demo `{name}` (available: {})", PACKAGED.join(", ")))
            })?;
            run_one(s, &out, sweep)
        }
        Command::Matrix { dir, out, repetitions, sweep } => {
            let mut scenarios = load_dir(&dir)?;
            if sweep {
                scenarios = scenarios.iter().flat_map(five_policy_sweep).collect();
            }
            apply_seed(&mut scenarios, out.seed);
            let table = run_matrix(&scenarios, repetitions)?;
            emit_table(&table, &out)?;
            if table.rows.iter().any(|r| r.status != "ok") {
                return Err(Failure::runtime("one or more scenarios failed (see table)"));
            }
            Ok(())
        }
        Command::Serve(args) => serve(args),
    }
}

fn load(path: &Path) -> Result<Scenario, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?;
    Scenario::from_json(&text).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

fn load_dir(dir: &Path) -> Result<Vec<Scenario>, Failure> {
    let entries = fs::read_dir(dir).map_err(|e| Failure::invalid(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::invalid(format!("{}: no *.json scenarios", dir.display())));
    }
    paths.iter().map(|p| load(p)).collect()
}

fn apply_seed(scenarios: &mut [Scenario], seed: Option<u64>) {
    if let Some(seed) = seed {
        for s in scenarios {
            s.seed = seed;
        }
    }
}

fn run_one(scenario: Scenario, out: &OutputArgs, sweep: bool) -> Result<(), Failure> {
    let mut scenarios = if sweep { five_policy_sweep(&scenario) } else { vec![scenario] };
    apply_seed(&mut scenarios, out.seed);
    if sweep {
        let table = run_matrix(&scenarios, 1)?;
        emit_table(&table, out)?;
        if let Some(row) = table.rows.iter().find(|r| r.status != "ok") {
            return Err(Failure::runtime(row.error.clone().unwrap_or_default()));
        }
        return Ok(());
    }
    let report = run_scenario(&scenarios[0])?;
    log::info!("{} finished in {:.3} s", report.scenario_id, report.wall_time.as_secs_f64());
    emit_report(&report, out)
}

fn report_text(report: &RunReport, format: Format) -> Result<String, Failure> {
    Ok(match format {
        Format::Json => json_text(report)?,
        Format::Csv => MatrixTable { rows: vec![MatrixRow::from_report(report, 0)] }.to_csv()?,
    })
}

fn json_text<T: serde::Serialize>(value: &T) -> Result<String, Failure> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Failure::runtime(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn emit_report(report: &RunReport, out: &OutputArgs) -> Result<(), Failure> {
    let text = report_text(report, out.format)?;
    match &out.out {
        None => print!("{text}"),
        Some(dir) => {
            let ext = extension(out.format);
            write(dir, &format!("report.{ext}"), &text)?;
            write(dir, "trace.csv", &report.trace.to_csv()?)?;
        }
    }
    Ok(())
}

fn emit_table(table: &MatrixTable, out: &OutputArgs) -> Result<(), Failure> {
    let (rows, aggregates) = match out.format {
        Format::Csv => (table.to_csv()?, table.aggregates_csv()?),
        Format::Json => (json_text(&table.rows)?, json_text(&table.aggregates())?),
    };
    match &out.out {
        None => print!("{rows}"),
        Some(dir) => {
            let ext = extension(out.format);
            write(dir, &format!("matrix.{ext}"), &rows)?;
            write(dir, &format!("aggregates.{ext}"), &aggregates)?;
        }
    }
    Ok(())
}

fn extension(format: Format) -> &'static str {
    match format {
        Format::Csv => "csv",
        Format::Json => "json",
    }
}

fn write(dir: &Path, name: &str, text: &str) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn serve(args: ServeArgs) -> Result<(), Failure> {
    let positive = |v: f64, name: &str| {
        if v.is_finite() && v > 0.0 {
            Ok(())
        } else {
            Err(Failure::invalid(format!("--{name} must be positive")))
        }
    };
    positive(args.idle_timeout, "idle-timeout")?;
    positive(args.resume_window, "resume-window")?;
    if !(args.real_time_factor.is_finite() && args.real_time_factor >= 0.0) {
        return Err(Failure::invalid("--real-time-factor must be non-negative"));
    }
    let config = ServeConfig {
        addr: SocketAddr::new(args.addr, args.port),
        static_dir: args.static_dir,
        session: SessionConfig {
            idle_timeout: args.idle_timeout,
            resume_window: args.resume_window,
            real_time_factor: args.real_time_factor,
            reveal_desire: !args.hide_desire,
        },
    };
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::runtime(e.to_string()))?;
    runtime
        .block_on(cooptraj_service::serve(config))
        .map_err(|e| Failure::runtime(format!("serve: {e}")))
}
