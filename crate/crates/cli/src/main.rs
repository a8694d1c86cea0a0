use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use redlight_cli::batch::{self, BatchError, RunManifest, SeedRange};
use redlight_cli::report::{compare_report, format_report, PeakRecord};
use redlight_core::sim::EngineKind;
use tracing_subscriber::EnvFilter;

const EXIT_USAGE: u8 = 1;
const EXIT_GATE: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "redlight", version, about = "Batch runner for the red-light warning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every scenario in a manifest and write traces, metrics and a summary.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory, overriding the manifest.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Inclusive seed range such as 0..9, overriding the manifest.
        #[arg(long)]
        seeds: Option<SeedRange>,
        #[arg(long, value_enum)]
        engine: Option<EngineArg>,
    },
    /// Compare advisory and unguided peak deceleration in a run directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EngineArg {
    Advisory,
    Baseline,
    None,
    All,
}

impl EngineArg {
    fn engines(self) -> Vec<EngineKind> {
        match self {
            EngineArg::Advisory => vec![EngineKind::Advisory],
            EngineArg::Baseline => vec![EngineKind::Baseline],
            EngineArg::None => vec![EngineKind::None],
            EngineArg::All => EngineKind::ALL.to_vec(),
        }
    }
}

fn exit_for(err: &BatchError) -> ExitCode {
    eprintln!("error: {err}");
    match err {
        BatchError::Usage(_) => ExitCode::from(EXIT_USAGE),
        BatchError::Io { .. } => ExitCode::from(EXIT_IO),
    }
}

fn run(manifest_path: PathBuf, out: Option<PathBuf>, seeds: Option<SeedRange>, engine: Option<EngineArg>) -> ExitCode {
    let mut manifest = match RunManifest::load(&manifest_path) {
        Ok(m) => m,
        Err(e) => return exit_for(&e),
    };
    let base_dir = manifest_path.parent().map(PathBuf::from).unwrap_or_default();
    if let Some(s) = seeds {
        manifest.seeds = Some(s);
        manifest.repeat = s.len();
    }
    if let Some(e) = engine {
        manifest.engines = e.engines();
    }
    let out_dir = out.or_else(|| manifest.out_dir.as_ref().map(|d| base_dir.join(d))).unwrap_or_else(|| PathBuf::from("runs"));
    let summary = match batch::run_batch(&manifest, &base_dir, &out_dir) {
        Ok(s) => s,
        Err(e) => return exit_for(&e),
    };
    print!("{}", batch::summary_csv(&summary.rows));
    for f in &summary.failures {
        eprintln!("failed: {} seed {:?} engine {:?}: {}", f.file.display(), f.seed, f.engine.map(|e| e.as_str()), f.error);
    }
    if !summary.gate_violations.is_empty() {
        eprintln!("red-light violation under compliant advice: {}", summary.gate_violations.join(", "));
        return ExitCode::from(EXIT_GATE);
    }
    if !summary.failures.is_empty() {
        return ExitCode::from(EXIT_IO);
    }
    ExitCode::SUCCESS
}

fn report(dir: PathBuf) -> ExitCode {
    let records = match batch::load_records(&dir) {
        Ok(r) => r,
        Err(e) => return exit_for(&e),
    };
    let peaks: Vec<PeakRecord> = records
        .iter()
        .map(|r| PeakRecord { scenario: r.scenario.clone(), seed: r.metrics.seed, engine: r.metrics.engine, peak_decel: r.metrics.peak_decel })
        .collect();
    match compare_report(&peaks) {
        Ok(r) => {
            print!("{}", format_report(&r));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn main() -> ExitCode {
    let filter = EnvFilter::try_from_env("REDLIGHT_LOG_LEVEL").unwrap_or_else(|_| EnvFilter::new("error"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Run { manifest, out, seeds, engine } => run(manifest, out, seeds, engine),
        Command::Report { dir } => report(dir),
    }
}
