//! `pseudorate`: run scenarios, verify exported chains, score rating logs.
//!
//! Exit status: 0 success, 2 usage, 3 invalid scenario or input file,
//! 4 verification failed, 5 runtime failure.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pseudorate_core::codec::Canonical;
use pseudorate_core::rs::{aggregate_records, read_rating_log};
use pseudorate_core::scenario::{run_scenario, ChainBundle, RunOptions, Scenario, ScenarioError, Transcript, TransportKind};
use pseudorate_core::ExactScore;

#[derive(Parser)]
#[command(name = "pseudorate", version, about = "Pseudonymous, priced rating tickets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Transport {
    Inproc,
    Socket,
}

impl From<Transport> for TransportKind {
    fn from(t: Transport) -> Self {
        match t {
            Transport::Inproc => TransportKind::InProcess,
            Transport::Socket => TransportKind::Socket,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Canonical,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "inproc")]
    transport: Transport,
    /// Write the transcript here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    /// Write every accepted chain to DIR/chain-N.bin.
    #[arg(long, value_name = "DIR")]
    export_chains: Option<PathBuf>,
    /// Persist service state under DIR.
    #[arg(long, value_name = "DIR")]
    data_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and print its transcript.
    Run {
        scenario: PathBuf,
        #[command(flatten)]
        args: RunArgs,
    },
    /// Run the built-in happy-path scenario.
    Demo {
        #[command(flatten)]
        args: RunArgs,
    },
    /// Verify a chain bundle, or every accepted chain in a canonical transcript.
    Verify { file: PathBuf },
    /// Aggregate score of a subject over a persisted rating log.
    Score {
        subject: String,
        /// Rating log written by the reputation system.
        #[arg(long, conflicts_with = "data_dir", required_unless_present = "data_dir")]
        log: Option<PathBuf>,
        /// Data directory of an earlier `run --data-dir`.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

struct Failure {
    status: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self { status: 3, message: message.into() }
    }

    fn verify(message: impl Into<String>) -> Self {
        Self { status: 4, message: message.into() }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self { status: 5, message: message.into() }
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Parse(_) | ScenarioError::Config(_) => Failure::config(e.to_string()),
            ScenarioError::Setup(_) | ScenarioError::Io(_) => Failure::runtime(e.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure::runtime(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { scenario, args } => Scenario::load(&scenario).map_err(Failure::from).and_then(|s| run(&s, &args)),
        Command::Demo { args } => run(&Scenario::demo(args.seed.unwrap_or(42)), &args),
        Command::Verify { file } => verify(&file),
        Command::Score { subject, log, data_dir } => {
            let path = log.unwrap_or_else(|| data_dir.expect("clap requires one").join("rs").join("ratings.log"));
            score(&subject, &path)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("pseudorate: {}", f.message);
            ExitCode::from(f.status)
        }
    }
}

fn run(scenario: &Scenario, args: &RunArgs) -> Result<(), Failure> {
    let opts = RunOptions { seed: args.seed, transport: args.transport.into(), data_dir: args.data_dir.clone() };
    let transcript = run_scenario(scenario, &opts)?;
    if let Some(dir) = &args.export_chains {
        fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
        for (i, bundle) in transcript.accepted.iter().enumerate() {
            let path = dir.join(format!("chain-{i}.bin"));
            fs::write(&path, bundle.encode()).map_err(|e| io_failure(&path, e))?;
        }
    }
    let bytes = match args.format {
        Format::Text => transcript.render_text().into_bytes(),
        Format::Canonical => transcript.encode(),
    };
    match &args.out {
        Some(path) => fs::write(path, bytes).map_err(|e| io_failure(path, e)),
        None => io::stdout().write_all(&bytes).map_err(|e| Failure::runtime(e.to_string())),
    }
}

fn verify(path: &Path) -> Result<(), Failure> {
    let bytes = fs::read(path).map_err(|e| io_failure(path, e))?;
    let bundles = match ChainBundle::decode(&bytes) {
        Ok(b) => vec![b],
        Err(_) => Transcript::decode(&bytes)
            .map_err(|_| Failure::config(format!("{} is neither a chain bundle nor a canonical transcript", path.display())))?
            .accepted,
    };
    let mut bad = 0;
    for (i, b) in bundles.iter().enumerate() {
        let report = b.verify();
        match report.fault {
            None if b.chain.rating_cred.entity == b.payload => println!("chain {i}: valid (group {})", report.group.unwrap_or(0)),
            None => {
                bad += 1;
                println!("chain {i}: invalid: payload differs from signed rating");
            }
            Some(fault) => {
                bad += 1;
                println!("chain {i}: invalid: {}", fault.code());
            }
        }
    }
    if bad > 0 {
        return Err(Failure::verify(format!("{bad} of {} chains failed verification", bundles.len())));
    }
    println!("valid");
    Ok(())
}

fn score(subject: &str, log: &Path) -> Result<(), Failure> {
    if !log.is_file() {
        return Err(Failure::config(format!("no rating log at {}", log.display())));
    }
    let records = read_rating_log(log).map_err(|e| Failure::config(e.to_string()))?;
    let count = records.iter().filter(|r| r.payload.subject == subject).count();
    match aggregate_records::<ExactScore>(&records, subject) {
        Some(s) => {
            let approx = aggregate_records::<f64>(&records, subject).unwrap_or(f64::NAN);
            println!("{subject} {s} ~{approx:.6} ({count} ratings)");
        }
        None => println!("{subject} none (0 ratings)"),
    }
    Ok(())
}
