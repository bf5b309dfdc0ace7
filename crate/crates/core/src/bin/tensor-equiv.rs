// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tensor_equiv::driver::{compare, emit_report, Config, ReportFormat};
use tensor_equiv::error::EngineError;
use tensor_equiv::fixtures::{gen_pair, inject_bug, BugKind, FixtureName};
use tensor_equiv::graph::ComputationGraph;
use tensor_equiv::pattern::parse_catalogue;
use tensor_equiv::tensor::Tolerance;

#[derive(Parser)]
#[command(
    name = "tensor-equiv",
    version,
    about = "Equivalence checking of tensor computation graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare two graphs. Exit code 0 = equivalent, 1 = not equivalent, 2 = inconclusive.
    Verify(VerifyArgs),
    /// Desk-scale fixture pairs.
    Fixtures {
        #[command(subcommand)]
        command: FixtureCommand,
    },
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    graph_a: PathBuf,
    #[arg(long)]
    graph_b: PathBuf,
    /// Rule catalogue to start from.
    #[arg(long)]
    seed_rules: Option<PathBuf>,
    /// Write the accepted rules here.
    #[arg(long)]
    emit_rules: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-2)]
    atol: f64,
    #[arg(long, default_value_t = 1e-2)]
    rtol: f64,
    #[arg(long, default_value_t = 1e-4)]
    val_atol: f64,
    #[arg(long, default_value_t = 32)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Report::Text)]
    report: Report,
}

#[derive(Clone, Copy, ValueEnum)]
enum Report {
    Text,
    Lines,
}

#[derive(Subcommand)]
enum FixtureCommand {
    /// Write a generated pair as graph JSON files.
    Gen {
        #[arg(long)]
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_a: PathBuf,
        #[arg(long)]
        out_b: PathBuf,
        #[arg(long)]
        bug: Option<String>,
    },
}

fn read(path: &Path) -> Result<String, EngineError> {
    fs::read_to_string(path).map_err(|e| EngineError::Io(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), EngineError> {
    fs::write(path, text).map_err(|e| EngineError::Io(format!("{}: {e}", path.display())))
}

fn verify(args: VerifyArgs) -> Result<u8, EngineError> {
    let a = ComputationGraph::parse(&read(&args.graph_a)?)?;
    let b = ComputationGraph::parse(&read(&args.graph_b)?)?;
    let mut cfg = Config {
        max_iterations: args.max_iters,
        tol: Tolerance::new(args.atol, args.rtol),
        ..Config::default()
    };
    cfg.validation.tol = Tolerance::new(args.val_atol, 0.0);
    cfg.validation.trials = args.trials;
    cfg.validation.seed = args.seed;
    if let Some(p) = &args.seed_rules {
        cfg.seed_rules = parse_catalogue(&read(p)?)?;
    }
    let res = compare(&a, &b, &cfg)?;
    let format = match args.report {
        Report::Text => ReportFormat::Text,
        Report::Lines => ReportFormat::Lines,
    };
    print!("{}", emit_report(&res, format));
    if let Some(p) = &args.emit_rules {
        write(p, &res.catalogue())?;
    }
    Ok(res.verdict.exit_code() as u8)
}

fn fixtures(cmd: FixtureCommand) -> Result<u8, EngineError> {
    let FixtureCommand::Gen {
        name,
        seed,
        out_a,
        out_b,
        bug,
    } = cmd;
    let mut fx = gen_pair(name.parse::<FixtureName>()?, seed)?;
    if let Some(bug) = bug {
        fx = inject_bug(&fx, bug.parse::<BugKind>()?)?;
    }
    write(&out_a, &fx.a.serialize())?;
    write(&out_b, &fx.b.serialize())?;
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 3 } else { 0 });
        }
    };
    let res = match cli.command {
        Command::Verify(args) => verify(args),
        Command::Fixtures { command } => fixtures(command),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
