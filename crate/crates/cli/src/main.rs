use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use aced::commands::{cmd_eval, cmd_gen_data, cmd_infer, cmd_render, cmd_train};
use aced::config::{Mode, RunConfig};
use aced::selfcheck::run_grad_check;
use aced::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;

/// Fully differentiable ordinal regression for depth estimation.
#[derive(Parser, Debug)]
#[command(name = "aced", version)]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,

    #[command(subcommand)]
    command: Command,
}

/// Accepted both before and after the subcommand; later groups win.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file, applied over the defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Shorthand for `--set seed=N`.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Shorthand for `--set mode=...`.
    #[arg(long)]
    mode: Option<Mode>,

    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(seed) = self.seed {
            out.push(format!("seed={seed}"));
        }
        if let Some(mode) = self.mode {
            out.push(format!("mode={mode}"));
        }
        out.extend(self.set.iter().cloned());
        out
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic scenes and a manifest.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train from scratch and write a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON-lines training log; stdout when absent.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Report metrics for coarse, refined and hard-decoded depth.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// JSON-lines metric report; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict depth and confidence for one PPM image.
    Infer {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output prefix for `_depth.pgm`, `_confidence.pgm`, `_depth.ppm`.
        #[arg(long, value_name = "PREFIX")]
        out: PathBuf,
    },
    /// Finite-difference check of every backward rule.
    GradCheck {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, hide = true, value_name = "OP")]
        inject_fault: Option<String>,
    },
    /// Render a depth PGM as a grayscale PPM.
    Render {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Numerical(String),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            Error::Divergence { .. } | Error::Domain { .. } => Failure::Numerical(e.to_string()),
            other => Failure::Other(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

impl Command {
    fn config_args(&self) -> &ConfigArgs {
        match self {
            Command::GenData { config, .. }
            | Command::Train { config, .. }
            | Command::Eval { config, .. }
            | Command::Infer { config, .. }
            | Command::GradCheck { config, .. }
            | Command::Render { config, .. } => config,
        }
    }
}

fn config(cli: &Cli) -> Result<RunConfig, Failure> {
    let (outer, inner) = (&cli.config, cli.command.config_args());
    let file = inner.config.as_deref().or(outer.config.as_deref());
    let mut overrides = outer.overrides();
    overrides.extend(inner.overrides());
    Ok(RunConfig::layered(file, &overrides)?)
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = config(&cli)?;
    match &cli.command {
        Command::GenData { out, .. } => {
            let manifest = cmd_gen_data(&cfg, out)?;
            println!("{}", manifest.display());
        }
        Command::Train {
            manifest,
            checkpoint,
            log,
            ..
        } => {
            let mut w = sink(log.as_deref())?;
            cmd_train(&cfg, manifest, checkpoint, &mut w)?;
            w.flush()?;
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
            ..
        } => {
            let outcome = cmd_eval(&cfg, checkpoint, manifest)?;
            let mut w = sink(out.as_deref())?;
            for line in outcome.json_lines()? {
                writeln!(w, "{line}")?;
            }
            w.flush()?;
        }
        Command::Infer {
            checkpoint, image, out, ..
        } => {
            let files = cmd_infer(&cfg, checkpoint, image, out)?;
            for p in [files.depth, files.confidence, files.visualization] {
                println!("{}", p.display());
            }
        }
        Command::GradCheck { inject_fault, .. } => {
            let report = run_grad_check(cfg.seed, inject_fault.as_deref())?;
            for line in report.lines() {
                println!("{line}");
            }
            println!(
                "grad-check {} ({} components, {:.2} s)",
                if report.passed { "PASS" } else { "FAIL" },
                report.results.len(),
                report.seconds
            );
            if !report.passed {
                return Err(Failure::Numerical("gradient check failed".into()));
            }
        }
        Command::Render { depth, out, .. } => cmd_render(&cfg, depth, out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_NUMERICAL)
        }
        Err(Failure::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
