//! `logvm`: gradient checks, scan benchmarks, training, ablations and
//! receptive-field maps for the local-global vision Mamba toy models.
//!
//! Exit codes: 0 success, 1 failed check or runtime error, 2 bad
//! configuration or arguments.

mod bench;
mod config;
mod run;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use logvm_core::blocks::Variant;
use logvm_core::checks::{gradient_suite, Scope, SUITE_SEED};

use config::RunConfig;

pub enum Failure {
    /// A check or assertion did not hold.
    Check(String),
    /// Bad configuration or arguments.
    Config(String),
    Runtime(String),
}

impl Failure {
    fn core(e: logvm_core::Error) -> Self {
        match e {
            logvm_core::Error::InvalidArgument(m) => Self::Config(m),
            e => Self::Runtime(e.to_string()),
        }
    }

    fn code(&self) -> u8 {
        match self {
            Self::Check(_) | Self::Runtime(_) => 1,
            Self::Config(_) => 2,
        }
    }
}

#[derive(Parser)]
#[command(name = "logvm", version, about)]
struct Cli {
    /// Worker threads for the rayon pool.
    #[arg(long, global = true, env = "LOGVM_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Finite-difference gradient checks; one line per checked function.
    Gradcheck {
        #[arg(long, value_parser = parse_scope)]
        scope: Scope,
        #[arg(long, default_value_t = SUITE_SEED)]
        seed: u64,
        /// Corrupt the adjoint of this op (negative control).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Times the sequential and parallel scans; CSV to stdout.
    Scanbench {
        #[arg(long, default_value_t = 65536)]
        len: usize,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, default_value_t = 16)]
        state: usize,
        #[arg(long, default_value_t = logvm_core::s6::DEFAULT_CHUNK)]
        chunk: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Trains one model; writes metrics, config and checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
    },
    /// Sweeps one ablation axis over several seeds; summary CSV to stdout.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        axis: run::Axis,
        /// Number of seeds per cell.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Writes the effective receptive field of a checkpoint as a PGM image.
    Erf {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_probe)]
        probe: (usize, usize),
        #[arg(long)]
        out: PathBuf,
    },
}

/// Config file plus overrides; flags win over the file.
#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
        Ok(cfg)
    }
}

fn parse_scope(s: &str) -> Result<Scope, String> {
    s.parse().map_err(|e: logvm_core::Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: logvm_core::Error| e.to_string())
}

fn parse_probe(s: &str) -> Result<(usize, usize), String> {
    let (i, j) = s.split_once(',').ok_or("expected i,j")?;
    Ok((i.trim().parse().map_err(|_| "bad row")?, j.trim().parse().map_err(|_| "bad column")?))
}

fn csv_out<S: serde::Serialize>(rows: &[S]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_writer(std::io::stdout().lock());
    for r in rows {
        w.serialize(r).map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| Failure::Runtime(e.to_string()))
}

fn print_config(cfg: &RunConfig) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", cfg.to_json());
}

fn gradcheck(scope: Scope, seed: u64, fault: Option<&str>) -> Result<(), Failure> {
    let lines = gradient_suite(scope, seed, fault).map_err(Failure::core)?;
    for l in &lines {
        println!("{l}");
    }
    let failing: Vec<&str> = lines.iter().filter(|l| !l.passed()).map(|l| l.name.as_str()).collect();
    if failing.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed for {}", failing.join(", "))))
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let threads = cli.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        return Err(Failure::Config("--threads must be at least 1".into()));
    }
    // a second call only fails if a pool already exists, which is harmless
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();

    match cli.cmd {
        Cmd::Gradcheck { scope, seed, inject_fault } => gradcheck(scope, seed, inject_fault.as_deref()),
        Cmd::Scanbench { len, channels, state, chunk, seed } => {
            let rows = bench::run(&bench::Bench { len, channels, state, threads, chunk, seed })?;
            csv_out(&rows)
        }
        Cmd::Train { run: args, variant } => {
            let mut cfg = args.resolve()?;
            if let Some(v) = variant {
                cfg.model.block.variant = v;
            }
            if args.print_config {
                print_config(&cfg);
                return Ok(());
            }
            cfg.validate()?;
            let last = run::train_run(&cfg)?;
            println!(
                "epoch {} val loss {:.4} dice {:.4} iou {:.4} -> {}",
                last.epoch,
                last.loss,
                last.dice,
                last.iou,
                cfg.out_dir.display()
            );
            Ok(())
        }
        Cmd::Ablate { run: args, axis, seeds } => {
            let mut cfg = args.resolve()?;
            if let Some(k) = seeds {
                cfg.seeds = k;
            }
            if args.print_config {
                print_config(&cfg);
                return Ok(());
            }
            cfg.validate()?;
            csv_out(&run::ablate(axis, &cfg)?)
        }
        Cmd::Erf { checkpoint, probe, out } => run::erf(Path::new(&checkpoint), probe, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Check(m) | Failure::Config(m) | Failure::Runtime(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}
