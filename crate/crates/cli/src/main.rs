use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use edgespec_core::analytics::{analyze, PerfParams};
use edgespec_core::metrics;
use edgespec_core::pipeline::{serve_cloud, serve_edge};
use edgespec_core::scenario::{self, ReportRow, SweepDim};
use edgespec_core::transport::FramedStream;
use edgespec_core::{PipelineMode, ScenarioConfig, ScenarioError};

#[derive(Parser)]
#[command(name = "edgespec", version, about = "Edge-cloud speculative decoding simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and report its metrics.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        output: OutputArgs,
        /// Write the generated token ids here.
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Evaluate the closed-form performance model.
    Analyze {
        #[arg(long, value_parser = parse_alpha)]
        alpha: f64,
        #[arg(long, default_value_t = 4)]
        gamma: usize,
        /// Batch drafting time, ms.
        #[arg(long)]
        t_draft: f64,
        /// Round-trip time, ms.
        #[arg(long)]
        t_rtt: f64,
        /// Batch verification time, ms.
        #[arg(long)]
        t_verify: f64,
        /// Verification time hidden by pre-verification, ms.
        #[arg(long, default_value_t = 0.0)]
        t_pre: f64,
        #[arg(long)]
        json: bool,
    },
    /// Run a scenario once per value of one parameter.
    Sweep {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        output: OutputArgs,
        #[arg(long)]
        dim: SweepDim,
        /// Comma-separated values; `V` stands for the vocabulary size.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<String>,
    },
    /// Run a scenario in every pipeline mode.
    Compare {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Run one side of a session over TCP.
    Serve {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        role: Role,
        #[arg(long)]
        addr: String,
        /// Write the committed token ids here.
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    mode: Option<PipelineMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_tokens: Option<usize>,
}

#[derive(Args)]
struct OutputArgs {
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Role {
    Edge,
    Cloud,
}

fn parse_alpha(s: &str) -> Result<f64, String> {
    let a: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&a) {
        Ok(a)
    } else {
        Err(format!("{a} is outside [0, 1]"))
    }
}

/// Configuration problems exit with 2, run failures with 1.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<ScenarioError>() {
            Some(ScenarioError::Io { .. } | ScenarioError::Parse(_) | ScenarioError::Invalid(_)) => 2,
            _ => 1,
        };
        Failure { code, error }
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        anyhow::Error::from(e).into()
    }
}

impl ScenarioArgs {
    fn load(&self) -> Result<ScenarioConfig, ScenarioError> {
        let mut cfg = ScenarioConfig::load(&self.scenario)?;
        if let Some(mode) = self.mode {
            cfg.mode = mode;
        }
        if let Some(seed) = self.seed {
            cfg.session.seed = seed;
        }
        if let Some(n) = self.max_tokens {
            cfg.max_tokens = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn emit_rows(rows: &[ReportRow], output: &OutputArgs, default: Format) -> Result<()> {
    let mut w = sink(output.out.as_deref())?;
    match output.format.unwrap_or(default) {
        Format::Csv => scenario::write_csv(rows, &mut w)?,
        Format::Json => {
            serde_json::to_writer_pretty(&mut w, rows)?;
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let mut w = io::stdout().lock();
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}

fn parse_values(raw: &[String], vocab: usize) -> Result<Vec<f64>, ScenarioError> {
    raw.iter()
        .map(|v| match v.trim() {
            "V" => Ok(vocab as f64),
            t => t.parse().map_err(|_| ScenarioError::Invalid(format!("sweep value {t:?} is not a number"))),
        })
        .collect()
}

fn write_transcript(path: &Path, digest_hex: &str, tokens: &[edgespec_core::TokenId]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    scenario::write_transcript(&mut w, digest_hex, tokens)?;
    w.flush()?;
    Ok(())
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Simulate { scenario, output, transcript } => {
            let cfg = scenario.load()?;
            let out = cfg.run()?;
            if let Some(path) = &transcript {
                write_transcript(path, &cfg.digest_hex(), &out.transcript)?;
            }
            match output.format.unwrap_or(Format::Json) {
                Format::Json => {
                    let mut w = sink(output.out.as_deref())?;
                    serde_json::to_writer_pretty(&mut w, &out.metrics).map_err(anyhow::Error::from)?;
                    writeln!(w).and_then(|()| w.flush()).map_err(anyhow::Error::from)?;
                }
                Format::Csv => emit_rows(&[scenario::report(&cfg, &out)?], &output, Format::Csv)?,
            }
        }
        Command::Analyze { alpha, gamma, t_draft, t_rtt, t_verify, t_pre, json } => {
            let p = PerfParams { alpha, gamma, t_draft, t_verify, t_rtt, t_pre };
            p.validate().map_err(|e| Failure { code: 2, error: anyhow::anyhow!(e) })?;
            let a = analyze(&p);
            if json {
                print_json(&a)?;
            } else {
                println!("{:<16}{:>14}", "EL", format!("{:.6}", a.expected_accept_length));
                println!("{:<16}{:>14}", "L_sync_ms", format!("{:.3}", a.sync_latency_ms));
                println!("{:<16}{:>14}", "R_sync_tps", format!("{:.3}", a.sync_throughput_tps));
                println!("{:<16}{:>14}", "E[T_async]_ms", format!("{:.3}", a.async_latency_ms));
                println!("{:<16}{:>14}", "R_async_tps", format!("{:.3}", a.async_throughput_tps));
                let flag = if a.at_limit { "  (at limit)" } else { "" };
                println!("{:<16}{:>14}{flag}", "S", format!("{:.6}", a.speedup));
                println!("{:<16}{:>14}", "S_limit", format!("{:.6}", a.speedup_limit));
                println!("{:<16}{:>14}", "T_bubble_ms", format!("{:.3}", a.bubble_ms));
            }
        }
        Command::Sweep { scenario, output, dim, values } => {
            let cfg = scenario.load()?;
            let values = parse_values(&values, cfg.session.vocab_size)?;
            emit_rows(&scenario::sweep(&cfg, dim, &values)?, &output, Format::Csv)?;
        }
        Command::Compare { scenario, output } => {
            let cfg = scenario.load()?;
            emit_rows(&scenario::compare(&cfg)?, &output, Format::Csv)?;
        }
        Command::Serve { scenario, role, addr, transcript } => {
            let cfg = scenario.load()?;
            let setup = cfg.setup()?;
            let digest = cfg.digest();
            let outcome = match role {
                Role::Cloud => {
                    let listener = TcpListener::bind(&addr).with_context(|| format!("binding {addr}"))?;
                    eprintln!("listening on {}", listener.local_addr().map_err(anyhow::Error::from)?);
                    let stream = FramedStream::accept(&listener).map_err(anyhow::Error::from)?;
                    serve_cloud(&setup, stream, &digest).map_err(anyhow::Error::from)?
                }
                Role::Edge => {
                    let stream = FramedStream::connect(addr.as_str()).map_err(anyhow::Error::from)?;
                    serve_edge(&setup, stream, &digest).map_err(anyhow::Error::from)?
                }
            };
            let tokens = outcome.transcript(setup.prompt.len());
            if let Some(path) = &transcript {
                write_transcript(path, &cfg.digest_hex(), tokens)?;
            }
            if role == Role::Edge {
                let m = metrics::collect(&outcome.trace).map_err(anyhow::Error::from)?;
                print_json(&m)?;
            } else {
                eprintln!("session complete: {} tokens committed", tokens.len());
            }
        }
    }
    Ok(())
}

fn is_broken_pipe(e: &(dyn std::error::Error + 'static)) -> bool {
    e.downcast_ref::<io::Error>().is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) if f.error.chain().any(is_broken_pipe) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
