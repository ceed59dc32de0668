use std::path::PathBuf;
use std::process::ExitCode;

use aeroloop::config::PipelineConfig;
use aeroloop::mock_server::{self, MockRole};
use aeroloop::pipeline::{Pipeline, RunOptions, Stage};
use aeroloop::service;
use aeroloop_core::backends::Role;
use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "aeroloop", version, about = "Dataset construction, self-play and evaluation for intention-conditioned aerial video models")]
struct Cli {
    /// TOML config file. `AEROLOOP_*` variables override its keys.
    #[arg(long, global = true, env = "AEROLOOP_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment and filter new source videos.
    Ingest,
    /// Draft intentions for new clips and publish the reviewed manifest.
    Annotate {
        /// Accept every open draft as is.
        #[arg(long)]
        auto_accept: bool,
    },
    /// Run self-play iterations on the latest reviewed manifest.
    Selfplay {
        #[arg(long)]
        iterations: Option<u32>,
        /// State directory to create or continue; defaults to `<dataset>/selfplay`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate the active model on the test split.
    Eval,
    /// Serve the review, IAR and status API.
    Serve,
    /// Run several stages in order.
    Run {
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = Stage::ALL)]
        stages: Vec<Stage>,
        #[arg(long)]
        auto_accept: bool,
        #[arg(long)]
        iterations: Option<u32>,
    },
    /// Serve one mock backend role over HTTP.
    MockBackend {
        #[arg(long, value_enum)]
        role: RoleArg,
        #[arg(long, default_value = "127.0.0.1:9100")]
        bind: String,
    },
    /// Write a synthetic CLIPRAW source corpus.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        sources: usize,
        #[arg(long, default_value_t = 32)]
        frames: usize,
        #[arg(long, default_value_t = 32)]
        height: u32,
        #[arg(long, default_value_t = 32)]
        width: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Generator,
    Critic,
    Trainer,
    Embedder,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::Generator => Role::Generator,
            RoleArg::Critic => Role::Critic,
            RoleArg::Trainer => Role::Trainer,
            RoleArg::Embedder => Role::Embedder,
        }
    }
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn run(cli: Cli) -> Result<()> {
    let config = PipelineConfig::load(cli.config.as_deref()).context("loading config")?;
    match cli.command {
        Command::Ingest => print(&Pipeline::open(config)?.ingest()?),
        Command::Annotate { auto_accept } => print(&Pipeline::open(config)?.annotate(auto_accept)?),
        Command::Selfplay { iterations, resume } => {
            let p = Pipeline::open(config)?;
            let n = iterations.unwrap_or(p.config.selfplay.max_iterations);
            print(&p.selfplay(n, resume)?)
        }
        Command::Eval => {
            let out = Pipeline::open(config)?.eval()?;
            print!("{}", out.report.render_table());
            eprintln!("report written to {}", out.report_path.display());
            Ok(())
        }
        Command::Serve => runtime()?.block_on(service::serve(config)),
        Command::Run {
            stages,
            auto_accept,
            iterations,
        } => {
            let p = Pipeline::open(config)?;
            print(&p.run(&stages, &RunOptions { auto_accept, iterations })?)
        }
        Command::MockBackend { role, bind } => {
            let mock = match Role::from(role) {
                Role::Generator => MockRole::generator(),
                Role::Critic => MockRole::critic(config.backends.mock_seed),
                Role::Trainer => MockRole::trainer(&config.dataset()?),
                Role::Embedder => MockRole::embedder(config.eval.target_frames),
            };
            runtime()?.block_on(mock_server::serve(mock, &bind))
        }
        Command::SynthCorpus {
            out,
            sources,
            frames,
            height,
            width,
            seed,
        } => {
            let paths = aeroloop_core::synth::micro_corpus(&out, sources, frames, height, width, seed)?;
            eprintln!("wrote {} sources to {}", paths.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
