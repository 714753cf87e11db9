//! `tutor`: operator entry points for the offline tutoring assistant.
//!
//! Data goes to standard output, diagnostics to standard error. Exit status
//! is 0 on success, 1 on an operational error and 2 on a usage error.

mod commands;

use std::net::IpAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;
use tutor_core::config::BackendKind;
use tutor_core::{AppConfig, ResponseLevel};

#[derive(Debug, Parser)]
#[command(name = "tutor", version, about = "Offline tutoring assistant running on local hardware")]
struct Cli {
    /// Data directory holding models/, documents, sessions and telemetry.
    #[arg(long, global = true, env = "TUTOR_DATA_DIR")]
    data_dir: Option<PathBuf>,

    /// Inference backend (overrides the config file).
    #[arg(long, global = true)]
    backend: Option<BackendKind>,

    /// Print a single JSON document on standard output.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the hardware profile used for model selection.
    Probe,
    /// Inspect the local model registry.
    #[command(subcommand)]
    Models(ModelsCommand),
    /// Serve the HTTP API and the browser UI.
    Serve(ServeArgs),
    /// Add a plain-text or markdown document to the reference library.
    Ingest {
        file: PathBuf,
        /// Source name to record (defaults to the file name).
        #[arg(long)]
        name: Option<String>,
    },
    /// Manage ingested documents.
    #[command(subcommand)]
    Docs(DocsCommand),
    /// Answer one question without the HTTP layer.
    Ask(AskArgs),
    /// Replay the synthetic prompt ladder and report latency.
    Bench(BenchArgs),
}

#[derive(Debug, Subcommand)]
enum ModelsCommand {
    /// List valid models and scan warnings.
    List,
    /// Write placeholder models for the three reference tiers, for trying
    /// the tutor with the stub backend.
    Demo,
    /// Dry-run tier selection, optionally against a hypothetical machine.
    Select {
        /// Available RAM in GiB.
        #[arg(long)]
        ram: Option<f64>,
        /// Total RAM in GiB (defaults to --ram).
        #[arg(long, requires = "ram")]
        total_ram: Option<f64>,
        #[arg(long, requires = "ram")]
        cores: Option<u32>,
    },
}

#[derive(Debug, Subcommand)]
enum DocsCommand {
    List,
    Remove { doc_id: String },
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    bind: Option<IpAddr>,
    /// Accept connections on a private-network address.
    #[arg(long)]
    allow_lan: bool,
    /// Directory of static UI assets served at `/`.
    #[arg(long)]
    static_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AskArgs {
    query: String,
    #[arg(long, default_value = "UpperSecondary")]
    level: ResponseLevel,
    /// Answer without consulting ingested documents.
    #[arg(long)]
    no_rag: bool,
    #[arg(long)]
    max_new_tokens: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Write per-request rows as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = tutor_core::bench::REPETITIONS)]
    repetitions: usize,
}

fn main() -> ExitCode {
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    init_logging(matches!(cli.command, Command::Serve(_)));
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn init_logging(serving: bool) {
    let default = if serving { "info" } else { "warn" };
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn default_data_dir() -> anyhow::Result<PathBuf> {
    dirs::data_local_dir()
        .map(|d| d.join("offline-tutor"))
        .ok_or_else(|| anyhow!("no platform data directory; pass --data-dir"))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let data_dir = match cli.data_dir {
        Some(d) => d,
        None => default_data_dir()?,
    };
    let mut config = AppConfig::load(&data_dir)?;
    if let Some(b) = cli.backend {
        config.backend = b;
    }
    let ctx = commands::Context {
        data_dir,
        config,
        json: cli.json,
    };
    match cli.command {
        Command::Probe => commands::probe(&ctx),
        Command::Models(ModelsCommand::List) => commands::models_list(&ctx),
        Command::Models(ModelsCommand::Demo) => commands::models_demo(&ctx),
        Command::Models(ModelsCommand::Select { ram, total_ram, cores }) => {
            commands::models_select(&ctx, ram, total_ram, cores)
        }
        Command::Serve(args) => {
            let mut ctx = ctx;
            let server = &mut ctx.config.server;
            if let Some(p) = args.port {
                server.port = p;
            }
            if let Some(b) = args.bind {
                server.bind_address = b;
            }
            if args.allow_lan {
                server.allow_lan = true;
            }
            if let Some(d) = args.static_dir {
                server.static_ui_dir = Some(d);
            }
            commands::serve(ctx)
        }
        Command::Ingest { file, name } => {
            let name = match name {
                Some(n) => n,
                None => file
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .context("file has no name; pass --name")?,
            };
            commands::ingest(&ctx, &file, &name)
        }
        Command::Docs(DocsCommand::List) => commands::docs_list(&ctx),
        Command::Docs(DocsCommand::Remove { doc_id }) => commands::docs_remove(&ctx, &doc_id),
        Command::Ask(args) => {
            let mut ctx = ctx;
            let generation = &mut ctx.config.generation;
            if let Some(n) = args.max_new_tokens {
                generation.max_new_tokens = n;
            }
            if args.seed.is_some() {
                generation.seed = args.seed;
            }
            commands::ask(&ctx, &args.query, args.level, !args.no_rag)
        }
        Command::Bench(args) => commands::bench(&ctx, args.out.as_deref(), args.repetitions),
    }
}
