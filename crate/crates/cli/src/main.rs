//! `cultivagents`: run scripted conversations, check persona files, or serve
//! the WebSocket chat service.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cultivagents::config::ServiceConfig;
use cultivagents_cli::personas::{check_personas, render_error};
use cultivagents_cli::run::run_scripted;
use cultivagents_cli::server::{serve, Mode};
use cultivagents_cli::{EXIT_INPUT, EXIT_OK};
use tracing_subscriber::EnvFilter;

#[derive(Debug, Parser)]
#[command(name = "cultivagents", version, about = "Profile-aware multi-agent gardening assistant")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scripted scenario headlessly and write its artifacts.
    Run {
        /// Scenario TOML file.
        #[arg(long)]
        scenario: PathBuf,
        /// Output directory for export.txt, events.jsonl, frames.jsonl and
        /// transcript.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a persona file.
    CheckPersonas {
        path: PathBuf,
        /// Check the file as plug-ins added to the built-in agents.
        #[arg(long)]
        merge: bool,
    },
    /// Serve the WebSocket chat service.
    Serve {
        /// Service config TOML; environment variables override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use scripted providers instead of the remote API.
        #[arg(long)]
        scripted: bool,
        /// Scenario file whose selector and agent scripts are served
        /// (implies --scripted).
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Listening port; overrides config and environment. 0 picks a free port.
        #[arg(long)]
        port: Option<u16>,
    },
}

fn exit(code: i32) -> ExitCode {
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return exit(EXIT_INPUT);
        }
    };
    match cli.command {
        Command::Run { scenario, out } => {
            let summary = runtime.block_on(run_scripted(&scenario, &out));
            summary.stdout.iter().for_each(|l| println!("{l}"));
            summary.stderr.iter().for_each(|l| eprintln!("{l}"));
            exit(summary.exit_code)
        }
        Command::CheckPersonas { path, merge } => match check_personas(&path, merge) {
            Ok(report) => {
                println!("{}: ok ({} personas: {})", path.display(), report.ids.len(), report.ids.join(", "));
                exit(EXIT_OK)
            }
            Err(e) => {
                eprintln!("{}", render_error(&path, &e));
                exit(EXIT_INPUT)
            }
        },
        Command::Serve {
            config,
            scripted,
            scenario,
            port,
        } => {
            let mut config = match ServiceConfig::from_process_env(config.as_deref()) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return exit(EXIT_INPUT);
                }
            };
            if let Some(port) = port {
                config.port = port;
            }
            let mode = if scripted || scenario.is_some() {
                Mode::Scripted(scenario)
            } else {
                Mode::Live
            };
            let result = runtime.block_on(serve(&config, &mode, |addr| {
                println!("listening on http://{addr}");
                let _ = std::io::stdout().flush();
            }));
            match result {
                Ok(()) => exit(EXIT_OK),
                Err(e) => {
                    eprintln!("error: {e:#}");
                    exit(EXIT_INPUT)
                }
            }
        }
    }
}
