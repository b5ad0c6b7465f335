use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use surgtwin_cli::{commands, console};

#[derive(Parser)]
#[command(name = "surgtwin", version, about = "Digital-twin pick-and-place simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a batch of trials and write results under --out.
    RunExperiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render the first trial's scene as a PNG.
    RenderScene {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run trials interactively behind the supervisor console.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
    },
    /// Re-run a recorded trace and check that it reproduces.
    Replay {
        #[arg(long)]
        trace: PathBuf,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::RunExperiment { config, out, trials, seed } => {
            let cfg = commands::load_config(&config, trials, seed)?;
            commands::run_experiment(&cfg, &out, &commands::label_for(&config))?;
        }
        Command::RenderScene { config, out } => {
            let cfg = commands::load_config(&config, None, None)?;
            commands::render_scene(&cfg, &out)?;
        }
        Command::Serve { config, bind } => {
            let cfg = commands::load_config(&config, None, None)?;
            let mut running = console::start(cfg, &bind)?;
            eprintln!("console listening on http://{}", running.addr);
            let records = running.wait_trials();
            let ok = records.iter().filter(|r| r.success).count();
            eprintln!("session finished: {ok}/{} trials succeeded; still serving, Ctrl-C to exit", records.len());
            running.wait_server();
        }
        Command::Replay { trace } => {
            let report = commands::replay(&trace)?;
            let r = &report.record;
            println!(
                "trial {}: success={} mode={:?} steps={}",
                r.trial_index, r.success, r.failure_mode, r.planning_steps
            );
            if let Some(i) = report.divergence {
                eprintln!("replay diverges from the trace at entry {i}");
                return Ok(ExitCode::FAILURE);
            }
            println!("replay matches the trace");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
