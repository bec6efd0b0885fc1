use clap::{Parser, Subcommand};
use gridmoe_cli::{
    cmd_inspect_gates, cmd_sweep, cmd_train, cmd_validate, CliError, InspectArgs, SweepArgs,
    TrainArgs,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "gridmoe",
    version,
    about = "Grid mixture-of-experts training harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its artifacts.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (defaults to run.out_dir, then $GRIDMOE_OUT/<name>, then runs/<name>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Disable the loss-rate governor (plain SGD multipliers).
        #[arg(long)]
        no_dso: bool,
        /// Replace every MoE block with its dense linear layer.
        #[arg(long)]
        no_moe: bool,
        #[arg(long)]
        force: bool,
    },
    /// Train one model per cell of a parameter grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Space-separated axes, e.g. "moe.n_experts=2,4,8 dso.enabled=true,false".
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Report expert participation of a checkpoint on one modality.
    InspectGates {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        modality: String,
        /// Number of inspection samples.
        #[arg(long, short = 'n', default_value_t = 16)]
        n: usize,
        /// Config to rebuild the model; defaults to the one stored with the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Parse and validate a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            no_dso,
            no_moe,
            force,
        } => {
            let r = cmd_train(&TrainArgs {
                config,
                seed,
                out,
                no_dso,
                no_moe,
                force,
            })?;
            let last = r
                .outcome
                .losses
                .last()
                .map(|l| format!("{l:?}"))
                .unwrap_or_default();
            println!("wrote {} (final losses {last})", r.out_dir.display());
        }
        Command::Sweep {
            config,
            grid,
            out,
            force,
        } => {
            let r = cmd_sweep(&SweepArgs {
                config,
                grid,
                out,
                force,
            })?;
            println!("{} cells, summary in {}", r.cells, r.csv.display());
        }
        Command::InspectGates {
            checkpoint,
            modality,
            n,
            config,
            out,
            force,
        } => {
            let r = cmd_inspect_gates(&InspectArgs {
                checkpoint,
                config,
                modality,
                n,
                out,
                force,
            })?;
            print!("{}", r.summary());
            println!("wrote {}", r.out_dir.display());
        }
        Command::Validate { config } => println!("{}", cmd_validate(&config)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            let err = anyhow::Error::new(e).context("gridmoe failed");
            eprintln!("error: {err:#}");
            ExitCode::from(code as u8)
        }
    }
}
