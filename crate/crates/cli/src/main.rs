use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedrm::runner::{cmd_export_trajectory, cmd_run, cmd_table, format_table, RunReport};

/// Federated averaging simulator with representation matching and online
/// hyper-parameter tuning.
#[derive(Parser)]
#[command(name = "fedrm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run { config: PathBuf },
    /// Write trajectory.csv for a finished run.
    ExportTrajectory { run_dir: PathBuf },
    /// Mean and std of final test accuracy, grouped by config.
    Table {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config } => cmd_run(&config).map(|(dir, report)| match report {
            RunReport::Single(s) => println!(
                "{}: test accuracy {:.4} after {} rounds ({})",
                s.label,
                s.final_test_accuracy,
                s.rounds,
                dir.display()
            ),
            RunReport::Repeated(s) => println!(
                "{}: test accuracy {:.4} ± {:.4} over {} runs ({})",
                s.label,
                s.mean_accuracy,
                s.std_accuracy,
                s.runs.len(),
                dir.display()
            ),
        }),
        Command::ExportTrajectory { run_dir } => cmd_export_trajectory(&run_dir).map(|p| println!("{}", p.display())),
        Command::Table { run_dirs } => cmd_table(&run_dirs).map(|rows| print!("{}", format_table(&rows))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
