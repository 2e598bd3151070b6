use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use hjm_hypo::{run, Command, RunOptions};

#[derive(Parser, Debug)]
#[command(
    name = "hjm-hypo",
    version,
    about = "Batch experiments on HJM-type curve dynamics"
)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Directory for reports; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Master seed, overriding `experiment.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Path count, overriding `experiment.paths`.
    #[arg(long)]
    paths: Option<usize>,
    /// Worker threads; 0 or absent uses every core.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let opts = RunOptions {
        seed: cli.seed,
        paths: cli.paths,
        threads: cli.threads,
    };
    match run(cli.command, &cli.config, &cli.out, opts) {
        Ok(outcome) => {
            println!("{}: {}", cli.command.name(), outcome.headline);
            println!(
                "wrote {} files to {}",
                outcome.files.len(),
                cli.out.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("hjm-hypo: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
