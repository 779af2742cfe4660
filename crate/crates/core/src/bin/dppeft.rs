use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dppeft::harness::{audit, runner, RunConfig};
use dppeft::Result;

#[derive(Parser)]
#[command(name = "dppeft", version, about = "Differentially private low-rank fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a manifest
    GenData {
        manifest: PathBuf,
        /// Output directory [default: <manifest stem>_data next to the manifest]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one run; writes metrics.csv, privacy.csv and adapter.txt to out_dir
    Train { config: PathBuf },
    /// Learning-rate x batch-size grid; writes sweep.csv to out_dir
    Sweep { config: PathBuf },
    /// Label-noise / feedback-bias levels; writes robustness.csv to out_dir
    Robustness { config: PathBuf },
    /// Privacy report for a planned run, without training
    Audit { config: PathBuf },
    /// Summary table over finished run directories
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { manifest, out } => {
            let out = out.unwrap_or_else(|| {
                let stem = manifest.file_stem().unwrap_or_default().to_string_lossy();
                manifest.with_file_name(format!("{stem}_data"))
            });
            let ds = runner::gen_data(&manifest, &out)?;
            println!(
                "wrote {} train / {} eval records to {}",
                ds.train.len(),
                ds.eval.len(),
                out.display()
            );
        }
        Command::Train { config } => {
            let (outcome, out) = runner::train_from_config(&RunConfig::load(&config)?)?;
            println!(
                "steps={} acc_macro={} eps={} trainable_fraction={} out={}",
                outcome.metrics.last().map_or(0, |r| r.step),
                outcome.final_accuracy().map_or("none".into(), |a| a.to_string()),
                outcome.report.epsilon,
                outcome.trainable_fraction,
                out.display()
            );
        }
        Command::Sweep { config } => print!("{}", runner::sweep_from_config(&RunConfig::load(&config)?)?),
        Command::Robustness { config } => {
            print!("{}", runner::robustness_from_config(&RunConfig::load(&config)?)?)
        }
        Command::Audit { config } => print!("{}", audit(&RunConfig::load(&config)?)?.to_csv()),
        Command::Report { dirs } => print!("{}", runner::report_dirs(&dirs)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors are configuration errors; 2 is reserved for numeric aborts
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
