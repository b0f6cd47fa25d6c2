//! Library side of the `lesionseg` binary. Every subcommand is a plain
//! function so it can be driven from tests without spawning a process.

pub mod args;
pub mod evaluate;
pub mod inference;
pub mod overlay;
pub mod predict;
pub mod prepare;
pub mod report;
pub mod train;
pub mod util;

pub use args::{Cli, Command, DeviceKind, DEVICE_ENV};

/// Runs one parsed invocation and returns the process exit code.
pub fn run(cli: Cli) -> anyhow::Result<i32> {
    let device = cli.device.device();
    match cli.command {
        Command::Prepare(a) => {
            let summary = prepare::cmd_prepare(&a)?;
            print!("{}", summary.to_text());
            Ok(0)
        }
        Command::Train(a) => {
            let outcome = train::cmd_train(&a, device)?;
            println!("best checkpoint: {}", outcome.result.best_checkpoint.display());
            print!("{}", outcome.report.to_table("val"));
            Ok(0)
        }
        Command::Evaluate(a) => {
            for (path, report) in evaluate::cmd_evaluate(&a, &device)? {
                println!("{}", path.display());
                print!("{}", report.to_table(&format!("tau={}", report.binarization_tau)));
            }
            Ok(0)
        }
        Command::Predict(a) => {
            let outcome = predict::cmd_predict(&a, &device)?;
            println!("wrote {} files", outcome.written.len());
            for (path, err) in &outcome.failures {
                eprintln!("error: {}: {err}", path.display());
            }
            Ok(i32::from(!outcome.failures.is_empty()))
        }
        Command::Overlay(a) => {
            println!("{}", overlay::cmd_overlay(&a, &device)?.display());
            Ok(0)
        }
        Command::Report(a) => {
            print!("{}", report::cmd_report(&a)?);
            Ok(0)
        }
    }
}
