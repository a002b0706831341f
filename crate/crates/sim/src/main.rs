use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use pnc_sim::{execute, Overrides};

/// Run a plug-and-charge scenario and write report.json and ledger.jsonl.
#[derive(Debug, Parser)]
#[command(name = "pnc-sim", version)]
struct Args {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the seed in the scenario file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Also write capture.jsonl.
    #[arg(long)]
    capture: bool,
    #[arg(long)]
    quiet: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let overrides = Overrides {
        seed: args.seed,
        capture: args.capture,
    };
    match execute(&args.scenario, &overrides, &args.out) {
        Ok(report) => {
            if !args.quiet {
                let s = &report.summary;
                println!(
                    "sessions {} authenticated {} transactions {} disputes {} ledger_valid {}",
                    s.sessions, s.authenticated, s.transaction_records, s.dispute_records, s.ledger_valid
                );
                for a in &report.attacks {
                    let verdict = if a.pass { "ok" } else { "MISMATCH" };
                    println!(
                        "attack {} seed {}: {} (expected {}) {verdict}",
                        a.scenario_kind, a.seed, a.observed, a.expected
                    );
                }
                println!("wrote {} in {} ms", args.out.display(), report.wall_clock_ms);
            }
            ExitCode::from(report.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("pnc-sim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
