//! Scenario runner for the plug-and-charge simulator.
//!
//! Loads a TOML scenario, runs the honest slot schedule and the listed attack
//! scenarios, and writes `report.json`, `ledger.jsonl` and (optionally)
//! `capture.jsonl`.

pub mod config;
pub mod report;

use std::path::{Path, PathBuf};
use std::time::Instant;

use pnc_core::adversary::run_scenario;
use pnc_core::channels::CaptureRecord;
use pnc_core::ledger::Block;
use pnc_core::sim::{SimError, World};

pub use config::{LoadError, ScenarioConfig};
pub use report::RunReport;

use report::{Exports, CAPTURE_FILE, LEDGER_FILE, REPORT_FILE};

/// A finished run before it is written anywhere.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub blocks: Vec<Block>,
    pub capture: Vec<CaptureRecord>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] LoadError),
    #[error("simulation failed: {0}")]
    Sim(#[from] SimError),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        1
    }
}

pub fn run(cfg: &ScenarioConfig) -> Result<RunOutput, SimError> {
    let started = Instant::now();
    let mut world = World::new(cfg.world_config())?;
    let sessions = world.run_all();
    world.seal();
    let attacks: Vec<_> = cfg.attacks.iter().map(run_scenario).collect();
    let blocks = world.ledger().blocks().to_vec();
    let capture = if cfg.capture {
        world.capture_log().to_vec()
    } else {
        Vec::new()
    };
    let summary = report::summarize(&sessions, &blocks);
    let honest_ok =
        summary.ledger_valid && summary.authenticated == summary.sessions && summary.keys_match == summary.sessions;
    let report = RunReport {
        config: cfg.clone(),
        schedules: report::schedule_rows(&sessions),
        sessions,
        summary,
        all_expectations_met: honest_ok && attacks.iter().all(|a| a.pass),
        attacks,
        exports: Exports {
            ledger: LEDGER_FILE.into(),
            capture: cfg.capture.then(|| CAPTURE_FILE.into()),
        },
        wall_clock_ms: started.elapsed().as_millis() as u64,
    };
    Ok(RunOutput {
        report,
        blocks,
        capture,
    })
}

pub fn write_outputs(out: &RunOutput, dir: &Path) -> Result<(), CliError> {
    let io = |path: PathBuf| {
        move |source| CliError::Io {
            path: path.display().to_string(),
            source,
        }
    };
    std::fs::create_dir_all(dir).map_err(io(dir.to_path_buf()))?;
    let ledger = dir.join(LEDGER_FILE);
    report::write_ledger(&ledger, &out.blocks).map_err(io(ledger))?;
    let capture = dir.join(CAPTURE_FILE);
    if out.report.config.capture {
        report::write_capture(&capture, &out.capture).map_err(io(capture))?;
    } else if capture.exists() {
        // A stale file from an earlier run would contradict the report.
        std::fs::remove_file(&capture).map_err(io(capture))?;
    }
    let path = dir.join(REPORT_FILE);
    report::write_report(&path, &out.report).map_err(io(path))
}

/// Options the CLI can layer over the scenario file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub capture: bool,
}

pub fn load_with(path: &Path, overrides: &Overrides) -> Result<ScenarioConfig, LoadError> {
    let mut cfg = ScenarioConfig::load(path)?;
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    cfg.capture |= overrides.capture;
    Ok(cfg)
}

/// Load, run and write. The returned report decides exit 0 or 2.
pub fn execute(scenario: &Path, overrides: &Overrides, out_dir: &Path) -> Result<RunReport, CliError> {
    let cfg = load_with(scenario, overrides)?;
    let out = run(&cfg)?;
    write_outputs(&out, out_dir)?;
    Ok(out.report)
}
