//! Run report and JSON-lines exports.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use pnc_core::adversary::AttackOutcome;
use pnc_core::channels::CaptureRecord;
use pnc_core::contract::SlotStatus;
use pnc_core::ledger::{verify_blocks, Block, DisputeCause, Record};
use pnc_core::sim::SessionReport;
use serde::{Deserialize, Serialize};

use crate::config::ScenarioConfig;

pub const REPORT_FILE: &str = "report.json";
pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const CAPTURE_FILE: &str = "capture.jsonl";

/// One row per session that reached the trading phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRow {
    pub session: u64,
    pub slot: u64,
    pub pid: String,
    pub evcs_id: String,
    pub x_star_kwh: f64,
    pub bill_total: Option<f64>,
    pub status: SlotStatus,
    pub dispute_cause: Option<DisputeCause>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub sessions: u64,
    pub authenticated: u64,
    pub keys_match: u64,
    pub transaction_records: u64,
    pub dispute_records: u64,
    pub settled_total: f64,
    pub ledger_blocks: u64,
    pub ledger_valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exports {
    pub ledger: String,
    pub capture: Option<String>,
}

/// Everything except `wall_clock_ms` is a function of the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ScenarioConfig,
    pub sessions: Vec<SessionReport>,
    pub schedules: Vec<SlotRow>,
    pub summary: Summary,
    pub attacks: Vec<AttackOutcome>,
    pub all_expectations_met: bool,
    pub exports: Exports,
    pub wall_clock_ms: u64,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        if self.all_expectations_met {
            0
        } else {
            2
        }
    }

    /// The report with the wall-clock field zeroed, for comparisons.
    pub fn without_timing(&self) -> RunReport {
        RunReport {
            wall_clock_ms: 0,
            ..self.clone()
        }
    }
}

pub fn schedule_rows(sessions: &[SessionReport]) -> Vec<SlotRow> {
    sessions
        .iter()
        .filter_map(|s| {
            s.outcome.as_ref().map(|o| SlotRow {
                session: s.session,
                slot: o.slot,
                pid: s.pid.clone(),
                evcs_id: s.evcs_id.clone(),
                x_star_kwh: o.x_star_kwh,
                bill_total: o.bill_total,
                status: o.status,
                dispute_cause: o.dispute_cause,
            })
        })
        .collect()
}

pub fn summarize(sessions: &[SessionReport], blocks: &[Block]) -> Summary {
    let mut sum = Summary {
        sessions: sessions.len() as u64,
        authenticated: sessions.iter().filter(|s| s.authenticated).count() as u64,
        keys_match: sessions.iter().filter(|s| s.keys_match).count() as u64,
        ledger_blocks: blocks.len() as u64,
        ledger_valid: verify_blocks(blocks),
        ..Summary::default()
    };
    for entry in blocks.iter().flat_map(|b| &b.entries) {
        match entry.record() {
            Ok(Record::Transaction(t)) => {
                sum.transaction_records += 1;
                sum.settled_total += t.amount;
            }
            Ok(Record::Dispute(d)) => {
                sum.dispute_records += 1;
                sum.settled_total += d.settled_amount + d.fee_owed;
            }
            _ => {}
        }
    }
    sum
}

pub fn write_report(path: &Path, report: &RunReport) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, report)?;
    w.write_all(b"\n")?;
    w.flush()
}

pub fn read_report(path: &Path) -> io::Result<RunReport> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(io::Error::from)
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> io::Result<Vec<T>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_ledger(path: &Path, blocks: &[Block]) -> io::Result<()> {
    write_lines(path, blocks)
}

/// Reads a ledger export and rejects it unless the hash chain verifies.
pub fn read_ledger(path: &Path) -> io::Result<Vec<Block>> {
    let blocks: Vec<Block> = read_lines(path)?;
    if !verify_blocks(&blocks) {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "ledger hash chain does not verify",
        ));
    }
    Ok(blocks)
}

pub fn write_capture(path: &Path, records: &[CaptureRecord]) -> io::Result<()> {
    write_lines(path, records)
}

pub fn read_capture(path: &Path) -> io::Result<Vec<CaptureRecord>> {
    read_lines(path)
}
