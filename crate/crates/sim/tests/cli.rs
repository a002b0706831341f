use std::path::{Path, PathBuf};
use std::process::Command;

use pnc_core::ledger::Record;
use pnc_sim::report::{read_capture, read_ledger, read_report, CAPTURE_FILE, LEDGER_FILE, REPORT_FILE};
use pnc_sim::{run, write_outputs, ScenarioConfig};
use proptest::prelude::*;

const HONEST: &str = r#"
seed = 42
slots = 3
[users]
count = 2
[stations]
count = 1
"#;

fn write_scenario(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("scenario.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn pnc_sim(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_pnc-sim"))
        .args(args)
        .arg("--quiet")
        .status()
        .unwrap()
        .code()
        .unwrap()
}

fn cli_run(text: &str, extra: &[&str]) -> (i32, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path(), text);
    let out = dir.path().join("out");
    let mut args = vec!["--scenario", scenario.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let code = pnc_sim(&args);
    (code, dir)
}

#[test]
fn honest_run_writes_six_transactions() {
    let (code, dir) = cli_run(HONEST, &[]);
    assert_eq!(code, 0);
    let out = dir.path().join("out");
    let blocks = read_ledger(&out.join(LEDGER_FILE)).unwrap();
    let txs = blocks
        .iter()
        .flat_map(|b| &b.entries)
        .filter(|e| matches!(e.record(), Ok(Record::Transaction(_))))
        .count();
    assert_eq!(txs, 6);
    let report = read_report(&out.join(REPORT_FILE)).unwrap();
    assert_eq!(report.summary.transaction_records, 6);
    assert_eq!(report.schedules.len(), 6);
    assert!(report.all_expectations_met);
}

#[test]
fn zero_beta_exits_one() {
    let text = HONEST.replace("count = 2", "count = 2\nbeta = [0.0, 0.02]");
    let (code, dir) = cli_run(&text, &[]);
    assert_eq!(code, 1);
    assert!(!dir.path().join("out").join(REPORT_FILE).exists());
}

#[test]
fn unreadable_or_malformed_config_exits_one() {
    assert_eq!(pnc_sim(&["--scenario", "/nonexistent/scenario.toml"]), 1);
    let (code, _dir) = cli_run("seed = \"x\"\n", &[]);
    assert_eq!(code, 1);
    let (code, _dir) = cli_run(&format!("{HONEST}\n[[attacks]]\nkind = \"Teleport\"\nseed = 1\n"), &[]);
    assert_eq!(code, 1);
}

#[test]
fn failed_expectation_exits_two() {
    let text = format!(
        "{HONEST}\n[[attacks]]\nkind = \"ReplayM1\"\nseed = 1\nexpected = \"breached\"\n[attacks.params]\ntrials = 2\n"
    );
    let (code, dir) = cli_run(&text, &[]);
    assert_eq!(code, 2);
    let report = read_report(&dir.path().join("out").join(REPORT_FILE)).unwrap();
    assert!(!report.all_expectations_met);
    assert_eq!(report.attacks[0].observed, "rejected");
}

#[test]
fn seed_flag_overrides_config() {
    let (_, a) = cli_run(HONEST, &["--seed", "9"]);
    let (_, b) = cli_run(&HONEST.replace("seed = 42", "seed = 9"), &[]);
    let ra = read_report(&a.path().join("out").join(REPORT_FILE)).unwrap();
    let rb = read_report(&b.path().join("out").join(REPORT_FILE)).unwrap();
    assert_eq!(ra.config.seed, 9);
    assert_eq!(ra.without_timing(), rb.without_timing());
}

#[test]
fn capture_flag_writes_parseable_lines() {
    let (code, dir) = cli_run(HONEST, &["--capture"]);
    assert_eq!(code, 0);
    let path = dir.path().join("out").join(CAPTURE_FILE);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.lines().count() > 0);
    for line in text.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
    assert_eq!(read_capture(&path).unwrap().len(), text.lines().count());
}

#[test]
fn no_capture_file_without_capture() {
    let (code, dir) = cli_run(HONEST, &[]);
    assert_eq!(code, 0);
    assert!(!dir.path().join("out").join(CAPTURE_FILE).exists());
}

#[test]
fn export_then_parse_is_identical() {
    let cfg = ScenarioConfig::parse(HONEST).unwrap();
    let out = run(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_outputs(&out, dir.path()).unwrap();
    assert_eq!(read_report(&dir.path().join(REPORT_FILE)).unwrap(), out.report);
    assert_eq!(read_ledger(&dir.path().join(LEDGER_FILE)).unwrap(), out.blocks);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let (_, a) = cli_run(HONEST, &["--capture"]);
    let (_, b) = cli_run(HONEST, &["--capture"]);
    for file in [LEDGER_FILE, CAPTURE_FILE] {
        let x = std::fs::read(a.path().join("out").join(file)).unwrap();
        let y = std::fs::read(b.path().join("out").join(file)).unwrap();
        assert_eq!(x, y, "{file}");
    }
    let ra = read_report(&a.path().join("out").join(REPORT_FILE)).unwrap();
    let rb = read_report(&b.path().join("out").join(REPORT_FILE)).unwrap();
    assert_eq!(
        serde_json::to_string(&ra.without_timing()).unwrap(),
        serde_json::to_string(&rb.without_timing()).unwrap()
    );
}

#[test]
fn tampered_ledger_export_is_rejected() {
    let cfg = ScenarioConfig::parse(HONEST).unwrap();
    let out = run(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_outputs(&out, dir.path()).unwrap();
    let path = dir.path().join(LEDGER_FILE);
    let text = std::fs::read_to_string(&path).unwrap();
    let tampered = text.replacen("\"timestamp_ms\":1", "\"timestamp_ms\":2", 1);
    assert_ne!(text, tampered);
    std::fs::write(&path, tampered).unwrap();
    assert!(read_ledger(&path).is_err());
}

/// Cheap attack entries; `true` keeps the default expectation, `false` swaps in a wrong one.
fn attack_entry(kind: u8, correct: bool) -> String {
    let (name, params, wrong) = match kind {
        0 => ("ReplayM1", "trials = 2", "breached"),
        1 => ("EvRefusePay", "trials = 1", "finalized"),
        2 => ("EvcsCredentialExtract", "trials = 1", "keys_leaked"),
        _ => ("CrossSessionRelay", "trials = 2", "breached"),
    };
    let expected = if correct {
        String::new()
    } else {
        format!("expected = \"{wrong}\"\n")
    };
    format!("\n[[attacks]]\nkind = \"{name}\"\nseed = {kind}\n{expected}[attacks.params]\n{params}\n")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn exit_code_matrix(entries in prop::collection::vec((0u8..4, any::<bool>()), 0..4)) {
        let mut text = HONEST.replace("slots = 3", "slots = 1");
        for (kind, correct) in &entries {
            text.push_str(&attack_entry(*kind, *correct));
        }
        let cfg = ScenarioConfig::parse(&text).unwrap();
        let report = run(&cfg).unwrap().report;
        let want = if entries.iter().all(|(_, ok)| *ok) { 0 } else { 2 };
        prop_assert_eq!(report.exit_code(), want);
        prop_assert_eq!(report.attacks.len(), entries.len());
    }
}
