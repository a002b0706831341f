//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use pnc_core::adversary::{
    correlation_study, count_secret_hits, hash_chain_trials, replay_trials, run_mitm_suite, CHARGING_UTILITY,
};
use pnc_core::contract::{compute_optimal_exchange, joint_utility, EnergyBounds, SlotStatus, TradeParams};
use pnc_core::ledger::{verify_blocks, Block, DisputeCause, Ledger};
use pnc_core::sim::{meter_value, SessionBehavior, World, WorldConfig, DEFAULT_START_MS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Criterion = (&'static str, fn() -> Verdict);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn world(seed: u64, users: usize, stations: usize, slots: u64) -> World {
    let mut w = World::new(WorldConfig {
        seed,
        users,
        stations,
        slots,
        ..WorldConfig::default()
    })
    .expect("valid config");
    w.set_clock(DEFAULT_START_MS + 60_000);
    w
}

fn honest_completeness() -> Verdict {
    let started = Instant::now();
    let mut w = World::new(WorldConfig {
        seed: 1,
        users: 10,
        stations: 3,
        slots: 100,
        ..WorldConfig::default()
    })
    .expect("valid config");
    let reports = w.run_all();
    let secs = started.elapsed().as_secs_f64();
    let ok = reports.iter().filter(|r| r.authenticated && r.keys_match).count();
    verdict(
        reports.len() == 1000 && ok == 1000 && secs < 10.0,
        format!(
            "{ok}/{} authenticated with identical keys in {secs:.2} s (limit 10 s)",
            reports.len()
        ),
    )
}

fn hash_chain() -> Verdict {
    let s = hash_chain_trials(2, 100, 1);
    verdict(
        s.trials == 400 && s.false_acceptances == 0 && s.aborted_as_specified == 400,
        format!(
            "{} trials, {} false acceptances, {} aborted at the specified step {:?}",
            s.trials, s.false_acceptances, s.aborted_as_specified, s.per_link
        ),
    )
}

fn replay() -> Verdict {
    let s = replay_trials(3, 300);
    verdict(
        s.trials == 300 && s.all_rejected(),
        format!(
            "{} trials: stale {} in-window {} consumed {} rejected, {} accepted, {} setup failures",
            s.trials, s.stale_rejected, s.in_window_rejected, s.consumed_rejected, s.accepted, s.setup_failures
        ),
    )
}

fn capture_scan(seed: u64) -> (usize, usize) {
    let mut w = World::new(WorldConfig {
        seed,
        users: 3,
        stations: 2,
        slots: 3,
        capture: true,
        ..WorldConfig::default()
    })
    .expect("valid config");
    w.run_all();
    let frames: Vec<Vec<u8>> = w
        .capture_log()
        .iter()
        .map(|c| hex::decode(&c.bytes_hex).expect("capture is hex"))
        .collect();
    let refs: Vec<&[u8]> = frames.iter().map(Vec::as_slice).collect();
    (count_secret_hits(&refs, &w.secrets_for_audit()), frames.len())
}

fn mitm() -> Verdict {
    let started = Instant::now();
    let r = run_mitm_suite(4, 20, 100_000);
    let (hits, frames) = capture_scan(4);
    verdict(
        r.defended() && r.forgery.attempts == 100_000 && r.forgery.accepted == 0 && hits == 0,
        format!(
            "{} forgeries, {} accepted {:?}; passive hits {}; capture scan {} hits over {} frames; {:.1} s",
            r.forgery.attempts,
            r.forgery.accepted,
            r.forgery.rejections,
            r.passive_secret_hits,
            hits,
            frames,
            started.elapsed().as_secs_f64()
        ),
    )
}

fn privacy() -> Verdict {
    let fresh = correlation_study(5, 50, 5, 10, true);
    let reused = correlation_study(5, 50, 5, 10, false);
    verdict(
        fresh.mean_accuracy <= fresh.chance + 0.1 && reused.mean_accuracy > 0.9,
        format!(
            "per-session pids {:.3} (limit {:.3}); reused pids {:.3} (needs > 0.9)",
            fresh.mean_accuracy,
            fresh.chance + 0.1,
            reused.mean_accuracy
        ),
    )
}

const GRID_STEP: f64 = 1e-4;

fn grid_argmax(p: &TradeParams, b: &EnergyBounds) -> (f64, f64) {
    let n = ((b.x_max - b.x_min) / GRID_STEP).round() as i64;
    let mut best = (0.0, joint_utility(0.0, p));
    for i in 0..=n {
        let x = (b.x_min + i as f64 * GRID_STEP).min(b.x_max);
        let j = joint_utility(x, p);
        if j > best.1 {
            best = (x, j);
        }
    }
    best
}

fn within_one_step(p: &TradeParams, b: &EnergyBounds) -> bool {
    let x = compute_optimal_exchange(p, b);
    let (gx, gj) = grid_argmax(p, b);
    let j = joint_utility(x, p);
    j >= gj - 1e-9 && ((x - gx).abs() <= GRID_STEP + 1e-12 || (j - gj).abs() <= 1e-9)
}

fn optimizer() -> Verdict {
    let started = Instant::now();
    let worked = TradeParams {
        alpha: 0.5,
        beta: 0.01,
        gamma: 0.1,
        delta: 0.01,
        p_c: 0.2,
        p_d: 0.15,
        c_g: 0.1,
        v_g: 0.3,
        fee: 0.5,
    };
    let open = EnergyBounds::new(-30.0, 40.0).unwrap();
    let clamped = EnergyBounds::new(-30.0, 15.0).unwrap();
    let x_open = compute_optimal_exchange(&worked, &open);
    let x_clamped = compute_optimal_exchange(&worked, &clamped);
    let mut ok = (x_open - 20.0).abs() < 1e-12
        && (x_clamped - 15.0).abs() < 1e-12
        && within_one_step(&worked, &open)
        && within_one_step(&worked, &clamped);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut matched = 0;
    for _ in 0..100 {
        let p = TradeParams {
            alpha: rng.gen_range(0.0..0.8),
            beta: rng.gen_range(0.001..0.05),
            gamma: rng.gen_range(0.0..0.3),
            delta: rng.gen_range(0.001..0.05),
            p_c: rng.gen_range(0.1..0.4),
            p_d: rng.gen_range(0.1..0.3),
            c_g: rng.gen_range(0.0..0.3),
            v_g: rng.gen_range(0.0..0.5),
            fee: rng.gen_range(0.0..1.0),
        };
        let b = EnergyBounds::new(-rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0)).unwrap();
        if within_one_step(&p, &b) {
            matched += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ok &= matched == 100 && secs < 5.0;
    verdict(
        ok,
        format!("worked x*={x_open} and clamped x*={x_clamped}; {matched}/100 match the grid; {secs:.2} s (limit 5 s)"),
    )
}

fn metering() -> Verdict {
    let mut w = world(7, 4, 2, 60);
    let tol = w.config().delta_e_meter_kwh;
    let steps = w.config().metering_ticks;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut over, mut under, mut wrong) = (0, 0, Vec::new());
    for i in 0..200u64 {
        let magnitude = match i {
            0 => tol,
            1 => 0.0,
            _ => rng.gen_range(0.0..2.0 * tol),
        };
        let offset = if rng.gen_bool(0.5) { magnitude } else { -magnitude };
        let behavior = SessionBehavior {
            evcs_meter_offset_kwh: offset,
            ..SessionBehavior::default()
        };
        let u = (i % 4) as usize;
        let r = w.run_session(u, (i % 2) as usize, i, &behavior);
        w.advance(10_000);
        let Some(outcome) = r.outcome.as_ref() else {
            wrong.push(format!("slot {i}: {:?}", r.error));
            continue;
        };
        let x = outcome.x_star_kwh;
        let discrepancy = (1..=steps)
            .map(|k| (meter_value(x, k, steps, offset) - meter_value(x, k, steps, 0.0)).abs())
            .fold(0.0, f64::max);
        let disputes = w.ledger().disputes().iter().filter(|d| d.pid == r.pid).count();
        let txs = w.ledger().transactions().iter().filter(|t| t.pid == r.pid).count();
        let expect_dispute = discrepancy > tol + 1e-9;
        let good = if expect_dispute {
            over += 1;
            disputes == 1 && txs == 0 && outcome.status == SlotStatus::Resolved
        } else {
            under += 1;
            disputes == 0 && txs == 1 && outcome.status == SlotStatus::Finalized
        };
        if !good {
            wrong.push(format!(
                "slot {i}: discrepancy {discrepancy} disputes {disputes} txs {txs}"
            ));
        }
    }
    verdict(
        wrong.is_empty() && over + under == 200,
        format!(
            "{over} slots over tolerance, {under} within; {} wrong {:?}",
            wrong.len(),
            wrong.iter().take(3).collect::<Vec<_>>()
        ),
    )
}

fn ledger_integrity() -> Verdict {
    let mut w = world(8, 3, 2, 4);
    w.run_all();
    w.seal();
    let blocks: Vec<Block> = w.ledger().blocks().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut detected = 0;
    for _ in 0..500 {
        let i = rng.gen_range(0..blocks.len());
        let mut bytes = blocks[i].encode();
        let pos = rng.gen_range(0..bytes.len());
        bytes[pos] ^= rng.gen_range(1..=255u8);
        let caught = match Block::decode(&bytes) {
            Err(_) => true,
            Ok(b) => {
                let mut mutated = blocks.clone();
                mutated[i] = b;
                !verify_blocks(&mutated) && Ledger::from_blocks(mutated).is_err()
            }
        };
        if caught {
            detected += 1;
        }
    }
    verdict(
        detected == 500 && verify_blocks(&blocks),
        format!(
            "{detected}/500 single-byte mutations detected over {} sealed blocks",
            blocks.len()
        ),
    )
}

fn refuse_to_pay() -> Verdict {
    let mut w = world(9, 2, 2, 50);
    let behavior = SessionBehavior {
        ev_refuses_payment: true,
        user_utility: Some(CHARGING_UTILITY),
        ..SessionBehavior::default()
    };
    let mut good = 0;
    let trials = 50u64;
    for i in 0..trials {
        let u = (i % 2) as usize;
        let b = w.battery_mut(u);
        b.soc_kwh = b.capacity_kwh / 2.0;
        let r = w.run_session(u, (i % 2) as usize, i, &behavior);
        w.advance(10_000);
        let bound = w
            .ledger()
            .disputes()
            .into_iter()
            .filter(|d| d.pid == r.pid)
            .collect::<Vec<_>>();
        let txs = w.ledger().transactions().iter().filter(|t| t.pid == r.pid).count();
        if r.authenticated && bound.len() == 1 && bound[0].cause == DisputeCause::PaymentDefault && txs == 0 {
            good += 1;
        }
    }
    verdict(
        good == trials,
        format!("{good}/{trials} refusals produced one PaymentDefault record bound to the pid and no transaction"),
    )
}

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn run_cli(scenario: &Path, out: &Path) -> Option<i32> {
    Command::new(env!("CARGO_BIN_EXE_pnc-sim"))
        .arg("--scenario")
        .arg(scenario)
        .arg("--out")
        .arg(out)
        .arg("--quiet")
        .status()
        .ok()?
        .code()
}

fn without_wall_clock(text: &str) -> String {
    text.lines()
        .filter(|l| !l.trim_start().starts_with("\"wall_clock_ms\""))
        .collect::<Vec<_>>()
        .join("\n")
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().expect("tempdir");
    let mut compared = Vec::new();
    let mut ok = true;
    for name in ["honest", "attacks", "expect_fail"] {
        let scenario = scenarios_dir().join(format!("{name}.toml"));
        let a = tmp.path().join(format!("{name}-a"));
        let b = tmp.path().join(format!("{name}-b"));
        let (ca, cb) = (run_cli(&scenario, &a), run_cli(&scenario, &b));
        let read = |dir: &Path, f: &str| std::fs::read_to_string(dir.join(f)).unwrap_or_default();
        let same_report = without_wall_clock(&read(&a, "report.json")) == without_wall_clock(&read(&b, "report.json"));
        let same_ledger = read(&a, "ledger.jsonl") == read(&b, "ledger.jsonl");
        let same_capture = read(&a, "capture.jsonl") == read(&b, "capture.jsonl");
        let nonempty = !read(&a, "report.json").is_empty() && !read(&a, "ledger.jsonl").is_empty();
        ok &= ca == cb && ca.is_some() && same_report && same_ledger && same_capture && nonempty;
        compared.push(format!(
            "{name}: exit {ca:?}/{cb:?} report {same_report} ledger {same_ledger}"
        ));
    }
    verdict(ok, compared.join("; "))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("honest completeness", honest_completeness),
        ("hash-chain enforcement", hash_chain),
        ("replay defense", replay),
        ("mitm defense", mitm),
        ("privacy / unlinkability", privacy),
        ("optimizer correctness", optimizer),
        ("metering / dispute", metering),
        ("ledger integrity", ledger_integrity),
        ("refuse-to-pay", refuse_to_pay),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let v = f();
        if !v.pass {
            failed += 1;
        }
        println!(
            "{} {:>2} {name}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            i + 1,
            v.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
