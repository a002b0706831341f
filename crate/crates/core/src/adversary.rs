//! Attack harness. Every attack runs against the real actors, channel fabric
//! and ledger of a [`World`]; the adversary holds only public data (pids seen
//! on the air, public keys, credentials, the ledger) and its own randomness.
//!
//! Capability boundary: full control of the wireless channel, no access to
//! the CAN bus of a session it is not plugged into, and no private keys.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::rc::Rc;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cell::RefCell;

use rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::actors::{AuthError, ChainFaults, EvState, EvcsState, DEFAULT_DELTA_FRESH_MS};
use crate::channels::{
    decode_message, encode_message, Envelope, Interceptor, M2Payload, M3Payload, M4Payload, Message, MessageM1,
};
use crate::contract::UserUtility;
use crate::crypto::{hash, hash_timestamp, pk_encrypt, random_challenge, PublicKey, SimRng};
use crate::ledger::{DisputeCause, Resolution};
use crate::sim::{derive_seed, SessionBehavior, SessionReport, World, WorldConfig, TICK_MS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttackKind {
    MitmRelay,
    ReplayM1,
    LedgerCorrelation,
    EvcsTamperParams,
    EvcsCredentialExtract,
    EvRefusePay,
    EvFalseMeter,
    CrossSessionRelay,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::MitmRelay => "MitmRelay",
            AttackKind::ReplayM1 => "ReplayM1",
            AttackKind::LedgerCorrelation => "LedgerCorrelation",
            AttackKind::EvcsTamperParams => "EvcsTamperParams",
            AttackKind::EvcsCredentialExtract => "EvcsCredentialExtract",
            AttackKind::EvRefusePay => "EvRefusePay",
            AttackKind::EvFalseMeter => "EvFalseMeter",
            AttackKind::CrossSessionRelay => "CrossSessionRelay",
        }
    }
}

/// Per-kind knobs; anything left out takes the kind's default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackParams {
    /// Forgery attempts (MitmRelay).
    pub attempts: Option<u64>,
    /// Independent trials (ReplayM1, CrossSessionRelay, tamper kinds).
    pub trials: Option<u64>,
    /// Users in the analysed population (LedgerCorrelation).
    pub users: Option<usize>,
    pub sessions_per_user: Option<u64>,
    /// Seeds averaged over (LedgerCorrelation).
    pub seeds: Option<u64>,
    /// Disables single-use pseudonyms (LedgerCorrelation ablation).
    pub reuse_pids: Option<bool>,
    /// Meter bias in kWh (EvcsTamperParams inflates, EvFalseMeter under-reports).
    pub meter_offset_kwh: Option<f64>,
    /// Substituted charging price (EvcsTamperParams); takes precedence over the meter bias.
    pub price_override: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackScenario {
    pub kind: AttackKind,
    pub seed: u64,
    #[serde(default)]
    pub params: AttackParams,
    /// Overrides the kind's default expected outcome.
    #[serde(default)]
    pub expected: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub scenario_kind: String,
    pub seed: u64,
    pub expected: String,
    pub observed: String,
    pub pass: bool,
    pub metrics: BTreeMap<String, f64>,
}

pub const REJECTED: &str = "rejected";
pub const BREACHED: &str = "breached";
pub const UNLINKABLE: &str = "unlinkable";
pub const LINKABLE: &str = "linkable";
pub const NO_PRIVATE_KEYS: &str = "no_private_keys";
pub const KEYS_LEAKED: &str = "keys_leaked";

fn adversary_rng(seed: u64, label: &str) -> SimRng {
    SimRng::from_seed(derive_seed(seed, label))
}

/// A world whose credentials stay valid for `span_ms` of simulated time.
fn small_world(seed: u64, users: usize, stations: usize, span_ms: u64) -> World {
    World::new(WorldConfig {
        seed,
        users,
        stations,
        slots: 4,
        credential_ttl_ms: crate::pki::DEFAULT_CREDENTIAL_TTL_MS.saturating_add(span_ms),
        ..WorldConfig::default()
    })
    .expect("built-in attack config is valid")
}

/// Number of 32-byte windows in `haystacks` equal to any of `secrets`.
pub fn count_secret_hits(haystacks: &[&[u8]], secrets: &[[u8; 32]]) -> usize {
    let set: BTreeSet<[u8; 32]> = secrets.iter().copied().collect();
    let mut hits = 0;
    for h in haystacks {
        for w in h.windows(32) {
            let mut k = [0u8; 32];
            k.copy_from_slice(w);
            if set.contains(&k) {
                hits += 1;
            }
        }
    }
    hits
}

/// What a wireless adversary accumulates: every application body it saw.
#[derive(Debug, Default)]
pub struct TapLog {
    pub bodies: Vec<Vec<u8>>,
    pub kinds: Vec<&'static str>,
    /// `(pid, t1)` of every M1 seen, in order.
    pub m1s: Vec<MessageM1>,
}

impl TapLog {
    fn note(&mut self, env: &Envelope) {
        self.bodies.push(env.body.clone());
        let msg = decode_message(&env.body).ok();
        self.kinds.push(msg.as_ref().map_or("Undecodable", Message::name));
        if let Some(Message::M1(m1)) = msg {
            self.m1s.push(m1);
        }
    }
}

pub type SharedTap = Rc<RefCell<TapLog>>;

/// Forwards everything untouched and records it.
pub struct PassiveTap {
    pub log: SharedTap,
}

impl Interceptor for PassiveTap {
    fn intercept(&mut self, envelope: Envelope, _tick: u64) -> Vec<Envelope> {
        self.log.borrow_mut().note(&envelope);
        alloc::vec![envelope]
    }
}

/// Flips one byte of every M2 ciphertext in flight.
pub struct M2Flipper {
    pub log: SharedTap,
    pub byte: usize,
}

impl Interceptor for M2Flipper {
    fn intercept(&mut self, mut envelope: Envelope, _tick: u64) -> Vec<Envelope> {
        self.log.borrow_mut().note(&envelope);
        if let Ok(Message::M2 { mut ciphertext }) = decode_message(&envelope.body) {
            let i = self.byte % ciphertext.len();
            ciphertext[i] ^= 0x01;
            envelope.body = encode_message(&Message::M2 { ciphertext });
        }
        alloc::vec![envelope]
    }
}

/// Replaces each M2 with one it built itself: its own C_cyber, the genuine
/// station id and a correct T2, encrypted to the pid's public key.
pub struct M2Forger {
    pub log: SharedTap,
    pub directory: BTreeMap<String, PublicKey>,
    pub evcs_id: String,
    pub rng: SimRng,
}

impl Interceptor for M2Forger {
    fn intercept(&mut self, mut envelope: Envelope, _tick: u64) -> Vec<Envelope> {
        self.log.borrow_mut().note(&envelope);
        if let Ok(Message::M2 { .. }) = decode_message(&envelope.body) {
            let last = self.log.borrow().m1s.last().cloned();
            if let Some(m1) = last {
                if let Some(pk) = self.directory.get(&m1.pid) {
                    let payload = M2Payload {
                        c_cyber: random_challenge(&mut self.rng),
                        evcs_id: self.evcs_id.clone(),
                        t2: hash_timestamp(m1.t1_ms),
                    };
                    if let Ok(ciphertext) = pk_encrypt(&mut self.rng, pk, &payload.encode()) {
                        envelope.body = encode_message(&Message::M2 { ciphertext });
                    }
                }
            }
        }
        alloc::vec![envelope]
    }
}

/// Public-key directory an outsider can assemble: every pid with its public key.
pub fn public_directory(world: &World) -> BTreeMap<String, PublicKey> {
    let mut out = BTreeMap::new();
    for i in 0..world.users() {
        for p in world.ev(i).pseudonyms() {
            out.insert(p.pid.clone(), p.keypair.public_key);
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForgeryStats {
    pub attempts: u64,
    /// Attempts where the honest party accepted a forged challenge response.
    pub accepted: u64,
    pub rejections: BTreeMap<String, u64>,
}

/// Monte Carlo of challenge forgery without private keys. Even attempts
/// impersonate the EV toward a station (a victim pid lifted from the air, a
/// guessed C_cyber in M3); odd attempts impersonate the station toward the EV
/// (a forged M2, then a guessed C_physical in M4).
pub fn forgery_trials(seed: u64, attempts: u64) -> ForgeryStats {
    let mut world = small_world(
        seed,
        2,
        1,
        attempts.saturating_mul(2 * DEFAULT_DELTA_FRESH_MS + TICK_MS),
    );
    let mut adv = adversary_rng(seed, "forger");
    let delta = world.config().delta_fresh_ms;
    let station_ep = world.station(0).endpoint.clone();
    let station_pk = world.station(0).record().keypair.public_key;
    let evcs_id = world.station(0).evcs_id().to_string();
    // A pid captured from an M1 the adversary dropped, so it was never consumed.
    let stolen_pid = world.ev(1).next_pseudonym().expect("pool").pid;
    let mut stats = ForgeryStats::default();
    let reject = |stats: &mut ForgeryStats, e: AuthError| {
        *stats.rejections.entry(e.code().to_string()).or_insert(0) += 1;
    };
    for i in 0..attempts {
        stats.attempts += 1;
        let now = world.clock_ms();
        let p = world.parts();
        if i % 2 == 0 {
            let st = &mut p.stations[0];
            let m1 = MessageM1 {
                pid: stolen_pid.clone(),
                t1_ms: now,
            };
            if let Err(e) = st.handle_m1(&m1, now, p.pki, p.rng) {
                reject(&mut stats, e);
            } else {
                let forged = M3Payload {
                    c_cyber: random_challenge(&mut adv),
                    c_physical: random_challenge(&mut adv),
                    t3: hash(&hash_timestamp(now).0),
                };
                let ct = pk_encrypt(&mut adv, &station_pk, &forged.encode()).expect("fits");
                match st.handle_m3(&ct, p.rng) {
                    Ok(_) => stats.accepted += 1,
                    Err(e) => reject(&mut stats, e),
                }
            }
            st.reset();
        } else {
            let ev = &mut p.evs[0];
            ev.reset();
            ev.plug(&station_ep);
            let pid = ev.next_pseudonym().expect("pool");
            let victim_pk = pid.keypair.public_key;
            let m1 = ev.start_auth(&pid, now).expect("plugged, unconsumed");
            let m2 = M2Payload {
                c_cyber: random_challenge(&mut adv),
                evcs_id: evcs_id.clone(),
                t2: hash_timestamp(m1.t1_ms),
            };
            let ct = pk_encrypt(&mut adv, &victim_pk, &m2.encode()).expect("fits");
            match ev.handle_m2(&ct, p.pki, p.rng) {
                Err(e) => reject(&mut stats, e),
                Ok(_m3_on_can_bus) => {
                    let m4 = M4Payload {
                        c_physical: random_challenge(&mut adv),
                        t4: hash(&hash(&hash_timestamp(m1.t1_ms).0).0),
                    };
                    let ct = pk_encrypt(&mut adv, &victim_pk, &m4.encode()).expect("fits");
                    match ev.handle_m4(&ct) {
                        Ok(()) => stats.accepted += 1,
                        Err(e) => reject(&mut stats, e),
                    }
                }
            }
            ev.reset();
        }
        // Step past the replay window so the same pid is judged on its challenge.
        world.advance(2 * delta + TICK_MS);
    }
    stats
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MitmReport {
    pub passive_sessions: u64,
    pub passive_authenticated: u64,
    /// Secret 32-byte values (challenges, session keys, private keys) found in
    /// anything the tap or the capture log saw.
    pub passive_secret_hits: u64,
    /// Whether every tapped M1 exposed only pid, tag and t1.
    pub m1_plaintext_only: bool,
    pub modified_m2_errors: BTreeMap<String, u64>,
    pub modified_m2_authenticated: u64,
    pub forged_m2_authenticated: u64,
    pub forged_m2_sessions: u64,
    pub forgery: ForgeryStats,
}

impl MitmReport {
    pub fn defended(&self) -> bool {
        self.passive_secret_hits == 0
            && self.m1_plaintext_only
            && self.passive_authenticated == self.passive_sessions
            && self.modified_m2_authenticated == 0
            && self.forged_m2_authenticated == 0
            && self.forgery.accepted == 0
    }
}

/// Passive tap, in-flight M2 modification, in-flight M2 forgery, and the
/// forgery Monte Carlo.
pub fn run_mitm_suite(seed: u64, sessions: u64, forgery_attempts: u64) -> MitmReport {
    let mut report = MitmReport {
        m1_plaintext_only: true,
        ..MitmReport::default()
    };

    // Passive tap.
    let mut world = World::new(WorldConfig {
        seed,
        users: 2,
        stations: 1,
        slots: sessions.max(1),
        capture: true,
        ..WorldConfig::default()
    })
    .expect("valid");
    let tap: SharedTap = Rc::default();
    world
        .network_mut()
        .install_interceptor(alloc::boxed::Box::new(PassiveTap { log: tap.clone() }));
    let start = world.clock_ms() + 60 * TICK_MS;
    for k in 0..sessions {
        world.set_clock(start + k * 10 * 60 * TICK_MS);
        let r = world.run_session((k % 2) as usize, 0, k, &SessionBehavior::default());
        report.passive_sessions += 1;
        report.passive_authenticated += u64::from(r.authenticated && r.keys_match);
    }
    let secrets = world.secrets_for_audit();
    let captured: Vec<Vec<u8>> = world
        .capture_log()
        .iter()
        .filter_map(|c| hex::decode(&c.bytes_hex).ok())
        .collect();
    {
        let log = tap.borrow();
        let mut hay: Vec<&[u8]> = log.bodies.iter().map(Vec::as_slice).collect();
        hay.extend(captured.iter().map(Vec::as_slice));
        report.passive_secret_hits = count_secret_hits(&hay, &secrets) as u64;
        for (body, kind) in log.bodies.iter().zip(&log.kinds) {
            if *kind == "M1" {
                // kind ‖ len16 ‖ pid ‖ "RQAE" ‖ t1: nothing beyond these fields.
                let expected = match decode_message(body) {
                    Ok(m @ Message::M1(_)) => encode_message(&m),
                    _ => Vec::new(),
                };
                report.m1_plaintext_only &= expected == *body;
            }
        }
    }

    // Active modification of M2.
    let mut world = small_world(seed ^ 0x4d32, 2, 1, 8 * 10 * 60 * TICK_MS);
    let log: SharedTap = Rc::default();
    world
        .network_mut()
        .install_interceptor(alloc::boxed::Box::new(M2Flipper {
            log,
            byte: seed as usize,
        }));
    for k in 0..sessions.clamp(1, 8) {
        world.advance(10 * 60 * TICK_MS);
        let run = world.authenticate((k % 2) as usize, 0);
        match &run.result {
            Ok(_) => report.modified_m2_authenticated += 1,
            Err(e) => *report.modified_m2_errors.entry(e.code()).or_insert(0) += 1,
        }
    }

    // In-flight M2 forgery.
    let mut world = small_world(seed ^ 0x4632, 2, 1, 8 * 10 * 60 * TICK_MS);
    let forger = M2Forger {
        log: Rc::default(),
        directory: public_directory(&world),
        evcs_id: world.station(0).evcs_id().to_string(),
        rng: adversary_rng(seed, "m2-forger"),
    };
    world.network_mut().install_interceptor(alloc::boxed::Box::new(forger));
    for k in 0..sessions.clamp(1, 8) {
        world.advance(10 * 60 * TICK_MS);
        let run = world.authenticate((k % 2) as usize, 0);
        report.forged_m2_sessions += 1;
        report.forged_m2_authenticated += u64::from(run.authenticated());
    }

    report.forgery = forgery_trials(seed, forgery_attempts);
    report
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayStats {
    pub trials: u64,
    /// M1 replayed at t1 + 2Δ rejected with StaleTimestamp.
    pub stale_rejected: u64,
    /// M1 replayed at t1 + 1 s rejected with ReusedPid.
    pub in_window_rejected: u64,
    /// Whole transcript replayed after the pid was consumed, re-stamped to a
    /// fresh t1 and past the replay window: rejected at step 2.
    pub consumed_rejected: u64,
    pub accepted: u64,
    /// Trials whose honest baseline session did not complete.
    pub setup_failures: u64,
}

impl ReplayStats {
    pub fn all_rejected(&self) -> bool {
        self.accepted == 0
            && self.setup_failures == 0
            && self.stale_rejected == self.trials
            && self.in_window_rejected == self.trials
            && self.consumed_rejected == self.trials
    }
}

pub fn replay_trials(seed: u64, trials: u64) -> ReplayStats {
    let mut world = small_world(seed, 3, 2, trials.saturating_mul(6 * DEFAULT_DELTA_FRESH_MS));
    let delta = world.config().delta_fresh_ms;
    let mut stats = ReplayStats::default();
    for k in 0..trials {
        stats.trials += 1;
        world.advance(3 * delta);
        let u = (k % 3) as usize;
        let s = (k % 2) as usize;
        let run = world.authenticate(u, s);
        let Ok(_) = run.result else {
            // An honest session must succeed for the trial to mean anything.
            stats.setup_failures += 1;
            continue;
        };
        let Some(Message::M1(m1)) = run.transcript.first().cloned() else {
            stats.setup_failures += 1;
            continue;
        };
        let m3 = run.transcript.get(2).cloned();
        let t1 = m1.t1_ms;
        let p = world.parts();
        let st = &mut p.stations[s];

        match st.handle_m1(&m1, t1 + 1_000, p.pki, p.rng) {
            Err(AuthError::ReusedPid) => stats.in_window_rejected += 1,
            Err(_) => {}
            Ok(_) => stats.accepted += 1,
        }
        match st.handle_m1(&m1, t1 + 2 * delta, p.pki, p.rng) {
            Err(AuthError::StaleTimestamp) => stats.stale_rejected += 1,
            Err(_) => {}
            Ok(_) => stats.accepted += 1,
        }
        let later = t1 + 2 * delta + 2 * TICK_MS;
        let restamped = MessageM1 {
            pid: m1.pid.clone(),
            t1_ms: later,
        };
        let step2 = st.handle_m1(&restamped, later, p.pki, p.rng);
        let rest_rejected = match &m3 {
            Some(Message::M3 { ciphertext }) => st.handle_m3(ciphertext, p.rng).is_err(),
            _ => true,
        };
        match step2 {
            Err(AuthError::ReusedPid) if rest_rejected && st.state() != EvcsState::Authenticated => {
                stats.consumed_rejected += 1
            }
            Err(_) => {}
            Ok(_) => stats.accepted += 1,
        }
        st.reset();
        world.set_clock(later);
    }
    stats
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayStats {
    pub trials: u64,
    /// Old M3 fed to the station inside a new session: ChallengeMismatch.
    pub m3_challenge_mismatch: u64,
    /// Old M4 fed to the EV inside a new session: DecryptFailed or ChallengeMismatch.
    pub m4_rejected: u64,
    /// Stolen M1 of another vehicle replayed by an attacker's car.
    pub stolen_m1_rejected: u64,
    pub accepted: u64,
    /// Trials whose honest baseline session did not complete.
    pub setup_failures: u64,
}

impl RelayStats {
    pub fn all_rejected(&self) -> bool {
        self.accepted == 0
            && self.setup_failures == 0
            && self.m3_challenge_mismatch == self.trials
            && self.m4_rejected == self.trials
            && self.stolen_m1_rejected == self.trials
    }
}

/// Cross-session relay of M3/M4, and replay of another vehicle's M1.
pub fn relay_trials(seed: u64, trials: u64) -> RelayStats {
    let mut world = small_world(seed, 2, 1, trials.saturating_mul(6 * DEFAULT_DELTA_FRESH_MS));
    let mut adv = adversary_rng(seed, "relay");
    let delta = world.config().delta_fresh_ms;
    let mut stats = RelayStats::default();
    for _ in 0..trials {
        stats.trials += 1;
        world.advance(3 * delta);
        let first = world.authenticate(0, 0);
        world.advance(3 * delta);
        let (Some(old_m3), Some(old_m4)) = (first.transcript.get(2).cloned(), first.transcript.get(3).cloned()) else {
            stats.setup_failures += 1;
            continue;
        };
        let now = world.clock_ms();
        let station_ep = world.station(0).endpoint.clone();
        world.ensure_pseudonym(0).expect("pki issues more");
        let p = world.parts();

        // New session A: real M1/M2, then the old M3 instead of a fresh one.
        let ev = &mut p.evs[0];
        ev.reset();
        ev.plug(&station_ep);
        let pid = ev.next_pseudonym().expect("pool");
        let m1 = ev.start_auth(&pid, now).expect("fresh pid");
        let st = &mut p.stations[0];
        st.reset();
        let m2 = st.handle_m1(&m1, now, p.pki, p.rng);
        if let (Ok(Message::M2 { ciphertext }), Message::M3 { ciphertext: old }) = (m2, &old_m3) {
            let _fresh_m3 = ev.handle_m2(&ciphertext, p.pki, p.rng);
            match st.handle_m3(old, p.rng) {
                Err(AuthError::ChallengeMismatch) => stats.m3_challenge_mismatch += 1,
                Err(_) => {}
                Ok(_) => stats.accepted += 1,
            }
            // The EV is now waiting for M4; hand it the old one.
            if let Message::M4 { ciphertext: old4 } = &old_m4 {
                match ev.handle_m4(old4) {
                    Err(AuthError::DecryptFailed) | Err(AuthError::ChallengeMismatch) => stats.m4_rejected += 1,
                    Err(_) => {}
                    Ok(()) => stats.accepted += 1,
                }
            }
        }
        ev.reset();
        st.reset();

        // Attacker's car (EV 1) replays EV 0's consumed M1 with a fresh stamp.
        let later = now + 3 * delta;
        let Some(Message::M1(stolen)) = first.transcript.first().cloned() else {
            stats.setup_failures += 1;
            continue;
        };
        let replay = MessageM1 {
            pid: stolen.pid,
            t1_ms: later,
        };
        let st = &mut p.stations[0];
        let station_pk = st.record().keypair.public_key;
        match st.handle_m1(&replay, later, p.pki, p.rng) {
            Err(_) => stats.stolen_m1_rejected += 1,
            Ok(_) => {
                let forged = M3Payload {
                    c_cyber: random_challenge(&mut adv),
                    c_physical: random_challenge(&mut adv),
                    t3: hash(&hash_timestamp(later).0),
                };
                let ct = pk_encrypt(&mut adv, &station_pk, &forged.encode()).expect("fits");
                match st.handle_m3(&ct, p.rng) {
                    Err(_) => stats.stolen_m1_rejected += 1,
                    Ok(_) => stats.accepted += 1,
                }
            }
        }
        st.reset();
        world.set_clock(later);
    }
    stats
}

/// Where a perturbed run stopped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbortPoint {
    /// Protocol step (3 or 4) at which a check failed; 0 if the run completed.
    pub step: u8,
    pub actor: String,
    pub code: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChainLink {
    T1,
    T2,
    T3,
    T4,
}

impl ChainLink {
    pub const ALL: [ChainLink; 4] = [ChainLink::T1, ChainLink::T2, ChainLink::T3, ChainLink::T4];

    /// Step and checking side that must catch a perturbation of this link.
    pub fn expected_abort(self) -> (u8, &'static str) {
        match self {
            ChainLink::T1 | ChainLink::T2 => (3, "ev"),
            ChainLink::T3 => (4, "evcs"),
            ChainLink::T4 => (4, "ev"),
        }
    }

    fn faults(self, skew_ms: i64) -> (ChainFaults, ChainFaults) {
        let mut ev = ChainFaults::default();
        let mut st = ChainFaults::default();
        match self {
            ChainLink::T1 => ev.t1_ms = skew_ms,
            ChainLink::T2 => st.t2_ms = skew_ms,
            ChainLink::T3 => ev.t3_ms = skew_ms,
            ChainLink::T4 => st.t4_ms = skew_ms,
        }
        (ev, st)
    }
}

/// Runs one authentication with `link` perturbed by `skew_ms` and reports
/// where it aborted.
pub fn perturbed_run(world: &mut World, u: usize, s: usize, link: ChainLink, skew_ms: i64) -> AbortPoint {
    let (ev_f, st_f) = link.faults(skew_ms);
    world.ev_mut(u).faults = ev_f;
    world.station_mut(s).faults = st_f;
    let run = world.authenticate(u, s);
    world.ev_mut(u).faults = ChainFaults::default();
    world.station_mut(s).faults = ChainFaults::default();
    let ev_state = world.ev(u).state();
    let st_state = world.station(s).state();
    match run.result {
        Ok(_) => AbortPoint {
            step: 0,
            actor: String::new(),
            code: "Authenticated".into(),
        },
        Err(e) => {
            let (step, actor) = match (ev_state, st_state) {
                (EvState::Failed, EvcsState::SentM2) => (3, "ev"),
                (_, EvcsState::Failed) => (4, "evcs"),
                (EvState::Failed, EvcsState::SentM4) => (4, "ev"),
                _ => (0, "unknown"),
            };
            AbortPoint {
                step,
                actor: actor.into(),
                code: e.code(),
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainStats {
    pub trials: u64,
    pub false_acceptances: u64,
    /// Aborts at the expected step and side with HashChainMismatch.
    pub aborted_as_specified: u64,
    pub per_link: BTreeMap<String, u64>,
}

pub fn hash_chain_trials(seed: u64, trials_per_link: u64, skew_ms: i64) -> ChainStats {
    let mut world = small_world(
        seed,
        2,
        2,
        trials_per_link.saturating_mul(4 * (2 * DEFAULT_DELTA_FRESH_MS + TICK_MS)),
    );
    let delta = world.config().delta_fresh_ms;
    let mut stats = ChainStats::default();
    for k in 0..trials_per_link {
        for link in ChainLink::ALL {
            world.advance(2 * delta + TICK_MS);
            let u = (k % 2) as usize;
            let s = ((k / 2) % 2) as usize;
            let at = perturbed_run(&mut world, u, s, link, skew_ms);
            stats.trials += 1;
            if at.step == 0 && at.code == "Authenticated" {
                stats.false_acceptances += 1;
            }
            let (step, actor) = link.expected_abort();
            if at.step == step && at.actor == actor && at.code == "HashChainMismatch" {
                stats.aborted_as_specified += 1;
                *stats.per_link.entry(format!("{link:?}")).or_insert(0) += 1;
            }
        }
    }
    stats
}

/// Ledger-only linkage analyst. It is told the owner of one session per user
/// (the first slot) and assigns every other TransactionRecord greedily: pid
/// equality first, otherwise the user whose latest record is nearest in
/// energy, amount and station, at most one record per user per slot.
pub fn correlation_accuracy(world: &World, reports: &[SessionReport]) -> Option<f64> {
    let truth: BTreeMap<&str, usize> = reports.iter().map(|r| (r.pid.as_str(), r.user)).collect();
    let mut txs = world.ledger().transactions();
    txs.sort_by_key(|t| (t.slot, t.finalized_at_ms));
    let users = world.users();
    let first_slot = txs.first()?.slot;

    #[derive(Clone)]
    struct Last {
        energy: f64,
        amount: f64,
        evcs: String,
        slot: u64,
    }
    let mut last: Vec<Option<Last>> = alloc::vec![None; users];
    let mut pid_owner: BTreeMap<String, usize> = BTreeMap::new();
    let mut used_in_slot: BTreeSet<(u64, usize)> = BTreeSet::new();
    let (mut correct, mut total) = (0u64, 0u64);

    for tx in &txs {
        let owner = *truth.get(tx.pid.as_str())?;
        let entry = Last {
            energy: tx.energy_kwh,
            amount: tx.amount,
            evcs: tx.evcs_id.clone(),
            slot: tx.slot,
        };
        if tx.slot == first_slot && last[owner].is_none() {
            pid_owner.insert(tx.pid.clone(), owner);
            used_in_slot.insert((tx.slot, owner));
            last[owner] = Some(entry);
            continue;
        }
        let guess = if let Some(&u) = pid_owner.get(&tx.pid) {
            u
        } else {
            let mut best = (f64::INFINITY, 0usize);
            for (u, l) in last.iter().enumerate() {
                let taken = used_in_slot.contains(&(tx.slot, u));
                let d = match l {
                    Some(l) => {
                        (tx.energy_kwh - l.energy).abs() / 10.0
                            + (tx.amount - l.amount).abs()
                            + if l.evcs == tx.evcs_id { 0.0 } else { 0.5 }
                            + (tx.slot.saturating_sub(l.slot)) as f64 * 0.01
                    }
                    None => 1e6,
                } + if taken { 1e3 } else { 0.0 };
                if d < best.0 {
                    best = (d, u);
                }
            }
            best.1
        };
        pid_owner.insert(tx.pid.clone(), guess);
        used_in_slot.insert((tx.slot, guess));
        last[guess] = Some(entry);
        total += 1;
        correct += u64::from(guess == owner);
    }
    if total == 0 {
        return Some(1.0);
    }
    Some(correct as f64 / total as f64)
}

/// Runs an honest population and measures analyst accuracy on its ledger.
pub fn correlation_run(seed: u64, users: usize, sessions_per_user: u64, single_use: bool) -> f64 {
    let mut world = World::new(WorldConfig {
        seed,
        users,
        stations: 2,
        slots: sessions_per_user,
        single_use_pids: single_use,
        ..WorldConfig::default()
    })
    .expect("valid");
    let reports = world.run_all();
    correlation_accuracy(&world, &reports).unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationStats {
    pub users: usize,
    pub sessions_per_user: u64,
    pub seeds: u64,
    pub mean_accuracy: f64,
    pub chance: f64,
}

pub fn correlation_study(
    seed: u64,
    seeds: u64,
    users: usize,
    sessions_per_user: u64,
    single_use: bool,
) -> CorrelationStats {
    let total: f64 = (0..seeds)
        .map(|k| correlation_run(seed.wrapping_add(k), users, sessions_per_user, single_use))
        .sum();
    CorrelationStats {
        users,
        sessions_per_user,
        seeds,
        mean_accuracy: total / seeds.max(1) as f64,
        chance: 1.0 / users as f64,
    }
}

/// A utility whose unconstrained optimum is a 20 kWh charge.
pub const CHARGING_UTILITY: UserUtility = UserUtility {
    alpha: 0.5,
    beta: 0.01,
    gamma: 0.1,
    delta: 0.01,
};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MisbehaviorStats {
    pub trials: u64,
    /// Trials with exactly one DisputeRecord of the expected cause, bound to
    /// the session pid, and no TransactionRecord for that pid.
    pub disputed_as_expected: u64,
    pub finalized: u64,
    /// Trials where a MeterMismatch settled on the smaller reading.
    pub settled_at_minimum: u64,
}

/// Runs sessions with `behavior` and checks the ledger for each one.
pub fn misbehavior_trials(seed: u64, trials: u64, behavior: SessionBehavior, cause: DisputeCause) -> MisbehaviorStats {
    let mut world = small_world(seed, 2, 1, trials.saturating_mul(10 * 60 * TICK_MS));
    let mut stats = MisbehaviorStats::default();
    for k in 0..trials {
        stats.trials += 1;
        world.advance(10 * 60 * TICK_MS);
        let u = (k % 2) as usize;
        let b = SessionBehavior {
            user_utility: behavior.user_utility.or(Some(CHARGING_UTILITY)),
            ..behavior
        };
        // Half-full battery so every trial has room to trade.
        let bat = world.battery_mut(u);
        bat.soc_kwh = bat.capacity_kwh / 2.0;
        let report = world.run_session(u, 0, k, &b);
        let disputes: Vec<_> = world
            .ledger()
            .disputes()
            .into_iter()
            .filter(|d| d.pid == report.pid)
            .collect();
        let txs = world
            .ledger()
            .transactions()
            .into_iter()
            .filter(|t| t.pid == report.pid)
            .count();
        if txs > 0 {
            stats.finalized += 1;
        }
        if report.authenticated && disputes.len() == 1 && disputes[0].cause == cause && txs == 0 {
            stats.disputed_as_expected += 1;
            let d = &disputes[0];
            if d.cause == DisputeCause::MeterMismatch && d.resolution == Resolution::SettledMinimum {
                let x = report.outcome.as_ref().map_or(0.0, |o| o.x_star_kwh);
                let ev = crate::sim::meter_value(x, 1, 1, b.ev_meter_offset_kwh);
                let st = crate::sim::meter_value(x, 1, 1, b.evcs_meter_offset_kwh);
                let minimum = if ev.abs() <= st.abs() { ev } else { st };
                if (d.settled_energy_kwh - minimum).abs() < 1e-9 {
                    stats.settled_at_minimum += 1;
                }
            }
        }
    }
    stats
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionStats {
    pub sessions: u64,
    /// Distinct frame kinds the station received.
    pub frame_kinds: Vec<String>,
    pub secret_hits: u64,
}

/// A station that keeps every byte it receives and everything on the ledger,
/// then scans it for any private key, challenge or session key of others.
pub fn credential_extraction(seed: u64, sessions: u64) -> ExtractionStats {
    let mut world = World::new(WorldConfig {
        seed,
        users: 2,
        stations: 1,
        slots: sessions.max(1),
        capture: true,
        ..WorldConfig::default()
    })
    .expect("valid");
    let mut stats = ExtractionStats::default();
    for k in 0..sessions {
        world.advance(10 * 60 * TICK_MS);
        world.run_session((k % 2) as usize, 0, k, &SessionBehavior::default());
        stats.sessions += 1;
    }
    let station_ep = world.station(0).endpoint.clone();
    let station_key = world.station(0).private_key_for_audit();
    let received: Vec<Vec<u8>> = world
        .capture_log()
        .iter()
        .filter(|c| c.receiver == station_ep.0 && c.event == "delivered")
        .filter_map(|c| hex::decode(&c.bytes_hex).ok())
        .collect();
    let mut kinds: BTreeSet<String> = BTreeSet::new();
    for b in &received {
        if let Ok(m) = decode_message(b) {
            kinds.insert(m.name().into());
        }
    }
    stats.frame_kinds = kinds.into_iter().collect();
    let ledger_bytes: Vec<Vec<u8>> = world.ledger().blocks().iter().map(|b| b.encode()).collect();
    // The station's own key is not a leak; challenges and session keys of the
    // sessions it took part in are legitimately known to it, so only
    // long-term keys of others count.
    let mut others: Vec<[u8; 32]> = Vec::new();
    for i in 0..world.users() {
        others.extend(world.ev(i).private_keys_for_audit());
    }
    others.extend(world.pki().private_keys_for_audit());
    others.push(world.pki().signing_seed_for_audit());
    others.retain(|k| *k != station_key);
    let mut hay: Vec<&[u8]> = received.iter().map(Vec::as_slice).collect();
    hay.extend(ledger_bytes.iter().map(Vec::as_slice));
    stats.secret_hits = count_secret_hits(&hay, &others) as u64;
    stats
}

fn default_expected(s: &AttackScenario) -> String {
    match s.kind {
        AttackKind::MitmRelay | AttackKind::ReplayM1 | AttackKind::CrossSessionRelay => REJECTED.into(),
        AttackKind::LedgerCorrelation => {
            if s.params.reuse_pids.unwrap_or(false) {
                LINKABLE.into()
            } else {
                UNLINKABLE.into()
            }
        }
        AttackKind::EvcsTamperParams => {
            if s.params.price_override.is_some() {
                "dispute:BillRejected".into()
            } else {
                "dispute:MeterMismatch".into()
            }
        }
        AttackKind::EvcsCredentialExtract => NO_PRIVATE_KEYS.into(),
        AttackKind::EvRefusePay => "dispute:PaymentDefault".into(),
        AttackKind::EvFalseMeter => "dispute:MeterMismatch".into(),
    }
}

fn dispute_observed(stats: &MisbehaviorStats, cause: DisputeCause) -> String {
    if stats.disputed_as_expected == stats.trials && stats.finalized == 0 {
        format!("dispute:{cause:?}")
    } else if stats.finalized > 0 {
        "finalized".into()
    } else {
        "unexpected".into()
    }
}

/// Runs one scenario and compares its observation with the expectation.
pub fn run_scenario(s: &AttackScenario) -> AttackOutcome {
    let expected = s.expected.clone().unwrap_or_else(|| default_expected(s));
    let mut metrics = BTreeMap::new();
    let p = &s.params;
    let observed: String = match s.kind {
        AttackKind::MitmRelay => {
            let r = run_mitm_suite(s.seed, p.trials.unwrap_or(4), p.attempts.unwrap_or(1_000));
            metrics.insert("forgery_attempts".into(), r.forgery.attempts as f64);
            metrics.insert("forgery_accepted".into(), r.forgery.accepted as f64);
            metrics.insert("passive_secret_hits".into(), r.passive_secret_hits as f64);
            metrics.insert("modified_m2_authenticated".into(), r.modified_m2_authenticated as f64);
            metrics.insert("forged_m2_authenticated".into(), r.forged_m2_authenticated as f64);
            if r.defended() { REJECTED } else { BREACHED }.into()
        }
        AttackKind::ReplayM1 => {
            let r = replay_trials(s.seed, p.trials.unwrap_or(20));
            metrics.insert("trials".into(), r.trials as f64);
            metrics.insert("accepted".into(), r.accepted as f64);
            if r.all_rejected() { REJECTED } else { BREACHED }.into()
        }
        AttackKind::CrossSessionRelay => {
            let r = relay_trials(s.seed, p.trials.unwrap_or(20));
            metrics.insert("trials".into(), r.trials as f64);
            metrics.insert("accepted".into(), r.accepted as f64);
            if r.all_rejected() { REJECTED } else { BREACHED }.into()
        }
        AttackKind::LedgerCorrelation => {
            let users = p.users.unwrap_or(5);
            let single_use = !p.reuse_pids.unwrap_or(false);
            let r = correlation_study(
                s.seed,
                p.seeds.unwrap_or(10),
                users,
                p.sessions_per_user.unwrap_or(10),
                single_use,
            );
            metrics.insert("mean_accuracy".into(), r.mean_accuracy);
            metrics.insert("chance".into(), r.chance);
            if r.mean_accuracy <= r.chance + 0.1 {
                UNLINKABLE.into()
            } else if r.mean_accuracy > 0.9 {
                LINKABLE.into()
            } else {
                "partially_linkable".into()
            }
        }
        AttackKind::EvcsTamperParams => {
            let (behavior, cause) = match p.price_override {
                Some(price) => (
                    SessionBehavior {
                        evcs_price_override: Some(price),
                        ..SessionBehavior::default()
                    },
                    DisputeCause::BillRejected,
                ),
                None => (
                    SessionBehavior {
                        evcs_meter_offset_kwh: p.meter_offset_kwh.unwrap_or(0.2),
                        ..SessionBehavior::default()
                    },
                    DisputeCause::MeterMismatch,
                ),
            };
            let r = misbehavior_trials(s.seed, p.trials.unwrap_or(5), behavior, cause);
            metrics.insert("trials".into(), r.trials as f64);
            metrics.insert("finalized".into(), r.finalized as f64);
            dispute_observed(&r, cause)
        }
        AttackKind::EvcsCredentialExtract => {
            let r = credential_extraction(s.seed, p.trials.unwrap_or(4));
            metrics.insert("secret_hits".into(), r.secret_hits as f64);
            if r.secret_hits == 0 {
                NO_PRIVATE_KEYS
            } else {
                KEYS_LEAKED
            }
            .into()
        }
        AttackKind::EvRefusePay => {
            let behavior = SessionBehavior {
                ev_refuses_payment: true,
                ..SessionBehavior::default()
            };
            let r = misbehavior_trials(s.seed, p.trials.unwrap_or(5), behavior, DisputeCause::PaymentDefault);
            metrics.insert("trials".into(), r.trials as f64);
            metrics.insert("finalized".into(), r.finalized as f64);
            dispute_observed(&r, DisputeCause::PaymentDefault)
        }
        AttackKind::EvFalseMeter => {
            let behavior = SessionBehavior {
                ev_meter_offset_kwh: -p.meter_offset_kwh.unwrap_or(1.0).abs(),
                ..SessionBehavior::default()
            };
            let r = misbehavior_trials(s.seed, p.trials.unwrap_or(5), behavior, DisputeCause::MeterMismatch);
            metrics.insert("trials".into(), r.trials as f64);
            metrics.insert("settled_at_minimum".into(), r.settled_at_minimum as f64);
            dispute_observed(&r, DisputeCause::MeterMismatch)
        }
    };
    AttackOutcome {
        scenario_kind: s.kind.name().into(),
        seed: s.seed,
        pass: observed == expected,
        expected,
        observed,
        metrics,
    }
}
