//! Deterministic simulation loop: registration, authentication over the
//! channel fabric, and one trading slot per authenticated session.
//!
//! Simulated time advances in fixed ticks of [`TICK_MS`]. Every random draw
//! comes from generators derived from the world seed, so `(config, seed)`
//! fixes the whole run.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_core::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actors::{AuthError, Ev, EvState, Evcs, EvcsState, DEFAULT_DELTA_FRESH_MS};
use crate::canonical::{Reader, Writer};
use crate::channels::{
    decode_message, encode_message, CaptureRecord, Channel, ChannelError, CodecError, EndpointId, Envelope, Message,
    Network,
};
use crate::contract::{
    generate_bill, Battery, Contract, ContractError, EnergyBounds, EvLocalLog, MeterStatus, SlotOutcome, StationTerms,
    TradeParams, UserUtility, DEFAULT_DELTA_E_METER_KWH,
};
use crate::crypto::{directional_nonce, hash_parts, SessionCipher, SessionKey, SimRng};
use crate::ledger::Ledger;
use crate::pki::{Pki, PkiError};

pub const TICK_MS: u64 = 1_000;
pub const DEFAULT_START_MS: u64 = 1_700_000_000_000;
pub const DEFAULT_SLOT_LEN_MS: u64 = 900_000;
pub const DEFAULT_METERING_TICKS: u64 = 4;
/// Ledger author for entries written by the trading contract.
pub const CONTRACT_AUTHOR: &str = "v2g-contract";

/// Closed interval sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub const fn fixed(v: f64) -> Self {
        Range { lo: v, hi: v }
    }

    pub fn is_valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..=self.hi)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserProfile {
    pub alpha: Range,
    pub beta: Range,
    pub gamma: Range,
    pub delta: Range,
    pub soc_kwh: Range,
    pub capacity_kwh: Range,
    pub charger_limit_kwh: Range,
    pub efficiency: Range,
}

impl Default for UserProfile {
    fn default() -> Self {
        UserProfile {
            alpha: Range::new(0.30, 0.60),
            beta: Range::new(0.005, 0.02),
            gamma: Range::new(0.05, 0.15),
            delta: Range::new(0.005, 0.02),
            soc_kwh: Range::new(10.0, 40.0),
            capacity_kwh: Range::new(60.0, 80.0),
            charger_limit_kwh: Range::new(20.0, 40.0),
            efficiency: Range::new(0.90, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationProfile {
    pub p_c: Range,
    pub p_d: Range,
    pub c_g: Range,
    pub v_g: Range,
    pub fee: Range,
}

impl Default for StationProfile {
    fn default() -> Self {
        StationProfile {
            p_c: Range::new(0.15, 0.30),
            p_d: Range::new(0.10, 0.25),
            c_g: Range::new(0.05, 0.15),
            v_g: Range::new(0.20, 0.35),
            fee: Range::new(0.25, 0.75),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub users: usize,
    pub stations: usize,
    pub slots: u64,
    pub delta_fresh_ms: u64,
    pub delta_e_meter_kwh: f64,
    pub capture: bool,
    pub user_profile: UserProfile,
    pub station_profile: StationProfile,
    pub metering_ticks: u64,
    pub slot_len_ms: u64,
    pub start_ms: u64,
    /// Fresh pseudonym per session. `false` reuses one pid per user.
    pub single_use_pids: bool,
    /// Credential lifetime beyond the slot horizon.
    pub credential_ttl_ms: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            users: 2,
            stations: 1,
            slots: 3,
            delta_fresh_ms: DEFAULT_DELTA_FRESH_MS,
            delta_e_meter_kwh: DEFAULT_DELTA_E_METER_KWH,
            capture: false,
            user_profile: UserProfile::default(),
            station_profile: StationProfile::default(),
            metering_ticks: DEFAULT_METERING_TICKS,
            slot_len_ms: DEFAULT_SLOT_LEN_MS,
            start_ms: DEFAULT_START_MS,
            single_use_pids: true,
            credential_ttl_ms: crate::pki::DEFAULT_CREDENTIAL_TTL_MS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

fn check(cond: bool, msg: &str) -> Result<(), ConfigError> {
    if cond {
        Ok(())
    } else {
        Err(ConfigError(msg.into()))
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        check(self.users >= 1, "users.count must be >= 1")?;
        check(self.stations >= 1, "stations.count must be >= 1")?;
        check(self.slots >= 1, "slots must be >= 1")?;
        check(self.delta_fresh_ms >= 1, "delta_fresh_s must be > 0")?;
        check(
            self.delta_e_meter_kwh.is_finite() && self.delta_e_meter_kwh >= 0.0,
            "delta_e_meter_kwh must be >= 0",
        )?;
        check(self.credential_ttl_ms >= 1, "credential ttl must be > 0")?;
        check(self.metering_ticks >= 1, "metering_ticks must be >= 1")?;
        check(self.slot_len_ms >= TICK_MS, "slot length must be at least one tick")?;
        let u = &self.user_profile;
        let s = &self.station_profile;
        let named = [
            ("users.alpha", u.alpha),
            ("users.beta", u.beta),
            ("users.gamma", u.gamma),
            ("users.delta", u.delta),
            ("users.soc_kwh", u.soc_kwh),
            ("users.capacity_kwh", u.capacity_kwh),
            ("users.charger_limit_kwh", u.charger_limit_kwh),
            ("users.efficiency", u.efficiency),
            ("stations.p_c", s.p_c),
            ("stations.p_d", s.p_d),
            ("stations.c_g", s.c_g),
            ("stations.v_g", s.v_g),
            ("stations.fee", s.fee),
        ];
        for (name, r) in named {
            if !r.is_valid() {
                return Err(ConfigError(format!("{name}: range must be finite with lo <= hi")));
            }
            if r.lo < 0.0 {
                return Err(ConfigError(format!("{name}: values must be >= 0")));
            }
        }
        check(u.beta.lo > 0.0, "users.beta: values must be > 0")?;
        check(u.delta.lo > 0.0, "users.delta: values must be > 0")?;
        check(
            u.efficiency.lo > 0.0 && u.efficiency.hi <= 1.0,
            "users.efficiency: values must lie in (0, 1]",
        )?;
        check(u.capacity_kwh.lo > 0.0, "users.capacity_kwh: values must be > 0")?;
        check(
            u.soc_kwh.hi <= u.capacity_kwh.lo,
            "users.soc_kwh: upper bound must not exceed the smallest capacity",
        )?;
        Ok(())
    }
}

/// Deviations the simulation can inject into one session.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SessionBehavior {
    /// Constant bias added to |E_meter,EV| each tick.
    pub ev_meter_offset_kwh: f64,
    /// Constant bias added to |E_meter,EVCS| each tick.
    pub evcs_meter_offset_kwh: f64,
    pub ev_refuses_payment: bool,
    /// Charging price the station bills with instead of the agreed one.
    pub evcs_price_override: Option<f64>,
    /// Replaces the sampled user utility for this session.
    pub user_utility: Option<UserUtility>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SessionFailure {
    #[error("{0}")]
    Auth(AuthError),
    #[error("channel: {0}")]
    Channel(ChannelError),
    #[error("codec: {0}")]
    Codec(CodecError),
    #[error("no frame delivered for {0}")]
    NoDelivery(&'static str),
    #[error("unexpected frame {got} while waiting for {want}")]
    Unexpected { want: &'static str, got: &'static str },
    #[error("no pseudonym available")]
    NoPseudonym,
}

impl SessionFailure {
    pub fn code(&self) -> String {
        match self {
            SessionFailure::Auth(e) => e.code().into(),
            SessionFailure::Channel(_) => "ChannelError".into(),
            SessionFailure::Codec(_) => "Malformed".into(),
            SessionFailure::NoDelivery(_) => "NoDelivery".into(),
            SessionFailure::Unexpected { .. } => "UnexpectedMessage".into(),
            SessionFailure::NoPseudonym => "NoPseudonym".into(),
        }
    }
}

impl From<AuthError> for SessionFailure {
    fn from(e: AuthError) -> Self {
        SessionFailure::Auth(e)
    }
}

impl From<ChannelError> for SessionFailure {
    fn from(e: ChannelError) -> Self {
        SessionFailure::Channel(e)
    }
}

impl From<CodecError> for SessionFailure {
    fn from(e: CodecError) -> Self {
        SessionFailure::Codec(e)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("pki: {0}")]
    Pki(#[from] PkiError),
    #[error("contract: {0}")]
    Contract(ContractError),
}

impl From<ContractError> for SimError {
    fn from(e: ContractError) -> Self {
        SimError::Contract(e)
    }
}

/// One state transition in a session's event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub tick: u64,
    pub actor: String,
    pub state: String,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session: u64,
    pub slot: u64,
    pub user: usize,
    pub station: usize,
    pub evcs_id: String,
    pub pid: String,
    pub authenticated: bool,
    pub keys_match: bool,
    pub error: Option<String>,
    pub events: Vec<SessionEvent>,
    pub outcome: Option<SlotOutcome>,
}

/// Result of one authentication run, including the frames each side accepted.
#[derive(Debug, Clone)]
pub struct AuthRun {
    pub pid: String,
    pub evcs_id: String,
    pub result: Result<SessionKey, SessionFailure>,
    pub ev_key: Option<SessionKey>,
    pub evcs_key: Option<SessionKey>,
    pub events: Vec<SessionEvent>,
    /// Application frames in protocol order as sent by the honest parties.
    pub transcript: Vec<Message>,
    pub t1_ms: u64,
}

impl AuthRun {
    pub fn authenticated(&self) -> bool {
        self.result.is_ok()
    }
}

/// Derives an independent 32-byte seed for a named component.
pub fn derive_seed(seed: u64, label: &str) -> [u8; 32] {
    hash_parts(&[b"pnc/sim-seed/v1", &seed.to_be_bytes(), label.as_bytes()]).0
}

fn encode_utility(u: &UserUtility) -> Vec<u8> {
    let mut w = Writer::new();
    w.f64(u.alpha).f64(u.beta).f64(u.gamma).f64(u.delta);
    w.finish()
}

fn decode_utility(bytes: &[u8]) -> Option<UserUtility> {
    let mut r = Reader::new(bytes);
    let u = UserUtility {
        alpha: r.f64().ok()?,
        beta: r.f64().ok()?,
        gamma: r.f64().ok()?,
        delta: r.f64().ok()?,
    };
    r.finish().ok()?;
    Some(u)
}

/// Cumulative meter value after `step` of `steps` ticks with a constant bias on |value|.
pub fn meter_value(x_star: f64, step: u64, steps: u64, bias_kwh: f64) -> f64 {
    let ramp = crate::contract::ramp(x_star, step, steps);
    let sign = if x_star < 0.0 { -1.0 } else { 1.0 };
    sign * (ramp.abs() + bias_kwh).max(0.0)
}

/// Simultaneous mutable access to the pieces of a [`World`], for scripts
/// that drive actors directly.
pub struct WorldParts<'a> {
    pub pki: &'a mut Pki,
    pub ledger: &'a mut Ledger,
    pub network: &'a mut Network,
    pub evs: &'a mut [Ev],
    pub stations: &'a mut [Evcs],
    pub rng: &'a mut SimRng,
    pub clock_ms: u64,
}

/// The simulated deployment: PKI, ledger, channel fabric and all actors.
pub struct World {
    cfg: WorldConfig,
    pki: Pki,
    ledger: Ledger,
    network: Network,
    root_pids: Vec<String>,
    evs: Vec<Ev>,
    stations: Vec<Evcs>,
    terms: Vec<StationTerms>,
    batteries: Vec<Battery>,
    logs: Vec<EvLocalLog>,
    rng: SimRng,
    clock_ms: u64,
    sessions: u64,
    secrets_seen: Vec<[u8; 32]>,
}

impl core::fmt::Debug for World {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("World")
            .field("users", &self.evs.len())
            .field("stations", &self.stations.len())
            .field("clock_ms", &self.clock_ms)
            .field("sessions", &self.sessions)
            .finish()
    }
}

impl World {
    pub fn new(cfg: WorldConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let mut rng = SimRng::from_seed(derive_seed(cfg.seed, "world"));
        let horizon = cfg.slots * cfg.slot_len_ms.max(cfg.users as u64 * 60 * TICK_MS);
        let mut pki = Pki::new("pnc-ca", derive_seed(cfg.seed, "ca"))
            .with_credential_ttl(cfg.credential_ttl_ms.saturating_add(horizon));
        let mut ledger = Ledger::new();
        let mut network = Network::new(derive_seed(cfg.seed, "network"));
        network.set_capture(cfg.capture);
        let now = cfg.start_ms;
        network.set_tick(now / TICK_MS);

        let mut root_pids = Vec::with_capacity(cfg.users);
        let mut evs = Vec::with_capacity(cfg.users);
        let mut batteries = Vec::with_capacity(cfg.users);
        let batch = if cfg.single_use_pids { cfg.slots as usize + 1 } else { 1 };
        for i in 0..cfg.users {
            let reg = pki.register_user(&format!("user-{i}"), now, &mut ledger)?;
            let pids = pki.issue_pseudo_batch(&reg.root_pid, batch)?;
            root_pids.push(reg.root_pid.clone());
            let endpoint = EndpointId(format!("ev-{i}"));
            network.join_wireless(&endpoint);
            let mut ev = Ev::new(endpoint, reg, pids);
            ev.single_use_pids = cfg.single_use_pids;
            evs.push(ev);
            let p = &cfg.user_profile;
            let capacity = p.capacity_kwh.sample(&mut rng);
            batteries.push(Battery {
                soc_kwh: p.soc_kwh.sample(&mut rng).min(capacity),
                capacity_kwh: capacity,
                charger_limit_kwh: p.charger_limit_kwh.sample(&mut rng),
                efficiency: p.efficiency.sample(&mut rng),
            });
        }
        let mut stations = Vec::with_capacity(cfg.stations);
        let mut terms = Vec::with_capacity(cfg.stations);
        for j in 0..cfg.stations {
            let record = pki.register_evcs(now, &mut ledger)?;
            let endpoint = EndpointId(format!("station-{j}"));
            network.join_wireless(&endpoint);
            let mut st = Evcs::new(endpoint, record, cfg.delta_fresh_ms);
            st.single_use_pids = cfg.single_use_pids;
            stations.push(st);
            let p = &cfg.station_profile;
            terms.push(StationTerms {
                p_c: p.p_c.sample(&mut rng),
                p_d: p.p_d.sample(&mut rng),
                c_g: p.c_g.sample(&mut rng),
                v_g: p.v_g.sample(&mut rng),
                fee: p.fee.sample(&mut rng),
            });
        }
        ledger.seal_block();
        Ok(World {
            logs: (0..cfg.users).map(|_| EvLocalLog::default()).collect(),
            cfg,
            pki,
            ledger,
            network,
            root_pids,
            evs,
            stations,
            terms,
            batteries,
            rng,
            clock_ms: now,
            sessions: 0,
            secrets_seen: Vec::new(),
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn parts(&mut self) -> WorldParts<'_> {
        WorldParts {
            pki: &mut self.pki,
            ledger: &mut self.ledger,
            network: &mut self.network,
            evs: &mut self.evs,
            stations: &mut self.stations,
            rng: &mut self.rng,
            clock_ms: self.clock_ms,
        }
    }

    pub fn pki(&self) -> &Pki {
        &self.pki
    }

    pub fn pki_mut(&mut self) -> &mut Pki {
        &mut self.pki
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut Ledger {
        &mut self.ledger
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.network
    }

    pub fn ev(&self, i: usize) -> &Ev {
        &self.evs[i]
    }

    pub fn ev_mut(&mut self, i: usize) -> &mut Ev {
        &mut self.evs[i]
    }

    pub fn station(&self, j: usize) -> &Evcs {
        &self.stations[j]
    }

    pub fn station_mut(&mut self, j: usize) -> &mut Evcs {
        &mut self.stations[j]
    }

    pub fn station_terms(&self, j: usize) -> StationTerms {
        self.terms[j]
    }

    pub fn battery(&self, i: usize) -> &Battery {
        &self.batteries[i]
    }

    pub fn battery_mut(&mut self, i: usize) -> &mut Battery {
        &mut self.batteries[i]
    }

    pub fn ev_log(&self, i: usize) -> &EvLocalLog {
        &self.logs[i]
    }

    pub fn rng_mut(&mut self) -> &mut SimRng {
        &mut self.rng
    }

    pub fn users(&self) -> usize {
        self.evs.len()
    }

    pub fn station_count(&self) -> usize {
        self.stations.len()
    }

    pub fn clock_ms(&self) -> u64 {
        self.clock_ms
    }

    pub fn tick(&self) -> u64 {
        self.clock_ms / TICK_MS
    }

    pub fn advance(&mut self, ms: u64) {
        self.set_clock(self.clock_ms + ms);
    }

    /// Moves the clock forward to `ms` (never backward).
    pub fn set_clock(&mut self, ms: u64) {
        self.clock_ms = self.clock_ms.max(ms);
        self.network.set_tick(self.tick());
    }

    /// Seals pending ledger entries into a block.
    pub fn seal(&mut self) {
        if !self.ledger.pending().is_empty() {
            self.ledger.seal_block();
        }
    }

    pub fn capture_log(&self) -> &[CaptureRecord] {
        self.network.capture_log()
    }

    /// Every private key, CA seed, challenge and session key that existed in
    /// the run. None of these may appear in a capture or an export.
    pub fn secrets_for_audit(&self) -> Vec<[u8; 32]> {
        let mut out = Vec::new();
        out.extend(self.pki.private_keys_for_audit());
        out.push(self.pki.signing_seed_for_audit());
        for ev in &self.evs {
            out.extend(ev.private_keys_for_audit());
        }
        for st in &self.stations {
            out.push(st.private_key_for_audit());
        }
        out.extend(self.secrets_seen.iter().copied());
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Issues fresh pseudonyms to user `i` when the pool runs dry.
    pub fn ensure_pseudonym(&mut self, i: usize) -> Result<(), SimError> {
        if self.evs[i].next_pseudonym().is_none() {
            let more = self
                .pki
                .issue_pseudo_batch(&self.root_pids[i], self.cfg.slots as usize + 1)?;
            self.evs[i].add_pseudonyms(more);
        }
        Ok(())
    }

    /// Rotates station `j` at the PKI. With `install` false the station keeps
    /// presenting its old identifier and credential.
    pub fn rotate_station(&mut self, j: usize, install: bool) -> Result<(), SimError> {
        let old = self.stations[j].evcs_id().to_string();
        let now = self.clock_ms;
        let record = self.pki.rotate_evcs_credentials(&old, now, &mut self.ledger)?;
        self.seal();
        if install {
            self.stations[j].install_record(record);
        }
        Ok(())
    }

    fn deliver(
        &mut self,
        channel: Channel,
        from: &EndpointId,
        to: &EndpointId,
        msg: &Message,
        want: &'static str,
    ) -> Result<Message, SessionFailure> {
        self.network.send(Envelope::new(channel, from, to, msg))?;
        let env = self.network.recv(to).ok_or(SessionFailure::NoDelivery(want))??;
        Ok(decode_message(&env.body)?)
    }

    fn event(&self, actor: &str, state: &str, error: Option<&SessionFailure>) -> SessionEvent {
        SessionEvent {
            tick: self.tick(),
            actor: actor.into(),
            state: state.into(),
            error: error.map(SessionFailure::code),
        }
    }

    /// Runs steps 1–5 between user `u` and station `s` over the fabric. Both
    /// actors are reset first; the EV is left plugged in.
    pub fn authenticate(&mut self, u: usize, s: usize) -> AuthRun {
        let ev_ep = self.evs[u].endpoint.clone();
        let st_ep = self.stations[s].endpoint.clone();
        self.evs[u].reset();
        self.stations[s].reset();
        self.network.clear_inbox(&ev_ep);
        self.network.clear_inbox(&st_ep);
        self.network.plug(&ev_ep, &st_ep);
        self.evs[u].plug(&st_ep);
        let t1 = self.clock_ms;
        let mut run = AuthRun {
            pid: String::new(),
            evcs_id: self.stations[s].evcs_id().to_string(),
            result: Err(SessionFailure::NoPseudonym),
            ev_key: None,
            evcs_key: None,
            events: Vec::new(),
            transcript: Vec::new(),
            t1_ms: t1,
        };
        let result = self.run_steps(u, s, &ev_ep, &st_ep, &mut run);
        if let Err(e) = &result {
            let ev_state = self.evs[u].state().name();
            let st_state = self.stations[s].state().name();
            run.events.push(self.event("ev", ev_state, Some(e)));
            run.events.push(self.event("evcs", st_state, Some(e)));
            self.network.record_abort(&ev_ep, &st_ep, &e.code());
        }
        run.result = result;
        self.network.clear_inbox(&ev_ep);
        self.network.clear_inbox(&st_ep);
        run
    }

    fn run_steps(
        &mut self,
        u: usize,
        s: usize,
        ev_ep: &EndpointId,
        st_ep: &EndpointId,
        run: &mut AuthRun,
    ) -> Result<SessionKey, SessionFailure> {
        self.ensure_pseudonym(u).map_err(|_| SessionFailure::NoPseudonym)?;
        let pid = self.evs[u].next_pseudonym().ok_or(SessionFailure::NoPseudonym)?;
        run.pid = pid.pid.clone();
        self.network.transport_handshake(ev_ep, st_ep)?;
        let now = self.clock_ms;

        let m1 = self.evs[u].start_auth(&pid, now)?;
        run.events.push(self.event("ev", EvState::SentM1.name(), None));
        let m1 = Message::M1(m1);
        run.transcript.push(m1.clone());
        let got = self.deliver(Channel::Wireless, ev_ep, st_ep, &m1, "M1")?;
        let Message::M1(m1) = got else {
            return Err(SessionFailure::Unexpected {
                want: "M1",
                got: got.name(),
            });
        };

        let m2 = self.stations[s].handle_m1(&m1, now, &self.pki, &mut self.rng)?;
        run.events.push(self.event("evcs", EvcsState::SentM2.name(), None));
        run.transcript.push(m2.clone());
        let got = self.deliver(Channel::Wireless, st_ep, ev_ep, &m2, "M2")?;
        let Message::M2 { ciphertext } = got else {
            return Err(SessionFailure::Unexpected {
                want: "M2",
                got: got.name(),
            });
        };

        let m3 = self.evs[u].handle_m2(&ciphertext, &self.pki, &mut self.rng)?;
        run.events.push(self.event("ev", EvState::SentM3.name(), None));
        run.transcript.push(m3.clone());
        let got = self.deliver(Channel::CanBus, ev_ep, st_ep, &m3, "M3")?;
        let Message::M3 { ciphertext } = got else {
            return Err(SessionFailure::Unexpected {
                want: "M3",
                got: got.name(),
            });
        };

        let m4 = self.stations[s].handle_m3(&ciphertext, &mut self.rng)?;
        run.events.push(self.event("evcs", EvcsState::SentM4.name(), None));
        run.transcript.push(m4.clone());
        let got = self.deliver(Channel::Wireless, st_ep, ev_ep, &m4, "M4")?;
        let Message::M4 { ciphertext } = got else {
            return Err(SessionFailure::Unexpected {
                want: "M4",
                got: got.name(),
            });
        };
        self.evs[u].handle_m4(&ciphertext)?;
        run.events.push(self.event("ev", EvState::Authenticated.name(), None));

        let vc_user = self.evs[u].credential_presentation()?;
        let got = self.deliver(Channel::Wireless, ev_ep, st_ep, &vc_user, "UserCredential")?;
        let Message::UserCredential { pid, credential } = got else {
            return Err(SessionFailure::Unexpected {
                want: "UserCredential",
                got: got.name(),
            });
        };
        if !self.stations[s].verify_user_credential(&pid, &credential, &self.pki, now) {
            return Err(AuthError::CredentialRejected.into());
        }
        run.events
            .push(self.event("evcs", EvcsState::Authenticated.name(), None));

        let vc_station = self.stations[s].credential_presentation();
        let got = self.deliver(Channel::Wireless, st_ep, ev_ep, &vc_station, "StationCredential")?;
        let Message::StationCredential { credential } = got else {
            return Err(SessionFailure::Unexpected {
                want: "StationCredential",
                got: got.name(),
            });
        };
        let ca_key = self.pki.ca_key();
        let ca_id = self.pki.ca_id().to_string();
        if !self.evs[u].verify_station_credential(&credential, &self.ledger, &ca_key, &ca_id, now) {
            return Err(AuthError::CredentialRejected.into());
        }

        let evcs_key = self.stations[s].establish_session(&mut self.pki)?;
        let ev_key = self.evs[u].establish_session()?;
        run.evcs_key = Some(evcs_key);
        run.ev_key = Some(ev_key);
        run.events.push(self.event("ev", "SessionEstablished", None));
        run.events.push(self.event("evcs", "SessionEstablished", None));
        let ev_side = self.evs[u].auth_state();
        if let (Some(c), Some(p)) = (ev_side.recovered.c_cyber, ev_side.c_physical) {
            self.secrets_seen.push(c.0);
            self.secrets_seen.push(p.0);
        }
        self.secrets_seen.push(ev_key.0);
        self.secrets_seen.push(evcs_key.0);
        if ev_key != evcs_key {
            return Err(AuthError::NotAuthenticated.into());
        }
        Ok(ev_key)
    }

    /// Draws a fresh user utility from the configured ranges.
    pub fn sample_user_utility(&mut self) -> UserUtility {
        let p = self.cfg.user_profile;
        UserUtility {
            alpha: p.alpha.sample(&mut self.rng),
            beta: p.beta.sample(&mut self.rng),
            gamma: p.gamma.sample(&mut self.rng),
            delta: p.delta.sample(&mut self.rng),
        }
    }

    /// Authentication followed by one trading slot, then unplug and seal.
    pub fn run_session(&mut self, u: usize, s: usize, slot: u64, behavior: &SessionBehavior) -> SessionReport {
        let session = self.sessions;
        self.sessions += 1;
        let auth = self.authenticate(u, s);
        let mut report = SessionReport {
            session,
            slot,
            user: u,
            station: s,
            evcs_id: auth.evcs_id.clone(),
            pid: auth.pid.clone(),
            authenticated: auth.authenticated(),
            keys_match: auth.ev_key.is_some() && auth.ev_key == auth.evcs_key,
            error: auth.result.as_ref().err().map(SessionFailure::code),
            events: auth.events.clone(),
            outcome: None,
        };
        self.advance(TICK_MS);
        if let Ok(key) = auth.result {
            match self.trade(u, s, slot, &auth.pid, &auth.evcs_id, key, behavior) {
                Ok(outcome) => report.outcome = Some(outcome),
                Err(e) => report.error = Some(e),
            }
        }
        let ev_ep = self.evs[u].endpoint.clone();
        let st_ep = self.stations[s].endpoint.clone();
        self.network.unplug(&ev_ep, &st_ep);
        self.evs[u].unplug();
        self.seal();
        report
    }

    #[allow(clippy::too_many_arguments)]
    fn trade(
        &mut self,
        u: usize,
        s: usize,
        slot: u64,
        pid: &str,
        evcs_id: &str,
        key: SessionKey,
        behavior: &SessionBehavior,
    ) -> Result<SlotOutcome, String> {
        let ev_ep = self.evs[u].endpoint.clone();
        let st_ep = self.stations[s].endpoint.clone();
        let mut ev_cipher = SessionCipher::new(key);
        let mut st_cipher = SessionCipher::new(key);
        let mut counter = 0u64;

        let utility = match behavior.user_utility {
            Some(u) => u,
            None => self.sample_user_utility(),
        };
        counter += 1;
        let nonce = directional_nonce(0, counter);
        let ct = ev_cipher
            .seal(&nonce, &encode_utility(&utility))
            .map_err(|e| e.to_string())?;
        let msg = Message::Secure { nonce, ciphertext: ct };
        let got = self
            .deliver(Channel::Wireless, &ev_ep, &st_ep, &msg, "Secure")
            .map_err(|e| e.code())?;
        let Message::Secure { nonce, ciphertext } = got else {
            return Err("UnexpectedMessage".into());
        };
        let plain = st_cipher
            .open(&nonce, &ciphertext)
            .map_err(|_| String::from("DecryptFailed"))?;
        let submitted = decode_utility(&plain).ok_or_else(|| String::from("Malformed"))?;

        let terms = self.terms[s];
        let bounds = EnergyBounds::from_battery(&self.batteries[u]);
        let mut contract =
            Contract::open(pid, evcs_id, slot, true, self.cfg.delta_e_meter_kwh).map_err(|e| e.to_string())?;
        let schedule = contract
            .submit_utilities(&submitted, &terms, bounds)
            .map_err(|e| e.to_string())?;
        let x = schedule.x_star_kwh;
        let steps = self.cfg.metering_ticks;

        for k in 1..=steps {
            self.advance(TICK_MS);
            let ev_reading = meter_value(x, k, steps, behavior.ev_meter_offset_kwh);
            counter += 1;
            let nonce = directional_nonce(0, counter);
            let ct = ev_cipher
                .seal(&nonce, &ev_reading.to_be_bytes())
                .map_err(|e| e.to_string())?;
            let msg = Message::Secure { nonce, ciphertext: ct };
            let got = self
                .deliver(Channel::CanBus, &ev_ep, &st_ep, &msg, "Secure")
                .map_err(|e| e.code())?;
            let reported = match got {
                Message::Secure { nonce, ciphertext } => st_cipher
                    .open(&nonce, &ciphertext)
                    .ok()
                    .and_then(|b| <[u8; 8]>::try_from(b.as_slice()).ok())
                    .map(f64::from_be_bytes),
                _ => None,
            };
            let st_reading = meter_value(x, k, steps, behavior.evcs_meter_offset_kwh);
            let status = contract
                .record_readings(self.tick(), reported, Some(st_reading))
                .map_err(|e| e.to_string())?;
            if matches!(status, MeterStatus::Violation(_)) {
                break;
            }
        }

        let now = self.clock_ms;
        if contract.end_slot().is_ok() {
            let bill = contract.generate_bill().map_err(|e| e.to_string())?;
            let presented = match behavior.evcs_price_override {
                Some(p_c) => {
                    let params = TradeParams { p_c, ..schedule.params };
                    generate_bill(slot, bill.energy_kwh, &params)
                }
                None => bill,
            };
            let ev_ack = !behavior.ev_refuses_payment && presented == bill;
            match contract.finalize(&presented, ev_ack, true, &mut self.ledger, now, CONTRACT_AUTHOR) {
                Ok(_) => {}
                Err(ContractError::Rejected(_)) => {
                    contract
                        .resolve_dispute(&mut self.ledger, now, CONTRACT_AUTHOR)
                        .map_err(|e| e.to_string())?;
                }
                Err(e) => return Err(e.to_string()),
            }
        } else {
            contract
                .resolve_dispute(&mut self.ledger, now, CONTRACT_AUTHOR)
                .map_err(|e| e.to_string())?;
        }
        let (outcome, _next_bounds) = contract
            .log_and_prepare_next(&mut self.batteries[u])
            .map_err(|e| e.to_string())?;
        self.logs[u].outcomes.push(outcome.clone());
        Ok(outcome)
    }

    /// Runs every slot: users visit in a fresh random order each slot, each
    /// at a randomly chosen station with a small random start delay.
    pub fn run_all(&mut self) -> Vec<SessionReport> {
        let mut reports = Vec::new();
        let users = self.evs.len();
        let slot_len = self.cfg.slot_len_ms.max(users as u64 * 60 * TICK_MS);
        for slot in 0..self.cfg.slots {
            let slot_start = self.cfg.start_ms + TICK_MS * 60 + slot * slot_len;
            self.set_clock(slot_start);
            let mut order: Vec<usize> = (0..users).collect();
            order.shuffle(&mut self.rng);
            for u in order {
                let s = self.rng.gen_range(0..self.stations.len());
                let jitter = self.rng.gen_range(0..20u64) * TICK_MS;
                self.advance(jitter);
                reports.push(self.run_session(u, s, slot, &SessionBehavior::default()));
            }
        }
        reports
    }
}

/// Serialized frame for tests and attack scripts.
pub fn frame_bytes(msg: &Message) -> Vec<u8> {
    encode_message(msg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contract::SlotStatus;

    #[test]
    fn honest_world_finalizes_every_slot() {
        let mut w = World::new(WorldConfig::default()).unwrap();
        let reports = w.run_all();
        assert_eq!(reports.len(), 6);
        for r in &reports {
            assert!(r.authenticated, "{r:?}");
            assert!(r.keys_match);
            assert_eq!(r.outcome.as_ref().unwrap().status, SlotStatus::Finalized);
        }
        assert_eq!(w.ledger().transactions().len(), 6);
        assert!(w.ledger().verify_chain());
        let mut pids: Vec<_> = reports.iter().map(|r| r.pid.clone()).collect();
        pids.sort();
        pids.dedup();
        assert_eq!(pids.len(), 6);
    }

    #[test]
    fn same_seed_same_ledger() {
        let run = |seed| {
            let mut w = World::new(WorldConfig {
                seed,
                ..WorldConfig::default()
            })
            .unwrap();
            w.run_all();
            w.ledger().head_hash()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn zero_beta_is_invalid() {
        let mut cfg = WorldConfig::default();
        cfg.user_profile.beta = Range::new(0.0, 0.01);
        assert!(World::new(cfg).is_err());
    }

    #[test]
    fn reused_pids_when_single_use_disabled() {
        let mut w = World::new(WorldConfig {
            single_use_pids: false,
            ..WorldConfig::default()
        })
        .unwrap();
        let reports = w.run_all();
        assert!(reports.iter().all(|r| r.authenticated));
        let mut pids: Vec<_> = reports.iter().map(|r| r.pid.clone()).collect();
        pids.sort();
        pids.dedup();
        assert_eq!(pids.len(), 2);
    }

    #[test]
    fn meter_bias_opens_dispute() {
        let mut w = World::new(WorldConfig::default()).unwrap();
        w.set_clock(DEFAULT_START_MS + 60_000);
        let b = SessionBehavior {
            evcs_meter_offset_kwh: 0.2,
            ..SessionBehavior::default()
        };
        let r = w.run_session(0, 0, 0, &b);
        let o = r.outcome.unwrap();
        assert_eq!(o.status, SlotStatus::Resolved);
        assert_eq!(w.ledger().disputes().len(), 1);
        assert!(w.ledger().transactions().is_empty());
    }

    #[test]
    fn stale_station_is_rejected_after_rotation() {
        let mut w = World::new(WorldConfig::default()).unwrap();
        w.set_clock(DEFAULT_START_MS + 60_000);
        w.rotate_station(0, false).unwrap();
        let run = w.authenticate(0, 0);
        assert_eq!(run.result.unwrap_err(), SessionFailure::Auth(AuthError::StaleStation));
    }
}
