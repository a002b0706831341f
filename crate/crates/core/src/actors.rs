//! EV (EVCC) and station (SECC) authentication state machines.
//!
//! ```text
//!  EV                                   station
//!  M1 = pid ‖ Req ‖ T1        ── W ──▶  freshness, replay cache, pubkey lookup
//!                             ◀── W ──  M2 = Enc_user(C_cyber ‖ ID_EVCS ‖ T2),  T2 = H(T1)
//!  check T2' = H(T1)
//!  M3 = Enc_evcs(C_cyber' ‖ C_phys ‖ T3) ── CAN ──▶  check C_cyber'' = C_cyber, T3' = H(T2)
//!                             ◀── W ──  M4 = Enc_user(C_phys' ‖ T4),  T4 = H(T3)
//!  check C_phys'' = C_phys, T4' = H(T3)
//!  credentials both ways, then K_session on both sides
//! ```
//!
//! Every error moves the side that raised it to `Failed`; there are no retries.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand_core::{CryptoRng, RngCore};
use thiserror::Error;

use crate::canonical::Writer;
use crate::channels::EndpointId;
use crate::channels::{M2Payload, M3Payload, M4Payload, Message, MessageM1};
use crate::crypto::{
    derive_session_key, hash, hash_timestamp, pk_decrypt, pk_encrypt, random_challenge, Challenge, Digest32, KeyPair,
    PublicKey, SessionKey, VerifyingKey,
};
use crate::ledger::Ledger;
use crate::pki::{
    verify_evcs_credential, EvcsRecord, Pki, PkiError, PseudoIdentity, UserRegistration, VerifiableCredential,
};

/// Default freshness window for T1: 120 s of simulated time.
pub const DEFAULT_DELTA_FRESH_MS: u64 = 120_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuthError {
    #[error("EV is not plugged into a station")]
    NotPlugged,
    #[error("pseudo-identity already consumed")]
    PidConsumed,
    #[error("T1 outside the freshness window")]
    StaleTimestamp,
    #[error("pseudo-identity already seen")]
    ReusedPid,
    #[error("pseudo-identity unknown to the PKI")]
    UnknownPid,
    #[error("decryption failed")]
    DecryptFailed,
    #[error("timestamp hash chain mismatch")]
    HashChainMismatch,
    #[error("station unknown to the PKI")]
    UnknownStation,
    #[error("station identifier was rotated out")]
    StaleStation,
    #[error("challenge mismatch")]
    ChallengeMismatch,
    #[error("peer credential rejected")]
    CredentialRejected,
    #[error("session not authenticated")]
    NotAuthenticated,
    #[error("message not expected in state {0}")]
    UnexpectedMessage(&'static str),
    #[error("malformed payload")]
    Malformed,
}

impl AuthError {
    /// Stable code used in reports and logs.
    pub fn code(&self) -> &'static str {
        match self {
            AuthError::NotPlugged => "NotPlugged",
            AuthError::PidConsumed => "PidConsumed",
            AuthError::StaleTimestamp => "StaleTimestamp",
            AuthError::ReusedPid => "ReusedPid",
            AuthError::UnknownPid => "UnknownPid",
            AuthError::DecryptFailed => "DecryptFailed",
            AuthError::HashChainMismatch => "HashChainMismatch",
            AuthError::UnknownStation => "UnknownStation",
            AuthError::StaleStation => "StaleStation",
            AuthError::ChallengeMismatch => "ChallengeMismatch",
            AuthError::CredentialRejected => "CredentialRejected",
            AuthError::NotAuthenticated => "NotAuthenticated",
            AuthError::UnexpectedMessage(_) => "UnexpectedMessage",
            AuthError::Malformed => "Malformed",
        }
    }
}

/// Deliberate timestamp faults: each skew shifts the root of the hash chain the
/// faulty side uses when it computes that link. Zero everywhere for honest actors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChainFaults {
    pub t1_ms: i64,
    pub t2_ms: i64,
    pub t3_ms: i64,
    pub t4_ms: i64,
}

fn skewed(t: u64, skew: i64) -> u64 {
    t.wrapping_add_signed(skew)
}

fn chain(t1: u64, links: usize) -> Digest32 {
    let mut d = hash_timestamp(t1);
    for _ in 1..links {
        d = hash(&d.0);
    }
    d
}

/// Length-prefixed so distinct `(pid, evcs_id)` pairs never share a context.
pub fn session_context(pid: &str, evcs_id: &str) -> Vec<u8> {
    let mut w = Writer::new();
    w.str(pid).str(evcs_id);
    w.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvState {
    Idle,
    SentM1,
    SentM3,
    Authenticated,
    Failed,
}

impl EvState {
    pub fn name(self) -> &'static str {
        match self {
            EvState::Idle => "Idle",
            EvState::SentM1 => "SentM1",
            EvState::SentM3 => "SentM3",
            EvState::Authenticated => "Authenticated",
            EvState::Failed => "Failed",
        }
    }
}

/// Values the EV recovered from M2 and M4.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvRecovered {
    pub c_cyber: Option<Challenge>,
    pub evcs_id: Option<String>,
    pub t2: Option<Digest32>,
    pub c_physical: Option<Challenge>,
    pub t4: Option<Digest32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvAuthState {
    pub state: EvState,
    pub pid_in_use: Option<PseudoIdentity>,
    pub t1: Option<u64>,
    pub t3: Option<Digest32>,
    pub c_physical: Option<Challenge>,
    pub recovered: EvRecovered,
    pub station_verified: bool,
    pub session_key: Option<SessionKey>,
}

impl Default for EvAuthState {
    fn default() -> Self {
        EvAuthState {
            state: EvState::Idle,
            pid_in_use: None,
            t1: None,
            t3: None,
            c_physical: None,
            recovered: EvRecovered::default(),
            station_verified: false,
            session_key: None,
        }
    }
}

/// Vehicle side: wallet, pseudonym pool, plug state and one in-flight authentication.
#[derive(Debug, Clone)]
pub struct Ev {
    pub endpoint: EndpointId,
    wallet: KeyPair,
    credential: VerifiableCredential,
    pseudonyms: Vec<PseudoIdentity>,
    plugged_into: Option<EndpointId>,
    auth: EvAuthState,
    pub faults: ChainFaults,
    /// Retire each pseudonym after one session. Turning this off is the
    /// unlinkability ablation.
    pub single_use_pids: bool,
}

impl Ev {
    pub fn new(endpoint: EndpointId, registration: UserRegistration, pseudonyms: Vec<PseudoIdentity>) -> Self {
        Ev {
            endpoint,
            wallet: registration.wallet_key,
            credential: registration.credential,
            pseudonyms,
            plugged_into: None,
            auth: EvAuthState::default(),
            faults: ChainFaults::default(),
            single_use_pids: true,
        }
    }

    pub fn add_pseudonyms(&mut self, more: Vec<PseudoIdentity>) {
        self.pseudonyms.extend(more);
    }

    pub fn next_pseudonym(&self) -> Option<PseudoIdentity> {
        self.pseudonyms.iter().find(|p| !p.consumed).cloned()
    }

    pub fn pseudonyms(&self) -> &[PseudoIdentity] {
        &self.pseudonyms
    }

    pub fn credential(&self) -> &VerifiableCredential {
        &self.credential
    }

    pub fn wallet_public(&self) -> PublicKey {
        self.wallet.public_key
    }

    /// Private keys this EV holds, for leak scans.
    pub fn private_keys_for_audit(&self) -> Vec<[u8; 32]> {
        let mut keys: Vec<[u8; 32]> = self
            .pseudonyms
            .iter()
            .map(|p| *p.keypair.private_key.expose_bytes())
            .collect();
        keys.push(*self.wallet.private_key.expose_bytes());
        keys
    }

    pub fn plug(&mut self, station: &EndpointId) {
        self.plugged_into = Some(station.clone());
    }

    pub fn unplug(&mut self) {
        self.plugged_into = None;
    }

    pub fn plugged_into(&self) -> Option<&EndpointId> {
        self.plugged_into.as_ref()
    }

    pub fn auth_state(&self) -> &EvAuthState {
        &self.auth
    }

    pub fn state(&self) -> EvState {
        self.auth.state
    }

    /// Clears per-session state for the next authentication.
    pub fn reset(&mut self) {
        self.auth = EvAuthState::default();
    }

    fn fail(&mut self, e: AuthError) -> AuthError {
        self.auth.state = EvState::Failed;
        self.auth.session_key = None;
        e
    }

    fn pid(&self) -> Result<&PseudoIdentity, AuthError> {
        self.auth.pid_in_use.as_ref().ok_or(AuthError::NotAuthenticated)
    }

    /// Step 1.
    pub fn start_auth(&mut self, pid: &PseudoIdentity, now_ms: u64) -> Result<MessageM1, AuthError> {
        if self.plugged_into.is_none() {
            return Err(AuthError::NotPlugged);
        }
        let consumed_locally = self.pseudonyms.iter().any(|p| p.pid == pid.pid && p.consumed);
        if pid.consumed || consumed_locally {
            return Err(AuthError::PidConsumed);
        }
        self.auth = EvAuthState {
            state: EvState::SentM1,
            pid_in_use: Some(pid.clone()),
            t1: Some(now_ms),
            ..EvAuthState::default()
        };
        Ok(MessageM1 {
            pid: pid.pid.clone(),
            t1_ms: skewed(now_ms, self.faults.t1_ms),
        })
    }

    /// Step 3: recover C_cyber, ID_EVCS, T2; check T2 = H(T1); answer with M3.
    pub fn handle_m2<R: RngCore + CryptoRng>(
        &mut self,
        ciphertext: &[u8],
        pki: &Pki,
        rng: &mut R,
    ) -> Result<Message, AuthError> {
        if self.auth.state != EvState::SentM1 {
            return Err(self.fail(AuthError::UnexpectedMessage(self.auth.state.name())));
        }
        let pid = self.pid()?.clone();
        let plain = pk_decrypt(&pid.keypair, ciphertext).map_err(|_| self.fail(AuthError::DecryptFailed))?;
        let m2 = M2Payload::decode(&plain).map_err(|_| self.fail(AuthError::Malformed))?;
        let t1 = self.auth.t1.expect("t1 recorded in SentM1");
        let t2_expected = hash_timestamp(t1);
        self.auth.recovered.c_cyber = Some(m2.c_cyber);
        self.auth.recovered.evcs_id = Some(m2.evcs_id.clone());
        self.auth.recovered.t2 = Some(m2.t2);
        if m2.t2 != t2_expected {
            return Err(self.fail(AuthError::HashChainMismatch));
        }
        let station_key = pki.lookup_evcs_pubkey(&m2.evcs_id).map_err(|e| {
            self.fail(match e {
                PkiError::StaleEpoch => AuthError::StaleStation,
                _ => AuthError::UnknownStation,
            })
        })?;
        let c_physical = random_challenge(rng);
        let t3 = if self.faults.t3_ms != 0 {
            chain(skewed(t1, self.faults.t3_ms), 2)
        } else {
            hash(&m2.t2.0)
        };
        let payload = M3Payload {
            c_cyber: m2.c_cyber,
            c_physical,
            t3,
        };
        let ct = pk_encrypt(rng, &station_key, &payload.encode()).map_err(|_| self.fail(AuthError::Malformed))?;
        self.auth.c_physical = Some(c_physical);
        self.auth.t3 = Some(hash(&t2_expected.0));
        self.auth.state = EvState::SentM3;
        Ok(Message::M3 { ciphertext: ct })
    }

    /// Step 4 (EV side): recover C_physical and T4; both must match.
    pub fn handle_m4(&mut self, ciphertext: &[u8]) -> Result<(), AuthError> {
        if self.auth.state != EvState::SentM3 {
            return Err(self.fail(AuthError::UnexpectedMessage(self.auth.state.name())));
        }
        let pid = self.pid()?.clone();
        let plain = pk_decrypt(&pid.keypair, ciphertext).map_err(|_| self.fail(AuthError::DecryptFailed))?;
        let m4 = M4Payload::decode(&plain).map_err(|_| self.fail(AuthError::Malformed))?;
        self.auth.recovered.c_physical = Some(m4.c_physical);
        self.auth.recovered.t4 = Some(m4.t4);
        if Some(m4.c_physical) != self.auth.c_physical {
            return Err(self.fail(AuthError::ChallengeMismatch));
        }
        let t3 = self.auth.t3.expect("t3 recorded in SentM3");
        if m4.t4 != hash(&t3.0) {
            return Err(self.fail(AuthError::HashChainMismatch));
        }
        self.auth.state = EvState::Authenticated;
        Ok(())
    }

    /// Step 5 presentation: the pseudonym in use and the user credential.
    pub fn credential_presentation(&self) -> Result<Message, AuthError> {
        Ok(Message::UserCredential {
            pid: self.pid()?.pid.clone(),
            credential: self.credential.clone(),
        })
    }

    /// Step 5 (EV side): the station credential must be anchored, current, signed,
    /// and issued to the station identifier recovered from M2.
    pub fn verify_station_credential(
        &mut self,
        vc: &VerifiableCredential,
        ledger: &Ledger,
        ca_key: &VerifyingKey,
        ca_id: &str,
        now_ms: u64,
    ) -> bool {
        let ok = self.auth.state == EvState::Authenticated
            && self.auth.recovered.evcs_id.as_deref() == Some(vc.subject.as_str())
            && verify_evcs_credential(ledger, ca_key, ca_id, vc, now_ms);
        self.auth.station_verified = ok;
        if !ok {
            self.fail(AuthError::CredentialRejected);
        }
        ok
    }

    /// Derives K_session and retires the pseudonym locally.
    pub fn establish_session(&mut self) -> Result<SessionKey, AuthError> {
        if self.auth.state != EvState::Authenticated || !self.auth.station_verified {
            return Err(AuthError::NotAuthenticated);
        }
        let pid = self.pid()?.pid.clone();
        let evcs_id = self.auth.recovered.evcs_id.clone().ok_or(AuthError::NotAuthenticated)?;
        let c_cyber = self.auth.recovered.c_cyber.ok_or(AuthError::NotAuthenticated)?;
        let c_physical = self.auth.c_physical.ok_or(AuthError::NotAuthenticated)?;
        let key = derive_session_key(&c_cyber, &c_physical, &session_context(&pid, &evcs_id));
        self.auth.session_key = Some(key);
        if self.single_use_pids {
            for p in self.pseudonyms.iter_mut().filter(|p| p.pid == pid) {
                p.consumed = true;
            }
            if let Some(p) = self.auth.pid_in_use.as_mut() {
                p.consumed = true;
            }
        }
        Ok(key)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvcsState {
    Idle,
    SentM2,
    SentM4,
    Authenticated,
    Failed,
}

impl EvcsState {
    pub fn name(self) -> &'static str {
        match self {
            EvcsState::Idle => "Idle",
            EvcsState::SentM2 => "SentM2",
            EvcsState::SentM4 => "SentM4",
            EvcsState::Authenticated => "Authenticated",
            EvcsState::Failed => "Failed",
        }
    }
}

/// Values the station recovered from M3.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvcsRecovered {
    pub c_cyber: Option<Challenge>,
    pub c_physical: Option<Challenge>,
    pub t3: Option<Digest32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvcsAuthState {
    pub state: EvcsState,
    pub pid: Option<String>,
    pub user_key: Option<PublicKey>,
    pub t1: Option<u64>,
    pub c_cyber: Option<Challenge>,
    pub t2: Option<Digest32>,
    pub recovered: EvcsRecovered,
    pub user_verified: bool,
    pub session_key: Option<SessionKey>,
}

impl Default for EvcsAuthState {
    fn default() -> Self {
        EvcsAuthState {
            state: EvcsState::Idle,
            pid: None,
            user_key: None,
            t1: None,
            c_cyber: None,
            t2: None,
            recovered: EvcsRecovered::default(),
            user_verified: false,
            session_key: None,
        }
    }
}

/// Station side: current credential record, replay cache and one in-flight authentication.
#[derive(Debug, Clone)]
pub struct Evcs {
    pub endpoint: EndpointId,
    record: EvcsRecord,
    delta_fresh_ms: u64,
    replay_cache: BTreeMap<String, u64>,
    auth: EvcsAuthState,
    pub faults: ChainFaults,
    pub single_use_pids: bool,
}

impl Evcs {
    pub fn new(endpoint: EndpointId, record: EvcsRecord, delta_fresh_ms: u64) -> Self {
        Evcs {
            endpoint,
            record,
            delta_fresh_ms,
            replay_cache: BTreeMap::new(),
            auth: EvcsAuthState::default(),
            faults: ChainFaults::default(),
            single_use_pids: true,
        }
    }

    pub fn evcs_id(&self) -> &str {
        &self.record.evcs_id
    }

    pub fn record(&self) -> &EvcsRecord {
        &self.record
    }

    /// Installs a rotated record. A station that keeps the old one keeps failing.
    pub fn install_record(&mut self, record: EvcsRecord) {
        self.record = record;
    }

    pub fn private_key_for_audit(&self) -> [u8; 32] {
        *self.record.keypair.private_key.expose_bytes()
    }

    pub fn auth_state(&self) -> &EvcsAuthState {
        &self.auth
    }

    pub fn state(&self) -> EvcsState {
        self.auth.state
    }

    pub fn reset(&mut self) {
        self.auth = EvcsAuthState::default();
    }

    fn fail(&mut self, e: AuthError) -> AuthError {
        self.auth.state = EvcsState::Failed;
        self.auth.session_key = None;
        e
    }

    /// Step 2: freshness, replay cache, pubkey lookup; answer with M2.
    pub fn handle_m1<R: RngCore + CryptoRng>(
        &mut self,
        m1: &MessageM1,
        now_ms: u64,
        pki: &Pki,
        rng: &mut R,
    ) -> Result<Message, AuthError> {
        // A new M1 always starts a new session attempt.
        self.auth = EvcsAuthState::default();
        if now_ms.abs_diff(m1.t1_ms) > self.delta_fresh_ms {
            return Err(self.fail(AuthError::StaleTimestamp));
        }
        let horizon = 2 * self.delta_fresh_ms;
        self.replay_cache
            .retain(|_, seen| now_ms.saturating_sub(*seen) <= horizon);
        if self.replay_cache.contains_key(&m1.pid) {
            return Err(self.fail(AuthError::ReusedPid));
        }
        self.replay_cache.insert(m1.pid.clone(), now_ms);
        let user_key = pki.lookup_user_pubkey(&m1.pid).map_err(|e| {
            self.fail(match e {
                PkiError::ConsumedPid => AuthError::ReusedPid,
                _ => AuthError::UnknownPid,
            })
        })?;
        let c_cyber = random_challenge(rng);
        let t2 = hash_timestamp(skewed(m1.t1_ms, self.faults.t2_ms));
        let payload = M2Payload {
            c_cyber,
            evcs_id: self.record.evcs_id.clone(),
            t2,
        };
        let ct = pk_encrypt(rng, &user_key, &payload.encode()).map_err(|_| self.fail(AuthError::Malformed))?;
        self.auth = EvcsAuthState {
            state: EvcsState::SentM2,
            pid: Some(m1.pid.clone()),
            user_key: Some(user_key),
            t1: Some(m1.t1_ms),
            c_cyber: Some(c_cyber),
            t2: Some(hash_timestamp(m1.t1_ms)),
            ..EvcsAuthState::default()
        };
        Ok(Message::M2 { ciphertext: ct })
    }

    /// Step 4 (station side): C_cyber'' = C_cyber and T3' = H(T2); answer with M4.
    pub fn handle_m3<R: RngCore + CryptoRng>(&mut self, ciphertext: &[u8], rng: &mut R) -> Result<Message, AuthError> {
        if self.auth.state != EvcsState::SentM2 {
            return Err(self.fail(AuthError::UnexpectedMessage(self.auth.state.name())));
        }
        let plain = pk_decrypt(&self.record.keypair, ciphertext).map_err(|_| self.fail(AuthError::DecryptFailed))?;
        let m3 = M3Payload::decode(&plain).map_err(|_| self.fail(AuthError::Malformed))?;
        self.auth.recovered = EvcsRecovered {
            c_cyber: Some(m3.c_cyber),
            c_physical: Some(m3.c_physical),
            t3: Some(m3.t3),
        };
        if Some(m3.c_cyber) != self.auth.c_cyber {
            return Err(self.fail(AuthError::ChallengeMismatch));
        }
        let t2 = self.auth.t2.expect("t2 recorded in SentM2");
        if m3.t3 != hash(&t2.0) {
            return Err(self.fail(AuthError::HashChainMismatch));
        }
        let t4 = if self.faults.t4_ms != 0 {
            let t1 = self.auth.t1.expect("t1 recorded in SentM2");
            chain(skewed(t1, self.faults.t4_ms), 3)
        } else {
            hash(&m3.t3.0)
        };
        let payload = M4Payload {
            c_physical: m3.c_physical,
            t4,
        };
        let user_key = self.auth.user_key.expect("user key recorded in SentM2");
        let ct = pk_encrypt(rng, &user_key, &payload.encode()).map_err(|_| self.fail(AuthError::Malformed))?;
        self.auth.state = EvcsState::SentM4;
        Ok(Message::M4 { ciphertext: ct })
    }

    /// Step 5 (station side): pseudonym hash in the PKI set and a valid signed credential.
    pub fn verify_user_credential(&mut self, pid: &str, vc: &VerifiableCredential, pki: &Pki, now_ms: u64) -> bool {
        let ok = self.auth.state == EvcsState::SentM4
            && self.auth.pid.as_deref() == Some(pid)
            && pki.verify_user_credential(pid, vc, now_ms);
        if ok {
            self.auth.user_verified = true;
            self.auth.state = EvcsState::Authenticated;
        } else {
            self.fail(AuthError::CredentialRejected);
        }
        ok
    }

    pub fn credential_presentation(&self) -> Message {
        Message::StationCredential {
            credential: self.record.credential.clone(),
        }
    }

    /// Derives K_session and retires the pseudonym at the PKI.
    pub fn establish_session(&mut self, pki: &mut Pki) -> Result<SessionKey, AuthError> {
        if self.auth.state != EvcsState::Authenticated || !self.auth.user_verified {
            return Err(AuthError::NotAuthenticated);
        }
        let pid = self.auth.pid.clone().ok_or(AuthError::NotAuthenticated)?;
        let c_cyber = self.auth.c_cyber.ok_or(AuthError::NotAuthenticated)?;
        let c_physical = self.auth.recovered.c_physical.ok_or(AuthError::NotAuthenticated)?;
        if self.single_use_pids {
            pki.mark_pid_consumed(&pid)
                .map_err(|_| self.fail(AuthError::ReusedPid))?;
        }
        let key = derive_session_key(&c_cyber, &c_physical, &session_context(&pid, &self.record.evcs_id));
        self.auth.session_key = Some(key);
        Ok(key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::SimRng;
    use rand_core::SeedableRng;

    struct Fixture {
        pki: Pki,
        ledger: Ledger,
        ev: Ev,
        evcs: Evcs,
        rng: SimRng,
    }

    fn fixture() -> Fixture {
        let mut pki = Pki::new("ca", [3u8; 32]);
        let mut ledger = Ledger::new();
        let reg = pki.register_user("alice", 0, &mut ledger).unwrap();
        let pids = pki.issue_pseudo_batch(&reg.root_pid, 3).unwrap();
        let record = pki.register_evcs(0, &mut ledger).unwrap();
        ledger.seal_block();
        let mut ev = Ev::new(EndpointId::new("ev"), reg, pids);
        let evcs = Evcs::new(EndpointId::new("evcs"), record, DEFAULT_DELTA_FRESH_MS);
        ev.plug(&evcs.endpoint);
        Fixture {
            pki,
            ledger,
            ev,
            evcs,
            rng: SimRng::seed_from_u64(99),
        }
    }

    fn ct(m: Message) -> Vec<u8> {
        match m {
            Message::M2 { ciphertext } | Message::M3 { ciphertext } | Message::M4 { ciphertext } => ciphertext,
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn honest_run_yields_equal_keys() {
        let mut f = fixture();
        let now = 1_000_000;
        let pid = f.ev.next_pseudonym().unwrap();
        let m1 = f.ev.start_auth(&pid, now).unwrap();
        let m2 = ct(f.evcs.handle_m1(&m1, now, &f.pki, &mut f.rng).unwrap());
        let m3 = ct(f.ev.handle_m2(&m2, &f.pki, &mut f.rng).unwrap());
        let m4 = ct(f.evcs.handle_m3(&m3, &mut f.rng).unwrap());
        f.ev.handle_m4(&m4).unwrap();
        assert_eq!(f.ev.state(), EvState::Authenticated);
        let vc_user = f.ev.credential().clone();
        assert!(f.evcs.verify_user_credential(&pid.pid, &vc_user, &f.pki, now));
        let vc_evcs = f.evcs.record().credential.clone();
        let ca = f.pki.ca_key();
        assert!(f.ev.verify_station_credential(&vc_evcs, &f.ledger, &ca, "ca", now));
        let k_evcs = f.evcs.establish_session(&mut f.pki).unwrap();
        let k_ev = f.ev.establish_session().unwrap();
        assert_eq!(k_ev, k_evcs);

        f.ev.reset();
        assert_eq!(f.ev.start_auth(&pid, now + 10), Err(AuthError::PidConsumed));
    }

    #[test]
    fn unplugged_ev_cannot_start() {
        let mut f = fixture();
        f.ev.unplug();
        let pid = f.ev.next_pseudonym().unwrap();
        assert_eq!(f.ev.start_auth(&pid, 0), Err(AuthError::NotPlugged));
    }

    #[test]
    fn freshness_boundary() {
        let mut f = fixture();
        let now = 1_000_000;
        let pid = f.ev.next_pseudonym().unwrap();
        let m1 = MessageM1 {
            pid: pid.pid.clone(),
            t1_ms: now - DEFAULT_DELTA_FRESH_MS - 1,
        };
        assert_eq!(
            f.evcs.handle_m1(&m1, now, &f.pki, &mut f.rng),
            Err(AuthError::StaleTimestamp)
        );
        let m1 = MessageM1 {
            pid: pid.pid.clone(),
            t1_ms: now - DEFAULT_DELTA_FRESH_MS,
        };
        assert!(f.evcs.handle_m1(&m1, now, &f.pki, &mut f.rng).is_ok());
    }

    #[test]
    fn duplicate_m1_in_window_is_reused_pid() {
        let mut f = fixture();
        let pid = f.ev.next_pseudonym().unwrap();
        let m1 = f.ev.start_auth(&pid, 5_000).unwrap();
        f.evcs.handle_m1(&m1, 5_000, &f.pki, &mut f.rng).unwrap();
        assert_eq!(
            f.evcs.handle_m1(&m1, 6_000, &f.pki, &mut f.rng),
            Err(AuthError::ReusedPid)
        );
        assert_eq!(f.evcs.state(), EvcsState::Failed);
    }

    #[test]
    fn unknown_pid_is_rejected() {
        let mut f = fixture();
        let m1 = MessageM1 {
            pid: "not-a-pid".into(),
            t1_ms: 10,
        };
        assert_eq!(
            f.evcs.handle_m1(&m1, 10, &f.pki, &mut f.rng),
            Err(AuthError::UnknownPid)
        );
    }

    #[test]
    fn wrong_challenge_in_m3_is_rejected() {
        let mut f = fixture();
        let pid = f.ev.next_pseudonym().unwrap();
        let m1 = f.ev.start_auth(&pid, 10).unwrap();
        f.evcs.handle_m1(&m1, 10, &f.pki, &mut f.rng).unwrap();
        let forged = M3Payload {
            c_cyber: random_challenge(&mut f.rng),
            c_physical: random_challenge(&mut f.rng),
            t3: chain(10, 2),
        };
        let station_pk = f.evcs.record().keypair.public_key;
        let m3 = pk_encrypt(&mut f.rng, &station_pk, &forged.encode()).unwrap();
        assert_eq!(f.evcs.handle_m3(&m3, &mut f.rng), Err(AuthError::ChallengeMismatch));
    }

    #[test]
    fn establish_before_authentication_fails() {
        let mut f = fixture();
        assert_eq!(f.ev.establish_session(), Err(AuthError::NotAuthenticated));
        assert_eq!(f.evcs.establish_session(&mut f.pki), Err(AuthError::NotAuthenticated));
    }

    #[test]
    fn out_of_order_message_fails_the_session() {
        let mut f = fixture();
        assert!(matches!(
            f.ev.handle_m4(&[0u8; 100]),
            Err(AuthError::UnexpectedMessage("Idle"))
        ));
        assert_eq!(f.ev.state(), EvState::Failed);
    }
}
