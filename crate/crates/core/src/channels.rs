//! Simulated transports and the wire codec.
//!
//! Two channels connect an EV and a station:
//!
//! * `Wireless`: reachable by anyone in range. Frames travel under a transport
//!   key from an *unauthenticated* handshake, so an installed [`Interceptor`]
//!   terminates both sides and sees every frame body. It may read, drop, modify,
//!   hold back, or inject frames.
//! * `CanBus`: the charging cable. Deliverable only between plugged endpoints,
//!   delivered verbatim, and never shown to the interceptor.
//!
//! Frame layout: one kind byte followed by the kind's fields. Variable fields use
//! 16-bit big-endian length prefixes; timestamps are 8-byte big-endian ms.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;

use rand_core::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{DecodeError, Reader, Writer};
use crate::crypto::{
    directional_nonce, hash_parts, sym_decrypt, sym_encrypt, Challenge, Digest32, KeyPair, SessionKey, SimRng, SymNonce,
};
use crate::pki::VerifiableCredential;

/// Fixed request constant carried by M1.
pub const REQ_AUTH_EV: [u8; 4] = *b"RQAE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("frame truncated")]
    Truncated,
    #[error("unknown frame kind {0:#04x}")]
    UnknownKind(u8),
    #[error("field length does not match the layout")]
    BadLength,
    #[error("request tag is not Req(Auth,EV)")]
    BadTag,
}

impl From<DecodeError> for CodecError {
    fn from(e: DecodeError) -> Self {
        match e {
            DecodeError::Truncated => CodecError::Truncated,
            DecodeError::UnknownTag(t) => CodecError::UnknownKind(t),
            _ => CodecError::BadLength,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageM1 {
    pub pid: String,
    pub t1_ms: u64,
}

/// Every frame exchanged between the actors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    M1(MessageM1),
    /// `Enc_{K_user}(C_cyber ‖ ID_EVCS ‖ T2)`
    M2 {
        ciphertext: Vec<u8>,
    },
    /// `Enc_{K_EVCS}(C'_cyber ‖ C_physical ‖ T3)`
    M3 {
        ciphertext: Vec<u8>,
    },
    /// `Enc_{K_user}(C'_physical ‖ T4)`
    M4 {
        ciphertext: Vec<u8>,
    },
    UserCredential {
        pid: String,
        credential: VerifiableCredential,
    },
    StationCredential {
        credential: VerifiableCredential,
    },
    /// Transaction-phase payload under the V2G session key.
    Secure {
        nonce: SymNonce,
        ciphertext: Vec<u8>,
    },
}

impl Message {
    pub fn kind_byte(&self) -> u8 {
        match self {
            Message::M1(_) => 0x01,
            Message::M2 { .. } => 0x02,
            Message::M3 { .. } => 0x03,
            Message::M4 { .. } => 0x04,
            Message::UserCredential { .. } => 0x05,
            Message::StationCredential { .. } => 0x06,
            Message::Secure { .. } => 0x07,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::M1(_) => "M1",
            Message::M2 { .. } => "M2",
            Message::M3 { .. } => "M3",
            Message::M4 { .. } => "M4",
            Message::UserCredential { .. } => "UserCredential",
            Message::StationCredential { .. } => "StationCredential",
            Message::Secure { .. } => "Secure",
        }
    }
}

pub fn encode_message(msg: &Message) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8(msg.kind_byte());
    match msg {
        Message::M1(m1) => {
            w.short_str(&m1.pid).raw(&REQ_AUTH_EV).u64(m1.t1_ms);
        }
        Message::M2 { ciphertext } | Message::M3 { ciphertext } | Message::M4 { ciphertext } => {
            w.short_bytes(ciphertext);
        }
        Message::UserCredential { pid, credential } => {
            w.short_str(pid).short_bytes(&credential.encode());
        }
        Message::StationCredential { credential } => {
            w.short_bytes(&credential.encode());
        }
        Message::Secure { nonce, ciphertext } => {
            w.raw(nonce).short_bytes(ciphertext);
        }
    }
    w.finish()
}

pub fn decode_message(bytes: &[u8]) -> Result<Message, CodecError> {
    let mut r = Reader::new(bytes);
    let kind = r.u8()?;
    let msg = match kind {
        0x01 => {
            let pid = r.short_string()?;
            if r.array::<4>()? != REQ_AUTH_EV {
                return Err(CodecError::BadTag);
            }
            Message::M1(MessageM1 { pid, t1_ms: r.u64()? })
        }
        0x02 => Message::M2 {
            ciphertext: r.short_bytes()?.to_vec(),
        },
        0x03 => Message::M3 {
            ciphertext: r.short_bytes()?.to_vec(),
        },
        0x04 => Message::M4 {
            ciphertext: r.short_bytes()?.to_vec(),
        },
        0x05 => {
            let pid = r.short_string()?;
            let credential = VerifiableCredential::decode(r.short_bytes()?)?;
            Message::UserCredential { pid, credential }
        }
        0x06 => Message::StationCredential {
            credential: VerifiableCredential::decode(r.short_bytes()?)?,
        },
        0x07 => Message::Secure {
            nonce: r.array()?,
            ciphertext: r.short_bytes()?.to_vec(),
        },
        other => return Err(CodecError::UnknownKind(other)),
    };
    r.finish().map_err(|_| CodecError::BadLength)?;
    Ok(msg)
}

/// Decrypted body of M2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct M2Payload {
    pub c_cyber: Challenge,
    pub evcs_id: String,
    pub t2: Digest32,
}

/// Decrypted body of M3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct M3Payload {
    pub c_cyber: Challenge,
    pub c_physical: Challenge,
    pub t3: Digest32,
}

/// Decrypted body of M4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct M4Payload {
    pub c_physical: Challenge,
    pub t4: Digest32,
}

impl M2Payload {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(&self.c_cyber.0).short_str(&self.evcs_id).raw(&self.t2.0);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let c_cyber = Challenge(r.array()?);
        let evcs_id = r.short_string()?;
        let t2 = Digest32(r.array()?);
        r.finish().map_err(|_| CodecError::BadLength)?;
        Ok(M2Payload { c_cyber, evcs_id, t2 })
    }
}

impl M3Payload {
    pub const LEN: usize = 96;

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(&self.c_cyber.0).raw(&self.c_physical.0).raw(&self.t3.0);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() != Self::LEN {
            return Err(CodecError::BadLength);
        }
        let mut r = Reader::new(bytes);
        Ok(M3Payload {
            c_cyber: Challenge(r.array()?),
            c_physical: Challenge(r.array()?),
            t3: Digest32(r.array()?),
        })
    }
}

impl M4Payload {
    pub const LEN: usize = 64;

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(&self.c_physical.0).raw(&self.t4.0);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() != Self::LEN {
            return Err(CodecError::BadLength);
        }
        let mut r = Reader::new(bytes);
        Ok(M4Payload {
            c_physical: Challenge(r.array()?),
            t4: Digest32(r.array()?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Channel {
    Wireless,
    CanBus,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EndpointId(pub String);

impl EndpointId {
    pub fn new(s: &str) -> Self {
        EndpointId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub channel: Channel,
    pub sender: EndpointId,
    pub receiver: EndpointId,
    /// Encoded [`Message`] as seen by the endpoints.
    pub body: Vec<u8>,
    /// Wire form under the sender's transport key; empty on CanBus.
    pub transport_ct: Vec<u8>,
}

impl Envelope {
    pub fn new(channel: Channel, sender: &EndpointId, receiver: &EndpointId, msg: &Message) -> Self {
        Envelope {
            channel,
            sender: sender.clone(),
            receiver: receiver.clone(),
            body: encode_message(msg),
            transport_ct: Vec::new(),
        }
    }

    pub fn message(&self) -> Result<Message, CodecError> {
        decode_message(&self.body)
    }
}

/// One line of the frame-capture log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureRecord {
    pub tick: u64,
    pub channel: Channel,
    pub sender: String,
    pub receiver: String,
    /// `"sent"`, `"delivered"`, `"dropped"`, `"injected"` or `"aborted"`.
    pub event: String,
    pub kind: String,
    pub bytes_hex: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChannelError {
    #[error("endpoints are not physically connected")]
    NotConnected,
    #[error("endpoint {0:?} is not reachable on the wireless channel")]
    Unreachable(EndpointId),
    #[error("no transport session between the endpoints")]
    NoTransport,
    #[error("transport decryption failed")]
    TransportFailure,
}

/// Wireless adversary. Installing one means the transport handshake is
/// terminated by the adversary on both sides.
pub trait Interceptor {
    /// Called once per terminated handshake with the keys it holds toward each side.
    fn on_transport_keys(&mut self, _a: &EndpointId, _b: &EndpointId, _key_a: SessionKey, _key_b: SessionKey) {}

    /// Receives every wireless envelope in plaintext; returns the envelopes to
    /// deliver (none drops, several injects).
    fn intercept(&mut self, envelope: Envelope, tick: u64) -> Vec<Envelope>;

    /// Releases envelopes held back earlier (reordering).
    fn release(&mut self, _tick: u64) -> Vec<Envelope> {
        Vec::new()
    }
}

/// Keys both ends hold after a transport handshake.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransportKeys {
    pub at_a: SessionKey,
    pub at_b: SessionKey,
}

fn link(a: &EndpointId, b: &EndpointId) -> (EndpointId, EndpointId) {
    if a <= b {
        (a.clone(), b.clone())
    } else {
        (b.clone(), a.clone())
    }
}

struct TransportLink {
    /// Key each endpoint holds for this link.
    keys: BTreeMap<EndpointId, SessionKey>,
    counters: BTreeMap<EndpointId, u64>,
}

/// Channel fabric owned by the simulation loop.
pub struct Network {
    tick: u64,
    rng: SimRng,
    wireless: BTreeSet<EndpointId>,
    plugs: BTreeSet<(EndpointId, EndpointId)>,
    inbox: BTreeMap<EndpointId, VecDeque<Envelope>>,
    transports: BTreeMap<(EndpointId, EndpointId), TransportLink>,
    interceptor: Option<Box<dyn Interceptor>>,
    capture_enabled: bool,
    capture: Vec<CaptureRecord>,
}

impl core::fmt::Debug for Network {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Network")
            .field("tick", &self.tick)
            .field("wireless", &self.wireless)
            .field("plugs", &self.plugs)
            .field("interceptor", &self.interceptor.is_some())
            .finish()
    }
}

fn ephemeral_agreement(rng: &mut SimRng, a: &EndpointId, b: &EndpointId) -> SessionKey {
    let ka = KeyPair::random(rng);
    let kb = KeyPair::random(rng);
    let shared = x25519_dalek::StaticSecret::from(*ka.private_key.expose_bytes())
        .diffie_hellman(&x25519_dalek::PublicKey::from(kb.public_key.0));
    SessionKey(hash_parts(&[b"pnc/transport/v1", shared.as_bytes(), a.0.as_bytes(), b.0.as_bytes()]).0)
}

impl Network {
    pub fn new(seed: [u8; 32]) -> Self {
        Network {
            tick: 0,
            rng: SimRng::from_seed(seed),
            wireless: BTreeSet::new(),
            plugs: BTreeSet::new(),
            inbox: BTreeMap::new(),
            transports: BTreeMap::new(),
            interceptor: None,
            capture_enabled: false,
            capture: Vec::new(),
        }
    }

    pub fn set_tick(&mut self, tick: u64) {
        self.tick = tick;
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn set_capture(&mut self, enabled: bool) {
        self.capture_enabled = enabled;
    }

    pub fn capture_log(&self) -> &[CaptureRecord] {
        &self.capture
    }

    /// Notes a protocol abort between two endpoints; `kind` carries the error code.
    pub fn record_abort(&mut self, sender: &EndpointId, receiver: &EndpointId, code: &str) {
        if !self.capture_enabled {
            return;
        }
        self.capture.push(CaptureRecord {
            tick: self.tick,
            channel: Channel::Wireless,
            sender: sender.0.clone(),
            receiver: receiver.0.clone(),
            event: "aborted".into(),
            kind: code.into(),
            bytes_hex: String::new(),
        });
    }

    pub fn take_capture_log(&mut self) -> Vec<CaptureRecord> {
        core::mem::take(&mut self.capture)
    }

    pub fn join_wireless(&mut self, endpoint: &EndpointId) {
        self.wireless.insert(endpoint.clone());
        self.inbox.entry(endpoint.clone()).or_default();
    }

    pub fn install_interceptor(&mut self, interceptor: Box<dyn Interceptor>) {
        self.interceptor = Some(interceptor);
    }

    pub fn remove_interceptor(&mut self) -> Option<Box<dyn Interceptor>> {
        self.interceptor.take()
    }

    pub fn plug(&mut self, a: &EndpointId, b: &EndpointId) {
        self.plugs.insert(link(a, b));
        self.inbox.entry(a.clone()).or_default();
        self.inbox.entry(b.clone()).or_default();
    }

    pub fn unplug(&mut self, a: &EndpointId, b: &EndpointId) {
        self.plugs.remove(&link(a, b));
    }

    pub fn is_plugged(&self, a: &EndpointId, b: &EndpointId) -> bool {
        self.plugs.contains(&link(a, b))
    }

    /// Unauthenticated ephemeral key agreement standing in for TLS. With an
    /// interceptor installed, each side agrees a key with the adversary instead.
    pub fn transport_handshake(&mut self, a: &EndpointId, b: &EndpointId) -> Result<TransportKeys, ChannelError> {
        for e in [a, b] {
            if !self.wireless.contains(e) {
                return Err(ChannelError::Unreachable(e.clone()));
            }
        }
        let keys = if let Some(mitm) = self.interceptor.as_mut() {
            let at_a = ephemeral_agreement(&mut self.rng, a, &EndpointId::new("mitm"));
            let at_b = ephemeral_agreement(&mut self.rng, &EndpointId::new("mitm"), b);
            mitm.on_transport_keys(a, b, at_a, at_b);
            TransportKeys { at_a, at_b }
        } else {
            let k = ephemeral_agreement(&mut self.rng, a, b);
            TransportKeys { at_a: k, at_b: k }
        };
        let mut link_keys = BTreeMap::new();
        link_keys.insert(a.clone(), keys.at_a);
        link_keys.insert(b.clone(), keys.at_b);
        self.transports.insert(
            link(a, b),
            TransportLink {
                keys: link_keys,
                counters: BTreeMap::new(),
            },
        );
        Ok(keys)
    }

    fn record(&mut self, env: &Envelope, event: &str) {
        if !self.capture_enabled {
            return;
        }
        let kind = decode_message(&env.body).map(|m| m.name()).unwrap_or("Undecodable");
        self.capture.push(CaptureRecord {
            tick: self.tick,
            channel: env.channel,
            sender: env.sender.0.clone(),
            receiver: env.receiver.0.clone(),
            event: event.into(),
            kind: kind.into(),
            bytes_hex: hex::encode(&env.body),
        });
    }

    // `role` keeps nonces distinct between the parties sharing one key.
    fn seal_with(&mut self, env: &mut Envelope, key_owner: &EndpointId, role: u8) -> Result<(), ChannelError> {
        let link_id = link(&env.sender, &env.receiver);
        let t = self.transports.get_mut(&link_id).ok_or(ChannelError::NoTransport)?;
        let key = *t.keys.get(key_owner).ok_or(ChannelError::NoTransport)?;
        let counter = t.counters.entry(EndpointId(alloc::format!("{role}"))).or_insert(0);
        *counter += 1;
        let nonce = directional_nonce(role, *counter);
        let mut wire = nonce.to_vec();
        wire.extend_from_slice(&sym_encrypt(&key, &env.body, &nonce));
        env.transport_ct = wire;
        Ok(())
    }

    fn open_transport(&self, env: &Envelope) -> Result<Vec<u8>, ChannelError> {
        let t = self
            .transports
            .get(&link(&env.sender, &env.receiver))
            .ok_or(ChannelError::NoTransport)?;
        let key = t.keys.get(&env.receiver).ok_or(ChannelError::NoTransport)?;
        if env.transport_ct.len() < 12 {
            return Err(ChannelError::TransportFailure);
        }
        let mut nonce = [0u8; 12];
        nonce.copy_from_slice(&env.transport_ct[..12]);
        sym_decrypt(key, &env.transport_ct[12..], &nonce).map_err(|_| ChannelError::TransportFailure)
    }

    fn enqueue(&mut self, env: Envelope) {
        self.record(&env, "delivered");
        self.inbox.entry(env.receiver.clone()).or_default().push_back(env);
    }

    /// Sends an envelope. Wireless frames pass through the interceptor (if any);
    /// CanBus frames require a plug and bypass it.
    pub fn send(&mut self, mut envelope: Envelope) -> Result<(), ChannelError> {
        match envelope.channel {
            Channel::CanBus => {
                if !self.is_plugged(&envelope.sender, &envelope.receiver) {
                    return Err(ChannelError::NotConnected);
                }
                envelope.transport_ct.clear();
                self.record(&envelope, "sent");
                self.enqueue(envelope);
                Ok(())
            }
            Channel::Wireless => {
                if !self.wireless.contains(&envelope.receiver) {
                    return Err(ChannelError::Unreachable(envelope.receiver.clone()));
                }
                let sender = envelope.sender.clone();
                let role = u8::from(sender != link(&envelope.sender, &envelope.receiver).0);
                self.seal_with(&mut envelope, &sender, role)?;
                self.record(&envelope, "sent");
                let tick = self.tick;
                let Some(mitm) = self.interceptor.as_mut() else {
                    self.enqueue(envelope);
                    return Ok(());
                };
                let original = envelope.clone();
                let out = mitm.intercept(envelope, tick);
                if out.is_empty() {
                    self.record(&original, "dropped");
                }
                for env in out {
                    self.forward_from_interceptor(env)?;
                }
                Ok(())
            }
        }
    }

    // The interceptor re-encrypts toward the receiver with the key it shares with it.
    fn forward_from_interceptor(&mut self, mut env: Envelope) -> Result<(), ChannelError> {
        if env.channel != Channel::Wireless {
            return Err(ChannelError::NotConnected);
        }
        if !self.transports.contains_key(&link(&env.sender, &env.receiver)) {
            self.record(&env, "dropped");
            return Ok(());
        }
        let receiver = env.receiver.clone();
        self.seal_with(&mut env, &receiver, 2)?;
        self.enqueue(env);
        Ok(())
    }

    /// Delivers envelopes the interceptor held back.
    pub fn release_held(&mut self) -> Result<(), ChannelError> {
        let tick = self.tick;
        let held = match self.interceptor.as_mut() {
            Some(m) => m.release(tick),
            None => Vec::new(),
        };
        for env in held {
            self.forward_from_interceptor(env)?;
        }
        Ok(())
    }

    /// Next envelope for `endpoint`, with the wireless body recovered from the
    /// transport ciphertext under the receiver's key.
    pub fn recv(&mut self, endpoint: &EndpointId) -> Option<Result<Envelope, ChannelError>> {
        let env = self.inbox.get_mut(endpoint)?.pop_front()?;
        if env.channel == Channel::CanBus {
            return Some(Ok(env));
        }
        Some(self.open_transport(&env).map(|body| Envelope { body, ..env }))
    }

    pub fn pending_for(&self, endpoint: &EndpointId) -> usize {
        self.inbox.get(endpoint).map_or(0, VecDeque::len)
    }

    /// Drops everything queued for `endpoint`.
    pub fn clear_inbox(&mut self, endpoint: &EndpointId) {
        if let Some(q) = self.inbox.get_mut(endpoint) {
            q.clear();
        }
    }
}
