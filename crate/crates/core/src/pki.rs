//! Certificate authority: registration, single-use pseudonyms, station credentials
//! and their rotation.
//!
//! The registry is the only place that knows which pseudonym belongs to which
//! user. Nothing returned to an EV or station carries that mapping; the parent
//! link of a [`PseudoIdentity`] stays in the private [`PseudoRecord`].

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_core::{RngCore, SeedableRng};
use thiserror::Error;

use crate::canonical::{DecodeError, Reader, Writer};
use crate::crypto::{
    generate_keypair, hash, hash_parts, verify_signature, Digest32, KeyPair, PublicKey, Signature, SigningKey, SimRng,
    VerifyingKey,
};
use crate::ledger::{CredentialAnchor, EntryKind, Filter, Ledger, LedgerError, Record};

/// Default credential lifetime: 24 simulated hours.
pub const DEFAULT_CREDENTIAL_TTL_MS: u64 = 24 * 60 * 60 * 1000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PkiError {
    #[error("identity already registered")]
    DuplicateIdentity,
    #[error("unknown user pseudonym")]
    UnknownUser,
    #[error("pseudonym batch size must be at least 1")]
    EmptyBatch,
    #[error("unknown station")]
    UnknownStation,
    #[error("station identifier belongs to a rotated-out epoch")]
    StaleEpoch,
    #[error("unknown pseudo-identity")]
    UnknownPid,
    #[error("pseudo-identity already used for a session")]
    ConsumedPid,
    #[error("pseudo-identity already consumed")]
    AlreadyConsumed,
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifiableCredential {
    pub subject: String,
    pub issuer: String,
    pub payload_hash: Digest32,
    pub signature: Signature,
    pub expiry_ms: u64,
}

impl VerifiableCredential {
    fn signed_bytes(subject: &str, issuer: &str, payload_hash: &Digest32, expiry_ms: u64) -> Vec<u8> {
        let mut w = Writer::new();
        w.str(subject).str(issuer).raw(payload_hash.as_bytes()).u64(expiry_ms);
        w.finish()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(&Self::signed_bytes(
            &self.subject,
            &self.issuer,
            &self.payload_hash,
            self.expiry_ms,
        ))
        .raw(&self.signature.0);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let subject = r.string()?;
        let issuer = r.string()?;
        let payload_hash = Digest32(r.array()?);
        let expiry_ms = r.u64()?;
        let signature = Signature(r.array()?);
        r.finish()?;
        Ok(VerifiableCredential {
            subject,
            issuer,
            payload_hash,
            signature,
            expiry_ms,
        })
    }

    /// Identifier used by ledger anchors.
    pub fn digest(&self) -> Digest32 {
        hash(&self.encode())
    }

    pub fn signature_valid(&self, ca_key: &VerifyingKey) -> bool {
        let msg = Self::signed_bytes(&self.subject, &self.issuer, &self.payload_hash, self.expiry_ms);
        verify_signature(ca_key, &msg, &self.signature)
    }
}

/// What a registered user receives. `root_pid` stays with the user and the CA.
#[derive(Debug, Clone)]
pub struct UserRegistration {
    pub root_pid: String,
    pub wallet_key: KeyPair,
    pub credential: VerifiableCredential,
}

#[derive(Debug, Clone)]
pub struct UserRecord {
    pub real_id: String,
    pub root_pid: String,
    pub wallet_key: KeyPair,
    pub credential: VerifiableCredential,
    next_index: u64,
}

/// A single-session pseudonym as held by its EV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoIdentity {
    pub pid: String,
    pub keypair: KeyPair,
    pub consumed: bool,
}

#[derive(Debug, Clone)]
struct PseudoRecord {
    keypair: KeyPair,
    #[allow(dead_code)]
    parent: String,
    consumed: bool,
}

#[derive(Debug, Clone)]
pub struct EvcsRecord {
    pub evcs_id: String,
    pub keypair: KeyPair,
    pub credential: VerifiableCredential,
    pub epoch: u64,
}

#[derive(Debug, Clone)]
struct StationEntry {
    station_no: u64,
    epoch: u64,
    public_key: PublicKey,
    credential_digest: Digest32,
    current: bool,
}

#[derive(Debug)]
pub struct Pki {
    ca_id: String,
    signer: SigningKey,
    salt: [u8; 32],
    rng: SimRng,
    credential_ttl_ms: u64,
    users: BTreeMap<String, UserRecord>,
    root_pids: BTreeMap<String, String>,
    pseudonyms: BTreeMap<String, PseudoRecord>,
    stations: BTreeMap<String, StationEntry>,
    next_station_no: u64,
}

/// Hex rendering of `hash(root_pid ‖ index ‖ salt)`.
fn derive_pid(root_pid: &str, index: u64, salt: &[u8; 32]) -> String {
    hash_parts(&[root_pid.as_bytes(), &index.to_be_bytes(), salt]).to_hex()
}

/// Anchor the credential and return nothing else; every issuance goes through here.
fn anchor(
    ledger: &mut Ledger,
    vc: &VerifiableCredential,
    supersedes: Option<Digest32>,
    now_ms: u64,
    author: &str,
) -> Result<(), LedgerError> {
    let rec = Record::Anchor(CredentialAnchor {
        vc_digest: vc.digest(),
        subject: vc.subject.clone(),
        issuer: vc.issuer.clone(),
        expiry_ms: vc.expiry_ms,
        supersedes,
    });
    ledger.append_record(&rec, now_ms, author).map(|_| ())
}

impl Pki {
    pub fn new(ca_id: &str, seed: [u8; 32]) -> Self {
        let mut rng = SimRng::from_seed(seed);
        let mut signer_seed = [0u8; 32];
        rng.fill_bytes(&mut signer_seed);
        let mut salt = [0u8; 32];
        rng.fill_bytes(&mut salt);
        Pki {
            ca_id: ca_id.into(),
            signer: SigningKey::from_seed(&signer_seed),
            salt,
            rng,
            credential_ttl_ms: DEFAULT_CREDENTIAL_TTL_MS,
            users: BTreeMap::new(),
            root_pids: BTreeMap::new(),
            pseudonyms: BTreeMap::new(),
            stations: BTreeMap::new(),
            next_station_no: 0,
        }
    }

    pub fn with_credential_ttl(mut self, ttl_ms: u64) -> Self {
        self.credential_ttl_ms = ttl_ms;
        self
    }

    pub fn ca_id(&self) -> &str {
        &self.ca_id
    }

    pub fn ca_key(&self) -> VerifyingKey {
        self.signer.verifying_key()
    }

    /// The CA signing seed, exposed only so leak scans can search for it.
    pub fn signing_seed_for_audit(&self) -> [u8; 32] {
        self.signer.expose_seed()
    }

    fn issue(&self, subject: &str, payload_hash: Digest32, now_ms: u64) -> VerifiableCredential {
        let expiry_ms = now_ms.saturating_add(self.credential_ttl_ms);
        let msg = VerifiableCredential::signed_bytes(subject, &self.ca_id, &payload_hash, expiry_ms);
        VerifiableCredential {
            subject: subject.into(),
            issuer: self.ca_id.clone(),
            payload_hash,
            signature: self.signer.sign(&msg),
            expiry_ms,
        }
    }

    /// Registers a verified identifier and anchors its credential.
    ///
    /// The credential is bound to the wallet public key: its subject is the
    /// wallet fingerprint, so the anchor never names the root pseudonym.
    pub fn register_user(
        &mut self,
        real_id: &str,
        now_ms: u64,
        ledger: &mut Ledger,
    ) -> Result<UserRegistration, PkiError> {
        if self.users.contains_key(real_id) {
            return Err(PkiError::DuplicateIdentity);
        }
        let mut nonce = [0u8; 32];
        self.rng.fill_bytes(&mut nonce);
        let root_pid = hash_parts(&[b"pnc/root-pid", &self.salt, &nonce]).to_hex();
        let wallet_key = KeyPair::random(&mut self.rng);
        let wallet_fp = wallet_key.public_key.fingerprint();
        let credential = self.issue(&wallet_fp.to_hex(), wallet_fp, now_ms);
        anchor(ledger, &credential, None, now_ms, &self.ca_id)?;

        self.root_pids.insert(root_pid.clone(), real_id.into());
        self.users.insert(
            real_id.into(),
            UserRecord {
                real_id: real_id.into(),
                root_pid: root_pid.clone(),
                wallet_key: wallet_key.clone(),
                credential: credential.clone(),
                next_index: 0,
            },
        );
        Ok(UserRegistration {
            root_pid,
            wallet_key,
            credential,
        })
    }

    pub fn issue_pseudo_batch(&mut self, root_pid: &str, n: usize) -> Result<Vec<PseudoIdentity>, PkiError> {
        if n == 0 {
            return Err(PkiError::EmptyBatch);
        }
        let real_id = self.root_pids.get(root_pid).ok_or(PkiError::UnknownUser)?;
        let user = self.users.get_mut(real_id).expect("root pid maps to a user");
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let pid = derive_pid(root_pid, user.next_index, &self.salt);
            user.next_index += 1;
            let key_seed = hash_parts(&[b"pnc/pid-key", &self.salt, pid.as_bytes()]);
            let keypair = generate_keypair(&key_seed.0);
            self.pseudonyms.insert(
                pid.clone(),
                PseudoRecord {
                    keypair: keypair.clone(),
                    parent: root_pid.into(),
                    consumed: false,
                },
            );
            out.push(PseudoIdentity {
                pid,
                keypair,
                consumed: false,
            });
        }
        Ok(out)
    }

    pub fn register_evcs(&mut self, now_ms: u64, ledger: &mut Ledger) -> Result<EvcsRecord, PkiError> {
        let station_no = self.next_station_no;
        self.next_station_no += 1;
        self.issue_station(station_no, 0, None, now_ms, ledger)
    }

    /// New identifier, keypair and credential for the station; the old credential
    /// is marked superseded on the ledger.
    pub fn rotate_evcs_credentials(
        &mut self,
        evcs_id: &str,
        now_ms: u64,
        ledger: &mut Ledger,
    ) -> Result<EvcsRecord, PkiError> {
        let entry = self.stations.get_mut(evcs_id).ok_or(PkiError::UnknownStation)?;
        if !entry.current {
            return Err(PkiError::StaleEpoch);
        }
        entry.current = false;
        let (station_no, epoch, old) = (entry.station_no, entry.epoch, entry.credential_digest);
        self.issue_station(station_no, epoch + 1, Some(old), now_ms, ledger)
    }

    fn issue_station(
        &mut self,
        station_no: u64,
        epoch: u64,
        supersedes: Option<Digest32>,
        now_ms: u64,
        ledger: &mut Ledger,
    ) -> Result<EvcsRecord, PkiError> {
        let tag = hash_parts(&[
            b"pnc/evcs-id",
            &self.salt,
            &station_no.to_be_bytes(),
            &epoch.to_be_bytes(),
        ]);
        let evcs_id = format!("evcs-{}", &tag.to_hex()[..16]);
        let keypair = KeyPair::random(&mut self.rng);
        let credential = self.issue(&evcs_id, keypair.public_key.fingerprint(), now_ms);
        anchor(ledger, &credential, supersedes, now_ms, &self.ca_id)?;
        self.stations.insert(
            evcs_id.clone(),
            StationEntry {
                station_no,
                epoch,
                public_key: keypair.public_key,
                credential_digest: credential.digest(),
                current: true,
            },
        );
        Ok(EvcsRecord {
            evcs_id,
            keypair,
            credential,
            epoch,
        })
    }

    pub fn lookup_user_pubkey(&self, pid: &str) -> Result<PublicKey, PkiError> {
        let rec = self.pseudonyms.get(pid).ok_or(PkiError::UnknownPid)?;
        if rec.consumed {
            return Err(PkiError::ConsumedPid);
        }
        Ok(rec.keypair.public_key)
    }

    pub fn lookup_evcs_pubkey(&self, evcs_id: &str) -> Result<PublicKey, PkiError> {
        let entry = self.stations.get(evcs_id).ok_or(PkiError::UnknownStation)?;
        if !entry.current {
            return Err(PkiError::StaleEpoch);
        }
        Ok(entry.public_key)
    }

    /// `hash(pid)` for every issued, unconsumed pseudonym.
    pub fn pid_hash_set(&self) -> BTreeSet<Digest32> {
        self.pseudonyms
            .iter()
            .filter(|(_, r)| !r.consumed)
            .map(|(pid, _)| hash(pid.as_bytes()))
            .collect()
    }

    /// Pseudonym hash is in the set, the credential is ours, signed, and unexpired.
    pub fn verify_user_credential(&self, pid: &str, vc: &VerifiableCredential, now_ms: u64) -> bool {
        self.pid_hash_set().contains(&hash(pid.as_bytes()))
            && vc.issuer == self.ca_id
            && vc.signature_valid(&self.ca_key())
            && now_ms < vc.expiry_ms
    }

    pub fn mark_pid_consumed(&mut self, pid: &str) -> Result<(), PkiError> {
        let rec = self.pseudonyms.get_mut(pid).ok_or(PkiError::UnknownPid)?;
        if rec.consumed {
            return Err(PkiError::AlreadyConsumed);
        }
        rec.consumed = true;
        Ok(())
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    /// Private keys held by the registry (pseudonym, wallet, station), for leak scans.
    pub fn private_keys_for_audit(&self) -> Vec<[u8; 32]> {
        let mut keys: Vec<[u8; 32]> = self
            .pseudonyms
            .values()
            .map(|r| *r.keypair.private_key.expose_bytes())
            .collect();
        keys.extend(self.users.values().map(|u| *u.wallet_key.private_key.expose_bytes()));
        keys
    }
}

/// Ledger-side check of a station credential, as done by an EV: CA signature,
/// expiry, exactly one anchor, and no later anchor superseding it.
pub fn verify_evcs_credential(
    ledger: &Ledger,
    ca_key: &VerifyingKey,
    ca_id: &str,
    vc: &VerifiableCredential,
    now_ms: u64,
) -> bool {
    if vc.issuer != ca_id || !vc.signature_valid(ca_key) || now_ms >= vc.expiry_ms {
        return false;
    }
    let digest = vc.digest();
    let anchors = ledger.query(&Filter::kind(EntryKind::CredentialAnchor).with_vc_digest(digest));
    if anchors.len() != 1 {
        return false;
    }
    let superseded = ledger
        .records(&Filter::kind(EntryKind::CredentialAnchor))
        .iter()
        .any(|r| matches!(r, Record::Anchor(a) if a.supersedes == Some(digest)));
    !superseded
}
