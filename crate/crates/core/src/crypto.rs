//! Deterministic cryptographic primitives.
//!
//! Everything here is reproducible from explicit seeds or an explicit RNG
//! handle; nothing reads ambient entropy.
//!
//! * hashing: SHA-256 ([`hash`]), also used for timestamp hash chains
//! * asymmetric encryption: X25519 key agreement + ChaCha20-Poly1305 payload
//! * signatures: Ed25519 (certificate authority only)
//! * symmetric session encryption: ChaCha20-Poly1305 under a [`SessionKey`]

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signer as _, Verifier as _};
use rand_core::{CryptoRng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// The simulation's seeded generator.
pub type SimRng = rand_chacha::ChaCha20Rng;

pub const CHALLENGE_LEN: usize = 32;
/// Largest plaintext accepted by [`pk_encrypt`].
pub const MAX_PK_PLAINTEXT: usize = 1024;
pub const SESSION_KEY_TAG: &[u8] = b"pnc/session-key/v1";

const ECIES_KEY_TAG: &[u8] = b"pnc/ecies-key/v1";
const RECIPIENT_TAG: &[u8] = b"pnc/recipient/v1";
const HEADER_TAG: &[u8] = b"pnc/header/v1";
const SYM_KEY_ID_TAG: &[u8] = b"pnc/sym-key-id/v1";
const KEYPAIR_TAG: &[u8] = b"pnc/keypair/v1";
const TAG_LEN: usize = 16;
const KEY_ID_LEN: usize = 8;
const CHECK_LEN: usize = 4;
const PK_HEADER_LEN: usize = 32 + KEY_ID_LEN + CHECK_LEN;
const SYM_HEADER_LEN: usize = KEY_ID_LEN + CHECK_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("ciphertext was produced for a different key")]
    WrongKey,
    #[error("ciphertext failed authentication")]
    Tampered,
    #[error("plaintext of {len} bytes exceeds the {max}-byte limit")]
    Oversize { len: usize, max: usize },
    #[error("nonce already used in this session")]
    NonceReuse,
}

/// A 32-byte SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest32(pub [u8; 32]);

impl Digest32 {
    pub const ZERO: Digest32 = Digest32([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).ok()?;
        Some(Digest32(out))
    }
}

impl fmt::Debug for Digest32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest32({})", self.to_hex())
    }
}

impl fmt::Display for Digest32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest32 {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest32 {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = <String as Deserialize>::deserialize(deserializer)?;
        Digest32::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex digits"))
    }
}

pub fn hash(input: &[u8]) -> Digest32 {
    Digest32(Sha256::digest(input).into())
}

/// Hash of the concatenation of `parts`.
pub fn hash_parts(parts: &[&[u8]]) -> Digest32 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest32(h.finalize().into())
}

/// Timestamps are hashed as 8-byte big-endian milliseconds.
pub fn encode_timestamp(ms: u64) -> [u8; 8] {
    ms.to_be_bytes()
}

pub fn hash_timestamp(ms: u64) -> Digest32 {
    hash(&encode_timestamp(ms))
}

/// X25519 public key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublicKey(pub [u8; 32]);

impl PublicKey {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn fingerprint(&self) -> Digest32 {
        hash(&self.0)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", hex::encode(self.0))
    }
}

/// X25519 private scalar. Never serialized and never formatted.
#[derive(Clone, PartialEq, Eq)]
pub struct PrivateKey([u8; 32]);

impl PrivateKey {
    pub fn expose_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PrivateKey(..)")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyPair {
    pub public_key: PublicKey,
    pub private_key: PrivateKey,
}

impl KeyPair {
    fn from_secret(secret: x25519_dalek::StaticSecret) -> Self {
        let public = x25519_dalek::PublicKey::from(&secret);
        KeyPair {
            public_key: PublicKey(public.to_bytes()),
            private_key: PrivateKey(secret.to_bytes()),
        }
    }

    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        generate_keypair(&seed)
    }
}

/// Same seed, same pair.
pub fn generate_keypair(seed: &[u8; 32]) -> KeyPair {
    let material = hash_parts(&[KEYPAIR_TAG, seed]);
    KeyPair::from_secret(x25519_dalek::StaticSecret::from(material.0))
}

fn recipient_id(public: &PublicKey) -> [u8; KEY_ID_LEN] {
    let d = hash_parts(&[RECIPIENT_TAG, &public.0]);
    let mut out = [0u8; KEY_ID_LEN];
    out.copy_from_slice(&d.0[..KEY_ID_LEN]);
    out
}

// Key-independent checksum over a ciphertext header. It lets the receiver tell a
// corrupted header (Tampered) apart from a well-formed header addressed to
// someone else (WrongKey).
fn header_check(header: &[u8]) -> [u8; CHECK_LEN] {
    let d = hash_parts(&[HEADER_TAG, header]);
    let mut out = [0u8; CHECK_LEN];
    out.copy_from_slice(&d.0[..CHECK_LEN]);
    out
}

fn aead(key: &[u8; 32]) -> ChaCha20Poly1305 {
    ChaCha20Poly1305::new(Key::from_slice(key))
}

/// Hybrid public-key encryption.
///
/// Layout: `ephemeral_pk(32) ‖ recipient_id(8) ‖ header_check(4) ‖ aead(plaintext)`.
pub fn pk_encrypt<R: RngCore + CryptoRng>(
    rng: &mut R,
    recipient: &PublicKey,
    plaintext: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    if plaintext.len() > MAX_PK_PLAINTEXT {
        return Err(CryptoError::Oversize {
            len: plaintext.len(),
            max: MAX_PK_PLAINTEXT,
        });
    }
    let mut eph_seed = [0u8; 32];
    rng.fill_bytes(&mut eph_seed);
    let eph = x25519_dalek::StaticSecret::from(eph_seed);
    let eph_pk = x25519_dalek::PublicKey::from(&eph).to_bytes();
    let shared = eph.diffie_hellman(&x25519_dalek::PublicKey::from(recipient.0));
    let key = hash_parts(&[ECIES_KEY_TAG, shared.as_bytes(), &eph_pk, &recipient.0]);

    let mut out = Vec::with_capacity(PK_HEADER_LEN + plaintext.len() + TAG_LEN);
    out.extend_from_slice(&eph_pk);
    out.extend_from_slice(&recipient_id(recipient));
    let check = header_check(&out);
    out.extend_from_slice(&check);
    let body = aead(&key.0)
        .encrypt(
            Nonce::from_slice(&[0u8; 12]),
            Payload {
                msg: plaintext,
                aad: &out,
            },
        )
        .map_err(|_| CryptoError::Tampered)?;
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn pk_decrypt(keypair: &KeyPair, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if ciphertext.len() < PK_HEADER_LEN + TAG_LEN {
        return Err(CryptoError::Tampered);
    }
    let (header, body) = ciphertext.split_at(PK_HEADER_LEN);
    let (addressed, check) = header.split_at(32 + KEY_ID_LEN);
    if header_check(addressed) != check {
        return Err(CryptoError::Tampered);
    }
    if addressed[32..] != recipient_id(&keypair.public_key) {
        return Err(CryptoError::WrongKey);
    }
    let mut eph_pk = [0u8; 32];
    eph_pk.copy_from_slice(&addressed[..32]);
    let secret = x25519_dalek::StaticSecret::from(keypair.private_key.0);
    let shared = secret.diffie_hellman(&x25519_dalek::PublicKey::from(eph_pk));
    let key = hash_parts(&[ECIES_KEY_TAG, shared.as_bytes(), &eph_pk, &keypair.public_key.0]);
    aead(&key.0)
        .decrypt(Nonce::from_slice(&[0u8; 12]), Payload { msg: body, aad: header })
        .map_err(|_| CryptoError::Tampered)
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Challenge(pub [u8; CHALLENGE_LEN]);

impl Challenge {
    pub fn as_bytes(&self) -> &[u8; CHALLENGE_LEN] {
        &self.0
    }
}

impl fmt::Debug for Challenge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Challenge({})", hex::encode(self.0))
    }
}

pub fn random_challenge<R: RngCore + CryptoRng>(rng: &mut R) -> Challenge {
    let mut c = [0u8; CHALLENGE_LEN];
    rng.fill_bytes(&mut c);
    Challenge(c)
}

/// Symmetric key: V2G session keys and transport (TLS-stand-in) keys.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct SessionKey(pub [u8; 32]);

impl SessionKey {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for SessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SessionKey(..)")
    }
}

/// `hash(SESSION_KEY_TAG ‖ c_cyber ‖ c_physical ‖ context)`.
pub fn derive_session_key(c_cyber: &Challenge, c_physical: &Challenge, context: &[u8]) -> SessionKey {
    SessionKey(hash_parts(&[SESSION_KEY_TAG, &c_cyber.0, &c_physical.0, context]).0)
}

fn sym_key_id(key: &SessionKey) -> [u8; KEY_ID_LEN] {
    let d = hash_parts(&[SYM_KEY_ID_TAG, &key.0]);
    let mut out = [0u8; KEY_ID_LEN];
    out.copy_from_slice(&d.0[..KEY_ID_LEN]);
    out
}

pub type SymNonce = [u8; 12];

/// Stateless AEAD under a session key. Layout: `key_id(8) ‖ header_check(4) ‖ aead`.
pub fn sym_encrypt(key: &SessionKey, plaintext: &[u8], nonce: &SymNonce) -> Vec<u8> {
    let mut out = Vec::with_capacity(SYM_HEADER_LEN + plaintext.len() + TAG_LEN);
    out.extend_from_slice(&sym_key_id(key));
    let check = header_check(&out);
    out.extend_from_slice(&check);
    let body = aead(&key.0)
        .encrypt(
            Nonce::from_slice(nonce),
            Payload {
                msg: plaintext,
                aad: &out,
            },
        )
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
    out.extend_from_slice(&body);
    out
}

pub fn sym_decrypt(key: &SessionKey, ciphertext: &[u8], nonce: &SymNonce) -> Result<Vec<u8>, CryptoError> {
    if ciphertext.len() < SYM_HEADER_LEN + TAG_LEN {
        return Err(CryptoError::Tampered);
    }
    let (header, body) = ciphertext.split_at(SYM_HEADER_LEN);
    let (key_id, check) = header.split_at(KEY_ID_LEN);
    if header_check(key_id) != check {
        return Err(CryptoError::Tampered);
    }
    if key_id != sym_key_id(key) {
        return Err(CryptoError::WrongKey);
    }
    aead(&key.0)
        .decrypt(Nonce::from_slice(nonce), Payload { msg: body, aad: header })
        .map_err(|_| CryptoError::Tampered)
}

/// One direction-agnostic session under a [`SessionKey`] that refuses nonce reuse,
/// both when sealing and when opening.
#[derive(Clone, Debug)]
pub struct SessionCipher {
    key: SessionKey,
    sealed: BTreeSet<SymNonce>,
    opened: BTreeSet<SymNonce>,
}

impl SessionCipher {
    pub fn new(key: SessionKey) -> Self {
        Self {
            key,
            sealed: BTreeSet::new(),
            opened: BTreeSet::new(),
        }
    }

    pub fn seal(&mut self, nonce: &SymNonce, plaintext: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if !self.sealed.insert(*nonce) {
            return Err(CryptoError::NonceReuse);
        }
        Ok(sym_encrypt(&self.key, plaintext, nonce))
    }

    pub fn open(&mut self, nonce: &SymNonce, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if self.opened.contains(nonce) {
            return Err(CryptoError::NonceReuse);
        }
        let pt = sym_decrypt(&self.key, ciphertext, nonce)?;
        self.opened.insert(*nonce);
        Ok(pt)
    }
}

/// Nonce for the `counter`-th frame sent by `role` (0 = EV, 1 = station).
pub fn directional_nonce(role: u8, counter: u64) -> SymNonce {
    let mut n = [0u8; 12];
    n[0] = role;
    n[4..].copy_from_slice(&counter.to_be_bytes());
    n
}

/// Ed25519 verifying key of the certificate authority.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct VerifyingKey(pub [u8; 32]);

impl fmt::Debug for VerifyingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VerifyingKey({})", hex::encode(self.0))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; 64]);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({})", hex::encode(self.0))
    }
}

pub struct SigningKey {
    inner: ed25519_dalek::SigningKey,
}

impl SigningKey {
    pub fn from_seed(seed: &[u8; 32]) -> Self {
        Self {
            inner: ed25519_dalek::SigningKey::from_bytes(seed),
        }
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        VerifyingKey(self.inner.verifying_key().to_bytes())
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        Signature(self.inner.sign(message).to_bytes())
    }

    pub fn expose_seed(&self) -> [u8; 32] {
        self.inner.to_bytes()
    }
}

impl fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SigningKey(..)")
    }
}

pub fn verify_signature(key: &VerifyingKey, message: &[u8], signature: &Signature) -> bool {
    let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(&key.0) else {
        return false;
    };
    vk.verify(message, &ed25519_dalek::Signature::from_bytes(&signature.0))
        .is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_core::SeedableRng;

    fn rng(seed: u64) -> SimRng {
        SimRng::seed_from_u64(seed)
    }

    #[test]
    fn empty_input_digest_matches_published_vector() {
        assert_eq!(
            hash(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            hash(b"abc").to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn pk_roundtrip_and_wrong_key() {
        let mut r = rng(1);
        let a = generate_keypair(&[1u8; 32]);
        let b = generate_keypair(&[2u8; 32]);
        let ct = pk_encrypt(&mut r, &a.public_key, b"abc").unwrap();
        assert_eq!(pk_decrypt(&a, &ct).unwrap(), b"abc");
        assert_eq!(pk_decrypt(&b, &ct), Err(CryptoError::WrongKey));
    }

    #[test]
    fn pk_oversize_is_rejected() {
        let mut r = rng(2);
        let a = generate_keypair(&[1u8; 32]);
        assert!(pk_encrypt(&mut r, &a.public_key, &[0u8; MAX_PK_PLAINTEXT]).is_ok());
        assert_eq!(
            pk_encrypt(&mut r, &a.public_key, &[0u8; MAX_PK_PLAINTEXT + 1]),
            Err(CryptoError::Oversize {
                len: MAX_PK_PLAINTEXT + 1,
                max: MAX_PK_PLAINTEXT
            })
        );
    }

    #[test]
    fn pk_truncated_ciphertext_is_tampered() {
        let mut r = rng(3);
        let a = generate_keypair(&[1u8; 32]);
        let ct = pk_encrypt(&mut r, &a.public_key, b"").unwrap();
        assert_eq!(pk_decrypt(&a, &ct[..ct.len() - 1]), Err(CryptoError::Tampered));
        assert_eq!(pk_decrypt(&a, &[]), Err(CryptoError::Tampered));
    }

    #[test]
    fn session_key_is_sensitive_to_every_input() {
        let c1 = Challenge([1u8; 32]);
        let c2 = Challenge([2u8; 32]);
        let base = derive_session_key(&c1, &c2, b"ctx");
        assert_eq!(base, derive_session_key(&c1, &c2, b"ctx"));
        let mut c1b = c1;
        c1b.0[31] ^= 1;
        assert_ne!(base, derive_session_key(&c1b, &c2, b"ctx"));
        assert_ne!(base, derive_session_key(&c2, &c1, b"ctx"));
        assert_ne!(base, derive_session_key(&c1, &c2, b"ctX"));
    }

    #[test]
    fn session_cipher_rejects_nonce_reuse() {
        let key = SessionKey([9u8; 32]);
        let mut tx = SessionCipher::new(key);
        let mut rx = SessionCipher::new(key);
        let n = directional_nonce(0, 1);
        let ct = tx.seal(&n, b"meter").unwrap();
        assert_eq!(tx.seal(&n, b"other"), Err(CryptoError::NonceReuse));
        assert_eq!(rx.open(&n, &ct).unwrap(), b"meter");
        assert_eq!(rx.open(&n, &ct), Err(CryptoError::NonceReuse));
    }

    #[test]
    fn sym_wrong_key_and_wrong_nonce() {
        let n = directional_nonce(1, 7);
        let ct = sym_encrypt(&SessionKey([1u8; 32]), b"x", &n);
        assert_eq!(sym_decrypt(&SessionKey([2u8; 32]), &ct, &n), Err(CryptoError::WrongKey));
        assert_eq!(
            sym_decrypt(&SessionKey([1u8; 32]), &ct, &directional_nonce(1, 8)),
            Err(CryptoError::Tampered)
        );
    }

    #[test]
    fn signatures_verify_only_for_the_signed_message() {
        let sk = SigningKey::from_seed(&[5u8; 32]);
        let sig = sk.sign(b"credential");
        assert!(verify_signature(&sk.verifying_key(), b"credential", &sig));
        assert!(!verify_signature(&sk.verifying_key(), b"credentiaL", &sig));
        let mut bad = sig;
        bad.0[0] ^= 0x80;
        assert!(!verify_signature(&sk.verifying_key(), b"credential", &bad));
        let other = SigningKey::from_seed(&[6u8; 32]).verifying_key();
        assert!(!verify_signature(&other, b"credential", &sig));
    }

    #[test]
    fn challenges_are_reproducible_from_the_seed() {
        let a: Vec<_> = (0..4)
            .map({
                let mut r = rng(11);
                move |_| random_challenge(&mut r)
            })
            .collect();
        let b: Vec<_> = (0..4)
            .map({
                let mut r = rng(11);
                move |_| random_challenge(&mut r)
            })
            .collect();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }
}
