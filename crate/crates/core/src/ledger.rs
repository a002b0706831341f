//! Consortium-ledger simulation: a single-sequencer, append-only, hash-linked chain.
//!
//! Entries are queued with [`Ledger::append_entry`] and become visible to
//! [`Ledger::query`] once [`Ledger::seal_block`] batches them into a block. Each
//! block commits to its height, its predecessor's hash and the canonical encoding
//! of its entries.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{DecodeError, Reader, Writer};
use crate::crypto::{hash, Digest32};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("malformed ledger entry: {0}")]
    MalformedEntry(&'static str),
    #[error("block at height {0} does not link or hash correctly")]
    BrokenChain(u64),
    #[error("block decoding failed: {0}")]
    Decode(#[from] DecodeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EntryKind {
    CredentialAnchor,
    TransactionRecord,
    DisputeRecord,
}

impl EntryKind {
    fn tag(self) -> u8 {
        match self {
            EntryKind::CredentialAnchor => 1,
            EntryKind::TransactionRecord => 2,
            EntryKind::DisputeRecord => 3,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, DecodeError> {
        match tag {
            1 => Ok(EntryKind::CredentialAnchor),
            2 => Ok(EntryKind::TransactionRecord),
            3 => Ok(EntryKind::DisputeRecord),
            other => Err(DecodeError::UnknownTag(other)),
        }
    }
}

/// On-ledger commitment to an issued credential.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CredentialAnchor {
    pub vc_digest: Digest32,
    pub subject: String,
    pub issuer: String,
    pub expiry_ms: u64,
    /// Digest of the credential this one replaces (station rotation).
    pub supersedes: Option<Digest32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransactionRecord {
    pub pid: String,
    pub evcs_id: String,
    pub slot: u64,
    pub energy_kwh: f64,
    pub amount: f64,
    pub finalized_at_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DisputeCause {
    MeterMismatch,
    BillRejected,
    PaymentDefault,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Resolution {
    SettledMinimum,
    Voided,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisputeRecord {
    pub pid: String,
    pub evcs_id: String,
    pub slot: u64,
    pub cause: DisputeCause,
    pub resolution: Resolution,
    pub settled_energy_kwh: f64,
    /// Energy payment after resolution (0 when voided).
    pub settled_amount: f64,
    pub fee_owed: f64,
    /// Hash of the canonical evidence snapshot (readings and bill).
    pub evidence: Digest32,
    pub recorded_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Anchor(CredentialAnchor),
    Transaction(TransactionRecord),
    Dispute(DisputeRecord),
}

impl Record {
    pub fn kind(&self) -> EntryKind {
        match self {
            Record::Anchor(_) => EntryKind::CredentialAnchor,
            Record::Transaction(_) => EntryKind::TransactionRecord,
            Record::Dispute(_) => EntryKind::DisputeRecord,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            Record::Anchor(a) => {
                w.raw(a.vc_digest.as_bytes())
                    .str(&a.subject)
                    .str(&a.issuer)
                    .u64(a.expiry_ms);
                match &a.supersedes {
                    None => w.u8(0),
                    Some(d) => w.u8(1).raw(d.as_bytes()),
                };
            }
            Record::Transaction(t) => {
                w.str(&t.pid)
                    .str(&t.evcs_id)
                    .u64(t.slot)
                    .f64(t.energy_kwh)
                    .f64(t.amount)
                    .u64(t.finalized_at_ms);
            }
            Record::Dispute(d) => {
                w.str(&d.pid)
                    .str(&d.evcs_id)
                    .u64(d.slot)
                    .u8(cause_tag(d.cause))
                    .u8(resolution_tag(d.resolution))
                    .f64(d.settled_energy_kwh)
                    .f64(d.settled_amount)
                    .f64(d.fee_owed)
                    .raw(d.evidence.as_bytes())
                    .u64(d.recorded_at_ms);
            }
        }
        w.finish()
    }

    pub fn decode(kind: EntryKind, payload: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(payload);
        let record = match kind {
            EntryKind::CredentialAnchor => {
                let vc_digest = Digest32(r.array()?);
                let subject = r.string()?;
                let issuer = r.string()?;
                let expiry_ms = r.u64()?;
                let supersedes = match r.u8()? {
                    0 => None,
                    1 => Some(Digest32(r.array()?)),
                    t => return Err(DecodeError::UnknownTag(t)),
                };
                Record::Anchor(CredentialAnchor {
                    vc_digest,
                    subject,
                    issuer,
                    expiry_ms,
                    supersedes,
                })
            }
            EntryKind::TransactionRecord => Record::Transaction(TransactionRecord {
                pid: r.string()?,
                evcs_id: r.string()?,
                slot: r.u64()?,
                energy_kwh: r.f64()?,
                amount: r.f64()?,
                finalized_at_ms: r.u64()?,
            }),
            EntryKind::DisputeRecord => Record::Dispute(DisputeRecord {
                pid: r.string()?,
                evcs_id: r.string()?,
                slot: r.u64()?,
                cause: cause_from_tag(r.u8()?)?,
                resolution: resolution_from_tag(r.u8()?)?,
                settled_energy_kwh: r.f64()?,
                settled_amount: r.f64()?,
                fee_owed: r.f64()?,
                evidence: Digest32(r.array()?),
                recorded_at_ms: r.u64()?,
            }),
        };
        r.finish()?;
        Ok(record)
    }

    fn pid(&self) -> Option<&str> {
        match self {
            Record::Anchor(_) => None,
            Record::Transaction(t) => Some(&t.pid),
            Record::Dispute(d) => Some(&d.pid),
        }
    }

    fn evcs_id(&self) -> Option<&str> {
        match self {
            Record::Anchor(a) => Some(&a.subject),
            Record::Transaction(t) => Some(&t.evcs_id),
            Record::Dispute(d) => Some(&d.evcs_id),
        }
    }

    fn slot(&self) -> Option<u64> {
        match self {
            Record::Anchor(_) => None,
            Record::Transaction(t) => Some(t.slot),
            Record::Dispute(d) => Some(d.slot),
        }
    }
}

fn cause_tag(c: DisputeCause) -> u8 {
    match c {
        DisputeCause::MeterMismatch => 1,
        DisputeCause::BillRejected => 2,
        DisputeCause::PaymentDefault => 3,
    }
}

fn cause_from_tag(t: u8) -> Result<DisputeCause, DecodeError> {
    match t {
        1 => Ok(DisputeCause::MeterMismatch),
        2 => Ok(DisputeCause::BillRejected),
        3 => Ok(DisputeCause::PaymentDefault),
        other => Err(DecodeError::UnknownTag(other)),
    }
}

fn resolution_tag(r: Resolution) -> u8 {
    match r {
        Resolution::SettledMinimum => 1,
        Resolution::Voided => 2,
    }
}

fn resolution_from_tag(t: u8) -> Result<Resolution, DecodeError> {
    match t {
        1 => Ok(Resolution::SettledMinimum),
        2 => Ok(Resolution::Voided),
        other => Err(DecodeError::UnknownTag(other)),
    }
}

mod hex_bytes {
    use alloc::string::String;
    use alloc::vec::Vec;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = <String as Deserialize>::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub kind: EntryKind,
    #[serde(with = "hex_bytes")]
    pub payload: Vec<u8>,
    pub timestamp_ms: u64,
    pub author: String,
}

impl LedgerEntry {
    pub fn new(record: &Record, timestamp_ms: u64, author: &str) -> Self {
        LedgerEntry {
            kind: record.kind(),
            payload: record.encode(),
            timestamp_ms,
            author: author.into(),
        }
    }

    pub fn record(&self) -> Result<Record, DecodeError> {
        Record::decode(self.kind, &self.payload)
    }

    /// The payload decodes as its declared kind and re-encodes byte-identically.
    pub fn is_canonical(&self) -> bool {
        matches!(self.record(), Ok(rec) if rec.encode() == self.payload)
    }

    fn write(&self, w: &mut Writer) {
        w.u8(self.kind.tag())
            .bytes(&self.payload)
            .u64(self.timestamp_ms)
            .str(&self.author);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(LedgerEntry {
            kind: EntryKind::from_tag(r.u8()?)?,
            payload: r.bytes()?.to_vec(),
            timestamp_ms: r.u64()?,
            author: r.string()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub height: u64,
    pub prev_hash: Digest32,
    pub entries: Vec<LedgerEntry>,
    pub block_hash: Digest32,
}

/// `u32 count ‖ entry*`, each entry `kind ‖ payload ‖ timestamp ‖ author`.
pub fn canonical_entries(entries: &[LedgerEntry]) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(entries.len() as u32);
    for e in entries {
        e.write(&mut w);
    }
    w.finish()
}

pub fn compute_block_hash(height: u64, prev_hash: &Digest32, entries: &[LedgerEntry]) -> Digest32 {
    let mut w = Writer::new();
    w.u64(height).raw(prev_hash.as_bytes()).raw(&canonical_entries(entries));
    hash(&w.finish())
}

impl Block {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.height)
            .raw(self.prev_hash.as_bytes())
            .raw(&canonical_entries(&self.entries))
            .raw(self.block_hash.as_bytes());
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let height = r.u64()?;
        let prev_hash = Digest32(r.array()?);
        let count = r.u32()? as usize;
        // Each entry is at least 17 bytes; refuse counts the input cannot hold.
        if count > r.remaining() / 17 {
            return Err(DecodeError::BadLength);
        }
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            entries.push(LedgerEntry::read(&mut r)?);
        }
        let block_hash = Digest32(r.array()?);
        r.finish()?;
        Ok(Block {
            height,
            prev_hash,
            entries,
            block_hash,
        })
    }

    pub fn hash_is_valid(&self) -> bool {
        compute_block_hash(self.height, &self.prev_hash, &self.entries) == self.block_hash
    }
}

/// Checks heights, links and hashes from genesis.
pub fn verify_blocks(blocks: &[Block]) -> bool {
    let mut prev = Digest32::ZERO;
    for (i, b) in blocks.iter().enumerate() {
        if b.height != i as u64 || b.prev_hash != prev || !b.hash_is_valid() {
            return false;
        }
        prev = b.block_hash;
    }
    true
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Filter {
    pub kind: Option<EntryKind>,
    pub pid: Option<String>,
    pub evcs_id: Option<String>,
    pub slots: Option<RangeInclusive<u64>>,
    pub vc_digest: Option<Digest32>,
}

impl Filter {
    pub fn kind(kind: EntryKind) -> Self {
        Filter {
            kind: Some(kind),
            ..Filter::default()
        }
    }

    pub fn with_pid(mut self, pid: &str) -> Self {
        self.pid = Some(pid.into());
        self
    }

    pub fn with_evcs(mut self, evcs_id: &str) -> Self {
        self.evcs_id = Some(evcs_id.into());
        self
    }

    pub fn with_slots(mut self, slots: RangeInclusive<u64>) -> Self {
        self.slots = Some(slots);
        self
    }

    pub fn with_vc_digest(mut self, digest: Digest32) -> Self {
        self.vc_digest = Some(digest);
        self
    }

    fn matches(&self, entry: &LedgerEntry) -> bool {
        if self.kind.is_some_and(|k| k != entry.kind) {
            return false;
        }
        let needs_record =
            self.pid.is_some() || self.evcs_id.is_some() || self.slots.is_some() || self.vc_digest.is_some();
        if !needs_record {
            return true;
        }
        let Ok(rec) = entry.record() else {
            return false;
        };
        if let Some(pid) = &self.pid {
            if rec.pid() != Some(pid.as_str()) {
                return false;
            }
        }
        if let Some(id) = &self.evcs_id {
            if rec.evcs_id() != Some(id.as_str()) {
                return false;
            }
        }
        if let Some(range) = &self.slots {
            match rec.slot() {
                Some(s) if range.contains(&s) => {}
                _ => return false,
            }
        }
        if let Some(d) = &self.vc_digest {
            match &rec {
                Record::Anchor(a) if a.vc_digest == *d => {}
                _ => return false,
            }
        }
        true
    }
}

#[derive(Debug, Clone, Default)]
pub struct Ledger {
    blocks: Vec<Block>,
    pending: Vec<LedgerEntry>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds a ledger from exported blocks, rejecting any broken link or hash.
    pub fn from_blocks(blocks: Vec<Block>) -> Result<Self, LedgerError> {
        let mut prev = Digest32::ZERO;
        for (i, b) in blocks.iter().enumerate() {
            if b.height != i as u64 || b.prev_hash != prev || !b.hash_is_valid() {
                return Err(LedgerError::BrokenChain(b.height));
            }
            prev = b.block_hash;
        }
        Ok(Ledger {
            blocks,
            pending: Vec::new(),
        })
    }

    /// Queues an entry for the next block; returns its position in the queue.
    pub fn append_entry(&mut self, entry: LedgerEntry) -> Result<usize, LedgerError> {
        if entry.author.is_empty() {
            return Err(LedgerError::MalformedEntry("empty author"));
        }
        if !entry.is_canonical() {
            return Err(LedgerError::MalformedEntry("payload is not canonical"));
        }
        self.pending.push(entry);
        Ok(self.pending.len() - 1)
    }

    pub fn append_record(&mut self, record: &Record, timestamp_ms: u64, author: &str) -> Result<usize, LedgerError> {
        self.append_entry(LedgerEntry::new(record, timestamp_ms, author))
    }

    pub fn seal_block(&mut self) -> &Block {
        let height = self.blocks.len() as u64;
        let prev_hash = self.blocks.last().map_or(Digest32::ZERO, |b| b.block_hash);
        let entries = core::mem::take(&mut self.pending);
        let block_hash = compute_block_hash(height, &prev_hash, &entries);
        self.blocks.push(Block {
            height,
            prev_hash,
            entries,
            block_hash,
        });
        self.blocks.last().expect("just pushed")
    }

    pub fn verify_chain(&self) -> bool {
        verify_blocks(&self.blocks)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn pending(&self) -> &[LedgerEntry] {
        &self.pending
    }

    pub fn height(&self) -> usize {
        self.blocks.len()
    }

    pub fn head_hash(&self) -> Digest32 {
        self.blocks.last().map_or(Digest32::ZERO, |b| b.block_hash)
    }

    /// Sealed entries matching `filter`, in chain order.
    pub fn query(&self, filter: &Filter) -> Vec<&LedgerEntry> {
        self.blocks
            .iter()
            .flat_map(|b| b.entries.iter())
            .filter(|e| filter.matches(e))
            .collect()
    }

    pub fn records(&self, filter: &Filter) -> Vec<Record> {
        self.query(filter).into_iter().filter_map(|e| e.record().ok()).collect()
    }

    pub fn transactions(&self) -> Vec<TransactionRecord> {
        self.records(&Filter::kind(EntryKind::TransactionRecord))
            .into_iter()
            .filter_map(|r| match r {
                Record::Transaction(t) => Some(t),
                _ => None,
            })
            .collect()
    }

    pub fn disputes(&self) -> Vec<DisputeRecord> {
        self.records(&Filter::kind(EntryKind::DisputeRecord))
            .into_iter()
            .filter_map(|r| match r {
                Record::Dispute(d) => Some(d),
                _ => None,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::vec;

    fn tx(pid: &str, slot: u64) -> Record {
        Record::Transaction(TransactionRecord {
            pid: pid.into(),
            evcs_id: "evcs-1".into(),
            slot,
            energy_kwh: 20.0,
            amount: 4.5,
            finalized_at_ms: 1_000 * slot,
        })
    }

    #[test]
    fn entries_keep_submission_order() {
        let mut l = Ledger::new();
        for i in 0..3 {
            l.append_record(&tx(&format!("p{i}"), i), i, "contract").unwrap();
        }
        let block = l.seal_block().clone();
        assert_eq!(block.height, 0);
        assert_eq!(block.prev_hash, Digest32::ZERO);
        let pids: Vec<_> = l.transactions().into_iter().map(|t| t.pid).collect();
        assert_eq!(pids, vec!["p0", "p1", "p2"]);
    }

    #[test]
    fn non_canonical_payload_is_malformed() {
        let mut l = Ledger::new();
        let mut e = LedgerEntry::new(&tx("p", 1), 5, "contract");
        e.payload.push(0);
        assert!(matches!(l.append_entry(e), Err(LedgerError::MalformedEntry(_))));

        let mut e = LedgerEntry::new(&tx("p", 1), 5, "contract");
        e.kind = EntryKind::DisputeRecord;
        assert!(matches!(l.append_entry(e), Err(LedgerError::MalformedEntry(_))));
    }

    #[test]
    fn pending_entries_are_not_queryable() {
        let mut l = Ledger::new();
        l.append_record(&tx("p", 1), 5, "contract").unwrap();
        assert!(l.query(&Filter::default()).is_empty());
        l.seal_block();
        assert_eq!(l.query(&Filter::default().with_pid("p")).len(), 1);
        assert!(l.query(&Filter::default().with_pid("q")).is_empty());
    }

    #[test]
    fn empty_blocks_and_heights() {
        let mut l = Ledger::new();
        for h in 0..5u64 {
            assert_eq!(l.seal_block().height, h);
        }
        assert!(l.verify_chain());
        assert!(l.blocks().iter().all(|b| b.entries.is_empty()));
    }

    #[test]
    fn swapped_blocks_break_the_chain() {
        let mut l = Ledger::new();
        for i in 0..4 {
            l.append_record(&tx("p", i), i, "contract").unwrap();
            l.seal_block();
        }
        let mut blocks = l.blocks().to_vec();
        blocks.swap(1, 2);
        assert!(!verify_blocks(&blocks));
        assert!(matches!(Ledger::from_blocks(blocks), Err(LedgerError::BrokenChain(_))));
    }

    #[test]
    fn block_bytes_roundtrip() {
        let mut l = Ledger::new();
        l.append_record(&tx("p", 1), 1, "contract").unwrap();
        let b = l.seal_block().clone();
        assert_eq!(Block::decode(&b.encode()).unwrap(), b);
    }
}
