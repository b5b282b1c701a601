//! Transactions, blocks and the append-only hash chain.
//!
//! A transaction's `tx_id` is the digest of its canonical form without the
//! `tx_id` field; its signature covers the canonical form without either the
//! `tx_id` or the `signature` field. A block digest covers index, predecessor
//! digest, sealed time and the full transactions. Blocks are linked by
//! `prev_digest`, starting from the all-zero sentinel.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use crate::canonical::{Canonical, CanonicalError, Fields, Value};
use crate::consensus::ConsensusResult;
use crate::digest::{compute_digest, Digest};
use crate::membership::{KeyPair, MemberId, MembershipRegistry, Signature};

pub type StateMap = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("cannot seal an empty block")]
    EmptyBlock,
    #[error("transaction {0} has not been accepted by consensus")]
    UnverifiedTransaction(Digest),
    #[error("transaction is missing its {0}")]
    Unsigned(&'static str),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: CanonicalError,
    },
    #[error("ledger ends mid-line (line {line} has no terminating newline)")]
    Truncated { line: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub tx_id: Option<Digest>,
    pub initiator: MemberId,
    pub responder: MemberId,
    pub asset_id: String,
    pub contract_id: String,
    pub logical_time: u64,
    /// Informational only; never used by consensus or validation.
    pub wall_time: Option<String>,
    pub channel_id: Option<String>,
    pub state: StateMap,
    pub signature: Option<Signature>,
}

impl Transaction {
    pub fn new(
        initiator: MemberId,
        responder: MemberId,
        asset_id: impl Into<String>,
        contract_id: impl Into<String>,
        logical_time: u64,
    ) -> Self {
        Transaction {
            tx_id: None,
            initiator,
            responder,
            asset_id: asset_id.into(),
            contract_id: contract_id.into(),
            logical_time,
            wall_time: None,
            channel_id: None,
            state: StateMap::new(),
            signature: None,
        }
    }

    pub fn with_state(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.state.insert(key.into(), value.into());
        self
    }

    pub fn with_channel(mut self, channel_id: impl Into<String>) -> Self {
        self.channel_id = Some(channel_id.into());
        self
    }

    fn body(&self) -> crate::canonical::ObjectBuilder {
        Value::object()
            .str("asset_id", &self.asset_id)
            .opt_str("channel_id", self.channel_id.as_deref())
            .str("contract_id", &self.contract_id)
            .str("initiator", self.initiator.to_string())
            .int("logical_time", self.logical_time)
            .str("responder", self.responder.to_string())
            .field("state", Value::string_map(&self.state))
            .opt_str("wall_time", self.wall_time.as_deref())
    }

    /// Bytes covered by the initiator's signature.
    pub fn signing_bytes(&self) -> Vec<u8> {
        self.body().build().to_bytes()
    }

    /// Bytes hashed into the transaction id.
    pub fn id_bytes(&self) -> Vec<u8> {
        let sig = self.signature.map(|s| s.to_hex());
        self.body().opt_str("signature", sig.as_deref()).build().to_bytes()
    }

    pub fn compute_tx_id(&self) -> Digest {
        compute_digest(&self.id_bytes())
    }

    /// Sign as the initiator and fix the transaction id.
    pub fn sign(mut self, keys: &KeyPair) -> Self {
        self.tx_id = None;
        self.signature = Some(keys.sign(&self.signing_bytes()));
        self.tx_id = Some(self.compute_tx_id());
        self
    }

    /// The transaction id, which is only meaningful once signed.
    pub fn id(&self) -> Digest {
        self.tx_id.unwrap_or_else(|| self.compute_tx_id())
    }

    pub fn id_is_valid(&self) -> bool {
        self.tx_id == Some(self.compute_tx_id())
    }

    pub fn signature_is_valid(&self, registry: &MembershipRegistry) -> bool {
        match &self.signature {
            Some(sig) => registry
                .verify_signature(&self.signing_bytes(), sig, &self.initiator)
                .unwrap_or(false),
            None => false,
        }
    }

    pub fn sort_key(&self) -> (u64, Digest) {
        (self.logical_time, self.id())
    }

    pub fn is_private(&self) -> bool {
        self.channel_id.is_some()
    }
}

impl Canonical for Transaction {
    fn to_value(&self) -> Value {
        let sig = self.signature.map(|s| s.to_hex());
        let id = self.tx_id.map(|d| d.to_hex());
        self.body()
            .opt_str("signature", sig.as_deref())
            .opt_str("tx_id", id.as_deref())
            .build()
    }

    fn from_value(value: Value) -> Result<Self, CanonicalError> {
        let mut f = Fields::new(value, "transaction")?;
        let asset_id = f.str("asset_id")?;
        let channel_id = f.opt_str("channel_id")?;
        let contract_id = f.str("contract_id")?;
        let initiator = parse_member(&mut f, "initiator")?;
        let logical_time = f.u64("logical_time")?;
        let responder = parse_member(&mut f, "responder")?;
        let signature = match f.opt_str("signature")? {
            Some(s) => Some(
                Signature::from_hex(&s)
                    .ok_or_else(|| f.invalid("signature", "expected 128 lowercase hex chars"))?,
            ),
            None => None,
        };
        let state = f.string_map("state")?;
        let tx_id = match f.opt_str("tx_id")? {
            Some(s) => Some(
                Digest::from_hex(&s).map_err(|e| f.invalid("tx_id", e.to_string()))?,
            ),
            None => None,
        };
        let wall_time = f.opt_str("wall_time")?;
        f.finish()?;
        Ok(Transaction {
            tx_id,
            initiator,
            responder,
            asset_id,
            contract_id,
            logical_time,
            wall_time,
            channel_id,
            state,
            signature,
        })
    }
}

fn parse_member(f: &mut Fields, field: &str) -> Result<MemberId, CanonicalError> {
    let s = f.str(field)?;
    s.parse().map_err(|_| f.invalid(field, "expected member id hex"))
}

fn parse_digest(f: &mut Fields, field: &str) -> Result<Digest, CanonicalError> {
    let s = f.str(field)?;
    Digest::from_hex(&s).map_err(|e| f.invalid(field, e.to_string()))
}

/// A transaction waiting to be sealed, with the consensus outcome that
/// admitted it to the pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingTransaction {
    pub transaction: Transaction,
    pub consensus: Option<ConsensusResult>,
}

impl PendingTransaction {
    pub fn is_accepted(&self) -> bool {
        matches!(&self.consensus, Some(c) if c.accepted && c.tx_id == self.transaction.id())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub index: u64,
    pub prev_digest: Digest,
    pub transactions: Vec<Transaction>,
    pub sealed_time: u64,
    pub block_digest: Digest,
}

impl Block {
    fn content_value(&self) -> crate::canonical::ObjectBuilder {
        Value::object()
            .int("index", self.index)
            .str("prev_digest", self.prev_digest.to_hex())
            .int("sealed_time", self.sealed_time)
            .field(
                "transactions",
                Value::List(self.transactions.iter().map(Canonical::to_value).collect()),
            )
    }

    pub fn compute_digest(&self) -> Digest {
        compute_digest(&self.content_value().build().to_bytes())
    }

    pub fn digest_is_valid(&self) -> bool {
        self.block_digest == self.compute_digest()
    }
}

impl Canonical for Block {
    fn to_value(&self) -> Value {
        self.content_value()
            .str("block_digest", self.block_digest.to_hex())
            .build()
    }

    fn from_value(value: Value) -> Result<Self, CanonicalError> {
        let mut f = Fields::new(value, "block")?;
        let block_digest = parse_digest(&mut f, "block_digest")?;
        let index = f.u64("index")?;
        let prev_digest = parse_digest(&mut f, "prev_digest")?;
        let sealed_time = f.u64("sealed_time")?;
        let transactions = f
            .list("transactions")?
            .into_iter()
            .map(Transaction::from_value)
            .collect::<Result<Vec<_>, _>>()?;
        f.finish()?;
        Ok(Block {
            index,
            prev_digest,
            transactions,
            sealed_time,
            block_digest,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FailureKind {
    BrokenLink,
    BadDigest,
    BadSignature,
    NonMonotonicTime,
    BadOrdering,
}

impl FailureKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FailureKind::BrokenLink => "BrokenLink",
            FailureKind::BadDigest => "BadDigest",
            FailureKind::BadSignature => "BadSignature",
            FailureKind::NonMonotonicTime => "NonMonotonicTime",
            FailureKind::BadOrdering => "BadOrdering",
        }
    }
}

impl fmt::Display for FailureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    pub valid: bool,
    pub first_failure_index: Option<u64>,
    pub failure_kind: Option<FailureKind>,
}

impl ValidationReport {
    pub fn ok() -> Self {
        ValidationReport {
            valid: true,
            first_failure_index: None,
            failure_kind: None,
        }
    }

    pub fn failed(index: u64, kind: FailureKind) -> Self {
        ValidationReport {
            valid: false,
            first_failure_index: Some(index),
            failure_kind: Some(kind),
        }
    }
}

impl Canonical for ValidationReport {
    fn to_value(&self) -> Value {
        let mut b = Value::object().str("valid", if self.valid { "true" } else { "false" });
        if let Some(i) = self.first_failure_index {
            b = b.int("first_failure_index", i);
        }
        if let Some(k) = self.failure_kind {
            b = b.str("failure_kind", k.as_str());
        }
        b.build()
    }

    fn from_value(value: Value) -> Result<Self, CanonicalError> {
        let mut f = Fields::new(value, "report")?;
        let index = match f.take_opt("first_failure_index") {
            None => None,
            Some(Value::Int(n)) => Some(n),
            Some(_) => return Err(f.invalid("first_failure_index", "expected integer")),
        };
        let kind = match f.opt_str("failure_kind")?.as_deref() {
            None => None,
            Some("BrokenLink") => Some(FailureKind::BrokenLink),
            Some("BadDigest") => Some(FailureKind::BadDigest),
            Some("BadSignature") => Some(FailureKind::BadSignature),
            Some("NonMonotonicTime") => Some(FailureKind::NonMonotonicTime),
            Some("BadOrdering") => Some(FailureKind::BadOrdering),
            Some(other) => return Err(f.invalid("failure_kind", other)),
        };
        let valid = f.str("valid")? == "true";
        f.finish()?;
        if valid != index.is_none() || index.is_some() != kind.is_some() {
            return Err(CanonicalError::InvalidValue {
                context: "report",
                field: "valid".into(),
                reason: "inconsistent with failure fields".into(),
            });
        }
        Ok(ValidationReport {
            valid,
            first_failure_index: index,
            failure_kind: kind,
        })
    }
}

/// An append-only list of blocks.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Chain {
    blocks: Vec<Block>,
}

impl Chain {
    pub fn new() -> Self {
        Self::default()
    }

    /// Wrap blocks without checking them; use [`validate_chain`] to audit.
    pub fn from_blocks(blocks: Vec<Block>) -> Self {
        Chain { blocks }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn tip(&self) -> Option<&Block> {
        self.blocks.last()
    }

    pub fn tip_digest(&self) -> Digest {
        self.tip().map(|b| b.block_digest).unwrap_or(Digest::ZERO)
    }

    pub fn last_sealed_time(&self) -> u64 {
        self.tip().map(|b| b.sealed_time).unwrap_or(0)
    }

    pub fn transactions(&self) -> impl Iterator<Item = &Transaction> {
        self.blocks.iter().flat_map(|b| b.transactions.iter())
    }

    pub fn contains_tx(&self, id: &Digest) -> bool {
        self.transactions().any(|t| t.tx_id.as_ref() == Some(id))
    }

    /// Append a block that already extends this chain. The caller is
    /// responsible for having validated it.
    pub fn push_unchecked(&mut self, block: Block) {
        self.blocks.push(block);
    }

    /// Check that `block` correctly extends this chain.
    pub fn check_extension(
        &self,
        block: &Block,
        registry: &MembershipRegistry,
    ) -> Result<(), FailureKind> {
        let prev = self.tip();
        check_block(block, self.blocks.len() as u64, prev, registry)
    }

    /// One canonical block per line, each terminated by a newline.
    pub fn to_ledger_string(&self) -> String {
        let mut out = String::new();
        for block in &self.blocks {
            out.push_str(&block.to_canonical_string());
            out.push('\n');
        }
        out
    }

    pub fn from_ledger_bytes(bytes: &[u8]) -> Result<Chain, LedgerError> {
        let mut blocks = Vec::new();
        let mut rest = bytes;
        let mut line = 0;
        while !rest.is_empty() {
            let Some(end) = rest.iter().position(|&b| b == b'\n') else {
                return Err(LedgerError::Truncated { line });
            };
            let block = Block::from_canonical_bytes(&rest[..end])
                .map_err(|source| LedgerError::Parse { line, source })?;
            blocks.push(block);
            rest = &rest[end + 1..];
            line += 1;
        }
        Ok(Chain { blocks })
    }
}

/// Seal accepted pending transactions into the next block and append it.
pub fn seal_block(pending: &[PendingTransaction], chain: &mut Chain) -> Result<Block, LedgerError> {
    if pending.is_empty() {
        return Err(LedgerError::EmptyBlock);
    }
    for p in pending {
        if p.transaction.tx_id.is_none() {
            return Err(LedgerError::Unsigned("tx_id"));
        }
        if p.transaction.signature.is_none() {
            return Err(LedgerError::Unsigned("signature"));
        }
        if !p.is_accepted() {
            return Err(LedgerError::UnverifiedTransaction(p.transaction.id()));
        }
    }
    let mut transactions: Vec<Transaction> = pending.iter().map(|p| p.transaction.clone()).collect();
    transactions.sort_by_key(Transaction::sort_key);
    let sealed_time = transactions
        .iter()
        .map(|t| t.logical_time)
        .max()
        .unwrap_or(0)
        .max(chain.last_sealed_time());
    let mut block = Block {
        index: chain.len() as u64,
        prev_digest: chain.tip_digest(),
        transactions,
        sealed_time,
        block_digest: Digest::ZERO,
    };
    block.block_digest = block.compute_digest();
    chain.blocks.push(block.clone());
    Ok(block)
}

fn check_block(
    block: &Block,
    expected_index: u64,
    prev: Option<&Block>,
    registry: &MembershipRegistry,
) -> Result<(), FailureKind> {
    if block.index != expected_index {
        return Err(FailureKind::BrokenLink);
    }
    if !block.digest_is_valid() {
        return Err(FailureKind::BadDigest);
    }
    let expected_prev = prev.map(|b| b.block_digest).unwrap_or(Digest::ZERO);
    if block.prev_digest != expected_prev {
        return Err(FailureKind::BrokenLink);
    }
    if block.transactions.is_empty() {
        return Err(FailureKind::BadOrdering);
    }
    for tx in &block.transactions {
        if !tx.id_is_valid() {
            return Err(FailureKind::BadDigest);
        }
    }
    for tx in &block.transactions {
        if !tx.signature_is_valid(registry) {
            return Err(FailureKind::BadSignature);
        }
    }
    let ordered = block
        .transactions
        .windows(2)
        .all(|w| w[0].sort_key() < w[1].sort_key());
    if !ordered {
        return Err(FailureKind::BadOrdering);
    }
    let floor = prev.map(|b| b.sealed_time).unwrap_or(0);
    let times_ok = block.sealed_time >= floor
        && block
            .transactions
            .iter()
            .all(|t| t.logical_time >= floor && t.logical_time <= block.sealed_time);
    if !times_ok {
        return Err(FailureKind::NonMonotonicTime);
    }
    Ok(())
}

/// Audit a chain against a registry. Failures are reported, never thrown.
///
/// Blocks are checked in parallel; the report names the lowest failing
/// index, so it does not depend on evaluation order.
pub fn validate_chain(chain: &Chain, registry: &MembershipRegistry) -> ValidationReport {
    let blocks = chain.blocks();
    let local = blocks
        .par_iter()
        .enumerate()
        .filter_map(|(i, block)| {
            let prev = i.checked_sub(1).map(|p| &blocks[p]);
            check_block(block, i as u64, prev, registry)
                .err()
                .map(|kind| (i as u64, kind))
        })
        .min_by_key(|(i, _)| *i);

    // Transaction ids must be unique across the whole chain.
    let mut seen = BTreeSet::new();
    let duplicate = blocks.iter().enumerate().find_map(|(i, block)| {
        let dup = block
            .transactions
            .iter()
            .any(|t| !seen.insert(t.tx_id));
        dup.then_some((i as u64, FailureKind::BadOrdering))
    });

    match [local, duplicate].into_iter().flatten().min_by_key(|(i, _)| *i) {
        Some((i, kind)) => ValidationReport::failed(i, kind),
        None => ValidationReport::ok(),
    }
}
