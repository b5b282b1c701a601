//! Proposal / endorsement consensus among admitted peers.
//!
//! A proposer broadcasts a signed transaction, every peer answers with a
//! signed verdict, and the transaction is accepted once a strict majority of
//! the electorate has endorsed it. There is no incentive mechanism: the
//! outcome depends only on verdict counts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::access::Channel;
use crate::canonical::{Canonical, CanonicalError, Fields, Value};
use crate::contracts::ContractRegistry;
use crate::digest::Digest;
use crate::ledger::Transaction;
use crate::membership::{majority_threshold, KeyPair, MemberId, MembershipRegistry, Signature};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConsensusError {
    #[error("{0} is not a member")]
    NotAMember(MemberId),
    #[error("{0} endorsed more than once")]
    DuplicateEndorser(MemberId),
    #[error("no decision reachable: {endorse} endorsements and {unresponsive} silent peers cannot reach {quorum}")]
    NetworkStalled {
        endorse: usize,
        unresponsive: usize,
        quorum: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RejectReason {
    /// Bad signature or unregistered party.
    SourceInvalid,
    /// Unknown contract or failed precondition.
    PurposeInvalid,
    /// Channel rules violated.
    ChannelInvalid,
    /// Timestamp precedes the last sealed block.
    StaleTimestamp,
    /// Already committed.
    Duplicate,
}

impl RejectReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RejectReason::SourceInvalid => "source_invalid",
            RejectReason::PurposeInvalid => "purpose_invalid",
            RejectReason::ChannelInvalid => "channel_invalid",
            RejectReason::StaleTimestamp => "stale_timestamp",
            RejectReason::Duplicate => "duplicate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Verdict {
    Endorse,
    Reject(RejectReason),
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Endorse => f.write_str("endorse"),
            Verdict::Reject(r) => write!(f, "reject:{}", r.as_str()),
        }
    }
}

impl FromStr for Verdict {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "endorse" {
            return Ok(Verdict::Endorse);
        }
        let reason = match s.strip_prefix("reject:") {
            Some("source_invalid") => RejectReason::SourceInvalid,
            Some("purpose_invalid") => RejectReason::PurposeInvalid,
            Some("channel_invalid") => RejectReason::ChannelInvalid,
            Some("stale_timestamp") => RejectReason::StaleTimestamp,
            Some("duplicate") => RejectReason::Duplicate,
            _ => return Err(format!("unknown verdict `{s}`")),
        };
        Ok(Verdict::Reject(reason))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Proposal {
    /// The transaction as it will be recorded on the ledger.
    pub transaction: Transaction,
    pub proposer: MemberId,
    /// For channel transactions: the full transaction, shown to channel
    /// members only. `transaction` then carries an empty state.
    pub private_payload: Option<Transaction>,
}

impl Proposal {
    pub fn new(transaction: Transaction) -> Self {
        Proposal {
            proposer: transaction.initiator,
            transaction,
            private_payload: None,
        }
    }

    pub fn private(public: Transaction, full: Transaction) -> Self {
        Proposal {
            proposer: public.initiator,
            transaction: public,
            private_payload: Some(full),
        }
    }

    /// Copy without the private payload, as seen by non-members.
    pub fn redacted(&self) -> Self {
        Proposal {
            private_payload: None,
            ..self.clone()
        }
    }
}

impl Canonical for Proposal {
    fn to_value(&self) -> Value {
        let mut b = Value::object();
        if let Some(p) = &self.private_payload {
            b = b.field("private_payload", p.to_value());
        }
        b.str("proposer", self.proposer.to_string())
            .field("transaction", self.transaction.to_value())
            .build()
    }

    fn from_value(value: Value) -> Result<Self, CanonicalError> {
        let mut f = Fields::new(value, "proposal")?;
        let private_payload = f.take_opt("private_payload").map(Transaction::from_value).transpose()?;
        let proposer = f.str("proposer")?;
        let proposer = proposer.parse().map_err(|_| f.invalid("proposer", "expected member id"))?;
        let transaction = Transaction::from_value(f.take("transaction")?)?;
        f.finish()?;
        Ok(Proposal {
            transaction,
            proposer,
            private_payload,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endorsement {
    pub tx_id: Digest,
    pub endorser: MemberId,
    pub verdict: Verdict,
    pub signature: Signature,
}

fn endorsement_message(tx_id: &Digest, verdict: Verdict) -> Vec<u8> {
    Value::object()
        .str("tx_id", tx_id.to_hex())
        .str("verdict", verdict.to_string())
        .build()
        .to_bytes()
}

impl Endorsement {
    pub fn sign(tx_id: Digest, verdict: Verdict, keys: &KeyPair) -> Self {
        Endorsement {
            tx_id,
            endorser: MemberId::from_public_key(&keys.public_key()),
            verdict,
            signature: keys.sign(&endorsement_message(&tx_id, verdict)),
        }
    }

    pub fn verify(&self, registry: &MembershipRegistry) -> bool {
        registry
            .verify_signature(&endorsement_message(&self.tx_id, self.verdict), &self.signature, &self.endorser)
            .unwrap_or(false)
    }
}

impl Canonical for Endorsement {
    fn to_value(&self) -> Value {
        Value::object()
            .str("endorser", self.endorser.to_string())
            .str("signature", self.signature.to_hex())
            .str("tx_id", self.tx_id.to_hex())
            .str("verdict", self.verdict.to_string())
            .build()
    }

    fn from_value(value: Value) -> Result<Self, CanonicalError> {
        let mut f = Fields::new(value, "endorsement")?;
        let endorser = f.str("endorser")?;
        let endorser = endorser.parse().map_err(|_| f.invalid("endorser", "expected member id"))?;
        let signature = f.str("signature")?;
        let signature = Signature::from_hex(&signature).ok_or_else(|| f.invalid("signature", "expected 64-byte hex"))?;
        let tx_id = f.str("tx_id")?;
        let tx_id = Digest::from_hex(&tx_id).map_err(|e| f.invalid("tx_id", e.to_string()))?;
        let verdict = f.str("verdict")?;
        let verdict = verdict.parse().map_err(|e: String| f.invalid("verdict", e))?;
        f.finish()?;
        Ok(Endorsement {
            tx_id,
            endorser,
            verdict,
            signature,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsensusResult {
    pub tx_id: Digest,
    pub accepted: bool,
    /// Verified endorsements that were counted, in endorser order.
    pub endorsements: Vec<Endorsement>,
    /// Endorse votes needed for acceptance.
    pub quorum_size: usize,
}

impl ConsensusResult {
    pub fn endorse_count(&self) -> usize {
        self.endorsements
            .iter()
            .filter(|e| e.verdict == Verdict::Endorse)
            .count()
    }
}

impl Canonical for ConsensusResult {
    fn to_value(&self) -> Value {
        Value::object()
            .str("accepted", if self.accepted { "true" } else { "false" })
            .field(
                "endorsements",
                Value::List(self.endorsements.iter().map(Canonical::to_value).collect()),
            )
            .int("quorum_size", self.quorum_size as u64)
            .str("tx_id", self.tx_id.to_hex())
            .build()
    }

    fn from_value(value: Value) -> Result<Self, CanonicalError> {
        let mut f = Fields::new(value, "consensus_result")?;
        let accepted = match f.str("accepted")?.as_str() {
            "true" => true,
            "false" => false,
            _ => return Err(f.invalid("accepted", "expected \"true\" or \"false\"")),
        };
        let endorsements = f
            .list("endorsements")?
            .into_iter()
            .map(Endorsement::from_value)
            .collect::<Result<_, _>>()?;
        let quorum_size = f.u64("quorum_size")? as usize;
        let tx_id = f.str("tx_id")?;
        let tx_id = Digest::from_hex(&tx_id).map_err(|e| f.invalid("tx_id", e.to_string()))?;
        f.finish()?;
        Ok(ConsensusResult {
            tx_id,
            accepted,
            endorsements,
            quorum_size,
        })
    }
}

/// Decide `tx_id` by strict majority of the full registry.
pub fn decide(
    tx_id: Digest,
    endorsements: &[Endorsement],
    registry: &MembershipRegistry,
) -> Result<ConsensusResult, ConsensusError> {
    let electorate: BTreeSet<MemberId> = registry.member_ids().copied().collect();
    decide_among(tx_id, endorsements, registry, &electorate)
}

/// Decide `tx_id` by strict majority of `electorate`.
///
/// Endorsements for another transaction, from outside the electorate, or
/// with signatures that do not verify are ignored. A second endorsement by
/// the same endorser is an error even if the first was ignored.
pub fn decide_among(
    tx_id: Digest,
    endorsements: &[Endorsement],
    registry: &MembershipRegistry,
    electorate: &BTreeSet<MemberId>,
) -> Result<ConsensusResult, ConsensusError> {
    let mut seen = BTreeSet::new();
    let mut counted = BTreeMap::new();
    for e in endorsements {
        if !seen.insert(e.endorser) {
            return Err(ConsensusError::DuplicateEndorser(e.endorser));
        }
        if e.tx_id == tx_id && electorate.contains(&e.endorser) && e.verify(registry) {
            counted.insert(e.endorser, e.clone());
        }
    }
    let quorum_size = majority_threshold(electorate.len());
    let endorse = counted.values().filter(|e| e.verdict == Verdict::Endorse).count();
    Ok(ConsensusResult {
        tx_id,
        accepted: !electorate.is_empty() && endorse >= quorum_size,
        endorsements: counted.into_values().collect(),
        quorum_size,
    })
}

/// What a peer consults when judging a proposal.
pub struct ValidationContext<'a> {
    pub registry: &'a MembershipRegistry,
    pub contracts: &'a ContractRegistry,
    pub channels: &'a BTreeMap<String, Channel>,
    /// Sealed time of the peer's chain tip.
    pub min_logical_time: u64,
    /// Whether the transaction id is already on the peer's chain.
    pub is_committed: &'a dyn Fn(&Digest) -> bool,
}

/// Source, purpose and channel checks for a proposal.
pub fn check_proposal(ctx: &ValidationContext<'_>, proposal: &Proposal) -> Verdict {
    let tx = &proposal.transaction;
    let source_ok = proposal.proposer == tx.initiator
        && ctx.registry.contains(&tx.initiator)
        && ctx.registry.contains(&tx.responder)
        && tx.id_is_valid()
        && tx.signature_is_valid(ctx.registry);
    if !source_ok {
        return Verdict::Reject(RejectReason::SourceInvalid);
    }
    if (ctx.is_committed)(&tx.id()) {
        return Verdict::Reject(RejectReason::Duplicate);
    }
    if tx.logical_time < ctx.min_logical_time {
        return Verdict::Reject(RejectReason::StaleTimestamp);
    }
    let effective = match (&tx.channel_id, &proposal.private_payload) {
        (None, None) => tx,
        (None, Some(_)) => return Verdict::Reject(RejectReason::ChannelInvalid),
        (Some(channel_id), payload) => {
            let Some(channel) = ctx.channels.get(channel_id) else {
                return Verdict::Reject(RejectReason::ChannelInvalid);
            };
            if !channel.members.contains(&tx.initiator) || !channel.members.contains(&tx.responder) {
                return Verdict::Reject(RejectReason::ChannelInvalid);
            }
            let Some(full) = payload else {
                // Non-members cannot see the payload and so cannot judge purpose.
                return Verdict::Reject(RejectReason::ChannelInvalid);
            };
            if !tx.state.is_empty() || crate::access::public_form(full) != unsigned(tx) {
                return Verdict::Reject(RejectReason::ChannelInvalid);
            }
            if !full.signature_is_valid(ctx.registry) {
                return Verdict::Reject(RejectReason::SourceInvalid);
            }
            full
        }
    };
    match ctx.contracts.get(&effective.contract_id) {
        Some(contract) if contract.precondition(&effective.state).is_ok() => Verdict::Endorse,
        _ => Verdict::Reject(RejectReason::PurposeInvalid),
    }
}

fn unsigned(tx: &Transaction) -> Transaction {
    Transaction {
        tx_id: None,
        signature: None,
        ..tx.clone()
    }
}

/// Judge a proposal and sign the verdict with the peer's key.
pub fn validate_proposal(ctx: &ValidationContext<'_>, proposal: &Proposal, keys: &KeyPair) -> Endorsement {
    let verdict = check_proposal(ctx, proposal);
    Endorsement::sign(proposal.transaction.id(), verdict, keys)
}

/// Outcome of a round once every reachable peer has answered.
///
/// A rejected proposal stalls rather than fails when the silent peers could
/// still have carried it over the threshold.
pub fn settle(result: ConsensusResult, electorate: usize) -> Result<ConsensusResult, ConsensusError> {
    if result.accepted {
        return Ok(result);
    }
    let endorse = result.endorse_count();
    let unresponsive = electorate.saturating_sub(result.endorsements.len());
    if endorse + unresponsive >= result.quorum_size && unresponsive > 0 {
        return Err(ConsensusError::NetworkStalled {
            endorse,
            unresponsive,
            quorum: result.quorum_size,
        });
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contracts::{WorkflowDescription, NOTE_CONTRACT, WORKFLOW_CONTRACT, WORKFLOW_KEY};
    use crate::membership::tests::{registry_of, seed_for};
    use crate::membership::{generate_identity, PeerIdentity, Role};
    use proptest::prelude::*;

    fn no_commits(_: &Digest) -> bool {
        false
    }

    fn ctx<'a>(
        registry: &'a MembershipRegistry,
        contracts: &'a ContractRegistry,
        channels: &'a BTreeMap<String, Channel>,
    ) -> ValidationContext<'a> {
        ValidationContext {
            registry,
            contracts,
            channels,
            min_logical_time: 0,
            is_committed: &no_commits,
        }
    }

    fn note(from: &(PeerIdentity, KeyPair), to: &PeerIdentity) -> Transaction {
        Transaction::new(from.0.member_id, to.member_id, "asset", NOTE_CONTRACT, 5)
            .with_state("k", "v")
            .sign(&from.1)
    }

    fn votes(members: &[(PeerIdentity, KeyPair)], tx_id: Digest, endorse: usize) -> Vec<Endorsement> {
        members
            .iter()
            .enumerate()
            .map(|(i, (_, k))| {
                let v = if i < endorse {
                    Verdict::Endorse
                } else {
                    Verdict::Reject(RejectReason::PurposeInvalid)
                };
                Endorsement::sign(tx_id, v, k)
            })
            .collect()
    }

    #[test]
    fn majority_of_five() {
        let (registry, members) = registry_of(5);
        let id = Digest::from_bytes([1; 32]);
        let three = decide(id, &votes(&members, id, 3), &registry).unwrap();
        assert!(three.accepted);
        assert_eq!(three.quorum_size, 3);
        let two = decide(id, &votes(&members, id, 2), &registry).unwrap();
        assert!(!two.accepted);
    }

    #[test]
    fn single_member_network() {
        let (registry, members) = registry_of(1);
        let id = Digest::from_bytes([2; 32]);
        assert!(decide(id, &votes(&members, id, 1), &registry).unwrap().accepted);
        assert!(!decide(id, &[], &registry).unwrap().accepted);
    }

    #[test]
    fn duplicate_endorser_is_an_error() {
        let (registry, members) = registry_of(3);
        let id = Digest::from_bytes([3; 32]);
        let mut v = votes(&members, id, 3);
        v.push(v[0].clone());
        assert_eq!(
            decide(id, &v, &registry).unwrap_err(),
            ConsensusError::DuplicateEndorser(members[0].0.member_id)
        );
    }

    #[test]
    fn forged_and_foreign_votes_are_ignored() {
        let (registry, members) = registry_of(3);
        let id = Digest::from_bytes([4; 32]);
        let mut v = votes(&members, id, 3);
        // Tamper with one verdict, retarget another.
        v[0].verdict = Verdict::Endorse;
        v[0].signature = members[1].1.sign(b"something else");
        v[1] = Endorsement::sign(Digest::from_bytes([5; 32]), Verdict::Endorse, &members[1].1);
        let (outsider, keys) = generate_identity(Role::Wms, &seed_for(99), "x").unwrap();
        v.push(Endorsement::sign(id, Verdict::Endorse, &keys));
        let r = decide(id, &v, &registry).unwrap();
        assert_eq!(r.endorse_count(), 1);
        assert!(!r.accepted);
        assert!(r.endorsements.iter().all(|e| e.endorser != outsider.member_id));
    }

    #[test]
    fn gates() {
        let (registry, members) = registry_of(3);
        let contracts = ContractRegistry::builtin();
        let channels = BTreeMap::new();
        let c = ctx(&registry, &contracts, &channels);
        let tx = note(&members[0], &members[1].0);
        assert_eq!(check_proposal(&c, &Proposal::new(tx)), Verdict::Endorse);

        let (stranger, keys) = generate_identity(Role::Wms, &seed_for(50), "s").unwrap();
        let tx = note(&(stranger, keys), &members[1].0);
        assert_eq!(
            check_proposal(&c, &Proposal::new(tx)),
            Verdict::Reject(RejectReason::SourceInvalid)
        );

        let tx = Transaction::new(members[0].0.member_id, members[1].0.member_id, "a", "unregistered", 1)
            .sign(&members[0].1);
        assert_eq!(
            check_proposal(&c, &Proposal::new(tx)),
            Verdict::Reject(RejectReason::PurposeInvalid)
        );

        let tx = Transaction::new(members[0].0.member_id, members[1].0.member_id, "a", WORKFLOW_CONTRACT, 1)
            .with_state(WORKFLOW_KEY, "not a workflow")
            .sign(&members[0].1);
        assert_eq!(
            check_proposal(&c, &Proposal::new(tx)),
            Verdict::Reject(RejectReason::PurposeInvalid)
        );
        let wf = WorkflowDescription::parse_compact("linreg(B)->A").unwrap();
        let tx = Transaction::new(members[0].0.member_id, members[1].0.member_id, "a", WORKFLOW_CONTRACT, 1)
            .with_state(WORKFLOW_KEY, wf.to_canonical_string())
            .sign(&members[0].1);
        assert_eq!(check_proposal(&c, &Proposal::new(tx)), Verdict::Endorse);

        // signed by someone other than the initiator
        let tx = Transaction::new(members[0].0.member_id, members[1].0.member_id, "a", NOTE_CONTRACT, 1)
            .sign(&members[2].1);
        assert_eq!(
            check_proposal(&c, &Proposal::new(tx)),
            Verdict::Reject(RejectReason::SourceInvalid)
        );
    }

    #[test]
    fn stale_and_duplicate() {
        let (registry, members) = registry_of(2);
        let contracts = ContractRegistry::builtin();
        let channels = BTreeMap::new();
        let tx = note(&members[0], &members[1].0);
        let id = tx.id();
        let committed = move |d: &Digest| *d == id;
        let c = ValidationContext {
            min_logical_time: 0,
            is_committed: &committed,
            ..ctx(&registry, &contracts, &channels)
        };
        assert_eq!(
            check_proposal(&c, &Proposal::new(tx.clone())),
            Verdict::Reject(RejectReason::Duplicate)
        );
        let c = ValidationContext {
            min_logical_time: 6,
            ..ctx(&registry, &contracts, &channels)
        };
        assert_eq!(
            check_proposal(&c, &Proposal::new(tx)),
            Verdict::Reject(RejectReason::StaleTimestamp)
        );
    }

    #[test]
    fn endorsement_round_trip() {
        let (_, members) = registry_of(1);
        let e = Endorsement::sign(Digest::from_bytes([9; 32]), Verdict::Reject(RejectReason::ChannelInvalid), &members[0].1);
        assert_eq!(Endorsement::from_canonical_bytes(&e.to_canonical_bytes()).unwrap(), e);
        let r = ConsensusResult {
            tx_id: e.tx_id,
            accepted: false,
            endorsements: vec![e],
            quorum_size: 1,
        };
        assert_eq!(ConsensusResult::from_canonical_bytes(&r.to_canonical_bytes()).unwrap(), r);
    }

    #[test]
    fn settle_distinguishes_stall_from_rejection() {
        let (registry, members) = registry_of(5);
        let id = Digest::from_bytes([6; 32]);
        // two live endorsers, three silent: could still reach 3
        let r = decide(id, &votes(&members[..2], id, 2), &registry).unwrap();
        assert!(matches!(settle(r, 5), Err(ConsensusError::NetworkStalled { .. })));
        // everyone answered, only two endorse: a plain rejection
        let r = decide(id, &votes(&members, id, 2), &registry).unwrap();
        assert!(!settle(r, 5).unwrap().accepted);
    }

    proptest! {
        #[test]
        fn acceptance_is_strict_majority(n in 1usize..8, endorse in 0usize..8) {
            let endorse = endorse.min(n);
            let (registry, members) = registry_of(n);
            let id = Digest::from_bytes([7; 32]);
            let r = decide(id, &votes(&members, id, endorse), &registry).unwrap();
            prop_assert_eq!(r.accepted, endorse > n / 2);
        }

        #[test]
        fn more_endorsements_never_flip_acceptance(n in 1usize..8, a in 0usize..8, b in 0usize..8) {
            let (lo, hi) = (a.min(b).min(n), a.max(b).min(n));
            let (registry, members) = registry_of(n);
            let id = Digest::from_bytes([8; 32]);
            let r_lo = decide(id, &votes(&members, id, lo), &registry).unwrap();
            let r_hi = decide(id, &votes(&members, id, hi), &registry).unwrap();
            prop_assert!(!r_lo.accepted || r_hi.accepted);
        }
    }
}
