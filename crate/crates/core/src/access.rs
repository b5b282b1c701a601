//! Private channels and the ledger query engine.
//!
//! A channel transaction is recorded publicly with an empty state; the full
//! transaction lives only in the side stores of the channel's members, keyed
//! by the public transaction id.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::canonical::{Canonical, CanonicalError, Fields, Value};
use crate::digest::{compute_digest, Digest};
use crate::ledger::{Chain, StateMap, Transaction};
use crate::membership::{MemberId, MembershipRegistry};
use crate::provenance::KEY_PARENT;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AccessError {
    #[error("{0} is not a registered member")]
    UnknownMember(String),
    #[error("a channel needs at least two members")]
    TooFewMembers,
    #[error("{0} is not a member of the channel")]
    ChannelAccessDenied(MemberId),
    #[error("unknown channel `{0}`")]
    UnknownChannel(String),
    #[error("transaction {0} is not on the chain")]
    UnknownTransaction(Digest),
    #[error("lineage of {0} loops back on itself")]
    CyclicLineage(Digest),
    #[error("bad query term `{0}`")]
    BadQuery(String),
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Channel {
    pub channel_id: String,
    /// Local label; not part of the id.
    pub name: String,
    pub members: BTreeSet<MemberId>,
    pub created_at: u64,
}

pub fn channel_id_for(members: &BTreeSet<MemberId>, created_at: u64) -> String {
    let body = Value::object()
        .int("created_at", created_at)
        .field(
            "members",
            Value::List(members.iter().map(|m| Value::str(m.to_string())).collect()),
        )
        .build();
    compute_digest(&body.to_bytes()).to_hex()
}

pub fn create_channel(
    name: &str,
    members: &BTreeSet<MemberId>,
    registry: &MembershipRegistry,
    created_at: u64,
) -> Result<Channel, AccessError> {
    if let Some(m) = members.iter().find(|m| !registry.contains(m)) {
        return Err(AccessError::UnknownMember(m.to_string()));
    }
    if members.len() < 2 {
        return Err(AccessError::TooFewMembers);
    }
    Ok(Channel {
        channel_id: channel_id_for(members, created_at),
        name: name.to_string(),
        members: members.clone(),
        created_at,
    })
}

impl Canonical for Channel {
    fn to_value(&self) -> Value {
        Value::object()
            .str("channel_id", &self.channel_id)
            .int("created_at", self.created_at)
            .field(
                "members",
                Value::List(self.members.iter().map(|m| Value::str(m.to_string())).collect()),
            )
            .str("name", &self.name)
            .build()
    }

    fn from_value(value: Value) -> Result<Self, CanonicalError> {
        let mut f = Fields::new(value, "channel")?;
        let channel_id = f.str("channel_id")?;
        let created_at = f.u64("created_at")?;
        let members = f
            .string_list("members")?
            .iter()
            .map(|s| s.parse().map_err(|_| f.invalid("members", "expected member id")))
            .collect::<Result<BTreeSet<MemberId>, _>>()?;
        let name = f.str("name")?;
        if channel_id_for(&members, created_at) != channel_id {
            return Err(f.invalid("channel_id", "does not match members and creation time"));
        }
        f.finish()?;
        Ok(Channel {
            channel_id,
            name,
            members,
            created_at,
        })
    }
}

/// The public, stateless form of a channel transaction (unsigned).
pub fn public_form(full: &Transaction) -> Transaction {
    Transaction {
        tx_id: None,
        signature: None,
        state: StateMap::new(),
        ..full.clone()
    }
}

/// Full channel transactions held by one member, keyed by public tx id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SideStore {
    entries: BTreeMap<Digest, Transaction>,
}

impl SideStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, public_id: Digest, full: Transaction) {
        self.entries.insert(public_id, full);
    }

    pub fn get(&self, public_id: &Digest) -> Option<&Transaction> {
        self.entries.get(public_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Digest, &Transaction)> {
        self.entries.iter()
    }

    /// One canonical `{"full":...,"tx_id":...}` object per line.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (id, tx) in &self.entries {
            let line = Value::object()
                .field("full", tx.to_value())
                .str("tx_id", id.to_hex())
                .build();
            out.push_str(&line.to_text());
            out.push('\n');
        }
        out
    }

    pub fn from_file_str(text: &str) -> Result<SideStore, AccessError> {
        let mut store = SideStore::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let mut f = Fields::new(Value::parse_str(line)?, "side_store_entry")?;
            let full = Transaction::from_value(f.take("full")?)?;
            let id = f.str("tx_id")?;
            let id = Digest::from_hex(&id).map_err(|e| f.invalid("tx_id", e.to_string()))?;
            f.finish()?;
            store.insert(id, full);
        }
        Ok(store)
    }
}

/// Look a transaction up by id. Channel transactions come back in their
/// public form.
pub fn get_transaction<'a>(chain: &'a Chain, tx_id: &Digest) -> Option<&'a Transaction> {
    chain.transactions().find(|t| t.id() == *tx_id)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChannelFilter {
    /// Any channel transaction.
    Private,
    /// Only public transactions.
    Public,
    Id(String),
}

/// Conjunctive transaction filter. Empty matches everything.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Query {
    pub initiator: Option<MemberId>,
    pub responder: Option<MemberId>,
    pub contract_id: Option<String>,
    pub channel: Option<ChannelFilter>,
    pub has_keys: Vec<String>,
    /// Inclusive logical-time bounds.
    pub time_min: Option<u64>,
    pub time_max: Option<u64>,
}

impl Query {
    pub fn matches(&self, tx: &Transaction) -> bool {
        self.initiator.is_none_or(|m| tx.initiator == m)
            && self.responder.is_none_or(|m| tx.responder == m)
            && self.contract_id.as_ref().is_none_or(|c| &tx.contract_id == c)
            && match &self.channel {
                None => true,
                Some(ChannelFilter::Private) => tx.channel_id.is_some(),
                Some(ChannelFilter::Public) => tx.channel_id.is_none(),
                Some(ChannelFilter::Id(id)) => tx.channel_id.as_ref() == Some(id),
            }
            && self.has_keys.iter().all(|k| tx.state.contains_key(k))
            && self.time_min.is_none_or(|t| tx.logical_time >= t)
            && self.time_max.is_none_or(|t| tx.logical_time <= t)
    }

    /// Parse terms such as `from=peer0`, `contract=note`, `has=prov.embedded`,
    /// `channel=yes|no|<id>`, `time>=3`, `time<9`. Members may be named by
    /// display name or member id.
    pub fn parse(terms: &[impl AsRef<str>], registry: &MembershipRegistry) -> Result<Query, AccessError> {
        let mut q = Query::default();
        for term in terms {
            let term = term.as_ref();
            let bad = || AccessError::BadQuery(term.to_string());
            if let Some(rest) = term.strip_prefix("time") {
                let (op, n) = ["<=", ">=", "<", ">", "="]
                    .iter()
                    .find_map(|op| rest.strip_prefix(op).map(|n| (*op, n)))
                    .ok_or_else(bad)?;
                let n: u64 = n.parse().map_err(|_| bad())?;
                let (lo, hi) = match op {
                    "<=" => (None, Some(n)),
                    ">=" => (Some(n), None),
                    "<" => match n.checked_sub(1) {
                        Some(m) => (None, Some(m)),
                        None => (Some(1), Some(0)),
                    },
                    ">" => (Some(n.checked_add(1).ok_or_else(bad)?), None),
                    _ => (Some(n), Some(n)),
                };
                if let Some(lo) = lo {
                    q.time_min = Some(q.time_min.map_or(lo, |t| t.max(lo)));
                }
                if let Some(hi) = hi {
                    q.time_max = Some(q.time_max.map_or(hi, |t| t.min(hi)));
                }
                continue;
            }
            let (key, value) = term.split_once('=').ok_or_else(bad)?;
            match key {
                "from" => q.initiator = Some(resolve_member(value, registry)?),
                "to" => q.responder = Some(resolve_member(value, registry)?),
                "contract" => q.contract_id = Some(value.to_string()),
                "has" => q.has_keys.push(value.to_string()),
                "channel" => {
                    q.channel = Some(match value {
                        "yes" => ChannelFilter::Private,
                        "no" => ChannelFilter::Public,
                        id => ChannelFilter::Id(id.to_string()),
                    })
                }
                _ => return Err(bad()),
            }
        }
        Ok(q)
    }
}

/// Resolve a display name or member id.
pub fn resolve_member(name: &str, registry: &MembershipRegistry) -> Result<MemberId, AccessError> {
    if let Some(p) = registry.find_by_name(name) {
        return Ok(p.member_id);
    }
    match name.parse::<MemberId>() {
        Ok(id) if registry.contains(&id) => Ok(id),
        _ => Err(AccessError::UnknownMember(name.to_string())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Matching transactions in `(logical_time, tx_id)` order.
pub fn walk(chain: &Chain, direction: Direction, query: &Query) -> Vec<Transaction> {
    let mut txs: Vec<Transaction> = chain.transactions().filter(|t| query.matches(t)).cloned().collect();
    txs.sort_by_key(Transaction::sort_key);
    if direction == Direction::Backward {
        txs.reverse();
    }
    txs
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Lineage {
    /// Ancestors from the direct parent to the eldest.
    pub ancestors: Vec<Digest>,
    /// A parent reference that could not be found on the chain.
    pub unresolved_tail: Option<String>,
}

/// Follow `parent.txid` links back from `tx_id`.
///
/// Channel transactions are followed through `side` when it holds them.
pub fn trace_lineage(chain: &Chain, tx_id: &Digest, side: Option<&SideStore>) -> Result<Lineage, AccessError> {
    let state_of = |tx: &Transaction| -> StateMap {
        match side.and_then(|s| s.get(&tx.id())) {
            Some(full) if tx.is_private() => full.state.clone(),
            _ => tx.state.clone(),
        }
    };
    let start = get_transaction(chain, tx_id).ok_or(AccessError::UnknownTransaction(*tx_id))?;
    let mut lineage = Lineage::default();
    let mut seen = BTreeSet::from([*tx_id]);
    let mut state = state_of(start);
    while let Some(parent) = state.get(KEY_PARENT) {
        let Some(tx) = Digest::from_hex(parent).ok().and_then(|d| get_transaction(chain, &d)) else {
            lineage.unresolved_tail = Some(parent.clone());
            break;
        };
        let id = tx.id();
        if !seen.insert(id) {
            return Err(AccessError::CyclicLineage(*tx_id));
        }
        lineage.ancestors.push(id);
        state = state_of(tx);
    }
    Ok(lineage)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::seal_block;
    use crate::ledger::tests::{accept, build_chain, signed_tx};
    use crate::membership::tests::registry_of;
    use proptest::prelude::*;

    #[test]
    fn channel_ids_are_deterministic() {
        let (registry, members) = registry_of(3);
        let set: BTreeSet<_> = members[..2].iter().map(|m| m.0.member_id).collect();
        let a = create_channel("x", &set, &registry, 5).unwrap();
        let b = create_channel("y", &set, &registry, 5).unwrap();
        assert_eq!(a.channel_id, b.channel_id);
        assert_ne!(a.channel_id, create_channel("x", &set, &registry, 6).unwrap().channel_id);
        assert_eq!(Channel::from_canonical_bytes(&a.to_canonical_bytes()).unwrap(), a);
    }

    #[test]
    fn channel_gates() {
        let (registry, members) = registry_of(2);
        let (_, others) = registry_of(4);
        let one: BTreeSet<_> = [members[0].0.member_id].into();
        assert_eq!(create_channel("c", &one, &registry, 0), Err(AccessError::TooFewMembers));
        let stranger: BTreeSet<_> = [members[0].0.member_id, others[3].0.member_id].into();
        assert!(matches!(
            create_channel("c", &stranger, &registry, 0),
            Err(AccessError::UnknownMember(_))
        ));
    }

    #[test]
    fn lookup_hit_and_miss() {
        let (chain, _) = build_chain(2, 3);
        let tx = chain.blocks()[1].transactions[1].clone();
        assert_eq!(get_transaction(&chain, &tx.id()), Some(&tx));
        assert_eq!(get_transaction(&chain, &Digest::from_bytes([3; 32])), None);
    }

    #[test]
    fn walk_directions() {
        let (chain, _) = build_chain(3, 3);
        let fwd = walk(&chain, Direction::Forward, &Query::default());
        let mut bwd = walk(&chain, Direction::Backward, &Query::default());
        assert_eq!(fwd.len(), 9);
        bwd.reverse();
        assert_eq!(fwd, bwd);
        assert!(walk(&Chain::new(), Direction::Forward, &Query::default()).is_empty());
    }

    #[test]
    fn query_parsing() {
        let (registry, members) = registry_of(2);
        let q = Query::parse(&["from=peer0", "to=peer1", "time>2", "time<=9", "has=note", "channel=no"], &registry).unwrap();
        assert_eq!(q.initiator, Some(members[0].0.member_id));
        assert_eq!(q.responder, Some(members[1].0.member_id));
        assert_eq!((q.time_min, q.time_max), (Some(3), Some(9)));
        assert_eq!(q.channel, Some(ChannelFilter::Public));
        let by_id = Query::parse(&[format!("from={}", members[1].0.member_id)], &registry).unwrap();
        assert_eq!(by_id.initiator, Some(members[1].0.member_id));
        assert!(Query::parse(&["from=nobody"], &registry).is_err());
        assert!(Query::parse(&["colour=red"], &registry).is_err());
        assert!(Query::parse(&["time~3"], &registry).is_err());
        let none = Query::parse(&["time<0"], &registry).unwrap();
        let (chain, _) = build_chain(1, 2);
        assert!(walk(&chain, Direction::Forward, &none).is_empty());
    }

    fn lineage_chain(depth: usize, dangling: bool) -> (Chain, Vec<Digest>) {
        let (_, members) = registry_of(2);
        let mut chain = Chain::new();
        let mut ids: Vec<Digest> = Vec::new();
        for i in 0..=depth {
            let mut tx = Transaction::new(members[0].0.member_id, members[1].0.member_id, format!("a{i}"), "note", i as u64 + 1);
            if let Some(p) = ids.last() {
                tx = tx.with_state(KEY_PARENT, p.to_hex());
            } else if dangling {
                tx = tx.with_state(KEY_PARENT, Digest::from_bytes([9; 32]).to_hex());
            }
            let tx = tx.sign(&members[0].1);
            ids.push(tx.id());
            seal_block(&[accept(tx)], &mut chain).unwrap();
        }
        (chain, ids)
    }

    #[test]
    fn lineage() {
        let (chain, ids) = lineage_chain(3, false);
        let l = trace_lineage(&chain, &ids[0], None).unwrap();
        assert_eq!(l, Lineage::default());
        let l = trace_lineage(&chain, &ids[3], None).unwrap();
        assert_eq!(l.ancestors, vec![ids[2], ids[1], ids[0]]);
        assert_eq!(l.unresolved_tail, None);

        let (chain, ids) = lineage_chain(1, true);
        let l = trace_lineage(&chain, &ids[1], None).unwrap();
        assert_eq!(l.ancestors, vec![ids[0]]);
        assert_eq!(l.unresolved_tail, Some(Digest::from_bytes([9; 32]).to_hex()));
        let missing = Digest::from_bytes([1; 32]);
        assert_eq!(trace_lineage(&chain, &missing, None), Err(AccessError::UnknownTransaction(missing)));
    }

    #[test]
    fn side_store_round_trip() {
        let (_, members) = registry_of(2);
        let full = signed_tx(&members[0], &members[1].0, "secret", 3);
        let mut side = SideStore::new();
        side.insert(Digest::from_bytes([4; 32]), full.clone());
        let text = side.to_file_string();
        assert_eq!(SideStore::from_file_str(&text).unwrap(), side);
        assert!(public_form(&full).state.is_empty());
    }

    proptest! {
        #[test]
        fn walk_matches_brute_force(
            contract_pick in 0usize..3,
            from_pick in 0usize..4,
            lo in 0u64..30,
            span in 0u64..30,
            has_pick in any::<bool>(),
            plan in prop::collection::vec((0usize..3, 0usize..3, 0usize..3, any::<bool>()), 1..25),
        ) {
            let (registry, members) = registry_of(3);
            let contracts = ["note", "workflow_execution", "other"];
            let mut chain = Chain::new();
            let mut all = Vec::new();
            for (i, (from, to, c, tagged)) in plan.iter().enumerate() {
                let mut tx = Transaction::new(members[*from].0.member_id, members[*to].0.member_id, format!("x{i}"), contracts[*c], i as u64 + 1);
                if *tagged {
                    tx = tx.with_state("tag", "1");
                }
                let tx = tx.sign(&members[*from].1);
                all.push(tx.clone());
                if i % 4 == 3 || i + 1 == plan.len() {
                    let pending: Vec<_> = all.drain(..).map(accept).collect();
                    seal_block(&pending, &mut chain).unwrap();
                }
            }
            let mut terms = vec![format!("time>={lo}"), format!("time<={}", lo + span)];
            if contract_pick < 3 && contract_pick > 0 {
                terms.push(format!("contract={}", contracts[contract_pick]));
            }
            if from_pick < 3 {
                terms.push(format!("from=peer{from_pick}"));
            }
            if has_pick {
                terms.push("has=tag".into());
            }
            let q = Query::parse(&terms, &registry).unwrap();
            let got = walk(&chain, Direction::Forward, &q);
            let mut expected: Vec<Transaction> = Vec::new();
            for block in chain.blocks() {
                for tx in &block.transactions {
                    let ok = tx.logical_time >= lo
                        && tx.logical_time <= lo + span
                        && (contract_pick == 0 || contract_pick >= 3 || tx.contract_id == contracts[contract_pick])
                        && (from_pick >= 3 || tx.initiator == members[from_pick].0.member_id)
                        && (!has_pick || tx.state.contains_key("tag"));
                    if ok {
                        expected.push(tx.clone());
                    }
                }
            }
            expected.sort_by_key(|t| (t.logical_time, t.id()));
            prop_assert_eq!(got, expected);
        }
    }
}
