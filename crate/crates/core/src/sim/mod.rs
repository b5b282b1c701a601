//! Deterministic in-process network of peer nodes.
//!
//! Peers share no mutable ledger state: they exchange messages through a
//! single virtual-time queue. Each message gets a latency of 1 to 3 ticks
//! drawn from a seeded generator, and messages are delivered in
//! `(deliver_at, sent_at, sender, sequence)` order. Messages to a dropped
//! peer or across a severed link are lost.
//!
//! Workload commands run one at a time; each runs to quiescence before the
//! next starts. Datasets and the resource store model storage outside the
//! ledger and are shared by all peers.

pub mod script;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::access::{create_channel, public_form, AccessError, Channel, SideStore};
use crate::canonical::{Canonical, ObjectBuilder, Value};
use crate::consensus::{
    decide_among, settle, validate_proposal, ConsensusError, ConsensusResult, Endorsement, Proposal,
    ValidationContext,
};
use crate::contracts::{
    workflow_from_state, ContractError, ContractRegistry, DatasetStore, Dataset, ExecutionContext,
    WorkflowDescription, WORKFLOW_CONTRACT, WORKFLOW_KEY,
};
use crate::digest::{compute_digest, Digest};
use crate::ledger::{seal_block, validate_chain, Block, Chain, PendingTransaction, StateMap, Transaction};
use crate::membership::{
    generate_identity, Approval, JoinRequest, KeyPair, MemberId, MembershipRegistry, PeerIdentity, Role,
};
use crate::provenance::{
    attach_to_state, build_content, derive_workflow, CaptureMode, ProvenanceError, ProvenanceRecord,
    Representation,
};
use crate::store::MemoryResourceStore;

pub use script::{Command, Script, ScriptError, ScriptLine};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("unknown peer `{0}`")]
    UnknownPeer(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error(transparent)]
    Access(#[from] AccessError),
    #[error(transparent)]
    Contract(#[from] ContractError),
    #[error(transparent)]
    Provenance(#[from] ProvenanceError),
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error("{0}")]
    BadArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimConfig {
    pub peers: usize,
    pub seed: u64,
    /// Pending transactions that trigger an automatic seal.
    pub batch_size: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            peers: 5,
            seed: 42,
            batch_size: 4,
        }
    }
}

/// One peer's replica of the ledger and its local state.
pub struct PeerNode {
    pub name: String,
    pub identity: PeerIdentity,
    keys: KeyPair,
    pub registry: MembershipRegistry,
    pub chain: Chain,
    pub contracts: ContractRegistry,
    pub pending: Vec<PendingTransaction>,
    pub channels: BTreeMap<String, Channel>,
    pub side_store: SideStore,
    inbox: BTreeMap<Digest, Vec<Endorsement>>,
    approvals: Vec<Approval>,
}

impl PeerNode {
    fn new(name: &str, role: Role, seed: u64) -> Self {
        let (identity, keys) = generate_identity(role, &identity_seed(seed, name), name).expect("32-byte seed");
        PeerNode {
            name: name.to_string(),
            identity,
            keys,
            registry: MembershipRegistry::new(),
            chain: Chain::new(),
            contracts: ContractRegistry::builtin(),
            pending: Vec::new(),
            channels: BTreeMap::new(),
            side_store: SideStore::new(),
            inbox: BTreeMap::new(),
            approvals: Vec::new(),
        }
    }

    pub fn member_id(&self) -> MemberId {
        self.identity.member_id
    }

    pub fn keys(&self) -> &KeyPair {
        &self.keys
    }

    pub fn is_member(&self) -> bool {
        self.registry.contains(&self.identity.member_id)
    }

    fn knows(&self, id: &Digest) -> bool {
        self.chain.contains_tx(id) || self.pending.iter().any(|p| p.transaction.id() == *id)
    }

    fn electorate(&self, tx: &Transaction) -> Option<BTreeSet<MemberId>> {
        match &tx.channel_id {
            None => Some(self.registry.member_ids().copied().collect()),
            Some(id) => self.channels.get(id).map(|c| c.members.clone()),
        }
    }

    fn commit_is_valid(&self, p: &PendingTransaction) -> bool {
        let (Some(c), Some(electorate)) = (&p.consensus, self.electorate(&p.transaction)) else {
            return false;
        };
        p.is_accepted()
            && decide_among(c.tx_id, &c.endorsements, &self.registry, &electorate)
                .map(|r| r.accepted)
                .unwrap_or(false)
    }

    fn add_pending(&mut self, p: PendingTransaction) {
        let id = p.transaction.id();
        if self.knows(&id) || !self.commit_is_valid(&p) {
            return;
        }
        let key = p.transaction.sort_key();
        let at = self.pending.partition_point(|q| q.transaction.sort_key() < key);
        self.pending.insert(at, p);
    }

    fn prune_pending(&mut self) {
        let chain = &self.chain;
        self.pending.retain(|p| !chain.contains_tx(&p.transaction.id()));
    }

    /// Validation context over this peer's view.
    fn judge(&self, proposal: &Proposal) -> Endorsement {
        let knows = |d: &Digest| self.knows(d);
        let ctx = ValidationContext {
            registry: &self.registry,
            contracts: &self.contracts,
            channels: &self.channels,
            min_logical_time: self.chain.last_sealed_time(),
            is_committed: &knows,
        };
        validate_proposal(&ctx, proposal, &self.keys)
    }
}

fn identity_seed(seed: u64, name: &str) -> [u8; 32] {
    let body = Value::object().str("name", name).int("seed", seed).build();
    *compute_digest(&body.to_bytes()).as_bytes()
}

#[derive(Debug, Clone)]
enum Message {
    Proposal(Proposal),
    Endorsement(Endorsement),
    Commit {
        pending: PendingTransaction,
        side: Option<Transaction>,
    },
    Block(Block),
    SyncRequest {
        have: u64,
        tip: Digest,
    },
    SyncResponse(Box<SyncPayload>),
    JoinRequest(JoinRequest),
    Approval(Approval),
    Admit {
        request: JoinRequest,
        approvals: Vec<Approval>,
        logical_time: u64,
    },
    Channel(Channel),
}

#[derive(Debug, Clone)]
struct SyncPayload {
    start: u64,
    blocks: Vec<Block>,
    pending: Vec<PendingTransaction>,
    registry: MembershipRegistry,
    channels: Vec<Channel>,
    side: Vec<(Digest, Transaction)>,
}

impl Message {
    fn kind(&self) -> &'static str {
        match self {
            Message::Proposal(_) => "proposal",
            Message::Endorsement(_) => "endorsement",
            Message::Commit { .. } => "commit",
            Message::Block(_) => "block",
            Message::SyncRequest { .. } => "sync_request",
            Message::SyncResponse(_) => "sync_response",
            Message::JoinRequest(_) => "join_request",
            Message::Approval(_) => "approval",
            Message::Admit { .. } => "admit",
            Message::Channel(_) => "channel",
        }
    }

    fn summary(&self, b: ObjectBuilder) -> ObjectBuilder {
        match self {
            Message::Proposal(p) => b.str("tx_id", p.transaction.id().to_hex()),
            Message::Endorsement(e) => b.str("tx_id", e.tx_id.to_hex()).str("verdict", e.verdict.to_string()),
            Message::Commit { pending, .. } => b.str("tx_id", pending.transaction.id().to_hex()),
            Message::Block(block) => b.int("index", block.index).str("block_digest", block.block_digest.to_hex()),
            Message::SyncRequest { have, .. } => b.int("have", *have),
            Message::SyncResponse(p) => b.int("start", p.start).int("blocks", p.blocks.len() as u64),
            Message::JoinRequest(r) => b.str("candidate", r.candidate.member_id.to_string()),
            Message::Approval(a) => b.str("approver", a.approver.to_string()),
            Message::Admit { request, .. } => b.str("candidate", request.candidate.member_id.to_string()),
            Message::Channel(c) => b.str("channel_id", &c.channel_id),
        }
    }
}

struct Envelope {
    from: usize,
    to: usize,
    msg: Message,
}

/// Result of one workload command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Accepted(Digest),
    Rejected(Digest),
    Stalled,
    Failed(String),
    Joined(MemberId),
    JoinRejected,
    Sealed(u64),
    NothingToSeal,
    Done,
}

impl Outcome {
    pub fn label(&self) -> &'static str {
        match self {
            Outcome::Accepted(_) => "accepted",
            Outcome::Rejected(_) => "rejected",
            Outcome::Stalled => "stalled",
            Outcome::Failed(_) => "failed",
            Outcome::Joined(_) => "joined",
            Outcome::JoinRejected => "join_rejected",
            Outcome::Sealed(_) => "sealed",
            Outcome::NothingToSeal => "nothing_to_seal",
            Outcome::Done => "ok",
        }
    }

    pub fn detail(&self) -> Option<String> {
        match self {
            Outcome::Accepted(d) | Outcome::Rejected(d) => Some(d.to_hex()),
            Outcome::Failed(reason) => Some(reason.clone()),
            Outcome::Joined(m) => Some(m.to_string()),
            Outcome::Sealed(i) => Some(i.to_string()),
            _ => None,
        }
    }
}

/// Options a proposal carries besides its state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptureOptions {
    pub mode: CaptureMode,
    pub repr: Representation,
}

impl Default for CaptureOptions {
    fn default() -> Self {
        CaptureOptions {
            mode: CaptureMode::Embedded,
            repr: Representation::Both,
        }
    }
}

pub struct SimNetwork {
    pub config: SimConfig,
    peers: Vec<PeerNode>,
    dropped: BTreeSet<usize>,
    severed: BTreeSet<(usize, usize)>,
    now: u64,
    seq: u64,
    queue: BTreeMap<(u64, u64, usize, u64), Envelope>,
    rng: ChaCha8Rng,
    trace: Vec<Value>,
    pub datasets: DatasetStore,
    pub resources: MemoryResourceStore,
}

impl SimNetwork {
    /// A network of `config.peers` founding peers named `peer0`, `peer1`, ...
    pub fn new(config: SimConfig) -> Result<SimNetwork, SimError> {
        if config.peers == 0 {
            return Err(SimError::InvalidConfig("at least one peer is required".into()));
        }
        if config.batch_size == 0 {
            return Err(SimError::InvalidConfig("batch size must be positive".into()));
        }
        let mut peers: Vec<PeerNode> = (0..config.peers)
            .map(|i| PeerNode::new(&format!("peer{i}"), Role::Wms, config.seed))
            .collect();
        let mut registry = MembershipRegistry::new();
        for i in 0..peers.len() {
            let request = JoinRequest::new(peers[i].identity.clone(), &peers[i].keys);
            let approvals: Vec<_> = peers[..i]
                .iter()
                .map(|p| Approval::sign(&peers[i].identity, p.member_id(), &p.keys))
                .collect();
            registry = registry
                .approve_join(&request, &approvals, 0)
                .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        }
        for p in &mut peers {
            p.registry = registry.clone();
        }
        Ok(SimNetwork {
            config,
            peers,
            dropped: BTreeSet::new(),
            severed: BTreeSet::new(),
            now: 1,
            seq: 0,
            queue: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            trace: Vec::new(),
            datasets: DatasetStore::new(),
            resources: MemoryResourceStore::new(),
        })
    }

    pub fn peers(&self) -> &[PeerNode] {
        &self.peers
    }

    pub fn peer(&self, name: &str) -> Option<&PeerNode> {
        self.peers.iter().find(|p| p.name == name)
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn is_dropped(&self, name: &str) -> bool {
        self.index_of(name).map(|i| self.dropped.contains(&i)).unwrap_or(false)
    }

    /// The message trace, one canonical object per line.
    pub fn trace_lines(&self) -> Vec<String> {
        self.trace.iter().map(Value::to_text).collect()
    }

    pub fn trace_text(&self) -> String {
        let mut out = String::new();
        for line in self.trace_lines() {
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    /// True when every live member holds the same chain.
    pub fn chains_agree(&self) -> bool {
        let mut tips = self
            .peers
            .iter()
            .enumerate()
            .filter(|(i, p)| !self.dropped.contains(i) && p.is_member())
            .map(|(_, p)| p.chain.blocks().iter().map(|b| b.block_digest).collect::<Vec<_>>());
        match tips.next() {
            Some(first) => tips.all(|t| t == first),
            None => true,
        }
    }

    fn index_of(&self, name: &str) -> Result<usize, SimError> {
        self.peers
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| SimError::UnknownPeer(name.to_string()))
    }

    fn index_of_member(&self, id: &MemberId) -> Option<usize> {
        self.peers.iter().position(|p| p.member_id() == *id)
    }

    fn link_up(&self, a: usize, b: usize) -> bool {
        !self.dropped.contains(&a) && !self.dropped.contains(&b) && !self.severed.contains(&(a.min(b), a.max(b)))
    }

    fn reachable_count(&self, i: usize) -> usize {
        (0..self.peers.len())
            .filter(|&j| j != i && self.peers[j].is_member() && self.link_up(i, j))
            .count()
    }

    fn send(&mut self, from: usize, to: usize, msg: Message) {
        let latency = 1 + self.rng.gen_range(0..=2u64);
        let key = (self.now + latency, self.now, from, self.seq);
        self.seq += 1;
        self.queue.insert(key, Envelope { from, to, msg });
    }

    fn record(&mut self, b: ObjectBuilder) {
        self.trace.push(b.build());
    }

    fn drain(&mut self) {
        while let Some(((at, _, _, seq), env)) = self.queue.pop_first() {
            self.now = self.now.max(at);
            let up = self.link_up(env.from, env.to);
            let entry = env
                .msg
                .summary(Value::object())
                .int("at", at)
                .str("from", &self.peers[env.from].name)
                .str("kind", env.msg.kind())
                .int("seq", seq)
                .str("status", if up { "delivered" } else { "lost" })
                .str("to", &self.peers[env.to].name);
            self.record(entry);
            if up {
                self.handle(env.to, env.from, env.msg);
            }
        }
    }

    fn handle(&mut self, to: usize, from: usize, msg: Message) {
        match msg {
            Message::Proposal(p) => {
                if self.peers[to].is_member() {
                    let e = self.peers[to].judge(&p);
                    self.send(to, from, Message::Endorsement(e));
                }
            }
            Message::Endorsement(e) => {
                self.peers[to].inbox.entry(e.tx_id).or_default().push(e);
            }
            Message::Commit { pending, side } => {
                let node = &mut self.peers[to];
                if let Some(full) = side {
                    node.side_store.insert(pending.transaction.id(), full);
                }
                node.add_pending(pending);
            }
            Message::Block(block) => {
                let node = &mut self.peers[to];
                let len = node.chain.len() as u64;
                if block.index == len {
                    if node.chain.check_extension(&block, &node.registry).is_ok() {
                        node.chain.push_unchecked(block);
                        node.prune_pending();
                    }
                } else if block.index > len {
                    let tip = node.chain.tip_digest();
                    self.send(to, from, Message::SyncRequest { have: len, tip });
                }
            }
            Message::SyncRequest { have, tip } => {
                let payload = self.sync_payload(to, from, have, tip);
                self.send(to, from, Message::SyncResponse(Box::new(payload)));
            }
            Message::SyncResponse(payload) => self.apply_sync(to, *payload),
            Message::JoinRequest(request) => {
                let node = &self.peers[to];
                if node.is_member() && request.verify() {
                    let a = Approval::sign(&request.candidate, node.member_id(), &node.keys);
                    self.send(to, from, Message::Approval(a));
                }
            }
            Message::Approval(a) => self.peers[to].approvals.push(a),
            Message::Admit {
                request,
                approvals,
                logical_time,
            } => {
                let node = &mut self.peers[to];
                if node.is_member() {
                    if let Ok(next) = node.registry.approve_join(&request, &approvals, logical_time) {
                        node.registry = next;
                    }
                }
            }
            Message::Channel(c) => {
                self.peers[to].channels.insert(c.channel_id.clone(), c);
            }
        }
    }

    fn sync_payload(&self, responder: usize, requester: usize, have: u64, tip: Digest) -> SyncPayload {
        let node = &self.peers[responder];
        let blocks = node.chain.blocks();
        let shares_prefix = (have as usize) <= blocks.len()
            && (have == 0 || blocks[have as usize - 1].block_digest == tip);
        let start = if shares_prefix { have } else { 0 };
        let who = self.peers[requester].member_id();
        let side = node
            .side_store
            .iter()
            .filter(|(_, tx)| {
                tx.channel_id
                    .as_ref()
                    .and_then(|c| node.channels.get(c))
                    .is_some_and(|c| c.members.contains(&who))
            })
            .map(|(id, tx)| (*id, tx.clone()))
            .collect();
        SyncPayload {
            start,
            blocks: blocks[start as usize..].to_vec(),
            pending: node.pending.clone(),
            registry: node.registry.clone(),
            channels: node.channels.values().cloned().collect(),
            side,
        }
    }

    fn apply_sync(&mut self, to: usize, payload: SyncPayload) {
        let node = &mut self.peers[to];
        if payload.registry.admission_log().len() > node.registry.admission_log().len() {
            if let Ok(replayed) = payload.registry.replay_admissions() {
                node.registry = replayed;
            }
        }
        for c in payload.channels {
            node.channels.entry(c.channel_id.clone()).or_insert(c);
        }
        if payload.start == 0 {
            let candidate = Chain::from_blocks(payload.blocks);
            if candidate.len() >= node.chain.len()
                && candidate.tip_digest() != node.chain.tip_digest()
                && validate_chain(&candidate, &node.registry).valid
            {
                node.chain = candidate;
            }
        } else if payload.start == node.chain.len() as u64 {
            for block in payload.blocks {
                if node.chain.check_extension(&block, &node.registry).is_err() {
                    break;
                }
                node.chain.push_unchecked(block);
            }
        }
        for (id, full) in payload.side {
            node.side_store.insert(id, full);
        }
        node.prune_pending();
        for p in payload.pending {
            node.add_pending(p);
        }
    }

    /// The live member that seals: longest chain, then best connected, then
    /// lowest index.
    fn sealer(&self) -> Option<usize> {
        (0..self.peers.len())
            .filter(|i| !self.dropped.contains(i) && self.peers[*i].is_member())
            .max_by_key(|&i| (self.peers[i].chain.len(), self.reachable_count(i), std::cmp::Reverse(i)))
    }

    /// Seal the sealer's pending pool if it is due (or `force`d).
    fn maybe_seal(&mut self, force: bool) -> Option<u64> {
        let s = self.sealer()?;
        let node = &mut self.peers[s];
        if node.pending.is_empty() || (!force && node.pending.len() < self.config.batch_size) {
            return None;
        }
        let pending = std::mem::take(&mut node.pending);
        let block = match seal_block(&pending, &mut node.chain) {
            Ok(b) => b,
            Err(e) => {
                node.pending = pending;
                let entry = Value::object().int("at", self.now).str("event", "seal_failed").str("reason", e.to_string());
                self.record(entry);
                return None;
            }
        };
        let index = block.index;
        for j in 0..self.peers.len() {
            if j != s && self.peers[j].is_member() {
                self.send(s, j, Message::Block(block.clone()));
            }
        }
        self.drain();
        Some(index)
    }

    fn broadcast_to_members(&mut self, from: usize, msg: &Message) {
        for j in 0..self.peers.len() {
            if j != from && self.peers[j].is_member() {
                self.send(from, j, msg.clone());
            }
        }
    }

    /// Run one consensus round for `proposal` among `electorate`.
    fn round(
        &mut self,
        proposer: usize,
        proposal: Proposal,
        electorate: BTreeSet<MemberId>,
        side: Option<Transaction>,
    ) -> Result<ConsensusResult, ConsensusError> {
        let tx_id = proposal.transaction.id();
        let quorum = crate::membership::majority_threshold(electorate.len());
        if self.dropped.contains(&proposer) {
            return Err(ConsensusError::NetworkStalled {
                endorse: 0,
                unresponsive: electorate.len(),
                quorum,
            });
        }
        let own = self.peers[proposer].judge(&proposal);
        self.peers[proposer].inbox.entry(tx_id).or_default().push(own);
        for j in 0..self.peers.len() {
            if j != proposer && electorate.contains(&self.peers[j].member_id()) {
                self.send(proposer, j, Message::Proposal(proposal.clone()));
            }
        }
        self.drain();
        let endorsements = self.peers[proposer].inbox.remove(&tx_id).unwrap_or_default();
        let node = &self.peers[proposer];
        let result = decide_among(tx_id, &endorsements, &node.registry, &electorate)?;
        let result = settle(result, electorate.len())?;
        if result.accepted {
            let pending = PendingTransaction {
                transaction: proposal.transaction.clone(),
                consensus: Some(result.clone()),
            };
            self.commit(proposer, pending, side, &electorate);
        }
        Ok(result)
    }

    fn commit(
        &mut self,
        proposer: usize,
        pending: PendingTransaction,
        side: Option<Transaction>,
        electorate: &BTreeSet<MemberId>,
    ) {
        let id = pending.transaction.id();
        if let Some(full) = &side {
            self.peers[proposer].side_store.insert(id, full.clone());
        }
        self.peers[proposer].add_pending(pending.clone());
        for j in 0..self.peers.len() {
            if j == proposer || !self.peers[j].is_member() {
                continue;
            }
            let side = side.clone().filter(|_| electorate.contains(&self.peers[j].member_id()));
            self.send(
                proposer,
                j,
                Message::Commit {
                    pending: pending.clone(),
                    side,
                },
            );
        }
        self.drain();
        self.maybe_seal(false);
    }

    /// Propose a signed public transaction from `proposer`.
    pub fn propose_transaction(&mut self, proposer: MemberId, tx: Transaction) -> Result<ConsensusResult, ConsensusError> {
        let idx = self
            .index_of_member(&proposer)
            .filter(|&i| self.peers[i].is_member())
            .ok_or(ConsensusError::NotAMember(proposer))?;
        let electorate = self.peers[idx].registry.member_ids().copied().collect();
        self.round(idx, Proposal::new(tx), electorate, None)
    }

    /// Submit a channel transaction. `full` must be signed by its initiator;
    /// only its stateless public form reaches the shared ledger.
    pub fn submit_private(&mut self, channel_id: &str, full: Transaction) -> Result<ConsensusResult, SimError> {
        let idx = self
            .index_of_member(&full.initiator)
            .filter(|&i| self.peers[i].is_member())
            .ok_or(ConsensusError::NotAMember(full.initiator))?;
        let channel = self.peers[idx]
            .channels
            .get(channel_id)
            .cloned()
            .ok_or_else(|| AccessError::UnknownChannel(channel_id.to_string()))?;
        for party in [full.initiator, full.responder] {
            if !channel.members.contains(&party) {
                return Err(AccessError::ChannelAccessDenied(party).into());
            }
        }
        if full.channel_id.as_deref() != Some(channel_id) {
            return Err(SimError::BadArgument("transaction names a different channel".into()));
        }
        let public = public_form(&full).sign(&self.peers[idx].keys);
        let proposal = Proposal::private(public, full.clone());
        Ok(self.round(idx, proposal, channel.members, Some(full))?)
    }

    pub fn drop_peer(&mut self, name: &str) -> Result<(), SimError> {
        let i = self.index_of(name)?;
        self.dropped.insert(i);
        Ok(())
    }

    pub fn sever(&mut self, a: &str, b: &str) -> Result<(), SimError> {
        let (a, b) = (self.index_of(a)?, self.index_of(b)?);
        if a != b {
            self.severed.insert((a.min(b), a.max(b)));
        }
        Ok(())
    }

    /// Bring a peer back, heal its links and resynchronize it.
    pub fn restore_peer(&mut self, name: &str) -> Result<(), SimError> {
        let i = self.index_of(name)?;
        self.dropped.remove(&i);
        self.severed.retain(|&(a, b)| a != i && b != i);
        self.sync_peer(i);
        Ok(())
    }

    fn sync_peer(&mut self, i: usize) {
        let source = (0..self.peers.len())
            .filter(|&j| j != i && self.peers[j].is_member() && self.link_up(i, j))
            .max_by_key(|&j| (self.peers[j].chain.len(), self.reachable_count(j), std::cmp::Reverse(j)));
        if let Some(j) = source {
            let node = &self.peers[i];
            let msg = Message::SyncRequest {
                have: node.chain.len() as u64,
                tip: node.chain.tip_digest(),
            };
            self.send(i, j, msg);
            self.drain();
        }
    }

    /// Admit a new peer by majority approval of the current members.
    pub fn join(&mut self, name: &str, role: Role) -> Result<Outcome, SimError> {
        if self.index_of(name).is_ok() {
            return Err(SimError::BadArgument(format!("peer `{name}` already exists")));
        }
        let c = self.peers.len();
        self.peers.push(PeerNode::new(name, role, self.config.seed));
        let request = JoinRequest::new(self.peers[c].identity.clone(), &self.peers[c].keys);
        self.broadcast_to_members(c, &Message::JoinRequest(request.clone()));
        self.drain();
        let approvals = std::mem::take(&mut self.peers[c].approvals);
        let admit = Message::Admit {
            request,
            approvals,
            logical_time: self.now,
        };
        self.broadcast_to_members(c, &admit);
        self.drain();
        self.sync_peer(c);
        Ok(if self.peers[c].is_member() {
            Outcome::Joined(self.peers[c].member_id())
        } else {
            Outcome::JoinRejected
        })
    }

    pub fn create_channel(&mut self, name: &str, members: &[&str]) -> Result<Channel, SimError> {
        let idx: Vec<usize> = members.iter().map(|m| self.index_of(m)).collect::<Result<_, _>>()?;
        let creator = idx[0];
        let ids: BTreeSet<MemberId> = idx.iter().map(|&i| self.peers[i].member_id()).collect();
        let channel = create_channel(name, &ids, &self.peers[creator].registry, self.now)?;
        self.now += 1;
        self.peers[creator].channels.insert(channel.channel_id.clone(), channel.clone());
        self.broadcast_to_members(creator, &Message::Channel(channel.clone()));
        self.drain();
        Ok(channel)
    }

    pub fn channel_by_name(&self, name: &str) -> Option<&Channel> {
        self.peers.iter().find_map(|p| p.channels.values().find(|c| c.name == name))
    }

    /// Seal whatever the sealer holds.
    pub fn seal(&mut self) -> Outcome {
        match self.maybe_seal(true) {
            Some(i) => Outcome::Sealed(i),
            None => Outcome::NothingToSeal,
        }
    }

    /// Build a transaction from `initiator`'s node: run the contract, attach
    /// provenance for workflow runs, and sign.
    #[allow(clippy::too_many_arguments)]
    pub fn prepare(
        &mut self,
        initiator: &str,
        responder: &str,
        asset: &str,
        contract: &str,
        mut state: StateMap,
        channel_id: Option<&str>,
        capture: CaptureOptions,
    ) -> Result<Transaction, SimError> {
        let i = self.index_of(initiator)?;
        let r = self.index_of(responder)?;
        if let Some(text) = state.get(WORKFLOW_KEY) {
            let wf = WorkflowDescription::parse_any(text).map_err(ContractError::from)?;
            state.insert(WORKFLOW_KEY.into(), wf.to_canonical_string());
        }
        let t = self.now;
        let mut tx = Transaction::new(self.peers[i].member_id(), self.peers[r].member_id(), asset, contract, t);
        tx.state = state;
        if let Some(c) = channel_id {
            tx = tx.with_channel(c);
        }
        let mut steps = 0;
        if let Some(c) = self.peers[i].contracts.get(contract).cloned() {
            let result = {
                let mut ctx = ExecutionContext {
                    datasets: &mut self.datasets,
                    resources: &mut self.resources,
                    logical_time: t,
                };
                c.execute(&tx, &mut ctx)?
            };
            steps = result.execution_trace.len() as u64;
            result.merge_into(&mut tx.state)?;
            if contract == WORKFLOW_CONTRACT && !result.execution_trace.is_empty() {
                let wf = workflow_from_state(&tx.state)?;
                let mut content = build_content(&result.execution_trace, &wf, capture.repr)?;
                if let Some(tree) = &mut content.tree {
                    for step in &wf.steps {
                        if let Some(uri) = tx.state.get(&format!("stored.{}", step.output())) {
                            tree.set_location(step.output(), uri);
                        }
                    }
                }
                let record = ProvenanceRecord::capture(content, capture.mode, &mut self.resources)?;
                attach_to_state(&mut tx.state, &record)?;
            }
        }
        self.now = t + steps.max(1);
        Ok(tx.sign(&self.peers[i].keys))
    }

    /// Resolve a parent given as a tx id or as the latest committed
    /// transaction on `asset`, from `peer`'s view.
    pub fn resolve_parent(&self, peer: &str, parent: &str) -> Result<Digest, SimError> {
        let node = &self.peers[self.index_of(peer)?];
        if let Ok(d) = Digest::from_hex(parent) {
            return Ok(d);
        }
        node.chain
            .transactions()
            .filter(|t| t.asset_id == parent)
            .max_by_key(|t| t.sort_key())
            .map(|t| t.id())
            .ok_or_else(|| SimError::BadArgument(format!("no committed transaction for asset `{parent}`")))
    }

    /// State for a derivation from `parent`, resolved on `peer`'s replica
    /// (channel transactions through its side store).
    pub fn derivation_state(
        &self,
        peer: &str,
        parent: &Digest,
        renames: &BTreeMap<String, String>,
    ) -> Result<StateMap, SimError> {
        let node = &self.peers[self.index_of(peer)?];
        let lookup = |d: &Digest| {
            let tx = crate::access::get_transaction(&node.chain, d)?;
            match node.side_store.get(d) {
                Some(full) if tx.is_private() => Some(full.clone()),
                _ => Some(tx.clone()),
            }
        };
        Ok(derive_workflow(parent, &lookup, renames)?)
    }

    /// Run every command of `script`, stopping at the first script error.
    pub fn run_script(&mut self, script: &Script) -> Result<Vec<CommandOutcome>, ScriptError> {
        let mut outcomes = Vec::new();
        for line in &script.lines {
            let outcome = self.execute(&line.command).map_err(|e| ScriptError {
                line: line.line,
                message: e.to_string(),
            })?;
            let mut entry = Value::object()
                .int("at", self.now)
                .str("command", line.command.name())
                .int("line", line.line as u64)
                .str("outcome", outcome.label());
            if let Some(d) = outcome.detail() {
                entry = entry.str("detail", d);
            }
            self.record(entry);
            outcomes.push(CommandOutcome {
                line: line.line,
                command: line.command.name(),
                outcome,
            });
        }
        Ok(outcomes)
    }

    /// Execute one command. Errors are script errors (bad names, bad
    /// arguments); consensus failures are outcomes.
    pub fn execute(&mut self, command: &Command) -> Result<Outcome, SimError> {
        match command {
            Command::Join { name, role } => self.join(name, *role),
            Command::Propose {
                initiator,
                responder,
                asset,
                contract,
                args,
            } => {
                let (state, capture) = split_args(args)?;
                self.propose_named(initiator, responder, asset, contract, state, None, capture)
            }
            Command::Private {
                channel,
                initiator,
                responder,
                asset,
                contract,
                args,
            } => {
                let (state, capture) = split_args(args)?;
                let channel_id = self
                    .channel_by_name(channel)
                    .map(|c| c.channel_id.clone())
                    .ok_or_else(|| AccessError::UnknownChannel(channel.clone()))?;
                self.propose_named(initiator, responder, asset, contract, state, Some(&channel_id), capture)
            }
            Command::Derive {
                initiator,
                responder,
                parent,
                asset,
                args,
            } => {
                let mut renames = BTreeMap::new();
                let mut rest = Vec::new();
                for (k, v) in args {
                    match k.strip_prefix("input.") {
                        Some(old) => {
                            renames.insert(old.to_string(), v.clone());
                        }
                        None => rest.push((k.clone(), v.clone())),
                    }
                }
                let (extra, capture) = split_args(&rest)?;
                let parent_id = self.resolve_parent(initiator, parent)?;
                let mut state = match self.derivation_state(initiator, &parent_id, &renames) {
                    Ok(s) => s,
                    Err(e) => return Ok(Outcome::Failed(e.to_string())),
                };
                state.extend(extra);
                self.propose_named(initiator, responder, asset, WORKFLOW_CONTRACT, state, None, capture)
            }
            Command::Seal => Ok(self.seal()),
            Command::Drop(p) => self.drop_peer(p).map(|_| Outcome::Done),
            Command::Restore(p) => self.restore_peer(p).map(|_| Outcome::Done),
            Command::Sever(a, b) => self.sever(a, b).map(|_| Outcome::Done),
            Command::Dataset { name, points } => {
                self.datasets.insert(name.clone(), Dataset::new(points.clone()));
                Ok(Outcome::Done)
            }
            Command::Channel { name, members } => {
                let members: Vec<&str> = members.iter().map(String::as_str).collect();
                self.create_channel(name, &members).map(|_| Outcome::Done)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn propose_named(
        &mut self,
        initiator: &str,
        responder: &str,
        asset: &str,
        contract: &str,
        state: StateMap,
        channel_id: Option<&str>,
        capture: CaptureOptions,
    ) -> Result<Outcome, SimError> {
        self.index_of(responder)?;
        let tx = match self.prepare(initiator, responder, asset, contract, state, channel_id, capture) {
            Ok(tx) => tx,
            Err(SimError::UnknownPeer(p)) => return Err(SimError::UnknownPeer(p)),
            Err(e) => return Ok(Outcome::Failed(e.to_string())),
        };
        let id = match channel_id {
            Some(_) => public_form(&tx).sign(&self.peers[self.index_of(initiator)?].keys).id(),
            None => tx.id(),
        };
        let result = match channel_id {
            Some(c) => self.submit_private(c, tx),
            None => {
                let proposer = self.peers[self.index_of(initiator)?].member_id();
                self.propose_transaction(proposer, tx).map_err(SimError::from)
            }
        };
        Ok(match result {
            Ok(r) if r.accepted => Outcome::Accepted(id),
            Ok(_) => Outcome::Rejected(id),
            Err(SimError::Consensus(ConsensusError::NetworkStalled { .. })) => Outcome::Stalled,
            Err(e) => Outcome::Failed(e.to_string()),
        })
    }

    /// Seal anything left over, then report.
    pub fn finish(&mut self) -> Outcome {
        self.seal()
    }
}

/// Split `key=value` arguments into transaction state and capture options.
pub fn split_args(args: &[(String, String)]) -> Result<(StateMap, CaptureOptions), SimError> {
    let mut state = StateMap::new();
    let mut capture = CaptureOptions::default();
    for (k, v) in args {
        match k.as_str() {
            "capture" => capture.mode = v.parse().map_err(SimError::BadArgument)?,
            "repr" => capture.repr = v.parse().map_err(SimError::BadArgument)?,
            _ => {
                state.insert(k.clone(), v.clone());
            }
        }
    }
    Ok((state, capture))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandOutcome {
    pub line: usize,
    pub command: &'static str,
    pub outcome: Outcome,
}

/// Result of running a whole workload.
pub struct RunReport {
    pub network: SimNetwork,
    pub outcomes: Vec<CommandOutcome>,
}

impl RunReport {
    pub fn stalled(&self) -> bool {
        self.outcomes.iter().any(|c| c.outcome == Outcome::Stalled)
    }
}

/// Build a network, load `datasets`, run `script` and seal what is left.
pub fn run_network(config: SimConfig, script_text: &str, datasets: DatasetStore) -> Result<RunReport, SimError> {
    let script = Script::parse(script_text)?;
    let mut network = SimNetwork::new(config)?;
    network.datasets = datasets;
    let mut outcomes = network.run_script(&script)?;
    let last = script.lines.last().map_or(0, |l| l.line) + 1;
    let tail = network.finish();
    if tail != Outcome::NothingToSeal {
        outcomes.push(CommandOutcome {
            line: last,
            command: "seal",
            outcome: tail,
        });
    }
    Ok(RunReport { network, outcomes })
}
