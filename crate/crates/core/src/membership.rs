//! Peer identities and the permissioned membership registry.
//!
//! Every peer is identified by an Ed25519 key. Its member id is the hex
//! SHA-256 of the public key. The first identity bootstraps an empty
//! registry; every later candidate needs signed approvals from a strict
//! majority of the members present when it is admitted.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use ed25519_dalek::{Signer as _, SigningKey, Verifier as _, VerifyingKey};
use thiserror::Error;

use crate::canonical::{Canonical, CanonicalError, Fields, Value};
use crate::digest::{compute_digest, Digest};

pub const MIN_SEED_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MembershipError {
    #[error("seed must be at least {MIN_SEED_LEN} bytes, got {0}")]
    SeedTooShort(usize),
    #[error("unknown member {0}")]
    UnknownMember(MemberId),
    #[error("member {0} is already registered")]
    DuplicateMember(MemberId),
    #[error("join request signature does not verify")]
    BadRequestSignature,
    #[error("approval by {0} does not verify")]
    BadApprovalSignature(MemberId),
    #[error("insufficient approvals: {valid} valid, {required} required")]
    InsufficientApprovals { valid: usize, required: usize },
    #[error("admission log is inconsistent at entry {0}")]
    InconsistentLog(usize),
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
}

/// Number of votes needed for a strict majority of `electorate` voters.
pub fn majority_threshold(electorate: usize) -> usize {
    electorate / 2 + 1
}

/// Hex of the SHA-256 of a member's public key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MemberId(Digest);

impl MemberId {
    pub fn from_public_key(public_key: &[u8; 32]) -> Self {
        MemberId(compute_digest(public_key))
    }

    pub fn digest(&self) -> &Digest {
        &self.0
    }

    pub fn short(&self) -> String {
        self.0.short()
    }
}

impl fmt::Display for MemberId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0, f)
    }
}

impl fmt::Debug for MemberId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MemberId({})", self.0.short())
    }
}

impl FromStr for MemberId {
    type Err = crate::digest::DigestParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Digest::from_hex(s).map(MemberId)
    }
}

/// A detached Ed25519 signature.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature([u8; 64]);

impl Signature {
    pub fn from_bytes(bytes: [u8; 64]) -> Self {
        Signature(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 64] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != 128 || !s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return None;
        }
        let mut out = [0u8; 64];
        hex::decode_to_slice(s, &mut out).ok()?;
        Some(Signature(out))
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", &self.to_hex()[..12])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    /// Workflow management system.
    Wms,
    /// A client acting for a human.
    Client,
    /// A data staging service.
    Staging,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Wms => "WMS",
            Role::Client => "CLIENT",
            Role::Staging => "STAGING",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "WMS" => Ok(Role::Wms),
            "CLIENT" | "HUMAN" => Ok(Role::Client),
            "STAGING" => Ok(Role::Staging),
            _ => Err(format!("unknown role `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerIdentity {
    pub member_id: MemberId,
    pub public_key: [u8; 32],
    pub role: Role,
    pub display_name: String,
}

impl PeerIdentity {
    pub fn verifying_key(&self) -> Option<VerifyingKey> {
        VerifyingKey::from_bytes(&self.public_key).ok()
    }

    pub fn verify(&self, message: &[u8], signature: &Signature) -> bool {
        let sig = ed25519_dalek::Signature::from_bytes(signature.as_bytes());
        self.verifying_key()
            .map(|vk| vk.verify(message, &sig).is_ok())
            .unwrap_or(false)
    }
}

impl Canonical for PeerIdentity {
    fn to_value(&self) -> Value {
        Value::object()
            .str("display_name", &self.display_name)
            .str("member_id", self.member_id.to_string())
            .str("public_key", hex::encode(self.public_key))
            .str("role", self.role.as_str())
            .build()
    }

    fn from_value(value: Value) -> Result<Self, CanonicalError> {
        let mut f = Fields::new(value, "identity")?;
        let display_name = f.str("display_name")?;
        let member_id = f.str("member_id")?;
        let public_key = f.str("public_key")?;
        let role = f.str("role")?;
        let pk_bytes = decode_hex32(&public_key).ok_or_else(|| f.invalid("public_key", "expected 64 hex chars"))?;
        let member_id: MemberId = member_id
            .parse()
            .map_err(|_| f.invalid("member_id", "expected digest hex"))?;
        if member_id != MemberId::from_public_key(&pk_bytes) {
            return Err(f.invalid("member_id", "does not match public key digest"));
        }
        let role = Role::from_str(&role)
            .ok()
            .filter(|r| r.as_str() == role)
            .ok_or_else(|| f.invalid("role", "expected WMS, CLIENT or STAGING"))?;
        f.finish()?;
        Ok(PeerIdentity {
            member_id,
            public_key: pk_bytes,
            role,
            display_name,
        })
    }
}

pub(crate) fn decode_hex32(s: &str) -> Option<[u8; 32]> {
    Digest::from_hex(s).ok().map(|d| *d.as_bytes())
}

/// Private key material for one identity.
#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
}

impl KeyPair {
    /// Rebuild from the 32-byte Ed25519 secret seed stored in key files.
    pub fn from_secret_seed(secret: &[u8; 32]) -> Self {
        KeyPair {
            signing: SigningKey::from_bytes(secret),
        }
    }

    pub fn secret_seed(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    pub fn public_key(&self) -> [u8; 32] {
        self.signing.verifying_key().to_bytes()
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        Signature(self.signing.sign(message).to_bytes())
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public_key", &hex::encode(self.public_key()))
            .finish_non_exhaustive()
    }
}

/// Identity for an existing key pair.
pub fn identity_for(keys: &KeyPair, role: Role, display_name: &str) -> PeerIdentity {
    let public_key = keys.public_key();
    PeerIdentity {
        member_id: MemberId::from_public_key(&public_key),
        public_key,
        role,
        display_name: display_name.to_string(),
    }
}

/// Deterministically derive an identity from `seed`.
///
/// The Ed25519 secret seed is the SHA-256 of the full seed, so every seed
/// byte contributes to the key.
pub fn generate_identity(
    role: Role,
    seed: &[u8],
    display_name: &str,
) -> Result<(PeerIdentity, KeyPair), MembershipError> {
    if seed.len() < MIN_SEED_LEN {
        return Err(MembershipError::SeedTooShort(seed.len()));
    }
    let keys = KeyPair::from_secret_seed(compute_digest(seed).as_bytes());
    Ok((identity_for(&keys, role, display_name), keys))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JoinRequest {
    pub candidate: PeerIdentity,
    pub signature: Signature,
}

impl JoinRequest {
    pub fn new(candidate: PeerIdentity, keys: &KeyPair) -> Self {
        let signature = keys.sign(&candidate.to_canonical_bytes());
        JoinRequest {
            candidate,
            signature,
        }
    }

    pub fn verify(&self) -> bool {
        self.candidate
            .verify(&self.candidate.to_canonical_bytes(), &self.signature)
    }
}

/// A member's signed vote to admit a candidate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Approval {
    pub approver: MemberId,
    pub signature: Signature,
}

impl Approval {
    pub fn sign(candidate: &PeerIdentity, approver: MemberId, keys: &KeyPair) -> Self {
        Approval {
            approver,
            signature: keys.sign(&candidate.to_canonical_bytes()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Admission {
    pub member_id: MemberId,
    pub approvers: Vec<MemberId>,
    pub logical_time: u64,
}

impl Canonical for Admission {
    fn to_value(&self) -> Value {
        Value::object()
            .field(
                "approvers",
                Value::List(self.approvers.iter().map(|a| Value::str(a.to_string())).collect()),
            )
            .int("logical_time", self.logical_time)
            .str("member_id", self.member_id.to_string())
            .build()
    }

    fn from_value(value: Value) -> Result<Self, CanonicalError> {
        let mut f = Fields::new(value, "admission")?;
        let approvers = f
            .string_list("approvers")?
            .iter()
            .map(|s| s.parse())
            .collect::<Result<Vec<MemberId>, _>>()
            .map_err(|_| f.invalid("approvers", "expected digest hex"))?;
        let logical_time = f.u64("logical_time")?;
        let member_id = f
            .str("member_id")?
            .parse()
            .map_err(|_| f.invalid("member_id", "expected digest hex"))?;
        f.finish()?;
        Ok(Admission {
            member_id,
            approvers,
            logical_time,
        })
    }
}

/// The set of approved peers plus the ordered log of how each was admitted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MembershipRegistry {
    members: BTreeMap<MemberId, PeerIdentity>,
    admission_log: Vec<Admission>,
}

impl MembershipRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn get(&self, id: &MemberId) -> Option<&PeerIdentity> {
        self.members.get(id)
    }

    pub fn contains(&self, id: &MemberId) -> bool {
        self.members.contains_key(id)
    }

    pub fn members(&self) -> impl Iterator<Item = &PeerIdentity> {
        self.members.values()
    }

    pub fn member_ids(&self) -> impl Iterator<Item = &MemberId> {
        self.members.keys()
    }

    pub fn admission_log(&self) -> &[Admission] {
        &self.admission_log
    }

    pub fn find_by_name(&self, display_name: &str) -> Option<&PeerIdentity> {
        self.members.values().find(|p| p.display_name == display_name)
    }

    /// Admit `request.candidate` if enough current members approve.
    ///
    /// An empty registry admits its first candidate without approvals.
    /// Duplicate approvals from one member count once.
    pub fn approve_join(
        &self,
        request: &JoinRequest,
        approvals: &[Approval],
        logical_time: u64,
    ) -> Result<MembershipRegistry, MembershipError> {
        if !request.verify() {
            return Err(MembershipError::BadRequestSignature);
        }
        let candidate = &request.candidate;
        if self.members.contains_key(&candidate.member_id) {
            return Err(MembershipError::DuplicateMember(candidate.member_id));
        }
        let message = candidate.to_canonical_bytes();
        let mut approvers = BTreeSet::new();
        for approval in approvals {
            let member = self
                .members
                .get(&approval.approver)
                .ok_or(MembershipError::UnknownMember(approval.approver))?;
            if !member.verify(&message, &approval.signature) {
                return Err(MembershipError::BadApprovalSignature(approval.approver));
            }
            approvers.insert(approval.approver);
        }
        if !self.members.is_empty() {
            let required = majority_threshold(self.members.len());
            if approvers.len() < required {
                return Err(MembershipError::InsufficientApprovals {
                    valid: approvers.len(),
                    required,
                });
            }
        }
        let mut next = self.clone();
        next.members.insert(candidate.member_id, candidate.clone());
        next.admission_log.push(Admission {
            member_id: candidate.member_id,
            approvers: approvers.into_iter().collect(),
            logical_time,
        });
        Ok(next)
    }

    pub fn verify_signature(
        &self,
        message: &[u8],
        signature: &Signature,
        member_id: &MemberId,
    ) -> Result<bool, MembershipError> {
        let member = self
            .members
            .get(member_id)
            .ok_or(MembershipError::UnknownMember(*member_id))?;
        Ok(member.verify(message, signature))
    }

    /// Rebuild the registry by replaying the admission log from an empty
    /// registry, re-checking the quorum rule at each step.
    pub fn replay_admissions(&self) -> Result<MembershipRegistry, MembershipError> {
        let mut rebuilt = MembershipRegistry::new();
        for (i, entry) in self.admission_log.iter().enumerate() {
            let identity = self
                .members
                .get(&entry.member_id)
                .ok_or(MembershipError::InconsistentLog(i))?;
            let distinct: BTreeSet<_> = entry.approvers.iter().collect();
            let all_members = distinct.iter().all(|a| rebuilt.members.contains_key(a));
            let quorum = if rebuilt.members.is_empty() {
                entry.approvers.is_empty()
            } else {
                distinct.len() >= majority_threshold(rebuilt.members.len())
            };
            if !all_members
                || !quorum
                || distinct.len() != entry.approvers.len()
                || rebuilt.members.contains_key(&entry.member_id)
            {
                return Err(MembershipError::InconsistentLog(i));
            }
            rebuilt.members.insert(entry.member_id, identity.clone());
            rebuilt.admission_log.push(entry.clone());
        }
        if rebuilt.members.len() != self.members.len() {
            return Err(MembershipError::InconsistentLog(self.admission_log.len()));
        }
        Ok(rebuilt)
    }

    /// Registry file body: one member per line, then one admission per line.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for member in self.members.values() {
            let Value::Object(mut map) = member.to_value() else {
                unreachable!()
            };
            map.insert("record".into(), Value::str("member"));
            out.push_str(&Value::Object(map).to_text());
            out.push('\n');
        }
        for entry in &self.admission_log {
            let Value::Object(mut map) = entry.to_value() else {
                unreachable!()
            };
            map.insert("record".into(), Value::str("admission"));
            out.push_str(&Value::Object(map).to_text());
            out.push('\n');
        }
        out
    }

    pub fn from_file_str(text: &str) -> Result<MembershipRegistry, MembershipError> {
        let mut registry = MembershipRegistry::new();
        let mut in_admissions = false;
        for line in text.lines() {
            let Value::Object(mut map) = Value::parse_str(line)? else {
                return Err(CanonicalError::WrongType {
                    context: "registry",
                    field: "<line>".into(),
                }
                .into());
            };
            let record = match map.remove("record") {
                Some(Value::Str(s)) => s,
                _ => {
                    return Err(CanonicalError::MissingField {
                        context: "registry",
                        field: "record".into(),
                    }
                    .into())
                }
            };
            match record.as_str() {
                "member" if !in_admissions => {
                    let identity = PeerIdentity::from_value(Value::Object(map))?;
                    if registry.members.insert(identity.member_id, identity.clone()).is_some() {
                        return Err(MembershipError::DuplicateMember(identity.member_id));
                    }
                }
                "admission" => {
                    in_admissions = true;
                    registry
                        .admission_log
                        .push(Admission::from_value(Value::Object(map))?);
                }
                _ => {
                    return Err(CanonicalError::InvalidValue {
                        context: "registry",
                        field: "record".into(),
                        reason: format!("unexpected record `{record}`"),
                    }
                    .into())
                }
            }
        }
        registry.replay_admissions()?;
        Ok(registry)
    }
}
