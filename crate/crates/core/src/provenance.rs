//! Provenance records for workflow executions.
//!
//! Two representations are built from a contract's execution trace: a tree
//! rooted at the final created entity, with edges pointing backwards in time,
//! and a time-forward event log. Either or both are attached to the
//! transaction state, embedded whole or as a digest-checked reference into the
//! resource store.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::canonical::{Canonical, CanonicalError, Fields, Value};
use crate::contracts::{
    digest_map_from, digest_map_to_value, Op, Step, StepEvent, WorkflowDescription, WORKFLOW_KEY,
};
use crate::digest::{compute_digest, Digest};
use crate::ledger::{StateMap, Transaction};
use crate::store::ResourceStore;

pub const STANDARD_TREE: &str = "PROV-DM-SUBSET";
pub const STANDARD_EVENTS: &str = "EVENT-LOG-V1";
pub const STANDARD_BUNDLE: &str = "PROV-BUNDLE-V1";

pub const KEY_EMBEDDED: &str = "prov.embedded";
pub const KEY_STANDARD: &str = "prov.standard";
pub const KEY_REF_URI: &str = "prov.ref.uri";
pub const KEY_REF_DIGEST: &str = "prov.ref.digest";
pub const KEY_PARENT: &str = "parent.txid";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProvenanceError {
    #[error("trace is empty")]
    EmptyTrace,
    #[error("trace does not match the workflow: {0}")]
    InconsistentTrace(String),
    #[error("state already uses reserved key `{0}`")]
    ReservedKeyCollision(String),
    #[error("transaction carries no provenance")]
    NoProvenance,
    #[error("referenced resource `{0}` is not available")]
    UnresolvableReference(String),
    #[error("referenced resource digest is {actual}, expected {expected}")]
    DigestMismatch { expected: Digest, actual: Digest },
    #[error("record holds neither a workflow copy nor a usable tree")]
    IrrecoverableRecord,
    #[error("parent transaction {0} is unknown")]
    UnknownParent(Digest),
    #[error("malformed provenance: {0}")]
    Malformed(String),
    #[error("resource store: {0}")]
    Store(String),
}

impl From<CanonicalError> for ProvenanceError {
    fn from(e: CanonicalError) -> Self {
        ProvenanceError::Malformed(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EntityKind {
    Dataset,
    File,
    Asset,
}

impl EntityKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EntityKind::Dataset => "dataset",
            EntityKind::File => "file",
            EntityKind::Asset => "asset",
        }
    }
}

impl FromStr for EntityKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dataset" => Ok(EntityKind::Dataset),
            "file" => Ok(EntityKind::File),
            "asset" => Ok(EntityKind::Asset),
            _ => Err(format!("unknown entity kind `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvEntity {
    pub entity_id: String,
    pub kind: EntityKind,
    pub digest: Option<Digest>,
    pub location: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvActivity {
    pub activity_id: String,
    pub op: String,
    pub started: u64,
    pub ended: u64,
    /// Step parameters, kept so the step can be rebuilt.
    pub params: BTreeMap<String, String>,
    /// Informational attributes with no effect on replay.
    pub attributes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeKind {
    Used,
    GeneratedBy,
    StoredIn,
}

impl EdgeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EdgeKind::Used => "used",
            EdgeKind::GeneratedBy => "generatedBy",
            EdgeKind::StoredIn => "storedIn",
        }
    }
}

impl FromStr for EdgeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "used" => Ok(EdgeKind::Used),
            "generatedBy" => Ok(EdgeKind::GeneratedBy),
            "storedIn" => Ok(EdgeKind::StoredIn),
            _ => Err(format!("unknown edge kind `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvEdge {
    pub kind: EdgeKind,
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvTree {
    pub root: String,
    pub entities: Vec<ProvEntity>,
    pub activities: Vec<ProvActivity>,
    pub edges: Vec<ProvEdge>,
}

impl ProvTree {
    pub fn entity(&self, id: &str) -> Option<&ProvEntity> {
        self.entities.iter().find(|e| e.entity_id == id)
    }

    pub fn activity(&self, id: &str) -> Option<&ProvActivity> {
        self.activities.iter().find(|a| a.activity_id == id)
    }

    pub fn root_entity(&self) -> Option<&ProvEntity> {
        self.entity(&self.root)
    }

    /// Node ids reachable from the root along edges.
    pub fn reachable(&self) -> BTreeSet<&str> {
        let mut seen = BTreeSet::from([self.root.as_str()]);
        let mut queue = VecDeque::from([self.root.as_str()]);
        while let Some(node) = queue.pop_front() {
            for e in self.edges.iter().filter(|e| e.from == node) {
                if seen.insert(e.to.as_str()) {
                    queue.push_back(e.to.as_str());
                }
            }
        }
        seen
    }

    /// Activities met walking back from the root, latest first.
    pub fn activities_backward(&self) -> Vec<&ProvActivity> {
        let reached = self.reachable();
        let mut acts: Vec<_> = self
            .activities
            .iter()
            .filter(|a| reached.contains(a.activity_id.as_str()))
            .collect();
        acts.sort_by(|a, b| (b.started, &b.activity_id).cmp(&(a.started, &a.activity_id)));
        acts
    }

    /// Record where a file entity was written.
    pub fn set_location(&mut self, entity_id: &str, location: &str) {
        if let Some(e) = self.entities.iter_mut().find(|e| e.entity_id == entity_id) {
            e.location = Some(location.to_string());
        }
    }

    fn edge_target(&self, from: &str, kind: EdgeKind) -> Option<&str> {
        self.edges
            .iter()
            .find(|e| e.kind == kind && e.from == from)
            .map(|e| e.to.as_str())
    }

    fn edge_source(&self, to: &str, kind: EdgeKind) -> Option<&str> {
        self.edges
            .iter()
            .find(|e| e.kind == kind && e.to == to)
            .map(|e| e.from.as_str())
    }
}

fn string_map_value(map: &BTreeMap<String, String>) -> Value {
    Value::string_map(map)
}

impl Canonical for ProvEntity {
    fn to_value(&self) -> Value {
        let digest = self.digest.map(|d| d.to_hex());
        Value::object()
            .opt_str("digest", digest.as_deref())
            .str("entity_id", &self.entity_id)
            .str("kind", self.kind.as_str())
            .opt_str("location", self.location.as_deref())
            .build()
    }

    fn from_value(value: Value) -> Result<Self, CanonicalError> {
        let mut f = Fields::new(value, "entity")?;
        let digest = match f.opt_str("digest")? {
            Some(s) => Some(Digest::from_hex(&s).map_err(|e| f.invalid("digest", e.to_string()))?),
            None => None,
        };
        let entity_id = f.str("entity_id")?;
        let kind = f.str("kind")?;
        let kind = kind.parse().map_err(|e: String| f.invalid("kind", e))?;
        let location = f.opt_str("location")?;
        f.finish()?;
        Ok(ProvEntity {
            entity_id,
            kind,
            digest,
            location,
        })
    }
}

impl Canonical for ProvActivity {
    fn to_value(&self) -> Value {
        Value::object()
            .str("activity_id", &self.activity_id)
            .field("attributes", string_map_value(&self.attributes))
            .int("ended", self.ended)
            .str("op", &self.op)
            .field("params", string_map_value(&self.params))
            .int("started", self.started)
            .build()
    }

    fn from_value(value: Value) -> Result<Self, CanonicalError> {
        let mut f = Fields::new(value, "activity")?;
        let activity_id = f.str("activity_id")?;
        let attributes = f.string_map("attributes")?;
        let ended = f.u64("ended")?;
        let op = f.str("op")?;
        let params = f.string_map("params")?;
        let started = f.u64("started")?;
        if started > ended {
            return Err(f.invalid("started", "activity ends before it starts"));
        }
        f.finish()?;
        Ok(ProvActivity {
            activity_id,
            op,
            started,
            ended,
            params,
            attributes,
        })
    }
}

impl Canonical for ProvEdge {
    fn to_value(&self) -> Value {
        Value::object()
            .str("from", &self.from)
            .str("kind", self.kind.as_str())
            .str("to", &self.to)
            .build()
    }

    fn from_value(value: Value) -> Result<Self, CanonicalError> {
        let mut f = Fields::new(value, "edge")?;
        let from = f.str("from")?;
        let kind = f.str("kind")?;
        let kind = kind.parse().map_err(|e: String| f.invalid("kind", e))?;
        let to = f.str("to")?;
        f.finish()?;
        Ok(ProvEdge { kind, from, to })
    }
}

fn list_of<T: Canonical>(items: &[T]) -> Value {
    Value::List(items.iter().map(Canonical::to_value).collect())
}

fn parse_list<T: Canonical>(f: &mut Fields, field: &str) -> Result<Vec<T>, CanonicalError> {
    f.list(field)?.into_iter().map(T::from_value).collect()
}

impl Canonical for ProvTree {
    fn to_value(&self) -> Value {
        Value::object()
            .field("activities", list_of(&self.activities))
            .field("edges", list_of(&self.edges))
            .field("entities", list_of(&self.entities))
            .str("root", &self.root)
            .build()
    }

    fn from_value(value: Value) -> Result<Self, CanonicalError> {
        let mut f = Fields::new(value, "prov_tree")?;
        let activities = parse_list(&mut f, "activities")?;
        let edges = parse_list(&mut f, "edges")?;
        let entities = parse_list(&mut f, "entities")?;
        let root = f.str("root")?;
        f.finish()?;
        Ok(ProvTree {
            root,
            entities,
            activities,
            edges,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventLogRecord {
    pub events: Vec<StepEvent>,
    /// Digests of the workflow's external inputs.
    pub inputs: BTreeMap<String, Digest>,
    /// Digests of everything the workflow produced.
    pub outputs: BTreeMap<String, Digest>,
    pub workflow: Option<WorkflowDescription>,
}

impl Canonical for EventLogRecord {
    fn to_value(&self) -> Value {
        let mut b = Value::object()
            .field("events", list_of(&self.events))
            .field("inputs", digest_map_to_value(&self.inputs))
            .field("outputs", digest_map_to_value(&self.outputs));
        if let Some(w) = &self.workflow {
            b = b.field("workflow", w.to_value());
        }
        b.build()
    }

    fn from_value(value: Value) -> Result<Self, CanonicalError> {
        let mut f = Fields::new(value, "event_log")?;
        let events: Vec<StepEvent> = parse_list(&mut f, "events")?;
        if events.windows(2).any(|w| w[0].logical_time >= w[1].logical_time) {
            return Err(f.invalid("events", "logical times must strictly increase"));
        }
        let inputs = digest_map_from(&mut f, "inputs")?;
        let outputs = digest_map_from(&mut f, "outputs")?;
        let workflow = f.take_opt("workflow").map(WorkflowDescription::from_value).transpose()?;
        f.finish()?;
        Ok(EventLogRecord {
            events,
            inputs,
            outputs,
            workflow,
        })
    }
}

/// The representations carried inline or behind a reference.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EmbeddedRecord {
    pub tree: Option<ProvTree>,
    pub events: Option<EventLogRecord>,
}

impl EmbeddedRecord {
    pub fn is_empty(&self) -> bool {
        self.tree.is_none() && self.events.is_none()
    }

    /// Standard name for this content when written as a resource.
    pub fn standard(&self) -> &'static str {
        match (&self.tree, &self.events) {
            (Some(_), None) => STANDARD_TREE,
            (None, Some(_)) => STANDARD_EVENTS,
            _ => STANDARD_BUNDLE,
        }
    }

    /// Resource body: the bare representation when there is only one.
    pub fn resource_body(&self) -> Vec<u8> {
        match (&self.tree, &self.events) {
            (Some(t), None) => t.to_canonical_bytes(),
            (None, Some(e)) => e.to_canonical_bytes(),
            _ => self.to_canonical_bytes(),
        }
    }

    fn from_resource(standard: &str, body: &[u8]) -> Result<Option<EmbeddedRecord>, ProvenanceError> {
        Ok(match standard {
            STANDARD_TREE => Some(EmbeddedRecord {
                tree: Some(ProvTree::from_canonical_bytes(body)?),
                events: None,
            }),
            STANDARD_EVENTS => Some(EmbeddedRecord {
                tree: None,
                events: Some(EventLogRecord::from_canonical_bytes(body)?),
            }),
            STANDARD_BUNDLE => Some(EmbeddedRecord::from_canonical_bytes(body)?),
            _ => None,
        })
    }
}

impl Canonical for EmbeddedRecord {
    fn to_value(&self) -> Value {
        let mut b = Value::object();
        if let Some(e) = &self.events {
            b = b.field("events", e.to_value());
        }
        if let Some(t) = &self.tree {
            b = b.field("tree", t.to_value());
        }
        b.build()
    }

    fn from_value(value: Value) -> Result<Self, CanonicalError> {
        let mut f = Fields::new(value, "embedded_record")?;
        let events = f.take_opt("events").map(EventLogRecord::from_value).transpose()?;
        let tree = f.take_opt("tree").map(ProvTree::from_value).transpose()?;
        if tree.is_none() && events.is_none() {
            return Err(f.invalid("tree", "record carries no representation"));
        }
        f.finish()?;
        Ok(EmbeddedRecord { tree, events })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReferenceRecord {
    pub standard: String,
    pub uri: String,
    pub digest: Digest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CaptureMode {
    Embedded,
    Reference,
    Both,
}

impl FromStr for CaptureMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "embedded" => Ok(CaptureMode::Embedded),
            "reference" => Ok(CaptureMode::Reference),
            "both" => Ok(CaptureMode::Both),
            _ => Err(format!("unknown capture mode `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Representation {
    Tree,
    Events,
    Both,
}

impl FromStr for Representation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tree" => Ok(Representation::Tree),
            "events" => Ok(Representation::Events),
            "both" => Ok(Representation::Both),
            _ => Err(format!("unknown representation `{s}`")),
        }
    }
}

/// Provenance as attached to a transaction. The mode follows from which
/// parts are present, so a record is always consistent with its mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvenanceRecord {
    pub embedded: Option<EmbeddedRecord>,
    pub reference: Option<ReferenceRecord>,
}

impl ProvenanceRecord {
    pub fn mode(&self) -> Option<CaptureMode> {
        match (&self.embedded, &self.reference) {
            (Some(_), None) => Some(CaptureMode::Embedded),
            (None, Some(_)) => Some(CaptureMode::Reference),
            (Some(_), Some(_)) => Some(CaptureMode::Both),
            (None, None) => None,
        }
    }

    /// Package `content` for attachment, writing a resource when the mode
    /// calls for a reference.
    pub fn capture(
        content: EmbeddedRecord,
        mode: CaptureMode,
        store: &mut dyn ResourceStore,
    ) -> Result<ProvenanceRecord, ProvenanceError> {
        if content.is_empty() {
            return Err(ProvenanceError::EmptyTrace);
        }
        let reference = match mode {
            CaptureMode::Embedded => None,
            CaptureMode::Reference | CaptureMode::Both => {
                let (uri, digest) = store
                    .put(&content.resource_body())
                    .map_err(|e| ProvenanceError::Store(e.to_string()))?;
                Some(ReferenceRecord {
                    standard: content.standard().to_string(),
                    uri,
                    digest,
                })
            }
        };
        let embedded = match mode {
            CaptureMode::Reference => None,
            _ => Some(content),
        };
        Ok(ProvenanceRecord { embedded, reference })
    }
}

/// What `extract_record` found: the record as attached, plus the usable
/// content it resolves to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extracted {
    pub record: ProvenanceRecord,
    pub content: ProvContent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProvContent {
    Structured(EmbeddedRecord),
    /// A resource in a standard this library does not read.
    Opaque { standard: String, body: Vec<u8> },
}

fn check_trace(trace: &[StepEvent], workflow: &WorkflowDescription) -> Result<(), ProvenanceError> {
    if trace.is_empty() {
        return Err(ProvenanceError::EmptyTrace);
    }
    if trace.len() != workflow.steps.len() {
        return Err(ProvenanceError::InconsistentTrace(format!(
            "{} events for {} steps",
            trace.len(),
            workflow.steps.len()
        )));
    }
    for (i, (ev, step)) in trace.iter().zip(&workflow.steps).enumerate() {
        let matches = ev.step_index == i as u64
            && ev.op == step.op.as_str()
            && ev.input_digests.keys().eq([step.input()])
            && ev.output_digests.keys().eq([step.output()]);
        if !matches {
            return Err(ProvenanceError::InconsistentTrace(format!("event {i} does not match step `{step}`")));
        }
    }
    if trace.windows(2).any(|w| w[0].logical_time >= w[1].logical_time) {
        return Err(ProvenanceError::InconsistentTrace("event times do not increase".into()));
    }
    Ok(())
}

pub fn activity_id(step_index: usize) -> String {
    format!("act-{step_index:04}")
}

/// Build the provenance tree for an executed workflow.
///
/// The root is the output of the last computing step (or the data a
/// store-only workflow saved). Every step must contribute to the root.
pub fn build_tree_record(trace: &[StepEvent], workflow: &WorkflowDescription) -> Result<ProvTree, ProvenanceError> {
    check_trace(trace, workflow)?;
    let mut entities: Vec<ProvEntity> = Vec::new();
    let mut activities = Vec::new();
    let mut edges = Vec::new();
    let mut add_entity = |id: &str, kind, digest| {
        if !entities.iter().any(|e: &ProvEntity| e.entity_id == id) {
            entities.push(ProvEntity {
                entity_id: id.to_string(),
                kind,
                digest: Some(digest),
                location: None,
            });
        }
    };
    for (i, (ev, step)) in trace.iter().zip(&workflow.steps).enumerate() {
        let act = activity_id(i);
        let (input, output) = (step.input(), step.output());
        add_entity(input, EntityKind::Dataset, ev.input_digests[input]);
        let out_kind = if step.op == Op::Store { EntityKind::File } else { EntityKind::Dataset };
        add_entity(output, out_kind, ev.output_digests[output]);
        activities.push(ProvActivity {
            activity_id: act.clone(),
            op: step.op.as_str().to_string(),
            started: ev.logical_time,
            ended: ev.logical_time,
            params: step.params.clone(),
            attributes: BTreeMap::new(),
        });
        let edge = |kind, from: &str, to: &str| ProvEdge {
            kind,
            from: from.to_string(),
            to: to.to_string(),
        };
        if step.op == Op::Store {
            edges.push(edge(EdgeKind::StoredIn, input, output));
            edges.push(edge(EdgeKind::GeneratedBy, output, &act));
        } else {
            edges.push(edge(EdgeKind::GeneratedBy, output, &act));
            edges.push(edge(EdgeKind::Used, &act, input));
        }
    }
    let root = match workflow.steps.iter().rev().find(|s| s.op != Op::Store) {
        Some(step) => step.output(),
        None => workflow.steps.last().expect("non-empty").input(),
    }
    .to_string();
    let tree = ProvTree {
        root,
        entities,
        activities,
        edges,
    };
    let reached = tree.reachable();
    if let Some(i) = tree
        .activities
        .iter()
        .position(|a| !reached.contains(a.activity_id.as_str()))
    {
        return Err(ProvenanceError::InconsistentTrace(format!(
            "step {i} does not contribute to `{}`",
            tree.root
        )));
    }
    Ok(tree)
}

/// Build the time-forward event log for an executed workflow.
pub fn build_event_record(
    trace: &[StepEvent],
    workflow: &WorkflowDescription,
    embed_workflow: bool,
) -> Result<EventLogRecord, ProvenanceError> {
    check_trace(trace, workflow)?;
    let mut inputs = BTreeMap::new();
    for name in workflow.external_inputs() {
        if let Some(d) = trace.iter().find_map(|e| e.input_digests.get(&name)) {
            inputs.insert(name, *d);
        }
    }
    let outputs = trace
        .iter()
        .flat_map(|e| e.output_digests.iter().map(|(k, v)| (k.clone(), *v)))
        .collect();
    Ok(EventLogRecord {
        events: trace.to_vec(),
        inputs,
        outputs,
        workflow: embed_workflow.then(|| workflow.clone()),
    })
}

/// Build the requested representations of one execution.
pub fn build_content(
    trace: &[StepEvent],
    workflow: &WorkflowDescription,
    repr: Representation,
) -> Result<EmbeddedRecord, ProvenanceError> {
    let tree = match repr {
        Representation::Events => None,
        _ => Some(build_tree_record(trace, workflow)?),
    };
    let events = match repr {
        Representation::Tree => None,
        _ => Some(build_event_record(trace, workflow, true)?),
    };
    Ok(EmbeddedRecord { tree, events })
}

/// Write the record's `prov.*` keys into the transaction state.
pub fn attach_provenance(tx: &mut Transaction, record: &ProvenanceRecord) -> Result<(), ProvenanceError> {
    attach_to_state(&mut tx.state, record)
}

pub fn attach_to_state(state: &mut StateMap, record: &ProvenanceRecord) -> Result<(), ProvenanceError> {
    if let Some(k) = state.keys().find(|k| k.starts_with(crate::contracts::RESERVED_PREFIX)) {
        return Err(ProvenanceError::ReservedKeyCollision(k.clone()));
    }
    if record.mode().is_none() {
        return Err(ProvenanceError::NoProvenance);
    }
    if let Some(e) = &record.embedded {
        state.insert(KEY_EMBEDDED.into(), e.to_canonical_string());
    }
    if let Some(r) = &record.reference {
        state.insert(KEY_STANDARD.into(), r.standard.clone());
        state.insert(KEY_REF_URI.into(), r.uri.clone());
        state.insert(KEY_REF_DIGEST.into(), r.digest.to_hex());
    }
    Ok(())
}

/// Read back the provenance attached to `tx`.
///
/// References are fetched and digest-checked. When both forms are present
/// the embedded copy is used; the reference is still checked if it can be
/// fetched, but a missing resource is tolerated.
pub fn extract_record(tx: &Transaction, store: &dyn ResourceStore) -> Result<Extracted, ProvenanceError> {
    extract_from_state(&tx.state, store)
}

pub fn extract_from_state(state: &StateMap, store: &dyn ResourceStore) -> Result<Extracted, ProvenanceError> {
    let embedded = state
        .get(KEY_EMBEDDED)
        .map(|s| EmbeddedRecord::from_canonical_str(s))
        .transpose()?;
    let reference = match (state.get(KEY_STANDARD), state.get(KEY_REF_URI), state.get(KEY_REF_DIGEST)) {
        (None, None, None) => None,
        (Some(standard), Some(uri), Some(digest)) => Some(ReferenceRecord {
            standard: standard.clone(),
            uri: uri.clone(),
            digest: Digest::from_hex(digest).map_err(|e| ProvenanceError::Malformed(e.to_string()))?,
        }),
        _ => return Err(ProvenanceError::Malformed("incomplete reference keys".into())),
    };
    let record = ProvenanceRecord { embedded, reference };
    let content = match (&record.embedded, &record.reference) {
        (None, None) => return Err(ProvenanceError::NoProvenance),
        (Some(e), reference) => {
            if let Some(r) = reference {
                if let Some(body) = fetch(store, r)? {
                    verify(r, &body)?;
                }
            }
            ProvContent::Structured(e.clone())
        }
        (None, Some(r)) => {
            let body = fetch(store, r)?.ok_or_else(|| ProvenanceError::UnresolvableReference(r.uri.clone()))?;
            verify(r, &body)?;
            match EmbeddedRecord::from_resource(&r.standard, &body)? {
                Some(e) => ProvContent::Structured(e),
                None => ProvContent::Opaque {
                    standard: r.standard.clone(),
                    body,
                },
            }
        }
    };
    Ok(Extracted { record, content })
}

fn fetch(store: &dyn ResourceStore, r: &ReferenceRecord) -> Result<Option<Vec<u8>>, ProvenanceError> {
    store.get(&r.uri).map_err(|e| ProvenanceError::Store(e.to_string()))
}

fn verify(r: &ReferenceRecord, body: &[u8]) -> Result<(), ProvenanceError> {
    let actual = compute_digest(body);
    if actual != r.digest {
        return Err(ProvenanceError::DigestMismatch {
            expected: r.digest,
            actual,
        });
    }
    Ok(())
}

/// Rebuild the workflow an execution followed.
///
/// An embedded workflow copy is used as-is. Otherwise the steps are read off
/// the tree and put in dependency order, ties going to the lower activity id.
pub fn reconstruct_workflow(content: &ProvContent) -> Result<WorkflowDescription, ProvenanceError> {
    let ProvContent::Structured(record) = content else {
        return Err(ProvenanceError::IrrecoverableRecord);
    };
    if let Some(w) = record.events.as_ref().and_then(|e| e.workflow.as_ref()) {
        return Ok(w.clone());
    }
    let tree = record.tree.as_ref().ok_or(ProvenanceError::IrrecoverableRecord)?;
    workflow_from_tree(tree).ok_or(ProvenanceError::IrrecoverableRecord)
}

fn workflow_from_tree(tree: &ProvTree) -> Option<WorkflowDescription> {
    let mut steps: BTreeMap<&str, Step> = BTreeMap::new();
    for act in &tree.activities {
        let op: Op = act.op.parse().ok()?;
        let id = act.activity_id.as_str();
        let output = tree.edge_source(id, EdgeKind::GeneratedBy)?;
        let input = match op {
            Op::Store => tree.edge_source(output, EdgeKind::StoredIn)?,
            _ => tree.edge_target(id, EdgeKind::Used)?,
        };
        let mut step = Step::new(op, input, output);
        step.params = act.params.clone();
        steps.insert(id, step);
    }
    let producer: BTreeMap<&str, &str> = steps.iter().map(|(id, s)| (s.output(), *id)).collect();
    let mut deps: BTreeMap<&str, Option<&str>> = BTreeMap::new();
    for (id, s) in &steps {
        deps.insert(id, producer.get(s.input()).copied().filter(|p| p != id));
    }
    let mut ordered = Vec::new();
    let mut done = BTreeSet::new();
    while ordered.len() < steps.len() {
        // lowest ready activity id first
        let next = deps
            .iter()
            .find(|(id, dep)| !done.contains(*id) && dep.is_none_or(|d| done.contains(d)))
            .map(|(id, _)| *id)?;
        done.insert(next);
        ordered.push(steps[next].clone());
    }
    let workflow = WorkflowDescription::new(ordered);
    workflow.validate().ok()?;
    Some(workflow)
}

/// State for a transaction deriving from `parent_id`.
///
/// `renames` maps dataset names in the parent's workflow to replacements,
/// for example a new input dataset.
pub fn derive_workflow(
    parent_id: &Digest,
    resolve: &dyn Fn(&Digest) -> Option<Transaction>,
    renames: &BTreeMap<String, String>,
) -> Result<StateMap, ProvenanceError> {
    let parent = resolve(parent_id).ok_or(ProvenanceError::UnknownParent(*parent_id))?;
    let text = parent
        .state
        .get(WORKFLOW_KEY)
        .ok_or(ProvenanceError::IrrecoverableRecord)?;
    let mut workflow = WorkflowDescription::from_canonical_str(text)?;
    let rename = |name: &mut String| {
        if let Some(new) = renames.get(name.as_str()) {
            *name = new.clone();
        }
    };
    for step in &mut workflow.steps {
        step.inputs.values_mut().for_each(rename);
        step.outputs.values_mut().for_each(rename);
    }
    workflow
        .validate()
        .map_err(|e| ProvenanceError::Malformed(e.to_string()))?;
    let mut state = StateMap::new();
    state.insert(WORKFLOW_KEY.into(), workflow.to_canonical_string());
    state.insert(KEY_PARENT.into(), parent_id.to_hex());
    Ok(state)
}

impl fmt::Display for ProvTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "root {}", self.root)?;
        for e in &self.edges {
            writeln!(f, "  {} {} {}", e.from, e.kind.as_str(), e.to)?;
        }
        Ok(())
    }
}
