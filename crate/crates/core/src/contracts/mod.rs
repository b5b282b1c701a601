//! Deterministic contracts executed in response to transactions.
//!
//! Contracts are native handlers registered identically on every peer. The
//! built-in `workflow_execution` contract runs the workflow carried under the
//! `workflow` state key and injects its results back into state:
//!
//! * `out.<name>`: digest of every dataset or file a step produced;
//! * `in.<name>`: digest of every external input;
//! * `result.<model>.slope` / `result.<model>.intercept` for `linreg` steps;
//! * `stored.<file>`: resource uri written by `store` steps.

pub mod dataset;
pub mod workflow;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::canonical::{Canonical, CanonicalError, Fields, Value};
use crate::digest::Digest;
use crate::ledger::{StateMap, Transaction};
use crate::store::ResourceStore;

pub use dataset::{format_real, step_linreg, step_scale, Dataset, DatasetStore, DegenerateInput};
pub use workflow::{Op, Step, WorkflowDescription, WorkflowError};

pub const WORKFLOW_CONTRACT: &str = "workflow_execution";
pub const NOTE_CONTRACT: &str = "note";
pub const WORKFLOW_KEY: &str = "workflow";

/// State keys reserved for the provenance attachment path.
pub const RESERVED_PREFIX: &str = "prov.";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContractError {
    #[error("contract `{0}` is not registered")]
    ContractNotFound(String),
    #[error("contract `{0}` is already registered")]
    DuplicateContract(String),
    #[error("malformed workflow: {0}")]
    MalformedWorkflow(#[from] WorkflowError),
    #[error("step {step_index} failed: {reason}")]
    StepFailure { step_index: usize, reason: String },
    #[error("precondition failed: {0}")]
    PreconditionFailed(String),
    #[error("contract output collides with existing state key `{0}`")]
    StateCollision(String),
}

/// Everything a contract may touch while executing.
pub struct ExecutionContext<'a> {
    pub datasets: &'a mut DatasetStore,
    pub resources: &'a mut dyn ResourceStore,
    /// Logical time assigned to the first step; later steps follow on.
    pub logical_time: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepEvent {
    pub step_index: u64,
    pub op: String,
    pub input_digests: BTreeMap<String, Digest>,
    pub output_digests: BTreeMap<String, Digest>,
    pub logical_time: u64,
}

fn digest_map_value(map: &BTreeMap<String, Digest>) -> Value {
    Value::Object(
        map.iter()
            .map(|(k, v)| (k.clone(), Value::str(v.to_hex())))
            .collect(),
    )
}

pub(crate) fn digest_map_from(
    f: &mut Fields,
    field: &str,
) -> Result<BTreeMap<String, Digest>, CanonicalError> {
    let raw = f.string_map(field)?;
    raw.into_iter()
        .map(|(k, v)| {
            Digest::from_hex(&v)
                .map(|d| (k, d))
                .map_err(|e| f.invalid(field, e.to_string()))
        })
        .collect()
}

pub(crate) fn digest_map_to_value(map: &BTreeMap<String, Digest>) -> Value {
    digest_map_value(map)
}

impl Canonical for StepEvent {
    fn to_value(&self) -> Value {
        Value::object()
            .field("input_digests", digest_map_value(&self.input_digests))
            .int("logical_time", self.logical_time)
            .str("op", &self.op)
            .field("output_digests", digest_map_value(&self.output_digests))
            .int("step_index", self.step_index)
            .build()
    }

    fn from_value(value: Value) -> Result<Self, CanonicalError> {
        let mut f = Fields::new(value, "step_event")?;
        let input_digests = digest_map_from(&mut f, "input_digests")?;
        let logical_time = f.u64("logical_time")?;
        let op = f.str("op")?;
        let output_digests = digest_map_from(&mut f, "output_digests")?;
        let step_index = f.u64("step_index")?;
        f.finish()?;
        Ok(StepEvent {
            step_index,
            op,
            input_digests,
            output_digests,
            logical_time,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ContractResult {
    pub state_entries: StateMap,
    pub execution_trace: Vec<StepEvent>,
    pub output_digests: BTreeMap<String, Digest>,
}

impl Canonical for ContractResult {
    fn to_value(&self) -> Value {
        Value::object()
            .field(
                "execution_trace",
                Value::List(self.execution_trace.iter().map(Canonical::to_value).collect()),
            )
            .field("output_digests", digest_map_value(&self.output_digests))
            .field("state_entries", Value::string_map(&self.state_entries))
            .build()
    }

    fn from_value(value: Value) -> Result<Self, CanonicalError> {
        let mut f = Fields::new(value, "contract_result")?;
        let execution_trace = f
            .list("execution_trace")?
            .into_iter()
            .map(StepEvent::from_value)
            .collect::<Result<_, _>>()?;
        let output_digests = digest_map_from(&mut f, "output_digests")?;
        let state_entries = f.string_map("state_entries")?;
        f.finish()?;
        Ok(ContractResult {
            state_entries,
            execution_trace,
            output_digests,
        })
    }
}

impl ContractResult {
    /// Merge the contract's state entries into `state`, refusing overwrites.
    pub fn merge_into(&self, state: &mut StateMap) -> Result<(), ContractError> {
        if let Some(k) = self.state_entries.keys().find(|k| state.contains_key(*k)) {
            return Err(ContractError::StateCollision(k.clone()));
        }
        state.extend(self.state_entries.iter().map(|(k, v)| (k.clone(), v.clone())));
        Ok(())
    }
}

pub trait Contract: Send + Sync {
    fn contract_id(&self) -> &str;

    fn description(&self) -> &str;

    /// Purpose check run by every endorsing peer.
    fn precondition(&self, state: &StateMap) -> Result<(), ContractError>;

    fn execute(
        &self,
        tx: &Transaction,
        ctx: &mut ExecutionContext<'_>,
    ) -> Result<ContractResult, ContractError>;
}

/// Runs the workflow stored under the `workflow` state key.
#[derive(Debug, Default, Clone, Copy)]
pub struct WorkflowContract;

impl Contract for WorkflowContract {
    fn contract_id(&self) -> &str {
        WORKFLOW_CONTRACT
    }

    fn description(&self) -> &str {
        "executes a workflow description and records its outputs"
    }

    fn precondition(&self, state: &StateMap) -> Result<(), ContractError> {
        workflow_from_state(state).map(|_| ())
    }

    fn execute(
        &self,
        tx: &Transaction,
        ctx: &mut ExecutionContext<'_>,
    ) -> Result<ContractResult, ContractError> {
        let workflow = workflow_from_state(&tx.state)?;
        execute_workflow(&workflow, ctx)
    }
}

/// Records its state as-is; used for annotations and bulk workloads.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoteContract;

impl Contract for NoteContract {
    fn contract_id(&self) -> &str {
        NOTE_CONTRACT
    }

    fn description(&self) -> &str {
        "records a free-form annotation"
    }

    fn precondition(&self, _state: &StateMap) -> Result<(), ContractError> {
        Ok(())
    }

    fn execute(
        &self,
        _tx: &Transaction,
        _ctx: &mut ExecutionContext<'_>,
    ) -> Result<ContractResult, ContractError> {
        Ok(ContractResult::default())
    }
}

pub fn workflow_from_state(state: &StateMap) -> Result<WorkflowDescription, ContractError> {
    let text = state.get(WORKFLOW_KEY).ok_or_else(|| {
        ContractError::PreconditionFailed(format!("state has no `{WORKFLOW_KEY}` entry"))
    })?;
    let workflow = WorkflowDescription::from_canonical_str(text).map_err(WorkflowError::from)?;
    workflow.validate()?;
    Ok(workflow)
}

/// Execute every step in order, recording one event per step.
pub fn execute_workflow(
    workflow: &WorkflowDescription,
    ctx: &mut ExecutionContext<'_>,
) -> Result<ContractResult, ContractError> {
    workflow.validate()?;
    let mut result = ContractResult::default();
    for input in workflow.external_inputs() {
        let data = ctx.datasets.get(&input).ok_or_else(|| ContractError::StepFailure {
            step_index: first_use(workflow, &input),
            reason: format!("input dataset `{input}` is not available"),
        })?;
        result.state_entries.insert(format!("in.{input}"), data.digest().to_hex());
    }
    for (i, step) in workflow.steps.iter().enumerate() {
        let fail = |reason: String| ContractError::StepFailure {
            step_index: i,
            reason,
        };
        let input_name = step.input();
        let output_name = step.output();
        let input = ctx
            .datasets
            .get(input_name)
            .cloned()
            .ok_or_else(|| fail(format!("dataset `{input_name}` is not available")))?;
        let output = match step.op {
            Op::Linreg => {
                let (slope, intercept) =
                    step_linreg(&input.points).map_err(|e| fail(e.to_string()))?;
                result
                    .state_entries
                    .insert(format!("result.{output_name}.slope"), format_real(slope));
                result
                    .state_entries
                    .insert(format!("result.{output_name}.intercept"), format_real(intercept));
                Dataset::new(vec![(slope, intercept)])
            }
            Op::Scale => {
                let factor: f64 = step.params["factor"]
                    .parse()
                    .map_err(|_| fail("bad factor".into()))?;
                step_scale(&input, factor)
            }
            Op::Store => {
                let (uri, _) = ctx
                    .resources
                    .put(input.encode().as_bytes())
                    .map_err(|e| fail(format!("store failed: {e}")))?;
                result.state_entries.insert(format!("stored.{output_name}"), uri);
                input.clone()
            }
        };
        let in_digest = input.digest();
        let out_digest = output.digest();
        ctx.datasets.insert(output_name, output);
        result
            .state_entries
            .insert(format!("out.{output_name}"), out_digest.to_hex());
        result.output_digests.insert(output_name.to_string(), out_digest);
        result.execution_trace.push(StepEvent {
            step_index: i as u64,
            op: step.op.as_str().to_string(),
            input_digests: BTreeMap::from([(input_name.to_string(), in_digest)]),
            output_digests: BTreeMap::from([(output_name.to_string(), out_digest)]),
            logical_time: ctx.logical_time + i as u64,
        });
    }
    debug_assert!(!result.state_entries.keys().any(|k| k.starts_with(RESERVED_PREFIX)));
    Ok(result)
}

fn first_use(workflow: &WorkflowDescription, name: &str) -> usize {
    workflow
        .steps
        .iter()
        .position(|s| s.input() == name)
        .unwrap_or(0)
}

/// Contracts available on one peer.
#[derive(Clone, Default)]
pub struct ContractRegistry {
    contracts: BTreeMap<String, Arc<dyn Contract>>,
}

impl fmt::Debug for ContractRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.contracts.keys()).finish()
    }
}

impl ContractRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// The built-in contracts every peer registers.
    pub fn builtin() -> Self {
        let mut registry = ContractRegistry::new();
        registry
            .register(Arc::new(WorkflowContract))
            .expect("fresh registry");
        registry
            .register(Arc::new(NoteContract))
            .expect("fresh registry");
        registry
    }

    pub fn register(&mut self, contract: Arc<dyn Contract>) -> Result<(), ContractError> {
        let id = contract.contract_id().to_string();
        if self.contracts.contains_key(&id) {
            return Err(ContractError::DuplicateContract(id));
        }
        self.contracts.insert(id, contract);
        Ok(())
    }

    pub fn get(&self, contract_id: &str) -> Option<&Arc<dyn Contract>> {
        self.contracts.get(contract_id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.contracts.keys()
    }

    pub fn execute(
        &self,
        contract_id: &str,
        tx: &Transaction,
        ctx: &mut ExecutionContext<'_>,
    ) -> Result<ContractResult, ContractError> {
        let contract = self
            .get(contract_id)
            .ok_or_else(|| ContractError::ContractNotFound(contract_id.to_string()))?;
        contract.execute(tx, ctx)
    }
}
