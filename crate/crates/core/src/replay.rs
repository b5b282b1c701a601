//! Fast replay: re-run a committed workflow from its provenance alone and
//! compare the outputs with the digests recorded on the ledger.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::access::SideStore;
use crate::contracts::{execute_workflow, ContractError, DatasetStore, ExecutionContext};
use crate::digest::Digest;
use crate::ledger::Transaction;
use crate::provenance::{extract_from_state, reconstruct_workflow, ProvenanceError};
use crate::store::{MemoryResourceStore, ResourceStore};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplayError {
    #[error("channel transaction state is not available to this peer")]
    NoAccess,
    #[error(transparent)]
    Provenance(#[from] ProvenanceError),
    #[error("input dataset `{0}` is not available")]
    MissingInput(String),
    #[error("re-execution failed: {0}")]
    Execution(#[from] ContractError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputCheck {
    pub name: String,
    pub recorded: Option<Digest>,
    pub replayed: Option<Digest>,
}

impl OutputCheck {
    pub fn matches(&self) -> bool {
        self.recorded.is_some() && self.recorded == self.replayed
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayReport {
    pub workflow: String,
    pub outputs: Vec<OutputCheck>,
}

impl ReplayReport {
    pub fn all_match(&self) -> bool {
        !self.outputs.is_empty() && self.outputs.iter().all(OutputCheck::matches)
    }
}

/// Reconstruct and re-execute the workflow behind `tx`.
///
/// Channel transactions are read through `side`. Inputs are taken from
/// `inputs`; outputs go to scratch stores so nothing on disk changes.
pub fn replay_transaction(
    tx: &Transaction,
    side: Option<&SideStore>,
    resources: &dyn ResourceStore,
    inputs: &DatasetStore,
) -> Result<ReplayReport, ReplayError> {
    let full = if tx.is_private() {
        side.and_then(|s| s.get(&tx.id())).ok_or(ReplayError::NoAccess)?
    } else {
        tx
    };
    let extracted = extract_from_state(&full.state, resources)?;
    let workflow = reconstruct_workflow(&extracted.content)?;
    let mut datasets = DatasetStore::new();
    for name in workflow.external_inputs() {
        let data = inputs.get(&name).ok_or_else(|| ReplayError::MissingInput(name.clone()))?;
        datasets.insert(name, data.clone());
    }
    let mut scratch = MemoryResourceStore::new();
    let mut ctx = ExecutionContext {
        datasets: &mut datasets,
        resources: &mut scratch,
        logical_time: full.logical_time,
    };
    let result = execute_workflow(&workflow, &mut ctx)?;
    let recorded: BTreeMap<String, Digest> = full
        .state
        .iter()
        .filter_map(|(k, v)| {
            let name = k.strip_prefix("out.")?;
            Some((name.to_string(), Digest::from_hex(v).ok()?))
        })
        .collect();
    let mut names: Vec<&String> = recorded.keys().chain(result.output_digests.keys()).collect();
    names.sort();
    names.dedup();
    let outputs = names
        .into_iter()
        .map(|n| OutputCheck {
            name: n.clone(),
            recorded: recorded.get(n).copied(),
            replayed: result.output_digests.get(n).copied(),
        })
        .collect();
    Ok(ReplayReport {
        workflow: workflow.to_compact(),
        outputs,
    })
}
