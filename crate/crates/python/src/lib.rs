//! Python bindings for ledgerflow.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ledgerflow::access::{get_transaction, trace_lineage, walk, Direction, Query};
use ledgerflow::canonical::Canonical;
use ledgerflow::contracts::{step_linreg, Dataset, WorkflowDescription};
use ledgerflow::digest::{compute_digest, Digest};
use ledgerflow::ledger::{validate_chain, Chain};
use ledgerflow::membership::{majority_threshold, MembershipRegistry};
use ledgerflow::replay::replay_transaction;
use ledgerflow::sim::{CaptureOptions, Outcome, Script, SimConfig, SimNetwork};

/// `(line, command, outcome, detail)`
type OutcomeRow = (usize, String, String, Option<String>);
/// `(name, recorded, replayed, matches)`
type OutputRow = (String, Option<String>, Option<String>, bool);

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_id(s: &str) -> PyResult<Digest> {
    Digest::from_hex(s).map_err(value_err)
}

/// SHA-256 of `data` as lowercase hex.
#[pyfunction]
fn digest(data: &[u8]) -> String {
    compute_digest(data).to_hex()
}

/// Least-squares `(slope, intercept)` for a list of `(x, y)` points.
#[pyfunction]
fn linreg(points: Vec<(f64, f64)>) -> PyResult<(f64, f64)> {
    step_linreg(&points).map_err(value_err)
}

/// Endorsements needed to accept a transaction among `n` members.
#[pyfunction]
fn quorum(n: usize) -> usize {
    majority_threshold(n)
}

/// Normalise a workflow given in compact or canonical form to compact form.
#[pyfunction]
fn parse_workflow(text: &str) -> PyResult<String> {
    WorkflowDescription::parse_any(text).map(|w| w.to_compact()).map_err(value_err)
}

/// Validate ledger text against registry text. Returns `(valid, first_failure_index)`.
#[pyfunction]
fn verify_ledger(ledger: &str, registry: &str) -> PyResult<(bool, Option<u64>)> {
    let registry = MembershipRegistry::from_file_str(registry).map_err(value_err)?;
    let chain = Chain::from_ledger_bytes(ledger.as_bytes()).map_err(value_err)?;
    let report = validate_chain(&chain, &registry);
    Ok((report.valid, report.first_failure_index))
}

/// A simulated peer network.
#[pyclass(unsendable, name = "Network")]
struct PyNetwork {
    inner: SimNetwork,
}

impl PyNetwork {
    fn peer(&self, name: &str) -> PyResult<&ledgerflow::sim::PeerNode> {
        self.inner
            .peer(name)
            .ok_or_else(|| PyKeyError::new_err(format!("unknown peer `{name}`")))
    }
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (peers = 5, seed = 42, batch_size = 4))]
    fn new(peers: usize, seed: u64, batch_size: usize) -> PyResult<Self> {
        let inner = SimNetwork::new(SimConfig { peers, seed, batch_size }).map_err(value_err)?;
        Ok(PyNetwork { inner })
    }

    fn add_dataset(&mut self, name: &str, points: Vec<(f64, f64)>) {
        self.inner.datasets.insert(name, Dataset::new(points));
    }

    /// Run a workload script. Returns `(line, command, outcome, detail)` tuples.
    fn run_script(&mut self, text: &str) -> PyResult<Vec<OutcomeRow>> {
        let script = Script::parse(text).map_err(value_err)?;
        let outcomes = self.inner.run_script(&script).map_err(value_err)?;
        Ok(outcomes
            .into_iter()
            .map(|c| (c.line, c.command.to_string(), c.outcome.label().to_string(), c.outcome.detail()))
            .collect())
    }

    /// Propose a transaction and return its id, or raise if it is not accepted.
    #[pyo3(signature = (initiator, responder, asset, contract, state = BTreeMap::new()))]
    fn propose(
        &mut self,
        initiator: &str,
        responder: &str,
        asset: &str,
        contract: &str,
        state: BTreeMap<String, String>,
    ) -> PyResult<String> {
        let tx = self
            .inner
            .prepare(initiator, responder, asset, contract, state, None, CaptureOptions::default())
            .map_err(value_err)?;
        let proposer = self.peer(initiator)?.member_id();
        let result = self.inner.propose_transaction(proposer, tx).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        if !result.accepted {
            return Err(PyRuntimeError::new_err(format!("transaction {} rejected", result.tx_id)));
        }
        Ok(result.tx_id.to_hex())
    }

    /// Seal pending transactions; returns the new block index or None.
    fn seal(&mut self) -> Option<u64> {
        match self.inner.seal() {
            Outcome::Sealed(i) => Some(i),
            _ => None,
        }
    }

    fn drop_peer(&mut self, name: &str) -> PyResult<()> {
        self.inner.drop_peer(name).map_err(value_err)
    }

    fn restore_peer(&mut self, name: &str) -> PyResult<()> {
        self.inner.restore_peer(name).map_err(value_err)
    }

    fn chains_agree(&self) -> bool {
        self.inner.chains_agree()
    }

    fn peer_names(&self) -> Vec<String> {
        self.inner.peers().iter().map(|p| p.name.clone()).collect()
    }

    #[pyo3(signature = (peer = "peer0"))]
    fn ledger(&self, peer: &str) -> PyResult<String> {
        Ok(self.peer(peer)?.chain.to_ledger_string())
    }

    #[pyo3(signature = (peer = "peer0"))]
    fn registry(&self, peer: &str) -> PyResult<String> {
        Ok(self.peer(peer)?.registry.to_file_string())
    }

    fn trace(&self) -> String {
        self.inner.trace_text()
    }

    /// Committed transactions matching walk terms such as `contract=note`.
    #[pyo3(signature = (terms = Vec::new(), backward = false, peer = "peer0"))]
    fn walk(&self, terms: Vec<String>, backward: bool, peer: &str) -> PyResult<Vec<String>> {
        let node = self.peer(peer)?;
        let query = Query::parse(&terms, &node.registry).map_err(value_err)?;
        let direction = if backward { Direction::Backward } else { Direction::Forward };
        Ok(walk(&node.chain, direction, &query).iter().map(|t| t.id().to_hex()).collect())
    }

    /// A committed transaction in canonical form.
    #[pyo3(signature = (tx_id, peer = "peer0"))]
    fn transaction(&self, tx_id: &str, peer: &str) -> PyResult<String> {
        let node = self.peer(peer)?;
        let id = parse_id(tx_id)?;
        get_transaction(&node.chain, &id)
            .map(|t| t.to_canonical_string())
            .ok_or_else(|| PyKeyError::new_err(tx_id.to_string()))
    }

    /// Ancestor ids, nearest first, and the unresolved parent if the chain breaks.
    #[pyo3(signature = (tx_id, peer = "peer0"))]
    fn lineage(&self, tx_id: &str, peer: &str) -> PyResult<(Vec<String>, Option<String>)> {
        let node = self.peer(peer)?;
        let lineage = trace_lineage(&node.chain, &parse_id(tx_id)?, Some(&node.side_store)).map_err(value_err)?;
        Ok((lineage.ancestors.iter().map(Digest::to_hex).collect(), lineage.unresolved_tail))
    }

    /// Replay a workflow transaction. Returns `(name, recorded, replayed, matches)` per output.
    #[pyo3(signature = (tx_id, peer = "peer0"))]
    fn replay(&self, tx_id: &str, peer: &str) -> PyResult<Vec<OutputRow>> {
        let node = self.peer(peer)?;
        let id = parse_id(tx_id)?;
        let tx = get_transaction(&node.chain, &id).ok_or_else(|| PyKeyError::new_err(tx_id.to_string()))?;
        let report = replay_transaction(tx, Some(&node.side_store), &self.inner.resources, &self.inner.datasets)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(report
            .outputs
            .iter()
            .map(|o| (o.name.clone(), o.recorded.map(|d| d.to_hex()), o.replayed.map(|d| d.to_hex()), o.matches()))
            .collect())
    }
}

#[pymodule]
fn pyledgerflow(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(digest, m)?)?;
    m.add_function(wrap_pyfunction!(linreg, m)?)?;
    m.add_function(wrap_pyfunction!(quorum, m)?)?;
    m.add_function(wrap_pyfunction!(parse_workflow, m)?)?;
    m.add_function(wrap_pyfunction!(verify_ledger, m)?)?;
    m.add_class::<PyNetwork>()?;
    Ok(())
}
