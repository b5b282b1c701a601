//! Permissioned ledger for recording scientific workflow executions and their
//! provenance.

pub mod access;
pub mod canonical;
pub mod cli;
pub mod consensus;
pub mod contracts;
pub mod digest;
pub mod ledger;
pub mod membership;
pub mod provenance;
pub mod replay;
pub mod sim;
pub mod store;
