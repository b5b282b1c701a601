//! Command-line front end. Each command returns its exit code and output so
//! it can be driven from tests as well as from the binary.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | invalid chain (`verify`) or replay digest mismatch (`replay`) |
//! | 2 | bad input: script error, unreadable or truncated file, unknown id, missing dataset |
//! | 3 | a proposal stalled for lack of reachable peers (`run`) |
//! | 4 | provenance cannot be recovered or is not visible to this peer (`replay`) |

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::access::{get_transaction, trace_lineage, walk, Channel, Direction, Query, SideStore};
use crate::canonical::{Canonical, Value};
use crate::contracts::{DatasetStore, WORKFLOW_KEY};
use crate::digest::Digest;
use crate::ledger::{validate_chain, Chain, LedgerError, Transaction};
use crate::membership::{MemberId, MembershipRegistry};
use crate::provenance::{derive_workflow, extract_from_state, ProvContent, ProvenanceError};
use crate::replay::{replay_transaction, ReplayError};
use crate::sim::{run_network, SimConfig, SimError};
use crate::store::DirResourceStore;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_STALLED: i32 = 3;
pub const EXIT_IRRECOVERABLE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "ledgerflow", version, about = "Permissioned ledger for workflow provenance")]
pub struct Cli {
    /// Directory holding peer ledgers, registry, resources and datasets.
    #[arg(long, global = true, env = "LEDGERFLOW_DATA_DIR", default_value = "ledgerflow-data")]
    pub data_dir: PathBuf,
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, global = true, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: u64,
    #[arg(long, global = true, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub peers: u64,
    /// Emit one canonical object per line.
    #[arg(long, global = true)]
    pub porcelain: bool,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Run a workload script on a fresh network and write its state.
    Run { script: PathBuf },
    /// Check a ledger file against a registry file.
    Verify {
        /// Ledger file (default: the named peer's ledger).
        #[arg(long)]
        ledger: Option<PathBuf>,
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long, default_value = "peer0")]
        peer: String,
    },
    /// Show one transaction by id.
    Query {
        tx_id: String,
        #[arg(long, default_value = "peer0")]
        peer: String,
    },
    /// List transactions in time order, filtered by terms such as
    /// `from=peer0 contract=note has=prov.embedded channel=no time>=3`.
    Walk {
        terms: Vec<String>,
        #[arg(long)]
        backward: bool,
        #[arg(long, default_value = "peer0")]
        peer: String,
    },
    /// Re-run a committed workflow from its provenance and compare outputs.
    Replay {
        tx_id: String,
        #[arg(long, default_value = "peer0")]
        peer: String,
        /// Input datasets (default: `<data-dir>/datasets`).
        #[arg(long)]
        datasets: Option<PathBuf>,
    },
    /// Show a transaction's lineage and the workflow a derivation would
    /// propose, as a script line.
    Derive {
        parent: String,
        /// Dataset renames, `input.<old>=<new>`.
        renames: Vec<String>,
        #[arg(long, default_value = "peer0")]
        peer: String,
    },
    /// Print a peer's ledger file, or with `--prov` a transaction's
    /// provenance record.
    Export {
        #[arg(long, default_value = "peer0")]
        peer: String,
        #[arg(long)]
        prov: Option<String>,
    },
    /// List channels known to a peer.
    Channel {
        #[arg(long, default_value = "peer0")]
        peer: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Output {
    fn ok(stdout: String) -> Self {
        Output {
            code: EXIT_OK,
            stdout,
            stderr: String::new(),
        }
    }

    fn fail(code: i32, message: impl Into<String>) -> Self {
        let mut stderr = message.into();
        stderr.push('\n');
        Output {
            code,
            stdout: String::new(),
            stderr,
        }
    }
}

/// Paths under the data directory.
#[derive(Debug, Clone)]
pub struct DataDir {
    pub root: PathBuf,
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DataDir { root: root.into() }
    }

    pub fn peer_dir(&self, peer: &str) -> PathBuf {
        self.root.join("peers").join(peer)
    }

    pub fn ledger(&self, peer: &str) -> PathBuf {
        self.peer_dir(peer).join("ledger.ndjl")
    }

    pub fn side_store(&self, peer: &str) -> PathBuf {
        self.peer_dir(peer).join("sidestore.ndjl")
    }

    pub fn channels(&self, peer: &str) -> PathBuf {
        self.peer_dir(peer).join("channels.ndjl")
    }

    pub fn key(&self, peer: &str) -> PathBuf {
        self.peer_dir(peer).join("key.hex")
    }

    pub fn registry(&self) -> PathBuf {
        self.root.join("registry.txt")
    }

    pub fn resources(&self) -> PathBuf {
        self.root.join("resources")
    }

    pub fn datasets(&self) -> PathBuf {
        self.root.join("datasets")
    }

    pub fn trace(&self) -> PathBuf {
        self.root.join("trace.log")
    }
}

fn read(path: &Path) -> Result<Vec<u8>, Output> {
    fs::read(path).map_err(|e| Output::fail(EXIT_INPUT, format!("{}: {e}", path.display())))
}

fn load_registry(path: &Path) -> Result<MembershipRegistry, Output> {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Output::fail(EXIT_INPUT, "registry is not UTF-8"))?;
    MembershipRegistry::from_file_str(&text).map_err(|e| Output::fail(EXIT_INPUT, format!("{}: {e}", path.display())))
}

fn load_chain(path: &Path) -> Result<Chain, Output> {
    let bytes = read(path)?;
    Chain::from_ledger_bytes(&bytes).map_err(|e| Output::fail(EXIT_INPUT, format!("{}: {e}", path.display())))
}

fn load_side(dir: &DataDir, peer: &str) -> Result<SideStore, Output> {
    let path = dir.side_store(peer);
    if !path.exists() {
        return Ok(SideStore::new());
    }
    let text = String::from_utf8(read(&path)?).map_err(|_| Output::fail(EXIT_INPUT, "side store is not UTF-8"))?;
    SideStore::from_file_str(&text).map_err(|e| Output::fail(EXIT_INPUT, format!("{}: {e}", path.display())))
}

fn load_channels(dir: &DataDir, peer: &str) -> Result<Vec<Channel>, Output> {
    let path = dir.channels(peer);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = String::from_utf8(read(&path)?).map_err(|_| Output::fail(EXIT_INPUT, "channel file is not UTF-8"))?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| Channel::from_canonical_str(l).map_err(|e| Output::fail(EXIT_INPUT, format!("{}: {e}", path.display()))))
        .collect()
}

fn parse_tx_id(s: &str) -> Result<Digest, Output> {
    Digest::from_hex(s).map_err(|e| Output::fail(EXIT_INPUT, format!("bad transaction id: {e}")))
}

fn name_of(registry: &MembershipRegistry, id: &MemberId) -> String {
    registry
        .get(id)
        .map(|p| p.display_name.clone())
        .unwrap_or_else(|| id.short())
}

fn write_private(path: &Path, body: &[u8]) -> io::Result<()> {
    let mut options = fs::OpenOptions::new();
    options.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        options.mode(0o600);
    }
    io::Write::write_all(&mut options.open(path)?, body)
}

fn tx_line(tx: &Transaction, registry: &MembershipRegistry) -> String {
    let channel = if tx.is_private() { " private" } else { "" };
    format!(
        "{} {} {} {} -> {} {}{}",
        tx.logical_time,
        tx.id(),
        tx.contract_id,
        name_of(registry, &tx.initiator),
        name_of(registry, &tx.responder),
        tx.asset_id,
        channel
    )
}

/// Run a workload script and write every peer's state under the data dir.
pub fn cmd_run(dir: &DataDir, script_path: &Path, config: SimConfig, porcelain: bool) -> Output {
    let text = match fs::read_to_string(script_path) {
        Ok(t) => t,
        Err(e) => return Output::fail(EXIT_INPUT, format!("{}: {e}", script_path.display())),
    };
    let datasets = if dir.datasets().is_dir() {
        match DatasetStore::load_dir(&dir.datasets()) {
            Ok(d) => d,
            Err(e) => return Output::fail(EXIT_INPUT, format!("datasets: {e}")),
        }
    } else {
        DatasetStore::new()
    };
    let report = match run_network(config, &text, datasets) {
        Ok(r) => r,
        Err(SimError::Script(e)) => return Output::fail(EXIT_INPUT, format!("{}:{}: {}", script_path.display(), e.line, e.message)),
        Err(e) => return Output::fail(EXIT_INPUT, e.to_string()),
    };
    if let Err(e) = write_network(dir, &report.network) {
        return Output::fail(EXIT_INPUT, format!("writing {}: {e}", dir.root.display()));
    }
    let mut stdout = String::new();
    for c in &report.outcomes {
        if porcelain {
            let mut b = Value::object()
                .str("command", c.command)
                .int("line", c.line as u64)
                .str("outcome", c.outcome.label());
            if let Some(d) = c.outcome.detail() {
                b = b.str("detail", d);
            }
            stdout.push_str(&b.build().to_text());
        } else {
            stdout.push_str(&format!("line {} {} {}", c.line, c.command, c.outcome.label()));
            if let Some(d) = c.outcome.detail() {
                stdout.push(' ');
                stdout.push_str(&d);
            }
        }
        stdout.push('\n');
    }
    let net = &report.network;
    let blocks = net.peers().iter().map(|p| p.chain.len()).max().unwrap_or(0);
    if !porcelain {
        stdout.push_str(&format!(
            "peers {} blocks {} chains {}\n",
            net.peers().len(),
            blocks,
            if net.chains_agree() { "agree" } else { "differ" }
        ));
    }
    Output {
        code: if report.stalled() { EXIT_STALLED } else { EXIT_OK },
        stdout,
        stderr: String::new(),
    }
}

fn write_network(dir: &DataDir, net: &crate::sim::SimNetwork) -> io::Result<()> {
    fs::create_dir_all(&dir.root)?;
    let peers_dir = dir.root.join("peers");
    if peers_dir.exists() {
        fs::remove_dir_all(&peers_dir)?;
    }
    for p in net.peers() {
        fs::create_dir_all(dir.peer_dir(&p.name))?;
        fs::write(dir.ledger(&p.name), p.chain.to_ledger_string())?;
        fs::write(dir.side_store(&p.name), p.side_store.to_file_string())?;
        let channels: String = p.channels.values().map(|c| c.to_canonical_string() + "\n").collect();
        fs::write(dir.channels(&p.name), channels)?;
        write_private(&dir.key(&p.name), hex::encode(p.keys().secret_seed()).as_bytes())?;
    }
    let registry = net
        .peers()
        .iter()
        .map(|p| &p.registry)
        .max_by_key(|r| r.admission_log().len())
        .expect("at least one peer");
    fs::write(dir.registry(), registry.to_file_string())?;
    net.resources.save_to_dir(&dir.resources())?;
    net.datasets.save_dir(&dir.datasets())?;
    fs::write(dir.trace(), net.trace_text())?;
    Ok(())
}

/// Validate a ledger file. Unreadable or truncated files report the line
/// at fault as the failing block index.
pub fn cmd_verify(ledger: &Path, registry: &Path, porcelain: bool) -> Output {
    let registry = match load_registry(registry) {
        Ok(r) => r,
        Err(o) => return o,
    };
    let bytes = match read(ledger) {
        Ok(b) => b,
        Err(o) => return o,
    };
    let chain = match Chain::from_ledger_bytes(&bytes) {
        Ok(c) => c,
        Err(e) => {
            let line = match &e {
                LedgerError::Parse { line, .. } | LedgerError::Truncated { line } => *line as u64,
                _ => 0,
            };
            let stdout = if porcelain {
                Value::object().str("error", e.to_string()).int("first_failure_index", line).build().to_text() + "\n"
            } else {
                format!("unreadable: first failure at block {line}: {e}\n")
            };
            return Output {
                code: EXIT_INPUT,
                stdout,
                stderr: String::new(),
            };
        }
    };
    let report = validate_chain(&chain, &registry);
    let stdout = if porcelain {
        report.to_canonical_string() + "\n"
    } else if report.valid {
        format!("valid: {} blocks\n", chain.len())
    } else {
        format!(
            "invalid: first failure at block {} ({})\n",
            report.first_failure_index.unwrap_or(0),
            report.failure_kind.map(|k| k.as_str()).unwrap_or("unknown")
        )
    };
    Output {
        code: if report.valid { EXIT_OK } else { EXIT_INVALID },
        stdout,
        stderr: String::new(),
    }
}

/// Show one transaction. Channel transactions show their full state when
/// the peer is a channel member.
pub fn cmd_query(dir: &DataDir, peer: &str, tx_id: &str, porcelain: bool) -> Output {
    let run = || -> Result<Output, Output> {
        let id = parse_tx_id(tx_id)?;
        let chain = load_chain(&dir.ledger(peer))?;
        let registry = load_registry(&dir.registry())?;
        let side = load_side(dir, peer)?;
        let tx = get_transaction(&chain, &id).ok_or_else(|| Output::fail(EXIT_INPUT, format!("no transaction {id}")))?;
        let shown = side.get(&id).filter(|_| tx.is_private()).unwrap_or(tx);
        if porcelain {
            return Ok(Output::ok(shown.to_canonical_string() + "\n"));
        }
        let mut out = tx_line(tx, &registry) + "\n";
        if tx.is_private() && side.get(&id).is_none() {
            out.push_str("  (state held in channel side stores)\n");
        }
        for (k, v) in &shown.state {
            let v = if v.len() > 100 { format!("{}... ({} bytes)", &v[..100], v.len()) } else { v.clone() };
            out.push_str(&format!("  {k} = {v}\n"));
        }
        Ok(Output::ok(out))
    };
    run().unwrap_or_else(|o| o)
}

pub fn cmd_walk(dir: &DataDir, peer: &str, terms: &[String], backward: bool, porcelain: bool) -> Output {
    let run = || -> Result<Output, Output> {
        let chain = load_chain(&dir.ledger(peer))?;
        let registry = load_registry(&dir.registry())?;
        let query = Query::parse(terms, &registry).map_err(|e| Output::fail(EXIT_INPUT, e.to_string()))?;
        let direction = if backward { Direction::Backward } else { Direction::Forward };
        let mut out = String::new();
        for tx in walk(&chain, direction, &query) {
            if porcelain {
                out.push_str(&tx.to_canonical_string());
            } else {
                out.push_str(&tx_line(&tx, &registry));
            }
            out.push('\n');
        }
        Ok(Output::ok(out))
    };
    run().unwrap_or_else(|o| o)
}

pub fn cmd_replay(dir: &DataDir, peer: &str, tx_id: &str, datasets: Option<&Path>, porcelain: bool) -> Output {
    let run = || -> Result<Output, Output> {
        let id = parse_tx_id(tx_id)?;
        let chain = load_chain(&dir.ledger(peer))?;
        let side = load_side(dir, peer)?;
        let tx = get_transaction(&chain, &id).ok_or_else(|| Output::fail(EXIT_INPUT, format!("no transaction {id}")))?;
        let inputs_dir = datasets.map(Path::to_path_buf).unwrap_or_else(|| dir.datasets());
        let inputs = DatasetStore::load_dir(&inputs_dir).map_err(|e| Output::fail(EXIT_INPUT, format!("datasets: {e}")))?;
        let resources = DirResourceStore::new(dir.resources());
        let report = replay_transaction(tx, Some(&side), &resources, &inputs).map_err(|e| {
            let code = match &e {
                ReplayError::MissingInput(_) => EXIT_INPUT,
                ReplayError::Provenance(ProvenanceError::DigestMismatch { .. }) | ReplayError::Execution(_) => EXIT_INVALID,
                _ => EXIT_IRRECOVERABLE,
            };
            Output::fail(code, e.to_string())
        })?;
        let mut out = String::new();
        if !porcelain {
            out.push_str(&format!("workflow {}\n", report.workflow));
        }
        let show = |d: Option<Digest>| d.map(|d| d.to_hex()).unwrap_or_else(|| "-".into());
        for o in &report.outputs {
            if porcelain {
                out.push_str(
                    &Value::object()
                        .str("match", if o.matches() { "true" } else { "false" })
                        .str("name", &o.name)
                        .str("recorded", show(o.recorded))
                        .str("replayed", show(o.replayed))
                        .build()
                        .to_text(),
                );
            } else {
                let status = if o.matches() { "ok" } else { "MISMATCH" };
                out.push_str(&format!("{status} {} {}", o.name, show(o.replayed)));
            }
            out.push('\n');
        }
        Ok(Output {
            code: if report.all_match() { EXIT_OK } else { EXIT_INVALID },
            stdout: out,
            stderr: String::new(),
        })
    };
    run().unwrap_or_else(|o| o)
}

pub fn cmd_derive(dir: &DataDir, peer: &str, parent: &str, renames: &[String], porcelain: bool) -> Output {
    let run = || -> Result<Output, Output> {
        let id = parse_tx_id(parent)?;
        let chain = load_chain(&dir.ledger(peer))?;
        let side = load_side(dir, peer)?;
        let mut map = std::collections::BTreeMap::new();
        for r in renames {
            let (k, v) = r
                .strip_prefix("input.")
                .and_then(|r| r.split_once('='))
                .ok_or_else(|| Output::fail(EXIT_INPUT, format!("expected input.<old>=<new>, got `{r}`")))?;
            map.insert(k.to_string(), v.to_string());
        }
        let lookup = |d: &Digest| {
            let tx = get_transaction(&chain, d)?;
            Some(side.get(d).filter(|_| tx.is_private()).unwrap_or(tx).clone())
        };
        let state = derive_workflow(&id, &lookup, &map).map_err(|e| {
            let code = match e {
                ProvenanceError::UnknownParent(_) => EXIT_INPUT,
                _ => EXIT_IRRECOVERABLE,
            };
            Output::fail(code, e.to_string())
        })?;
        let lineage = trace_lineage(&chain, &id, Some(&side)).map_err(|e| Output::fail(EXIT_INPUT, e.to_string()))?;
        let workflow = crate::contracts::WorkflowDescription::from_canonical_str(&state[WORKFLOW_KEY]).expect("derived state is canonical");
        if porcelain {
            let v = Value::object()
                .field("lineage", Value::List(lineage.ancestors.iter().map(|d| Value::str(d.to_hex())).collect()))
                .str("parent", id.to_hex())
                .opt_str("unresolved", lineage.unresolved_tail.as_deref())
                .str("workflow", workflow.to_compact())
                .build();
            return Ok(Output::ok(v.to_text() + "\n"));
        }
        let mut out = format!("parent {id}\n");
        for a in &lineage.ancestors {
            out.push_str(&format!("ancestor {a}\n"));
        }
        if let Some(t) = &lineage.unresolved_tail {
            out.push_str(&format!("unresolved {t}\n"));
        }
        out.push_str(&format!("workflow {}\n", workflow.to_compact()));
        let args: Vec<String> = map.iter().map(|(k, v)| format!("input.{k}={v}")).collect();
        out.push_str(&format!("script: derive <initiator> <responder> {id} <asset> {}\n", args.join(" ")));
        Ok(Output::ok(out))
    };
    run().unwrap_or_else(|o| o)
}

pub fn cmd_export(dir: &DataDir, peer: &str, prov: Option<&str>) -> Output {
    let run = || -> Result<Output, Output> {
        let Some(tx_id) = prov else {
            let bytes = read(&dir.ledger(peer))?;
            return Ok(Output::ok(String::from_utf8_lossy(&bytes).into_owned()));
        };
        let id = parse_tx_id(tx_id)?;
        let chain = load_chain(&dir.ledger(peer))?;
        let side = load_side(dir, peer)?;
        let tx = get_transaction(&chain, &id).ok_or_else(|| Output::fail(EXIT_INPUT, format!("no transaction {id}")))?;
        let full = if tx.is_private() {
            side.get(&id).ok_or_else(|| Output::fail(EXIT_IRRECOVERABLE, "channel state is not held by this peer"))?
        } else {
            tx
        };
        let resources = DirResourceStore::new(dir.resources());
        let extracted = extract_from_state(&full.state, &resources).map_err(|e| Output::fail(EXIT_IRRECOVERABLE, e.to_string()))?;
        Ok(match extracted.content {
            ProvContent::Structured(record) => Output::ok(record.to_canonical_string() + "\n"),
            ProvContent::Opaque { body, .. } => Output::ok(String::from_utf8_lossy(&body).into_owned()),
        })
    };
    run().unwrap_or_else(|o| o)
}

pub fn cmd_channel(dir: &DataDir, peer: &str, porcelain: bool) -> Output {
    let run = || -> Result<Output, Output> {
        let registry = load_registry(&dir.registry())?;
        let mut out = String::new();
        for c in load_channels(dir, peer)? {
            if porcelain {
                out.push_str(&c.to_canonical_string());
            } else {
                let members: Vec<String> = c.members.iter().map(|m| name_of(&registry, m)).collect();
                out.push_str(&format!("{} {} {}", c.name, c.channel_id, members.join(",")));
            }
            out.push('\n');
        }
        Ok(Output::ok(out))
    };
    run().unwrap_or_else(|o| o)
}

/// Dispatch a parsed command line.
pub fn execute(cli: &Cli) -> Output {
    let dir = DataDir::new(&cli.data_dir);
    match &cli.command {
        Cmd::Run { script } => {
            let config = SimConfig {
                peers: cli.peers as usize,
                seed: cli.seed,
                batch_size: cli.batch_size as usize,
            };
            cmd_run(&dir, script, config, cli.porcelain)
        }
        Cmd::Verify { ledger, registry, peer } => {
            let ledger = ledger.clone().unwrap_or_else(|| dir.ledger(peer));
            let registry = registry.clone().unwrap_or_else(|| dir.registry());
            cmd_verify(&ledger, &registry, cli.porcelain)
        }
        Cmd::Query { tx_id, peer } => cmd_query(&dir, peer, tx_id, cli.porcelain),
        Cmd::Walk { terms, backward, peer } => cmd_walk(&dir, peer, terms, *backward, cli.porcelain),
        Cmd::Replay { tx_id, peer, datasets } => cmd_replay(&dir, peer, tx_id, datasets.as_deref(), cli.porcelain),
        Cmd::Derive { parent, renames, peer } => cmd_derive(&dir, peer, parent, renames, cli.porcelain),
        Cmd::Export { peer, prov } => cmd_export(&dir, peer, prov.as_deref()),
        Cmd::Channel { peer } => cmd_channel(&dir, peer, cli.porcelain),
    }
}

