use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const DEMO: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/demo/demo.workload");

fn ledgerflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ledgerflow"))
        .arg("--data-dir")
        .arg(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn demo() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let out = ledgerflow(dir.path(), &["run", DEMO]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("chains agree"));
    dir
}

/// Transaction ids from `walk` lines, in time order.
fn tx_ids(dir: &Path, terms: &[&str]) -> Vec<String> {
    let mut args = vec!["walk"];
    args.extend(terms);
    stdout(&ledgerflow(dir, &args))
        .lines()
        .map(|l| l.split(' ').nth(1).unwrap().to_string())
        .collect()
}

#[test]
fn demo_ledgers_verify_and_replay() {
    let dir = demo();
    for peer in ["peer0", "peer3"] {
        assert_eq!(ledgerflow(dir.path(), &["verify", "--peer", peer]).status.code(), Some(0));
    }
    let workflows = tx_ids(dir.path(), &["contract=workflow_execution"]);
    assert_eq!(workflows.len(), 5);
    for id in &workflows {
        let out = ledgerflow(dir.path(), &["replay", id]);
        assert_eq!(out.status.code(), Some(0), "{id}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(!stdout(&out).contains("MISMATCH"));
    }
}

#[test]
fn private_state_is_member_only() {
    let dir = demo();
    let private = tx_ids(dir.path(), &["channel=yes"]);
    assert_eq!(private.len(), 1);
    let id = private[0].as_str();
    assert_eq!(ledgerflow(dir.path(), &["replay", id, "--peer", "peer1"]).status.code(), Some(0));
    assert_eq!(ledgerflow(dir.path(), &["replay", id, "--peer", "peer2"]).status.code(), Some(4));
    assert_eq!(ledgerflow(dir.path(), &["export", "--prov", id, "--peer", "peer4"]).status.code(), Some(4));
    let member = stdout(&ledgerflow(dir.path(), &["query", id, "--peer", "peer0"]));
    let outsider = stdout(&ledgerflow(dir.path(), &["query", id, "--peer", "peer4"]));
    assert!(member.contains("out.S"));
    assert!(!outsider.contains("out.S"));
}

#[test]
fn derive_shows_lineage() {
    let dir = demo();
    let ids = tx_ids(dir.path(), &["contract=workflow_execution", "channel=no"]);
    let (parent, child) = (&ids[0], &ids[3]);
    let out = stdout(&ledgerflow(dir.path(), &["derive", child, "input.B2=B3"]));
    assert!(out.contains(&format!("ancestor {parent}")), "{out}");
    assert!(out.contains("workflow linreg(B3)->A;store(A)->C"), "{out}");
    assert_eq!(ledgerflow(dir.path(), &["derive", child, "B2=B3"]).status.code(), Some(2));
}

#[test]
fn tampered_and_truncated_ledgers() {
    let dir = demo();
    let ledger = dir.path().join("peers/peer0/ledger.ndjl");
    let original = fs::read_to_string(&ledger).unwrap();

    // Rewrite a note's text: still well formed, no longer matches its id.
    fs::write(&ledger, original.replace("peer4-offline", "peer4-online!")).unwrap();
    let out = ledgerflow(dir.path(), &["verify"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("first failure at block 1"), "{}", stdout(&out));

    fs::write(&ledger, &original[..original.len() - 10]).unwrap();
    let out = ledgerflow(dir.path(), &["--porcelain", "verify"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stdout(&out).contains("\"first_failure_index\":1"), "{}", stdout(&out));

    let out = ledgerflow(dir.path(), &["verify", "--ledger", "/nonexistent"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn replay_needs_its_inputs() {
    let dir = demo();
    let first = tx_ids(dir.path(), &["contract=workflow_execution"]).remove(0);
    let empty = tempfile::tempdir().unwrap();
    let datasets = empty.path().to_str().unwrap();
    assert_eq!(ledgerflow(dir.path(), &["replay", &first, "--datasets", datasets]).status.code(), Some(2));
    assert_eq!(ledgerflow(dir.path(), &["replay", &"0".repeat(64)]).status.code(), Some(2));
}

#[test]
fn script_errors_and_stalls() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("bad.workload");
    fs::write(&script, "seal\npropose peer0 peer1 A note\nfrobnicate\n").unwrap();
    let out = ledgerflow(dir.path(), &["run", script.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":3:"));

    fs::write(&script, "drop peer2\ndrop peer3\ndrop peer4\npropose peer0 peer1 A note text=x\n").unwrap();
    let out = ledgerflow(dir.path(), &["run", script.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stdout(&out).contains("line 4 propose stalled"), "{}", stdout(&out));
}

#[test]
fn same_seed_same_files() {
    let (a, b) = (demo(), demo());
    for peer in 0..5 {
        let path = format!("peers/peer{peer}/ledger.ndjl");
        assert_eq!(fs::read(a.path().join(&path)).unwrap(), fs::read(b.path().join(&path)).unwrap());
    }
    assert_eq!(
        fs::read(a.path().join("trace.log")).unwrap(),
        fs::read(b.path().join("trace.log")).unwrap()
    );
}
