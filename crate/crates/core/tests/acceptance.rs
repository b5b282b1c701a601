//! Acceptance gate. Each criterion prints one `PASS`/`FAIL` line; the test
//! fails if any criterion does.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::time::Instant;

use ledgerflow::access::{get_transaction, trace_lineage, walk, Direction, Query};
use ledgerflow::canonical::Value;
use ledgerflow::cli::{cmd_run, cmd_verify, DataDir};
use ledgerflow::consensus::{decide, ConsensusError, Endorsement, RejectReason, Verdict};
use ledgerflow::contracts::{format_real, step_linreg, Dataset, WorkflowDescription, WORKFLOW_KEY};
use ledgerflow::digest::{compute_digest, Digest};
use ledgerflow::ledger::{validate_chain, Chain, Transaction};
use ledgerflow::membership::{generate_identity, Approval, JoinRequest, KeyPair, MembershipRegistry, Role};
use ledgerflow::provenance::{CaptureMode, Representation, KEY_PARENT};
use ledgerflow::replay::replay_transaction;
use ledgerflow::sim::{CaptureOptions, SimConfig, SimNetwork};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

const DEMO: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/demo/demo.workload");

fn network(peers: usize, seed: u64, batch_size: usize) -> SimNetwork {
    SimNetwork::new(SimConfig { peers, seed, batch_size }).unwrap()
}

fn note_state(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn random_text(rng: &mut ChaCha8Rng, len: usize) -> String {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";
    (0..len).map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())] as char).collect()
}

fn propose_note(net: &mut SimNetwork, from: &str, to: &str, asset: &str, state: BTreeMap<String, String>) -> Digest {
    let tx = net.prepare(from, to, asset, "note", state, None, CaptureOptions::default()).unwrap();
    let id = tx.id();
    let proposer = net.peer(from).unwrap().member_id();
    let result = net.propose_transaction(proposer, tx).unwrap();
    assert!(result.accepted);
    id
}

fn criterion_1_tamper_evidence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut net = network(5, 1, 10);
    for i in 0..1000 {
        let from = format!("peer{}", rng.gen_range(0..5));
        let to = format!("peer{}", rng.gen_range(0..5));
        let state = note_state(&[("text", random_text(&mut rng, 12))]);
        propose_note(&mut net, &from, &to, &format!("asset{i}"), state);
    }
    net.finish();
    let peer = net.peer("peer0").unwrap();
    let total: usize = peer.chain.blocks().iter().map(|b| b.transactions.len()).sum();
    if total != 1000 || !net.chains_agree() {
        return Err(format!("setup: {total} transactions committed"));
    }
    let dir = tempfile::tempdir().unwrap();
    let registry_path = dir.path().join("registry.txt");
    fs::write(&registry_path, peer.registry.to_file_string()).unwrap();
    let ledger = peer.chain.to_ledger_string().into_bytes();
    let ledger_path = dir.path().join("ledger.ndjl");
    fs::write(&ledger_path, &ledger).unwrap();
    if cmd_verify(&ledger_path, &registry_path, true).code != 0 {
        return Err("unmutated ledger does not verify".into());
    }
    let mut caught = 0;
    for _ in 0..200 {
        let offset = rng.gen_range(0..ledger.len());
        let mut mutated = ledger.clone();
        mutated[offset] ^= rng.gen_range(1..=255u8);
        let block = ledger[..offset].iter().filter(|&&b| b == b'\n').count() as u64;
        fs::write(&ledger_path, &mutated).unwrap();
        let out = cmd_verify(&ledger_path, &registry_path, true);
        let reported = Value::parse_str(out.stdout.trim())
            .ok()
            .and_then(|v| match v {
                Value::Object(m) => match m.get("first_failure_index") {
                    Some(Value::Int(i)) => Some(*i),
                    _ => None,
                },
                _ => None,
            });
        match reported {
            Some(i) if out.code != 0 && i <= block => caught += 1,
            _ => return Err(format!("offset {offset} (block {block}): exit {} {}", out.code, out.stdout.trim())),
        }
    }
    Ok(format!("{caught}/200 mutations detected over {} blocks", peer.chain.len()))
}

fn run_demo(dir: &Path, seed: u64) -> Result<Vec<Vec<u8>>, String> {
    let data = DataDir::new(dir);
    let out = cmd_run(&data, Path::new(DEMO), SimConfig { peers: 5, seed, batch_size: 4 }, false);
    if out.code != 0 {
        return Err(format!("demo exit {}: {}", out.code, out.stderr));
    }
    (0..5)
        .map(|i| fs::read(data.ledger(&format!("peer{i}"))).map_err(|e| e.to_string()))
        .collect()
}

fn criterion_2_agreement() -> Check {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run_demo(a.path(), 42)?;
    let second = run_demo(b.path(), 42)?;
    let mut pairs = 0;
    for i in 0..5 {
        for j in i + 1..5 {
            if first[i] != first[j] {
                return Err(format!("peer{i} and peer{j} differ"));
            }
            pairs += 1;
        }
        if first[i] != second[i] {
            return Err(format!("peer{i} differs between equal-seed runs"));
        }
    }
    let other = run_demo(c.path(), 43)?;
    let registry = MembershipRegistry::from_file_str(&fs::read_to_string(c.path().join("registry.txt")).unwrap()).unwrap();
    let content = |bytes: &[u8]| -> BTreeSet<(String, String, String)> {
        Chain::from_ledger_bytes(bytes)
            .unwrap()
            .transactions()
            .map(|t| (t.asset_id.clone(), t.contract_id.clone(), t.state.get("text").cloned().unwrap_or_default()))
            .collect()
    };
    for ledger in &other {
        let chain = Chain::from_ledger_bytes(ledger).map_err(|e| e.to_string())?;
        if !validate_chain(&chain, &registry).valid {
            return Err("seed 43 ledger is invalid".into());
        }
    }
    if content(&other[0]) != content(&first[0]) {
        return Err("seed 43 committed a different set of transactions".into());
    }
    Ok(format!("{pairs} pairwise comparisons equal, 5 cross-run equal, seed 43 valid"))
}

fn registry_of(n: usize) -> (MembershipRegistry, Vec<KeyPair>) {
    let mut registry = MembershipRegistry::new();
    let mut members = Vec::new();
    let mut keys = Vec::new();
    for i in 0..n {
        let seed = compute_digest(format!("acceptance-{i}").as_bytes());
        let (id, kp) = generate_identity(Role::Wms, seed.as_bytes(), &format!("p{i}")).unwrap();
        let request = JoinRequest::new(id.clone(), &kp);
        let approvals: Vec<Approval> = members
            .iter()
            .zip(&keys)
            .map(|(m, k): (&ledgerflow::membership::PeerIdentity, &KeyPair)| Approval::sign(&id, m.member_id, k))
            .collect();
        registry = registry.approve_join(&request, &approvals, i as u64).unwrap();
        members.push(id);
        keys.push(kp);
    }
    (registry, keys)
}

fn criterion_3_quorum() -> Check {
    let tx_id = compute_digest(b"quorum");
    let mut cases = 0;
    for n in 1..=7 {
        let (registry, keys) = registry_of(n);
        for count in 0..=n {
            let endorsements: Vec<Endorsement> = keys
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    let verdict = if i < count { Verdict::Endorse } else { Verdict::Reject(RejectReason::PurposeInvalid) };
                    Endorsement::sign(tx_id, verdict, k)
                })
                .collect();
            let result = decide(tx_id, &endorsements, &registry).map_err(|e| e.to_string())?;
            if result.accepted != (count > n / 2) {
                return Err(format!("n={n} count={count} accepted={}", result.accepted));
            }
            cases += 1;
        }
    }
    Ok(format!("{cases} cases exact (n = 1..7, count = 0..n)"))
}

fn criterion_4_capture_round_trip() -> Check {
    let workflows = [
        "linreg(L)->A;store(A)->C",
        "linreg(B)->A",
        "scale[factor=2](L)->L2;linreg(L2)->K",
        "scale[factor=0.5](B)->H;store(H)->F",
        "store(B)->R",
        "scale[factor=3](L)->M;scale[factor=-1](M)->N;linreg(N)->Q;store(Q)->S",
        "scale[factor=4](B)->B4;scale[factor=0.25](B4)->B5;linreg(B5)->A4;store(A4)->G",
    ];
    let modes = [CaptureMode::Embedded, CaptureMode::Reference, CaptureMode::Both];
    let reprs = [Representation::Tree, Representation::Events];
    let mut net = network(3, 4, 100);
    // L lies exactly on y = 3x - 2, so the fit is forced.
    net.datasets.insert("L", Dataset::new((0..8).map(|x| (x as f64, 3.0 * x as f64 - 2.0)).collect()));
    net.datasets.insert("B", Dataset::new(vec![(0.0, 1.0), (1.0, 3.0), (2.0, 5.0), (3.0, 7.5)]));
    let mut ids = Vec::new();
    for (w, text) in workflows.iter().enumerate() {
        for mode in modes {
            for repr in reprs {
                let state = note_state(&[(WORKFLOW_KEY, text.to_string())]);
                let asset = format!("w{w}");
                let tx = net
                    .prepare("peer0", "peer1", &asset, "workflow_execution", state, None, CaptureOptions { mode, repr })
                    .map_err(|e| e.to_string())?;
                let proposer = net.peer("peer0").unwrap().member_id();
                let id = tx.id();
                net.propose_transaction(proposer, tx).map_err(|e| e.to_string())?;
                ids.push((id, *text, mode, repr));
            }
        }
    }
    net.seal();
    let chain = &net.peer("peer2").unwrap().chain;
    let mut outputs = 0;
    for (id, text, mode, repr) in &ids {
        let tx = get_transaction(chain, id).ok_or("transaction not committed")?;
        let report = replay_transaction(tx, None, &net.resources, &net.datasets)
            .map_err(|e| format!("{text} {mode:?}/{repr:?}: {e}"))?;
        if !report.all_match() || report.workflow != WorkflowDescription::parse_compact(text).unwrap().to_compact() {
            return Err(format!("{text} {mode:?}/{repr:?}: {report:?}"));
        }
        if text.starts_with("linreg(L)->A")
            && (tx.state["result.A.slope"] != format_real(3.0) || tx.state["result.A.intercept"] != format_real(-2.0))
        {
            return Err(format!("exact line fit gave {} {}", tx.state["result.A.slope"], tx.state["result.A.intercept"]));
        }
        outputs += report.outputs.len();
    }
    Ok(format!("{} workflows x 3 modes x 2 representations, {outputs} output digests reproduced", workflows.len()))
}

fn criterion_5_channel_privacy() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut net = network(5, 5, 8);
    let channels = [
        net.create_channel("a", &["peer0", "peer1"]).unwrap(),
        net.create_channel("b", &["peer1", "peer2", "peer3"]).unwrap(),
    ];
    let mut ids = Vec::new();
    for i in 0..50 {
        let (channel, from, to) = if rng.gen_bool(0.5) {
            (&channels[0], "peer0", "peer1")
        } else {
            (&channels[1], ["peer1", "peer2", "peer3"][rng.gen_range(0..3)], "peer3")
        };
        let mut pairs = vec![("text", random_text(&mut rng, 24))];
        if rng.gen_bool(0.5) {
            pairs.push(("extra", random_text(&mut rng, 16)));
        }
        let full = net
            .prepare(from, to, &format!("s{i}"), "note", note_state(&pairs), Some(&channel.channel_id), CaptureOptions::default())
            .unwrap();
        let result = net.submit_private(&channel.channel_id, full).map_err(|e| e.to_string())?;
        if !result.accepted {
            return Err(format!("private transaction {i} rejected"));
        }
        ids.push(result.tx_id);
    }
    net.finish();
    let mut secrets = BTreeSet::new();
    for p in net.peers() {
        for (_, full) in p.side_store.iter() {
            secrets.extend(full.state.values().cloned());
        }
    }
    for p in net.peers() {
        let ledger = p.chain.to_ledger_string();
        if let Some(s) = secrets.iter().find(|s| ledger.contains(s.as_str())) {
            return Err(format!("{} ledger contains `{s}`", p.name));
        }
        for id in &ids {
            let public = get_transaction(&p.chain, id).ok_or_else(|| format!("{} cannot find {id}", p.name))?;
            if !public.state.is_empty() {
                return Err("public form carries state".into());
            }
        }
    }
    Ok(format!("50/50 found on 5 peers, 0 of {} side-store values in public ledgers", secrets.len()))
}

fn random_ledger(seed: u64) -> (SimNetwork, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = network(4, seed, rng.gen_range(1..6));
    let channel = net.create_channel("c", &["peer0", "peer1"]).unwrap();
    let keys = ["k1", "k2", "k3"];
    for i in 0..rng.gen_range(0..25) {
        let from = format!("peer{}", rng.gen_range(0..4));
        let to = format!("peer{}", rng.gen_range(0..4));
        let mut state = BTreeMap::new();
        for k in keys {
            if rng.gen_bool(0.4) {
                state.insert(k.to_string(), random_text(&mut rng, 4));
            }
        }
        if rng.gen_bool(0.2) {
            let full = net.prepare("peer0", "peer1", &format!("x{i}"), "note", state, Some(&channel.channel_id), CaptureOptions::default()).unwrap();
            net.submit_private(&channel.channel_id, full).unwrap();
        } else {
            propose_note(&mut net, &from, &to, &format!("x{i}"), state);
        }
    }
    net.finish();
    (net, vec![channel.channel_id])
}

fn random_terms(rng: &mut ChaCha8Rng, channels: &[String], max_time: u64) -> Vec<String> {
    let mut terms = Vec::new();
    if rng.gen_bool(0.3) {
        terms.push(format!("from=peer{}", rng.gen_range(0..4)));
    }
    if rng.gen_bool(0.3) {
        terms.push(format!("to=peer{}", rng.gen_range(0..4)));
    }
    if rng.gen_bool(0.2) {
        terms.push(format!("contract={}", ["note", "workflow_execution"][rng.gen_range(0..2)]));
    }
    if rng.gen_bool(0.3) {
        terms.push(format!("has=k{}", rng.gen_range(1..4)));
    }
    if rng.gen_bool(0.3) {
        let c = ["yes".to_string(), "no".to_string(), channels[0].clone()];
        terms.push(format!("channel={}", c[rng.gen_range(0..3)]));
    }
    if rng.gen_bool(0.4) {
        let op = ["<=", ">=", "<", ">", "="][rng.gen_range(0..5)];
        terms.push(format!("time{op}{}", rng.gen_range(0..=max_time + 1)));
    }
    terms
}

/// Independent reading of a term list, checked against a full scan.
fn brute_match(tx: &Transaction, terms: &[String], net: &SimNetwork) -> bool {
    terms.iter().all(|t| {
        let member = |name: &str| net.peer(name).unwrap().member_id();
        if let Some(v) = t.strip_prefix("from=") {
            tx.initiator == member(v)
        } else if let Some(v) = t.strip_prefix("to=") {
            tx.responder == member(v)
        } else if let Some(v) = t.strip_prefix("contract=") {
            tx.contract_id == v
        } else if let Some(v) = t.strip_prefix("has=") {
            tx.state.contains_key(v)
        } else if let Some(v) = t.strip_prefix("channel=") {
            match v {
                "yes" => tx.channel_id.is_some(),
                "no" => tx.channel_id.is_none(),
                id => tx.channel_id.as_deref() == Some(id),
            }
        } else {
            let rest = t.strip_prefix("time").unwrap();
            let (op, n) = rest.split_at(rest.find(|c: char| c.is_ascii_digit()).unwrap());
            let n: u64 = n.parse().unwrap();
            let time = tx.logical_time;
            match op {
                "<=" => time <= n,
                ">=" => time >= n,
                "<" => time < n,
                ">" => time > n,
                _ => time == n,
            }
        }
    })
}

fn criterion_6_walking() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut queries = 0;
    let mut ledgers = Vec::new();
    for seed in 0..100 {
        let (net, channels) = random_ledger(1000 + seed);
        let chain = &net.peer("peer2").unwrap().chain;
        let mut forward = walk(chain, Direction::Forward, &Query::default());
        forward.reverse();
        if forward != walk(chain, Direction::Backward, &Query::default()) {
            return Err(format!("ledger {seed}: reversed forward walk differs from backward walk"));
        }
        ledgers.push((net, channels));
    }
    while queries < 500 {
        let (net, channels) = &ledgers[queries % ledgers.len()];
        let chain = &net.peer("peer2").unwrap().chain;
        let terms = random_terms(&mut rng, channels, net.now());
        let query = Query::parse(&terms, &net.peer("peer2").unwrap().registry).map_err(|e| e.to_string())?;
        let mut expected: Vec<Transaction> = chain.transactions().filter(|t| brute_match(t, &terms, net)).cloned().collect();
        expected.sort_by_key(|t| t.sort_key());
        if walk(chain, Direction::Forward, &query) != expected {
            return Err(format!("query {terms:?} disagrees with scan"));
        }
        expected.reverse();
        if walk(chain, Direction::Backward, &query) != expected {
            return Err(format!("backward query {terms:?} disagrees with scan"));
        }
        queries += 1;
    }
    Ok(format!("100 ledgers reversible, {queries}/500 queries equal to brute-force scan"))
}

fn criterion_7_lineage() -> Check {
    let mut net = network(3, 7, 100);
    net.datasets.insert("D0", Dataset::new(vec![(0.0, 1.0), (1.0, 2.0), (2.0, 4.0)]));
    let proposer = net.peer("peer0").unwrap().member_id();
    let mut checked = 0;
    for depth in 1..=10 {
        let root_state = note_state(&[(WORKFLOW_KEY, "linreg(D0)->A".to_string())]);
        let root = net.prepare("peer0", "peer1", &format!("r{depth}"), "workflow_execution", root_state, None, CaptureOptions::default()).unwrap();
        let mut chain_ids = vec![root.id()];
        net.propose_transaction(proposer, root).unwrap();
        net.seal();
        for d in 0..depth {
            let parent = *chain_ids.last().unwrap();
            let state = net.derivation_state("peer0", &parent, &BTreeMap::new()).map_err(|e| e.to_string())?;
            let tx = net
                .prepare("peer0", "peer1", &format!("r{depth}.{d}"), "workflow_execution", state, None, CaptureOptions::default())
                .unwrap();
            chain_ids.push(tx.id());
            net.propose_transaction(proposer, tx).unwrap();
            net.seal();
        }
        let tip = chain_ids.pop().unwrap();
        chain_ids.reverse();
        let lineage = trace_lineage(&net.peer("peer1").unwrap().chain, &tip, None).map_err(|e| e.to_string())?;
        if lineage.ancestors != chain_ids || lineage.unresolved_tail.is_some() {
            return Err(format!("depth {depth}: {lineage:?}"));
        }
        checked += 1;
    }
    let dangling = compute_digest(b"never committed");
    let state = note_state(&[(KEY_PARENT, dangling.to_hex()), ("text", "orphan".into())]);
    let first = propose_note(&mut net, "peer1", "peer2", "o1", state);
    let state = note_state(&[(KEY_PARENT, first.to_hex())]);
    let second = propose_note(&mut net, "peer1", "peer2", "o2", state);
    net.seal();
    let lineage = trace_lineage(&net.peer("peer0").unwrap().chain, &second, None).map_err(|e| e.to_string())?;
    if lineage.ancestors != vec![first] || lineage.unresolved_tail.as_deref() != Some(dangling.to_hex().as_str()) {
        return Err(format!("dangling parent: {lineage:?}"));
    }
    Ok(format!("depths 1..10 traced in order ({checked}/10), dangling parent flagged"))
}

fn criterion_8_fault_tolerance() -> Check {
    let mut seen = Vec::new();
    for dropped in 0..=4 {
        let mut net = network(5, 8, 100);
        for i in 0..dropped {
            net.drop_peer(&format!("peer{}", 4 - i)).unwrap();
        }
        let tx = net.prepare("peer0", "peer1", "a", "note", BTreeMap::new(), None, CaptureOptions::default()).unwrap();
        let proposer = net.peer("peer0").unwrap().member_id();
        let outcome = net.propose_transaction(proposer, tx);
        let committed = matches!(&outcome, Ok(r) if r.accepted);
        let stalled = matches!(outcome, Err(ConsensusError::NetworkStalled { .. }));
        if (dropped <= 2 && !committed) || (dropped >= 3 && !stalled) {
            return Err(format!("{dropped} dropped: committed={committed} stalled={stalled}"));
        }
        seen.push(if committed { "commit" } else { "stall" });
    }
    let mut net = network(5, 8, 100);
    propose_note(&mut net, "peer0", "peer1", "a", BTreeMap::new());
    net.seal();
    net.drop_peer("peer3").unwrap();
    net.drop_peer("peer4").unwrap();
    for i in 0..5 {
        propose_note(&mut net, "peer1", "peer2", &format!("b{i}"), BTreeMap::new());
        net.seal();
    }
    let majority = net.peer("peer0").unwrap().chain.tip_digest();
    net.restore_peer("peer3").unwrap();
    net.restore_peer("peer4").unwrap();
    for p in ["peer3", "peer4"] {
        if net.peer(p).unwrap().chain.tip_digest() != majority {
            return Err(format!("{p} did not converge"));
        }
    }
    Ok(format!("drops 0..4 -> {}, restored peers converged", seen.join("/")))
}

fn exact(v: f64) -> BigRational {
    BigRational::from_float(v).unwrap()
}

fn criterion_9_linreg() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = (0.0f64, 0.0f64);
    for case in 0..100 {
        let n = rng.gen_range(2..=1000);
        let slope = rng.gen_range(0.5..10.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let intercept = rng.gen_range(0.5..10.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let offset = rng.gen_range(-1000.0..1000.0);
        let points: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let x = offset + rng.gen_range(-50.0..50.0);
                (x, slope * x + intercept + rng.gen_range(-5.0..5.0))
            })
            .collect();
        let (got_slope, got_intercept) = step_linreg(&points).map_err(|_| format!("case {case}: degenerate"))?;

        let nn = BigRational::from_integer(BigInt::from(n));
        let (mut sx, mut sy, mut sxx, mut sxy) = (BigRational::zero(), BigRational::zero(), BigRational::zero(), BigRational::zero());
        for &(x, y) in &points {
            let (x, y) = (exact(x), exact(y));
            sxx += &x * &x;
            sxy += &x * &y;
            sx += &x;
            sy += y;
        }
        let b = (&nn * &sxy - &sx * &sy) / (&nn * &sxx - &sx * &sx);
        let a = (&sy - &b * &sx) / &nn;
        let (want_slope, want_intercept) = (b.to_f64().unwrap(), a.to_f64().unwrap());
        let rel = |got: f64, want: f64| ((got - want) / want).abs();
        let err = rel(got_slope, want_slope).max(rel(got_intercept, want_intercept));

        let (gs, gi) = (exact(got_slope), exact(got_intercept));
        let (mut r_sum, mut rx_sum, mut scale, mut scale_x) = (BigRational::zero(), BigRational::zero(), 0.0f64, 0.0f64);
        for &(x, y) in &points {
            let r = exact(y) - &gs * exact(x) - &gi;
            rx_sum += &r * exact(x);
            r_sum += r;
            let size = y.abs() + (got_slope * x).abs() + got_intercept.abs();
            scale += size;
            scale_x += size * x.abs();
        }
        let orth = (r_sum.to_f64().unwrap().abs() / scale).max(rx_sum.to_f64().unwrap().abs() / scale_x);
        if err > 1e-9 || orth > 1e-9 {
            return Err(format!("case {case} (n={n}): relative error {err:e}, orthogonality {orth:e}"));
        }
        worst = (worst.0.max(err), worst.1.max(orth));
    }
    Ok(format!("100/100 datasets, max relative error {:.1e}, max residual correlation {:.1e}", worst.0, worst.1))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 tamper evidence", criterion_1_tamper_evidence),
        ("2 agreement and determinism", criterion_2_agreement),
        ("3 consensus quorum", criterion_3_quorum),
        ("4 capture-mode round trip", criterion_4_capture_round_trip),
        ("5 channel privacy", criterion_5_channel_privacy),
        ("6 bidirectional walking", criterion_6_walking),
        ("7 derivation lineage", criterion_7_lineage),
        ("8 fault tolerance bound", criterion_8_fault_tolerance),
        ("9 linreg numerical check", criterion_9_linreg),
    ];
    let mut failed = Vec::new();
    for (name, check) in criteria {
        let start = Instant::now();
        let result = check();
        let secs = start.elapsed().as_secs_f64();
        match &result {
            Ok(detail) => println!("PASS criterion {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                println!("FAIL criterion {name}: {detail} ({secs:.1}s)");
                failed.push(name);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
