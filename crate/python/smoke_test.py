"""Smoke test for the pyledgerflow extension module.

Build and install first, e.g. `pip install ./crates/python --no-build-isolation`.
"""

import pyledgerflow as lf

SCRIPT = """
dataset B 0,1 1,3 2,5 3,7.5
dataset B2 0,2 1,4 2,5
propose peer0 peer1 A workflow_execution workflow=linreg(B)->A;store(A)->C
propose peer1 peer2 M note text=hello
seal
derive peer2 peer0 A A2 input.B=B2
seal
"""


def main():
    assert lf.digest(b"abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    slope, intercept = lf.linreg([(0, 1), (1, 3), (2, 5)])
    assert (slope, intercept) == (2.0, 1.0)
    assert [lf.quorum(n) for n in range(1, 8)] == [1, 2, 2, 3, 3, 4, 4]
    assert lf.parse_workflow("linreg(B) -> A; store(A) -> C") == "linreg(B)->A;store(A)->C"

    net = lf.Network(peers=5, seed=42)
    outcomes = net.run_script(SCRIPT)
    assert [o[2] for o in outcomes] == ["ok", "ok", "accepted", "accepted", "sealed", "accepted", "sealed"], outcomes
    assert net.chains_agree()

    ledger = net.ledger("peer3")
    assert lf.verify_ledger(ledger, net.registry()) == (True, None)
    tampered = ledger.replace("hello", "jello")
    valid, first = lf.verify_ledger(tampered, net.registry())
    assert not valid and first == 0

    parent, child = outcomes[2][3], outcomes[5][3]
    assert net.lineage(child) == ([parent], None)
    for tx_id in (parent, child):
        checks = net.replay(tx_id, peer="peer4")
        assert checks and all(c[3] for c in checks), checks

    net.drop_peer("peer3")
    net.drop_peer("peer4")
    note = net.propose("peer0", "peer1", "N", "note", {"text": "quorum of three"})
    net.restore_peer("peer3")
    net.restore_peer("peer4")
    net.seal()
    assert note in net.walk(["contract=note"], peer="peer4")
    print("smoke test passed: %d blocks, %d transactions" % (ledger.count("\n") + 1, len(net.walk())))


if __name__ == "__main__":
    main()
