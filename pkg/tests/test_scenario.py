import json
from pathlib import Path

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from cifuv.errors import ConfigError
from cifuv.scenario import Scenario, fork_race, run_scenario, sync_equivalence_run

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def load(name):
    return Scenario.load(SCENARIOS / name)


def test_all_shipped_scenarios_load():
    files = sorted(SCENARIOS.glob("*.json"))
    assert len(files) >= 8
    for f in files:
        Scenario.load(f)


def test_honest_scenario():
    s = run_scenario(load("honest.json")).summary
    assert s["verdicts"]["rejected"] == {} and s["verdicts"]["accepted"] == 2
    assert s["replica"]["converged"] is True
    assert s["confirmations"] == {"pending": 0, "confirmed": 2, "invalidated": 0}
    assert s["sync"]["outstanding_requests"] == 0 and s["protocol_errors"] == 0


def test_fabricated_guest_pair():
    cifuv = run_scenario(load("fabricated.json"), "cifuv").summary
    relay = run_scenario(load("fabricated.json"), "relay-trust").summary
    # One honest claim plus two forged ones.
    assert relay["verdicts"]["accepted"] == 3
    assert cifuv["verdicts"]["accepted"] == 1
    assert cifuv["verdicts"]["rejected"] == {"bad-merkle-proof": 1, "wrong-chain-id": 1}


@pytest.mark.parametrize("rule,reason", [
    ("flip-tx-byte", "bad-merkle-root"),
    ("bad-pow", "invalid-pow"),
    ("break-link", "broken-linkage"),
    ("swap-genesis", "wrong-chain-id"),
    ("bad-merkle-root", "bad-merkle-root"),
])
def test_tamper_scenarios(rule, reason):
    s = run_scenario(load(f"tamper-{rule}.json")).summary
    assert set(s["sync"]["aborts"]) == {reason}
    assert s["verdicts"]["accepted"] == 0
    relay = run_scenario(load(f"tamper-{rule}.json"), "relay-trust").summary
    assert relay["verdicts"]["accepted"] == 1


def test_silent_peer_scenario():
    s = run_scenario(load("silent-peer.json")).summary
    assert set(s["sync"]["outcomes"]) == {"SyncTimeoutError"}
    assert s["sync"]["outstanding_requests"] == 0


def test_double_rebranch_transitions():
    run = run_scenario(load("double-rebranch.json"))
    moves = [(e["before"], e["after"]) for e in run.sim.trace if e.get("event") == "confirmation"]
    assert moves
    assert set(moves) <= {("pending", "confirmed"), ("pending", "invalidated")}
    assert ("pending", "invalidated") in moves


def test_scenario_trace_deterministic():
    a = run_scenario(load("honest.json"))
    b = run_scenario(load("honest.json"))
    assert a.sim.trace_jsonl() == b.sim.trace_jsonl()
    assert json.dumps(a.summary) == json.dumps(b.summary)


@pytest.mark.parametrize("raw", [
    [],
    {"nonsense": 1},
    {"duration": 0},
    {"duration": "long"},
    {"mine_rate": 1.5},
    {"guests": []},
    {"guests": ["host"]},
    {"host": {"k_host": 0}},
    {"host": {"replica": "partial"}},
    {"host": {"speed": 1}},
    {"claims": [{"at": 1}]},
    {"claims": [{"payload": "x", "guest": "ghost"}]},
    {"forged_claims": [{"payload": "x", "height": 9, "length": 3}]},
    {"adversaries": [{"kind": "tamper-relay"}]},
    {"adversaries": [{"kind": "fork-miner", "hash_share": 1.2}]},
    {"adversaries": [{"kind": "silent-peer"}, {"kind": "silent-peer"}]},
    {"adversaries": [{"kind": "silent-peer"}, {"kind": "tamper-relay", "tamper_rule": "bad-pow"}]},
    {"adversaries": [{"kind": "fork-miner", "hash_share": 0.2, "target_claim": 0}]},
    {"difficulty": 40},
])
def test_schema_violations(raw):
    with pytest.raises(ConfigError):
        Scenario.from_dict(raw)


def test_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        Scenario.load(p)


@settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(
    seed=st.integers(0, 10_000),
    guest_rate=st.floats(0.05, 0.4),
    host_rate=st.floats(0.05, 0.4),
    latency=st.integers(1, 4),
    peer_latency=st.integers(1, 8),
    claim_at=st.integers(0, 150),
)
def test_randomized_honest_schedules(seed, guest_rate, host_rate, latency, peer_latency, claim_at):
    """Any interleaving of guest mining, host mining and syncs stays correct when nobody cheats."""
    raw = {
        "seed": seed, "duration": 250, "drain": 150, "difficulty": 4, "latency": latency,
        "mine_rate": guest_rate, "host": {"mine_rate": host_rate, "k_host": 2, "k_guest": 2},
        "guests": ["a", "b"], "links": [{"a": "a", "b": "b", "latency": peer_latency}],
        "claims": [{"at": claim_at, "guest": "a", "payload": "p"}],
    }
    s = run_scenario(Scenario.from_dict(raw), record=True)
    summary = s.summary
    assert summary["replica"]["converged"] is True
    assert summary["sync"]["aborts"] == {}
    assert summary["sync"]["outstanding_requests"] == 0
    assert summary["protocol_errors"] == 0
    # Honest forks can still outrun a shallow k; a confirmed event is only lost to a reorg deeper than k.
    if summary["confirmed_then_evicted"]:
        assert (summary["replica"]["deepest_reorg"] > 2 or summary["host_deepest_reorg"] > 2)
    # Confirmed and invalidated are terminal.
    for key in summary["transitions"]:
        assert key.startswith("pending->")
    # A claim is either accepted, rejected because a natural fork orphaned it, or still waiting.
    assert set(summary["verdicts"]["rejected"]) <= {"bad-merkle-proof"}


def test_shallow_confirmation_lost_to_deep_honest_fork():
    raw = {"seed": 8492, "duration": 250, "drain": 150, "difficulty": 4, "latency": 1, "mine_rate": 0.375,
           "host": {"mine_rate": 0.25, "k_host": 2, "k_guest": 2}, "guests": ["a", "b"],
           "links": [{"a": "a", "b": "b", "latency": 4}], "claims": [{"at": 58, "guest": "a", "payload": "p"}]}
    s = run_scenario(Scenario.from_dict(raw)).summary
    assert s["transitions"] == {"pending->confirmed": 1}
    assert s["confirmed_then_evicted"] == 1 and s["replica"]["deepest_reorg"] > 2
    raw["host"].update(k_host=8, k_guest=8)
    s = run_scenario(Scenario.from_dict(raw)).summary
    assert s["confirmed_then_evicted"] == 0


def test_chain_records_deepest_reorg():
    run = run_scenario(load("double-rebranch.json"))
    assert all(g.chain.deepest_reorg >= 1 for g in run.guests.values())


def test_fork_race_result_shape():
    r = fork_race(3, k=1)
    assert r.fork_outcome in ("published", "gave-up")
    assert sum(r.confirmations.values()) <= 1
    assert r.confirmed_then_evicted in (0, 1)


def test_fork_race_deterministic():
    assert fork_race(11, k=2) == fork_race(11, k=2)


def test_sync_equivalence_small():
    for seed in range(3):
        rep = sync_equivalence_run(seed, rounds=10)
        assert rep.ok, rep
