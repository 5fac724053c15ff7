"""Scenario files for the cross-chain demo, plus the fork-race and sync-equivalence harnesses."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .chain import ConsensusDescriptor, Transaction, make_genesis
from .engine import ConfirmationPolicy, ReplicaMode, first_time_sync, keep_sync
from .errors import ConfigError
from .netsim import (
    NETSIM_DIFFICULTY,
    AdversaryConfig,
    AdversaryKind,
    Forge,
    Forger,
    ForkMiner,
    GuestNode,
    HostNode,
    MiningDriver,
    SilentPeer,
    SimPeer,
    Simulator,
    StartSync,
    Submit,
    TamperRelay,
    VerifyMode,
)

HOST_ID = "host"


# -- scenario files --------------------------------------------------------

_TOP_KEYS = {"seed", "duration", "drain", "difficulty", "latency", "mine_rate", "host", "guests",
             "links", "claims", "forged_claims", "adversaries"}
_HOST_KEYS = {"mine_rate", "k_host", "k_guest", "replica", "timeout"}


def _expect(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _int(obj: dict, key: str, default: int, low: int = 0) -> int:
    value = obj.get(key, default)
    _expect(isinstance(value, int) and not isinstance(value, bool) and value >= low,
            f"{key} must be an integer >= {low}")
    return value


def _rate(obj: dict, key: str, default: float) -> float:
    value = obj.get(key, default)
    _expect(isinstance(value, (int, float)) and not isinstance(value, bool) and 0 < value <= 1,
            f"{key} must be a number in (0, 1]")
    return float(value)


@dataclass
class Scenario:
    seed: int = 0
    duration: int = 600
    drain: int = 200
    difficulty: int = NETSIM_DIFFICULTY
    latency: int = 1
    mine_rate: float = 0.1
    host_mine_rate: float = 0.1
    policy: ConfirmationPolicy = field(default_factory=ConfirmationPolicy)
    replica_mode: ReplicaMode = ReplicaMode.FULL
    timeout: int = 20
    guests: list[str] = field(default_factory=lambda: ["guest"])
    links: list[tuple[str, str, int]] = field(default_factory=list)
    claims: list[dict] = field(default_factory=list)
    forged_claims: list[dict] = field(default_factory=list)
    adversaries: list[AdversaryConfig] = field(default_factory=list)
    # Index into ``claims`` of the transaction a fork miner tries to orphan.
    fork_target: int | None = None

    @classmethod
    def from_dict(cls, raw: Any) -> Scenario:
        _expect(isinstance(raw, dict), "scenario must be a JSON object")
        unknown = set(raw) - _TOP_KEYS
        _expect(not unknown, f"unknown scenario keys: {sorted(unknown)}")
        host = raw.get("host", {})
        _expect(isinstance(host, dict), "host must be an object")
        _expect(not set(host) - _HOST_KEYS, f"unknown host keys: {sorted(set(host) - _HOST_KEYS)}")
        guests = raw.get("guests", ["guest"])
        _expect(isinstance(guests, list) and guests and all(isinstance(g, str) and g for g in guests),
                "guests must be a non-empty list of node ids")
        _expect(len(set(guests)) == len(guests) and HOST_ID not in guests, "guest ids must be unique and not 'host'")
        try:
            policy = ConfirmationPolicy(_int(host, "k_host", 6, 1), _int(host, "k_guest", 6, 1))
            replica = ReplicaMode(host.get("replica", "full"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

        links = []
        for link in raw.get("links", []):
            _expect(isinstance(link, dict) and {"a", "b"} <= set(link), "links need 'a' and 'b'")
            links.append((str(link["a"]), str(link["b"]), _int(link, "latency", 1)))

        claims = raw.get("claims", [])
        _expect(isinstance(claims, list), "claims must be a list")
        for c in claims:
            _expect(isinstance(c, dict) and isinstance(c.get("payload"), str), "each claim needs a string payload")
            _int(c, "at", 0)
            _expect(c.get("guest", guests[0]) in guests, f"claim names unknown guest {c.get('guest')!r}")
        forged = raw.get("forged_claims", [])
        _expect(isinstance(forged, list), "forged_claims must be a list")
        for c in forged:
            _expect(isinstance(c, dict) and isinstance(c.get("payload"), str), "each forged claim needs a string payload")
            _int(c, "at", 0)
            length = _int(c, "length", 8, 1)
            _expect(1 <= _int(c, "height", 1, 1) <= length, "forged claim height must lie in 1..length")
            _expect(isinstance(c.get("impersonate", False), bool), "impersonate must be a boolean")

        adversaries = []
        fork_target = None
        for a in raw.get("adversaries", []):
            _expect(isinstance(a, dict) and "kind" in a, "each adversary needs a kind")
            extra = set(a) - {"kind", "hash_share", "tamper_rule", "target_height", "give_up", "target_claim"}
            _expect(not extra, f"unknown adversary keys: {sorted(extra)}")
            try:
                adversaries.append(AdversaryConfig(
                    kind=a["kind"],
                    hash_share=float(a.get("hash_share", 0.0)),
                    tamper_rule=a.get("tamper_rule"),
                    target_height=_int(a, "target_height", 1),
                    give_up=_int(a, "give_up", 12),
                ))
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad adversary: {exc}") from None
            if "target_claim" in a:
                _expect(isinstance(a["target_claim"], int) and 0 <= a["target_claim"] < len(claims),
                        "target_claim must index the claims list")
                _expect(adversaries[-1].kind is AdversaryKind.FORK_MINER, "target_claim applies to fork miners only")
                fork_target = a["target_claim"]
        kinds = Counter(a.kind for a in adversaries)
        _expect(all(n <= 1 for n in kinds.values()), "at most one adversary of each kind")
        _expect(not (kinds[AdversaryKind.TAMPER_RELAY] and kinds[AdversaryKind.SILENT_PEER]),
                "a tamper relay and a silent peer cannot both front the host")

        scenario = cls(
            seed=_int(raw, "seed", 0),
            duration=_int(raw, "duration", 600, 1),
            drain=_int(raw, "drain", 200),
            difficulty=_int(raw, "difficulty", NETSIM_DIFFICULTY),
            latency=_int(raw, "latency", 1),
            mine_rate=_rate(raw, "mine_rate", 0.1),
            host_mine_rate=_rate(host, "mine_rate", 0.1),
            policy=policy,
            replica_mode=replica,
            timeout=_int(host, "timeout", 20, 1),
            guests=list(guests),
            links=links,
            claims=list(claims),
            forged_claims=list(forged),
            adversaries=adversaries,
            fork_target=fork_target,
        )
        _expect(scenario.difficulty <= 24, "difficulty above 24 bits is impractical for simulation")
        return scenario

    @classmethod
    def load(cls, path: str | Path) -> Scenario:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"scenario is not valid JSON: {exc}") from None
        return cls.from_dict(raw)


@dataclass
class ScenarioRun:
    sim: Simulator
    host: HostNode
    guests: dict[str, GuestNode]
    fork_miner: ForkMiner | None
    summary: dict


def build(scenario: Scenario, mode: VerifyMode | str = VerifyMode.CIFUV, record: bool = True):
    mode = VerifyMode(mode)
    sim = Simulator(seed=scenario.seed, default_latency=scenario.latency, record=record)
    bits = scenario.difficulty
    consensus = ConsensusDescriptor(bits)
    setup = np.random.default_rng(np.random.SeedSequence(scenario.seed, spawn_key=(0,)))
    guest_genesis = make_genesis(b"guest", bits, setup)
    host_genesis = make_genesis(b"host", bits, setup)

    by_kind = {a.kind: a for a in scenario.adversaries}
    fork = by_kind.get(AdversaryKind.FORK_MINER)
    gateway = scenario.guests[0]
    front = gateway
    if AdversaryKind.TAMPER_RELAY in by_kind:
        front = "relay"
    elif AdversaryKind.SILENT_PEER in by_kind:
        front = "silent"

    guest_ids = list(scenario.guests) + (["attacker"] if fork else [])
    guests = {}
    for gid in scenario.guests:
        peers = [p for p in guest_ids if p != gid]
        subs = [front if front == "relay" else HOST_ID] if gid == gateway else []
        guests[gid] = sim.add(GuestNode(gid, guest_genesis, consensus, peers=peers, subscribers=subs))
    fork_miner = None
    if fork:
        fork_miner = sim.add(ForkMiner("attacker", guest_genesis, consensus, peers=list(scenario.guests),
                                       give_up=fork.give_up))
    host = sim.add(HostNode(
        HOST_ID, host_genesis, consensus, guest_genesis.hash, consensus, peer=front, mode=mode,
        policy=scenario.policy, replica_mode=scenario.replica_mode, timeout=scenario.timeout,
        auto_sync=mode is VerifyMode.CIFUV,
    ))
    relay = by_kind.get(AdversaryKind.TAMPER_RELAY)
    if relay:
        sim.add(TamperRelay("relay", gateway, HOST_ID, relay.tamper_rule, relay.target_height))
    if AdversaryKind.SILENT_PEER in by_kind:
        sim.add(SilentPeer("silent"))
    for a, b, ticks in scenario.links:
        sim.set_latency(a, b, ticks)

    honest = 1.0 - (fork.hash_share if fork else 0.0)
    miners = [(g, honest / len(scenario.guests)) for g in scenario.guests]
    if fork:
        miners.append(("attacker", fork.hash_share))
    sim.add(MiningDriver("guest-mining", miners, scenario.mine_rate, stop_at=scenario.duration)).start()
    sim.add(MiningDriver("host-mining", [(HOST_ID, 1.0)], scenario.host_mine_rate,
                         stop_at=scenario.duration + scenario.drain)).start()
    if mode is VerifyMode.CIFUV:
        sim.schedule(0, HOST_ID, StartSync())

    claim_route = "relay" if relay else HOST_ID
    for i, c in enumerate(scenario.claims):
        tx = Transaction(c["payload"].encode())
        sim.schedule(c.get("at", 0), c.get("guest", gateway), Submit(tx, claim_route))
        if fork_miner is not None and scenario.fork_target == i:
            fork_miner.target_tx(tx.tx_id)
    for i, c in enumerate(scenario.forged_claims):
        forger = sim.add(Forger(
            f"forger-{i}", HOST_ID, c["payload"].encode(), c.get("length", 8), c.get("height", 1), bits,
            impersonate=guest_genesis.hash if c.get("impersonate", False) else None,
        ))
        sim.schedule(c.get("at", 0), forger.id, Forge())
    return sim, host, guests, fork_miner


def summarize(sim: Simulator, host: HostNode, guests: dict[str, GuestNode], fork_miner: ForkMiner | None,
              mode: VerifyMode) -> dict:
    rejected = Counter(v.failure.value for _, v in host.verdicts if not v.accepted)
    sync_outcomes = Counter(status for status, _ in host.sync_log)
    aborts = Counter(e["reason"] for e in sim.trace if e.get("event") == "sync-aborted")
    reference = next(iter(guests.values()))
    replica = host.state.replica
    if replica is None:
        converged = None
    else:
        converged = [h.encode() for h in replica.canonical_headers()] == [
            h.encode() for h in reference.chain.canonical_headers()
        ]
    transitions = Counter(f"{a}->{b}" for _, a, b in host.transitions)
    return {
        "mode": mode.value,
        "seed": sim.seed,
        "ticks": sim.now,
        "verdicts": {
            "accepted": sum(1 for _, v in host.verdicts if v.accepted),
            "rejected": dict(sorted(rejected.items())),
            "pending": len(host.pending_claims),
        },
        "sync": {
            "passes": len(host.sync_log),
            "outcomes": dict(sorted(sync_outcomes.items())),
            "aborts": dict(sorted(aborts.items())),
            "headers_downloaded": host.state.headers_downloaded,
            "blocks_downloaded": host.state.blocks_downloaded,
            "bytes_to_host": sum(n for (s, d), n in sim.bytes_sent.items() if d == HOST_ID),
            "bytes_from_host": sum(n for (s, d), n in sim.bytes_sent.items() if s == HOST_ID),
            "outstanding_requests": host.outstanding,
            "timed_out_requests": host.timed_out_requests,
        },
        # The relay-trust baseline records events without ever checking the guest chain.
        "confirmations": host.confirmation_counts() if mode is VerifyMode.CIFUV else None,
        "recorded_events": len(host.events),
        "transitions": dict(sorted(transitions.items())),
        "confirmed_then_evicted": len(host.evicted_after_confirm),
        "replica": {
            "guest_height": reference.chain.height,
            "replica_height": None if replica is None else replica.height,
            "converged": converged,
            "deepest_reorg": None if replica is None else replica.deepest_reorg,
        },
        "host_deepest_reorg": host.chain.deepest_reorg,
        "fork_outcome": None if fork_miner is None else fork_miner.outcome,
        "protocol_errors": sum(1 for e in sim.trace if e.get("event") == "protocol-error"),
    }


def run_scenario(scenario: Scenario, mode: VerifyMode | str = VerifyMode.CIFUV, record: bool = True) -> ScenarioRun:
    mode = VerifyMode(mode)
    sim, host, guests, fork_miner = build(scenario, mode, record)
    sim.run_until(scenario.duration + scenario.drain)
    # Let in-flight messages settle; only timers of finished passes remain.
    sim.run_until(sim.now + 2 * scenario.timeout + 4 * max([scenario.latency] + [t for *_, t in scenario.links]))
    return ScenarioRun(sim, host, guests, fork_miner, summarize(sim, host, guests, fork_miner, mode))


# -- fork races ------------------------------------------------------------

@dataclass(frozen=True)
class RaceResult:
    seed: int
    fork_outcome: str | None
    confirmations: dict[str, int]
    confirmed_then_evicted: int


def fork_race(seed: int, k: int, hash_share: float = 0.2, mine_rate: float = 0.1,
              give_up: int = 12, difficulty: int = 4, horizon: int = 5000) -> RaceResult:
    """One race: a cross event on a guest tx that a minority miner tries to orphan.

    Ends once the attacker has published or given up and the event is no
    longer pending (or at ``horizon`` ticks).
    """
    raw = {
        "seed": seed,
        "duration": horizon,
        "drain": 0,
        "difficulty": difficulty,
        "mine_rate": mine_rate,
        "host": {"mine_rate": mine_rate, "k_host": k, "k_guest": k},
        "claims": [{"at": 30, "payload": f"cross-transfer:{seed}"}],
        "adversaries": [{"kind": "fork-miner", "hash_share": hash_share, "give_up": give_up, "target_claim": 0}],
    }
    sim, host, guests, attacker = build(Scenario.from_dict(raw), VerifyMode.CIFUV, record=False)
    tick = 0
    while tick < horizon:
        tick += 50
        sim.run_until(tick)
        settled = host.events and all(e.status.value != "pending" for e in host.events.values())
        if attacker.outcome is not None and settled:
            break
    # Give a published branch time to reach the host replica.
    sim.run_until(tick + 100)
    return RaceResult(seed, attacker.outcome, host.confirmation_counts(), len(host.evicted_after_confirm))


def fork_race_campaign(races: int, k: int, seed: int = 0, **kwargs) -> list[RaceResult]:
    return [fork_race(seed * 1_000_003 + i, k, **kwargs) for i in range(races)]


# -- sync equivalence ------------------------------------------------------

@dataclass(frozen=True)
class SyncRound:
    expected_changed: int
    changed: int
    blocks_fetched: int
    replica_matches: bool


@dataclass(frozen=True)
class SyncEquivalenceReport:
    seed: int
    rounds: tuple[SyncRound, ...]
    final_match: bool
    rebranches: int

    @property
    def ok(self) -> bool:
        return self.final_match and all(
            r.replica_matches and r.changed == r.expected_changed == r.blocks_fetched for r in self.rounds
        )


def _encoded(headers) -> list[bytes]:
    return [h.encode() for h in headers]


def sync_equivalence_run(seed: int, rounds: int = 50, difficulty: int = NETSIM_DIFFICULTY) -> SyncEquivalenceReport:
    """First-time sync then ``rounds`` keep-sync passes while two honest miners race.

    Mining rate, miner latency and pause lengths are drawn from ``seed``;
    latency between the miners produces natural forks, so some passes adopt
    a rebranch.
    """
    plan = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    bits = difficulty
    consensus = ConsensusDescriptor(bits)
    setup = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    genesis = make_genesis(b"guest", bits, setup)
    host_genesis = make_genesis(b"host", bits, setup)

    sim = Simulator(seed=seed, default_latency=int(plan.integers(1, 3)), record=False)
    a = sim.add(GuestNode("guest-a", genesis, consensus, peers=["guest-b"]))
    sim.add(GuestNode("guest-b", genesis, consensus, peers=["guest-a"]))
    host = sim.add(HostNode(HOST_ID, host_genesis, consensus, genesis.hash, consensus, peer="guest-a",
                            auto_sync=False))
    sim.set_latency("guest-a", "guest-b", int(plan.integers(2, 9)))
    driver = sim.add(MiningDriver("mining", [("guest-a", 0.5), ("guest-b", 0.5)], float(plan.uniform(0.05, 0.3))))
    driver.start()
    peer = SimPeer(sim, host)

    sim.run_until(int(plan.integers(0, 60)))
    state = first_time_sync(peer, genesis.hash)
    out = []
    rebranches = 0
    for _ in range(rounds):
        sim.run_until(sim.now + int(plan.integers(0, 40)))
        before = set(state.replica.headers)
        old_canonical = state.replica.canonical_hashes()
        blocks_before = sim.count("guest-a", HOST_ID, "block")
        keep_sync(state, peer)
        served = a.served
        changed_expected = sum(1 for h in served if h.hash not in before)
        new_canonical = state.replica.canonical_hashes()
        if new_canonical[: len(old_canonical)] != old_canonical:
            rebranches += 1
        out.append(SyncRound(
            expected_changed=changed_expected,
            changed=state.last_stats.changed,
            blocks_fetched=sim.count("guest-a", HOST_ID, "block") - blocks_before,
            replica_matches=_encoded(state.replica.canonical_headers()) == _encoded(served),
        ))
    driver.enabled = False
    sim.run_until(sim.now + 50)
    keep_sync(state, peer)
    final = _encoded(state.replica.canonical_headers()) == _encoded(a.chain.canonical_headers())
    return SyncEquivalenceReport(seed, tuple(out), final, rebranches)
