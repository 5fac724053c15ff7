"""Seeded Monte Carlo simulation of an attacker racing several systems.

Each round draws a one-time threshold (otpa) per system around its long-term
average (ltpa), then lets the attacker pick one target per attempt until some
system's attempt counter reaches its threshold.  The total number of attempts
in that round is ``ra``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import CapExceededError, ConfigError
from .model import SystemProfile, select_probs

GENERATOR = "numpy.PCG64 via SeedSequence(seed, spawn_key=(round,))"
ATTEMPT_CAP = 10**9
MAX_BLOCK = 1 << 22

CASES: dict[str, tuple[int, int]] = {
    "c1": (4096, 8192),
    "c2": (4096, 16384),
    "c3": (4096, 32768),
    "c4": (4096, 65536),
    "c5": (4096, 131072),
}
CHOSEN_GRID = (1 / 2, 3 / 4, 7 / 8, 15 / 16, 31 / 32, 1.0)


class SuccessRule(str, Enum):
    AT_LEAST = "at-least"
    STRICTLY_GREATER = "strictly-greater"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    rounds: int
    profiles: tuple[SystemProfile, ...]
    jitter_low: float = 0.8
    jitter_high: float = 1.2
    success_rule: SuccessRule = SuccessRule.AT_LEAST

    def __post_init__(self):
        object.__setattr__(self, "profiles", tuple(self.profiles))
        object.__setattr__(self, "success_rule", SuccessRule(self.success_rule))
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if not 0 < self.jitter_low <= 1 <= self.jitter_high:
            raise ConfigError(f"need 0 < jitter_low <= 1 <= jitter_high, got {self.jitter_low}, {self.jitter_high}")
        if not self.profiles:
            raise ConfigError("at least one profile is required")
        for p in self.profiles:
            if p.ltpa < 1:
                raise ConfigError(f"{p.id}: ltpa must be >= 1 for simulation")
        try:
            sel = select_probs(self.profiles)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not any(s > 0 for s in sel):
            raise ConfigError("at least one system must have select_prob > 0")

    @property
    def selects(self) -> tuple[float, ...]:
        return tuple(select_probs(self.profiles))

    @property
    def strongest(self) -> SystemProfile:
        return max(self.profiles, key=lambda p: p.ltpa)


@dataclass(frozen=True)
class RoundOutcome:
    per_system_attempts: tuple[int, ...]
    total_attempts: int
    sampled_otpa: tuple[int, ...]
    broken_system: int


@dataclass(frozen=True)
class ExperimentReport:
    config: ExperimentConfig
    outcomes: tuple[RoundOutcome, ...]
    mean_ra: float
    ratio_to_strong: float
    fraction_above_strong_ltpa: float
    generator: str = field(default=GENERATOR)


def case_profiles(case: str | None = None, ltpas: Sequence[float] | None = None,
                  selects: Sequence[float] | None = None) -> tuple[SystemProfile, ...]:
    """Build ``sys1..sysN`` profiles from a named case or explicit ltpa list."""
    if (case is None) == (ltpas is None):
        raise ConfigError("give exactly one of case or ltpas")
    if case is not None:
        if case not in CASES:
            raise ConfigError(f"unknown case {case!r}; expected one of {sorted(CASES)}")
        ltpas = CASES[case]
    if selects is not None and len(selects) != len(ltpas):
        raise ConfigError(f"{len(selects)} select values for {len(ltpas)} systems")
    return tuple(
        SystemProfile(f"sys{i + 1}", float(l), None if selects is None else float(selects[i]))
        for i, l in enumerate(ltpas)
    )


def round_rng(seed: int, round_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(round_index,))))


def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def otpa_bounds(ltpa: float, jitter_low: float = 0.8, jitter_high: float = 1.2) -> tuple[int, int]:
    lo, hi = _round_half_up(jitter_low * ltpa), _round_half_up(jitter_high * ltpa)
    if lo > hi or jitter_low <= 0:
        raise ConfigError(f"jitter bounds inverted: [{jitter_low}, {jitter_high}]")
    return max(lo, 1), max(hi, 1)


def sample_otpa(ltpa: float, rng: np.random.Generator, jitter_low: float = 0.8, jitter_high: float = 1.2) -> int:
    if ltpa < 1:
        raise ConfigError(f"ltpa must be >= 1, got {ltpa}")
    lo, hi = otpa_bounds(ltpa, jitter_low, jitter_high)
    return int(rng.integers(lo, hi, endpoint=True))


def sample_round_otpas(config: ExperimentConfig, rng: np.random.Generator) -> tuple[int, ...]:
    # Fresh, independent threshold for every system in every round.
    return tuple(sample_otpa(p.ltpa, rng, config.jitter_low, config.jitter_high) for p in config.profiles)


def _cdf(selects: Sequence[float]) -> np.ndarray:
    cdf = np.cumsum(np.asarray(selects, dtype=float))
    cdf[-1] = 1.0
    return cdf


def choose_target(rng: np.random.Generator, profiles: Sequence[SystemProfile]) -> int:
    """Pick the system attacked by one attempt, with probability select_i."""
    return int(np.searchsorted(_cdf(select_probs(profiles)), rng.random(), side="right"))


def choose_targets(rng: np.random.Generator, cdf: np.ndarray, size: int) -> np.ndarray:
    # Same draws as `size` consecutive choose_target calls on this generator.
    return np.searchsorted(cdf, rng.random(size), side="right")


def run_round(config: ExperimentConfig, rng: np.random.Generator) -> RoundOutcome:
    """One attack round: increment a random target's counter until one system breaks.

    Targets are drawn in blocks for speed; the outcome is identical to drawing
    them one attempt at a time from the same generator.
    """
    otpas = sample_round_otpas(config, rng)
    selects = config.selects
    n = len(otpas)
    extra = 1 if config.success_rule is SuccessRule.STRICTLY_GREATER else 0
    need = [o + extra for o in otpas]
    active = [i for i in range(n) if selects[i] > 0]
    cdf = _cdf(selects)
    counts = np.zeros(n, dtype=np.int64)
    total = 0
    block = int(min(need[i] / selects[i] for i in active) * 1.1) + 64
    while True:
        if total > ATTEMPT_CAP:
            raise CapExceededError(f"no system broken after {total} attempts")
        targets = choose_targets(rng, cdf, block)
        stop, winner = block, -1
        for i in active:
            missing = need[i] - int(counts[i])
            hits = np.flatnonzero(targets == i)
            if len(hits) >= missing and hits[missing - 1] < stop:
                stop, winner = int(hits[missing - 1]), i
        if winner >= 0:
            counts += np.bincount(targets[: stop + 1], minlength=n)
            total += stop + 1
            return RoundOutcome(
                per_system_attempts=tuple(int(c) for c in counts),
                total_attempts=total,
                sampled_otpa=otpas,
                broken_system=winner,
            )
        counts += np.bincount(targets, minlength=n)
        total += block
        block = min(block * 2, MAX_BLOCK)


def summarize(config: ExperimentConfig, outcomes: Sequence[RoundOutcome]) -> ExperimentReport:
    ras = [o.total_attempts for o in outcomes]
    mean_ra = math.fsum(ras) / len(ras)
    strong = config.strongest.ltpa
    return ExperimentReport(
        config=config,
        outcomes=tuple(outcomes),
        mean_ra=mean_ra,
        ratio_to_strong=mean_ra / strong,
        fraction_above_strong_ltpa=sum(ra > strong for ra in ras) / len(ras),
    )


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    # Each round owns a generator derived from (seed, round index), so rounds
    # are independent of execution order.
    outcomes = [run_round(config, round_rng(config.seed, r)) for r in range(config.rounds)]
    return summarize(config, outcomes)


def first_break_counts(report: ExperimentReport) -> list[int]:
    counts = [0] * len(report.config.profiles)
    for o in report.outcomes:
        counts[o.broken_system] += 1
    return counts


# -- serialisation ---------------------------------------------------------

def report_to_dict(report: ExperimentReport) -> dict:
    c = report.config
    return {
        "generator": report.generator,
        "config": {
            "seed": c.seed,
            "rounds": c.rounds,
            "jitter_low": c.jitter_low,
            "jitter_high": c.jitter_high,
            "success_rule": c.success_rule.value,
            "profiles": [{"id": p.id, "ltpa": p.ltpa, "select_prob": p.select_prob} for p in c.profiles],
        },
        "mean_ra": report.mean_ra,
        "ratio_to_strong": report.ratio_to_strong,
        "fraction_above_strong_ltpa": report.fraction_above_strong_ltpa,
        "outcomes": [
            {
                "round": r,
                "ra": o.total_attempts,
                "per_system_attempts": list(o.per_system_attempts),
                "sampled_otpa": list(o.sampled_otpa),
                "broken_system": o.broken_system,
            }
            for r, o in enumerate(report.outcomes)
        ],
    }


def report_from_dict(d: dict) -> ExperimentReport:
    c = d["config"]
    config = ExperimentConfig(
        seed=c["seed"],
        rounds=c["rounds"],
        profiles=tuple(SystemProfile(p["id"], p["ltpa"], p["select_prob"]) for p in c["profiles"]),
        jitter_low=c["jitter_low"],
        jitter_high=c["jitter_high"],
        success_rule=SuccessRule(c["success_rule"]),
    )
    outcomes = tuple(
        RoundOutcome(
            per_system_attempts=tuple(o["per_system_attempts"]),
            total_attempts=o["ra"],
            sampled_otpa=tuple(o["sampled_otpa"]),
            broken_system=o["broken_system"],
        )
        for o in d["outcomes"]
    )
    return ExperimentReport(
        config=config,
        outcomes=outcomes,
        mean_ra=d["mean_ra"],
        ratio_to_strong=d["ratio_to_strong"],
        fraction_above_strong_ltpa=d["fraction_above_strong_ltpa"],
        generator=d["generator"],
    )


def emit_report(report: ExperimentReport, format: str = "csv") -> bytes:
    if format == "json":
        return (json.dumps(report_to_dict(report), indent=2) + "\n").encode()
    if format != "csv":
        raise ConfigError(f"unknown report format {format!r}")
    ids = [p.id for p in report.config.profiles]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "ra", *(f"ra_{i}" for i in ids), *(f"otpa_{i}" for i in ids), "broken_system"])
    for r, o in enumerate(report.outcomes):
        w.writerow([r, o.total_attempts, *o.per_system_attempts, *o.sampled_otpa, ids[o.broken_system]])
    return buf.getvalue().encode()


def parse_report(data: bytes) -> ExperimentReport:
    return report_from_dict(json.loads(data))
