"""Security calculus for interacting systems.

A system is summarised by its long-term predicted attempts (``ltpa``): the
average number of attack attempts needed to break it.  Its broken possibility
is the reciprocal.  When several systems exchange data, the whole interaction
is compromised as soon as the first of them is broken, so the attacker's
choice of targets (uniform, or skewed toward weaker systems) decides how weak
the whole interaction is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from .errors import InvalidInputError, InvalidProfileError, UndefinedDowngradeError

SELECT_SUM_TOLERANCE = 1e-9


@dataclass(frozen=True)
class SystemProfile:
    id: str
    ltpa: float
    # None means "not specified"; analyses then assume the equal attack model.
    select_prob: float | None = None

    def __post_init__(self):
        if not (isinstance(self.ltpa, (int, float)) and math.isfinite(self.ltpa)) or self.ltpa <= 0:
            raise InvalidProfileError(f"{self.id}: ltpa must be a positive finite number, got {self.ltpa!r}")
        if self.select_prob is not None and not 0.0 <= self.select_prob <= 1.0:
            raise InvalidProfileError(f"{self.id}: select_prob must lie in [0, 1], got {self.select_prob!r}")

    @property
    def broken_possibility(self) -> float:
        return 1.0 / self.ltpa

    def with_select(self, select_prob: float) -> SystemProfile:
        return SystemProfile(self.id, self.ltpa, select_prob)


@dataclass(frozen=True)
class VerificationSpec:
    """Validation half of a system: which algorithm checks input, over which data.

    Either part may be empty, which gives the method-only and data-only forms.
    """

    method_name: str = ""
    data: tuple = ()

    @property
    def has_method(self) -> bool:
        return bool(self.method_name)

    @property
    def has_data(self) -> bool:
        return len(self.data) > 0


@dataclass(frozen=True)
class AttackEquationState:
    ra: int
    remaining: tuple[float, ...]

    @property
    def broken(self) -> tuple[bool, ...]:
        return tuple(la >= 0 for la in self.remaining)


@dataclass(frozen=True)
class DowngradeReport:
    downgraded_pairs: tuple[tuple[str, str], ...]
    p_all: float


@dataclass(frozen=True)
class ThirdPartyVerdict:
    secure: bool
    violations: tuple[str, ...] = field(default=())


def broken_possibility(profile: SystemProfile) -> float:
    if profile.ltpa <= 0:
        raise InvalidProfileError(f"{profile.id}: non-positive ltpa")
    return 1.0 / profile.ltpa


def select_probs(profiles: Sequence[SystemProfile]) -> list[float]:
    """Per-system chosen possibilities; uniform when none are given."""
    if not profiles:
        raise InvalidInputError("at least one profile is required")
    given = [p.select_prob for p in profiles]
    if all(s is None for s in given):
        return [1.0 / len(profiles)] * len(profiles)
    if any(s is None for s in given):
        raise InvalidInputError("select_prob must be given for every profile or for none")
    total = math.fsum(given)
    if abs(total - 1.0) > SELECT_SUM_TOLERANCE:
        raise InvalidInputError(f"select probabilities sum to {total!r}, expected 1")
    return list(given)


def uniform(profiles: Sequence[SystemProfile]) -> list[SystemProfile]:
    n = len(profiles)
    return [p.with_select(1.0 / n) for p in profiles]


def p_all_equal(profiles: Sequence[SystemProfile]) -> float:
    if not profiles:
        raise InvalidInputError("at least one profile is required")
    # Multiplying by 1/n (not dividing by n) keeps this bit-identical to
    # p_all_chosen over uniform(profiles).
    return max(broken_possibility(p) for p in profiles) * (1.0 / len(profiles))


def p_all_chosen(profiles: Sequence[SystemProfile]) -> float:
    """Whole-system broken possibility when system ``i`` is attacked with probability ``select_i``.

    System ``i`` falls after about ``ltpa_i / select_i`` total attempts, so the
    whole interaction breaks at rate ``max(p_i * select_i)``.  A uniform
    selection reproduces :func:`p_all_equal`.
    """
    selects = select_probs(profiles)
    # A system that is never selected can never be the first one broken.
    terms = [broken_possibility(p) * s for p, s in zip(profiles, selects) if s > 0]
    if not terms:
        raise InvalidInputError("at least one system must have select_prob > 0")
    return max(terms)


def first_broken(profiles: Sequence[SystemProfile]) -> int:
    """Index of the system the attack equation predicts will fall first."""
    selects = select_probs(profiles)
    best, best_term = -1, -1.0
    for i, (p, s) in enumerate(zip(profiles, selects)):
        if s > 0 and broken_possibility(p) * s > best_term:
            best, best_term = i, broken_possibility(p) * s
    if best < 0:
        raise InvalidInputError("at least one system must have select_prob > 0")
    return best


def attack_equation_remaining(ra: int, profiles: Sequence[SystemProfile]) -> AttackEquationState:
    """Attempts still missing per system after ``ra`` total attempts.

    Entry ``i`` is ``ra * select_i - ltpa_i``; it reaches zero when system ``i``
    is broken on average.
    """
    if ra < 0:
        raise InvalidInputError(f"ra must be non-negative, got {ra}")
    selects = select_probs(profiles)
    return AttackEquationState(
        ra=ra,
        remaining=tuple(ra * s - 1.0 / broken_possibility(p) for p, s in zip(profiles, selects)),
    )


def is_downgraded(weaker: SystemProfile, other: SystemProfile) -> bool:
    """True when attacking ``weaker`` breaks the interaction faster than ``other`` alone would break."""
    if weaker.select_prob is None or weaker.select_prob == 0:
        raise UndefinedDowngradeError(f"{weaker.id} is never attacked (select_prob = {weaker.select_prob!r})")
    return broken_possibility(weaker) * weaker.select_prob > broken_possibility(other)


def downgrade_report(profiles: Sequence[SystemProfile]) -> DowngradeReport:
    """All (weaker, downgraded) pairs plus the whole-system broken possibility.

    Profiles without select probabilities are analysed under the equal model.
    """
    selects = select_probs(profiles)
    resolved = [p.with_select(s) for p, s in zip(profiles, selects)]
    pairs = []
    for w in resolved:
        if w.select_prob == 0:
            continue
        for o in resolved:
            if o is not w and is_downgraded(w, o):
                pairs.append((w.id, o.id))
    return DowngradeReport(downgraded_pairs=tuple(pairs), p_all=p_all_chosen(resolved))


def cascade_exposure(chain: Sequence[SystemProfile], stage: int) -> float:
    """Probability that the system at ``stage`` of a cascade receives corrupted input.

    Each upstream stage is compromised independently with its broken
    possibility, and a compromised stage corrupts everything downstream.
    ``stage == len(chain)`` denotes the consumer after the last system.
    """
    if not chain:
        raise InvalidInputError("cascade must contain at least one system")
    if not 0 <= stage <= len(chain):
        raise InvalidInputError(f"stage {stage} outside 0..{len(chain)}")
    intact = 1.0
    for p in chain[:stage]:
        intact *= 1.0 - broken_possibility(p)
    return 1.0 - intact


def third_party_check(
    profile: SystemProfile, logic_public: bool, logic_verifiable: bool, max_broken: float
) -> ThirdPartyVerdict:
    if not 0 < max_broken <= 1:
        raise InvalidInputError(f"max_broken must lie in (0, 1], got {max_broken!r}")
    violations = []
    if not (logic_public and logic_verifiable):
        violations.append("rule-1")
    if broken_possibility(profile) > max_broken:
        violations.append("rule-2")
    return ThirdPartyVerdict(secure=not violations, violations=tuple(violations))
