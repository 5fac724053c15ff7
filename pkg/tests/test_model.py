import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cifuv.errors import InvalidInputError, InvalidProfileError, UndefinedDowngradeError
from cifuv.model import (
    SystemProfile,
    VerificationSpec,
    attack_equation_remaining,
    broken_possibility,
    cascade_exposure,
    downgrade_report,
    first_broken,
    is_downgraded,
    p_all_chosen,
    p_all_equal,
    third_party_check,
    uniform,
)


def prof(ltpa, select=None, id=None):
    return SystemProfile(id or f"sys{ltpa}", ltpa, select)


def first_break_ra(ltpas, selects):
    """Brute-force: smallest real ra with some la_i = ra*s_i - ltpa_i >= 0, exact in rationals."""
    candidates = [Fraction(l) / Fraction(s) for l, s in zip(ltpas, selects) if s > 0]
    ra = min(candidates)
    remaining = [ra * Fraction(s) - Fraction(l) for l, s in zip(ltpas, selects)]
    assert max(remaining) == 0
    return ra


class TestBrokenPossibility:
    def test_table_one_weak_system(self):
        assert broken_possibility(prof(4096)) == 1 / 4096
        assert math.isclose(broken_possibility(prof(4096)), 2.4414e-4, rel_tol=1e-4)

    def test_single_attempt(self):
        assert broken_possibility(prof(1)) == 1.0

    def test_table_one_strongest(self):
        assert broken_possibility(prof(131072)) == 1 / 131072

    @pytest.mark.parametrize("ltpa", [0, -1, float("nan"), float("inf")])
    def test_rejects_bad_ltpa(self, ltpa):
        with pytest.raises(InvalidProfileError):
            prof(ltpa)

    def test_rejects_bad_select(self):
        with pytest.raises(InvalidProfileError):
            prof(4096, 1.5)


class TestPAll:
    def test_equal_c1(self):
        assert p_all_equal([prof(4096), prof(8192)]) == 1 / 8192

    def test_equal_single(self):
        assert p_all_equal([prof(777)]) == 1 / 777

    def test_equal_c5(self):
        assert p_all_equal([prof(4096), prof(131072)]) == 1 / 8192

    def test_equal_empty(self):
        with pytest.raises(InvalidInputError):
            p_all_equal([])

    def test_chosen_single_target(self):
        assert p_all_chosen([prof(4096, 1.0), prof(16384, 0.0)]) == 1 / 4096

    def test_chosen_uniform_matches_equal(self):
        ps = [prof(4096), prof(8192), prof(12000)]
        assert p_all_chosen(uniform(ps)) == p_all_equal(ps)

    def test_chosen_skewed_against_attack_equation(self):
        ltpas, selects = (4096, 16384), (Fraction(3, 4), Fraction(1, 4))
        expected = 1 / first_break_ra(ltpas, selects)
        assert expected == Fraction(3, 16384)
        got = p_all_chosen([prof(4096, 0.75), prof(16384, 0.25)])
        assert got == pytest.approx(float(expected), rel=1e-15)

    def test_chosen_all_zero(self):
        with pytest.raises(InvalidInputError):
            p_all_chosen([prof(4096, 0.0), prof(8192, 0.0)])

    def test_chosen_bad_sum(self):
        with pytest.raises(InvalidInputError):
            p_all_chosen([prof(4096, 0.6), prof(8192, 0.6)])

    def test_mixed_select_rejected(self):
        with pytest.raises(InvalidInputError):
            p_all_chosen([prof(4096, 1.0), prof(8192)])

    def test_first_broken(self):
        assert first_broken([prof(4096, 0.75), prof(16384, 0.25)]) == 0
        assert first_broken([prof(4096, 0.01), prof(16384, 0.99)]) == 1


class TestAttackEquation:
    def test_no_attempts(self):
        st_ = attack_equation_remaining(0, [prof(4096), prof(8192)])
        assert st_.remaining == (-4096, -8192)

    def test_weak_exactly_broken(self):
        st_ = attack_equation_remaining(8192, [prof(4096, 0.5), prof(8192, 0.5)])
        assert st_.remaining == (0, -4096)
        assert st_.broken == (True, False)

    def test_c2(self):
        st_ = attack_equation_remaining(16384, [prof(4096, 0.5), prof(16384, 0.5)])
        assert st_.remaining == (4096, -8192)

    def test_negative_ra(self):
        with pytest.raises(InvalidInputError):
            attack_equation_remaining(-1, [prof(4096)])


class TestDowngrade:
    def test_exact_twice_is_boundary(self):
        # p1 == 2 * p2 is the demarcation point: not downgraded.
        assert not is_downgraded(prof(4096, 0.5), prof(8192))

    def test_more_than_twice(self):
        assert is_downgraded(prof(4096, 0.5), prof(8193))

    def test_roles_swapped(self):
        assert not is_downgraded(prof(8192, 0.5), prof(4096))

    def test_chosen_single_target(self):
        assert is_downgraded(prof(4096, 1.0), prof(4097))

    def test_never_attacked(self):
        with pytest.raises(UndefinedDowngradeError):
            is_downgraded(prof(4096, 0.0), prof(8192))

    def test_report_single_target(self):
        rep = downgrade_report([prof(4096, 1.0, "a"), prof(16384, 0.0, "b")])
        assert rep.downgraded_pairs == (("a", "b"),)
        assert rep.p_all == 1 / 4096

    def test_report_single_profile(self):
        rep = downgrade_report([prof(4096)])
        assert rep.downgraded_pairs == ()
        assert rep.p_all == 1 / 4096

    def test_report_c2_equal(self):
        rep = downgrade_report([prof(4096, id="a"), prof(16384, id="b")])
        assert rep.downgraded_pairs == (("a", "b"),)
        assert rep.p_all == 1 / 8192


class TestCascade:
    def test_stage_zero(self):
        assert cascade_exposure([prof(4096)], 0) == 0.0

    def test_always_broken_upstream(self):
        assert cascade_exposure([prof(1)], 1) == 1.0

    def test_against_monte_carlo(self):
        chain = [prof(4096), prof(8192)]
        rng = np.random.default_rng(20240601)
        trials = 1_000_000
        broken = np.zeros(trials, dtype=bool)
        for p in chain:
            broken |= rng.random(trials) < 1 / p.ltpa
        assert cascade_exposure(chain, 2) == pytest.approx(broken.mean(), abs=1e-4)

    def test_out_of_bounds(self):
        with pytest.raises(InvalidInputError):
            cascade_exposure([prof(4096)], 2)
        with pytest.raises(InvalidInputError):
            cascade_exposure([], 0)


class TestThirdParty:
    def test_secure(self):
        assert third_party_check(prof(1e6), True, True, 1e-4).secure

    def test_not_public(self):
        v = third_party_check(prof(1e6), False, True, 1e-4)
        assert not v.secure and v.violations == ("rule-1",)

    def test_too_weak(self):
        v = third_party_check(prof(10), True, True, 1e-4)
        assert not v.secure and v.violations == ("rule-2",)

    def test_both(self):
        assert third_party_check(prof(10), True, False, 1e-4).violations == ("rule-1", "rule-2")


def test_verification_spec_simplified_forms():
    assert not VerificationSpec().has_method and not VerificationSpec().has_data
    assert VerificationSpec("sha256-pow").has_method
    assert VerificationSpec(data=(b"x",)).has_data


ltpas = st.floats(min_value=1.0, max_value=1e7, allow_nan=False)


@st.composite
def chosen_profiles(draw, min_size=1, max_size=6):
    n = draw(st.integers(min_size, max_size))
    ls = draw(st.lists(ltpas, min_size=n, max_size=n))
    weights = draw(st.lists(st.integers(0, 100), min_size=n, max_size=n).filter(lambda w: sum(w) > 0))
    total = sum(weights)
    return [prof(l, w / total, f"s{i}") for i, (l, w) in enumerate(zip(ls, weights))]


@given(st.lists(ltpas, min_size=1, max_size=8))
def test_equal_is_uniform_chosen(ls):
    ps = [prof(l, id=f"s{i}") for i, l in enumerate(ls)]
    assert p_all_equal(ps) == p_all_chosen(uniform(ps))


@given(chosen_profiles(), st.data())
def test_chosen_monotone_in_ltpa(ps, data):
    i = data.draw(st.integers(0, len(ps) - 1))
    factor = data.draw(st.floats(1.0, 100.0))
    stronger = list(ps)
    stronger[i] = SystemProfile(ps[i].id, ps[i].ltpa * factor, ps[i].select_prob)
    assert p_all_chosen(stronger) <= p_all_chosen(ps)


@given(chosen_profiles(), st.integers(0, 10**9))
def test_no_break_before_predicted(ps, ra):
    state = attack_equation_remaining(ra, ps)
    if all(la < 0 for la in state.remaining):
        assert ra < 1 / p_all_chosen(ps) * (1 + 1e-12)


@settings(max_examples=1000)
@given(ltpas, ltpas, st.floats(min_value=1e-6, max_value=1.0))
def test_downgrade_matches_pair_p_all(lw, lo, s):
    w, o = prof(lw, s, "w"), prof(lo, 1.0 - s, "o")
    pair_p_all = max(broken_possibility(w) * s, broken_possibility(o) * (1.0 - s))
    assert is_downgraded(w, o) == (pair_p_all > broken_possibility(o))


@given(st.lists(ltpas, min_size=1, max_size=8))
def test_cascade_monotone(ls):
    chain = [prof(l) for l in ls]
    values = [cascade_exposure(chain, k) for k in range(len(chain) + 1)]
    assert all(a <= b for a, b in zip(values, values[1:]))
