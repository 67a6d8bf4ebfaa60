import math
import time
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bpre_lab import walk
from bpre_lab.walk import RejectionBudgetExceeded, RenewalTable, StepLaw, WalkPath

SRW = StepLaw((-1.0, 1.0), (0.5, 0.5))

increments = st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=30)


@settings(max_examples=80, deadline=None)
@given(increments)
def test_dual_is_involution_and_keeps_endpoint(inc):
    p = WalkPath(np.array(inc))
    d = walk.dual(p)
    assert walk.dual(d) == p
    assert walk.lambda_map(walk.lambda_map(p)) == p
    assert d.S[-1] == pytest.approx(p.S[-1], abs=1e-9)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.sampled_from([-1.5, 0.7, 2.2]), min_size=1, max_size=20))
def test_duality_maps_events(inc):
    # {tau_n = n} for the path is {M_n < 0} for its dual
    p = WalkPath(np.array(inc))
    tau_end = bool(walk.min_at_end_mask(p.S[None, :])[0])
    d = walk.dual(p)
    assert tau_end == bool(d.S[1:].max() < 0)


@settings(max_examples=50, deadline=None)
@given(increments)
def test_stats_fields(inc):
    p = WalkPath(np.array(inc))
    s = walk.stats(p)
    assert p.S[s.tau] == p.S.min()
    assert np.all(p.S[: s.tau] > p.S[s.tau])
    assert s.L == p.S[1:].min() and s.M == p.S[1:].max()


def test_ballot_formula_oracle():
    for m in range(1, 7):
        n = 2 * m
        assert walk.prob_max_negative(SRW, n) == pytest.approx(comb(n, m) / (2 * 4**m), abs=1e-15)


@pytest.mark.parametrize("n", [1, 2, 5, 9, 12])
def test_duality_exact(moderate, n):
    a, b = walk.duality_check(moderate, n)
    assert a == pytest.approx(b, abs=1e-12)
    assert walk.prob_max_negative(moderate, n) == pytest.approx(b, abs=1e-12)


def test_prob_max_negative_frozen(moderate):
    # frozen from the exhaustive enumeration at n = 12
    assert walk.prob_max_negative(moderate, 12) == pytest.approx(0.170719, abs=5e-7)


def test_prob_max_negative_decreasing(moderate):
    vals = [walk.prob_max_negative(moderate, n) for n in (4, 8, 16, 32)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_renewal_u_at_zero_exact(moderate):
    assert walk.renewal_u(moderate, 0.0).value == 1.0
    assert walk.renewal_u(moderate, -0.1).value == 0.0
    assert walk.renewal_v(moderate, 0.2).value == 0.0


def test_srw_renewal_limits():
    # strict descending ladder heights are all 1, so u(x) -> 1 + floor(x)
    for K in (50, 200):
        t = RenewalTable(SRW, "u", K)
        gap = 2.0 - t(1.0)
        assert 0 < gap <= walk.renewal_tail_bound(SRW, "u", 1.0, K)
    # paths staying positive sit at S_k >= 1
    assert RenewalTable(SRW, "v", 40)(-1.0) == 1.0


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 6), st.floats(0, 6))
def test_renewal_u_monotone(x, y):
    t = RenewalTable(SRW, "u", 30)
    lo, hi = sorted((x, y))
    assert t(lo) <= t(hi)


def test_renewal_mc_agrees_with_exact(moderate, rng):
    ex = walk.renewal_u(moderate, 0.7, K=12, method="exact")
    mc = walk.renewal_u(moderate, 0.7, K=12, samples=200000, rng=rng, method="mc")
    assert mc.agrees_with(ex, 4.0)
    exv = walk.renewal_v(moderate, -0.7, K=12, method="exact")
    mcv = walk.renewal_v(moderate, -0.7, K=12, samples=200000, rng=rng, method="mc")
    assert mcv.agrees_with(exv, 4.0)


def test_renewal_mc_needs_rng(moderate):
    with pytest.raises(ValueError):
        walk.renewal_u(moderate, 0.5, method="mc")


@pytest.mark.parametrize("fn,x", [("u", 0.5), ("u", 1.3), ("v", -0.5), ("v", -1.3)])
def test_harmonicity_residual_bounded(moderate, fn, x):
    r4 = walk.harmonicity_residual(moderate, fn, x, 4)
    r16 = walk.harmonicity_residual(moderate, fn, x, 16)
    r64 = walk.harmonicity_residual(moderate, fn, x, 64)
    assert r16 <= walk.harmonicity_tail_bound(moderate, fn, x, 16)
    # not monotone step by step (the terms oscillate), but vanishing
    assert r64 <= r4


def test_harmonicity_domain_errors(moderate):
    with pytest.raises(ValueError):
        walk.harmonicity_residual(moderate, "u", -1.0, 4)
    with pytest.raises(ValueError):
        walk.harmonicity_residual(moderate, "v", 1.0, 4)


def test_doob_transform_is_probability(moderate, rng):
    # E^+[1] = 1 for the exact u; truncation at K biases it down like K**-0.5
    vals = []
    for K in (20, 80, 320):
        e = walk.doob_expectation(moderate, "+", 0.5, 6, samples=50000, rng=np.random.default_rng(7), K=K)
        assert e.metadata["self_normalized"] == pytest.approx(1.0)
        vals.append(e.value)
    assert vals[0] < vals[1] < vals[2] < 1.02
    assert 1.0 - vals[2] < 0.5 * (1.0 - vals[0])


def test_doob_bad_start(moderate):
    with pytest.raises(ValueError):
        walk.doob_expectation(moderate, "+", -1.0, 3)
    with pytest.raises(ValueError):
        walk.doob_expectation(moderate, "*", 0.0, 3)


def test_conditioned_samplers_hit_events(moderate, rng):
    step = walk.as_step_law(moderate)
    idx = walk.sample_conditioned_indices(moderate, 10, 500, rng, "tau=n")
    S = walk.prefix_sums(step.x[idx])
    assert np.all(walk.min_at_end_mask(S))
    idx = walk.sample_conditioned_indices(moderate, 10, 500, rng, "L>=0")
    S = walk.prefix_sums(step.x[idx])
    assert np.all(S[:, 1:].min(axis=1) >= 0)
    inc = walk.sample_min_at_end_batch(moderate, 8, 300, rng)
    assert np.all(walk.min_at_end_mask(walk.prefix_sums(inc)))


def test_acceptance_rate_matches_exact(moderate, rng):
    step = walk.as_step_law(moderate)
    S = walk.prefix_sums(step.sample_increments(rng, (200000, 10)))
    p = float((S[:, 1:].max(axis=1) < 0).mean())
    exact = walk.prob_max_negative(moderate, 10)
    assert abs(p - exact) < 5 * math.sqrt(exact * (1 - exact) / 200000)


def test_rejection_budget_reports_rate(moderate, rng):
    with pytest.raises(RejectionBudgetExceeded) as err:
        walk.sample_conditioned_indices(moderate, 400, 1000, rng, "tau=n", budget=2000)
    assert "acceptance rate" in str(err.value)


def test_arcsine_diagnostic_u_shape(moderate, rng):
    d = walk.arcsine_diagnostic(moderate, 200, 20000, rng)
    assert d.u_shaped()
    assert math.isclose(d.bin_masses.sum(), 1.0)


def test_step_law_validation():
    with pytest.raises(ValueError):
        StepLaw((1.0,), (0.5,))
    with pytest.raises(ValueError):
        StepLaw((1.0, 2.0), (0.5,))


def test_duality_runtime(moderate):
    t0 = time.perf_counter()
    for n in range(1, 13):
        walk.duality_check(moderate, n)
    assert time.perf_counter() - t0 < 10
