import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from bpre_lab import offspring as off
from bpre_lab.offspring import Binary, FiniteTable, Geometric, Poisson

probs = st.floats(0.05, 0.95)
unit = st.floats(0.0, 1.0)


def tables(max_len=6):
    return st.lists(st.floats(0.01, 1.0), min_size=2, max_size=max_len).map(
        lambda w: FiniteTable(tuple(np.asarray(w) / sum(w)))
    )


laws = st.one_of(
    probs.map(Geometric),
    st.floats(0.1, 8.0).map(Poisson),
    probs.map(Binary),
    tables(),
)


# -- closed forms against generic table computations --------------------------------------


def test_binary_eta_is_half_inverse_p():
    q = Binary(0.3)
    assert q.mean() == pytest.approx(0.6)
    assert q.eta() == pytest.approx(1 / 0.6)
    # variance of 2 * Bernoulli(p)
    assert q.variance() == pytest.approx(4 * 0.3 * 0.7)


def test_geometric_moments_match_scipy():
    p = 0.4
    q = Geometric(p)
    ref = stats.geom(p, loc=-1)
    assert q.mean() == pytest.approx(ref.mean())
    assert q.variance() == pytest.approx(ref.var())
    assert q.eta() == pytest.approx(2.0)


def test_poisson_eta_is_one():
    q = Poisson(3.5)
    assert q.eta() == pytest.approx(1.0)
    assert q.pmf(4) == pytest.approx(stats.poisson(3.5).pmf(4))


@settings(max_examples=60, deadline=None)
@given(laws, unit)
def test_pgf_matches_table_sum(q, s):
    y = np.arange(q.support_max() + 1)
    ref = math.fsum(q.pmf(y) * s**y)
    assert q.pgf(s) == pytest.approx(ref, rel=1e-9, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(laws, st.floats(1e-300, 1.0))
def test_survival_complement_consistent(q, t):
    c = q.pgf_survival_complement(t)
    assert 0.0 <= c <= 1.0 + 1e-15
    if t > 1e-6:
        assert c == pytest.approx(1.0 - q.pgf(1.0 - t), rel=1e-8, abs=1e-13)
    # first order: 1 - f(1 - t) ~ m t
    if t < 1e-12:
        assert c == pytest.approx(q.mean() * t, rel=1e-6)


@settings(max_examples=40, deadline=None)
@given(laws, st.lists(st.floats(0.0, 1.0), min_size=1, max_size=5))
def test_complement_vec_agrees_with_scalar(q, ts):
    t = np.array(ts)
    v = q.complement_vec(t)
    ref = np.array([q.pgf_survival_complement(x) for x in ts])
    np.testing.assert_allclose(v, ref, rtol=1e-12, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(laws, unit)
def test_exp_tilt_normalized_and_monotone(q, e):
    t = q.exp_tilt(e)
    tab = t.table
    assert math.fsum(tab) == pytest.approx(1.0)
    assert t.mean() <= q.mean() + 1e-12


def test_exp_tilt_binary_one_at_zero_rejected():
    with pytest.raises(ValueError):
        Binary(1.0).exp_tilt(0.0)


@settings(max_examples=40, deadline=None)
@given(laws)
def test_size_bias_mean_identity(q):
    # E_sb[Y] = E[Y^2] / E[Y]
    y = np.arange(q.support_max() + 1, dtype=float)
    m2 = math.fsum(y * y * q.pmf(y))
    assert q.size_bias().mean() == pytest.approx(m2 / q.mean(), rel=1e-9)


def test_invalid_parameters():
    for bad in (lambda: Geometric(0.0), lambda: Binary(0.0), lambda: Poisson(0.0),
                lambda: FiniteTable((0.5, 0.6))):
        with pytest.raises(ValueError):
            bad()
    with pytest.raises(ValueError):
        Geometric(0.5).pgf(1.5)


@pytest.mark.parametrize("q", [Geometric(0.3), Poisson(2.5), Binary(0.4), FiniteTable((0.2, 0.5, 0.3))])
def test_to_dict_roundtrip(q):
    assert off.from_dict(q.to_dict()) == q


# -- samplers --------------------------------------------------------------------------------


@pytest.mark.parametrize("q", [Geometric(0.3), Poisson(2.5), Binary(0.4), FiniteTable((0.2, 0.5, 0.3))])
def test_sample_sum_moments(q, rng):
    z = 7
    x = q.sample_sum(np.full(40000, z), rng)
    se = math.sqrt(z * q.variance() / x.size)
    assert abs(x.mean() - z * q.mean()) < 5 * se


@pytest.mark.parametrize("q", [Geometric(0.3), Poisson(2.5), Binary(0.4), FiniteTable((0.2, 0.5, 0.3))])
def test_sample_sum_tilted_matches_tilt(q, rng):
    z, e = 3, 0.6
    x = q.sample_sum_tilted(np.full(40000, z), e, rng)
    t = q.exp_tilt(e)
    se = math.sqrt(max(z * t.variance(), 1e-12) / x.size)
    assert abs(x.mean() - z * t.mean()) < 5 * se + 1e-12


def test_sample_sum_zero_is_zero(rng):
    for q in (Geometric(0.3), Poisson(2.5), Binary(0.4), FiniteTable((0.2, 0.5, 0.3))):
        assert np.all(q.sample_sum(np.zeros(5, dtype=np.int64), rng) == 0)


def test_sample_single_draw_chi_square(rng):
    q = FiniteTable((0.1, 0.2, 0.3, 0.4))
    x = q.sample(rng, 20000)
    obs = np.bincount(x, minlength=4)
    assert stats.chisquare(obs, 20000 * np.array(q.table)).pvalue > 1e-3
