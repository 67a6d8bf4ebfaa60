"""Fluctuation functionals of the associated random walk.

Walk-level functions take either a :class:`StepLaw` (a finite law of the
increment ``X``) or anything with a ``step_law(measure)`` method such as
:class:`bpre_lab.environment.EnvironmentLaw`; in the latter case the tilted
law (the recurrent walk) is used, since renewal functions, Doob transforms and
conditioned paths all live under the tilted measure.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
from scipy.stats import chi2 as chi2_dist

from .estimate import Estimate

_EXACT_STATE_BUDGET = 10**6


class RejectionBudgetExceeded(RuntimeError):
    def __init__(self, attempts: int, accepted: int):
        self.attempts = attempts
        self.accepted = accepted
        rate = accepted / attempts if attempts else 0.0
        super().__init__(
            f"rejection budget of {attempts} draws exhausted "
            f"(acceptance rate {rate:.3g})"
        )


# -- increment law -------------------------------------------------------------


@dataclass(frozen=True)
class StepLaw:
    """Finite law of the walk increment: ``P(X = values[j]) = probs[j]``."""

    values: tuple[float, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        if len(self.values) != len(self.probs) or not self.values:
            raise ValueError("values and probs must be non-empty and aligned")
        if abs(math.fsum(self.probs) - 1.0) > 1e-12 or min(self.probs) < 0:
            raise ValueError("probs must be a probability vector")

    @cached_property
    def x(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    @cached_property
    def p(self) -> np.ndarray:
        return np.asarray(self.probs, dtype=float)

    @cached_property
    def _cdf(self) -> np.ndarray:
        c = np.cumsum(self.p)
        c[-1] = 1.0
        return c

    def mean(self) -> float:
        return math.fsum(self.x * self.p)

    def var(self) -> float:
        mu = self.mean()
        return math.fsum(self.p * (self.x - mu) ** 2)

    def sample_indices(self, rng: np.random.Generator, shape) -> np.ndarray:
        u = rng.random(shape)
        return np.searchsorted(self._cdf, u, side="right").astype(np.int8)

    def sample_increments(self, rng, shape) -> np.ndarray:
        return self.x[self.sample_indices(rng, shape)]


def as_step_law(law) -> StepLaw:
    if isinstance(law, StepLaw):
        return law
    return law.step_law("tilted")


# -- paths -----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class WalkPath:
    increments: np.ndarray
    start: float = 0.0

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float).ravel()
        object.__setattr__(self, "increments", inc)

    @property
    def n(self) -> int:
        return self.increments.size

    @cached_property
    def S(self) -> np.ndarray:
        out = np.empty(self.n + 1)
        out[0] = self.start
        np.cumsum(self.increments, out=out[1:])
        out[1:] += self.start
        return out

    def __eq__(self, other):
        return (
            isinstance(other, WalkPath)
            and self.start == other.start
            and np.array_equal(self.increments, other.increments)
        )

    def __hash__(self):
        return hash((self.start, self.increments.tobytes()))


@dataclass(frozen=True)
class WalkStats:
    tau: int
    L: float
    M: float
    S: np.ndarray

    def L_after(self, k: int) -> float:
        """``min(S_{k+1}, ..., S_n) - S_k``."""
        if k >= self.S.size - 1:
            raise ValueError("need k < n")
        return float(self.S[k + 1 :].min() - self.S[k])


def stats(path: WalkPath) -> WalkStats:
    if path.n < 1:
        raise ValueError("stats need n >= 1")
    S = path.S
    return WalkStats(
        tau=int(np.argmin(S)), L=float(S[1:].min()), M=float(S[1:].max()), S=S
    )


def dual(path: WalkPath) -> WalkPath:
    """``S^_k = S_0 + S_n - S_{n-k}``: the increments in reverse order."""
    return WalkPath(path.increments[::-1].copy(), path.start)


def lambda_map(path: WalkPath) -> WalkPath:
    """Discrete version of ``g -> g(1) - g((1-t)-)``; an involution."""
    if path.n < 1:
        raise ValueError("lambda_map needs n >= 1")
    return dual(path)


def prefix_sums(increments: np.ndarray, start: float = 0.0) -> np.ndarray:
    """Row-wise ``S_0..S_n`` for a batch of increment rows."""
    inc = np.asarray(increments, dtype=float)
    S = np.empty(inc.shape[:-1] + (inc.shape[-1] + 1,))
    S[..., 0] = start
    np.cumsum(inc, axis=-1, out=S[..., 1:])
    if start:
        S[..., 1:] += start
    return S


def tau_batch(S: np.ndarray) -> np.ndarray:
    """First index attaining the row minimum of ``S_0..S_n``."""
    return np.argmin(S, axis=-1)


def min_at_end_mask(S: np.ndarray) -> np.ndarray:
    """``tau_n == n`` row-wise, i.e. ``S_n < S_j`` for all ``j < n``."""
    return S[..., -1] < S[..., :-1].min(axis=-1)


# -- exhaustive enumeration -------------------------------------------------------


def enumerate_sequences(step: StepLaw, n: int) -> tuple[np.ndarray, np.ndarray]:
    """All ``A**n`` index sequences with their probabilities."""
    A = len(step.values)
    idx = np.array(list(itertools.product(range(A), repeat=n)), dtype=np.int64)
    idx = idx.reshape(A**n, n)
    probs = np.prod(step.p[idx], axis=1) if n else np.ones(1)
    return idx, probs


def duality_check(law, n: int) -> tuple[float, float]:
    """``P(tau_n = n)`` and ``P(M_n < 0)`` by enumerating every sequence.

    The first is read off the path itself, the second off its dual.
    """
    step = as_step_law(law)
    idx, probs = enumerate_sequences(step, n)
    inc = step.x[idx]
    S = prefix_sums(inc)
    tau_end = min_at_end_mask(S)
    dual_S = prefix_sums(inc[:, ::-1])
    m_neg = dual_S[:, 1:].max(axis=1) < 0
    return math.fsum(probs[tau_end]), math.fsum(probs[m_neg])


def prob_max_negative(law, n: int, budget: int = _EXACT_STATE_BUDGET) -> float:
    """Exact ``P(M_n < 0)`` (equal to ``P(tau_n = n)``) by a dynamic program.

    The position after ``k`` steps depends only on how often each atom was
    used, so the surviving mass is tracked on count vectors.
    """
    step = as_step_law(law)
    A = len(step.values)
    states = {(0,) * A: 1.0}
    for _ in range(n):
        nxt: dict[tuple[int, ...], float] = {}
        for c, pr in states.items():
            for j in range(A):
                c2 = c[:j] + (c[j] + 1,) + c[j + 1 :]
                if float(np.dot(c2, step.x)) < 0:
                    nxt[c2] = nxt.get(c2, 0.0) + pr * step.p[j]
        states = nxt
        if len(states) > budget:
            raise OverflowError("state budget exceeded")
    return math.fsum(states.values())


# -- renewal functions ------------------------------------------------------------


class RenewalTable:
    """Exact truncated renewal sums from a dynamic program on count vectors.

    A walk with ``A`` atoms is at ``sum_j c_j X_j`` after ``k`` steps, where
    ``c`` counts how often each atom was drawn; paths are merged on ``c``.
    ``kind="u"`` keeps paths with all partial sums negative (``M_k < 0``),
    ``kind="v"`` those with all partial sums positive (``L_k > 0``).
    """

    def __init__(self, law, kind: str, K: int):
        if kind not in ("u", "v"):
            raise ValueError("kind must be 'u' or 'v'")
        self.step = as_step_law(law)
        self.kind = kind
        self.K = K
        A = len(self.step.values)
        x, p = self.step.x, self.step.p
        states = {tuple([0] * A): 1.0}
        self.levels: list[tuple[np.ndarray, np.ndarray]] = []
        n_states = 0
        for _ in range(K):
            nxt: dict[tuple[int, ...], float] = {}
            for c, mass in states.items():
                for j in range(A):
                    c2 = c[:j] + (c[j] + 1,) + c[j + 1 :]
                    nxt[c2] = nxt.get(c2, 0.0) + mass * p[j]
            keys = list(nxt)
            counts = np.array(keys, dtype=float).reshape(len(keys), A)
            s = counts @ x
            keep = s < 0 if kind == "u" else s > 0
            states = {k: nxt[k] for k, ok in zip(keys, keep) if ok}
            self.levels.append((s[keep], np.array([nxt[k] for k, ok in zip(keys, keep) if ok])))
            n_states += len(keys)
            if n_states > _EXACT_STATE_BUDGET:
                raise OverflowError("renewal state budget exceeded")
        pos = np.concatenate([lv[0] for lv in self.levels]) if self.levels else np.zeros(0)
        mass = np.concatenate([lv[1] for lv in self.levels]) if self.levels else np.zeros(0)
        # u: count mass with -S <= x ; v: count mass with S < -x
        key = -pos if kind == "u" else pos
        order = np.argsort(key, kind="stable")
        self._keys = key[order]
        self._cum = np.concatenate([[0.0], np.cumsum(mass[order])])

    def summands(self, x: float) -> np.ndarray:
        """Per-step terms ``P(-S_k <= x, M_k < 0)`` (resp. the v-terms)."""
        out = np.empty(len(self.levels))
        for k, (s, m) in enumerate(self.levels):
            sel = -s <= x if self.kind == "u" else s < -x
            out[k] = math.fsum(m[sel])
        return out

    def _raw(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "u":
            i = np.searchsorted(self._keys, x, side="right")
        else:
            i = np.searchsorted(self._keys, -x, side="left")
        return 1.0 + self._cum[i]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "u":
            out = np.where(x >= 0, self._raw(x), 0.0)
        else:
            neg = self.step.x < 0
            v0 = float(np.dot(self.step.p[neg], self._raw(self.step.x[neg])))
            out = np.where(x < 0, self._raw(x), np.where(x == 0, v0, 0.0))
        return float(out) if out.ndim == 0 else out


def _renewal_mc(step: StepLaw, kind, x, K, samples, rng) -> Estimate:
    counts = np.zeros(samples)
    block = 1 << 14
    done = 0
    while done < samples:
        b = min(block, samples - done)
        S = prefix_sums(step.sample_increments(rng, (b, K)))[:, 1:]
        if kind == "u":
            alive = np.maximum.accumulate(S, axis=1) < 0
            hit = alive & (-S <= x)
        else:
            alive = np.minimum.accumulate(S, axis=1) > 0
            hit = alive & (S < -x)
        counts[done : done + b] = hit.sum(axis=1)
        done += b
    return Estimate(
        1.0 + counts.mean(),
        counts.std(ddof=1) / math.sqrt(samples),
        samples,
        estimator_id=f"renewal-{kind}-mc",
        metadata={"x": x, "K": K},
    )


def _renewal(law, kind, x, K, samples, rng, method) -> Estimate:
    step = as_step_law(law)
    if method not in ("auto", "exact", "mc"):
        raise ValueError("method must be auto, exact or mc")
    if method != "mc":
        try:
            table = RenewalTable(step, kind, K)
        except OverflowError:
            if method == "exact":
                raise
        else:
            return Estimate(
                float(table(x)), 0.0, 0, estimator_id=f"renewal-{kind}-exact",
                metadata={"x": x, "K": K},
            )
    if samples is None or rng is None:
        raise ValueError("Monte Carlo renewal evaluation needs samples and rng")
    return _renewal_mc(step, kind, x, K, samples, rng)


def renewal_u(law, x: float, K: int = 32, samples=None, rng=None, method="auto") -> Estimate:
    """``u(x) = 1 + sum_{k<=K} P(-S_k <= x, M_k < 0)`` for ``x >= 0``, else 0."""
    if x < 0:
        return Estimate(0.0, 0.0, 0, estimator_id="renewal-u-exact", metadata={"x": x, "K": K})
    if x == 0:
        return Estimate(1.0, 0.0, 0, estimator_id="renewal-u-exact", metadata={"x": x, "K": K})
    return _renewal(law, "u", x, K, samples, rng, method)


def renewal_v(law, x: float, K: int = 32, samples=None, rng=None, method="auto") -> Estimate:
    """``v(x) = 1 + sum_{k<=K} P(-S_k > x, L_k > 0)`` for ``x < 0``;
    ``v(0) = E[v(X); X < 0]``; 0 for ``x > 0``."""
    if x > 0:
        return Estimate(0.0, 0.0, 0, estimator_id="renewal-v-exact", metadata={"x": x, "K": K})
    if x < 0:
        return _renewal(law, "v", x, K, samples, rng, method)
    step = as_step_law(law)
    neg = np.flatnonzero(step.x < 0)
    parts = [_renewal(step, "v", float(step.x[j]), K, samples, rng, method) for j in neg]
    value = math.fsum(step.p[j] * e.value for j, e in zip(neg, parts))
    se = math.sqrt(math.fsum((step.p[j] * e.stderr) ** 2 for j, e in zip(neg, parts)))
    return Estimate(value, se, parts[0].n_samples if parts else 0,
                    estimator_id=parts[0].estimator_id if parts else "renewal-v-exact",
                    metadata={"x": 0.0, "K": K})


def renewal_tail_bound(law, fn: str, x: float, K: int, tail_exponent: float = 1.5) -> float:
    """Estimate of the series remainder beyond ``K``.

    The summands decay polynomially (like ``k**-1.5`` for finite-variance
    steps) and oscillate on arithmetic-looking laws, so neither a geometric
    fit nor a fitted slope is reliable.  The envelope ``C k**-p`` with
    ``p = tail_exponent`` is taken over the terms on ``[K/2, K]`` and the
    remainder bounded by ``C K**(1-p) / (p-1)``.
    """
    if tail_exponent <= 1.0:
        raise ValueError("tail_exponent must exceed 1")
    table = RenewalTable(law, fn, K)
    a = table.summands(x)
    k = np.arange(1, K + 1, dtype=float)
    sel = k >= max(1, K // 2)
    p = tail_exponent
    C = float(np.max(a[sel] * k[sel] ** p)) if sel.any() else 0.0
    return C * K ** (1.0 - p) / (p - 1.0)


def harmonicity_residual(law, fn: str, x: float, K: int) -> float:
    """``|E[u(x+X); x+X >= 0] - u(x)|`` (resp. the v-identity on ``x+X < 0``)
    with both renewal functions truncated at ``K`` steps."""
    step = as_step_law(law)
    table = RenewalTable(step, fn, K)
    y = x + step.x
    if fn == "u":
        if x < 0:
            raise ValueError("u-harmonicity needs x >= 0")
        lhs = math.fsum(step.p * np.where(y >= 0, table(y), 0.0))
    else:
        if x > 0:
            raise ValueError("v-harmonicity needs x <= 0")
        lhs = math.fsum(step.p * np.where(y < 0, table(y), 0.0))
    return abs(lhs - float(table(x)))


def harmonicity_tail_bound(law, fn: str, x: float, K: int) -> float:
    """Bound on the residual: the truncation remainder at the evaluation points."""
    step = as_step_law(law)
    if fn == "u":
        pts = [x] + [float(x + d) for d in step.x if x + d >= 0]
    else:
        # v(0) is defined through the identity itself, so only x < 0 counts
        pts = ([x] if x < 0 else []) + [float(x + d) for d in step.x if x < 0 and x + d < 0]
    return max([renewal_tail_bound(step, fn, p, K) for p in pts] or [0.0])


# -- Doob transforms ---------------------------------------------------------------


def doob_expectation(
    law,
    sign: str,
    x: float,
    n: int,
    R: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
    samples: int = 10**5,
    rng: np.random.Generator | None = None,
    K: int = 32,
) -> Estimate:
    """``E_x^+[R_n] = E_x[R_n u(S_n); L_n >= 0] / u(x)`` (sign ``"+"``) or
    ``E_x^-[R_n] = E_x[R_n v(S_n); M_n < 0] / v(x)`` (sign ``"-"``).

    ``R(idx, S)`` receives the atom indices ``(samples, n)`` and the paths
    ``(samples, n + 1)``.  The self-normalized variant is stored in
    ``metadata["self_normalized"]``.
    """
    if sign not in ("+", "-"):
        raise ValueError("sign must be '+' or '-'")
    if (sign == "+" and x < 0) or (sign == "-" and x > 0):
        raise ValueError("start point outside the transform's domain")
    step = as_step_law(law)
    rng = rng if rng is not None else np.random.default_rng()
    table = RenewalTable(step, "u" if sign == "+" else "v", K)
    h0 = float(table(x))
    if h0 <= 0:
        raise ValueError(f"degenerate start: h({x}) = {h0}")
    idx = step.sample_indices(rng, (samples, n))
    S = prefix_sums(step.x[idx], x)
    if sign == "+":
        ok = S[:, 1:].min(axis=1) >= 0 if n else np.ones(samples, bool)
    else:
        ok = S[:, 1:].max(axis=1) < 0 if n else np.ones(samples, bool)
    h = np.where(ok, table(S[:, -1]), 0.0)
    r = np.ones(samples) if R is None else np.asarray(R(idx, S), dtype=float)
    vals = r * h / h0
    sn, sn_se = (math.nan, math.nan)
    if h.sum() > 0:
        sn = float(np.dot(r, h) / h.sum())
        sn_se = math.sqrt(float(np.dot(h * h, (r - sn) ** 2))) / h.sum()
    return Estimate(
        float(vals.mean()),
        float(vals.std(ddof=1) / math.sqrt(samples)),
        samples,
        estimator_id=f"doob{sign}",
        metadata={"x": x, "n": n, "K": K, "self_normalized": sn,
                  "self_normalized_stderr": sn_se},
    )


# -- conditioned paths ---------------------------------------------------------------


def _default_budget(size: int) -> int:
    # acceptance rates decay like n^{-1/2}; 64 draws per kept row covers n in the hundreds
    return max(10**7, 64 * size)


def sample_min_at_end_batch(
    law, n: int, size: int, rng: np.random.Generator, budget: int | None = None
) -> np.ndarray:
    """``size`` increment rows distributed as the walk given ``tau_n = n``.

    Rows are drawn i.i.d., kept when their partial sums stay negative
    (``M_n < 0``), then reversed; reversal maps that event onto ``tau_n = n``.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    step = as_step_law(law)
    budget = _default_budget(size) if budget is None else budget
    out = np.empty((size, n))
    got = tried = 0
    while got < size:
        if tried >= budget:
            raise RejectionBudgetExceeded(tried, got)
        b = int(min(max(4 * (size - got), 1024), 1 << 16, budget - tried))
        inc = step.sample_increments(rng, (b, n))
        ok = np.cumsum(inc, axis=1).max(axis=1) < 0
        acc = inc[ok][: size - got]
        out[got : got + acc.shape[0]] = acc[:, ::-1]
        got += acc.shape[0]
        tried += b
    return out


def sample_conditioned_indices(
    law, n: int, size: int, rng: np.random.Generator, event: str, budget: int | None = None
) -> np.ndarray:
    """Atom-index rows of the walk conditioned on ``event``.

    ``"L>=0"``: the path never goes below its start.  ``"tau=n"``: the first
    minimum sits at the end (drawn as ``M_n < 0`` rows, then reversed).
    """
    if event not in ("L>=0", "tau=n"):
        raise ValueError("event must be 'L>=0' or 'tau=n'")
    if n < 1:
        raise ValueError("need n >= 1")
    step = as_step_law(law)
    budget = _default_budget(size) if budget is None else budget
    out = np.empty((size, n), dtype=np.int8)
    got = tried = 0
    while got < size:
        if tried >= budget:
            raise RejectionBudgetExceeded(tried, got)
        b = int(min(max(4 * (size - got), 1024), 1 << 16, budget - tried))
        idx = step.sample_indices(rng, (b, n))
        cs = np.cumsum(step.x[idx], axis=1)
        ok = cs.min(axis=1) >= 0 if event == "L>=0" else cs.max(axis=1) < 0
        acc = idx[ok][: size - got]
        if event == "tau=n":
            acc = acc[:, ::-1]
        out[got : got + acc.shape[0]] = acc
        got += acc.shape[0]
        tried += b
    return out


def sample_min_at_end(law, n: int, rng: np.random.Generator, budget: int | None = None) -> WalkPath:
    return WalkPath(sample_min_at_end_batch(law, n, 1, rng, budget)[0])


# -- arcsine diagnostic -----------------------------------------------------------------


@dataclass(frozen=True)
class ArcsineDiagnostic:
    bin_masses: np.ndarray
    expected: np.ndarray
    chi2: float
    p_value: float
    samples: int

    def u_shaped(self) -> bool:
        m = self.bin_masses
        centre = m[1:-1].max()
        return bool(m[0] > centre and m[-1] > centre)


def arcsine_diagnostic(law, n: int, samples: int, rng: np.random.Generator, bins: int = 10):
    """Histogram of ``tau_n / n`` against the arcsine law ``(2/pi) asin(sqrt(t))``."""
    step = as_step_law(law)
    counts = np.zeros(bins)
    done = 0
    while done < samples:
        b = min(1 << 15, samples - done)
        S = prefix_sums(step.sample_increments(rng, (b, n)))
        frac = tau_batch(S) / n
        k = np.minimum((frac * bins).astype(int), bins - 1)
        counts += np.bincount(k, minlength=bins)
        done += b
    masses = counts / samples
    edges = np.linspace(0.0, 1.0, bins + 1)
    F = 2.0 / np.pi * np.arcsin(np.sqrt(edges))
    expected = np.diff(F)
    stat = float(samples * np.sum((masses - expected) ** 2 / expected))
    return ArcsineDiagnostic(masses, expected, stat, float(chi2_dist.sf(stat, bins - 1)), samples)
