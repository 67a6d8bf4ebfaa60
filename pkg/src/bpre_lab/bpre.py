"""The branching process in a fixed (quenched) environment.

Generation ``k`` reproduces by ``q_k``; ``f_k`` is its generating function.
Compositions are written ``f_{j,k} = f_{j+1} o ... o f_k`` for ``j <= k`` and
``f_{j,k} = f_j o ... o f_{k+1}`` for ``j > k``.  Survival probabilities are
computed on the complement scale ``t = 1 - s`` throughout, which keeps tiny
subcritical probabilities accurate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .offspring import Geometric, OffspringDistribution

DEFAULT_CAP = 10**9


class PopulationOverflow(RuntimeError):
    """Population exceeded the cap; ``partial`` holds the generations so far."""

    def __init__(self, partial: "Trajectory", cap: int):
        super().__init__(f"population exceeded cap {cap} at generation {partial.n}")
        self.partial = partial
        self.cap = cap


@dataclass(frozen=True, eq=False)
class QuenchedEnvironment:
    """Offspring laws ``q_1..q_n``; ``atoms[k-1]`` is ``q_k``."""

    atoms: tuple[OffspringDistribution, ...]

    def __post_init__(self):
        object.__setattr__(self, "atoms", tuple(self.atoms))

    @classmethod
    def from_indices(cls, law, idx: Sequence[int]) -> "QuenchedEnvironment":
        return cls(tuple(law.atoms[int(j)] for j in idx))

    @property
    def n(self) -> int:
        return len(self.atoms)

    @cached_property
    def X(self) -> np.ndarray:
        return np.array([q.log_mean() for q in self.atoms], dtype=float)

    @cached_property
    def S(self) -> np.ndarray:
        """``S_0 = 0, ..., S_n``."""
        return np.concatenate([[0.0], np.cumsum(self.X)])

    @cached_property
    def eta(self) -> np.ndarray:
        """``eta_1..eta_n`` (index ``k-1`` holds ``eta_k``)."""
        return np.array([q.eta() for q in self.atoms], dtype=float)

    def prefix(self, n: int) -> "QuenchedEnvironment":
        if not 0 <= n <= self.n:
            raise IndexError(f"prefix length {n} outside 0..{self.n}")
        return QuenchedEnvironment(self.atoms[:n])

    def suffix(self, i: int) -> "QuenchedEnvironment":
        """Environment seen by an individual of generation ``i``."""
        if not 0 <= i <= self.n:
            raise IndexError(f"suffix start {i} outside 0..{self.n}")
        return QuenchedEnvironment(self.atoms[i:])


@dataclass(frozen=True)
class Trajectory:
    Z: tuple[int, ...]

    def __post_init__(self):
        z = tuple(int(v) for v in self.Z)
        if any(v < 0 for v in z):
            raise ValueError("population sizes must be nonnegative")
        for a, b in zip(z, z[1:]):
            if a == 0 and b != 0:
                raise ValueError("an extinct population cannot recover")
        object.__setattr__(self, "Z", z)

    @property
    def n(self) -> int:
        return len(self.Z) - 1

    @property
    def alive(self) -> bool:
        return self.Z[-1] > 0

    def as_array(self) -> np.ndarray:
        return np.asarray(self.Z, dtype=np.int64)


def simulate_quenched(
    env: QuenchedEnvironment, z0: int = 1, rng: np.random.Generator | None = None, cap: int = DEFAULT_CAP
) -> Trajectory:
    """Generation sizes; ``Z_k`` is a sum of ``Z_{k-1}`` draws from ``q_k``.

    Sums are drawn from the exact convolution law (multinomial, negative
    binomial, Poisson or binomial), never from an approximation.
    """
    if z0 < 0:
        raise ValueError("z0 must be nonnegative")
    rng = np.random.default_rng() if rng is None else rng
    Z = [int(z0)]
    for q in env.atoms:
        z = Z[-1]
        nxt = int(q.sample_sum(z, rng)) if z > 0 else 0
        if nxt > cap:
            raise PopulationOverflow(Trajectory(tuple(Z)), cap)
        Z.append(nxt)
    return Trajectory(tuple(Z))


def _check_index(env: QuenchedEnvironment, *ks: int) -> None:
    for k in ks:
        if not 0 <= k <= env.n:
            raise IndexError(f"generation index {k} outside 0..{env.n}")


def compose_pgf(env: QuenchedEnvironment, j: int, k: int, s):
    """``f_{j,k}(s)``; the identity when ``j == k``."""
    _check_index(env, j, k)
    out = s
    if j <= k:
        order = range(k, j, -1)  # f_k first, f_{j+1} last
    else:
        order = range(k + 1, j + 1)  # f_{k+1} first, f_j last
    for i in order:
        out = env.atoms[i - 1].pgf(out)
    return out


def compose_complement(env: QuenchedEnvironment, j: int, k: int, t):
    """``1 - f_{j,k}(1 - t)`` by iterating single-step complements."""
    _check_index(env, j, k)
    out = t
    order = range(k, j, -1) if j <= k else range(k + 1, j + 1)
    for i in order:
        out = env.atoms[i - 1].pgf_survival_complement(out)
    return out


def suffix_survival(env: QuenchedEnvironment, n: int | None = None) -> np.ndarray:
    """``s_i = P(Z_n > 0 | Z_i = 1)`` for ``i = 0..n``; ``s_n = 1``."""
    n = env.n if n is None else n
    _check_index(env, n)
    s = np.empty(n + 1)
    s[n] = 1.0
    for i in range(n, 0, -1):
        s[i - 1] = env.atoms[i - 1].pgf_survival_complement(s[i])
    return s


def survival_quenched(env: QuenchedEnvironment, n: int | None = None) -> float:
    """``1 - f_{0,n}(0)``."""
    return float(suffix_survival(env, n)[0])


_RENORM_EVERY = 16


def survival_lf_exact(env: QuenchedEnvironment, n: int | None = None) -> float:
    """Survival for all-geometric environments by Möbius composition.

    On the complement scale a geometric pgf is ``t -> (1-p) t / (p + (1-p) t)``,
    i.e. the matrix ``[[1-p, 0], [1-p, p]]``.  All entries are nonnegative, so
    the product carries no cancellation.
    """
    n = env.n if n is None else n
    _check_index(env, n)
    A = np.eye(2)
    for k, q in enumerate(env.atoms[:n], 1):
        if not isinstance(q, Geometric):
            raise TypeError(f"generation {k} is not geometric: {q!r}")
        a = 1.0 - q.p
        A = A @ np.array([[a, 0.0], [a, q.p]])
        if k % _RENORM_EVERY == 0:
            A /= np.abs(A).max()
    num, den = A @ np.ones(2)
    return float(num / den)


def agresti_bound_check(env: QuenchedEnvironment, s: float, k: int) -> tuple[float, float, bool]:
    """Lower bound for ``(1 - f_{k,0}(s)) e^{-S_k}`` in terms of ``eta`` and ``S``.

    The composition is the reversed one, ``f_k o ... o f_1``.  Returns
    ``(lhs, rhs, lhs >= rhs)`` with a relative slack of 1e-12 for rounding.
    """
    if not 0.0 <= s < 1.0:
        raise ValueError("s must lie in [0, 1)")
    _check_index(env, k)
    lhs = float(compose_complement(env, k, 0, 1.0 - s)) * math.exp(-env.S[k])
    acc = 1.0 / (1.0 - s) + math.fsum(env.eta[:k] * np.exp(env.S[1 : k + 1]))
    rhs = 1.0 / acc
    return lhs, rhs, lhs >= rhs * (1.0 - 1e-12)


def lf_survival_identity(env: QuenchedEnvironment, n: int | None = None) -> float:
    """Closed form of ``1 - f_{0,n}(0)`` for geometric environments.

    For linear-fractional laws ``1/(1 - f_{0,n}(0)) = e^{-S_n} +
    sum_{k<n} (eta_{k+1}/2) e^{-S_k}`` holds with equality.
    """
    n = env.n if n is None else n
    _check_index(env, n)
    S = env.S
    acc = math.exp(-S[n]) + math.fsum(0.5 * env.eta[:n] * np.exp(-S[:n]))
    return 1.0 / acc


def _factorial_moments(env: QuenchedEnvironment, n: int) -> tuple[float, float]:
    """``E[Z_n]`` and ``E[Z_n (Z_n - 1)]`` from ``Z_0 = 1``."""
    M, F = 1.0, 0.0
    for q in env.atoms[:n]:
        m = q.mean()
        F = F * m * m + M * q.factorial_moment2()
        M = M * m
    return M, F


def variance_formula_check(env: QuenchedEnvironment, z: int, n: int | None = None) -> tuple[float, float]:
    """``(formula, exact)`` for ``Var(Z_n | Z_0 = z)``.

    ``formula`` is ``z e^{2 S_n} (e^{-S_n} + sum_{i<n} eta_{i+1} e^{-S_i} - 1)``;
    ``exact`` comes from the factorial-moment recursion of the composed pgf.
    """
    n = env.n if n is None else n
    _check_index(env, n)
    S = env.S
    bracket = math.exp(-S[n]) + math.fsum(env.eta[:n] * np.exp(-S[:n])) - 1.0
    formula = z * math.exp(2.0 * S[n]) * bracket
    M, F = _factorial_moments(env, n)
    exact = z * (F + M - M * M)
    return formula, exact


def eta_series(env: QuenchedEnvironment, direction: str = "forward") -> np.ndarray:
    """Partial sums indexed by ``K = 1..n``.

    ``forward``: ``sum_{k<K} eta_{k+1} e^{-S_k}``; ``reversed``:
    ``sum_{k=1}^{K} eta_k e^{S_k}``.
    """
    if direction == "forward":
        terms = env.eta * np.exp(-env.S[:-1])
    elif direction == "reversed":
        terms = env.eta * np.exp(env.S[1:])
    else:
        raise ValueError("direction must be 'forward' or 'reversed'")
    return np.cumsum(terms)


def eta_series_increment(env: QuenchedEnvironment, direction: str = "forward") -> float:
    """Growth of the partial sums between ``K = n/2`` and ``K = n``."""
    ps = eta_series(env, direction)
    if ps.size < 2:
        return math.nan
    return float(ps[-1] - ps[ps.size // 2 - 1])


# -- batched versions over environments given as atom-index arrays -----------


def batch_suffix_survival(law, idx: np.ndarray) -> np.ndarray:
    """Row-wise ``suffix_survival`` for an ``(N, n)`` array of atom indices."""
    idx = np.asarray(idx)
    N, n = idx.shape
    s = np.empty((N, n + 1))
    s[:, n] = 1.0
    for i in range(n, 0, -1):
        col = idx[:, i - 1]
        cur = s[:, i]
        nxt = np.empty(N)
        for j, q in enumerate(law.atoms):
            rows = col == j
            if rows.any():
                nxt[rows] = q.complement_vec(cur[rows])
        s[:, i - 1] = nxt
    return s


def batch_simulate(
    law, idx: np.ndarray, rng: np.random.Generator, z0: int = 1, cap: int = DEFAULT_CAP
) -> np.ndarray:
    """``(N, n+1)`` generation sizes, one row per environment."""
    idx = np.asarray(idx)
    N, n = idx.shape
    Z = np.zeros((N, n + 1), dtype=np.int64)
    Z[:, 0] = z0
    for i in range(n):
        col = idx[:, i]
        cur = Z[:, i]
        for j, q in enumerate(law.atoms):
            rows = (col == j) & (cur > 0)
            if rows.any():
                Z[rows, i + 1] = q.sample_sum(cur[rows], rng)
        if Z[:, i + 1].max(initial=0) > cap:
            r = int(np.argmax(Z[:, i + 1]))
            raise PopulationOverflow(Trajectory(tuple(Z[r, : i + 1])), cap)
    return Z


def batch_survival_indicator(
    law, idx: np.ndarray, rng: np.random.Generator, s: np.ndarray | None = None,
    saturate: int = 10**12, annealed: bool = False,
) -> np.ndarray:
    """Unbiased per-row draws of ``1{Z_n > 0}``.

    Populations are simulated generation by generation; once a row exceeds
    ``saturate`` it is replaced by its exact conditional survival probability
    ``1 - (1 - s_k)^{Z_k}``, which keeps the estimate unbiased while avoiding
    astronomically large draws.
    """
    idx = np.asarray(idx)
    N, n = idx.shape
    s = batch_suffix_survival(law, idx) if s is None else s
    out = np.zeros(N)
    Z = np.ones(N, dtype=np.int64)
    live = np.ones(N, dtype=bool)
    for i in range(n):
        col = idx[:, i]
        for j, q in enumerate(law.atoms):
            rows = live & (col == j)
            if rows.any():
                Z[rows] = q.sample_sum(Z[rows], rng)
        big = live & (Z > saturate)
        if big.any():
            with np.errstate(divide="ignore"):
                out[big] = -np.expm1(Z[big] * np.log1p(-s[big, i + 1]))
            live &= ~big
        live &= Z > 0
    out[live] = 1.0
    return out
