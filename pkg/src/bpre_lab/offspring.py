"""Offspring distributions on the nonnegative integers.

Four kinds are supported: ``FiniteTable``, ``Geometric``, ``Poisson`` and
``Binary``.  Every kind exposes the scalar functionals used throughout the
package (mean, log-mean, standardized second factorial moment ``eta``,
truncated second moment ``zeta``), the generating function and a
cancellation-safe complement ``1 - f(1 - t)``.

Sampling algorithms (fixed so that a seeded ``numpy.random.Generator`` gives
the same draws on every platform):

* ``FiniteTable``: inverse CDF, ``searchsorted`` of a uniform on the
  cumulative weights; sums of ``z`` draws use ``multinomial``.
* ``Geometric(p)``: ``Generator.geometric(p) - 1``; sums use
  ``negative_binomial(z, p)``.
* ``Poisson(lam)``: ``Generator.poisson``; sums use ``poisson(z * lam)``.
* ``Binary(p)``: ``2 * (uniform < p)``; sums use ``2 * binomial(z, p)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Mapping

import numpy as np
from scipy.special import gammaln

__all__ = [
    "OffspringDistribution",
    "FiniteTable",
    "Geometric",
    "Poisson",
    "Binary",
    "mean",
    "log_mean",
    "eta",
    "zeta",
    "pgf",
    "pgf_survival_complement",
    "size_bias",
    "sample",
    "from_dict",
]

_NORMALIZATION_TOL = 1e-12
# tail mass (and y^2-weighted tail) ignored when tabulating infinite supports
_TAIL_TOL = 1e-18


def _check_unit(x, name):
    arr = np.asarray(x, dtype=float)
    if np.any(arr < 0.0) or np.any(arr > 1.0) or np.any(np.isnan(arr)):
        raise ValueError(f"{name} must lie in [0, 1], got {x!r}")
    return arr


def _scalar_or_array(value, like):
    if np.ndim(like) == 0:
        return float(value)
    return value


class OffspringDistribution:
    """Base class; subclasses are frozen dataclasses.

    Generic implementations work from a truncated probability table; the
    parametric kinds override them with closed forms.
    """

    kind: str = "abstract"

    # -- probability table -------------------------------------------------
    def support_max(self) -> int:
        """Largest ``y`` kept in :meth:`table` (exact for finite supports)."""
        raise NotImplementedError

    def pmf(self, y):
        raise NotImplementedError

    @cached_property
    def table(self) -> np.ndarray:
        ys = np.arange(self.support_max() + 1)
        return np.asarray(self.pmf(ys), dtype=float)

    # -- functionals -------------------------------------------------------
    def mean(self) -> float:
        t = self.table
        return math.fsum(np.arange(t.size) * t)

    def log_mean(self) -> float:
        return math.log(self.mean())

    def factorial_moment2(self) -> float:
        """E[Y(Y-1)]."""
        t = self.table
        y = np.arange(t.size)
        return math.fsum(y * (y - 1) * t)

    def eta(self) -> float:
        return self.factorial_moment2() / self.mean() ** 2

    def zeta(self, a: int) -> float:
        if a < 1:
            raise ValueError("a must be a positive integer")
        t = self.table
        y = np.arange(t.size)
        return math.fsum((y**2 * t)[a:]) / self.mean() ** 2

    def variance(self) -> float:
        m = self.mean()
        return self.factorial_moment2() + m - m * m

    def pgf(self, s):
        s = _check_unit(s, "s")
        t = self.table
        out = np.polynomial.polynomial.polyval(s, t)
        return _scalar_or_array(out, s)

    def pgf_survival_complement(self, t):
        """``1 - f(1 - t)`` without forming ``1 - (1 - eps)``."""
        t = _check_unit(t, "t")
        w = self.table
        y = np.arange(w.size, dtype=float)
        tt = np.atleast_1d(t)[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            # 1 - (1-t)^y, with the y = 0 column pinned to 0
            terms = -np.expm1(y[None, :] * np.log1p(-tt))
        terms[:, 0] = 0.0
        out = np.array([math.fsum(row) for row in terms * w[None, :]])
        return float(out[0]) if np.ndim(t) == 0 else out.reshape(np.shape(t))

    def complement_vec(self, t: np.ndarray) -> np.ndarray:
        """Array version of :meth:`pgf_survival_complement` for batch use.

        Same terms, plain (not compensated) summation."""
        if type(self).pgf_survival_complement is not OffspringDistribution.pgf_survival_complement:
            return np.asarray(self.pgf_survival_complement(t), dtype=float)
        w = self.table
        y = np.arange(w.size, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = -np.expm1(y[None, :] * np.log1p(-t[:, None]))
        terms[:, 0] = 0.0
        return terms @ w

    def size_bias(self) -> "OffspringDistribution":
        t = self.table
        y = np.arange(t.size)
        return FiniteTable(tuple(y * t / math.fsum(y * t)))

    def exp_tilt(self, e: float) -> "OffspringDistribution":
        """Law with weights proportional to ``q(y) * e**y``.

        Used to condition an individual's line of descent on extinction; the
        result may be the point mass at 0, which is otherwise not a valid
        offspring law, so validation is skipped.
        """
        if not 0.0 <= e <= 1.0:
            raise ValueError("tilt parameter must lie in [0, 1]")
        t = self.table
        w = t * np.power(e, np.arange(t.size))
        return FiniteTable._unchecked(w / w.sum())

    # -- sampling ----------------------------------------------------------
    @cached_property
    def _cdf(self) -> np.ndarray:
        c = np.cumsum(self.table)
        c[-1] = 1.0
        return c

    def sample(self, rng: np.random.Generator, size=None):
        u = rng.random(size)
        out = np.searchsorted(self._cdf, u, side="right")
        return int(out) if size is None else out.astype(np.int64)

    def sample_sum(self, z, rng: np.random.Generator):
        """Sum of ``z`` independent draws (``z`` scalar or int array)."""
        z = np.asarray(z, dtype=np.int64)
        t = self.table
        y = np.arange(t.size, dtype=np.int64)
        out = rng.multinomial(z.ravel(), t) @ y
        return int(out[0]) if z.ndim == 0 else out.reshape(z.shape)

    def sample_sum_tilted(self, z, e, rng: np.random.Generator):
        """Sums of ``z`` draws from ``exp_tilt(e)``, vectorized over ``z`` and ``e``."""
        z = np.atleast_1d(np.asarray(z, dtype=np.int64))
        e = np.broadcast_to(np.asarray(e, dtype=float), z.shape)
        t = self.table
        y = np.arange(t.size, dtype=np.int64)
        w = t[None, :] * np.power(e[:, None], y[None, :])
        tot = w.sum(axis=1, keepdims=True)
        # rows that cannot die out only ever carry z = 0
        w = np.where(tot > 0, w / np.where(tot > 0, tot, 1.0), np.eye(1, t.size))
        return rng.multinomial(z, w) @ y

    # -- misc --------------------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        raise NotImplementedError


@dataclass(frozen=True, eq=True)
class FiniteTable(OffspringDistribution):
    """Finite-support law; ``weights[y]`` is the mass at ``y``."""

    weights: tuple[float, ...]
    kind: str = field(default="table", init=False, repr=False, compare=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("weights must be a non-empty 1-d sequence")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        total = math.fsum(w)
        if abs(total - 1.0) > _NORMALIZATION_TOL:
            raise ValueError(f"weights sum to {total!r}, not 1")
        w = w / total
        # strip trailing zeros so the support bound is tight
        nz = np.flatnonzero(w)
        w = w[: nz[-1] + 1] if nz.size else w
        if w.size == 1:
            raise ValueError("point mass at 0 is not a valid offspring law")
        object.__setattr__(self, "weights", tuple(float(x) for x in w))

    @classmethod
    def _unchecked(cls, w) -> "FiniteTable":
        obj = object.__new__(cls)
        w = np.asarray(w, dtype=float)
        nz = np.flatnonzero(w)
        w = w[: nz[-1] + 1] if nz.size else w[:1]
        object.__setattr__(obj, "weights", tuple(float(x) for x in w))
        return obj

    def support_max(self) -> int:
        return len(self.weights) - 1

    def pmf(self, y):
        y = np.asarray(y)
        w = np.asarray(self.weights)
        yi = np.clip(y, 0, w.size - 1).astype(np.int64)
        inside = (y >= 0) & (y < w.size) & (yi == y)
        out = np.where(inside, w[yi], 0.0)
        return float(out) if out.ndim == 0 else out

    def sample_sum(self, z, rng):
        z = np.asarray(z, dtype=np.int64)
        w = np.asarray(self.weights)
        y = np.arange(w.size, dtype=np.int64)
        if z.ndim == 0:
            return int(rng.multinomial(int(z), w) @ y) if z > 0 else 0
        counts = rng.multinomial(z, w)
        return counts @ y

    def to_dict(self):
        return {"kind": "table", "weights": list(self.weights)}


@dataclass(frozen=True, eq=True)
class Geometric(OffspringDistribution):
    """Mass ``p * (1 - p)**y`` on ``y = 0, 1, ...``."""

    p: float
    kind: str = field(default="geometric", init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ValueError("Geometric p must lie in (0, 1)")

    def support_max(self) -> int:
        q = 1.0 - self.p
        # tail sum_{y>Y} y^2 q^y p is below _TAIL_TOL for this Y
        y = math.ceil(math.log(_TAIL_TOL) / math.log(q))
        while (y + 1) ** 2 * q ** (y + 1) / self.p**2 > _TAIL_TOL:
            y += 16
        return y

    def pmf(self, y):
        y = np.asarray(y)
        out = np.where(y >= 0, self.p * (1.0 - self.p) ** np.maximum(y, 0), 0.0)
        return float(out) if out.ndim == 0 else out

    def mean(self):
        return (1.0 - self.p) / self.p

    def factorial_moment2(self):
        return 2.0 * (1.0 - self.p) ** 2 / self.p**2

    def eta(self):
        return 2.0

    def pgf(self, s):
        s = _check_unit(s, "s")
        return _scalar_or_array(self.p / (1.0 - (1.0 - self.p) * s), s)

    def pgf_survival_complement(self, t):
        t = _check_unit(t, "t")
        q = 1.0 - self.p
        return _scalar_or_array(q * t / (self.p + q * t), t)

    def exp_tilt(self, e):
        if not 0.0 <= e <= 1.0:
            raise ValueError("tilt parameter must lie in [0, 1]")
        r = (1.0 - self.p) * e
        if 1.0 - r == 1.0:
            # mass at y >= 1 is below rounding
            return FiniteTable._unchecked([1.0])
        return Geometric(1.0 - r)

    def sample(self, rng, size=None):
        out = rng.geometric(self.p, size) - 1
        return int(out) if size is None else out.astype(np.int64)

    def sample_sum(self, z, rng):
        z = np.asarray(z, dtype=np.int64)
        if z.ndim == 0:
            return int(rng.negative_binomial(z, self.p)) if z > 0 else 0
        out = np.zeros(z.shape, dtype=np.int64)
        pos = z > 0
        out[pos] = rng.negative_binomial(z[pos], self.p)
        return out

    def sample_sum_tilted(self, z, e, rng):
        z = np.atleast_1d(np.asarray(z, dtype=np.int64))
        p = 1.0 - (1.0 - self.p) * np.broadcast_to(np.asarray(e, dtype=float), z.shape)
        out = np.zeros(z.shape, dtype=np.int64)
        pos = z > 0
        out[pos] = rng.negative_binomial(z[pos], p[pos])
        return out

    def size_bias(self):
        return SizeBiasedGeometric(self.p)

    def to_dict(self):
        return {"kind": "geometric", "p": self.p}


@dataclass(frozen=True, eq=True)
class Poisson(OffspringDistribution):
    lam: float
    kind: str = field(default="poisson", init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.lam > 0.0 or not math.isfinite(self.lam):
            raise ValueError("Poisson rate must be positive and finite")

    def support_max(self) -> int:
        return int(math.ceil(self.lam + 25.0 * math.sqrt(self.lam) + 60.0))

    def pmf(self, y):
        y = np.asarray(y)
        yy = np.maximum(y, 0).astype(float)
        logp = -self.lam + yy * math.log(self.lam) - gammaln(yy + 1.0)
        out = np.where(y >= 0, np.exp(logp), 0.0)
        return float(out) if out.ndim == 0 else out

    def mean(self):
        return self.lam

    def factorial_moment2(self):
        return self.lam**2

    def eta(self):
        return 1.0

    def pgf(self, s):
        s = _check_unit(s, "s")
        return _scalar_or_array(np.exp(self.lam * (s - 1.0)), s)

    def pgf_survival_complement(self, t):
        t = _check_unit(t, "t")
        return _scalar_or_array(-np.expm1(-self.lam * t), t)

    def exp_tilt(self, e):
        if not 0.0 <= e <= 1.0:
            raise ValueError("tilt parameter must lie in [0, 1]")
        if e == 0.0:
            return FiniteTable._unchecked([1.0])
        return Poisson(self.lam * e)

    def sample(self, rng, size=None):
        out = rng.poisson(self.lam, size)
        return int(out) if size is None else out.astype(np.int64)

    def sample_sum(self, z, rng):
        z = np.asarray(z, dtype=np.int64)
        out = rng.poisson(self.lam * z)
        return int(out) if z.ndim == 0 else out.astype(np.int64)

    def sample_sum_tilted(self, z, e, rng):
        z = np.atleast_1d(np.asarray(z, dtype=np.int64))
        return rng.poisson(self.lam * z * np.asarray(e, dtype=float)).astype(np.int64)

    def size_bias(self):
        return ShiftedPoisson(self.lam)

    def to_dict(self):
        return {"kind": "poisson", "lambda": self.lam}


@dataclass(frozen=True, eq=True)
class Binary(OffspringDistribution):
    """Two children with probability ``p``, none otherwise."""

    p: float
    kind: str = field(default="binary", init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise ValueError("Binary p must lie in (0, 1]")

    def support_max(self):
        return 2

    def pmf(self, y):
        y = np.asarray(y)
        out = np.where(y == 0, 1.0 - self.p, np.where(y == 2, self.p, 0.0))
        return float(out) if out.ndim == 0 else out

    def mean(self):
        return 2.0 * self.p

    def factorial_moment2(self):
        return 2.0 * self.p

    def eta(self):
        return 1.0 / (2.0 * self.p)

    def zeta(self, a):
        if a < 1:
            raise ValueError("a must be a positive integer")
        return 4.0 * self.p / self.mean() ** 2 if a <= 2 else 0.0

    def pgf(self, s):
        s = _check_unit(s, "s")
        return _scalar_or_array(1.0 - self.p + self.p * s * s, s)

    def pgf_survival_complement(self, t):
        t = _check_unit(t, "t")
        return _scalar_or_array(self.p * t * (2.0 - t), t)

    def exp_tilt(self, e):
        if not 0.0 <= e <= 1.0:
            raise ValueError("tilt parameter must lie in [0, 1]")
        w2 = self.p * e * e
        if 1.0 - self.p + w2 == 0.0:
            raise ValueError("Binary(1) cannot be conditioned on extinction")
        return Binary._tilted(w2 / (1.0 - self.p + w2))

    @classmethod
    def _tilted(cls, p):
        if p > 0.0:
            return cls(p)
        return FiniteTable._unchecked([1.0])

    def sample(self, rng, size=None):
        out = 2 * (rng.random(size) < self.p)
        return int(out) if size is None else out.astype(np.int64)

    def sample_sum(self, z, rng):
        z = np.asarray(z, dtype=np.int64)
        out = 2 * rng.binomial(z, self.p)
        return int(out) if z.ndim == 0 else out.astype(np.int64)

    def sample_sum_tilted(self, z, e, rng):
        z = np.atleast_1d(np.asarray(z, dtype=np.int64))
        w2 = self.p * np.asarray(e, dtype=float) ** 2
        den = 1.0 - self.p + w2
        p2 = np.divide(w2, den, out=np.zeros(np.broadcast(w2, den).shape), where=den > 0)
        return 2 * rng.binomial(z, p2).astype(np.int64)

    def size_bias(self):
        return FiniteTable((0.0, 0.0, 1.0))

    def to_dict(self):
        return {"kind": "binary", "p": self.p}


@dataclass(frozen=True, eq=True)
class SizeBiasedGeometric(OffspringDistribution):
    """``1 + NegBin(2, p)``: the size-biased version of ``Geometric(p)``."""

    p: float
    kind: str = field(default="sb-geometric", init=False, repr=False, compare=False)

    def support_max(self):
        q = 1.0 - self.p
        y = math.ceil(math.log(_TAIL_TOL) / math.log(q)) + 8
        while (y + 1) ** 3 * q**y > _TAIL_TOL:
            y += 16
        return y

    def pmf(self, y):
        y = np.asarray(y)
        yy = np.maximum(y, 1)
        out = np.where(y >= 1, yy * self.p**2 * (1.0 - self.p) ** (yy - 1), 0.0)
        return float(out) if out.ndim == 0 else out

    def mean(self):
        return 1.0 + 2.0 * (1.0 - self.p) / self.p

    def sample(self, rng, size=None):
        out = 1 + rng.negative_binomial(2, self.p, size)
        return int(out) if size is None else out.astype(np.int64)

    def to_dict(self):
        return {"kind": "sb-geometric", "p": self.p}


@dataclass(frozen=True, eq=True)
class ShiftedPoisson(OffspringDistribution):
    """``1 + Poisson(lam)``: the size-biased version of ``Poisson(lam)``."""

    lam: float
    kind: str = field(default="shifted-poisson", init=False, repr=False, compare=False)

    def support_max(self):
        return int(math.ceil(self.lam + 25.0 * math.sqrt(self.lam) + 61.0))

    def pmf(self, y):
        y = np.asarray(y)
        return np.where(y >= 1, Poisson(self.lam).pmf(np.maximum(y - 1, 0)), 0.0)

    def mean(self):
        return 1.0 + self.lam

    def sample(self, rng, size=None):
        out = 1 + rng.poisson(self.lam, size)
        return int(out) if size is None else out.astype(np.int64)

    def to_dict(self):
        return {"kind": "shifted-poisson", "lambda": self.lam}


# -- functional interface ----------------------------------------------------


def mean(q: OffspringDistribution) -> float:
    return q.mean()


def log_mean(q: OffspringDistribution) -> float:
    return q.log_mean()


def eta(q: OffspringDistribution) -> float:
    """Standardized second factorial moment ``E[Y(Y-1)] / m^2``."""
    return q.eta()


def zeta(q: OffspringDistribution, a: int) -> float:
    """``sum_{y >= a} y^2 q(y) / m^2``."""
    return q.zeta(a)


def pgf(q: OffspringDistribution, s):
    return q.pgf(s)


def pgf_survival_complement(q: OffspringDistribution, t):
    return q.pgf_survival_complement(t)


def size_bias(q: OffspringDistribution) -> OffspringDistribution:
    return q.size_bias()


def sample(q: OffspringDistribution, rng: np.random.Generator, size=None):
    return q.sample(rng, size)


def from_dict(spec: Mapping[str, Any]) -> OffspringDistribution:
    """Parse ``{"kind": "geometric", "p": 0.5}`` and friends."""
    try:
        kind = spec["kind"].lower()
    except (KeyError, AttributeError):
        raise ValueError(f"offspring spec needs a 'kind': {spec!r}") from None
    if kind in ("table", "finite", "finitetable"):
        return FiniteTable(tuple(float(w) for w in spec["weights"]))
    if kind == "geometric":
        return Geometric(float(spec["p"]))
    if kind == "poisson":
        lam = spec.get("lambda", spec.get("lam"))
        if lam is None:
            raise ValueError("poisson spec needs 'lambda'")
        return Poisson(float(lam))
    if kind == "binary":
        return Binary(float(spec["p"]))
    raise ValueError(f"unknown offspring kind {kind!r}")
