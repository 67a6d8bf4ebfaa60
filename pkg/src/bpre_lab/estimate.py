"""Monte Carlo result types, seeded streams and block map-reduce.

Replicates are processed in fixed-size blocks.  Block ``b`` of estimator
``key`` always draws from the counter-based stream
``Philox(SeedSequence(seed, spawn_key=(key, b)))`` regardless of how many
worker processes are used, and block results are reduced in block order, so
outputs are bit-identical across shard counts.
"""

from __future__ import annotations

import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import multiprocessing as mp
import numpy as np

DEFAULT_BLOCK = 1 << 14


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float
    n_samples: int
    seed: int | None = None
    estimator_id: str = ""
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.stderr >= 0.0 and not math.isnan(self.stderr):
            raise ValueError("stderr must be nonnegative")

    def ci(self, level: float = 0.95) -> tuple[float, float]:
        from scipy.stats import norm

        h = norm.ppf(0.5 + level / 2.0) * self.stderr
        return self.value - h, self.value + h

    def agrees_with(self, other: "Estimate | float", k: float = 3.0) -> bool:
        if isinstance(other, Estimate):
            se = math.hypot(self.stderr, other.stderr)
            return abs(self.value - other.value) <= k * se
        return abs(self.value - other) <= k * self.stderr


@dataclass(frozen=True)
class EmpiricalDistribution:
    """Finite distribution given as sorted support and relative frequencies."""

    support: np.ndarray
    freq: np.ndarray
    total: float
    ess: float = math.nan

    def __post_init__(self):
        if self.freq.size and abs(math.fsum(self.freq) - 1.0) > 1e-12:
            raise ValueError("frequencies must sum to 1")

    @classmethod
    def from_samples(cls, values, weights=None) -> "EmpiricalDistribution":
        values = np.asarray(values)
        w = np.ones(values.shape) if weights is None else np.asarray(weights, float)
        support, inv = np.unique(values, return_inverse=True)
        mass = np.bincount(inv.ravel(), weights=w.ravel(), minlength=support.size)
        total = mass.sum()
        freq = mass / total
        # absorb rounding so the invariant holds to the last ulp
        if freq.size:
            freq[np.argmax(freq)] += 1.0 - math.fsum(freq)
        return cls(support, freq, float(total), effective_sample_size(w))

    def pmf(self, x) -> float:
        i = np.searchsorted(self.support, x)
        if i < self.support.size and self.support[i] == x:
            return float(self.freq[i])
        return 0.0

    def mean(self, fn: Callable[[np.ndarray], np.ndarray] = lambda x: x) -> float:
        return float(np.dot(self.freq, fn(self.support.astype(float))))

    def cdf(self, x) -> float:
        return float(self.freq[self.support <= x].sum())

    def quantile(self, q: float) -> float:
        c = np.cumsum(self.freq)
        i = min(np.searchsorted(c, q - 1e-12), self.support.size - 1)
        return float(self.support[i])

    def as_dict(self) -> dict[str, Any]:
        return {
            "support": self.support.tolist(),
            "freq": self.freq.tolist(),
            "total": self.total,
            "ess": self.ess,
        }


def tv_distance(p: EmpiricalDistribution, q: EmpiricalDistribution) -> float:
    keys = np.union1d(p.support, q.support)
    a = np.array([p.pmf(k) for k in keys])
    b = np.array([q.pmf(k) for k in keys])
    return 0.5 * float(np.abs(a - b).sum())


def tv_distance_dicts(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return 0.5 * math.fsum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def effective_sample_size(w) -> float:
    w = np.asarray(w, dtype=float)
    s2 = float(np.dot(w.ravel(), w.ravel()))
    return float(w.sum()) ** 2 / s2 if s2 > 0 else 0.0


def weighted_mean(values, weights) -> tuple[float, float]:
    """Self-normalized mean and its delta-method standard error."""
    v = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    sw = w.sum()
    if sw <= 0:
        return math.nan, math.nan
    mu = float(np.dot(w, v) / sw)
    se = math.sqrt(float(np.dot(w * w, (v - mu) ** 2))) / sw
    return mu, se


def weighted_corr(x, y, weights) -> float:
    w = np.asarray(weights, float) / np.sum(weights)
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    mx, my = np.dot(w, x), np.dot(w, y)
    cov = np.dot(w, (x - mx) * (y - my))
    vx = np.dot(w, (x - mx) ** 2)
    vy = np.dot(w, (y - my) ** 2)
    if vx <= 0 or vy <= 0:
        return 0.0
    return float(cov / math.sqrt(vx * vy))


def weighted_quantile(values, weights, q: float) -> float:
    v = np.asarray(values, float)
    w = np.asarray(weights, float)
    order = np.argsort(v, kind="stable")
    c = np.cumsum(w[order])
    c /= c[-1]
    return float(v[order][min(np.searchsorted(c, q), v.size - 1)])


def ks_distance(a, b, wa=None, wb=None) -> float:
    """Two-sample Kolmogorov-Smirnov distance, optionally weighted."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    wa = np.ones(a.size) if wa is None else np.asarray(wa, float)
    wb = np.ones(b.size) if wb is None else np.asarray(wb, float)
    grid = np.union1d(a, b)

    def ecdf(x, w):
        order = np.argsort(x, kind="stable")
        xs, cw = x[order], np.cumsum(w[order]) / w.sum()
        idx = np.searchsorted(xs, grid, side="right")
        return np.where(idx > 0, cw[np.maximum(idx - 1, 0)], 0.0)

    return float(np.max(np.abs(ecdf(a, wa) - ecdf(b, wb))))


# -- seeded streams ------------------------------------------------------------


def _key_int(key) -> int:
    if isinstance(key, int):
        return key
    return zlib.crc32(str(key).encode())


def stream(seed: int, *key) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key_int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def _run_block(args):
    func, seed, key, b, size, extra = args
    return func(stream(seed, key, b), size, *extra)


def map_blocks(
    func: Callable[..., Any],
    n_total: int,
    seed: int,
    key: str,
    *,
    extra: Sequence[Any] = (),
    shards: int = 1,
    block_size: int = DEFAULT_BLOCK,
) -> list[Any]:
    """Apply ``func(rng, size, *extra)`` to every block; results in block order."""
    n_blocks = max(1, math.ceil(n_total / block_size))
    jobs = []
    for b in range(n_blocks):
        size = min(block_size, n_total - b * block_size)
        if size > 0:
            jobs.append((func, seed, key, b, size, tuple(extra)))
    if shards <= 1 or len(jobs) == 1:
        return [_run_block(j) for j in jobs]
    ctx = mp.get_context("fork")
    with ProcessPoolExecutor(max_workers=shards, mp_context=ctx) as ex:
        return list(ex.map(_run_block, jobs))
