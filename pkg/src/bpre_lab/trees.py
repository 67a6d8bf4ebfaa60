"""Ordered trees, trees with a stem, and the two spine constructions.

A tree is stored level by level: ``levels[g][j]`` is the number of children of
the ``j``-th node (left to right) of generation ``g``.  Left-to-right order
within a generation coincides with the lexicographic order of Neveu codes, so
codes are only materialized when asked for.  A stem is stored as the
position of its node in each generation.

Two random trests are built for a quenched environment:

* the size-biased (LPP) trest, whose stem reproduces by the size-biased law
  and whose next stem node is uniform among the stem's children;
* the Geiger trest, which has the law of the leftmost stem of the tree
  conditioned on ``Z_n > 0``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator

import numpy as np

from .bpre import (PopulationOverflow, QuenchedEnvironment, Trajectory, batch_suffix_survival, suffix_survival,
                   variance_formula_check)
from .estimate import Estimate
from .offspring import OffspringDistribution
from .walk import sample_conditioned_indices

Code = tuple[int, ...]

_ENUM_BUDGET = 10**7


class ImpossibleConditioning(ValueError):
    pass


class EnumerationBudgetExceeded(RuntimeError):
    pass


# -- ordered trees ------------------------------------------------------------


@dataclass(frozen=True)
class OrderedTree:
    levels: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        lv = tuple(tuple(int(c) for c in row) for row in self.levels)
        if not lv or len(lv[0]) != 1:
            raise ValueError("generation 0 must consist of the root alone")
        for g in range(len(lv) - 1):
            if sum(lv[g]) != len(lv[g + 1]):
                raise ValueError(f"generation {g + 1} size does not match child counts")
        if any(c < 0 for row in lv for c in row):
            raise ValueError("child counts must be nonnegative")
        # drop empty trailing generations so equal trees compare equal
        while len(lv) > 1 and not lv[-1]:
            lv = lv[:-1]
        if sum(lv[-1]) != 0:
            raise ValueError("last stored generation must be childless")
        object.__setattr__(self, "levels", lv)

    @classmethod
    def from_codes(cls, codes) -> "OrderedTree":
        nodes = set(map(tuple, codes))
        if () not in nodes:
            raise ValueError("missing root")
        for v in nodes:
            if v and (v[:-1] not in nodes or (v[-1] > 1 and v[:-1] + (v[-1] - 1,) not in nodes)):
                raise ValueError(f"node set is not an ordered tree at {v}")
            if any(c < 1 for c in v):
                raise ValueError("Neveu codes use positive integers")
        h = max(len(v) for v in nodes)
        by_gen = [sorted(v for v in nodes if len(v) == g) for g in range(h + 1)]
        levels = []
        for g in range(h + 1):
            kids = {}
            for v in by_gen[g + 1] if g < h else ():
                kids[v[:-1]] = kids.get(v[:-1], 0) + 1
            levels.append(tuple(kids.get(v, 0) for v in by_gen[g]))
        return cls(tuple(levels))

    @classmethod
    def path(cls, n: int) -> "OrderedTree":
        return cls(tuple((1,) for _ in range(n)) + ((0,),))

    @property
    def height(self) -> int:
        return len(self.levels) - 1

    def generation_sizes(self) -> tuple[int, ...]:
        return tuple(len(row) for row in self.levels)

    def n_nodes(self) -> int:
        return sum(self.generation_sizes())

    def child_range(self, g: int, j: int) -> range:
        start = sum(self.levels[g][:j])
        return range(start, start + self.levels[g][j])

    def codes(self) -> list[Code]:
        """Neveu codes, generation by generation, left to right."""
        out: list[Code] = [()]
        gen: list[Code] = [()]
        for row in self.levels:
            nxt = [v + (c,) for v, k in zip(gen, row) for c in range(1, k + 1)]
            out.extend(nxt)
            gen = nxt
        return out

    def code_of(self, g: int, j: int) -> Code:
        code = []
        for h in range(g, 0, -1):
            row = self.levels[h - 1]
            acc = 0
            for parent, k in enumerate(row):
                if j < acc + k:
                    code.append(j - acc + 1)
                    j = parent
                    break
                acc += k
        return tuple(reversed(code))


def prune(t: OrderedTree, n: int) -> OrderedTree:
    """Remove all nodes of generation ``> n``."""
    if t.height < n:
        raise ValueError(f"tree height {t.height} is below {n}")
    return OrderedTree(t.levels[:n] + (tuple(0 for _ in t.levels[n]),))


# -- trests ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Trest:
    tree: OrderedTree
    stem: tuple[int, ...]

    def __post_init__(self):
        stem = tuple(int(j) for j in self.stem)
        object.__setattr__(self, "stem", stem)
        if not stem or stem[0] != 0:
            raise ValueError("stem must start at the root")
        if len(stem) - 1 > self.tree.height:
            raise ValueError("stem longer than the tree")
        for g in range(len(stem) - 1):
            if stem[g + 1] not in self.tree.child_range(g, stem[g]):
                raise ValueError(f"stem node of generation {g + 1} is not a child of its predecessor")

    @property
    def n(self) -> int:
        return len(self.stem) - 1

    def stem_codes(self) -> list[Code]:
        end = self.tree.code_of(self.n, self.stem[-1])
        return [end[:g] for g in range(self.n + 1)]

    def key(self):
        return (self.tree.levels, self.stem)

    def to_json(self) -> str:
        return json.dumps({"levels": [list(r) for r in self.tree.levels],
                           "stem": list(self.stem_codes()[-1])})

    @classmethod
    def from_json(cls, text: str) -> "Trest":
        d = json.loads(text)
        tree = OrderedTree(tuple(tuple(r) for r in d["levels"]))
        code = tuple(d["stem"])
        stem = [0]
        for g, c in enumerate(code):
            stem.append(tree.child_range(g, stem[-1])[c - 1])
        return cls(tree, tuple(stem))


def _alive_to(t: OrderedTree, n: int) -> list[np.ndarray]:
    """Per generation ``g <= n``, which nodes have a descendant at generation ``n``."""
    alive = [None] * (n + 1)
    alive[n] = np.ones(len(t.levels[n]), dtype=bool)
    for g in range(n - 1, -1, -1):
        counts = np.asarray(t.levels[g], dtype=np.int64)
        owner = np.repeat(np.arange(counts.size), counts)
        a = np.zeros(counts.size, dtype=bool)
        a[owner[alive[g + 1]]] = True
        alive[g] = a
    return alive


def leftmost_stem(t: OrderedTree, n: int) -> Trest:
    """Pruned tree with its lexicographically smallest stem of height ``n``."""
    p = prune(t, n)
    if not p.levels[n]:
        raise ValueError(f"tree has no node at generation {n}")
    alive = _alive_to(p, n)
    stem = [0]
    for g in range(n):
        kids = p.child_range(g, stem[-1])
        stem.append(next(c for c in kids if alive[g + 1][c]))
    return Trest(p, tuple(stem))


# -- unconditioned trees ---------------------------------------------------------------


def simulate_tree(env: QuenchedEnvironment, n: int, rng: np.random.Generator) -> OrderedTree:
    """Galton-Watson tree in ``env`` up to generation ``n`` (pruned at ``n``)."""
    levels = []
    z = 1
    for k in range(n):
        row = env.atoms[k].sample(rng, z) if z else np.zeros(0, dtype=np.int64)
        levels.append(tuple(int(c) for c in row))
        z = int(np.sum(row))
    levels.append((0,) * z)
    return OrderedTree(tuple(levels))


# -- size-biased (LPP) trest -------------------------------------------------------------


@lru_cache(maxsize=None)
def _size_biased(q: OffspringDistribution) -> OffspringDistribution:
    return q.size_bias()


@dataclass(frozen=True)
class LppSample:
    trest: Trest
    Z: np.ndarray  # Z~_0..Z~_n
    Zi: np.ndarray  # Zi[i, j]: generation-j descendants of stem node i but not i+1


def simulate_lpp_trest(env: QuenchedEnvironment, n: int, rng: np.random.Generator) -> LppSample:
    levels = []
    branch = np.array([-1])  # -1 marks the stem node
    stem = [0]
    Zi = np.zeros((n, n + 1), dtype=np.int64)
    for g in range(n):
        q = env.atoms[g]
        counts = q.sample(rng, branch.size)
        s = stem[-1]
        counts[s] = _size_biased(q).sample(rng)
        levels.append(tuple(int(c) for c in counts))
        child_branch = np.repeat(branch, counts)
        first = int(counts[:s].sum())
        new_stem = first + int(rng.integers(counts[s]))
        child_branch[first : first + counts[s]] = g
        child_branch[new_stem] = -1
        stem.append(new_stem)
        branch = child_branch
        Zi[:, g + 1] = np.bincount(branch[branch >= 0], minlength=n)[:n]
    levels.append((0,) * branch.size)
    trest = Trest(OrderedTree(tuple(levels)), tuple(stem))
    Z = np.array(trest.tree.generation_sizes(), dtype=np.int64)
    return LppSample(trest, Z, Zi)


def lpp_counts_batch(env: QuenchedEnvironment, n: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """``(size, n, n+1)`` array of the counts ``Z~^i_j`` without building trees."""
    Zi = np.zeros((size, n, n + 1), dtype=np.int64)
    for g in range(n):
        q = env.atoms[g]
        if g > 0:
            Zi[:, :g, g + 1] = q.sample_sum(Zi[:, :g, g], rng)
        Zi[:, g, g + 1] = _size_biased(q).sample(rng, size) - 1
    return Zi


def lpp_counts_env_batch(law, idx: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """``Z~_n`` for each row of atom indices (one LPP run per environment)."""
    idx = np.asarray(idx)
    N, n = idx.shape
    Z = np.zeros(N, dtype=np.int64)  # non-stem population
    for g in range(n):
        col = idx[:, g]
        nxt = np.zeros(N, dtype=np.int64)
        for j, q in enumerate(law.atoms):
            rows = col == j
            if rows.any():
                nxt[rows] = q.sample_sum(Z[rows], rng) + _size_biased(q).sample(rng, int(rows.sum())) - 1
        Z = nxt
    return Z + 1


# -- Geiger trest -----------------------------------------------------------------------------


def _check_survival(s_prev: float, i: int) -> None:
    if not s_prev > 0.0:
        raise ImpossibleConditioning(f"survival from generation {i - 1} is zero")


def geiger_pair_pmf(q: OffspringDistribution, s_i: float, s_prev: float) -> dict[tuple[int, int], float]:
    """``P(R = r, L = l) = q(r + l + 1) s_i (1 - s_i)^l / s_prev`` on ``q``'s table."""
    t = q.table
    out = {}
    for y in range(1, t.size):
        for l in range(y):
            out[(y - 1 - l, l)] = t[y] * s_i * (1.0 - s_i) ** l / s_prev
    return out


def lpp_pair_pmf(q: OffspringDistribution) -> dict[tuple[int, int], float]:
    """``P(R = r, L = l) = q(r + l + 1) / m``."""
    t = q.table
    m = q.mean()
    return {(y - 1 - l, l): t[y] / m for y in range(1, t.size) for l in range(y)}


def _truncated_geometric(Y: np.ndarray, s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """``L`` on ``{0..Y-1}`` with ``P(L = l)`` proportional to ``(1 - s)^l``.

    Inverse CDF written with ``log1p``/``expm1`` so that tiny ``s`` (nearly
    uniform ``L``) stays accurate.
    """
    u = rng.random(Y.shape)
    out = np.zeros(Y.shape, dtype=np.int64)
    pos = s < 1.0
    if pos.any():
        la = np.log1p(-s[pos])
        c = -np.expm1(Y[pos] * la)
        l = np.floor(np.log1p(-u[pos] * c) / la)
        out[pos] = np.clip(l, 0, Y[pos] - 1).astype(np.int64)
    return out


def sample_geiger_pairs(
    q: OffspringDistribution, s_i: np.ndarray, rng: np.random.Generator, max_rounds: int = 10_000
) -> tuple[np.ndarray, np.ndarray]:
    """Draws of ``(R, L)`` for each entry of ``s_i`` (with ``s_prev`` implied).

    ``Y = R + L + 1`` is proposed from the size-biased law and accepted with
    probability ``(1 - (1 - s)^Y) / (Y s)``; then ``L`` given ``Y`` is a
    truncated geometric.
    """
    s_i = np.asarray(s_i, dtype=float)
    if np.any(s_i <= 0):
        raise ImpossibleConditioning("survival probability zero")
    N = s_i.size
    Y = np.zeros(N, dtype=np.int64)
    todo = np.arange(N)
    sb = _size_biased(q)
    for _ in range(max_rounds):
        if todo.size == 0:
            break
        y = sb.sample(rng, todo.size)
        s = s_i[todo]
        with np.errstate(divide="ignore"):
            acc = -np.expm1(y * np.log1p(-s)) / (y * s)
        ok = rng.random(todo.size) < acc
        Y[todo[ok]] = y[ok]
        todo = todo[~ok]
    else:
        raise RuntimeError("Geiger pair sampler did not terminate")
    L = _truncated_geometric(Y, s_i, rng)
    return Y - 1 - L, L


def simulate_geiger_trest(
    env: QuenchedEnvironment, n: int, rng: np.random.Generator, s: np.ndarray | None = None
) -> Trest:
    """Trest distributed as the leftmost stem of the tree given ``Z_n > 0``.

    Left siblings of the stem start subtrees conditioned to have no
    descendant at generation ``n``; right siblings start free subtrees.
    """
    s = suffix_survival(env, n) if s is None else s
    for i in range(1, n + 1):
        _check_survival(s[i - 1], i)
    # node types: 0 free, 1 conditioned to die, 2 stem
    types = np.array([2])
    levels = []
    stem = [0]
    for i in range(1, n + 1):
        q = env.atoms[i - 1]
        R, L = sample_geiger_pairs(q, np.array([s[i]]), rng)
        R, L = int(R[0]), int(L[0])
        counts = np.zeros(types.size, dtype=np.int64)
        free = types == 0
        cond = types == 1
        counts[free] = q.sample(rng, int(free.sum()))
        if cond.any():
            counts[cond] = q.exp_tilt(1.0 - s[i]).sample(rng, int(cond.sum()))
        sp = int(np.flatnonzero(types == 2)[0])
        counts[sp] = R + L + 1
        child_types = np.repeat(types, counts)
        first = int(counts[:sp].sum())
        child_types[first : first + L] = 1
        child_types[first + L] = 2
        child_types[first + L + 1 : first + L + 1 + R] = 0
        levels.append(tuple(int(c) for c in counts))
        stem.append(first + L)
        types = child_types
    levels.append((0,) * types.size)
    return Trest(OrderedTree(tuple(levels)), tuple(stem))


GEIGER_CAP = 2**53


def geiger_generation_sizes_batch(
    law, idx: np.ndarray, rng: np.random.Generator, s: np.ndarray | None = None,
    cap: int = GEIGER_CAP, return_overflow: bool = False,
):
    """``(N, n+1)`` generation sizes of the Geiger construction, one row per environment.

    Equal in law to ``Z_0..Z_n`` given ``Z_n > 0`` in that environment.  A row
    whose population passes ``cap`` raises :class:`PopulationOverflow`, or with
    ``return_overflow=True`` is flagged in the returned mask and stopped.
    """
    idx = np.asarray(idx)
    N, n = idx.shape
    s = batch_suffix_survival(law, idx) if s is None else s
    if np.any(s[:, :-1] <= 0):
        raise ImpossibleConditioning("an environment has zero survival probability")
    U = np.zeros(N, dtype=np.int64)
    D = np.zeros(N, dtype=np.int64)
    Z = np.ones((N, n + 1), dtype=np.int64)
    over = np.zeros(N, dtype=bool)
    for i in range(1, n + 1):
        col = idx[:, i - 1]
        e = 1.0 - s[:, i]
        for j, q in enumerate(law.atoms):
            rows = np.flatnonzero(col == j)
            if rows.size == 0:
                continue
            R, L = sample_geiger_pairs(q, s[rows, i], rng)
            U[rows] = q.sample_sum(U[rows], rng) + R
            D[rows] = q.sample_sum_tilted(D[rows], e[rows], rng) + L
        big = (U > cap) | (D > cap)
        if big.any():
            if not return_overflow:
                r = int(np.flatnonzero(big)[0])
                raise PopulationOverflow(Trajectory(tuple(Z[r, :i])), cap)
            over |= big
            U[big] = 0
            D[big] = 0
        Z[:, i] = 1 + U + D
    return (Z, over) if return_overflow else Z


# -- exact enumeration --------------------------------------------------------------------------


def _support(q: OffspringDistribution) -> list[tuple[int, float]]:
    t = q.table
    if t.size > 64:
        raise ValueError("enumeration needs small finite supports")
    return [(y, float(p)) for y, p in enumerate(t) if p > 0]


def enumerate_trees(env: QuenchedEnvironment, n: int, budget: int = _ENUM_BUDGET) -> Iterator[tuple[OrderedTree, float]]:
    """Every tree up to generation ``n`` (pruned at ``n``) with its probability."""
    supports = [_support(q) for q in env.atoms[:n]]
    count = [0]

    def rec(g, levels, z, prob):
        if g == n:
            count[0] += 1
            if count[0] > budget:
                raise EnumerationBudgetExceeded(f"more than {budget} trees")
            yield OrderedTree(tuple(levels) + ((0,) * z,)), prob
            return
        for combo in itertools.product(supports[g], repeat=z):
            kids = tuple(c for c, _ in combo)
            p = prob * math.prod(w for _, w in combo)
            yield from rec(g + 1, levels + [kids], sum(kids), p)

    yield from rec(0, [], 1, 1.0)


def enumerate_conditioned_trest_law(
    env: QuenchedEnvironment, n: int, budget: int = _ENUM_BUDGET
) -> dict:
    """Exact law of the leftmost stem given ``Z_n > 0``, keyed by :meth:`Trest.key`."""
    if n > 3:
        raise ValueError("enumeration is limited to n <= 3")
    law: dict = {}
    total = 0.0
    for tree, p in enumerate_trees(env, n, budget):
        if tree.height < n:
            continue
        key = leftmost_stem(tree, n).key()
        law[key] = law.get(key, 0.0) + p
        total += p
    if total <= 0:
        raise ImpossibleConditioning("survival to generation n has probability zero")
    return {k: v / total for k, v in law.items()}


# -- coupling bound --------------------------------------------------------------------------------


def tv_coupling_bound_check(env: QuenchedEnvironment, n: int, i: int) -> tuple[float, float, bool]:
    """Exact TV between the LPP and Geiger ``(R_i, L_i)`` laws, against
    ``eta_i e^{S_n - S_{i-1}} / 2``."""
    if not 1 <= i <= n <= env.n:
        raise IndexError("need 1 <= i <= n <= len(env)")
    s = suffix_survival(env, n)
    _check_survival(s[i - 1], i)
    q = env.atoms[i - 1]
    # both laws live on {(r, l): r + l + 1 = y}; compare them cell by cell
    t = q.table
    y = np.arange(t.size)[:, None]
    l = np.arange(t.size)[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        geo = s[i] * np.exp(l * np.log1p(-s[i])) / s[i - 1] if s[i] < 1 else (l == 0) / s[i - 1]
    diff = np.where(l < y, np.abs(1.0 / q.mean() - geo), 0.0)
    tv = 0.5 * math.fsum(t * diff.sum(axis=1))
    bound = 0.5 * env.eta[i - 1] * math.exp(env.S[n] - env.S[i - 1])
    return tv, bound, tv <= bound * (1 + 1e-12) + 1e-15


# -- LPP normalized limit ------------------------------------------------------------------------------


@dataclass(frozen=True)
class LppLimitDiagnostic:
    n_list: tuple[int, ...]
    medians: tuple[float, ...]
    samples: dict[int, np.ndarray]
    delta: float
    mass_below_delta: float
    relative_median_change: float

    @property
    def stabilized(self) -> bool:
        return self.relative_median_change < 0.10

    @property
    def positive(self) -> bool:
        return self.mass_below_delta < 0.05


def lpp_normalized_limit_diagnostic(
    law, n_list, samples: int, rng: np.random.Generator, budget: int = 10**8
) -> LppLimitDiagnostic:
    """``e^{-S_n} Z~_n`` over environments conditioned on ``L_n >= 0``.

    ``delta`` is the 1st percentile of the largest-``n`` run, and
    ``mass_below_delta`` the fraction of the second-largest run below it.
    """
    n_list = tuple(sorted(n_list))
    out = {}
    for n in n_list:
        idx = sample_conditioned_indices(law, n, samples, rng, "L>=0", budget)
        S_n = law.log_means[idx].sum(axis=1)
        out[n] = np.exp(-S_n) * lpp_counts_env_batch(law, idx, rng)
    med = tuple(float(np.median(out[n])) for n in n_list)
    delta = float(np.quantile(out[n_list[-1]], 0.01))
    ref = out[n_list[-2]] if len(n_list) > 1 else out[n_list[-1]]
    below = float(np.mean(ref <= delta))
    rel = abs(med[-1] / med[-2] - 1.0) if len(med) > 1 else math.nan
    return LppLimitDiagnostic(n_list, med, out, delta, below, rel)


def lpp_branch_moments(env: QuenchedEnvironment, n: int, i: int) -> tuple[float, float]:
    """Exact mean and variance of ``Z~^i_n`` given the environment.

    The stem node of generation ``i`` has ``N = Y - 1`` non-stem children,
    ``Y`` size-biased from ``q_{i+1}``; each starts an independent
    Galton-Watson subtree run to generation ``n``.
    """
    if not 0 <= i < n <= env.n:
        raise IndexError("need 0 <= i < n <= len(env)")
    q = env.atoms[i]
    t = q.table
    y = np.arange(t.size, dtype=float)
    m = q.mean()
    EN = math.fsum(y * (y - 1) * t) / m
    EN2 = math.fsum(y * (y - 1) ** 2 * t) / m
    sub = env.suffix(i + 1).prefix(n - i - 1)
    m_sub = math.exp(sub.S[-1])
    _, v_sub = variance_formula_check(sub, 1) if sub.n else (0.0, 0.0)
    mean = EN * m_sub
    var = EN * v_sub + (EN2 - EN * EN) * m_sub * m_sub
    return mean, max(var, 0.0)


def lpp_mean_estimates(env: QuenchedEnvironment, n: int, size: int, rng: np.random.Generator) -> list[Estimate]:
    """Empirical ``E[Z~^i_n | env]`` for ``i < n``.

    ``metadata`` carries the target ``eta_{i+1} e^{S_n - S_i}`` and the exact
    standard error of the sample mean (rare-event columns often have no
    hits, so their empirical standard error is zero).
    """
    Zi = lpp_counts_batch(env, n, size, rng)[:, :, n].astype(float)
    res = []
    for i in range(n):
        target = env.eta[i] * math.exp(env.S[n] - env.S[i])
        _, var = lpp_branch_moments(env, n, i)
        col = Zi[:, i]
        res.append(Estimate(float(col.mean()), float(col.std(ddof=1) / math.sqrt(size)), size,
                            estimator_id="lpp-mean",
                            metadata={"i": i, "n": n, "target": target,
                                      "exact_stderr": math.sqrt(var / size)}))
    return res
