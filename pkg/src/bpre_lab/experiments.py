"""Estimators for survival, conditioned population laws and bottlenecks.

Every estimator samples environments under the tilted law and corrects with
``gamma^n e^{-S_n}``.  Conditioning on survival uses the Rao-Blackwellized
weight ``w = e^{-S_n} P(Z_n > 0 | env)``: for any functional ``F`` of the
environment and the population,

    E[F | Z_n > 0]  =  E_tilted[w E[F | env, Z_n > 0]] / E_tilted[w],

and ``E[F | env, Z_n > 0]`` is sampled exactly with the Geiger construction.
Since ``P(Z_n > 0 | env) <= exp(min_k S_k)`` the weights never exceed one.

All Monte Carlo work goes through :func:`bpre_lab.estimate.map_blocks`, so
results depend on ``(seed, N)`` only and not on the shard count.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import bpre
from .environment import EnvironmentLaw, TILTED, ANNEALED
from .estimate import (
    EmpiricalDistribution,
    Estimate,
    effective_sample_size,
    ks_distance,
    map_blocks,
    stream,
    tv_distance,
    weighted_corr,
    weighted_mean,
    weighted_quantile,
)
from .trees import geiger_generation_sizes_batch
from .walk import prefix_sums, prob_max_negative, sample_conditioned_indices

MIN_ESS = 100.0
# environments with smaller weight skip the population draw and get weight 0
# in population statistics; their total share is below N * W_FLOOR / sum(w)
W_FLOOR = 1e-15


class LowESSWarning(UserWarning):
    pass


def _check_ess(ess: float, what: str) -> None:
    if ess < MIN_ESS:
        warnings.warn(f"{what}: effective sample size {ess:.1f} below {MIN_ESS:g}", LowESSWarning)


def _concat(blocks: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    return {k: np.concatenate([b[k] for b in blocks]) for k in blocks[0]}


def _tilted_env(rng, size, law: EnvironmentLaw, n: int):
    idx = law.step_law(TILTED).sample_indices(rng, (size, n))
    S = prefix_sums(law.log_means[idx])
    return idx, S


def _rb_weight(law, idx, S):
    s = bpre.batch_suffix_survival(law, idx)
    return np.exp(-S[:, -1]) * s[:, 0], s


# -- survival -----------------------------------------------------------------------------


def _blk_survival(rng, size, law: EnvironmentLaw, n: int, method: str):
    g = law.gamma**n
    if method == "naive":
        idx = law.step_law(ANNEALED).sample_indices(rng, (size, n))
        return {"v": bpre.batch_survival_indicator(law, idx, rng)}
    if method == "mixture":
        # half tilted, half tilted given tau_n = n; balance-heuristic weights
        h = size // 2
        idx = np.concatenate([
            law.step_law(TILTED).sample_indices(rng, (size - h, n)),
            sample_conditioned_indices(law, n, h, rng, "tau=n"),
        ])
        S = prefix_sums(law.log_means[idx])
        late = S[:, -1] < S[:, :-1].min(axis=1)
        dens = 0.5 + 0.5 * late / prob_max_negative(law, n)
        w, _ = _rb_weight(law, idx, S)
        return {"v": g * w / dens}
    idx, S = _tilted_env(rng, size, law, n)
    if method == "importance":
        alive = bpre.batch_survival_indicator(law, idx, rng)
        return {"v": g * np.exp(-S[:, -1]) * alive}
    if method == "rao-blackwell":
        w, _ = _rb_weight(law, idx, S)
        return {"v": g * w}
    raise ValueError(f"unknown survival method {method!r}")


def estimate_survival(
    law: EnvironmentLaw, n: int, N: int, method: str = "rao-blackwell", seed: int = 0, shards: int = 1
) -> Estimate:
    """``P(Z_n > 0)`` by ``naive``, ``importance``, ``rao-blackwell`` or ``mixture``."""
    if n == 0:
        return Estimate(1.0, 0.0, N, seed, f"survival-{method}", {"n": 0})
    v = _concat(map_blocks(_blk_survival, N, seed, f"survival-{method}-{n}",
                           extra=(law, n, method), shards=shards))["v"]
    return Estimate(float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size)), int(v.size),
                    seed, f"survival-{method}", {"n": n})


def exact_survival_one_step(law: EnvironmentLaw) -> float:
    return math.fsum(w * q.pgf_survival_complement(1.0) for q, w in zip(law.atoms, law.weights))


def _blk_mean_population(rng, size, law, n):
    idx, S = _tilted_env(rng, size, law, n)
    Z = bpre.batch_simulate(law, idx, rng, cap=2**62)
    return {"v": law.gamma**n * np.exp(-S[:, -1]) * Z[:, -1]}


def estimate_mean_population(law: EnvironmentLaw, n: int, N: int, seed: int = 0, shards: int = 1) -> Estimate:
    """``E[Z_n]`` through the change of measure; the exact value is ``gamma^n``."""
    v = _concat(map_blocks(_blk_mean_population, N, seed, f"mean-{n}", extra=(law, n), shards=shards))["v"]
    return Estimate(float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size)), int(v.size), seed,
                    "mean-population", {"n": n, "exact": law.gamma**n})


# -- tau_n = n ---------------------------------------------------------------------------------


def _blk_tau_end(rng, size, law, n):
    idx, S = _tilted_env(rng, size, law, n)
    dual = np.cumsum(law.log_means[idx], axis=1)
    idx2, S2 = _tilted_env(rng, size, law, n)
    return {"m": (dual.max(axis=1) < 0).astype(float),
            "t": (S2[:, -1] < S2[:, :-1].min(axis=1)).astype(float)}


def estimate_tau_end(law: EnvironmentLaw, n: int, N: int, seed: int = 0, shards: int = 1,
                     exact: bool = True) -> Estimate:
    """``P(tau_n = n)`` under the tilted law, estimated as ``P(M_n < 0)``.

    ``metadata`` carries the direct ``tau_n = n`` frequency from an
    independent stream, and the exact value when the dynamic program fits.
    """
    r = _concat(map_blocks(_blk_tau_end, N, seed, f"tau-end-{n}", extra=(law, n), shards=shards))
    m, t = r["m"], r["t"]
    meta: dict[str, Any] = {"n": n, "direct": float(t.mean()),
                            "direct_stderr": float(t.std(ddof=1) / math.sqrt(t.size))}
    if exact:
        try:
            meta["exact"] = prob_max_negative(law, n)
        except OverflowError:
            pass
    return Estimate(float(m.mean()), float(m.std(ddof=1) / math.sqrt(m.size)), int(m.size), seed,
                    "tau-end", meta)


@dataclass(frozen=True)
class ThetaPoint:
    n: int
    r: float
    stderr: float
    survival: Estimate
    p_tau: float

    def ci(self, z: float = 1.959963984540054) -> tuple[float, float]:
        return self.r - z * self.stderr, self.r + z * self.stderr


def theta_ratio_curve(law: EnvironmentLaw, n_list: Sequence[int], N: int, seed: int = 0,
                      shards: int = 1) -> list[ThetaPoint]:
    """``r_n = P(Z_n > 0) / (gamma^n P(tau_n = n))`` with Rao-Blackwellized
    numerators and exact denominators."""
    out = []
    for n in n_list:
        surv = estimate_survival(law, n, N, "rao-blackwell", seed, shards)
        try:
            p, p_se = prob_max_negative(law, n), 0.0
        except OverflowError:
            est = estimate_tau_end(law, n, N, seed, shards, exact=False)
            p, p_se = est.value, est.stderr
        den = law.gamma**n * p
        r = surv.value / den
        se = r * math.hypot(surv.stderr / surv.value, p_se / p)
        out.append(ThetaPoint(n, r, se, surv, p))
    return out


def theta_trend(points: Sequence[ThetaPoint]) -> dict[str, Any]:
    overlaps = [max(a.ci()[0], b.ci()[0]) <= min(a.ci()[1], b.ci()[1]) for a, b in zip(points, points[1:])]
    steps = [abs(b.r / a.r - 1.0) for a, b in zip(points, points[1:])]
    return {"overlaps": overlaps, "steps": steps,
            "shrinking": all(y < x for x, y in zip(steps, steps[1:])),
            "theta": points[-1].r, "theta_ci": points[-1].ci()}


# -- conditioned on survival ----------------------------------------------------------------------


def _blk_conditioned(rng, size, law, n, grid, with_z):
    idx, S = _tilted_env(rng, size, law, n)
    w, s = _rb_weight(law, idx, S)
    out = {"w": w, "tau": np.argmin(S, axis=1), "S": S[:, grid]}
    if with_z:
        Zn = np.zeros(size, dtype=np.int64)
        ok = w > W_FLOOR
        if ok.any():
            Z, over = geiger_generation_sizes_batch(law, idx[ok], rng, s[ok], return_overflow=True)
            Zn[ok] = Z[:, -1]
            ok[np.flatnonzero(ok)[over]] = False
        out["Zn"] = Zn
        out["dropped"] = np.where((w > W_FLOOR) & ~ok, w, 0.0)
        out["wz"] = np.where(ok, w, 0.0)
    return out


def _conditioned(law, n, N, seed, shards, grid=(), with_z=False, tag="cond"):
    return _concat(map_blocks(_blk_conditioned, N, seed, f"{tag}-{n}",
                              extra=(law, n, np.asarray(grid, dtype=np.int64), with_z), shards=shards))


@dataclass(frozen=True)
class PopulationLaw:
    n: int
    law: EmpiricalDistribution
    moments: dict[float, Estimate]
    mean: Estimate
    ess: float
    dropped_mass: float = 0.0  # weight share lost to population overflow


def conditional_population_law(law: EnvironmentLaw, n: int, N: int, seed: int = 0, shards: int = 1,
                               betas: Sequence[float] = (0.5,)) -> PopulationLaw:
    """Weighted law of ``Z_n`` given ``Z_n > 0``.

    The conditional mean uses the exact identity ``E[Z_n | Z_n > 0, env] =
    e^{S_n} / P(Z_n > 0 | env)``, giving ``E[Z_n | Z_n > 0] = 1 / E_tilted[w]``.
    """
    r = _conditioned(law, n, N, seed, shards, with_z=True, tag="popn")
    w, wz, Z = r["w"], r["wz"], r["Zn"]
    ess = effective_sample_size(wz)
    _check_ess(ess, f"population law n={n}")
    keep = wz > 0
    emp = EmpiricalDistribution.from_samples(Z[keep], wz[keep])
    moments = {}
    for b in betas:
        m, se = weighted_mean(Z[keep].astype(float) ** b, wz[keep])
        moments[b] = Estimate(m, se, int(w.size), seed, "cond-moment", {"n": n, "beta": b, "ess": ess})
    mw = float(w.mean())
    se_w = float(w.std(ddof=1) / math.sqrt(w.size))
    mean = Estimate(1.0 / mw, se_w / mw**2, int(w.size), seed, "cond-mean", {"n": n, "ess": ess})
    return PopulationLaw(n, emp, moments, mean, ess, float(r["dropped"].sum() / w.sum()))


def tau_gap_law(law: EnvironmentLaw, n: int, N: int, seed: int = 0, shards: int = 1) -> EmpiricalDistribution:
    """Weighted law of ``n - tau_n`` given ``Z_n > 0``; it only depends on the environment."""
    r = _conditioned(law, n, N, seed, shards, tag="gap")
    ess = effective_sample_size(r["w"])
    _check_ess(ess, f"gap law n={n}")
    return EmpiricalDistribution.from_samples(n - r["tau"], r["w"])


def unconditioned_gap_law(law: EnvironmentLaw, n: int, N: int, seed: int = 0) -> EmpiricalDistribution:
    """``n - tau_n`` under the tilted law alone (arcsine-spread)."""
    rng = np.random.default_rng(seed)
    idx, S = _tilted_env(rng, N, law, n)
    return EmpiricalDistribution.from_samples(n - np.argmin(S, axis=1))


@dataclass(frozen=True)
class PathShape:
    n: int
    grid: tuple[float, ...]
    a_n: float
    ks: tuple[float, ...]
    p_argmin_late: float
    corr: float
    ess: float
    marginals: dict[float, tuple[float, float]] = field(default_factory=dict)


def _reference_columns(law, n: int, M: int, rng: np.random.Generator, cols, chunk: int = 1 << 17):
    """Columns ``cols`` of the partial sums of ``M`` walks given ``tau_n = n``,
    drawn in chunks so the full ``M x n`` float array never exists."""
    out = np.empty((M, len(cols)))
    for lo in range(0, M, chunk):
        hi = min(lo + chunk, M)
        idx = sample_conditioned_indices(law, n, hi - lo, rng, "tau=n")
        out[lo:hi] = prefix_sums(law.log_means[idx])[:, cols]
    return out


def path_shape_experiment(law: EnvironmentLaw, n: int, N: int, seed: int = 0, shards: int = 1,
                          grid: Sequence[float] = tuple(k / 10 for k in range(1, 10)),
                          n_reference: int | None = None, late: float = 0.9,
                          gap_set: Sequence[int] = (0, 1, 2), t_corr: float = 0.5) -> PathShape:
    """Rescaled environment path given survival against the walk with its
    first minimum at the end (the reversed ``M_n < 0`` walk)."""
    a_n = law.sigma * math.sqrt(n)
    ks_idx = [int(math.floor(n * t)) for t in grid]
    corr_idx = int(math.floor(n * t_corr))
    cols = ks_idx + [corr_idx]
    r = _conditioned(law, n, N, seed, shards, grid=cols, tag="path")
    w = r["w"]
    ess = effective_sample_size(w)
    _check_ess(ess, f"path shape n={n}")
    M = n_reference or N
    S_ref = _reference_columns(law, n, M, stream(seed, "path-ref", n), ks_idx)
    ks, marg = [], {}
    for c, t, k in zip(range(len(grid)), grid, ks_idx):
        a = r["S"][:, c] / a_n
        b = S_ref[:, c] / a_n
        ks.append(ks_distance(a, b, w, None))
        marg[t] = (weighted_mean(a, w)[0], float(b.mean()))
    late_mass = float(np.dot(w, r["tau"] / n > late) / w.sum())
    in_b = np.isin(n - r["tau"], np.asarray(gap_set)).astype(float)
    rho = weighted_corr(r["S"][:, -1] / a_n, in_b, w)
    return PathShape(n, tuple(grid), a_n, tuple(ks), late_mass, rho, ess, marg)


# -- bottlenecks -------------------------------------------------------------------------------------


@dataclass(frozen=True)
class BottleneckRecord:
    """Arrays over conditioned replicates; column ``i`` belongs to ``t_i``."""

    n: int
    t: tuple[float, ...]
    weight: np.ndarray
    sigma: np.ndarray  # first minimum of S on [n t_{i-1}, n t_i]
    tau: np.ndarray  # first minimum of S on [0, n t_i]
    mu: np.ndarray  # smallest j with S_{sigma_j} equal to that minimum
    Z_tau: np.ndarray
    Z_t: np.ndarray
    ratio: np.ndarray  # Z_{n t_i} / exp(S_{n t_i} - S_{tau})
    dropped_mass: float = 0.0


def _check_t_list(t_list):
    t = tuple(float(x) for x in t_list)
    if not t or any(not 0.0 < x < 1.0 for x in t) or any(b <= a for a, b in zip(t, t[1:])):
        raise ValueError("t_list must be strictly increasing inside (0, 1)")
    return t


def _blk_bottleneck(rng, size, law, n, t):
    idx, S = _tilted_env(rng, size, law, n)
    w, s = _rb_weight(law, idx, S)
    ok = w > W_FLOOR
    Z = np.ones((size, n + 1), dtype=np.int64)
    Z[ok], over = geiger_generation_sizes_batch(law, idx[ok], rng, s[ok], return_overflow=True)
    dropped = np.zeros(size)
    dropped[np.flatnonzero(ok)[over]] = w[np.flatnonzero(ok)[over]]
    ok[np.flatnonzero(ok)[over]] = False
    w = np.where(ok, w, 0.0)
    r = len(t)
    rows = np.arange(size)
    nt = [int(math.floor(n * x)) for x in t]
    sig = np.empty((size, r), dtype=np.int64)
    tau = np.empty((size, r), dtype=np.int64)
    mu = np.empty((size, r), dtype=np.int64)
    lo = 0
    for i, k in enumerate(nt):
        sig[:, i] = lo + np.argmin(S[:, lo : k + 1], axis=1)
        tau[:, i] = np.argmin(S[:, : k + 1], axis=1)
        lo = k
    for i in range(r):
        smin = S[rows, tau[:, i]]
        hit = S[rows[:, None], sig[:, : i + 1]] == smin[:, None]
        mu[:, i] = 1 + np.argmax(hit, axis=1)
    Zt = Z[:, nt]
    Ztau = Z[rows[:, None], tau]
    ratio = Zt / np.exp(S[:, nt] - S[rows[:, None], tau])
    return {"w": w, "sig": sig, "tau": tau, "mu": mu, "Ztau": Ztau, "Zt": Zt, "ratio": ratio,
            "dropped": dropped}


def bottleneck_experiment(law: EnvironmentLaw, n: int, t_list: Sequence[float], N: int, seed: int = 0,
                          shards: int = 1) -> BottleneckRecord:
    t = _check_t_list(t_list)
    r = _concat(map_blocks(_blk_bottleneck, N, seed, f"bottleneck-{n}", extra=(law, n, t), shards=shards))
    _check_ess(effective_sample_size(r["w"]), f"bottleneck n={n}")
    dropped = float(r["dropped"].sum() / (r["w"].sum() + r["dropped"].sum()))
    return BottleneckRecord(n, t, r["w"], r["sig"], r["tau"], r["mu"], r["Ztau"], r["Zt"], r["ratio"], dropped)


def bottleneck_summary(rec: BottleneckRecord) -> dict[str, Any]:
    """Weighted quantiles, largeness and (for two times) independence diagnostics."""
    w = rec.weight
    out: dict[str, Any] = {"n": rec.n, "ess": effective_sample_size(w)}
    for i, t in enumerate(rec.t):
        out[f"Ztau_median_{t}"] = weighted_quantile(rec.Z_tau[:, i], w, 0.5)
        out[f"Ztau_p90_{t}"] = weighted_quantile(rec.Z_tau[:, i], w, 0.9)
        out[f"Zt_median_{t}"] = weighted_quantile(rec.Z_t[:, i], w, 0.5)
        out[f"ratio_p01_{t}"] = weighted_quantile(rec.ratio[:, i], w, 0.01)
    out["mu_le_i"] = bool(np.all(rec.mu <= np.arange(1, len(rec.t) + 1)))
    if len(rec.t) >= 2:
        one = rec.mu[:, 1] == 1
        two = rec.mu[:, 1] == 2
        out["mu2_eq_1_mass"] = float(w[one].sum() / w.sum())
        out["equal_given_mu1"] = bool(np.all(rec.Z_tau[one, 0] == rec.Z_tau[one, 1])
                                      and np.all(rec.tau[one, 0] == rec.tau[one, 1]))
        out["corr_given_mu2"] = (weighted_corr(rec.ratio[two, 0], rec.ratio[two, 1], w[two])
                                 if two.sum() > 2 else math.nan)
        out["ess_mu2"] = effective_sample_size(w[two])
    return out


def largeness(rec: BottleneckRecord, law: EnvironmentLaw, i: int = 0, delta: float = 0.05) -> float:
    """``P(Z_{n t} > exp(delta a_n) | Z_n > 0)``."""
    a_n = law.sigma * math.sqrt(rec.n)
    big = rec.Z_t[:, i] > math.exp(delta * a_n)
    return float(np.dot(rec.weight, big) / rec.weight.sum())


def weighted_below(values, weights, threshold: float) -> float:
    w = np.asarray(weights, float)
    return float(np.dot(w, np.asarray(values) < threshold) / w.sum())


__all__ = [
    "LowESSWarning",
    "estimate_survival",
    "exact_survival_one_step",
    "estimate_mean_population",
    "estimate_tau_end",
    "ThetaPoint",
    "theta_ratio_curve",
    "theta_trend",
    "PopulationLaw",
    "conditional_population_law",
    "tau_gap_law",
    "unconditioned_gap_law",
    "PathShape",
    "path_shape_experiment",
    "BottleneckRecord",
    "bottleneck_experiment",
    "bottleneck_summary",
    "largeness",
    "weighted_below",
    "tv_distance",
]
