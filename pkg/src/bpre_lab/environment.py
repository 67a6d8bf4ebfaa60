"""I.i.d. random environments built from finite mixtures of offspring laws.

An :class:`EnvironmentLaw` is the annealed law of ``Q``.  The tilted law,
under which the associated walk is recurrent, reweights atom ``j`` by
``exp(X_j) / gamma`` with ``gamma = E[exp(X)]``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Mapping, Sequence

import numpy as np

from . import offspring as off
from .offspring import OffspringDistribution
from .walk import StepLaw, WalkPath

ANNEALED = "annealed"
TILTED = "tilted"

_BISECTION_LO = 1e-9
_BISECTION_HI = 1.0 - 1e-9
_BISECTION_MAX_ITER = 200


class NoRootError(ValueError):
    """Calibration objective has no sign change on the free weight."""


class NotSubcriticalWarning(UserWarning):
    pass


def _measure(measure: str) -> str:
    m = measure.lower()
    if m in ("annealed", "p", "annealed-p", "original"):
        return ANNEALED
    if m in ("tilted", "tilted-p", "bold", "q"):
        return TILTED
    raise ValueError(f"unknown measure {measure!r}")


@dataclass(frozen=True, eq=False)
class EnvironmentLaw:
    atoms: tuple[OffspringDistribution, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if len(self.atoms) != len(self.weights) or not self.atoms:
            raise ValueError("atoms and weights must be non-empty and aligned")
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0) or abs(math.fsum(w) - 1.0) > 1e-12:
            raise ValueError("weights must be a probability vector")
        object.__setattr__(self, "atoms", tuple(self.atoms))
        object.__setattr__(self, "weights", tuple(float(v) for v in w / math.fsum(w)))

    @cached_property
    def log_means(self) -> np.ndarray:
        return np.array([a.log_mean() for a in self.atoms])

    @cached_property
    def etas(self) -> np.ndarray:
        return np.array([a.eta() for a in self.atoms])

    @cached_property
    def gamma(self) -> float:
        return math.fsum(np.asarray(self.weights) * np.exp(self.log_means))

    @cached_property
    def tilted_weights(self) -> np.ndarray:
        w = np.asarray(self.weights) * np.exp(self.log_means)
        return w / math.fsum(w)

    def weights_under(self, measure: str) -> np.ndarray:
        return (
            np.asarray(self.weights) if _measure(measure) == ANNEALED else self.tilted_weights
        )

    def step_law(self, measure: str = TILTED) -> StepLaw:
        return StepLaw(tuple(self.log_means), tuple(self.weights_under(measure)))

    def mean_X(self, measure: str = ANNEALED) -> float:
        return math.fsum(self.weights_under(measure) * self.log_means)

    def var_X(self, measure: str = TILTED) -> float:
        return self.step_law(measure).var()

    @property
    def sigma(self) -> float:
        """Standard deviation of ``X`` under the tilted law."""
        return math.sqrt(self.var_X(TILTED))

    def to_dict(self) -> dict[str, Any]:
        return {"atoms": [a.to_dict() for a in self.atoms], "weights": list(self.weights)}


def moment_X_exp_X(law: EnvironmentLaw) -> float:
    """``E[X e^X]`` under the annealed law; zero is the intermediate regime."""
    X = law.log_means
    return math.fsum(np.asarray(law.weights) * X * np.exp(X))


def tilt(law: EnvironmentLaw, exponent: float = 1.0) -> EnvironmentLaw:
    """Reweight atom ``j`` by ``exp(exponent * X_j)``; ``exponent=-1`` undoes
    ``exponent=1``."""
    w = np.asarray(law.weights) * np.exp(exponent * law.log_means)
    return EnvironmentLaw(law.atoms, tuple(w / math.fsum(w)))


@dataclass(frozen=True)
class CalibrationReport:
    law: EnvironmentLaw
    free_weight: float
    moment: float
    mean_X: float
    tilted_mean_X: float
    gamma: float
    subcritical: bool
    iterations: int
    a3: float = field(default=math.nan)

    def as_dict(self) -> dict[str, Any]:
        return {
            "weights": list(self.law.weights),
            "tilted_weights": self.law.tilted_weights.tolist(),
            "gamma": self.gamma,
            "E[X]": self.mean_X,
            "E[X e^X]": self.moment,
            "tilted E[X]": self.tilted_mean_X,
            "tilted sd(X)": self.law.sigma,
            "subcritical": self.subcritical,
            "A3": self.a3,
        }


def calibrate_A1(
    atoms: Sequence[OffspringDistribution],
    free: int = 0,
    others: Sequence[float] | None = None,
    a: int = 1,
    eps: float = 0.5,
) -> CalibrationReport:
    """Choose the free weight so that ``E[X e^X] = 0``.

    Atom ``free`` gets weight ``w``; the remaining atoms share ``1 - w`` in the
    fixed proportions ``others`` (equal by default).  ``w`` is found by
    bisection on ``[1e-9, 1 - 1e-9]``.
    """
    atoms = tuple(atoms)
    if len(atoms) < 2:
        raise NoRootError("calibration needs at least two atoms")
    rest = [j for j in range(len(atoms)) if j != free]
    prop = np.ones(len(rest)) if others is None else np.asarray(others, dtype=float)
    prop = prop / prop.sum()
    X = np.array([q.log_mean() for q in atoms])
    g = X * np.exp(X)
    g_free = g[free]
    g_rest = math.fsum(prop * g[rest])

    def objective(w):
        return w * g_free + (1.0 - w) * g_rest

    lo, hi = _BISECTION_LO, _BISECTION_HI
    f_lo, f_hi = objective(lo), objective(hi)
    if f_lo == 0.0 or f_hi == 0.0 or np.sign(f_lo) == np.sign(f_hi):
        raise NoRootError(
            f"E[X e^X] does not change sign on the free weight "
            f"(values {f_lo:.3g}, {f_hi:.3g})"
        )
    it = 0
    for it in range(1, _BISECTION_MAX_ITER + 1):
        mid = 0.5 * (lo + hi)
        f_mid = objective(mid)
        if f_mid == 0.0 or hi - lo <= 2e-16:
            lo = hi = mid
            break
        if np.sign(f_mid) == np.sign(f_lo):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    w = 0.5 * (lo + hi)
    weights = np.empty(len(atoms))
    weights[free] = w
    weights[rest] = (1.0 - w) * prop
    law = EnvironmentLaw(atoms, tuple(weights))
    mean_x = law.mean_X(ANNEALED)
    subcritical = mean_x < 0 and law.gamma < 1
    if not subcritical:
        warnings.warn("calibrated law is not subcritical", NotSubcriticalWarning)
    return CalibrationReport(
        law=law,
        free_weight=w,
        moment=moment_X_exp_X(law),
        mean_X=mean_x,
        tilted_mean_X=law.mean_X(TILTED),
        gamma=law.gamma,
        subcritical=subcritical,
        iterations=it,
        a3=check_A3(law, a, eps),
    )


def check_A3(law: EnvironmentLaw, a: int = 1, eps: float = 0.5, alpha: float = 2.0) -> float:
    """``E[(log+ zeta(a))^(alpha + eps)]`` under the tilted law."""
    z = np.array([q.zeta(a) for q in law.atoms])
    lp = np.log(np.maximum(z, 1.0))
    return math.fsum(law.tilted_weights * lp ** (alpha + eps))


def sample_indices(law: EnvironmentLaw, shape, measure: str, rng: np.random.Generator) -> np.ndarray:
    return law.step_law(measure).sample_indices(rng, shape)


def sample_environment(
    law: EnvironmentLaw, n: int, measure: str, rng: np.random.Generator
) -> tuple[list[OffspringDistribution], WalkPath]:
    if n < 1:
        raise ValueError("horizon must be >= 1")
    idx = sample_indices(law, n, measure, rng)
    return [law.atoms[j] for j in idx], WalkPath(law.log_means[idx])


def importance_weight(path: WalkPath, gamma: float) -> float:
    """``gamma^n exp(-(S_n - S_0))``: converts tilted expectations back."""
    return math.exp(path.n * math.log(gamma) - (path.S[-1] - path.start))


@dataclass(frozen=True)
class MeasureChangeCheck:
    n: int
    max_abs_diff: float  # over sequences, of P(seq) phi vs gamma^n Ptilde(seq) e^{-S_n} phi
    annealed: float  # E[phi]
    tilted: float  # gamma^n E_tilted[phi e^{-S_n}]


def measure_change_check(law: EnvironmentLaw, n: int, phi=None) -> MeasureChangeCheck:
    """Enumerate all ``len(atoms)**n`` environment sequences and compare both
    sides of the change of measure, sequence by sequence.

    ``phi(idx)`` maps a tuple of atom indices to a number; by default it is
    the quenched survival probability up to generation ``n``.
    """
    import itertools

    from . import bpre

    if phi is None:
        def phi(idx):
            return bpre.survival_quenched(bpre.QuenchedEnvironment.from_indices(law, idx))
    w = np.asarray(law.weights)
    wt = law.tilted_weights
    X = law.log_means
    g = law.gamma**n
    diffs, lhs, rhs = [], [], []
    for idx in itertools.product(range(len(law.atoms)), repeat=n):
        f = phi(idx)
        a = math.prod(w[j] for j in idx) * f
        b = g * math.prod(wt[j] for j in idx) * math.exp(-math.fsum(X[j] for j in idx)) * f
        lhs.append(a)
        rhs.append(b)
        diffs.append(abs(a - b))
    return MeasureChangeCheck(n, max(diffs), math.fsum(lhs), math.fsum(rhs))


@dataclass(frozen=True)
class ScalingEstimate:
    alpha: float
    n: int
    a_n: float
    b_n: float


def scaling_estimate(law: EnvironmentLaw, n: int, p_tau_end: float) -> ScalingEstimate:
    """``a_n = sigma sqrt(n)`` (finite variance) and ``b_n = 1 / P(tau_n = n)``."""
    return ScalingEstimate(2.0, n, law.sigma * math.sqrt(n), 1.0 / p_tau_end)


def from_dict(spec: Mapping[str, Any]) -> EnvironmentLaw:
    """Parse ``{"atoms": [...], "weights": [...]}`` or
    ``{"calibrate": {"atoms": [...], "free": 0}}``."""
    if "calibrate" in spec:
        c = spec["calibrate"]
        atoms = [off.from_dict(a) for a in c["atoms"]]
        return calibrate_A1(atoms, int(c.get("free", 0)), c.get("others")).law
    if "atoms" not in spec:
        raise ValueError("environment spec needs 'atoms' or 'calibrate'")
    atoms = [off.from_dict(a) for a in spec["atoms"]]
    weights = spec.get("weights")
    if weights is None:
        raise ValueError("environment spec with explicit atoms needs 'weights'")
    return EnvironmentLaw(tuple(atoms), tuple(float(w) for w in weights))
