#!/usr/bin/env python3
"""Scan calibrated two-atom laws: gamma, tilted sigma and the theta-ratio step.

Helps pick a law whose limit-theorem gates converge at desk-scale n.
"""

import argparse
import itertools
import warnings

from bpre_lab.environment import NoRootError, calibrate_A1
from bpre_lab.experiments import theta_ratio_curve
from bpre_lab.offspring import Binary, Geometric, Poisson


def candidates():
    low = [Binary(p) for p in (0.1, 0.2, 0.3)]
    high = [Poisson(l) for l in (3.0, 8.0, 20.0)] + [Geometric(p) for p in (0.1, 1 / 3)]
    yield from itertools.product(low, high)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("-N", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    print(f"{'law':<40} {'gamma':>7} {'sigma':>7} {'r16':>8} {'r32':>8} {'step':>7}")
    for a, b in candidates():
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                law = calibrate_A1([a, b]).law
        except NoRootError:
            continue
        p16, p32 = theta_ratio_curve(law, (16, 32), args.N, args.seed)
        name = f"{a!r} + {b!r}"
        print(f"{name:<40} {law.gamma:7.3f} {law.sigma:7.3f} {p16.r:8.4f} {p32.r:8.4f} {abs(p32.r / p16.r - 1):7.3f}")


if __name__ == "__main__":
    main()
