"""Pontryagin quantities for the resistant-fraction dynamics, and a brute-force
check that optimal piecewise-constant schedules use only the extreme doses.

The Hamiltonian is ``H = lambda * f(phi, u)`` with ``f`` the quadratic
resistant-fraction rate.  Since every rate is affine in ``g(u)``,
``H(phi, u, lambda) = H(phi, 0, lambda) + g(u) * B(phi, lambda)`` where the
switching coefficient ``B`` is the ``g``-coefficient of ``lambda f``::

    B = lambda * (alpha_max + (dkS + dkR + delta_max - alpha_max) phi
                  - (dkS + dkR) phi^2)

with ``dkS = kS_max - kS_min`` and ``dkR = kR_max - kR_min``.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import ModelParams, linear_rhs, riccati_rhs
from .solver import FracGrid, integrate_piecewise

INDETERMINATE = "indeterminate"
MAX_SCHEDULES = 10_000


def hamiltonian(p: ModelParams, phi: float, u: float, lam: float) -> float:
    return lam * riccati_rhs(p, phi, u)


def switching_coefficient(p: ModelParams, phi: float, lam: float) -> float:
    if not (0.0 <= phi <= 1.0):
        raise ValueError(f"resistant fraction must lie in [0, 1], got {phi}")
    dk = (p.kS_max - p.kS_min) + (p.kR_max - p.kR_min)
    return lam * (p.alpha_max + (dk + p.delta_max - p.alpha_max) * phi - dk * phi * phi)


@dataclass(frozen=True)
class SwitchingEvaluation:
    phi: float
    lam: float
    coefficient: float
    action: int | str  # 0, 1 or INDETERMINATE


def evaluate_switching(p: ModelParams, phi: float, lam: float) -> SwitchingEvaluation:
    """Dose minimising ``g(u) * B``: 1 if ``B < 0``, 0 if ``B > 0``."""
    b = switching_coefficient(p, phi, lam)
    tol = 1e-12 * max(1.0, abs(lam))
    if abs(b) <= tol:
        action: int | str = INDETERMINATE
    else:
        action = 1 if b < 0 else 0
    return SwitchingEvaluation(phi, lam, b, action)


@dataclass
class OracleResult:
    schedule: tuple[float, ...]
    cost: float
    table: list[tuple[tuple[float, ...], float]]

    @property
    def best_extreme(self) -> tuple[tuple[float, ...], float]:
        """Cheapest schedule that uses only doses 0 and 1."""
        rows = [r for r in self.table if all(u in (0.0, 1.0) for u in r[0])]
        return min(rows, key=lambda r: (r[1], r[0]))

    def write_csv(self, path: str | Path) -> None:
        n = len(self.schedule)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"u{i}" for i in range(n)] + ["cost"])
            for sched, c in self.table:
                w.writerow([repr(u) for u in sched] + [repr(c)])


def schedule_cost(p: ModelParams, schedule: Sequence[float], T: float, h: float = 0.01,
                  x0=(1000.0, 0.0)) -> float:
    """``log N(T)/N(0)`` for a dose held constant on equal sub-intervals."""
    intervals = len(schedule)
    per = T / intervals / h
    steps_per = int(round(per))
    if abs(per - steps_per) > 1e-9 or steps_per < 1:
        raise ValueError("T / (intervals * h) must be a positive integer")
    controls = np.repeat(np.asarray(schedule, dtype=float), steps_per)
    grid = FracGrid(h=h, n=controls.size, mu=p.mu)
    traj = integrate_piecewise(linear_rhs(p), controls, x0, grid)
    N = traj.total
    return math.log(N[-1] / N[0])


def bang_bang_oracle(
    p: ModelParams,
    intervals: int = 4,
    dose_levels: Sequence[float] = (0.0, 0.5, 1.0),
    T: float = 4.0,
    h: float = 0.01,
    x0=(1000.0, 0.0),
) -> OracleResult:
    """Enumerate every schedule over ``dose_levels`` and return the cheapest.

    Ties are broken toward the lexicographically smallest schedule.  No
    population-based termination is applied: this is the plain terminal-cost
    problem.
    """
    levels = tuple(sorted(float(u) for u in dose_levels))
    count = len(levels) ** intervals
    if count > MAX_SCHEDULES:
        raise ValueError(f"{count} schedules exceeds the enumeration limit of {MAX_SCHEDULES}")
    table = [(s, schedule_cost(p, s, T, h, x0)) for s in itertools.product(levels, repeat=intervals)]
    best = min(table, key=lambda r: (r[1], r[0]))
    return OracleResult(schedule=best[0], cost=best[1], table=table)
