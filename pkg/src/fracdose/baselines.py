"""Reference dosing controllers and the resistant-fraction threshold sweep.

Controllers are called as ``controller(observation, phi) -> action`` once per
step.  Baselines may use ``phi`` (privileged); the learned agent's
controller ignores it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .env import DosingEnv, EnvConfig, episode_cost
from .model import ModelParams, Trajectory

TREATMENT = "treatment"
PAUSE = "pause"


class Controller(Protocol):
    def reset(self) -> None: ...

    def __call__(self, observation: np.ndarray, phi: float) -> int: ...


def constant_action(u_fixed: int) -> int:
    if u_fixed not in (0, 1):
        raise ValueError("constant dose must be 0 or 1")
    return u_fixed


@dataclass(frozen=True)
class PulsingPolicy:
    phi_low: float
    phi_high: float
    phase: str = TREATMENT

    def __post_init__(self) -> None:
        if not (0.0 < self.phi_low <= self.phi_high < 1.0):
            raise ValueError(
                f"need 0 < phi_low <= phi_high < 1, got ({self.phi_low}, {self.phi_high})"
            )
        if self.phase not in (TREATMENT, PAUSE):
            raise ValueError(f"unknown phase {self.phase!r}")


def pulsing_action(policy: PulsingPolicy, phi: float) -> tuple[int, PulsingPolicy]:
    """Hysteresis rule: treat until phi >= phi_high, pause until phi <= phi_low."""
    if not (0.0 <= phi <= 1.0):
        raise ValueError(f"resistant fraction must lie in [0, 1], got {phi}")
    if policy.phase == TREATMENT and phi >= policy.phi_high:
        policy = replace(policy, phase=PAUSE)
    elif policy.phase == PAUSE and phi <= policy.phi_low:
        policy = replace(policy, phase=TREATMENT)
    return (1 if policy.phase == TREATMENT else 0), policy


class ConstantController:
    def __init__(self, u_fixed: int):
        self.u = constant_action(u_fixed)

    def reset(self) -> None:
        pass

    def __call__(self, observation, phi) -> int:
        return self.u


class PulsingController:
    def __init__(self, phi_low: float, phi_high: float):
        self.initial = PulsingPolicy(phi_low, phi_high)
        self.policy = self.initial

    def reset(self) -> None:
        self.policy = self.initial

    def __call__(self, observation, phi) -> int:
        action, self.policy = pulsing_action(self.policy, phi)
        return action


class ScheduleController:
    """Open-loop replay of a recorded action sequence (last action repeats)."""

    def __init__(self, actions: Sequence[int]):
        self.actions = [int(a) for a in actions]
        if not self.actions:
            raise ValueError("empty schedule")
        self._i = 0

    def reset(self) -> None:
        self._i = 0

    def __call__(self, observation, phi) -> int:
        a = self.actions[min(self._i, len(self.actions) - 1)]
        self._i += 1
        return a


# -- evaluation -----------------------------------------------------------

def toggle_count(controls: np.ndarray) -> int:
    controls = np.asarray(controls)
    return int(np.count_nonzero(np.diff(controls))) if controls.size > 1 else 0


def pulse_frequency(controls: np.ndarray, delta: float, window: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Toggles per hour in sliding windows of ``window`` steps.

    A toggle between steps ``i-1`` and ``i`` is counted in every window that
    contains both steps.  Returns ``(midpoint_times, toggles_per_hour)``;
    the ceiling is ``1/delta`` when the dose alternates every step.
    """
    controls = np.asarray(controls, dtype=float)
    n = controls.size
    if n < window:
        return np.empty(0), np.empty(0)
    toggles = (np.diff(controls) != 0).astype(float)
    csum = np.concatenate([[0.0], np.cumsum(toggles)])
    starts = np.arange(n - window + 1)
    counts = csum[starts + window - 1] - csum[starts]
    hours = (window - 1) * delta
    mids = (starts + window / 2.0) * delta
    return mids, counts / hours


@dataclass
class Evaluation:
    cost: float
    trajectory: Trajectory
    steps: int
    reason: str | None
    mean_phi: float
    toggles: int
    frequency_times: np.ndarray = field(repr=False)
    frequency: np.ndarray = field(repr=False)


def evaluate_policy(controller: Controller, cfg: EnvConfig, window: int = 100) -> Evaluation:
    """Roll out ``controller`` for one episode without learning."""
    env = DosingEnv(cfg)
    obs = env.reset()
    controller.reset()
    while not env.done:
        action = controller(obs, env.resistant_fraction)
        obs = env.step(action).observation
    traj = env.trajectory()
    ft, fq = pulse_frequency(traj.controls, cfg.delta, window)
    return Evaluation(
        cost=episode_cost(traj),
        trajectory=traj,
        steps=env.steps,
        reason=env.reason,
        mean_phi=float(traj.phi.mean()),
        toggles=toggle_count(traj.controls),
        frequency_times=ft,
        frequency=fq,
    )


# -- threshold sweep ---------------------------------------------------------

def threshold_grid(lo: float = 0.1, hi: float = 0.9, step: float = 0.04) -> np.ndarray:
    count = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return np.round(lo + step * np.arange(count), 10)


@dataclass
class SweepResult:
    phi_low: float
    phi_high: float
    cost: float
    table: list[tuple[float, float, float]]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["phi_l", "phi_h", "cost"])
            for lo, hi, c in self.table:
                w.writerow([repr(lo), repr(hi), repr(c)])


def _pair_cost(args) -> float:
    lo, hi, cfg = args
    return evaluate_policy(PulsingController(lo, hi), cfg).cost


def sweep_thresholds(
    params: ModelParams,
    grid_lo: float = 0.1,
    grid_hi: float = 0.9,
    step: float = 0.04,
    cfg: EnvConfig | None = None,
    workers: int = 1,
) -> SweepResult:
    """Evaluate every grid pair ``phi_l <= phi_h`` and return the cheapest.

    Ties go to the narrower band, then the smaller ``phi_l``.  With
    ``workers > 1`` pairs are simulated in a process pool; the table order
    is always grid order.
    """
    cfg = (cfg or EnvConfig()).replace(params=params)
    grid = threshold_grid(grid_lo, grid_hi, step)
    pairs = [(float(lo), float(hi)) for i, lo in enumerate(grid) for hi in grid[i:]]
    jobs = [(lo, hi, cfg) for lo, hi in pairs]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            costs = list(pool.map(_pair_cost, jobs, chunksize=4))
    else:
        costs = [_pair_cost(j) for j in jobs]
    table = [(lo, hi, c) for (lo, hi), c in zip(pairs, costs)]
    best = min(table, key=lambda r: (r[2], round(r[1] - r[0], 10), r[0]))
    return SweepResult(phi_low=best[0], phi_high=best[1], cost=best[2], table=table)
