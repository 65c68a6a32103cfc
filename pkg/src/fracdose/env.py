"""Episodic dosing environment driven by the fractional switching model.

The agent sees only the last ``frames`` per-step growth rates
``c_t = log(N_t / N_{t-dt}) / dt`` and is rewarded with ``-c_t``.  The
resistant fraction is exposed separately (``resistant_fraction``) for
privileged baseline controllers; it never appears in an observation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .model import ModelParams, Trajectory, linear_rhs
from .solver import FracSolver

HORIZON = "horizon"
POPULATION_EXCEEDED = "population-exceeded"

TRAJECTORY_COLUMNS = ("t", "S", "R", "N", "phi", "u", "c", "r")


@dataclass(frozen=True)
class EnvConfig:
    delta: float = 0.01
    frames: int = 5
    x0: tuple[float, float] = (1000.0, 0.0)
    horizon: int = 10_000
    params: ModelParams = field(default_factory=ModelParams)
    terminate_on_growth: bool = True

    def __post_init__(self) -> None:
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.frames < 1:
            raise ValueError("frames must be at least 1")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        x0 = tuple(float(v) for v in self.x0)
        if len(x0) != 2 or min(x0) < 0 or sum(x0) <= 0:
            raise ValueError(f"x0 must be two nonnegative counts with positive sum, got {self.x0}")
        object.__setattr__(self, "x0", x0)

    @property
    def mu(self) -> float:
        return self.params.mu

    def replace(self, **changes) -> "EnvConfig":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        if "mu" in changes:
            kw["params"] = kw["params"].replace(mu=changes.pop("mu"))
        kw.update(changes)
        return EnvConfig(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["x0"] = list(self.x0)
        return d

    @classmethod
    def from_dict(cls, data: dict, params: ModelParams | None = None) -> "EnvConfig":
        names = {f.name for f in fields(cls)} - {"params"}
        unknown = [k for k in data if k not in names | {"params"} and not k.startswith("_")]
        if unknown:
            raise ValueError(f"env config has unknown fields: {unknown}")
        kw = {k: data[k] for k in names if k in data}
        if "x0" in kw:
            kw["x0"] = tuple(kw["x0"])
        if params is None and "params" in data:
            params = ModelParams.from_dict(data["params"])
        if params is not None:
            kw["params"] = params
        return cls(**kw)


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    reason: str | None = None


class DosingEnv:
    """One episode at a time; ``reset`` must be called before stepping."""

    def __init__(self, cfg: EnvConfig | None = None):
        self.cfg = cfg or EnvConfig()
        self._rhs = linear_rhs(self.cfg.params)
        self._solver = FracSolver(
            self._rhs, self.cfg.x0, self.cfg.mu, self.cfg.delta, capacity=self.cfg.horizon + 1
        )
        self._states = np.empty((self.cfg.horizon + 1, 2))
        self._controls = np.empty(self.cfg.horizon)
        self._obs = np.zeros(self.cfg.frames)
        self._n0 = float(sum(self.cfg.x0))
        self._steps = 0
        self._done = True
        self.reason: str | None = None

    # -- episode control --------------------------------------------------
    def reset(self) -> np.ndarray:
        self._solver.reset()
        self._states[0] = self.cfg.x0
        self._obs = np.zeros(self.cfg.frames)
        self._steps = 0
        self._done = False
        self.reason = None
        return self._obs.copy()

    def step(self, action: int) -> StepResult:
        if self._done:
            raise RuntimeError("episode is over; call reset() first")
        if action not in (0, 1):
            raise ValueError(f"action must be 0 or 1, got {action!r}")
        n_prev = self._states[self._steps].sum()
        x = self._solver.step(float(action))
        self._steps += 1
        self._states[self._steps] = x
        self._controls[self._steps - 1] = action
        n_new = x.sum()
        if not n_new > 0:
            raise RuntimeError(f"population became non-positive at step {self._steps}: {x}")
        c = math.log(n_new / n_prev) / self.cfg.delta
        self._obs[:-1] = self._obs[1:]
        self._obs[-1] = c

        if self.cfg.terminate_on_growth and n_new > self._n0:
            self._done, self.reason = True, POPULATION_EXCEEDED
        elif self._steps >= self.cfg.horizon:
            self._done, self.reason = True, HORIZON
        return StepResult(self._obs.copy(), -c, self._done, self.reason)

    # -- read-only views ----------------------------------------------------
    @property
    def done(self) -> bool:
        return self._done

    @property
    def steps(self) -> int:
        return self._steps

    @property
    def time(self) -> float:
        return self._steps * self.cfg.delta

    @property
    def state(self) -> np.ndarray:
        return self._states[self._steps].copy()

    @property
    def population(self) -> float:
        return float(self._states[self._steps].sum())

    @property
    def resistant_fraction(self) -> float:
        """Privileged information for baselines; not part of the observation."""
        S, R = self._states[self._steps]
        return float(R / (S + R))

    @property
    def observation(self) -> np.ndarray:
        return self._obs.copy()

    def trajectory(self) -> Trajectory:
        n = self._steps
        return Trajectory(
            times=self.cfg.delta * np.arange(n + 1),
            states=self._states[: n + 1].copy(),
            controls=self._controls[:n].copy(),
        )


def episode_cost(traj: Trajectory) -> float:
    """``log N(T) / N(0)`` of a trajectory."""
    N = traj.total
    if len(N) == 0:
        raise ValueError("empty trajectory")
    if not (N[0] > 0 and N[-1] > 0):
        raise AssertionError(f"non-positive population: N0={N[0]}, NT={N[-1]}")
    return float(math.log(N[-1] / N[0]))


def write_trajectory_csv(traj: Trajectory, path: str | Path) -> None:
    """Write ``t,S,R,N,phi,u,c,r``.

    Row ``i`` holds the state at ``t_i`` and the dose, growth rate and reward
    of the step that *ended* at ``t_i``; these three are blank on row 0.
    """
    N = traj.total
    phi = traj.phi
    c = traj.growth
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for i in range(len(traj)):
            S, R = traj.states[i]
            row = [repr(float(traj.times[i])), repr(float(S)), repr(float(R)),
                   repr(float(N[i])), repr(float(phi[i]))]
            if i == 0:
                row += ["", "", ""]
            else:
                row += [str(int(traj.controls[i - 1])) if traj.controls[i - 1] in (0.0, 1.0)
                        else repr(float(traj.controls[i - 1])),
                        repr(float(c[i - 1])), repr(float(-c[i - 1]))]
            w.writerow(row)


def read_trajectory_csv(path: str | Path) -> Trajectory:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or tuple(rows[0].keys()) != TRAJECTORY_COLUMNS:
        raise ValueError(f"{path}: not a trajectory CSV")
    times = np.array([float(r["t"]) for r in rows])
    states = np.array([[float(r["S"]), float(r["R"])] for r in rows])
    controls = np.array([float(r["u"]) for r in rows[1:]])
    return Trajectory(times=times, states=states, controls=controls)
