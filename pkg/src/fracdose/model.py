"""Phenotypic switching model: rates, transition matrices and reduced dynamics.

Two subpopulations, susceptible ``S`` and resistant ``R``, with dose
``u`` in [0, 1].  All rates are in 1/h.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

DOSE_RESPONSES: dict[str, Callable[[float], float]] = {
    "linear": lambda u: u,
    "quadratic": lambda u: u * u,
    "sqrt": math.sqrt,
    "smoothstep": lambda u: u * u * (3.0 - 2.0 * u),
}


def _check_dose(u: float) -> float:
    u = float(u)
    if not (0.0 <= u <= 1.0):
        raise ValueError(f"dose must lie in [0, 1], got {u!r}")
    return u


def _check_fraction(phi: float) -> float:
    phi = float(phi)
    if not (0.0 <= phi <= 1.0):
        raise ValueError(f"resistant fraction must lie in [0, 1], got {phi!r}")
    return phi


@dataclass(frozen=True)
class ModelParams:
    """Rate constants of the switching model.

    ``kS_max``/``kS_min`` are the susceptible net growth rates without drug and
    at full dose; ``kR_min``/``kR_max`` the resistant rates without drug and at
    full dose (drug addiction).  ``alpha_max`` is the S->R switching rate at
    full dose and ``delta_max`` the R->S rate without drug.
    """

    kS_max: float = 0.09
    kS_min: float = -0.30
    kR_max: float = 0.06
    kR_min: float = -0.03
    alpha_max: float = 0.25
    delta_max: float = 0.40
    mu: float = 1.0
    dose_response: str = "linear"

    def __post_init__(self) -> None:
        if not (self.kS_max > 0 and self.kR_max > 0):
            raise ValueError("kS_max and kR_max must be positive")
        if not (self.kS_min < 0 and self.kR_min < 0):
            raise ValueError("kS_min and kR_min must be negative")
        if not (self.alpha_max > 0 and self.delta_max > 0):
            raise ValueError("alpha_max and delta_max must be positive")
        if not (0.0 < self.mu <= 1.0):
            raise ValueError(f"mu must lie in (0, 1], got {self.mu}")
        if self.dose_response not in DOSE_RESPONSES:
            raise ValueError(
                f"unknown dose_response {self.dose_response!r}; "
                f"choose from {sorted(DOSE_RESPONSES)}"
            )

    @classmethod
    def symmetric(cls, **overrides) -> "ModelParams":
        """Mirror-symmetric rate set (S<->R, u<->1-u), mostly for diagnostics."""
        base = dict(kS_max=0.08, kS_min=-0.12, kR_max=0.08, kR_min=-0.12,
                    alpha_max=0.3, delta_max=0.3)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "ModelParams":
        return type(self)(**{**asdict(self), **changes})

    def g(self, u: float) -> float:
        return DOSE_RESPONSES[self.dose_response](_check_dose(u))

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelParams":
        names = [f.name for f in fields(cls)]
        missing = [n for n in names if n not in data]
        if missing:
            raise ValueError(f"model config is missing fields: {missing}")
        unknown = [k for k in data if k not in names and not k.startswith("_")]
        if unknown:
            raise ValueError(f"model config has unknown fields: {unknown}")
        kw = {n: data[n] for n in names}
        for n in names:
            if n != "dose_response":
                kw[n] = float(kw[n])
        return cls(**kw)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ModelParams":
        data = json.loads(Path(path).read_text())
        return cls.from_dict(data.get("model", data))


def effective_rates(p: ModelParams, u: float) -> tuple[float, float, float, float]:
    """Return ``(kappa_S, kappa_R, alpha, delta)`` at dose ``u``."""
    g = p.g(u)
    # convex-combination form is exact at both ends of the dose range
    kS = (1.0 - g) * p.kS_max + g * p.kS_min
    kR = (1.0 - g) * p.kR_min + g * p.kR_max
    return kS, kR, p.alpha_max * g, p.delta_max * (1.0 - g)


def transition_matrix(p: ModelParams, u: float) -> np.ndarray:
    kS, kR, a, d = effective_rates(p, u)
    return np.array([[kS - a, d], [a, kR - d]])


def treatment_matrix(p: ModelParams) -> np.ndarray:
    return transition_matrix(p, 1.0)


def pause_matrix(p: ModelParams) -> np.ndarray:
    return transition_matrix(p, 0.0)


def riccati_rhs(p: ModelParams, phi: float, u: float) -> float:
    """Rate of change of the resistant fraction for the memoryless system."""
    phi = _check_fraction(phi)
    kS, kR, a, d = effective_rates(p, u)
    return (kS - kR) * phi**2 + (kR - kS - d - a) * phi + a


def instantaneous_growth(p: ModelParams, phi: float, u: float) -> float:
    """Population-weighted net growth rate ``kS (1-phi) + kR phi``."""
    phi = _check_fraction(phi)
    kS, kR, _, _ = effective_rates(p, u)
    return kS * (1.0 - phi) + kR * phi


def linear_rhs(p: ModelParams) -> Callable[[np.ndarray, float], np.ndarray]:
    """``f(x, u) = A(u) x`` with matrices cached per dose value."""
    cache: dict[float, np.ndarray] = {}

    def f(x: np.ndarray, u: float) -> np.ndarray:
        A = cache.get(u)
        if A is None:
            A = cache[u] = transition_matrix(p, u)
        return A @ x

    return f


@dataclass
class Trajectory:
    """Time grid, states and step controls of one simulation.

    ``states[i]`` is the state at ``times[i]``; ``controls[i]`` is the dose
    held on the step from ``times[i]`` to ``times[i+1]``, so there is one
    fewer control than states.
    """

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        self.controls = np.asarray(self.controls, dtype=float)
        if self.states.ndim == 1:
            self.states = self.states[:, None]
        if len(self.times) != len(self.states):
            raise ValueError("times and states must have equal length")
        if len(self.controls) != len(self.states) - 1:
            raise ValueError("need exactly one control per step")
        if self.controls.size and (self.controls.min() < 0 or self.controls.max() > 1):
            raise ValueError("controls must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def steps(self) -> int:
        return len(self.controls)

    @property
    def total(self) -> np.ndarray:
        return self.states.sum(axis=1)

    @property
    def phi(self) -> np.ndarray:
        """Resistant fraction ``R / (S + R)``; requires the 2-D model state."""
        return self.states[:, 1] / self.total

    @property
    def growth(self) -> np.ndarray:
        """Observed per-step growth rate ``log(N_{i+1}/N_i) / dt`` (length ``steps``)."""
        N = self.total
        return np.log(N[1:] / N[:-1]) / np.diff(self.times)
