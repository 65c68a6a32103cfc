"""Fractional Adams-Bashforth-Moulton integrator for Caputo systems.

Solves ``D^mu x = f(x, u)`` with ``0 < mu <= 1`` on a fixed grid of step
``h`` with a control that is constant on every grid step.  The solution is
represented in Volterra form

    x(t) = x0 + 1/Gamma(mu) * int_0^t (t - s)^(mu-1) f(x(s), u(s)) ds

and the integral is evaluated by product integration of a piecewise-linear
interpolant of the integrand.  Because the control may jump at grid points,
every completed step keeps *two* integrand samples: the value at the left
end of the step and the value at its right end, both under the control of
that step.  The right sample is the one the corrector actually used (the
predicted evaluation), so the stored history is exactly the quadrature
that produced the committed states.  With ``mu == 1`` this collapses to the
classical one-step Adams-Bashforth-Moulton (Heun) method.

Cost: step ``n`` reads the whole history, so an ``n``-step run is O(n^2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

Rhs = Callable[[np.ndarray, float], np.ndarray]


class SolverError(RuntimeError):
    """Raised when the integration produces a non-finite state."""


def _check_order(mu: float) -> float:
    mu = float(mu)
    if not (0.0 < mu <= 1.0) or math.isnan(mu):
        raise ValueError(f"fractional order must lie in (0, 1], got {mu!r}")
    return mu


def gamma(x: float) -> float:
    # libm's tgamma is accurate to a few ulp on (0, 3], well inside 1e-12.
    return math.gamma(x)


def _power_diff(m: np.ndarray, p: float) -> np.ndarray:
    """m**p - (m-1)**p for m >= 1 without catastrophic cancellation."""
    m = np.asarray(m, dtype=float)
    out = np.empty_like(m)
    one = m == 1.0
    out[one] = 1.0
    big = ~one
    mb = m[big]
    out[big] = -(mb**p) * np.expm1(p * np.log1p(-1.0 / mb))
    return out


@dataclass(frozen=True)
class FracGrid:
    """Uniform time grid: ``n`` steps of size ``h`` for order ``mu``."""

    h: float
    n: int
    mu: float

    def __post_init__(self) -> None:
        if not self.h > 0:
            raise ValueError(f"step size must be positive, got {self.h}")
        if self.n < 0:
            raise ValueError(f"step count must be nonnegative, got {self.n}")
        _check_order(self.mu)

    @property
    def times(self) -> np.ndarray:
        return self.h * np.arange(self.n + 1)


def predictor_weights(mu: float, n: int) -> np.ndarray:
    """Fractional Adams-Bashforth (product rectangle) weights.

    Returns ``b_{j,n+1} = (n+1-j)^mu - (n-j)^mu`` for ``j = 0..n``.  The
    rectangle rule approximation of the Volterra integral at ``t_{n+1}`` is
    ``h^mu / Gamma(mu+1) * sum_j b_j f_j``.
    """
    mu = _check_order(mu)
    if n < 0:
        raise ValueError("step index must be nonnegative")
    k = (n - np.arange(n + 1)).astype(float)
    return (k + 1) ** mu - k**mu


def corrector_weights(mu: float, n: int) -> np.ndarray:
    """Fractional Adams-Moulton (product trapezoid) weights ``a_{j,n+1}``.

    Returns ``n + 2`` weights for the nodes ``t_0 .. t_{n+1}``; the
    quadrature is ``h^mu / Gamma(mu+2) * sum_j a_j f_j``.  For ``mu == 1``
    these are the trapezoid weights ``[1, 2, ..., 2, 1]`` (times ``h/2``).
    """
    mu = _check_order(mu)
    if n < 0:
        raise ValueError("step index must be nonnegative")
    a = np.empty(n + 2)
    a[0] = n ** (mu + 1) - (n - mu) * (n + 1) ** mu
    if n >= 1:
        k = (n - np.arange(1, n + 1)).astype(float)
        a[1 : n + 1] = (k + 2) ** (mu + 1) + k ** (mu + 1) - 2 * (k + 1) ** (mu + 1)
    a[n + 1] = 1.0
    return a


def split_weights(mu: float, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Left/right endpoint weights of the product trapezoid rule.

    Entry ``k`` belongs to the step that ends ``k`` steps before the
    evaluation time, i.e. step ``j = n - k`` when integrating up to
    ``t_{n+1}``.  In units of ``h^mu``::

        left[k]  = int_0^1 (k+s)^(mu-1) s ds
        right[k] = int_0^1 (k+s)^(mu-1) (1-s) ds

    with ``k + s`` the backward distance from the evaluation time.

    The integral on that step is ``left[k] f(t_j) + right[k] f(t_{j+1})``.
    Summing neighbours recovers :func:`corrector_weights` (times ``mu(mu+1)``)
    and ``left + right`` recovers :func:`predictor_weights` (divided by mu).
    """
    mu = _check_order(mu)
    m = np.arange(1, count + 1, dtype=float)
    d0 = _power_diff(m, mu)
    d1 = _power_diff(m, mu + 1.0)
    # s = sigma - (m - 1), sigma the backward distance measured in steps
    right = m * d0 / mu - d1 / (mu + 1.0)
    left = d1 / (mu + 1.0) - (m - 1.0) * d0 / mu
    if count:
        left[0] = 1.0 / (mu + 1.0)
        right[0] = 1.0 / (mu * (mu + 1.0))
    return left, right


@lru_cache(maxsize=32)
def _reversed_weights(mu: float, count: int) -> tuple[np.ndarray, np.ndarray]:
    left, right = split_weights(mu, count)
    lrev = np.ascontiguousarray(left[::-1])
    rrev = np.ascontiguousarray(right[::-1])
    lrev.setflags(write=False)
    rrev.setflags(write=False)
    return lrev, rrev


class RhsHistory:
    """Committed integrand samples plus the current state.

    Holds, for each completed step ``j``, the left sample ``f(x_j, u_j)`` and
    the right sample used by the corrector.  Together with ``x0`` this is the
    complete solver state: resuming from a copy reproduces an uninterrupted
    run exactly.
    """

    def __init__(self, x0: Sequence[float] | np.ndarray, capacity: int = 256):
        self.x0 = np.array(x0, dtype=float).reshape(-1)
        self.state = self.x0.copy()
        cap = max(int(capacity), 1)
        self._left = np.zeros((cap, self.dim))
        self._right = np.zeros((cap, self.dim))
        self._n = 0

    @property
    def dim(self) -> int:
        return self.x0.size

    def __len__(self) -> int:
        return self._n

    @property
    def left(self) -> np.ndarray:
        return self._left[: self._n]

    @property
    def right(self) -> np.ndarray:
        return self._right[: self._n]

    def append(self, left: np.ndarray, right: np.ndarray, state: np.ndarray) -> None:
        if self._n == self._left.shape[0]:
            grow = self._left.shape[0]
            self._left = np.concatenate([self._left, np.zeros((grow, self.dim))])
            self._right = np.concatenate([self._right, np.zeros((grow, self.dim))])
        self._left[self._n] = left
        self._right[self._n] = right
        self._n += 1
        self.state = state

    def clear(self) -> None:
        self._n = 0
        self.state = self.x0.copy()

    def copy(self) -> "RhsHistory":
        new = RhsHistory(self.x0, capacity=max(self._left.shape[0], 1))
        new._left[: self._n] = self.left
        new._right[: self._n] = self.right
        new._n = self._n
        new.state = self.state.copy()
        return new


def _memory(history: RhsHistory, mu: float, n: int) -> np.ndarray:
    """Product-trapezoid integral over the n completed steps, in units h^mu."""
    if n == 0:
        return np.zeros(history.dim)
    # weights for k = n .. 1 (step j = 0 .. n-1), taken from the reversed cache
    size = 1 << max(n, 1).bit_length()
    lrev, rrev = _reversed_weights(mu, size + 1)
    lo = size + 1 - (n + 1)
    wl = lrev[lo : lo + n]
    wr = rrev[lo : lo + n]
    return wl @ history.left + wr @ history.right


def fde_step(
    history: RhsHistory,
    grid: FracGrid,
    rhs: Rhs,
    u: float,
    *,
    local: bool | None = None,
) -> np.ndarray:
    """Advance one step of size ``grid.h`` with control ``u`` held fixed.

    Predict-evaluate-correct-evaluate: the left sample ``f(x_n, u)`` is
    evaluated first (the control may differ from the previous step), the
    predictor adds a product-rectangle term on the new step to the committed
    memory, and the corrector replaces it with the product-trapezoid term.
    Both samples are appended to ``history`` and the new state returned.

    ``local`` selects the incremental update ``x_{n+1} = x_n + ...`` that is
    algebraically identical to the memory sum when ``mu == 1``; it defaults to
    ``True`` exactly when ``mu == 1``.
    """
    mu, h = grid.mu, grid.h
    n = len(history)
    if local is None:
        local = mu == 1.0
    elif local and mu != 1.0:
        raise ValueError("the local update is only valid for mu == 1")

    x_n = history.state
    f_left = np.asarray(rhs(x_n, u), dtype=float)
    if local:
        x_pred = x_n + h * f_left
        f_pred = np.asarray(rhs(x_pred, u), dtype=float)
        x_next = x_n + 0.5 * h * (f_left + f_pred)
    else:
        scale = h**mu / gamma(mu)
        base = history.x0 + scale * _memory(history, mu, n)
        x_pred = base + scale * (f_left / mu)
        f_pred = np.asarray(rhs(x_pred, u), dtype=float)
        x_next = base + scale * (f_left / (mu + 1.0) + f_pred / (mu * (mu + 1.0)))

    if not np.all(np.isfinite(x_next)):
        raise SolverError(f"non-finite state at step {n + 1}: {x_next!r}")
    history.append(f_left, f_pred, x_next)
    return x_next


class FracSolver:
    """Stateful wrapper holding the rhs, grid parameters and history."""

    def __init__(self, rhs: Rhs, x0, mu: float, h: float, capacity: int = 256):
        self.rhs = rhs
        self.grid = FracGrid(h=h, n=0, mu=mu)
        self.history = RhsHistory(x0, capacity=capacity)

    @property
    def state(self) -> np.ndarray:
        return self.history.state

    @property
    def steps(self) -> int:
        return len(self.history)

    def step(self, u: float) -> np.ndarray:
        return fde_step(self.history, self.grid, self.rhs, u)

    def reset(self) -> None:
        self.history.clear()


def integrate_piecewise(rhs: Rhs, schedule, x0, grid: FracGrid, history: RhsHistory | None = None):
    """Integrate over ``grid.n`` steps with ``schedule[i]`` held on step ``i``.

    Returns a :class:`~fracdose.model.Trajectory`.  Passing a ``history``
    resumes from it (its state is the starting point and it is extended in
    place); the returned trajectory then starts at the resumed time.
    """
    from .model import Trajectory

    schedule = np.asarray(schedule, dtype=float).reshape(-1)
    if schedule.size != grid.n:
        raise ValueError(f"schedule has {schedule.size} entries, grid has {grid.n} steps")
    if history is None:
        history = RhsHistory(x0, capacity=grid.n + 1)
    start = len(history)
    states = np.empty((grid.n + 1, history.dim))
    states[0] = history.state
    for i, u in enumerate(schedule):
        states[i + 1] = fde_step(history, grid, rhs, u)
    times = grid.h * (start + np.arange(grid.n + 1))
    return Trajectory(times=times, states=states, controls=schedule.copy())
