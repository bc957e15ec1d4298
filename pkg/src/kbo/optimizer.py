"""Bilevel (projected) gradient descent with Armijo backtracking.

Plain gradient descent is projected gradient descent over the unconstrained
set; both share one loop, so the reduction is exact.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray

from kbo.errors import InputError


_BALL_SLACK = 4 * np.finfo(np.float64).eps


class ConstraintKind(Enum):
    UNCONSTRAINED = "unconstrained"
    BALL = "ball"
    BOX = "box"


@dataclass(frozen=True)
class ConstraintSet:
    kind: ConstraintKind = ConstraintKind.UNCONSTRAINED
    center: NDArray[np.float64] | None = None
    radius: float | None = None
    lo: NDArray[np.float64] | None = None
    hi: NDArray[np.float64] | None = None

    @classmethod
    def unconstrained(cls) -> ConstraintSet:
        return cls()

    @classmethod
    def ball(cls, center: ArrayLike, radius: float) -> ConstraintSet:
        if not radius > 0:
            raise InputError(f"ball radius must be positive, got {radius}")
        return cls(ConstraintKind.BALL, center=np.asarray(center, dtype=np.float64), radius=float(radius))

    @classmethod
    def box(cls, lo: ArrayLike, hi: ArrayLike) -> ConstraintSet:
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        if np.any(lo > hi):
            raise InputError("box requires lo <= hi")
        return cls(ConstraintKind.BOX, lo=lo, hi=hi)

    def violation(self, x: ArrayLike) -> float:
        """Distance-like infeasibility of ``x`` (0 when inside)."""
        x = np.asarray(x, dtype=np.float64)
        if self.kind is ConstraintKind.BALL:
            return max(float(np.linalg.norm(x - self.center)) - self.radius, 0.0)
        if self.kind is ConstraintKind.BOX:
            return float(max(np.max(self.lo - x, initial=0.0), np.max(x - self.hi, initial=0.0)))
        return 0.0

    def contains(self, x: ArrayLike, margin: float = 1e-12) -> bool:
        return self.violation(x) <= margin


def project(cset: ConstraintSet, x: ArrayLike) -> NDArray[np.float64]:
    """Euclidean projection onto ``cset``."""
    x = np.asarray(x, dtype=np.float64)
    if cset.kind is ConstraintKind.UNCONSTRAINED:
        return x.copy()
    if cset.kind is ConstraintKind.BALL:
        offset = x - cset.center
        dist = float(np.linalg.norm(offset))
        # the slack keeps projection idempotent despite rounding in the rescale
        if dist <= cset.radius * (1.0 + _BALL_SLACK):
            return x.copy()
        return cset.center + cset.radius * offset / dist
    return np.clip(x, cset.lo, cset.hi)


def gradient_mapping(cset: ConstraintSet, omega: ArrayLike, grad: ArrayLike, eta: float) -> NDArray[np.float64]:
    """``(omega - P(omega - eta grad)) / eta``.

    Returns ``grad`` itself whenever the step stays feasible, so the
    unconstrained case reproduces the gradient bit for bit.
    """
    if not eta > 0:
        raise InputError(f"step size must be positive, got {eta}")
    omega = np.asarray(omega, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    step = omega - eta * grad
    if cset.kind is ConstraintKind.UNCONSTRAINED or cset.contains(step, margin=0.0):
        return grad.copy()
    return (omega - project(cset, step)) / eta


@dataclass
class LineSearchParams:
    initial_step: float = 1.0
    c: float = 1e-4
    shrink: float = 0.5
    max_halvings: int = 50
    max_step: float = 1.0
    growth: float = 2.0


class Termination(Enum):
    TOLERANCE = "tolerance"
    MAX_ITER = "max_iter"
    LINE_SEARCH_FAILURE = "line_search_failure"


@dataclass
class Trajectory:
    """Iterates ``omega_t`` with values and stationarity norms.

    ``grad_norms[t]`` is the gradient norm (or gradient-mapping norm under
    constraints) at ``iterates[t]``; ``step_sizes[t]`` is the step taken from
    ``iterates[t]`` to ``iterates[t + 1]``.
    """

    iterates: list = field(default_factory=list)
    values: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    step_sizes: list = field(default_factory=list)
    termination: Termination | None = None

    @property
    def iterations(self) -> int:
        return len(self.step_sizes)

    @property
    def final(self) -> NDArray[np.float64]:
        return self.iterates[-1]

    def running_min(self) -> NDArray[np.float64]:
        return np.minimum.accumulate(np.asarray(self.grad_norms))

    def write_csv(self, fh) -> None:
        writer = csv.writer(fh)
        writer.writerow(["iter", "f_value", "grad_norm", "step_size"])
        for t, (f, g) in enumerate(zip(self.values, self.grad_norms)):
            step = repr(self.step_sizes[t]) if t < len(self.step_sizes) else ""
            writer.writerow([t, repr(f), repr(g), step])


def projected_gd_run(
    omega0: ArrayLike,
    cset: ConstraintSet,
    grad_fn: Callable,
    value_fn: Callable,
    tol: float = 1e-5,
    max_iter: int = 10_000,
    ls: LineSearchParams | None = None,
) -> Trajectory:
    """``omega_{t+1} = P(omega_t - eta_t grad(omega_t))`` with backtracking.

    The trial step starts at ``min(max_step, growth * previous)`` and is shrunk
    until ``f(candidate) <= f(omega) - c <grad, omega - candidate>``. Stops when
    the gradient-mapping norm (at the last accepted step size) is at most
    ``tol``, after ``max_iter`` steps, or when backtracking is exhausted.
    """
    ls = LineSearchParams() if ls is None else ls
    if not tol >= 0:
        raise InputError("tol must be non-negative")
    omega = np.array(omega0, dtype=np.float64).reshape(-1)
    if not cset.contains(omega):
        raise InputError("initial point lies outside the constraint set")

    traj = Trajectory()
    f = float(value_fn(omega))
    g = np.asarray(grad_fn(omega), dtype=np.float64)
    eta_last = ls.initial_step
    trial = ls.initial_step
    for it in range(max_iter + 1):
        stat = float(np.linalg.norm(gradient_mapping(cset, omega, g, eta_last)))
        traj.iterates.append(omega)
        traj.values.append(f)
        traj.grad_norms.append(stat)
        if stat <= tol:
            traj.termination = Termination.TOLERANCE
            break
        if it == max_iter:
            traj.termination = Termination.MAX_ITER
            break
        eta = trial
        accepted = False
        for _ in range(ls.max_halvings + 1):
            cand = project(cset, omega - eta * g)
            decrease = float(g @ (omega - cand))
            if decrease > 0:
                f_cand = float(value_fn(cand))
                if f_cand <= f - ls.c * decrease:
                    accepted = True
                    break
            eta *= ls.shrink
        if not accepted:
            traj.termination = Termination.LINE_SEARCH_FAILURE
            break
        traj.step_sizes.append(eta)
        omega, f = cand, f_cand
        g = np.asarray(grad_fn(omega), dtype=np.float64)
        eta_last = eta
        trial = min(ls.max_step, ls.growth * eta)
    return traj


def gd_run(
    omega0: ArrayLike,
    grad_fn: Callable,
    value_fn: Callable,
    tol: float = 1e-5,
    max_iter: int = 10_000,
    ls: LineSearchParams | None = None,
) -> Trajectory:
    """Bilevel gradient descent ``omega_{t+1} = omega_t - eta_t grad(omega_t)``."""
    return projected_gd_run(omega0, ConstraintSet.unconstrained(), grad_fn, value_fn, tol, max_iter, ls)
