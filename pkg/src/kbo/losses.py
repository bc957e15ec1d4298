"""Point-wise losses with the analytic partial derivatives used by the
hypergradient estimators, and the two concrete problem instances
(instrumental variable regression, hyperparameter selection under shift).

All methods are vectorized over samples: ``v`` and ``y`` are 1-d arrays of
equal length N, ``omega`` is a d-vector. Scalar slots return shape (N,),
vector slots return shape (N, d).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from kbo._rng import make_rng
from kbo.errors import InputError, NumericInputError


@dataclass(frozen=True)
class DerivativeRecord:
    value: NDArray[np.float64]
    d_omega: NDArray[np.float64]
    d_v: NDArray[np.float64]
    d_vv: NDArray[np.float64]
    d_omega_v: NDArray[np.float64]


class LossBundle:
    """A point-wise loss ``l(omega, v, y)`` and its partial derivatives.

    Subclasses implement the five slots. ``y`` is whatever target the loss
    consumes: an outcome for outer losses, a treatment for the IV inner loss.
    """

    convex_in_v: bool = True
    quadratic_in_v: bool = False

    def __init__(self, dim: int):
        self.dim = int(dim)

    def value(self, omega, v, y):
        raise NotImplementedError

    def d_omega(self, omega, v, y):
        raise NotImplementedError

    def d_v(self, omega, v, y):
        raise NotImplementedError

    def d_vv(self, omega, v, y):
        raise NotImplementedError

    def d_omega_v(self, omega, v, y):
        raise NotImplementedError

    def evaluate(self, omega, v, y) -> DerivativeRecord:
        return DerivativeRecord(
            value=self.value(omega, v, y),
            d_omega=self.d_omega(omega, v, y),
            d_v=self.d_v(omega, v, y),
            d_vv=self.d_vv(omega, v, y),
            d_omega_v=self.d_omega_v(omega, v, y),
        )


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericInputError(f"{name} contains NaN or Inf")


def loss_bundle_eval(bundle: LossBundle, omega: ArrayLike, v: ArrayLike, y: ArrayLike) -> DerivativeRecord:
    """Evaluate every derivative slot of ``bundle`` in one call, after
    validating that the inputs are finite and shaped consistently."""
    omega = np.asarray(omega, dtype=np.float64).reshape(-1)
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    _check_finite("omega", omega)
    _check_finite("v", v)
    _check_finite("y", y)
    if omega.shape != (bundle.dim,):
        raise InputError(f"omega must have shape ({bundle.dim},), got {omega.shape}")
    if v.shape != y.shape:
        raise InputError(f"v and y shapes differ: {v.shape} vs {y.shape}")
    return bundle.evaluate(omega, v, y)


def iv_features(t: ArrayLike, d: int) -> NDArray[np.float64]:
    """``phi(t) = (sin(t + 1), ..., sin(t + d))`` row-wise, shape (N, d)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    return np.sin(t[:, None] + np.arange(1, d + 1, dtype=np.float64))


class IvInnerLoss(LossBundle):
    """``0.5 * (v - omega^T phi(t))^2`` with ``y = t`` the treatment."""

    quadratic_in_v = True

    def _resid(self, omega, v, t):
        return v - iv_features(t, self.dim) @ omega

    def value(self, omega, v, t):
        return 0.5 * self._resid(omega, v, t) ** 2

    def d_omega(self, omega, v, t):
        return -self._resid(omega, v, t)[:, None] * iv_features(t, self.dim)

    def d_v(self, omega, v, t):
        return self._resid(omega, v, t)

    def d_vv(self, omega, v, t):
        return np.ones_like(np.asarray(v, dtype=np.float64))

    def d_omega_v(self, omega, v, t):
        return -iv_features(t, self.dim)


class SquaredOuterLoss(LossBundle):
    """``0.5 * (v - y)^2 + c |omega|^2``.

    ``coercivity`` (``c``) defaults to 0; a positive value makes the value
    function coercive in omega, which keeps gradient descent iterates
    bounded a priori.
    """

    quadratic_in_v = True

    def __init__(self, dim: int, coercivity: float = 0.0):
        super().__init__(dim)
        if coercivity < 0:
            raise InputError("coercivity must be non-negative")
        self.coercivity = float(coercivity)

    def value(self, omega, v, y):
        return 0.5 * (v - y) ** 2 + self.coercivity * float(omega @ omega)

    def d_omega(self, omega, v, y):
        return np.broadcast_to(2.0 * self.coercivity * omega, (len(v), self.dim)).copy()

    def d_v(self, omega, v, y):
        return v - y

    def d_vv(self, omega, v, y):
        return np.ones_like(np.asarray(v, dtype=np.float64))

    def d_omega_v(self, omega, v, y):
        return np.zeros((len(v), self.dim))


class WeightedSquaredInnerLoss(LossBundle):
    """``(omega / 2) * (v - y)^2`` for a scalar weight ``omega > 0``.

    Convexity in ``v`` requires ``omega >= 0``; optimizers keep omega in a
    positive box.
    """

    quadratic_in_v = True

    def __init__(self):
        super().__init__(1)

    def value(self, omega, v, y):
        return 0.5 * omega[0] * (v - y) ** 2

    def d_omega(self, omega, v, y):
        return (0.5 * (v - y) ** 2)[:, None]

    def d_v(self, omega, v, y):
        return omega[0] * (v - y)

    def d_vv(self, omega, v, y):
        return np.full(np.shape(v), float(omega[0]))

    def d_omega_v(self, omega, v, y):
        return np.asarray(v - y, dtype=np.float64)[:, None]


@dataclass
class IvProblem:
    """Instrumental variable regression with ``f_omega(t) = omega^T phi(t)``.

    Inner: ``0.5 * (h(x) - omega^T phi(t))^2``; outer: ``0.5 * (h(x) - y)^2``.
    """

    d: int = 4
    p: int = 3
    omega_star: NDArray[np.float64] | None = None
    noise_std: float = float(np.sqrt(0.025))
    coercivity: float = 0.0

    def __post_init__(self):
        if self.omega_star is not None:
            self.omega_star = np.asarray(self.omega_star, dtype=np.float64).reshape(self.d)

    def feature_map(self, t: ArrayLike) -> NDArray[np.float64]:
        return iv_features(t, self.d)

    def inner_loss(self) -> IvInnerLoss:
        return IvInnerLoss(self.d)

    def outer_loss(self) -> SquaredOuterLoss:
        return SquaredOuterLoss(self.d, self.coercivity)


@dataclass
class HyperShiftProblem:
    """Data-fit weight selection when train and test inputs are shifted.

    Inputs are Gaussian, ``x ~ N(train_mean, I)`` for training and
    ``x ~ N(test_mean, I)`` for testing, with ``y = target_fn(x) + noise``.
    The inner loss weighs the squared training error by ``omega``; the
    outer loss is the plain squared test error.
    """

    p: int = 2
    train_mean: float = 0.0
    test_mean: float = 0.5
    noise_std: float = 0.1
    frequencies: NDArray[np.float64] = field(default_factory=lambda: np.array([1.0, -0.5]))

    def target_fn(self, X: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.sin(X @ self.frequencies[: X.shape[1]])

    def _sample(self, rng, count, mean):
        X = mean + rng.standard_normal((count, self.p))
        y = self.target_fn(X) + self.noise_std * rng.standard_normal(count)
        return X, y

    def sample_train(self, count: int, seed: int):
        return self._sample(make_rng(seed, 0x7472), count, self.train_mean)

    def sample_test(self, count: int, seed: int):
        return self._sample(make_rng(seed, 0x7465), count, self.test_mean)

    def inner_loss(self) -> WeightedSquaredInnerLoss:
        return WeightedSquaredInnerLoss()

    def outer_loss(self) -> SquaredOuterLoss:
        return SquaredOuterLoss(1)
