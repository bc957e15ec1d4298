"""Empirical inner problem via the representer theorem.

The inner minimizer is ``h = sum_i gamma_i K(x_i, .)`` where ``gamma`` zeroes
the residual

    r(gamma) = (1/n) d_v(K gamma) + lam * gamma,

``d_v`` being the entrywise derivative of the inner loss at the predictions.
The objective gradient is ``K r``, so ``r = 0`` characterizes the minimizer
without inverting ``K`` even when ``K`` is singular.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg

from kbo.errors import ContractViolation, ConvergenceError, InputError, SingularityError
from kbo.kernels import GramSet
from kbo.losses import LossBundle

ARMIJO_C = 1e-4
ARMIJO_SHRINK = 0.5
ARMIJO_MAX_HALVINGS = 30


@dataclass
class InnerSolution:
    gamma: NDArray[np.float64]
    pred_inner: NDArray[np.float64]
    pred_outer: NDArray[np.float64]
    h_norm_sq: float
    residual_norm: float
    iterations: int = 0


def _check_lam(lam):
    if not np.isfinite(lam) or lam <= 0:
        raise InputError(f"regularization lam must be positive, got {lam}")


def jitter_for(n: int) -> float:
    return 1e-10 * n


def factorize_shifted(K: NDArray[np.float64], shift: float, jitter: bool = False):
    """Cholesky factor of ``K + shift * I`` (plus optional diagonal jitter).

    Raises :class:`SingularityError` with the smallest eigenvalue when the
    matrix is not numerically positive definite.
    """
    n = K.shape[0]
    A = K.copy()
    A[np.diag_indices(n)] += shift + (jitter_for(n) if jitter else 0.0)
    try:
        return linalg.cho_factor(A, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        smallest = float(linalg.eigvalsh(A, subset_by_index=[0, 0])[0])
        raise SingularityError(
            f"K + {shift:g} I is not positive definite (smallest pivot/eigenvalue {smallest:.3e})"
        ) from exc


def _finish(gram: GramSet, gamma, residual_norm, iterations) -> InnerSolution:
    pred_inner = gram.K @ gamma
    return InnerSolution(
        gamma=gamma,
        pred_inner=pred_inner,
        pred_outer=gram.K_bar @ gamma,
        h_norm_sq=max(float(gamma @ pred_inner), 0.0),
        residual_norm=residual_norm,
        iterations=iterations,
    )


def solve_inner_closed_form(
    gram: GramSet,
    F: ArrayLike,
    lam: float,
    omega: ArrayLike,
    factor=None,
    jitter: bool = False,
) -> InnerSolution:
    """Inner solution for the IV loss: ``gamma = (K + n lam I)^{-1} F omega``.

    ``F`` holds ``phi(t_i)`` row-wise. ``factor`` may carry a precomputed
    :func:`factorize_shifted` result, which does not depend on ``omega``.
    """
    _check_lam(lam)
    n = gram.n
    F = np.asarray(F, dtype=np.float64).reshape(n, -1)
    omega = np.asarray(omega, dtype=np.float64).reshape(-1)
    if F.shape[1] != omega.shape[0]:
        raise InputError(f"F has {F.shape[1]} columns but omega has {omega.shape[0]} entries")
    if factor is None:
        factor = factorize_shifted(gram.K, n * lam, jitter)
    rhs = F @ omega
    gamma = linalg.cho_solve(factor, rhs, check_finite=False)
    sol = _finish(gram, gamma, 0.0, 1)
    sol.residual_norm = float(np.linalg.norm((sol.pred_inner - rhs) / n + lam * gamma))
    return sol


def inner_objective(gram: GramSet, bundle: LossBundle, targets, lam, omega, gamma, pred=None) -> float:
    pred = gram.K @ gamma if pred is None else pred
    return float(np.mean(bundle.value(omega, pred, targets)) + 0.5 * lam * (gamma @ pred))


def optimality_residual(gram: GramSet, bundle: LossBundle, targets, lam, omega, gamma, pred=None):
    pred = gram.K @ gamma if pred is None else pred
    return bundle.d_v(omega, pred, targets) / gram.n + lam * gamma


def solve_inner_newton(
    gram: GramSet,
    bundle: LossBundle,
    targets: ArrayLike,
    lam: float,
    omega: ArrayLike,
    tol: float | None = None,
    max_iter: int = 100,
    gamma0: ArrayLike | None = None,
    jitter: bool = False,
) -> InnerSolution:
    """Damped Newton on ``r(gamma) = 0`` for a convex inner loss.

    The Newton system is ``((1/n) diag(d_vv) K + lam I) delta = -r``, with an
    Armijo backtracking search on the inner objective. ``gamma0`` warm-starts
    the iteration (e.g. from the previous outer iterate).
    """
    if not bundle.convex_in_v:
        raise ContractViolation(f"{type(bundle).__name__} is not convex in v")
    _check_lam(lam)
    omega = np.asarray(omega, dtype=np.float64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64)
    n, K = gram.n, gram.K
    if tol is None:
        tol = 1e-10 * (1.0 + float(np.linalg.norm(omega)))
    if tol <= 0:
        raise InputError("tol must be positive")
    K_fact = K
    if jitter:
        K_fact = K.copy()
        K_fact[np.diag_indices(n)] += jitter_for(n)

    gamma = np.zeros(n) if gamma0 is None else np.array(gamma0, dtype=np.float64)
    pred = K @ gamma
    eye = np.eye(n)
    rnorm = np.inf
    for it in range(max_iter + 1):
        r = optimality_residual(gram, bundle, targets, lam, omega, gamma, pred)
        rnorm = float(np.linalg.norm(r))
        if rnorm <= tol:
            return _finish(gram, gamma, rnorm, it)
        if it == max_iter:
            break
        dvv = bundle.d_vv(omega, pred, targets)
        jac = (dvv[:, None] * K_fact) / n + lam * eye
        delta = np.linalg.solve(jac, -r)
        K_delta = K @ delta
        slope = float(r @ K_delta)
        obj0 = inner_objective(gram, bundle, targets, lam, omega, gamma, pred)
        slack = 4 * np.finfo(float).eps * (abs(obj0) + 1.0)
        step = 1.0
        for _ in range(ARMIJO_MAX_HALVINGS + 1):
            cand_pred = pred + step * K_delta
            cand = gamma + step * delta
            if inner_objective(gram, bundle, targets, lam, omega, cand, cand_pred) <= obj0 + ARMIJO_C * step * slope + slack:
                break
            step *= ARMIJO_SHRINK
        else:
            raise ConvergenceError(
                f"inner line search failed at iteration {it} (residual {rnorm:.3e})", rnorm
            )
        gamma, pred = cand, cand_pred
    raise ConvergenceError(
        f"inner Newton did not reach tol {tol:.3e} in {max_iter} iterations (residual {rnorm:.3e})",
        rnorm,
    )


def norm_bounds(bundle: LossBundle, targets, lam: float, omega, kappa: float = 1.0):
    """Bounds on the inner solution implied by strong convexity.

    Returns ``(B, rkhs_bound, sup_bound)`` with ``B = max_i |d_v l(omega, 0, y_i)|``,
    ``|h|_H <= B sqrt(kappa) / lam`` and ``|h(x)| <= B kappa / lam``.
    """
    targets = np.asarray(targets, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64).reshape(-1)
    B = float(np.max(np.abs(bundle.d_v(omega, np.zeros_like(targets), targets))))
    return B, B * np.sqrt(kappa) / lam, B * kappa / lam
