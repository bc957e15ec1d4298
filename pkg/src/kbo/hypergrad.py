"""Value function and hypergradient of the empirical bilevel problem.

Two gradient routes are implemented:

* implicit differentiation of the representer coefficients,
  ``grad = (1/m) D_omega_out 1 - (1/m) D_omega_v_in M^{-1} u``;
* the plug-in route, which solves for the adjoint function
  ``a = sum_i alpha_i K(x_i, .) + beta xi`` and averages
  ``d_omega_v l_in * a(x_i)`` over inner points.

They agree exactly in exact arithmetic; the plug-in route exists to expose
the adjoint and to certify the implicit one.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg

from kbo.errors import InputError, NumericInputError, SingularityError
from kbo.inner_solver import (
    InnerSolution,
    factorize_shifted,
    solve_inner_closed_form,
    solve_inner_newton,
)
from kbo.kernels import GramSet, KernelSpec, gram
from kbo.losses import IvInnerLoss, LossBundle

ADJOINT_LSTSQ_RCOND = 1e-12
ADJOINT_RESIDUAL_TOL = 1e-8


@dataclass
class EstimatorWorkspace:
    """Loss derivatives and derived matrices at one inner solution.

    Shapes: ``D_v_out`` (m,), ``D_omega_out`` (d, m), ``D_vv_in`` (n,)
    (diagonal of the inner curvature matrix), ``D_omega_v_in`` (d, n),
    ``M = K diag(D_vv_in) + n lam I`` (n, n), ``u = K_bar^T D_v_out`` (n,).
    ``xi_norm_sq`` is the squared RKHS norm of ``xi = sum_j D_v_out_j K(x~_j, .)``,
    ``p_scalar = u^T diag(D_vv_in) u + n lam xi_norm_sq`` and
    ``v_scalar = xi_norm_sq``.
    """

    D_v_out: NDArray[np.float64]
    D_omega_out: NDArray[np.float64]
    D_vv_in: NDArray[np.float64]
    D_omega_v_in: NDArray[np.float64]
    M: NDArray[np.float64]
    u: NDArray[np.float64]
    xi_norm_sq: float
    p_scalar: float
    v_scalar: float
    lam: float

    @property
    def n(self) -> int:
        return self.M.shape[0]

    @property
    def m(self) -> int:
        return self.D_v_out.shape[0]


@dataclass
class HypergradResult:
    value: float
    grad: NDArray[np.float64]
    alpha: NDArray[np.float64] | None = None
    beta: float | None = None
    adjoint_residual: float = float("nan")
    estimator_gap: float = float("nan")
    grad_plugin: NDArray[np.float64] | None = field(default=None, repr=False)


def assemble_workspace(
    omega: ArrayLike,
    gram_set: GramSet,
    inner: InnerSolution,
    inner_bundle: LossBundle,
    inner_targets: ArrayLike,
    outer_bundle: LossBundle,
    outer_targets: ArrayLike,
    lam: float,
) -> EstimatorWorkspace:
    omega = np.asarray(omega, dtype=np.float64).reshape(-1)
    n = gram_set.n
    D_v_out = outer_bundle.d_v(omega, inner.pred_outer, outer_targets)
    D_omega_out = outer_bundle.d_omega(omega, inner.pred_outer, outer_targets).T
    D_vv_in = inner_bundle.d_vv(omega, inner.pred_inner, inner_targets)
    D_omega_v_in = inner_bundle.d_omega_v(omega, inner.pred_inner, inner_targets).T
    M = gram_set.K * D_vv_in[None, :]
    M[np.diag_indices(n)] += n * lam
    u = gram_set.K_bar.T @ D_v_out
    xi_norm_sq = max(float(D_v_out @ (gram_set.K_tilde @ D_v_out)), 0.0)
    return EstimatorWorkspace(
        D_v_out=D_v_out,
        D_omega_out=D_omega_out,
        D_vv_in=D_vv_in,
        D_omega_v_in=D_omega_v_in,
        M=M,
        u=u,
        xi_norm_sq=xi_norm_sq,
        p_scalar=float(u @ (D_vv_in * u)) + n * lam * xi_norm_sq,
        v_scalar=xi_norm_sq,
        lam=lam,
    )


def value_hat(omega: ArrayLike, inner: InnerSolution, outer_bundle: LossBundle, outer_targets: ArrayLike) -> float:
    """Empirical value ``(1/m) sum_j l_out(omega, (K_bar gamma)_j, y~_j)``."""
    if not np.all(np.isfinite(inner.pred_outer)):
        raise NumericInputError("inner predictions contain NaN or Inf")
    omega = np.asarray(omega, dtype=np.float64).reshape(-1)
    return float(np.mean(outer_bundle.value(omega, inner.pred_outer, outer_targets)))


def grad_implicit(ws: EstimatorWorkspace) -> NDArray[np.float64]:
    """Implicit-differentiation gradient; one LU solve against ``M``."""
    try:
        z = linalg.solve(ws.M, ws.u, check_finite=False)
    except linalg.LinAlgError as exc:
        raise SingularityError(f"M is singular: {exc}") from exc
    return (ws.D_omega_out.sum(axis=1) - ws.D_omega_v_in @ z) / ws.m


def adjoint_system(ws: EstimatorWorkspace, gram_set: GramSet):
    """Assemble the (n+1) x (n+1) optimality system of the adjoint objective.

    Returns ``(A, rhs)`` with ``A = [[M K, M u], [(M u)^T, p]]`` and
    ``rhs = -(n/m) [u; v]``.
    """
    n, m = ws.n, ws.m
    Mu = ws.M @ ws.u
    A = np.empty((n + 1, n + 1))
    A[:n, :n] = ws.M @ gram_set.K
    A[:n, n] = Mu
    A[n, :n] = Mu
    A[n, n] = ws.p_scalar
    rhs = -(n / m) * np.append(ws.u, ws.v_scalar)
    return A, rhs


def _relative_residual(A, theta, rhs) -> float:
    scale = np.linalg.norm(A, ord=np.inf) * np.linalg.norm(theta, ord=np.inf) + np.linalg.norm(rhs, ord=np.inf)
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(A @ theta - rhs, ord=np.inf) / scale)


def adjoint_solve(ws: EstimatorWorkspace, gram_set: GramSet):
    """Coefficients ``(alpha, beta)`` of the empirical adjoint function.

    The block system is singular whenever the Gram matrix of
    ``{K(x_i, .)} + {xi}`` is (e.g. ``xi = 0``); a least-squares solution is
    used then. Every solution yields the same adjoint evaluations.

    Returns ``(alpha, beta, relative_residual)``.
    """
    A, rhs = adjoint_system(ws, gram_set)
    theta = None
    try:
        with warnings.catch_warnings():
            # an ill-conditioning warning means the system is (near) singular
            warnings.simplefilter("error", linalg.LinAlgWarning)
            theta = linalg.solve(A, rhs, assume_a="sym", check_finite=False)
    except (linalg.LinAlgError, linalg.LinAlgWarning):
        pass
    if theta is None or not np.all(np.isfinite(theta)) or _relative_residual(A, theta, rhs) > ADJOINT_RESIDUAL_TOL:
        # minimum-norm solution; tiny singular values are treated as zero
        theta = linalg.lstsq(A, rhs, cond=ADJOINT_LSTSQ_RCOND, check_finite=False)[0]
    n = ws.n
    return theta[:n], float(theta[n]), _relative_residual(A, theta, rhs)


def adjoint_evaluations(ws: EstimatorWorkspace, gram_set: GramSet, alpha, beta) -> NDArray[np.float64]:
    """Adjoint function at the inner points: ``K alpha + beta u``."""
    return gram_set.K @ alpha + beta * ws.u


def adjoint_objective(ws: EstimatorWorkspace, gram_set: GramSet, alpha, beta) -> float:
    """Empirical adjoint objective of ``a = sum_i alpha_i K(x_i, .) + beta xi``,
    evaluated from function values and the RKHS norm (not the block system)."""
    a_in = gram_set.K @ alpha + beta * ws.u
    a_out = gram_set.K_bar @ alpha + beta * (gram_set.K_tilde @ ws.D_v_out)
    a_norm_sq = float(alpha @ (gram_set.K @ alpha) + 2.0 * beta * (ws.u @ alpha) + beta**2 * ws.xi_norm_sq)
    return float(
        0.5 * np.mean(ws.D_vv_in * a_in**2)
        + np.mean(ws.D_v_out * a_out)
        + 0.5 * ws.lam * a_norm_sq
    )


def grad_plugin(ws: EstimatorWorkspace, adjoint_evals: ArrayLike) -> NDArray[np.float64]:
    """Plug-in gradient ``(1/m) sum_j d_omega l_out + (1/n) sum_i d_omega_v l_in a(x_i)``."""
    adjoint_evals = np.asarray(adjoint_evals, dtype=np.float64)
    return ws.D_omega_out.sum(axis=1) / ws.m + ws.D_omega_v_in @ adjoint_evals / ws.n


@dataclass
class BilevelProblem:
    """An empirical kernel bilevel problem on fixed samples.

    ``inner_targets`` / ``outer_targets`` are passed as ``y`` to the inner and
    outer loss bundles. When ``features`` (rows ``phi(t_i)``) is given and the
    inner loss is the IV loss, the inner problem is solved in closed form with
    a cached Cholesky factor; otherwise by damped Newton, warm-started from the
    previous solve.
    """

    gram: GramSet
    inner_bundle: LossBundle
    inner_targets: NDArray[np.float64]
    outer_bundle: LossBundle
    outer_targets: NDArray[np.float64]
    lam: float
    features: NDArray[np.float64] | None = None
    warm_start: bool = True
    newton_tol: float | None = None

    def __post_init__(self):
        if self.lam <= 0:
            raise InputError("lam must be positive")
        self.inner_targets = np.asarray(self.inner_targets, dtype=np.float64)
        self.outer_targets = np.asarray(self.outer_targets, dtype=np.float64)
        if self.inner_targets.shape != (self.gram.n,) or self.outer_targets.shape != (self.gram.m,):
            raise InputError("target lengths must match the Gram matrices")
        self._factor = None
        self._last_gamma = None

    @property
    def dim(self) -> int:
        return self.inner_bundle.dim

    @property
    def closed_form(self) -> bool:
        return self.features is not None and isinstance(self.inner_bundle, IvInnerLoss)

    def solve_inner(self, omega) -> InnerSolution:
        if self.closed_form:
            if self._factor is None:
                self._factor = factorize_shifted(self.gram.K, self.gram.n * self.lam)
            return solve_inner_closed_form(self.gram, self.features, self.lam, omega, factor=self._factor)
        gamma0 = self._last_gamma if self.warm_start else None
        sol = solve_inner_newton(
            self.gram, self.inner_bundle, self.inner_targets, self.lam, omega,
            tol=self.newton_tol, gamma0=gamma0,
        )
        self._last_gamma = sol.gamma
        return sol

    def workspace(self, omega, inner: InnerSolution | None = None) -> EstimatorWorkspace:
        inner = self.solve_inner(omega) if inner is None else inner
        return assemble_workspace(
            omega, self.gram, inner, self.inner_bundle, self.inner_targets,
            self.outer_bundle, self.outer_targets, self.lam,
        )

    def value(self, omega) -> float:
        return value_hat(omega, self.solve_inner(omega), self.outer_bundle, self.outer_targets)

    def grad(self, omega, method: str = "implicit") -> NDArray[np.float64]:
        ws = self.workspace(omega)
        if method == "implicit":
            return grad_implicit(ws)
        if method == "plugin":
            alpha, beta, _ = adjoint_solve(ws, self.gram)
            return grad_plugin(ws, adjoint_evaluations(ws, self.gram, alpha, beta))
        raise InputError(f"unknown gradient method {method!r}")

    def evaluate(self, omega, both: bool = True) -> HypergradResult:
        """Value and implicit gradient; with ``both`` also the adjoint route
        and the infinity-norm gap between the two gradients."""
        inner = self.solve_inner(omega)
        ws = self.workspace(omega, inner)
        res = HypergradResult(
            value=value_hat(omega, inner, self.outer_bundle, self.outer_targets),
            grad=grad_implicit(ws),
        )
        if both:
            alpha, beta, resid = adjoint_solve(ws, self.gram)
            g_plug = grad_plugin(ws, adjoint_evaluations(ws, self.gram, alpha, beta))
            res.alpha, res.beta, res.adjoint_residual = alpha, beta, resid
            res.grad_plugin = g_plug
            res.estimator_gap = float(np.max(np.abs(res.grad - g_plug)))
        return res


class IvPluginQuadratic:
    """Closed-form empirical IV objective.

    With ``C = (K + n lam I)^{-1} F`` and ``B = K_bar C`` (m x d) the value is
    ``|B omega - y~|^2 / (2m)`` and the gradient ``B^T (B omega - y~) / m``.
    Only ``K`` and ``K_bar`` are needed. ``coercivity`` adds ``c |omega|^2``,
    matching :class:`~kbo.losses.SquaredOuterLoss`.
    """

    def __init__(self, K, K_bar, F, outer_y, lam: float, coercivity: float = 0.0):
        if coercivity < 0:
            raise InputError("coercivity must be non-negative")
        self.coercivity = float(coercivity)
        n = K.shape[0]
        factor = factorize_shifted(K, n * lam)
        self.C = linalg.cho_solve(factor, np.asarray(F, dtype=np.float64), check_finite=False)
        self.B = K_bar @ self.C
        self.y = np.asarray(outer_y, dtype=np.float64)
        self.m = self.B.shape[0]

    @classmethod
    def from_samples(cls, spec: KernelSpec, inner_x, inner_features, outer_x, outer_y, lam, coercivity=0.0):
        return cls(gram(spec, inner_x), gram(spec, outer_x, inner_x), inner_features, outer_y, lam, coercivity)

    @property
    def dim(self) -> int:
        return self.B.shape[1]

    def value(self, omega) -> float:
        w = np.asarray(omega, dtype=np.float64)
        r = self.B @ w - self.y
        return float(r @ r) / (2 * self.m) + self.coercivity * float(w @ w)

    def grad(self, omega) -> NDArray[np.float64]:
        w = np.asarray(omega, dtype=np.float64)
        r = self.B @ w - self.y
        return self.B.T @ r / self.m + 2.0 * self.coercivity * w

    def hessian(self) -> NDArray[np.float64]:
        return self.B.T @ self.B / self.m + 2.0 * self.coercivity * np.eye(self.dim)
