"""Large-sample approximation of the population IV objective.

Kernel evaluations are replaced by a finite feature map ``psi`` (random
Fourier features in practice), so that ``K ~ Xi Xi^T`` and
``K_bar ~ Xi~ Xi^T``. By the push-through identity

    K_bar (K + n lam I)^{-1} F  ~  Xi~ J,   J = (Xi^T Xi + n lam I)^{-1} Xi^T F,

the closed-form IV value and gradient only need the five sums
``Xi^T Xi``, ``Xi^T F``, ``Xi~^T Xi~``, ``Xi~^T y~`` and ``|y~|^2``, which
are accumulated block by block without ever holding ``Xi`` in memory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg

from kbo.errors import InputError, SingularityError
from kbo.losses import iv_features

SNAPSHOT_VERSION = 1


@dataclass
class RffOracle:
    XtX: NDArray[np.float64]
    XtF: NDArray[np.float64]
    TtT: NDArray[np.float64]
    Tty: NDArray[np.float64]
    y_norm_sq: float
    J: NDArray[np.float64]
    n_total: int
    m_total: int
    block_size: int
    lam: float
    _Q: NDArray[np.float64] = field(init=False, repr=False)
    _r: NDArray[np.float64] = field(init=False, repr=False)

    def __post_init__(self):
        # d x d and d-vector summaries; each query is O(d^2) afterwards
        self._Q = self.J.T @ (self.TtT @ self.J)
        self._Q = 0.5 * (self._Q + self._Q.T)
        self._r = self.J.T @ self.Tty

    @property
    def D(self) -> int:
        return self.XtX.shape[0]

    @property
    def dim(self) -> int:
        return self.J.shape[1]

    def value(self, omega) -> float:
        return oracle_value(self, omega)

    def grad(self, omega) -> NDArray[np.float64]:
        return oracle_grad(self, omega)

    def argmin(self) -> NDArray[np.float64]:
        """Minimum-norm minimizer of the quadratic value."""
        return linalg.lstsq(self._Q, self._r)[0]


def oracle_value(oracle: RffOracle, omega: ArrayLike) -> float:
    w = np.asarray(omega, dtype=np.float64).reshape(-1)
    m = max(oracle.m_total, 1)
    return float(0.5 * (w @ oracle._Q @ w) - w @ oracle._r + 0.5 * oracle.y_norm_sq) / m


def oracle_grad(oracle: RffOracle, omega: ArrayLike) -> NDArray[np.float64]:
    w = np.asarray(omega, dtype=np.float64).reshape(-1)
    m = max(oracle.m_total, 1)
    return (oracle._Q @ w - oracle._r) / m


def _split(arrays, block_size):
    length = len(arrays[0])
    for start in range(0, length, block_size):
        yield tuple(a[start:start + block_size] for a in arrays)


def build_oracle(
    feature_map: Callable[[NDArray[np.float64]], NDArray[np.float64]],
    inner_stream: Iterable,
    outer_stream: Iterable,
    lam: float,
    d: int,
    block_size: int = 1000,
    D: int | None = None,
) -> RffOracle:
    """Accumulate feature statistics over two sample streams.

    ``inner_stream`` yields ``(x, t)`` chunks and ``outer_stream`` yields
    ``(x~, y~)`` chunks. Chunks are re-cut into blocks of at most
    ``block_size`` rows before featurization, so peak memory is
    ``O(D^2 + D * block_size)`` regardless of stream length. ``D`` is
    inferred from the feature map (``feature_map.D``) when not given.
    """
    if int(block_size) != block_size or block_size < 1:
        raise InputError(f"block_size must be a positive integer, got {block_size}")
    if lam <= 0:
        raise InputError("lam must be positive")
    if D is None:
        D = getattr(feature_map, "D", None)
        if D is None:
            raise InputError("feature dimension D could not be inferred")
    XtX = np.zeros((D, D))
    XtF = np.zeros((D, d))
    TtT = np.zeros((D, D))
    Tty = np.zeros(D)
    y_norm_sq = 0.0
    n_total = m_total = 0

    for x, t in inner_stream:
        for xb, tb in _split((np.asarray(x), np.asarray(t)), block_size):
            Xi = feature_map(xb)
            XtX += Xi.T @ Xi
            XtF += Xi.T @ iv_features(tb, d)
            n_total += len(xb)
    for x, y in outer_stream:
        for xb, yb in _split((np.asarray(x), np.asarray(y, dtype=np.float64)), block_size):
            Xi = feature_map(xb)
            TtT += Xi.T @ Xi
            Tty += Xi.T @ yb
            y_norm_sq += float(yb @ yb)
            m_total += len(xb)

    return _finalize(XtX, XtF, TtT, Tty, y_norm_sq, n_total, m_total, int(block_size), lam)


def _finalize(XtX, XtF, TtT, Tty, y_norm_sq, n_total, m_total, block_size, lam) -> RffOracle:
    D = XtX.shape[0]
    A = XtX.copy()
    # an empty inner stream leaves XtF = 0, so any positive shift yields J = 0
    A[np.diag_indices(D)] += max(n_total, 1) * lam
    try:
        factor = linalg.cho_factor(A, lower=True)
    except linalg.LinAlgError as exc:
        raise SingularityError(f"Xi^T Xi + n lam I is not positive definite: {exc}") from exc
    J = linalg.cho_solve(factor, XtF)
    return RffOracle(
        XtX=XtX, XtF=XtF, TtT=TtT, Tty=Tty, y_norm_sq=y_norm_sq, J=J,
        n_total=n_total, m_total=m_total, block_size=block_size, lam=lam,
    )


def save_oracle(path, oracle: RffOracle, **meta) -> None:
    """Write the oracle statistics with a versioned JSON header.

    ``meta`` entries (seed, kernel bandwidth, ...) are stored in the header
    next to D, d, lam, n, m and block_size.
    """
    header = {
        "version": SNAPSHOT_VERSION,
        "D": oracle.D,
        "d": oracle.dim,
        "lam": oracle.lam,
        "n": oracle.n_total,
        "m": oracle.m_total,
        "block_size": oracle.block_size,
        **meta,
    }
    with open(path, "wb") as fh:
        np.savez(
            fh,
            header=np.array(json.dumps(header, sort_keys=True)),
            XtX=oracle.XtX, XtF=oracle.XtF, TtT=oracle.TtT, Tty=oracle.Tty,
            y_norm_sq=np.array(oracle.y_norm_sq), J=oracle.J,
        )


def load_oracle(path) -> tuple[RffOracle, dict]:
    with np.load(path) as data:
        header = json.loads(str(data["header"]))
        if header.get("version") != SNAPSHOT_VERSION:
            raise InputError(f"unsupported oracle snapshot version {header.get('version')}")
        oracle = RffOracle(
            XtX=data["XtX"], XtF=data["XtF"], TtT=data["TtT"], Tty=data["Tty"],
            y_norm_sq=float(data["y_norm_sq"]), J=data["J"],
            n_total=int(header["n"]), m_total=int(header["m"]),
            block_size=int(header["block_size"]), lam=float(header["lam"]),
        )
    return oracle, header


# ------------------------------------------------------- quadrature oracle


@dataclass
class QuadratureOracle:
    """Population IV objective ``F(omega) = 1/2 w^T Q w - w^T r + c``.

    Built by :func:`build_quadrature_oracle`; ``truncated_mass`` is the
    instrument probability mass lost outside the 1-d quadrature grid.
    """

    Q: NDArray[np.float64]
    r: NDArray[np.float64]
    const: float
    truncated_mass: float = 0.0
    n_modes: int = 0

    @property
    def dim(self) -> int:
        return self.Q.shape[0]

    def value(self, omega) -> float:
        w = np.asarray(omega, dtype=np.float64).reshape(-1)
        return float(0.5 * (w @ self.Q @ w) - w @ self.r + self.const)

    def grad(self, omega) -> NDArray[np.float64]:
        w = np.asarray(omega, dtype=np.float64).reshape(-1)
        return self.Q @ w - self.r

    def argmin(self) -> NDArray[np.float64]:
        return linalg.lstsq(self.Q, self.r)[0]


def _tensor_sums(mu, a, p, lam, prune):
    """``sum rho^k A^2`` and ``sum rho^k |A|^2`` (k = 1, 2) over all p-fold
    index tuples, where ``A = prod_j a[i_j]`` and ``rho = M / (M + lam)`` with
    ``M = prod_j mu[i_j]``. Tuples whose eigenvalue product cannot exceed
    ``prune * lam`` are skipped."""
    order = np.argsort(mu)[::-1]
    mu, a = mu[order], a[order]
    keep = mu * mu[0] ** (p - 1) > prune * lam
    mu, a = mu[keep], a[keep]
    a2, aa = a * a, np.abs(a) ** 2
    sums = np.zeros(4, dtype=np.complex128)

    def rec(depth, prod_mu, prod_a2, prod_aa):
        if depth == p - 1:
            M = prod_mu * mu
            rho = M / (M + lam)
            sums[0] += np.sum(rho * prod_a2 * a2)
            sums[1] += np.sum(rho * prod_aa * aa)
            sums[2] += np.sum(rho**2 * prod_a2 * a2)
            sums[3] += np.sum(rho**2 * prod_aa * aa)
            return
        bound = mu[0] ** (p - 1 - depth)
        for i in range(len(mu)):
            if prod_mu * mu[i] * bound <= prune * lam:
                break
            rec(depth + 1, prod_mu * mu[i], prod_a2 * a2[i], prod_aa * aa[i])

    rec(0, 1.0, 1.0 + 0j, 1.0)
    return sums, len(mu)


def build_quadrature_oracle(
    bandwidth: float,
    lam: float,
    nodes: ArrayLike,
    weights: ArrayLike,
    p: int,
    omega_star: ArrayLike,
    noise_var: float,
    scale: float = 2.0,
    prune: float = 1e-12,
) -> QuadratureOracle:
    """Exact population objective for the synthetic IV model.

    Assumes instruments with i.i.d. coordinates (1-d law given by the
    quadrature ``nodes``/``weights``), a Gaussian kernel of the given
    bandwidth, ``t = scale (1^T x + eps)``, ``y = omega*^T phi(t) + eps`` with
    ``phi_l(t) = sin(t + l)`` and ``eps ~ N(0, noise_var)``.

    The population inner solution is ``h = (T + lam)^{-1} T g`` where ``T`` is
    the kernel integral operator and ``g = E[phi(t) | x]``. Both the kernel and
    the instrument law factorize over coordinates and ``g_l`` is the imaginary
    part of a rank-one product of 1-d exponentials, so everything reduces to a
    1-d Nystrom eigendecomposition plus sums over p-fold eigenvalue products.
    """
    nodes = np.asarray(nodes, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    omega_star = np.asarray(omega_star, dtype=np.float64)
    if nodes.shape != weights.shape or nodes.ndim != 1 or np.any(weights < 0):
        raise InputError("nodes and weights must be matching 1-d arrays with non-negative weights")
    if lam <= 0 or bandwidth <= 0 or noise_var < 0:
        raise InputError("lam and bandwidth must be positive and noise_var non-negative")
    v, s = float(noise_var), float(scale)
    d = omega_star.shape[0]

    sw = np.sqrt(weights)
    S = sw[:, None] * np.exp(-((nodes[:, None] - nodes[None, :]) ** 2) / (2 * bandwidth**2)) * sw[None, :]
    mu, U = linalg.eigh(S)
    mu = np.clip(mu, 0.0, None)
    a = (sw * np.exp(1j * s * nodes)) @ U  # coefficients of exp(i s x) in the L2 eigenbasis
    (T1, T2, S1, S2), n_modes = _tensor_sums(mu, a, p, lam, prune)
    T2, S2 = T2.real, S2.real

    def chi(f):
        return complex(np.sum(weights * np.exp(1j * f * nodes)))

    ell = np.arange(1, d + 1)
    plus = ell[:, None] + ell[None, :]
    minus = ell[:, None] - ell[None, :]
    damp = np.exp(-(s**2) * v)
    Q = 0.5 * damp * (np.cos(minus) * S2 - np.real(np.exp(1j * plus) * S1))
    G = 0.5 * damp * (np.cos(minus) * T2 - np.real(np.exp(1j * plus) * T1))
    # E[y^2] from the characteristic function of 1^T x
    e_phi = 0.5 * (np.cos(minus) - np.real(np.exp(1j * plus) * chi(2 * s) ** p * np.exp(-2 * s**2 * v)))
    e_eps_phi = s * v * np.exp(-(s**2) * v / 2) * np.real(np.exp(1j * ell) * chi(s) ** p)
    ey2 = float(omega_star @ e_phi @ omega_star + 2 * omega_star @ e_eps_phi + v)
    Q = 0.5 * (Q + Q.T)
    return QuadratureOracle(
        Q=Q, r=G @ omega_star, const=0.5 * ey2,
        truncated_mass=max(0.0, 1.0 - float(weights.sum())), n_modes=n_modes,
    )
