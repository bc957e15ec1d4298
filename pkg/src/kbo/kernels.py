"""Kernel evaluation, Gram matrices and random Fourier feature maps."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.distance import cdist

from kbo._rng import make_rng
from kbo.errors import InputError


class KernelKind(Enum):
    """Registered kernels. Only the Gaussian kernel is implemented."""

    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class KernelSpec:
    """A shift-invariant kernel on R^p.

    Parameters
    ----------
    bandwidth : float
        Gaussian bandwidth ``sigma``; ``K(x, x') = exp(-|x - x'|^2 / (2 sigma^2))``.
    input_dim : int
        Dimension ``p`` of the input points.
    kind : KernelKind
    """

    bandwidth: float = 0.2
    input_dim: int = 3
    kind: KernelKind = KernelKind.GAUSSIAN

    def __post_init__(self):
        if not np.isfinite(self.bandwidth) or self.bandwidth <= 0:
            raise InputError(f"bandwidth must be positive, got {self.bandwidth}")
        if int(self.input_dim) != self.input_dim or self.input_dim < 1:
            raise InputError(f"input_dim must be a positive integer, got {self.input_dim}")
        if not isinstance(self.kind, KernelKind):
            object.__setattr__(self, "kind", KernelKind(self.kind))

    @property
    def kappa(self) -> float:
        """Upper bound on ``K(x, x)``."""
        return 1.0


def _as_points(spec: KernelSpec, X: ArrayLike, name: str) -> NDArray[np.float64]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1 and spec.input_dim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise InputError(f"{name} must be a 2-d array of points, got shape {X.shape}")
    if X.shape[0] == 0:
        raise InputError(f"{name} is empty")
    if X.shape[1] != spec.input_dim:
        raise InputError(f"{name} has dimension {X.shape[1]}, kernel expects {spec.input_dim}")
    return X


def eval_kernel(spec: KernelSpec, x: ArrayLike, x2: ArrayLike) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    x2 = np.asarray(x2, dtype=np.float64).reshape(-1)
    if x.shape != (spec.input_dim,) or x2.shape != (spec.input_dim,):
        raise InputError(
            f"points must have dimension {spec.input_dim}, got {x.shape} and {x2.shape}"
        )
    sq = float(np.sum((x - x2) ** 2))
    return float(np.exp(-sq / (2.0 * spec.bandwidth**2)))


def gram(spec: KernelSpec, rows: ArrayLike, cols: ArrayLike | None = None) -> NDArray[np.float64]:
    """Dense kernel matrix ``G[i, j] = K(rows[i], cols[j])``.

    With ``cols=None`` the square Gram matrix of ``rows`` is returned; it is
    exactly symmetric with unit diagonal.
    """
    R = _as_points(spec, rows, "rows")
    C = R if cols is None else _as_points(spec, cols, "cols")
    # cdist evaluates each pair directly, so the square case is bitwise symmetric
    sq = cdist(R, C, metric="sqeuclidean")
    return np.exp(sq * (-0.5 / spec.bandwidth**2))


@dataclass(frozen=True)
class GramSet:
    """The three kernel matrices of an empirical bilevel problem.

    ``K`` is inner x inner (n x n), ``K_bar`` outer x inner (m x n) and
    ``K_tilde`` outer x outer (m x m).
    """

    K: NDArray[np.float64]
    K_bar: NDArray[np.float64]
    K_tilde: NDArray[np.float64]

    def __post_init__(self):
        n, m = self.K.shape[0], self.K_tilde.shape[0]
        if self.K.shape != (n, n) or self.K_tilde.shape != (m, m) or self.K_bar.shape != (m, n):
            raise InputError(
                f"inconsistent Gram shapes K{self.K.shape} K_bar{self.K_bar.shape} "
                f"K_tilde{self.K_tilde.shape}"
            )

    @property
    def n(self) -> int:
        return self.K.shape[0]

    @property
    def m(self) -> int:
        return self.K_tilde.shape[0]

    @classmethod
    def from_points(cls, spec: KernelSpec, inner_x: ArrayLike, outer_x: ArrayLike) -> GramSet:
        return cls(
            K=gram(spec, inner_x),
            K_bar=gram(spec, outer_x, inner_x),
            K_tilde=gram(spec, outer_x),
        )


@dataclass(frozen=True)
class RffMap:
    """Random Fourier feature map ``psi(x) = sqrt(2/D) cos(W x + b)``."""

    W: NDArray[np.float64]
    b: NDArray[np.float64]
    bandwidth: float

    @property
    def D(self) -> int:
        return self.W.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    def __call__(self, X: ArrayLike) -> NDArray[np.float64]:
        return rff_features(self, X)


def sample_rff(spec: KernelSpec, D: int, seed: int) -> RffMap:
    """Draw ``D`` random features for ``spec``.

    Frequencies come from the kernel's spectral density, N(0, sigma^-2 I) for
    the Gaussian kernel, and phases from U[0, 2 pi). Frequencies are drawn
    before phases from a single seeded stream, so the map is a deterministic
    function of ``(spec, D, seed)``.
    """
    if int(D) != D or D < 1:
        raise InputError(f"feature count D must be a positive integer, got {D}")
    rng = make_rng(seed, 0x5246)
    W = rng.standard_normal((int(D), spec.input_dim)) / spec.bandwidth
    b = rng.uniform(0.0, 2.0 * np.pi, size=int(D))
    return RffMap(W=W, b=b, bandwidth=spec.bandwidth)


def rff_features(rff: RffMap, X: ArrayLike) -> NDArray[np.float64]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1 and rff.input_dim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[1] != rff.input_dim:
        raise InputError(f"points must have dimension {rff.input_dim}, got shape {X.shape}")
    Z = X @ rff.W.T
    Z += rff.b
    np.cos(Z, out=Z)
    Z *= np.sqrt(2.0 / rff.D)
    return Z
