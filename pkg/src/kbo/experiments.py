"""Synthetic IV data, the generalization-rate study and slope fitting.

Data model (per sample)::

    x ~ P_x,  eps ~ N(0, noise_std^2),  t = 2 (1^T x + eps),  y = omega*^T phi(t) + eps

with the same ``eps`` in ``t`` and ``y`` (that shared noise is what makes the
treatment endogenous). Samples are produced in fixed chunks of
``CHUNK_SIZE`` rows, each drawn from its own stream keyed by
``(seed, role, chunk index)``, so any prefix of a stream is reproducible
independently of how it is consumed.
"""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterator, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import stats

from kbo._rng import make_rng
from kbo.errors import ConfigError, InputError
from kbo.hypergrad import BilevelProblem, IvPluginQuadratic
from kbo.kernels import GramSet, KernelSpec, sample_rff
from kbo.losses import IvProblem, iv_features
from kbo.optimizer import LineSearchParams, gd_run
from kbo.population_oracle import (
    QuadratureOracle,
    RffOracle,
    build_oracle,
    build_quadrature_oracle,
    load_oracle,
    save_oracle,
)

log = logging.getLogger(__name__)

CHUNK_SIZE = 1024
TREATMENT_SCALE = 2.0
MAX_GRID_NODES = 6000

ROLE_INNER = 1
ROLE_OUTER = 2
ROLE_ORACLE_INNER = 3
ROLE_ORACLE_OUTER = 4
_TRUTH_KEY = 0x7472757468
_OMEGA0_KEY = 0x6F6D656761
_SEED_KEY = 0x73656564

ORACLE_KINDS = ("rff", "quadrature")
METRICS = ("val_err", "grad_err", "final_grad_norm", "min_grad_norm")
CSV_HEADER = ("n", "m", "seed") + METRICS + ("iters", "wall_ms", "status")


class InstrumentDist(Enum):
    GAUSSIAN = "gaussian"
    STUDENT_T = "student_t"


@dataclass(frozen=True)
class IvDatasetConfig:
    seed: int = 0
    n: int = 100
    m: int = 100
    instrument_dist: InstrumentDist = InstrumentDist.GAUSSIAN
    nu: float = 2.5
    p: int = 3
    d: int = 4
    noise_std: float = math.sqrt(0.025)
    truth_seed: int = 0

    def __post_init__(self):
        if not isinstance(self.instrument_dist, InstrumentDist):
            try:
                object.__setattr__(self, "instrument_dist", InstrumentDist(self.instrument_dist))
            except ValueError as exc:
                raise ConfigError(f"unknown instrument distribution {self.instrument_dist!r}") from exc
        if self.instrument_dist is InstrumentDist.STUDENT_T and not self.nu > 2:
            raise ConfigError(f"Student-t instruments need nu > 2, got {self.nu}")
        if self.n < 0 or self.m < 0:
            raise ConfigError("sample counts must be non-negative")
        if self.p < 1 or self.d < 1:
            raise ConfigError("dimensions p and d must be positive")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")


@dataclass
class IvDataset:
    inner_x: NDArray[np.float64]
    inner_t: NDArray[np.float64]
    outer_x: NDArray[np.float64]
    outer_y: NDArray[np.float64]
    omega_star: NDArray[np.float64]


def truth(config: IvDatasetConfig) -> NDArray[np.float64]:
    """Structural parameter ``omega* ~ U(0, 1)^d``, fixed by ``truth_seed``."""
    return make_rng(config.truth_seed, _TRUTH_KEY).uniform(0.0, 1.0, config.d)


def iv_pushforward(x, eps, omega_star):
    """Treatment and outcome for given instruments and noise."""
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    t = TREATMENT_SCALE * (x.sum(axis=1) + eps)
    y = iv_features(t, len(omega_star)) @ omega_star + eps
    return t, y


def _draw_instruments(rng, count, config):
    z = rng.standard_normal((count, config.p))
    if config.instrument_dist is InstrumentDist.GAUSSIAN:
        return z
    chi2 = rng.chisquare(config.nu, size=(count, config.p))
    return z / np.sqrt(chi2 / config.nu)


def _chunk(config, role, index, omega_star):
    rng = make_rng(config.seed, role, index)
    x = _draw_instruments(rng, CHUNK_SIZE, config)
    eps = config.noise_std * rng.standard_normal(CHUNK_SIZE)
    t, y = iv_pushforward(x, eps, omega_star)
    return x, t, y


def iv_stream(config: IvDatasetConfig, role: int, total: int, omega_star=None) -> Iterator[tuple]:
    """Yield ``(x, t)`` (inner roles) or ``(x, y)`` (outer roles) chunks
    covering the first ``total`` samples of the stream."""
    omega_star = truth(config) if omega_star is None else omega_star
    outer = role in (ROLE_OUTER, ROLE_ORACLE_OUTER)
    produced = 0
    index = 0
    while produced < total:
        x, t, y = _chunk(config, role, index, omega_star)
        take = min(CHUNK_SIZE, total - produced)
        yield x[:take], (y if outer else t)[:take]
        produced += take
        index += 1


def _collect(stream, p):
    parts = list(stream)
    if not parts:
        return np.empty((0, p)), np.empty(0)
    return np.concatenate([a for a, _ in parts]), np.concatenate([b for _, b in parts])


def generate_iv_data(config: IvDatasetConfig) -> IvDataset:
    """Inner pairs ``(x_i, t_i)`` and independent outer pairs ``(x~_j, y~_j)``.

    Smaller sample counts under the same seed are prefixes of larger ones.
    """
    omega_star = truth(config)
    inner_x, inner_t = _collect(iv_stream(config, ROLE_INNER, config.n, omega_star), config.p)
    outer_x, outer_y = _collect(iv_stream(config, ROLE_OUTER, config.m, omega_star), config.p)
    return IvDataset(inner_x, inner_t, outer_x, outer_y, omega_star)


def instrument_law(config: IvDatasetConfig):
    """1-d law of each instrument coordinate as a frozen scipy distribution."""
    if config.instrument_dist is InstrumentDist.GAUSSIAN:
        return stats.norm()
    return stats.t(config.nu)


def instrument_grid(config: IvDatasetConfig, bandwidth: float, tail: float = 1e-4):
    """Uniform quadrature grid for one instrument coordinate.

    Spacing is a quarter of the kernel bandwidth (the trapezoid rule is then
    accurate to round-off for Gaussian-smoothed integrands); the half-width
    leaves at most ``tail`` probability outside, capped at 1e-12 for light tails.
    """
    law = instrument_law(config)
    h = bandwidth / 4.0
    half = float(law.isf(min(tail, 1e-12) / 2 if config.instrument_dist is InstrumentDist.GAUSSIAN else tail / 2))
    k = int(math.ceil(half / h))
    if 2 * k + 1 > MAX_GRID_NODES:
        raise ConfigError(
            f"quadrature grid would need {2 * k + 1} nodes; raise the tail mass or use the RFF oracle"
        )
    nodes = h * np.arange(-k, k + 1)
    return nodes, law.pdf(nodes) * h


def derive_seed(base_seed: int, index: int) -> int:
    return int(make_rng(base_seed, _SEED_KEY, index).integers(0, 2**63 - 1))


def initial_point(base_seed: int, n: int, m: int, seed_index: int, d: int) -> NDArray[np.float64]:
    """``omega_0 ~ U(0, 1)^d``, fresh for every (grid point, seed)."""
    return make_rng(base_seed, _OMEGA0_KEY, n, m, seed_index).uniform(0.0, 1.0, d)


# ---------------------------------------------------------------- study


@dataclass(frozen=True)
class StudyConfig:
    """Everything that determines a study; see :mod:`kbo.config` for keys."""

    sigma: float = 0.2
    p: int = 3
    d: int = 4
    lam: float = 0.01
    grid: tuple = (100, 200, 400, 800, 1600)
    m_grid: tuple = ()
    seeds: int = 20
    base_seed: int = 0
    truth_seed: int = 0
    instrument_dist: str = "gaussian"
    nu: float = 2.5
    noise_std: float = math.sqrt(0.025)
    oracle_kind: str = "rff"
    oracle_samples: int = 100_000
    oracle_features: int = 2048
    oracle_block_size: int = 1000
    oracle_seed: int = 12345
    oracle_cache: str = ""
    tol: float = 1e-5
    max_iter: int = 10_000
    coercivity: float = 0.0

    def dataset(self, n: int, m: int, seed: int) -> IvDatasetConfig:
        return IvDatasetConfig(
            seed=seed, n=n, m=m, instrument_dist=self.instrument_dist, nu=self.nu,
            p=self.p, d=self.d, noise_std=self.noise_std, truth_seed=self.truth_seed,
        )

    @property
    def kernel(self) -> KernelSpec:
        return KernelSpec(bandwidth=self.sigma, input_dim=self.p)

    def __post_init__(self):
        if self.oracle_kind not in ORACLE_KINDS:
            raise ConfigError(f"oracle kind must be one of {ORACLE_KINDS}, got {self.oracle_kind!r}")
        if self.seeds < 1:
            raise ConfigError("study needs at least one seed")
        if not self.grid or min(self.grid) < 1 or (self.m_grid and min(self.m_grid) < 1):
            raise ConfigError("study grids must hold positive sample counts")
        if not (self.sigma > 0 and self.lam > 0 and self.tol > 0):
            raise ConfigError("kernel.sigma, lambda and optimizer.tol must be positive")
        if self.max_iter < 0 or self.coercivity < 0:
            raise ConfigError("optimizer.max_iter and problem.coercivity must be non-negative")
        if min(self.oracle_samples, self.oracle_features, self.oracle_block_size) < 1:
            raise ConfigError("oracle.samples, oracle.features and oracle.block_size must be positive")
        self.dataset(1, 1, 0)  # validates the data settings

    def oracle_meta(self) -> dict:
        return {
            "seed": self.oracle_seed, "sigma": self.sigma, "p": self.p, "truth_seed": self.truth_seed,
            "instrument_dist": self.instrument_dist, "nu": self.nu, "noise_std": self.noise_std,
        }


@dataclass
class StudyRow:
    n: int
    m: int
    seed: int
    val_err: float = float("nan")
    grad_err: float = float("nan")
    final_grad_norm: float = float("nan")
    min_grad_norm: float = float("nan")
    iters: int = 0
    wall_ms: float = 0.0
    status: str = ""

    def as_csv(self) -> list[str]:
        return [str(self.n), str(self.m), str(self.seed)] + [repr(float(getattr(self, k))) for k in METRICS] + [
            str(self.iters), f"{self.wall_ms:.3f}", self.status,
        ]


@dataclass
class StudyReport:
    rows: list[StudyRow]
    config: StudyConfig
    notes: list[str] = field(default_factory=list)

    def ok_rows(self) -> list[StudyRow]:
        return [r for r in self.rows if not r.status.startswith("error")]

    def write_csv(self, fh) -> None:
        for note in self.notes:
            fh.write(f"# {note}\n")
        fh.write(",".join(CSV_HEADER) + "\n")
        for row in self.rows:
            fh.write(",".join(row.as_csv()) + "\n")


def read_report_csv(fh) -> list[StudyRow]:
    rows = []
    header = None
    for line in fh:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split(",")
        if header is None:
            header = fields
            if tuple(header) != CSV_HEADER:
                raise InputError(f"unexpected report header {header}")
            continue
        rec = dict(zip(header, fields))
        rows.append(StudyRow(
            n=int(rec["n"]), m=int(rec["m"]), seed=int(rec["seed"]),
            **{k: float(rec[k]) for k in METRICS},
            iters=int(rec["iters"]), wall_ms=float(rec["wall_ms"]), status=rec["status"],
        ))
    return rows


def build_study_oracle(config: StudyConfig) -> RffOracle | QuadratureOracle:
    """Build the population oracle selected by ``config.oracle_kind``.

    ``rff``: random-feature plug-in over a large sample drawn from dedicated
    stream roles (independent of every finite-sample draw), optionally cached
    in ``config.oracle_cache``. ``quadrature``: the exact population objective
    of the synthetic model, computed deterministically.
    """
    if config.oracle_kind == "quadrature":
        data_cfg = config.dataset(1, 1, 0)
        nodes, weights = instrument_grid(data_cfg, config.sigma)
        return build_quadrature_oracle(
            config.sigma, config.lam, nodes, weights, config.p, truth(data_cfg),
            config.noise_std**2, scale=TREATMENT_SCALE,
        )
    meta = config.oracle_meta()
    if config.oracle_cache and os.path.exists(config.oracle_cache):
        oracle, header = load_oracle(config.oracle_cache)
        expected = {"D": config.oracle_features, "d": config.d, "lam": config.lam,
                    "n": config.oracle_samples, "m": config.oracle_samples, **meta}
        if all(header.get(k) == v for k, v in expected.items()):
            log.info("loaded oracle snapshot %s", config.oracle_cache)
            return oracle
        log.warning("oracle snapshot %s does not match the configuration; rebuilding", config.oracle_cache)
    data_cfg = config.dataset(config.oracle_samples, config.oracle_samples, config.oracle_seed)
    omega_star = truth(data_cfg)
    rff = sample_rff(config.kernel, config.oracle_features, config.oracle_seed)
    t0 = time.perf_counter()
    oracle = build_oracle(
        rff,
        iv_stream(data_cfg, ROLE_ORACLE_INNER, config.oracle_samples, omega_star),
        iv_stream(data_cfg, ROLE_ORACLE_OUTER, config.oracle_samples, omega_star),
        lam=config.lam, d=config.d, block_size=config.oracle_block_size,
    )
    log.info("built oracle D=%d N=%d in %.1fs", config.oracle_features, config.oracle_samples,
             time.perf_counter() - t0)
    if config.oracle_cache:
        save_oracle(config.oracle_cache, oracle, **meta)
    return oracle


def run_cell(config: StudyConfig, oracle, n: int, m: int, seed_index: int, observer=None) -> StudyRow:
    """One (n, m, seed) run: estimation errors at omega_0, then gradient
    descent on the empirical objective, scored with the oracle gradient.

    ``observer(row, trajectory)`` is called after a successful descent.
    """
    row = StudyRow(n=n, m=m, seed=seed_index)
    t0 = time.perf_counter()
    try:
        data = generate_iv_data(config.dataset(n, m, derive_seed(config.base_seed, seed_index)))
        model = IvPluginQuadratic.from_samples(
            config.kernel, data.inner_x, iv_features(data.inner_t, config.d),
            data.outer_x, data.outer_y, config.lam, config.coercivity,
        )
        c = config.coercivity
        omega0 = initial_point(config.base_seed, n, m, seed_index, config.d)
        # the coercive term is exact on both sides, so it cancels in the errors
        row.val_err = abs(oracle.value(omega0) + c * float(omega0 @ omega0) - model.value(omega0))
        row.grad_err = float(np.linalg.norm(oracle.grad(omega0) + 2 * c * omega0 - model.grad(omega0)))
        traj = gd_run(omega0, model.grad, model.value, tol=config.tol, max_iter=config.max_iter,
                      ls=LineSearchParams())
        pop_norms = [float(np.linalg.norm(oracle.grad(w) + 2 * c * w)) for w in traj.iterates]
        row.final_grad_norm = pop_norms[-1]
        row.min_grad_norm = min(pop_norms)
        row.iters = traj.iterations
        row.status = traj.termination.value
        if observer is not None:
            observer(row, traj)
    except Exception as exc:  # recorded per row; the study continues
        log.warning("run n=%d m=%d seed=%d failed: %s", n, m, seed_index, exc)
        row.status = f"error:{type(exc).__name__}"
    row.wall_ms = 1000.0 * (time.perf_counter() - t0)
    return row


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get("KBO_THREADS", "1")))
    except ValueError:
        return 1


def run_generalization_study(
    config: StudyConfig,
    oracle=None,
    pairs: Sequence[tuple[int, int]] | None = None,
    observer=None,
) -> StudyReport:
    """Run every (n, m) pair for ``config.seeds`` seeds.

    ``pairs`` defaults to ``m = n`` over ``config.grid``. Rows come back in
    (n, m, seed) order whatever the completion order.
    """
    if oracle is None:
        oracle = build_study_oracle(config)
    if pairs is None:
        pairs = [(n, n) for n in config.grid]
    tasks = [(n, m, s) for n, m in pairs for s in range(config.seeds)]
    workers = _thread_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda t: run_cell(config, oracle, *t, observer=observer), tasks))
    else:
        rows = [run_cell(config, oracle, *t, observer=observer) for t in tasks]
    rows.sort(key=lambda r: (r.n, r.m, r.seed))
    notes = [
        "kbo generalization study",
        f"truth_seed={config.truth_seed} base_seed={config.base_seed} seeds={config.seeds} "
        f"oracle_kind={config.oracle_kind} oracle_seed={config.oracle_seed} "
        f"oracle_samples={config.oracle_samples} oracle_features={config.oracle_features} "
        f"sigma={config.sigma} lambda={config.lam} instrument_dist={config.instrument_dist} nu={config.nu} "
        f"noise_std={config.noise_std!r} tol={config.tol} max_iter={config.max_iter}",
        "omega* and the oracle sample are fixed across runs; each seed draws a fresh omega_0 "
        "and fresh finite-sample indices",
    ]
    return StudyReport(rows=rows, config=config, notes=notes)


def heatmap_pairs(config: StudyConfig) -> list[tuple[int, int]]:
    m_grid = config.m_grid or config.grid
    return [(n, m) for n in config.grid for m in m_grid]


def iv_instance(config: StudyConfig, n: int, m: int, seed: int, closed_form: bool = True):
    """A single empirical IV problem on the general bilevel machinery.

    Returns ``(problem, dataset)``. With ``closed_form=False`` the inner
    problem goes through damped Newton instead of the Cholesky solve.
    """
    data = generate_iv_data(config.dataset(n, m, seed))
    spec = IvProblem(d=config.d, p=config.p, omega_star=data.omega_star,
                     noise_std=config.noise_std, coercivity=config.coercivity)
    features = spec.feature_map(data.inner_t)
    problem = BilevelProblem(
        gram=GramSet.from_points(config.kernel, data.inner_x, data.outer_x),
        inner_bundle=spec.inner_loss(),
        inner_targets=data.inner_t,
        outer_bundle=spec.outer_loss(),
        outer_targets=data.outer_y,
        lam=config.lam,
        features=features if closed_form else None,
    )
    return problem, data


# ---------------------------------------------------------------- analysis


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    stderr: float

    def interval(self, z: float = 1.96) -> tuple[float, float]:
        return self.slope - z * self.stderr, self.slope + z * self.stderr


def fit_slope(points: Sequence[tuple[float, float]]) -> SlopeFit:
    """Ordinary least squares on ``(log n, log error)`` pairs."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise InputError("fit_slope needs at least 3 (x, y) points")
    if not np.all(np.isfinite(pts)):
        raise InputError("fit_slope points must be finite")
    if len(np.unique(pts[:, 0])) < 2:
        raise InputError("fit_slope needs distinct abscissae")
    res = stats.linregress(pts[:, 0], pts[:, 1])
    return SlopeFit(float(res.slope), float(res.intercept), float(res.stderr))


@dataclass(frozen=True)
class CellSummary:
    n: int
    m: int
    count: int
    mean: float
    lo: float
    hi: float


def aggregate(rows: Sequence[StudyRow], metric: str) -> dict[tuple[int, int], CellSummary]:
    """Mean and 95% interval (mean +/- 1.96 standard errors) per (n, m)."""
    if metric not in METRICS:
        raise InputError(f"unknown metric {metric!r}; choose from {METRICS}")
    groups: dict[tuple[int, int], list[float]] = {}
    for r in rows:
        if r.status.startswith("error"):
            continue
        groups.setdefault((r.n, r.m), []).append(getattr(r, metric))
    out = {}
    for key, vals in sorted(groups.items()):
        arr = np.asarray(vals)
        se = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
        mean = float(arr.mean())
        out[key] = CellSummary(key[0], key[1], len(arr), mean, mean - 1.96 * se, mean + 1.96 * se)
    return out


def metric_slope(rows: Sequence[StudyRow], metric: str) -> SlopeFit:
    """Slope of log mean error against log n over the ``m = n`` cells."""
    cells = aggregate([r for r in rows if r.n == r.m], metric)
    return fit_slope([(math.log(c.n), math.log(c.mean)) for c in cells.values()])


def diagonal_fraction(rows: Sequence[StudyRow], metric: str) -> tuple[float, list[tuple[int, int]]]:
    """Share of grid anti-diagonals whose lowest mean error sits on or next to
    the ``n = m`` diagonal.

    Anti-diagonals are taken in grid-index space (``i + j`` constant); on an
    evenly spaced grid these are the fixed budgets ``n + m``, on a geometric
    grid the fixed budgets ``n * m``. Returns the fraction and the index pair
    of each anti-diagonal's minimizer.
    """
    cells = aggregate(rows, metric)
    ns = sorted({k[0] for k in cells})
    ms = sorted({k[1] for k in cells})
    if ns != ms:
        raise InputError("diagonal check needs a square grid with identical n and m values")
    k = len(ns)
    winners = []
    for s in range(2 * k - 1):
        diag = [(i, s - i) for i in range(k) if 0 <= s - i < k and (ns[i], ms[s - i]) in cells]
        if not diag:
            continue
        winners.append(min(diag, key=lambda ij: cells[(ns[ij[0]], ms[ij[1]])].mean))
    hits = sum(abs(i - j) <= 1 for i, j in winners)
    return hits / len(winners), winners


def with_overrides(config: StudyConfig, **kw) -> StudyConfig:
    return replace(config, **kw)
