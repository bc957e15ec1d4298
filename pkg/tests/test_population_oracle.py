import json

import numpy as np
import pytest

from kbo import InputError, IvPluginQuadratic, KernelSpec, build_oracle, build_quadrature_oracle, gram, sample_rff
from kbo._rng import make_rng
from kbo.experiments import (
    ROLE_INNER,
    ROLE_OUTER,
    IvDatasetConfig,
    generate_iv_data,
    instrument_grid,
    iv_pushforward,
    iv_stream,
    truth,
)
from kbo.losses import iv_features
from kbo.population_oracle import load_oracle, oracle_grad, oracle_value, save_oracle


def _streams(cfg, omega_star, chunk):
    data = generate_iv_data(cfg)

    def cut(a, b):
        return [(a[i:i + chunk], b[i:i + chunk]) for i in range(0, len(a), chunk)]

    return cut(data.inner_x, data.inner_t), cut(data.outer_x, data.outer_y), data


class ExactFeatures:
    """Finite feature map that reproduces the kernel exactly on a point set S:
    ``psi(x) = Lambda^{-1/2} V^T k_S(x)`` with ``K_SS = V Lambda V^T``."""

    def __init__(self, spec, S):
        self.spec, self.S = spec, S
        lam, V = np.linalg.eigh(gram(spec, S))
        assert lam.min() > 1e-8
        self.P = V / np.sqrt(lam)
        self.D = len(lam)

    def __call__(self, x):
        return gram(self.spec, x, self.S) @ self.P


def test_exact_features_reproduce_empirical_objective():
    cfg = IvDatasetConfig(seed=3, n=60, m=40)
    data = generate_iv_data(cfg)
    spec = KernelSpec(bandwidth=0.5, input_dim=3)
    lam = 0.05
    fmap = ExactFeatures(spec, np.vstack([data.inner_x, data.outer_x]))
    oracle = build_oracle(fmap, [(data.inner_x, data.inner_t)], [(data.outer_x, data.outer_y)], lam, 4)
    model = IvPluginQuadratic.from_samples(spec, data.inner_x, iv_features(data.inner_t, 4),
                                           data.outer_x, data.outer_y, lam)
    for omega in make_rng(1).uniform(0, 1, (5, 4)):
        assert oracle_value(oracle, omega) == pytest.approx(model.value(omega), rel=1e-8)
        assert np.allclose(oracle_grad(oracle, omega), model.grad(omega), rtol=1e-7, atol=1e-10)


@pytest.mark.parametrize("block", [1, 7, 100, 300])
def test_block_size_invariance(block):
    cfg = IvDatasetConfig(seed=5, n=300, m=300)
    rff = sample_rff(KernelSpec(), 64, 2)
    inner, outer, _ = _streams(cfg, truth(cfg), 300)
    ref = build_oracle(rff, inner, outer, 0.01, 4, block_size=300)
    # re-chunk the stream too, so both chunking and blocking vary
    inner2, outer2, _ = _streams(cfg, truth(cfg), 37)
    other = build_oracle(rff, inner2, outer2, 0.01, 4, block_size=block)
    for omega in make_rng(2).uniform(0, 1, (5, 4)):
        v0, v1 = ref.value(omega), other.value(omega)
        assert abs(v0 - v1) <= 1e-10 * abs(v0)
        g0, g1 = ref.grad(omega), other.grad(omega)
        assert np.linalg.norm(g0 - g1) <= 1e-10 * np.linalg.norm(g0)


def test_value_at_zero_and_argmin():
    cfg = IvDatasetConfig(seed=6, n=200, m=150)
    inner, outer, data = _streams(cfg, truth(cfg), 64)
    oracle = build_oracle(sample_rff(KernelSpec(), 128, 3), inner, outer, 0.01, 4)
    assert oracle.value(np.zeros(4)) == pytest.approx(data.outer_y @ data.outer_y / 300, rel=1e-12)
    assert oracle.n_total == 200 and oracle.m_total == 150
    w = oracle.argmin()
    assert np.linalg.norm(oracle.grad(w)) <= 1e-10 * (1 + np.linalg.norm(oracle.grad(np.zeros(4))))


def test_gradient_is_derivative_of_value():
    cfg = IvDatasetConfig(seed=7, n=250, m=250)
    inner, outer, _ = _streams(cfg, truth(cfg), 100)
    oracle = build_oracle(sample_rff(KernelSpec(), 256, 4), inner, outer, 0.01, 4)
    h = 1e-4
    for omega in make_rng(3).uniform(0, 1, (10, 4)):
        fd = np.array([(oracle.value(omega + h * e) - oracle.value(omega - h * e)) / (2 * h) for e in np.eye(4)])
        g = oracle.grad(omega)
        assert np.linalg.norm(fd - g) / np.linalg.norm(g) <= 1e-7


def test_empty_inner_stream():
    rng = make_rng(8)
    x, y = rng.standard_normal((20, 3)), rng.standard_normal(20)
    oracle = build_oracle(sample_rff(KernelSpec(), 32, 5), [], [(x, y)], 0.1, 4)
    assert np.array_equal(oracle.J, np.zeros((32, 4)))
    for omega in rng.uniform(0, 1, (3, 4)):
        assert oracle.value(omega) == pytest.approx(y @ y / 40)
        assert np.array_equal(oracle.grad(omega), np.zeros(4))


def test_bad_parameters():
    rff = sample_rff(KernelSpec(), 8, 1)
    with pytest.raises(InputError):
        build_oracle(rff, [], [], 0.1, 4, block_size=0)
    with pytest.raises(InputError):
        build_oracle(rff, [], [], 0.0, 4)
    with pytest.raises(InputError):
        build_oracle(lambda x: x, [], [], 0.1, 4)


def test_snapshot_round_trip(tmp_path):
    cfg = IvDatasetConfig(seed=9, n=100, m=100)
    inner, outer, _ = _streams(cfg, truth(cfg), 50)
    oracle = build_oracle(sample_rff(KernelSpec(), 48, 6), inner, outer, 0.02, 4, block_size=25)
    path = tmp_path / "oracle.npz"
    save_oracle(path, oracle, seed=6, sigma=0.2)
    loaded, header = load_oracle(path)
    assert header["seed"] == 6 and header["D"] == 48 and header["block_size"] == 25
    omega = np.array([0.1, 0.2, 0.3, 0.4])
    assert loaded.value(omega) == oracle.value(omega)
    assert np.array_equal(loaded.grad(omega), oracle.grad(omega))


def test_snapshot_version_checked(tmp_path):
    oracle = build_oracle(sample_rff(KernelSpec(), 4, 6), [], [(np.zeros((2, 3)), np.zeros(2))], 0.1, 2)
    path = tmp_path / "oracle.npz"
    save_oracle(path, oracle)
    with np.load(path) as data:
        arrays = dict(data)
    header = json.loads(str(arrays["header"]))
    header["version"] = 99
    arrays["header"] = np.array(json.dumps(header))
    np.savez(path, **arrays)
    with pytest.raises(InputError):
        load_oracle(path)


def rff_error_trend(seeds: int, n: int = 100, features=(256, 1024, 4096)):
    """Median over RFF draws of the mean oracle-gradient error against the
    exact-kernel objective on the same data, per feature count D."""
    spec, lam = KernelSpec(), 0.01
    data = generate_iv_data(IvDatasetConfig(seed=10, n=n, m=n))
    model = IvPluginQuadratic.from_samples(spec, data.inner_x, iv_features(data.inner_t, 4),
                                           data.outer_x, data.outer_y, lam)
    probes = make_rng(0).uniform(0, 1, (10, 4))
    out = {}
    for D in features:
        errs = []
        for seed in range(seeds):
            oracle = build_oracle(sample_rff(spec, D, seed), [(data.inner_x, data.inner_t)],
                                  [(data.outer_x, data.outer_y)], lam, 4)
            errs.append(np.mean([np.linalg.norm(oracle.grad(w) - model.grad(w)) for w in probes]))
        out[D] = float(np.median(errs))
    return out


def test_rff_error_decreases_with_features():
    err = rff_error_trend(6)
    assert err[256] > err[1024] > err[4096]


# --------------------------------------------------------------- quadrature


def _quad_oracle(cfg, sigma=0.2, lam=0.01, spacing=None):
    nodes, weights = instrument_grid(cfg, sigma)
    if spacing is not None:
        half = nodes[-1]
        k = int(np.ceil(half / spacing))
        nodes = spacing * np.arange(-k, k + 1)
        weights = np.exp(-nodes**2 / 2) / np.sqrt(2 * np.pi) * spacing
    return build_quadrature_oracle(sigma, lam, nodes, weights, cfg.p, truth(cfg), cfg.noise_std**2)


def test_quadrature_grid_converged():
    cfg = IvDatasetConfig()
    a = _quad_oracle(cfg)
    b = _quad_oracle(cfg, spacing=0.2 / 6)
    assert np.max(np.abs(a.Q - b.Q)) <= 1e-10
    assert np.max(np.abs(a.r - b.r)) <= 1e-10
    assert a.const == pytest.approx(b.const, abs=1e-12)
    assert a.truncated_mass < 1e-11


def test_quadrature_constant_matches_monte_carlo():
    cfg = IvDatasetConfig()
    oracle = _quad_oracle(cfg)
    w = truth(cfg)
    rng = make_rng(77)
    x = rng.standard_normal((400_000, 3))
    eps = cfg.noise_std * rng.standard_normal(400_000)
    _, y = iv_pushforward(x, eps, w)
    y2 = y**2
    se = y2.std() / np.sqrt(len(y2))
    assert abs(2 * oracle.const - y2.mean()) <= 4 * se


def test_quadrature_matches_large_sample_objective():
    cfg0 = IvDatasetConfig()
    oracle = _quad_oracle(cfg0)
    omega = np.full(4, 0.5)
    vals, grads = [], []
    for seed in range(3):
        data = generate_iv_data(IvDatasetConfig(seed=100 + seed, n=2500, m=2500))
        model = IvPluginQuadratic.from_samples(KernelSpec(), data.inner_x, iv_features(data.inner_t, 4),
                                               data.outer_x, data.outer_y, 0.01)
        vals.append(model.value(omega))
        grads.append(model.grad(omega))
    assert abs(np.mean(vals) - oracle.value(omega)) <= 0.01
    assert np.linalg.norm(np.mean(grads, axis=0) - oracle.grad(omega)) <= 0.03


def test_quadrature_objective_is_convex_quadratic():
    oracle = _quad_oracle(IvDatasetConfig(truth_seed=2))
    assert np.linalg.eigvalsh(oracle.Q).min() >= -1e-12
    w = oracle.argmin()
    assert np.linalg.norm(oracle.grad(w)) <= 1e-10
    assert oracle.value(w) >= 0


def test_quadrature_rejects_bad_grid():
    with pytest.raises(InputError):
        build_quadrature_oracle(0.2, 0.01, [0.0, 1.0], [1.0], 3, np.ones(4), 0.025)
    with pytest.raises(InputError):
        build_quadrature_oracle(0.2, 0.0, [0.0], [1.0], 3, np.ones(4), 0.025)
