import numpy as np
import pytest

from kbo import HyperShiftProblem, IvProblem, NumericInputError, loss_bundle_eval
from kbo._rng import make_rng
from kbo.errors import InputError
from kbo.losses import IvInnerLoss, SquaredOuterLoss, WeightedSquaredInnerLoss, iv_features

BUNDLES = [
    ("iv_inner", IvInnerLoss(4), lambda r: r.uniform(-3, 3)),
    ("iv_outer", SquaredOuterLoss(4), lambda r: r.standard_normal()),
    ("iv_outer_coercive", SquaredOuterLoss(4, coercivity=0.3), lambda r: r.standard_normal()),
    ("hyper_shift_inner", WeightedSquaredInnerLoss(), lambda r: r.standard_normal()),
    ("hyper_shift_outer", SquaredOuterLoss(1), lambda r: r.standard_normal()),
]


def _fd(f, x, h):
    return (f(x + h) - f(x - h)) / (2 * h)


def _rel(a, b):
    return np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b)))


@pytest.mark.parametrize("name,bundle,draw_y", BUNDLES, ids=[b[0] for b in BUNDLES])
def test_derivatives_match_finite_differences(name, bundle, draw_y):
    rng = make_rng(11, len(name))
    h = 1e-5
    for _ in range(100):
        omega = rng.uniform(0.2, 2.0, bundle.dim)
        v, y = rng.standard_normal(), draw_y(rng)
        rec = loss_bundle_eval(bundle, omega, v, y)

        def val(w, vv):
            return bundle.value(w, np.array([vv]), np.array([y]))[0]

        fd_v = _fd(lambda vv: val(omega, vv), v, h)
        fd_vv = _fd(lambda vv: bundle.d_v(omega, np.array([vv]), np.array([y]))[0], v, h)
        fd_w = np.array([_fd(lambda s: val(omega + s * e, v), 0.0, h) for e in np.eye(bundle.dim)])
        fd_wv = np.array(
            [_fd(lambda s: bundle.d_v(omega + s * e, np.array([v]), np.array([y]))[0], 0.0, h) for e in np.eye(bundle.dim)]
        )
        assert _rel(rec.d_v[0], fd_v) <= 1e-6
        assert _rel(rec.d_vv[0], fd_vv) <= 1e-6
        assert _rel(rec.d_omega[0], fd_w) <= 1e-6
        assert _rel(rec.d_omega_v[0], fd_wv) <= 1e-6
        if bundle.convex_in_v:
            assert rec.d_vv[0] >= 0


def test_iv_inner_minimum():
    bundle = IvInnerLoss(4)
    omega, t = np.array([0.2, 0.4, 0.6, 0.8]), 0.7
    v = omega @ iv_features([t], 4)[0]
    rec = loss_bundle_eval(bundle, omega, v, t)
    assert rec.value[0] == pytest.approx(0.0, abs=1e-16)
    assert rec.d_v[0] == pytest.approx(0.0, abs=1e-16)


def test_iv_inner_constant_slots():
    rng = make_rng(5)
    bundle = IvInnerLoss(4)
    t = rng.uniform(-5, 5, 30)
    rec = loss_bundle_eval(bundle, rng.uniform(0, 1, 4), rng.standard_normal(30), t)
    assert np.all(rec.d_vv == 1.0)
    assert np.array_equal(rec.d_omega_v, -iv_features(t, 4))


def test_iv_outer_has_no_omega_dependence():
    rng = make_rng(6)
    rec = loss_bundle_eval(SquaredOuterLoss(4), rng.uniform(0, 1, 4), rng.standard_normal(9), rng.standard_normal(9))
    assert np.array_equal(rec.d_omega, np.zeros((9, 4)))
    assert np.array_equal(rec.d_omega_v, np.zeros((9, 4)))


def test_features_bounded():
    t = np.linspace(-50, 50, 1001)
    assert np.max(np.abs(iv_features(t, 6))) <= 1.0


def test_hyper_shift_inner_linear_in_omega():
    bundle = WeightedSquaredInnerLoss()
    v, y = np.array([0.3, -1.0]), np.array([1.0, 0.5])
    assert np.allclose(bundle.value(np.array([3.0]), v, y), 3 * bundle.value(np.array([1.0]), v, y))


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_inputs_rejected(bad):
    bundle = IvInnerLoss(2)
    with pytest.raises(NumericInputError):
        loss_bundle_eval(bundle, [bad, 0.0], 0.0, 0.0)
    with pytest.raises(NumericInputError):
        loss_bundle_eval(bundle, [0.0, 0.0], bad, 0.0)
    with pytest.raises(NumericInputError):
        loss_bundle_eval(bundle, [0.0, 0.0], 0.0, bad)


def test_shape_errors():
    with pytest.raises(InputError):
        loss_bundle_eval(IvInnerLoss(2), [0.0, 0.0, 0.0], 0.0, 0.0)
    with pytest.raises(InputError):
        loss_bundle_eval(IvInnerLoss(2), [0.0, 0.0], [0.0, 1.0], [0.0])


def test_problem_defaults():
    prob = IvProblem()
    assert (prob.p, prob.d) == (3, 4)
    assert prob.noise_std**2 == pytest.approx(0.025)
    hs = HyperShiftProblem()
    x, y = hs.sample_train(5, 1)
    assert x.shape == (5, hs.p) and y.shape == (5,)
    assert np.array_equal(hs.sample_test(5, 1)[0], hs.sample_test(5, 1)[0])
