import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kbo import ConstraintSet, InputError, LineSearchParams, gd_run, gradient_mapping, project, projected_gd_run
from kbo._rng import make_rng
from kbo.optimizer import Termination

from conftest import iv_instance


def test_projection_examples():
    ball = ConstraintSet.ball(np.zeros(3), 1.0)
    x = np.array([0.1, -0.2, 0.3])
    assert np.array_equal(project(ball, x), x)
    assert np.allclose(project(ball, np.array([0.0, 2.0, 0.0])), [0.0, 1.0, 0.0])
    y = np.array([1.2, -1.6, 0.0])  # norm 2
    assert np.allclose(project(ball, y), y / 2)
    box = ConstraintSet.box(np.zeros(4), np.ones(4))
    assert np.array_equal(project(box, [-1.0, 0.5, 3.0, 1.0]), [0.0, 0.5, 1.0, 1.0])
    free = ConstraintSet.unconstrained()
    assert np.array_equal(project(free, x), x)


def test_invalid_sets():
    with pytest.raises(InputError):
        ConstraintSet.ball(np.zeros(2), 0.0)
    with pytest.raises(InputError):
        ConstraintSet.box([1.0, 0.0], [0.0, 1.0])


@given(seed=st.integers(0, 10_000), d=st.integers(1, 6), scale=st.floats(0.01, 100.0))
def test_projection_idempotent_and_feasible(seed, d, scale):
    rng = make_rng(seed)
    x = scale * rng.standard_normal(d)
    for cset in (
        ConstraintSet.ball(rng.standard_normal(d), rng.uniform(0.1, 2)),
        ConstraintSet.box(-rng.uniform(0, 1, d), rng.uniform(0, 1, d)),
    ):
        p = project(cset, x)
        assert cset.contains(p)
        assert np.array_equal(project(cset, p), p)


def test_gradient_mapping_examples():
    g = np.array([0.3, -0.4])
    assert np.array_equal(gradient_mapping(ConstraintSet.unconstrained(), np.zeros(2), g, 7.0), g)
    ball = ConstraintSet.ball(np.zeros(2), 10.0)
    assert np.array_equal(gradient_mapping(ball, np.ones(2), g, 0.1), g)
    with pytest.raises(InputError):
        gradient_mapping(ball, np.ones(2), g, 0.0)


def test_gradient_mapping_on_boundary_matches_definition():
    ball = ConstraintSet.ball(np.zeros(2), 1.0)
    omega = np.array([1.0, 0.0])
    grad = np.array([-2.0, 1.0])  # points outward along -grad
    eta = 0.5
    step = omega - eta * grad  # (2, -0.5)
    expected = (omega - step / np.linalg.norm(step)) / eta
    assert np.allclose(gradient_mapping(ball, omega, grad, eta), expected, atol=1e-15)
    # a pure outward gradient at the boundary is a fixed point
    assert np.allclose(gradient_mapping(ball, omega, np.array([-1.0, 0.0]), eta), 0.0, atol=1e-15)


def _quad(Hdiag, center):
    H = np.asarray(Hdiag)

    def value(w):
        r = w - center
        return 0.5 * float(r @ (H * r))

    def grad(w):
        return H * (w - center)

    return value, grad


def test_optimal_start_takes_no_steps():
    value, grad = _quad([1.0, 2.0], np.array([0.5, 0.5]))
    traj = gd_run(np.array([0.5, 0.5]), grad, value)
    assert traj.iterations == 0
    assert traj.termination is Termination.TOLERANCE


def test_iv_instance_converges_monotonically():
    for seed in range(5):
        problem, omega0 = iv_instance(seed, 40, 30)
        traj = gd_run(omega0, problem.grad, problem.value, tol=1e-5)
        assert traj.termination is Termination.TOLERANCE
        assert traj.grad_norms[-1] <= 1e-5
        vals = np.asarray(traj.values)
        assert np.all(np.diff(vals) <= 1e-14)
        assert np.all(np.diff(traj.running_min()) <= 0)


def test_projected_unconstrained_reproduces_gd_exactly():
    problem, omega0 = iv_instance(11, 30, 25)
    a = gd_run(omega0, problem.grad, problem.value)
    b = projected_gd_run(omega0, ConstraintSet.unconstrained(), problem.grad, problem.value)
    assert a.iterations == b.iterations
    assert all(np.array_equal(x, y) for x, y in zip(a.iterates, b.iterates))
    assert a.values == b.values and a.step_sizes == b.step_sizes and a.grad_norms == b.grad_norms


def test_ball_containing_optimum_gives_same_limit():
    problem, omega0 = iv_instance(12, 30, 25)
    free = gd_run(omega0, problem.grad, problem.value, tol=1e-7)
    ball = ConstraintSet.ball(free.final + 0.3, np.linalg.norm(free.final - omega0) + 1.0)
    cons = projected_gd_run(omega0, ball, problem.grad, problem.value, tol=1e-7)
    assert cons.termination is Termination.TOLERANCE
    assert np.linalg.norm(cons.final - free.final) <= 1e-6


def test_ball_excluding_optimum_ends_on_boundary():
    value, grad = _quad([1.0, 3.0, 0.5], np.array([3.0, 3.0, 3.0]))
    ball = ConstraintSet.ball(np.zeros(3), 1.0)
    traj = projected_gd_run(np.zeros(3), ball, grad, value, tol=1e-8)
    assert traj.termination is Termination.TOLERANCE
    assert np.linalg.norm(traj.final) == pytest.approx(1.0, abs=1e-12)
    assert all(ball.contains(w) for w in traj.iterates)
    assert np.all(np.diff(traj.values) <= 1e-14)


def test_start_outside_set_rejected():
    value, grad = _quad([1.0], np.array([0.0]))
    with pytest.raises(InputError):
        projected_gd_run(np.array([5.0]), ConstraintSet.ball([0.0], 1.0), grad, value)


def test_running_min_rate_bounded():
    problem, omega0 = iv_instance(21, 60, 40)
    traj = gd_run(omega0, problem.grad, problem.value, tol=0.0, max_iter=200)
    s = traj.running_min()
    # with tol = 0 the run may stop early at the floating-point floor
    t = np.arange(1, len(s))
    assert len(t) >= 100
    scaled = s[t] * np.sqrt(t + 1)
    half = len(t) // 2
    assert np.all(np.isfinite(scaled))
    assert scaled[half:].max() <= scaled[:half].max()


def test_line_search_failure_is_reported():
    # the gradient points uphill, so no step can satisfy Armijo
    value, grad = _quad([1.0], np.array([0.0]))
    traj = gd_run(np.array([1.0]), lambda w: -grad(w), value, ls=LineSearchParams(max_halvings=5))
    assert traj.termination is Termination.LINE_SEARCH_FAILURE
    assert traj.iterations == 0


def test_max_iter_termination():
    value, grad = _quad([1.0, 1e-4], np.zeros(2))
    traj = gd_run(np.ones(2), grad, value, tol=1e-12, max_iter=3)
    assert traj.termination is Termination.MAX_ITER
    assert traj.iterations == 3


def test_trajectory_csv():
    value, grad = _quad([1.0, 2.0], np.zeros(2))
    traj = gd_run(np.ones(2), grad, value)
    buf = io.StringIO()
    traj.write_csv(buf)
    lines = buf.getvalue().strip().splitlines()
    assert lines[0] == "iter,f_value,grad_norm,step_size"
    assert len(lines) == traj.iterations + 2
    assert lines[-1].endswith(",")
