"""Simulation tests: closed forms, Newton oracles, trapezoidal properties."""

import math

import numpy as np
import pytest

from obsyn.models import ObserverModel, SystemModel, fan_system, observer_variables
from obsyn.simulate import (
    SimulationError,
    explicit_ct_rhs,
    implicit_step,
    rk4_step,
    sampled_data_observer,
    simulate_observer_ct,
    simulate_observer_dt,
    simulate_true,
)
from obsyn.poly import ParamPolynomial


def scalar_observer(e_expr, f_expr, P=1.0, kind="ct1", h=None):
    names = observer_variables(1, 0, 1)
    xh = ParamPolynomial.variable(names, 0)
    y = ParamPolynomial.variable(names, 1)
    return ObserverModel.from_parts(kind, "l2", (1, 0, 1), [e_expr(xh, y)], [f_expr(xh, y)],
                                    [[P]], h=h)


def test_exponential_decay_closed_form():
    sys = SystemModel.linear("ct", [[-1.0]], C=[[1.0]])
    traj = simulate_true(sys, [1.0], T=1.0, step=0.01)
    assert traj.x[-1, 0] == pytest.approx(math.exp(-1.0), abs=1e-6)


def test_fan_trajectory_settles():
    # the (x2, x3) subsystem reaches a finite equilibrium while x1 integrates
    # x2; the trajectory stays finite and the driven states settle
    sys = fan_system()
    traj = simulate_true(sys, [-3.0, 4.0, 1.0], T=5.0, step=0.1)
    assert np.all(np.isfinite(traj.x))
    assert np.linalg.norm(traj.x[-1, 1:] - traj.x[-2, 1:]) < 1e-3
    assert np.linalg.norm(traj.x[-1, 1:]) < np.linalg.norm(traj.x[0, 1:])


def test_zero_noise_output_exact():
    sys = fan_system()
    traj = simulate_true(sys, [1.0, 0.5, -0.5], T=1.0, step=0.1, noise=False)
    np.testing.assert_allclose(traj.y[:, 0], traj.x[:, 0], atol=1e-14)


def test_dt_recursion_exact():
    sys = SystemModel.linear("dt", [[0.5]], C=[[1.0]])
    traj = simulate_true(sys, [1.0], T=3, step=1.0)
    np.testing.assert_allclose(traj.x[:, 0], [1.0, 0.5, 0.25, 0.125], atol=1e-15)


def test_divergence_reported_with_index():
    sys = SystemModel.linear("dt", [[1e6]], C=[[1.0]])
    with pytest.raises(SimulationError) as exc:
        simulate_true(sys, [1e300], T=10, step=1.0)
    assert exc.value.first_bad_index is not None


def test_explicit_rhs_linear():
    obs = scalar_observer(lambda xh, y: xh * 2.0, lambda xh, y: -xh, P=2.0)
    assert explicit_ct_rhs(obs, [1.0])[0] == pytest.approx(-0.5)


def test_explicit_rhs_cubic_hand_value():
    obs = scalar_observer(lambda xh, y: xh * 0.1 + xh * xh * xh, lambda xh, y: -xh - xh * xh * xh)
    got = explicit_ct_rhs(obs, [0.5])[0]
    assert got == pytest.approx(-0.625 / 0.85, rel=1e-12)


def test_explicit_rhs_residual_random():
    rng = np.random.default_rng(5)
    obs = scalar_observer(lambda xh, y: xh * 0.1 + xh * xh * xh, lambda xh, y: -xh - xh * xh * xh)
    for _ in range(100):
        xh = rng.uniform(-3, 3, size=1)
        rhs = explicit_ct_rhs(obs, xh)
        resid = obs.E_at(xh) @ rhs - obs.f_at(xh)
        assert abs(resid[0]) <= 1e-10


def test_implicit_step_identity():
    obs = scalar_observer(lambda xh, y: xh, lambda xh, y: xh * 0.5)
    assert implicit_step(obs, [0.3], [0.77])[0] == pytest.approx(0.77)


def test_implicit_step_cubic_hand_root():
    obs = scalar_observer(lambda xh, y: xh * 0.1 + xh * xh * xh, lambda xh, y: -xh)
    assert implicit_step(obs, [0.2], [1.1])[0] == pytest.approx(1.0, abs=1e-9)


def test_implicit_step_matches_bisection_oracle():
    rng = np.random.default_rng(9)
    for _ in range(10):
        a, b = rng.uniform(0.05, 2.0), rng.uniform(0.1, 2.0)
        obs = scalar_observer(lambda xh, y, a=a, b=b: xh * a + xh * xh * xh * b,
                              lambda xh, y: -xh)
        target = rng.uniform(-3, 3)
        got = implicit_step(obs, [0.0], [target])[0]
        lo, hi = -20.0, 20.0
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if a * mid + b * mid**3 < target:
                lo = mid
            else:
                hi = mid
        assert got == pytest.approx(0.5 * (lo + hi), abs=1e-8)


def test_sampled_data_linear_matrix_solve_oracle():
    # linear e = P xh, f = Af xh + B y: step is a closed-form matrix solve
    rng = np.random.default_rng(4)
    n = 2
    P = np.array([[2.0, 0.3], [0.3, 1.5]])
    Af = np.array([[-1.0, 0.4], [0.0, -2.0]])
    B = np.array([[0.5], [1.0]])
    names = observer_variables(n, 0, 1)
    xs = [ParamPolynomial.variable(names, i) for i in range(n)]
    yv = ParamPolynomial.variable(names, n)
    e = []
    f = []
    for i in range(n):
        ei = ParamPolynomial.zero(names)
        fi = ParamPolynomial.zero(names)
        for j in range(n):
            ei = ei + xs[j] * P[i, j]
            fi = fi + xs[j] * Af[i, j]
        fi = fi + yv * B[i, 0]
        e.append(ei)
        f.append(fi)
    obs = ObserverModel.from_parts("ct1", "l2", (n, 0, 1), e, f, P)

    h = 0.1
    sys = SystemModel.linear("ct", [[-0.5, 0.1], [0.0, -0.8]], C=[[1.0, 0.0]])
    traj = simulate_true(sys, [1.0, -1.0], T=1.0, step=h)
    est = sampled_data_observer(obs, h, traj, [0.2, 0.1])
    # closed form: (P - h/2 Af) x+ = (P + h/2 Af) x + h/2 B (y + y+)
    xh = np.array([0.2, 0.1])
    for k in range(len(traj.times) - 1):
        rhs = (P + h / 2 * Af) @ xh + h / 2 * B[:, 0] * (traj.y[k, 0] + traj.y[k + 1, 0])
        xh = np.linalg.solve(P - h / 2 * Af, rhs)
        np.testing.assert_allclose(est[k + 1], xh, atol=1e-10)


def test_rk4_order():
    # halving the substep should reduce error by ~16x; require >= 8x
    sys = SystemModel.linear("ct", [[-1.0]], C=[[1.0]])
    exact = math.exp(-1.0)
    errs = []
    for nsub in (2, 4):
        traj = simulate_true(sys, [1.0], T=1.0, step=1.0, substeps=nsub)
        errs.append(abs(traj.x[-1, 0] - exact))
    assert errs[0] / errs[1] >= 8.0


def test_sampled_data_reproduces_trapezoidal_truth():
    # initialized on the trapezoidal integration of the true system (in the
    # observer's implicit coordinates), the observer reproduces it exactly
    from obsyn.design import DesignProblem, design_observer

    sys = SystemModel.linear("ct", [[-1.0]], C=[[1.0]])
    prob = DesignProblem(sys, "ct1", mode="exp", rate=0.8, deg_f=1)
    obs = design_observer(prob)
    h = 0.1
    nsteps = 50
    # build the reference sequence by the same trapezoidal implicit step with
    # outputs evaluated along itself (the "true" trapezoidal solution)
    xbar = [np.array([1.0])]
    g_eval = sys.g_eval()
    from obsyn.simulate import _newton_solve

    for k in range(nsteps):
        xk = xbar[-1]
        yk = g_eval(xk)
        rhs = obs.e_at(xk) + h / 2 * obs.f_at(xk, None, yk)
        sol = _newton_solve(
            lambda x: obs.e_at(x) - h / 2 * obs.f_at(x, None, g_eval(x)) - rhs,
            lambda x: obs.E_at(x) - h / 2 * obs.F_at(x, None, g_eval(x)),
            xk,
        )
        xbar.append(sol)
    xbar = np.stack(xbar)
    times = np.arange(nsteps + 1) * h
    traj = type("T", (), {})()
    from obsyn.simulate import Trajectory

    traj = Trajectory("ct-sampled", times, xbar, np.zeros((nsteps + 1, 0)),
                      np.stack([g_eval(x) for x in xbar]), {"step": h})
    est = sampled_data_observer(obs, h, traj, xbar[0])
    assert np.max(np.abs(est - xbar)) <= 1e-8


def test_sampled_data_l2_contraction_tail():
    from obsyn.design import DesignProblem, design_observer

    sys = SystemModel.linear("ct", [[-1.0]], C=[[1.0]])
    prob = DesignProblem(sys, "ct1", mode="exp", rate=0.8, deg_f=1)
    obs = design_observer(prob)
    h = 0.05
    traj = simulate_true(sys, [2.0], T=25.0, step=h)
    rng = np.random.default_rng(0)
    for _ in range(3):
        a = sampled_data_observer(obs, h, traj, rng.uniform(-3, 3, size=1))
        b = sampled_data_observer(obs, h, traj, rng.uniform(-3, 3, size=1))
        d2 = np.sum((a - b) ** 2, axis=1)
        total = float(np.sum(d2))
        tail = float(np.sum(d2[len(d2) // 2:]))
        assert tail <= 0.01 * total + 1e-12


def test_ct_observer_correctness_initialized_at_truth():
    from obsyn.design import DesignProblem, design_observer

    sys = fan_system()
    prob = DesignProblem(sys, "ct1", mode="exp", rate=0.9, deg_f=3)
    obs = design_observer(prob)
    traj = simulate_true(sys, [-1.0, 1.5, 0.5], T=3.0, step=0.01)
    est = simulate_observer_ct(obs, traj, traj.x[0], substeps=2, hold="linear")
    assert np.max(np.linalg.norm(est - traj.x, axis=1)) <= 1e-4


def test_dt_observer_runs_and_tracks():
    from obsyn.design import DesignProblem, design_observer

    sys = SystemModel.linear("dt", [[0.6]], C=[[1.0]])
    prob = DesignProblem(sys, "dt", mode="l2", deg_e=1, deg_f=1)
    obs = design_observer(prob)
    traj = simulate_true(sys, [2.0], T=40, step=1.0)
    est = simulate_observer_dt(obs, traj, [0.0])
    assert abs(est[-1, 0] - traj.x[-1, 0]) <= 1e-6
