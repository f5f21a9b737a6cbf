"""Design-layer tests: hand-checked constraint sets, separations, audits, bisection."""

import math

import numpy as np
import pytest

from obsyn.design import (
    DesignProblem,
    InfeasibleDesign,
    StructurallyInfeasible,
    audit_observer,
    correctness_constraints_ct,
    correctness_constraints_dt,
    design_observer,
    max_rate_bisection,
    representation_constraints,
    solve_feasibility,
    solve_membership,
    sparsify,
)
from obsyn.models import (
    ObserverModel,
    SystemModel,
    ct1_basis,
    default_poly_basis,
    fan_system,
    observer_variables,
)
from obsyn.poly import AffineCoeff, Monomial, ParamPolynomial


def scalar_ct_system():
    return SystemModel.linear("ct", [[-1.0]], C=[[1.0]])


def obs_poly(n, m, p):
    names = observer_variables(n, m, p)
    return names, [ParamPolynomial.variable(names, i) for i in range(len(names))]


# -- correctness equations ----------------------------------------------------


def test_ct_correctness_hand_equation():
    # xdot = -x, y = x with e = P x, f = th_0 + th_x xh + th_y y:
    # matching gives th_0 = 0 and -P = th_x + th_y
    sys = scalar_ct_system()
    basis = ct1_basis(sys, 1)
    eqs = correctness_constraints_ct(sys, basis)
    pid = basis.p_ids[(0, 0)]
    tx = basis.f_ids[(0, Monomial.var(0))]
    ty = basis.f_ids[(0, Monomial.var(1))]
    main = [eq for eq in eqs if pid in eq.coeffs]
    assert len(main) == 1
    eq = main[0]
    assert eq.rhs == 0.0
    # E*a - f matching on the x monomial: -P - th_x - th_y = 0
    sign = eq.coeffs[pid]
    assert eq.coeffs[tx] == pytest.approx(sign)
    assert eq.coeffs[ty] == pytest.approx(sign)


def test_dt_correctness_hand_equation():
    # x+ = 0.5x, y = x with e = th_e x, f = th_x xh + th_y y: 0.5 th_e = th_x + th_y
    sys = SystemModel.linear("dt", [[0.5]], C=[[1.0]])
    basis = default_poly_basis(sys, 1, 1)
    eqs = correctness_constraints_dt(sys, basis)
    te = basis.e_ids[(0, Monomial.var(0))]
    tx = basis.f_ids[(0, Monomial.var(0))]
    ty = basis.f_ids[(0, Monomial.var(1))]
    main = [eq for eq in eqs if te in eq.coeffs]
    assert len(main) == 1
    eq = main[0]
    s = eq.coeffs[te]
    assert eq.coeffs[tx] == pytest.approx(-2.0 * s)
    assert eq.coeffs[ty] == pytest.approx(-2.0 * s)


def test_dt_correctness_luenberger():
    rng = np.random.default_rng(3)
    n = 4
    A = rng.standard_normal((n, n))
    A *= 0.9 / max(abs(np.linalg.eigvals(A)))
    C = rng.standard_normal((1, n))
    L = rng.standard_normal((n, 1)) * 0.1
    sys = SystemModel.linear("dt", A, C=C)
    basis = default_poly_basis(sys, 1, 1)
    theta = np.zeros(basis.q)
    for i in range(n):
        theta[basis.e_ids[(i, Monomial.var(i))]] = 1.0  # e = xh
    Af = A - L @ C
    for i in range(n):
        for j in range(n):
            theta[basis.f_ids[(i, Monomial.var(j))]] = Af[i, j]
        theta[basis.f_ids[(i, Monomial.var(n))]] = L[i, 0]
    for eq in correctness_constraints_dt(sys, basis):
        resid = sum(w * theta[i] for i, w in eq.coeffs.items()) - eq.rhs
        assert abs(resid) <= 1e-12


def test_structural_infeasibility_reported():
    # deg_f = 1 cannot represent E*a for the cubic benchmark dynamics
    sys = fan_system()
    basis = ct1_basis(sys, 1)
    with pytest.raises(StructurallyInfeasible):
        correctness_constraints_ct(sys, basis)


def test_identity_system_membership_dt():
    # x+ = x with e = f on the diagonal: e(x) = f(x, y) with f = e composed with x
    sys = SystemModel.linear("dt", [[1.0]], C=[[1.0]])
    names = observer_variables(1, 0, 1)
    xh = ParamPolynomial.variable(names, 0)
    y = ParamPolynomial.variable(names, 1)
    prob = DesignProblem(sys, "dt", mode="l2", deg_e=1, deg_f=1)
    res = solve_membership(prob, [xh], [y])  # deadbeat: e(x+) = y reproduces x
    assert res.feasible


# -- contraction set examples -------------------------------------------------


def test_ct1_cubic_feasible_l2():
    sys = scalar_ct_system()
    names = observer_variables(1, 0, 1)
    xh = ParamPolynomial.variable(names, 0)
    prob = DesignProblem(sys, "ct1", mode="l2", deg_f=3, correctness=False)
    res = solve_membership(prob, [xh], [-xh - xh * xh * xh])
    assert res.feasible


def test_ct1_unstable_infeasible():
    sys = scalar_ct_system()
    names = observer_variables(1, 0, 1)
    xh = ParamPolynomial.variable(names, 0)
    prob = DesignProblem(sys, "ct1", mode="l2", deg_f=1, correctness=False)
    res = solve_membership(prob, [xh], [xh])
    assert not res.feasible


def test_ct2_examples():
    sys = scalar_ct_system()
    names = observer_variables(1, 0, 1)
    xh = ParamPolynomial.variable(names, 0)
    cubic_e = [xh * 0.1 + xh * xh * xh]
    cubic_f = [-xh - xh * xh * xh]
    # the nonconstant-metric pair: in CT2 at h = 2 (the quartic terms cancel
    # only there), not at the default h = 1
    prob2 = DesignProblem(sys, "ct2", mode="l2", deg_e=3, deg_f=3, correctness=False, h=2.0)
    assert solve_membership(prob2, cubic_e, cubic_f).feasible
    prob1 = DesignProblem(sys, "ct2", mode="l2", deg_e=3, deg_f=3, correctness=False, h=1.0)
    assert not solve_membership(prob1, cubic_e, cubic_f).feasible
    # e = xh, f = -xh - xh^3 is NOT in CT2 (unbounded F against constant E)
    assert not solve_membership(prob2, [xh], cubic_f).feasible
    # e = xh, f = -xh at h = 1: feasible (hand Schur: 3 - 1 - 0.25 >= H)
    res = solve_membership(prob1, [xh], [-xh])
    assert res.feasible


def test_dt_examples():
    sys = SystemModel.linear("dt", [[0.5]], C=[[1.0]])
    names = observer_variables(1, 0, 1)
    xh = ParamPolynomial.variable(names, 0)
    prob = DesignProblem(sys, "dt", mode="l2", deg_e=1, deg_f=1, correctness=False)
    assert solve_membership(prob, [xh], [xh * 0.5]).feasible
    assert not solve_membership(prob, [xh], [xh * 1.5]).feasible
    # deadbeat f = 0
    assert solve_membership(prob, [xh], [ParamPolynomial.zero(names)]).feasible


# -- quadratic bound and polarization identities --------------------------------


def test_quadratic_upper_bound_identity():
    rng = np.random.default_rng(11)
    for _ in range(100):
        n = int(rng.integers(1, 5))
        B = rng.standard_normal((n, n))
        P = B @ B.T + 0.2 * np.eye(n)
        b = rng.standard_normal(n)
        cvec = rng.standard_normal(n)
        lhs = -cvec @ np.linalg.solve(P, cvec)
        rhs = b @ P @ b - 2 * b @ cvec
        assert lhs <= rhs + 1e-9
        tight = P @ b
        lhs_t = -tight @ np.linalg.solve(P, tight)
        rhs_t = b @ P @ b - 2 * b @ tight
        assert abs(lhs_t - rhs_t) <= 1e-9 * max(1.0, abs(rhs_t))


def test_polarization_identity():
    rng = np.random.default_rng(12)
    for _ in range(100):
        n = int(rng.integers(1, 5))
        B = rng.standard_normal((n, n))
        Q = B @ B.T + 0.1 * np.eye(n)
        E = rng.standard_normal((n, n))
        F = rng.standard_normal((n, n))
        h = float(rng.uniform(0.1, 4.0))
        lhs = E.T @ Q @ F + F.T @ Q @ E
        Ap = E + (h / 2) * F
        Am = E - (h / 2) * F
        rhs = (Ap.T @ Q @ Ap - Am.T @ Q @ Am) / h
        assert np.max(np.abs(lhs - rhs)) <= 1e-9 * max(1.0, np.max(np.abs(rhs)))


# -- relaxation soundness by sampling ------------------------------------------


def test_ct2_relaxation_soundness():
    sys = scalar_ct_system()
    names = observer_variables(1, 0, 1)
    xh = ParamPolynomial.variable(names, 0)
    prob = DesignProblem(sys, "ct2", mode="l2", deg_e=3, deg_f=3, correctness=False, h=2.0)
    res = solve_membership(prob, [xh * 0.1 + xh * xh * xh], [-xh - xh * xh * xh])
    obs = res.observer
    rep = audit_observer(obs, nsamples=500, box=5.0)
    assert rep["contraction_violation"] <= 1e-6
    assert rep["wellposed_violation"] <= 1e-8


def test_dt_relaxation_soundness():
    sys = SystemModel.linear("dt", [[0.5]], C=[[1.0]])
    prob = DesignProblem(sys, "dt", mode="l2", deg_e=1, deg_f=1)
    res = solve_feasibility(prob)
    assert res.feasible
    rep = audit_observer(res.observer, nsamples=500)
    assert rep["contraction_violation"] <= 1e-6


# -- flexibility (stable linear observers are in the sets) ----------------------


def _random_stable(rng, n, ct):
    while True:
        A = rng.standard_normal((n, n))
        eig = np.linalg.eigvals(A)
        if ct:
            A = A - (max(eig.real) + rng.uniform(0.2, 1.0)) * np.eye(n)
            if max(np.linalg.eigvals(A).real) < -0.1:
                return A
        else:
            r = max(abs(eig))
            A = A * (rng.uniform(0.3, 0.9) / r)
            return A


@pytest.mark.parametrize("set_kind", ["ct1", "ct2", "dt"])
def test_flexibility_linear_observers(set_kind):
    rng = np.random.default_rng(21)
    domain = "dt" if set_kind == "dt" else "ct"
    n, m, p = 2, 1, 1
    if domain == "ct":
        sys = SystemModel.linear("ct", np.diag([-1.0] * n), B=np.zeros((n, 1)), C=np.zeros((1, n)))
    else:
        sys = SystemModel.linear("dt", np.diag([0.5] * n), B=np.zeros((n, 1)), C=np.zeros((1, n)))
    names = observer_variables(n, m, p)
    count = 0
    for _ in range(5):
        A_o = _random_stable(rng, n, ct=(domain == "ct"))
        phi = []
        for i in range(n):
            poly = ParamPolynomial.zero(names)
            for j in range(n):
                poly = poly + ParamPolynomial.variable(names, j) * A_o[i, j]
            # random quadratic input/output injection q(u, y)
            u = ParamPolynomial.variable(names, n)
            y = ParamPolynomial.variable(names, n + 1)
            poly = poly + u * rng.standard_normal() + y * rng.standard_normal() \
                + u * y * rng.standard_normal() + y * y * rng.standard_normal()
            phi.append(poly)
        prob = DesignProblem(sys, set_kind, mode="l2", deg_e=1, deg_f=2, correctness=False,
                             h=0.5)
        res = solve_feasibility(prob, fixed_phi=phi)
        count += bool(res.feasible)
    assert count == 5


# -- bisection and sparsification ------------------------------------------------


def test_bisection_hits_upper_bound_without_correctness():
    sys = scalar_ct_system()
    prob = DesignProblem(sys, "ct1", mode="exp", rate=1.0, deg_f=1, correctness=False)
    lam, obs = max_rate_bisection(prob, 1e-3, 16.0, 0.05)
    assert lam == pytest.approx(16.0)
    assert obs is not None


def test_bisection_with_output_injection_hits_upper_bound():
    sys = scalar_ct_system()
    prob = DesignProblem(sys, "ct1", mode="exp", rate=1.0, deg_f=1)
    lam, obs = max_rate_bisection(prob, 1e-3, 16.0, 0.05)
    assert lam == pytest.approx(16.0)
    rep = audit_observer(obs, sys, nsamples=200)
    assert rep["correctness_violation"] <= 1e-6


def test_bisection_infeasible_at_lo():
    # no output: xdot = +x cannot admit a contracting correct observer
    sys = SystemModel.linear("ct", [[1.0]], C=np.zeros((0, 1)))
    prob = DesignProblem(sys, "ct1", mode="exp", rate=1.0, deg_f=1)
    with pytest.raises(InfeasibleDesign):
        max_rate_bisection(prob, 1e-3, 4.0, 0.05)


def test_sparsify_matches_lp_oracle():
    # scalar with redundant basis {xh, y}: minimize |th_x| + |th_y| subject to
    # correctness th_x + th_y = -P and contraction th_x <= -rate * P
    from scipy.optimize import linprog

    sys = scalar_ct_system()
    rate = 1.0
    prob = DesignProblem(sys, "ct1", mode="exp", rate=rate, deg_f=1)
    obs = sparsify(prob)
    got = obs.certificates["l1_objective"]

    # LP oracle on (P, th_x, th_y, t_x, t_y) with P >= max(mu, 1) by scale floor
    # normalization trace(P) >= 1; minimize t_x + t_y
    res = linprog(
        c=[0, 0, 0, 1, 1],
        A_ub=[
            [2 * rate, 2, 0, 0, 0],   # 2 th_x + 2 rate P <= 0
            [0, 1, 0, -1, 0], [0, -1, 0, -1, 0],
            [0, 0, 1, 0, -1], [0, 0, -1, 0, -1],
            [-1, 0, 0, 0, 0],          # P >= 1
        ],
        b_ub=[0, 0, 0, 0, 0, -1.0],
        A_eq=[[1, 1, 1, 0, 0]],       # th_x + th_y = -P
        b_eq=[0.0],
        bounds=(None, None),
        method="highs",
    )
    assert res.status == 0
    assert got == pytest.approx(res.fun, rel=1e-3, abs=1e-5)


def test_sparsify_unique_solution_unchanged():
    # basis {xh} only representable combination: th_x = -P, so l1 optimum is P = 1
    sys = SystemModel.linear("ct", [[-1.0]], C=np.zeros((0, 1)))
    prob = DesignProblem(sys, "ct1", mode="l2", deg_f=1)
    obs = sparsify(prob)
    theta_f = [v for (key, v) in zip(obs.theta, obs.theta)]
    # correctness forces f = -P xh exactly
    assert obs.f_at([1.0])[0] == pytest.approx(-obs.P[0, 0], rel=1e-6)


# -- certified observers pass the well-posedness audit ----------------------------


def test_designed_observer_lemma1_audit():
    sys = fan_system()
    prob = DesignProblem(sys, "ct1", mode="exp", rate=0.9, deg_f=3)
    obs = design_observer(prob)
    rep = audit_observer(obs, sys, nsamples=1000)
    assert rep["wellposed_min_eig"] >= prob.mu - 1e-8
    assert rep["correctness_violation"] <= 1e-6
    assert rep["contraction_violation"] <= 1e-6
