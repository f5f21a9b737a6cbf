"""SOS compiler tests: known decompositions, infeasible cases, sampling soundness."""

import numpy as np
import pytest

from obsyn.poly import AffineCoeff, Monomial, ParamPolynomial, PolyMatrix
from obsyn.sdp import SdpBuilder, SolveOptions, solve
from obsyn.sos import compile_matrix, compile_scalar, extract_certificate, verify_certificate


def solve_feasibility(builder):
    """Pure feasibility: optimal means SOS-representable, infeasible means not."""
    sol = solve(builder.build(), SolveOptions(feastol=1e-8, gaptol=1e-5))
    return sol, (0.0 if sol.status == "optimal" else -np.inf)


def test_square_monomial():
    names = ("x",)
    x = ParamPolynomial.variable(names, 0)
    builder = SdpBuilder()
    handle = compile_scalar(builder, x * x)
    sol, t = solve_feasibility(builder)
    assert sol.status == "optimal" and t >= 0
    cert = extract_certificate(handle, sol.z)
    assert cert.residual <= 1e-6
    assert verify_certificate(cert, handle.target)


def test_perfect_square():
    names = ("x",)
    x = ParamPolynomial.variable(names, 0)
    p = x * x - x * 2.0 + 1.0
    builder = SdpBuilder()
    handle = compile_scalar(builder, p)
    sol, t = solve_feasibility(builder)
    assert sol.status == "optimal" and t >= 0
    cert = extract_certificate(handle, sol.z)
    # certificate reproduces (x-1)^2: Q = [[1,-1],[-1,1]] in basis [1, x]
    v = np.array([p.eval([pt]) for pt in np.linspace(-2, 2, 7)])
    w = np.array(
        [np.array([m.eval([pt]) for m in cert.basis]) @ cert.gram
         @ np.array([m.eval([pt]) for m in cert.basis]) for pt in np.linspace(-2, 2, 7)]
    )
    np.testing.assert_allclose(v, w, atol=1e-6)


def test_quartic_plus_one_expansion_oracle():
    names = ("x",)
    x = ParamPolynomial.variable(names, 0)
    p = x * x * x * x + 1.0
    builder = SdpBuilder()
    handle = compile_scalar(builder, p)
    sol, t = solve_feasibility(builder)
    assert sol.status == "optimal" and t >= 0
    cert = extract_certificate(handle, sol.z)
    assert np.linalg.eigvalsh(cert.gram)[0] >= -1e-8
    # independent expansion of m' Q m and comparison against p
    nb = len(cert.basis)
    acc = ParamPolynomial.zero(names)
    for i in range(nb):
        for j in range(nb):
            prod = ParamPolynomial(names, {cert.basis[i].mul(cert.basis[j]): AffineCoeff(cert.gram[i, j])})
            acc = acc + prod
    diff = handle.target.bind(sol.z) - acc
    assert max((abs(c.const) for c in diff.terms.values()), default=0.0) <= 1e-6


def test_odd_degree_rejected():
    names = ("x",)
    x = ParamPolynomial.variable(names, 0)
    builder = SdpBuilder()
    with pytest.raises(ValueError):
        compile_scalar(builder, x * x * x)


def test_negative_poly_infeasible():
    names = ("x",)
    x = ParamPolynomial.variable(names, 0)
    builder = SdpBuilder()
    compile_scalar(builder, -(x * x) - 1.0)
    sol, t = solve_feasibility(builder)
    assert t < 0


def test_matrix_identity_with_margin():
    names = ("x",)
    M = PolyMatrix.from_numeric(names, np.eye(2))
    builder = SdpBuilder()
    compile_matrix(builder, M, margin=0.5)
    sol, t = solve_feasibility(builder)
    assert sol.status == "optimal" and t >= 0


def test_matrix_factorization_case():
    # [[1, x], [x, x^2 + 1]] = [[1],[x]][[1],[x]]' + diag(0, 1) >= 0
    names = ("x",)
    x = ParamPolynomial.variable(names, 0)
    one = ParamPolynomial.constant(names, 1.0)
    M = PolyMatrix([[one, x], [x, x * x + 1.0]])
    builder = SdpBuilder()
    handle = compile_matrix(builder, M)
    sol, t = solve_feasibility(builder)
    # eigmin(M) tends to 0 as |x| grows, so the best certified margin is 0 exactly
    assert sol.status == "optimal" and t >= -1e-8
    cert = extract_certificate(handle, sol.z)
    assert cert.residual <= 1e-6


def test_matrix_indefinite_infeasible():
    # [[1, x], [x, 0]]: determinant -x^2 < 0 for x != 0
    names = ("x",)
    x = ParamPolynomial.variable(names, 0)
    one = ParamPolynomial.constant(names, 1.0)
    zero = ParamPolynomial.zero(names)
    M = PolyMatrix([[one, x], [x, zero]])
    builder = SdpBuilder()
    compile_matrix(builder, M)
    sol, t = solve_feasibility(builder)
    assert t < 0


def test_verify_rejects_perturbed_gram():
    names = ("x",)
    x = ParamPolynomial.variable(names, 0)
    p = x * x + 1.0
    builder = SdpBuilder()
    handle = compile_scalar(builder, p)
    sol, _ = solve_feasibility(builder)
    cert = extract_certificate(handle, sol.z)
    assert verify_certificate(cert, p)
    bad = extract_certificate(handle, sol.z)
    evals, evecs = np.linalg.eigh(bad.gram)
    evals[0] = -1e-3
    bad.gram = evecs @ np.diag(evals) @ evecs.T
    assert not verify_certificate(bad, p)


def test_soundness_by_sampling():
    rng = np.random.default_rng(17)
    names = ("x", "y")
    for _ in range(5):
        # random SOS-by-construction polynomial: sum of squares of random quadratics
        q1 = _random_poly(rng, names, 2)
        q2 = _random_poly(rng, names, 2)
        p = q1 * q1 + q2 * q2
        builder = SdpBuilder()
        handle = compile_scalar(builder, p)
        sol, t = solve_feasibility(builder)
        assert sol.status == "optimal" and t >= -1e-9
        for _ in range(200):
            pt = rng.uniform(-5, 5, size=2)
            assert p.eval(pt) >= -1e-6


def test_margin_monotonicity():
    names = ("x",)
    x = ParamPolynomial.variable(names, 0)
    p = x * x + 0.5
    feasible = {}
    for eps in (0.4, 0.2, 0.05):
        builder = SdpBuilder()
        compile_scalar(builder, p, margin=eps)
        _, t = solve_feasibility(builder)
        feasible[eps] = t >= 0
    # feasible at the largest margin implies feasible at all smaller ones
    assert feasible[0.4] and feasible[0.2] and feasible[0.05]


def test_theta_dependent_sos():
    # p = theta * x^2 with theta a decision variable: feasible picks theta >= 0
    builder = SdpBuilder()
    ids = builder.new_vars(1, "theta")
    names = ("x",)
    p = ParamPolynomial(names, {Monomial.var(0, 2): AffineCoeff(0.0, {ids.start: 1.0})})
    builder.add_scalar_ineq(1.0, {ids.start: -1.0})  # theta <= 1 keeps it bounded
    compile_scalar(builder, p)
    sol, t = solve_feasibility(builder)
    assert sol.status == "optimal" and t >= 0
    assert sol.z[ids.start] >= -1e-8


def _random_poly(rng, names, maxdeg):
    from obsyn.poly import monomial_basis

    basis = monomial_basis(len(names), maxdeg)
    return ParamPolynomial(names, {m: AffineCoeff(rng.standard_normal()) for m in basis})
