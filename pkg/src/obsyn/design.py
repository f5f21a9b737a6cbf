"""Convex observer design: correctness + contraction constraint assembly and solves.

Three observer sets are available:

  ct1: e(xh) = P xh with P = P' the contraction metric; the contraction
       condition is -(F + F' + H) matrix-SOS with H fixed (L2) or 2*rate*P
       (exponential).
  ct2: general polynomial e; the relaxed condition is compiled through its
       Schur-complement form with stacked blocks, keeping everything affine
       in (theta, P) at a fixed rate.
  dt:  discrete-time analogue with E + E' - P - F' P^{-1} F - H >= 0 in
       Schur form; exponential mode stacks sqrt(1 - exp(-rate)) * E.

Feasibility is decided by maximizing a uniform margin t over all design
blocks inside a coefficient box, which yields strictly interior certificates
and a trustworthy sign for bisection. Strict inequalities carry explicit
numeric margins since SOS certifies non-strict ones only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .models import (
    ObserverBasis,
    ObserverModel,
    SystemModel,
    ct1_basis,
    default_poly_basis,
    make_E_F,
)
from .poly import (AffineCoeff, LinearEquation, Monomial, ParamPolynomial, PolyMatrix,
                   coefficients_equal)
from .sdp import SdpBuilder, SdpSolution, SolveOptions, solve
from .sos import SosHandle, compile_matrix, extract_certificate

__all__ = [
    "DesignProblem",
    "DesignResult",
    "DesignError",
    "StructurallyInfeasible",
    "InfeasibleDesign",
    "assemble_design",
    "solve_feasibility",
    "solve_membership",
    "design_observer",
    "max_rate_bisection",
    "sparsify",
    "correctness_constraints_ct",
    "correctness_constraints_dt",
    "representation_constraints",
    "audit_observer",
]

DEFAULT_H = 1e-8
DEFAULT_MU = 1e-3
DEFAULT_SOS_MARGIN = 1e-6
DEFAULT_BOX = 1e3


class DesignError(Exception):
    pass


class StructurallyInfeasible(DesignError):
    """The linear (correctness/representation) equations admit no theta at all."""


class InfeasibleDesign(DesignError):
    pass


@dataclass
class DesignProblem:
    sys: SystemModel
    set_kind: str                    # "ct1" | "ct2" | "dt"
    mode: str = "l2"                 # "l2" | "exp"
    rate: float | None = None        # contraction rate for exp mode
    h: float = 1.0                   # ct2 relaxation scalar / sampling interval
    mu: float = DEFAULT_MU
    H_fixed: np.ndarray | None = None
    deg_e: int = 1
    deg_f: int = 3
    correctness: bool = True
    sos_margin: float = DEFAULT_SOS_MARGIN
    box_bound: float = DEFAULT_BOX
    # optional well-posedness scale normalization E + E' >= wp_floor * I;
    # the sets are cones, so raising it re-scales rather than shrinks them.
    # Objective-bearing solves (l1, learning) use 1.0 to keep the observer's
    # explicit-form gains O(1) instead of drifting to the mu floor.
    wp_floor: float | None = None

    def __post_init__(self):
        if self.set_kind not in ("ct1", "ct2", "dt"):
            raise ValueError("set_kind must be ct1, ct2 or dt")
        if self.mode not in ("l2", "exp"):
            raise ValueError("mode must be l2 or exp")
        if self.mode == "exp" and self.rate is None:
            raise ValueError("exponential mode needs a rate")
        if self.h <= 0:
            raise ValueError("h must be positive")
        if self.set_kind in ("ct1", "ct2") and self.sys.domain != "ct":
            raise ValueError("CT observer sets need a CT system")
        if self.set_kind == "dt" and self.sys.domain != "dt":
            raise ValueError("the DT observer set needs a DT system")

    def H_matrix(self) -> np.ndarray:
        n = self.sys.n
        if self.H_fixed is not None:
            return np.atleast_2d(np.asarray(self.H_fixed, dtype=float))
        return DEFAULT_H * np.eye(n)


@dataclass
class DesignAssembly:
    builder: SdpBuilder
    basis: ObserverBasis
    handles: dict[str, SosHandle]
    extra_blocks: dict[str, int] = field(default_factory=dict)


@dataclass
class DesignResult:
    feasible: bool
    margin: float
    observer: ObserverModel | None
    solution: SdpSolution
    problem: DesignProblem


# ---------------------------------------------------------------------------
# polynomial helpers


def _metric_matrix(basis: ObserverBasis) -> PolyMatrix:
    names = basis.variables
    n = basis.n
    rows = []
    for i in range(n):
        row = []
        for j in range(n):
            key = (min(i, j), max(i, j))
            row.append(ParamPolynomial(names, {Monomial.one(): AffineCoeff(0.0, {basis.p_ids[key]: 1.0})}))
        rows.append(row)
    return PolyMatrix(rows)


def _zeros(names, rows, cols) -> PolyMatrix:
    return PolyMatrix.zeros(names, rows, cols)


def _sys_to_observer_table(poly: ParamPolynomial, basis: ObserverBasis) -> ParamPolynomial:
    """Reinterpret a system polynomial in (x, u) over the observer table.

    State index i maps to xh_i and inputs line up, so this is a plain rename
    followed by table extension.
    """
    names = basis.variables
    return poly.rename(names[: poly.nvars]).extend(names)


def correctness_constraints_ct(sys: SystemModel, basis: ObserverBasis):
    """Equalities for E(x) a(x,u) == f(x, u, g(x,u)) as polynomials in (x, u)."""
    if sys.domain != "ct":
        raise ValueError("CT correctness needs a CT system")
    E, _ = make_E_F(basis)
    a_obs = [_sys_to_observer_table(ai, basis) for ai in sys.a]
    g_obs = [_sys_to_observer_table(gi, basis) for gi in sys.g]
    y_map = {basis.n + basis.m + k: g_obs[k] for k in range(basis.p)}
    eqs = []
    for i in range(basis.n):
        lhs = ParamPolynomial.zero(basis.variables)
        for j in range(basis.n):
            lhs = lhs + E[i, j] * a_obs[j]
        rhs = basis.f[i].substitute(y_map)
        eqs.extend(coefficients_equal(lhs, rhs))
    _structural_check(eqs, basis)
    return eqs


def correctness_constraints_dt(sys: SystemModel, basis: ObserverBasis):
    """Equalities for e(a(x,u)) == f(x, u, g(x,u)) as polynomials in (x, u)."""
    if sys.domain != "dt":
        raise ValueError("DT correctness needs a DT system")
    a_obs = [_sys_to_observer_table(ai, basis) for ai in sys.a]
    g_obs = [_sys_to_observer_table(gi, basis) for gi in sys.g]
    x_map = {i: a_obs[i] for i in range(basis.n)}
    y_map = {basis.n + basis.m + k: g_obs[k] for k in range(basis.p)}
    eqs = []
    for i in range(basis.n):
        lhs = basis.e[i].substitute(x_map)
        rhs = basis.f[i].substitute(y_map)
        eqs.extend(coefficients_equal(lhs, rhs))
    _structural_check(eqs, basis)
    return eqs


def _structural_check(eqs, basis: ObserverBasis):
    """Report structural infeasibility before any SDP solve.

    Correctness systems are homogeneous, so theta = 0 always satisfies them;
    a basis too weak to represent the dynamics shows up as the equations
    forcing a diagonal entry of E(0) to zero, which contradicts the
    well-posedness requirement E + E' >= mu*I (each E_ii(0) >= mu/2). A
    genuinely representable design can always be rescaled to E_ii(0) = 1, so
    appending that pin keeps valid cases consistent.
    """
    _check_consistent(eqs)
    for i in range(basis.n):
        c = basis.e[i].coeff(Monomial.var(i))
        pin = LinearEquation(dict(c.lin), 1.0 - c.const)
        try:
            _check_consistent(eqs + [pin])
        except StructurallyInfeasible:
            raise StructurallyInfeasible(
                "linear constraints force E degenerate; the basis degree is too "
                "low to represent the required dynamics"
            ) from None


def representation_constraints(basis: ObserverBasis, phi, domain: str):
    """Equalities forcing the observer's explicit dynamics to equal phi.

    CT: f == E * phi (since xh' = E^{-1} f); DT: f == e(phi).
    phi is a vector of numeric polynomials over the observer variables.
    """
    phi = list(phi)
    eqs = []
    if domain == "ct":
        E, _ = make_E_F(basis)
        for i in range(basis.n):
            lhs = ParamPolynomial.zero(basis.variables)
            for j in range(basis.n):
                lhs = lhs + E[i, j] * phi[j]
            eqs.extend(coefficients_equal(basis.f[i], lhs))
    else:
        x_map = {i: phi[i] for i in range(basis.n)}
        for i in range(basis.n):
            eqs.extend(coefficients_equal(basis.f[i], basis.e[i].substitute(x_map)))
    _check_consistent(eqs)
    return eqs


def _check_consistent(eqs):
    """Report structural infeasibility of a pure-linear system before any solve."""
    if not eqs:
        return
    ids = sorted({i for eq in eqs for i in eq.coeffs})
    pos = {i: k for k, i in enumerate(ids)}
    A = np.zeros((len(eqs), len(ids)))
    b = np.zeros(len(eqs))
    for r, eq in enumerate(eqs):
        for i, w in eq.coeffs.items():
            A[r, pos[i]] = w
        b[r] = eq.rhs
    if A.size:
        theta, *_ = np.linalg.lstsq(A, b, rcond=None)
        res = float(np.max(np.abs(A @ theta - b), initial=0.0))
    else:
        res = float(np.max(np.abs(b), initial=0.0))
    if res > 1e-8 * max(1.0, float(np.max(np.abs(b), initial=0.0))):
        raise StructurallyInfeasible(
            "linear constraints admit no parameter vector; the basis degree is "
            "too low to represent the required dynamics"
        )


# ---------------------------------------------------------------------------
# constraint assembly


def ct1_constraints(builder: SdpBuilder, basis: ObserverBasis, prob: DesignProblem,
                    scale_floor: bool = True) -> dict:
    """-(F + F' + H) matrix-SOS plus P >= mu*I; H = 2*rate*P or fixed."""
    _, F = make_E_F(basis)
    names = basis.variables
    M = (F + F.transpose()).scale(-1.0)
    if prob.mode == "exp":
        M = M - _metric_matrix(basis).scale(2.0 * prob.rate)
    else:
        M = M - PolyMatrix.from_numeric(names, prob.H_matrix())
    handles = {"contraction": compile_matrix(builder, M, margin=prob.sos_margin)}
    _add_metric_floor(builder, basis, prob.mu, scale_floor)
    return handles


def ct2_constraints(builder: SdpBuilder, basis: ObserverBasis, prob: DesignProblem,
                    scale_floor: bool = True) -> dict:
    """Schur form of the relaxed CT contraction condition at fixed h (and rate)."""
    E, F = make_E_F(basis)
    names = basis.variables
    P = _metric_matrix(basis)
    Em = E - F.scale(prob.h / 2.0)
    Ep = E + F.scale(prob.h / 2.0)
    TL = Em + Em.transpose() - P
    if prob.mode == "l2":
        TL = TL - PolyMatrix.from_numeric(names, prob.H_matrix())
        stack = [Ep]
    else:
        stack = [Ep, E.scale(math.sqrt(2.0 * prob.rate))]
    big = _schur_block(TL, stack, P)
    handles = {"contraction": compile_matrix(builder, big, margin=prob.sos_margin)}
    handles["wellposed"] = compile_matrix(builder, E + E.transpose(), margin=prob.mu)
    _add_metric_floor(builder, basis, prob.mu, scale_floor)
    return handles


def dt_constraints(builder: SdpBuilder, basis: ObserverBasis, prob: DesignProblem,
                   scale_floor: bool = True) -> dict:
    """Schur form of E + E' - P - F'P^{-1}F - H >= 0 (exp: extra sqrt(1-e^-rate)E)."""
    E, F = make_E_F(basis)
    names = basis.variables
    P = _metric_matrix(basis)
    TL = E + E.transpose() - P
    if prob.mode == "l2":
        TL = TL - PolyMatrix.from_numeric(names, prob.H_matrix())
        stack = [F]
    else:
        stack = [F, E.scale(math.sqrt(1.0 - math.exp(-prob.rate)))]
    big = _schur_block(TL, stack, P)
    handles = {"contraction": compile_matrix(builder, big, margin=prob.sos_margin)}
    handles["wellposed"] = compile_matrix(builder, E + E.transpose(), margin=prob.mu)
    _add_metric_floor(builder, basis, prob.mu, scale_floor)
    return handles


def _schur_block(TL: PolyMatrix, stack, P: PolyMatrix) -> PolyMatrix:
    names = TL.variables
    n = TL.rows
    s = len(stack)
    rows = [[TL] + [G.transpose() for G in stack]]
    for i, G in enumerate(stack):
        row = [G]
        for j in range(s):
            row.append(P if i == j else _zeros(names, n, n))
        rows.append(row)
    return PolyMatrix.block(rows)


def _add_metric_floor(builder: SdpBuilder, basis: ObserverBasis, mu: float,
                      scale_floor: bool = True):
    n = basis.n
    coeff = {}
    for (i, j), idx in basis.p_ids.items():
        E = np.zeros((n, n))
        E[i, j] = 1.0
        E[j, i] = 1.0
        coeff[idx] = E
    builder.add_block(n, -mu * np.eye(n), coeff, "design")
    if scale_floor:
        # the observer sets are invariant under up-scaling of (theta, P);
        # pinning trace(P) away from zero removes that cone degeneracy and
        # makes infeasibility verdicts numerically deep instead of marginal
        builder.add_scalar_ineq(-float(n), {basis.p_ids[(i, i)]: 1.0 for i in range(n)},
                                category="design")


def assemble_design(prob: DesignProblem, fixed_phi=None, scale_floor: bool = True) -> DesignAssembly:
    """Build the SDP skeleton shared by feasibility, sparsification and learning."""
    if prob.set_kind == "ct1":
        basis = ct1_basis(prob.sys, prob.deg_f)
    else:
        basis = default_poly_basis(prob.sys, prob.deg_e, prob.deg_f)
    builder = SdpBuilder()
    builder.new_vars(basis.q, "theta")

    if prob.correctness:
        if prob.sys.domain == "ct":
            eqs = correctness_constraints_ct(prob.sys, basis)
        else:
            eqs = correctness_constraints_dt(prob.sys, basis)
        for eq in eqs:
            builder.add_equality(eq.coeffs, eq.rhs)
    if fixed_phi is not None:
        for eq in representation_constraints(basis, fixed_phi, prob.sys.domain):
            builder.add_equality(eq.coeffs, eq.rhs)

    if prob.set_kind == "ct1":
        handles = ct1_constraints(builder, basis, prob, scale_floor)
    elif prob.set_kind == "ct2":
        handles = ct2_constraints(builder, basis, prob, scale_floor)
    else:
        handles = dt_constraints(builder, basis, prob, scale_floor)

    builder.add_box(range(basis.q), prob.box_bound)
    return DesignAssembly(builder, basis, handles)


def _observer_from_solution(prob: DesignProblem, basis: ObserverBasis, handles, z) -> ObserverModel:
    theta = np.asarray(z[: basis.q], dtype=float)
    P = basis.metric_at(theta)
    certs = {}
    for name, handle in handles.items():
        cert = extract_certificate(handle, z)
        certs[name] = cert.to_dict()
    return ObserverModel(
        set_kind=prob.set_kind,
        mode=prob.mode,
        n=basis.n, m=basis.m, p=basis.p,
        e=[poly.bind(theta) for poly in basis.e],
        f=[poly.bind(theta) for poly in basis.f],
        P=P,
        mu=prob.mu,
        lam=prob.rate if prob.mode == "exp" else None,
        h=prob.h if prob.set_kind == "ct2" else None,
        H_fixed=None if prob.mode == "exp" else prob.H_matrix(),
        theta=theta,
        basis_meta=basis.to_dict(),
        certificates=certs,
    )


def _solve_with_retries(problem, opts_list=None) -> SdpSolution:
    # design solves need tight feasibility for certificates, but the duality
    # gap only touches objective quality, so it can sit looser than default
    opts_list = opts_list or [
        SolveOptions(feastol=1e-8, gaptol=1e-5),
        SolveOptions(feastol=1e-7, gaptol=1e-4, max_iters=300),
    ]
    sol = None
    for opts in opts_list:
        sol = solve(problem, opts)
        if sol.status in ("optimal", "infeasible", "unbounded"):
            return sol
    return sol


def _block_margin(sdp_prob, z) -> float:
    """Smallest eigenvalue over all block values at z (solution quality report)."""
    worst = np.inf
    for b in sdp_prob.blocks:
        worst = min(worst, float(np.linalg.eigvalsh(b.matrix_at(z))[0]))
    return worst if np.isfinite(worst) else 0.0


def _feasibility_verdict(prob, asm, sdp_prob) -> DesignResult:
    sol = _solve_with_retries(sdp_prob)
    if sol.status == "infeasible":
        return DesignResult(False, -np.inf, None, sol, prob)
    if sol.status != "optimal":
        raise DesignError(f"feasibility solve inconclusive: {sol.status} ({sol.info.get('reason')})")
    observer = _observer_from_solution(prob, asm.basis, asm.handles, sol.z)
    return DesignResult(True, _block_margin(sdp_prob, sol.z), observer, sol, prob)


def solve_membership(prob: DesignProblem, e_target, f_target) -> DesignResult:
    """Decide whether a concrete numeric (e, f) pair belongs to the design set.

    The pair is pinned through coefficient equalities, leaving only the
    metric (and Gram) variables free. The scale normalization is skipped:
    membership is a cone question and the target fixes the scale.
    """
    asm = assemble_design(prob, scale_floor=False)
    eqs = []
    for i in range(asm.basis.n):
        eqs.extend(coefficients_equal(asm.basis.e[i], e_target[i]))
        eqs.extend(coefficients_equal(asm.basis.f[i], f_target[i]))
    _check_consistent(eqs)
    for eq in eqs:
        asm.builder.add_equality(eq.coeffs, eq.rhs)
    return _feasibility_verdict(prob, asm, asm.builder.build())


def solve_feasibility(prob: DesignProblem, fixed_phi=None) -> DesignResult:
    """Decide feasibility of the design set and return a certified observer.

    The strictness of every inequality lives in explicit numeric margins, so
    the solve is a pure feasibility problem: optimal means feasible, and
    infeasibility arrives as a homogeneous-self-dual certificate.
    """
    asm = assemble_design(prob, fixed_phi)
    return _feasibility_verdict(prob, asm, asm.builder.build())


def design_observer(prob: DesignProblem, fixed_phi=None) -> ObserverModel:
    res = solve_feasibility(prob, fixed_phi)
    if not res.feasible:
        raise InfeasibleDesign(f"design infeasible (margin {res.margin:.3e})")
    return res.observer


def max_rate_bisection(prob: DesignProblem, lambda_lo: float = 1e-3,
                       lambda_hi: float = 64.0, tol: float = 1e-2):
    """Largest certified exponential rate via bisection over feasibility solves.

    Returns (lambda_star, observer-certified-at-lambda_star). An inconclusive
    solve (possible exactly at the feasibility boundary, where the set has no
    interior) is treated as infeasible, which only biases the result by less
    than the bisection tolerance.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")

    def attempt(lam):
        p = DesignProblem(
            sys=prob.sys, set_kind=prob.set_kind, mode="exp", rate=lam, h=prob.h,
            mu=prob.mu, H_fixed=prob.H_fixed, deg_e=prob.deg_e, deg_f=prob.deg_f,
            correctness=prob.correctness, sos_margin=prob.sos_margin,
            box_bound=prob.box_bound,
        )
        try:
            return solve_feasibility(p)
        except DesignError:
            return None

    res_lo = attempt(lambda_lo)
    if res_lo is None or not res_lo.feasible:
        raise InfeasibleDesign(f"infeasible at lambda_lo = {lambda_lo}")
    res_hi = attempt(lambda_hi)
    if res_hi is not None and res_hi.feasible:
        return lambda_hi, res_hi.observer
    lo, best = lambda_lo, res_lo
    hi = lambda_hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        res = attempt(mid)
        if res is not None and res.feasible:
            lo, best = mid, res
        else:
            hi = mid
    return lo, best.observer


def sparsify(prob: DesignProblem, rate: float | None = None) -> ObserverModel:
    """Minimize the l1 norm of f coefficients over the design constraint set."""
    if rate is not None:
        prob = DesignProblem(
            sys=prob.sys, set_kind=prob.set_kind, mode="exp", rate=rate, h=prob.h,
            mu=prob.mu, H_fixed=prob.H_fixed, deg_e=prob.deg_e, deg_f=prob.deg_f,
            correctness=prob.correctness, sos_margin=prob.sos_margin,
            box_bound=prob.box_bound,
        )
    asm = assemble_design(prob)
    f_ids = asm.basis.f_coefficient_ids()
    aux = asm.builder.new_vars(len(f_ids), "l1")
    for t, i in zip(aux, f_ids):
        asm.builder.add_scalar_ineq(0.0, {t: 1.0, i: -1.0})
        asm.builder.add_scalar_ineq(0.0, {t: 1.0, i: 1.0})
    asm.builder.set_objective({t: 1.0 for t in aux})
    sdp_prob = asm.builder.build()
    sol = _solve_with_retries(sdp_prob)
    if sol.status == "infeasible":
        raise InfeasibleDesign("l1 sparsification: constraints infeasible")
    if sol.status != "optimal":
        raise DesignError(f"l1 solve inconclusive: {sol.status}")
    obs = _observer_from_solution(prob, asm.basis, asm.handles, sol.z)
    obs.certificates["l1_objective"] = float(sol.primal_obj)
    return obs


# ---------------------------------------------------------------------------
# numerical audits (used by the verify command and the acceptance suite)


def audit_observer(obs: ObserverModel, sys: SystemModel | None = None,
                   nsamples: int = 1000, box: float = 3.0, seed: int = 0) -> dict:
    """Sample-based re-check of well-posedness, contraction and correctness.

    Violations are reported as positive numbers (zero means clean).
    """
    rng = np.random.default_rng(seed)
    n, m, p = obs.n, obs.m, obs.p
    Pinv = np.linalg.inv(obs.P)
    lam_wp = np.inf
    worst_contract = -np.inf
    for _ in range(nsamples):
        xh = rng.uniform(-box, box, size=n)
        u = rng.uniform(-box, box, size=m)
        y = rng.uniform(-box, box, size=p)
        E = obs.E_at(xh)
        F = obs.F_at(xh, u, y)
        lam_wp = min(lam_wp, float(np.linalg.eigvalsh(E + E.T)[0]))
        if obs.set_kind == "dt":
            Q = F.T @ Pinv @ F - E.T @ Pinv @ E
        else:
            Q = E.T @ Pinv @ F + F.T @ Pinv @ E
        if obs.mode == "exp":
            H = (2.0 * obs.lam if obs.set_kind != "dt" else (1.0 - math.exp(-obs.lam))) \
                * (E.T @ Pinv @ E)
        else:
            H = obs.H_fixed if obs.H_fixed is not None else DEFAULT_H * np.eye(n)
        worst_contract = max(worst_contract, float(np.linalg.eigvalsh(Q + H)[-1]))
    report = {
        "wellposed_min_eig": lam_wp,
        "wellposed_violation": max(0.0, obs.mu - lam_wp),
        "contraction_violation": max(0.0, worst_contract),
    }
    if sys is not None:
        worst_corr = 0.0
        a_eval = sys.a_eval()
        g_eval = sys.g_eval()
        for _ in range(min(nsamples, 200)):
            x = rng.uniform(-box, box, size=n)
            u = rng.uniform(-box, box, size=m)
            y = g_eval(np.concatenate([x, u]))
            ax = a_eval(np.concatenate([x, u]))
            if sys.domain == "ct":
                resid = obs.E_at(x) @ ax - obs.f_at(x, u, y)
            else:
                resid = obs.e_at(ax) - obs.f_at(x, u, y)
            worst_corr = max(worst_corr, float(np.max(np.abs(resid))))
        report["correctness_violation"] = worst_corr
    return report
