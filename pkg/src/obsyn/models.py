"""True-system models and observer parameterizations.

Systems are polynomial state-space models over variables (x1..xn, u1..um).
Observers live in the implicit form d/dt e(xh) = f(xh, u, y) (continuous
time) or e(xh+) = f(xh, u, y) (discrete time), with e and f linear in a
decision vector theta. The observer variable table is always the full tuple
(xh1..xhn, u1..um, y1..yp) even when m = 0, so basis generation is uniform.

Theta layout: metric entries P (upper triangle, row-major) first, then e
coefficients (absent when e is tied to P*xh), then f coefficients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .poly import (
    AffineCoeff,
    Monomial,
    ParamPolynomial,
    PolyEvaluator,
    PolyMatrix,
    jacobian,
    monomial_basis,
)

__all__ = [
    "NoiseSpec",
    "SystemModel",
    "ObserverBasis",
    "ObserverModel",
    "fan_system",
    "default_poly_basis",
    "ct1_basis",
    "make_E_F",
    "system_variables",
    "observer_variables",
]


def system_variables(n: int, m: int):
    return tuple(f"x{i + 1}" for i in range(n)) + tuple(f"u{j + 1}" for j in range(m))


def observer_variables(n: int, m: int, p: int):
    return (
        tuple(f"xh{i + 1}" for i in range(n))
        + tuple(f"u{j + 1}" for j in range(m))
        + tuple(f"y{k + 1}" for k in range(p))
    )


@dataclass
class NoiseSpec:
    """Gaussian noise channels for simulation: x+ <- a(x,u) + w, y <- g + v."""

    output_variance: float = 0.0
    process_variance: float = 0.0


@dataclass
class SystemModel:
    domain: str                      # "ct" or "dt"
    n: int
    m: int
    p: int
    a: list[ParamPolynomial]         # dynamics, numeric coefficients
    g: list[ParamPolynomial]         # output map, numeric coefficients
    noise: NoiseSpec | None = None

    def __post_init__(self):
        if self.domain not in ("ct", "dt"):
            raise ValueError("domain must be 'ct' or 'dt'")
        if len(self.a) != self.n or len(self.g) != self.p:
            raise ValueError("dimension mismatch in a or g")
        for poly in list(self.a) + list(self.g):
            if not poly.is_numeric:
                raise ValueError("system coefficients must be fully numeric")

    @property
    def variables(self):
        return system_variables(self.n, self.m)

    def a_eval(self) -> PolyEvaluator:
        return PolyEvaluator(self.a)

    def g_eval(self) -> PolyEvaluator:
        return PolyEvaluator(self.g)

    @classmethod
    def linear(cls, domain, A, B=None, C=None, D=None, noise=None) -> "SystemModel":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        n = A.shape[0]
        B = np.zeros((n, 0)) if B is None else np.atleast_2d(np.asarray(B, dtype=float))
        m = B.shape[1]
        C = np.eye(n) if C is None else np.atleast_2d(np.asarray(C, dtype=float))
        p = C.shape[0]
        D = np.zeros((p, m)) if D is None else np.atleast_2d(np.asarray(D, dtype=float))
        names = system_variables(n, m)
        a = []
        for i in range(n):
            terms = {Monomial.var(j): AffineCoeff(A[i, j]) for j in range(n) if A[i, j]}
            for j in range(m):
                if B[i, j]:
                    terms[Monomial.var(n + j)] = AffineCoeff(B[i, j])
            a.append(ParamPolynomial(names, terms))
        g = []
        for i in range(p):
            terms = {Monomial.var(j): AffineCoeff(C[i, j]) for j in range(n) if C[i, j]}
            for j in range(m):
                if D[i, j]:
                    terms[Monomial.var(n + j)] = AffineCoeff(D[i, j])
            g.append(ParamPolynomial(names, terms))
        return cls(domain, n, m, p, a, g, noise)

    def to_dict(self) -> dict:
        out = {
            "domain": self.domain, "n": self.n, "m": self.m, "p": self.p,
            "a": [poly.to_text() for poly in self.a],
            "g": [poly.to_text() for poly in self.g],
        }
        if self.noise is not None:
            out["noise"] = {
                "output_variance": self.noise.output_variance,
                "process_variance": self.noise.process_variance,
            }
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SystemModel":
        names = system_variables(d["n"], d["m"])
        noise = None
        if d.get("noise"):
            noise = NoiseSpec(
                output_variance=float(d["noise"].get("output_variance", 0.0)),
                process_variance=float(d["noise"].get("process_variance", 0.0)),
            )
        return cls(
            d["domain"], d["n"], d["m"], d["p"],
            [ParamPolynomial.from_text(names, t) for t in d["a"]],
            [ParamPolynomial.from_text(names, t) for t in d["g"]],
            noise,
        )


def fan_system() -> SystemModel:
    """Third-order benchmark system with position output.

    dx1 = x2
    dx2 = x2 - x2^3/3 - x2*x3^2
    dx3 = x2 - x3 - x3^3/3 - x3*x2^2
    y = x1
    """
    names = system_variables(3, 0)
    x1 = ParamPolynomial.variable(names, 0)
    x2 = ParamPolynomial.variable(names, 1)
    x3 = ParamPolynomial.variable(names, 2)
    a = [
        x2,
        x2 - (x2 * x2 * x2) * (1.0 / 3.0) - x2 * x3 * x3,
        x2 - x3 - (x3 * x3 * x3) * (1.0 / 3.0) - x3 * x2 * x2,
    ]
    return SystemModel("ct", 3, 0, 1, a, [x1])


@dataclass
class ObserverBasis:
    """Linearly parameterized (e, f) pair plus metric-variable bookkeeping.

    ``e`` and ``f`` are vectors of polynomials whose coefficients are affine
    in theta. ``p_ids[(i, j)]`` gives the theta index of metric entry P_ij
    (i <= j); when ``tie_e_to_metric`` is set, e(xh) = P xh shares those ids.
    """

    n: int
    m: int
    p: int
    e: list[ParamPolynomial]
    f: list[ParamPolynomial]
    q: int
    p_ids: dict
    e_ids: dict = field(default_factory=dict)
    f_ids: dict = field(default_factory=dict)
    deg_e: int = 1
    deg_f: int = 1
    tie_e_to_metric: bool = False

    @property
    def variables(self):
        return observer_variables(self.n, self.m, self.p)

    @property
    def xh_indices(self):
        return list(range(self.n))

    def metric_at(self, theta) -> np.ndarray:
        P = np.zeros((self.n, self.n))
        for (i, j), idx in self.p_ids.items():
            P[i, j] = theta[idx]
            P[j, i] = theta[idx]
        return P

    def f_coefficient_ids(self) -> list[int]:
        return sorted(self.f_ids.values())

    def to_dict(self) -> dict:
        return {
            "n": self.n, "m": self.m, "p": self.p,
            "deg_e": self.deg_e, "deg_f": self.deg_f,
            "tie_e_to_metric": self.tie_e_to_metric,
        }


def _metric_ids(n: int, start: int = 0):
    ids = {}
    k = start
    for i in range(n):
        for j in range(i, n):
            ids[(i, j)] = k
            k += 1
    return ids, k


def ct1_basis(sys: SystemModel, deg_f: int) -> ObserverBasis:
    """Basis with e(xh) = P xh tied to the (symmetric) contraction metric."""
    n, m, p = sys.n, sys.m, sys.p
    names = observer_variables(n, m, p)
    p_ids, k = _metric_ids(n)
    e = []
    for i in range(n):
        terms = {}
        for j in range(n):
            key = (min(i, j), max(i, j))
            terms[Monomial.var(j)] = AffineCoeff(0.0, {p_ids[key]: 1.0})
        e.append(ParamPolynomial(names, terms))
    f, f_ids, k = _monomial_vector(names, n, list(range(len(names))), deg_f, k)
    return ObserverBasis(n, m, p, e, f, k, p_ids, {}, f_ids, 1, deg_f, True)


def default_poly_basis(sys: SystemModel, deg_e: int, deg_f: int) -> ObserverBasis:
    """General basis: free e over xh monomials, free f over (xh, u, y) monomials.

    With deg_e = 1 the e-basis is exactly the n^2 linear maps; higher degrees
    use all monomial vector fields of total degree <= deg_e. The metric P is
    a separate decision variable.
    """
    if deg_e < 1 or deg_f < 1:
        raise ValueError("degrees must be >= 1")
    n, m, p = sys.n, sys.m, sys.p
    names = observer_variables(n, m, p)
    p_ids, k = _metric_ids(n)
    if deg_e == 1:
        e = []
        e_ids = {}
        for i in range(n):
            terms = {}
            for j in range(n):
                e_ids[(i, Monomial.var(j))] = k
                terms[Monomial.var(j)] = AffineCoeff(0.0, {k: 1.0})
                k += 1
            e.append(ParamPolynomial(names, terms))
    else:
        e, e_ids, k = _monomial_vector(names, n, list(range(n)), deg_e, k)
    f, f_ids, k = _monomial_vector(names, n, list(range(len(names))), deg_f, k)
    return ObserverBasis(n, m, p, e, f, k, p_ids, e_ids, f_ids, deg_e, deg_f, False)


def _monomial_vector(names, rows, var_indices, maxdeg, start):
    """Rows of free linear combinations of all monomials over var_indices."""
    sub = monomial_basis(len(var_indices), maxdeg)
    monos = []
    for msub in sub:
        powers = tuple(sorted((var_indices[i], pw) for i, pw in msub.powers))
        monos.append(Monomial(powers))
    vec = []
    ids = {}
    k = start
    for i in range(rows):
        terms = {}
        for mono in monos:
            ids[(i, mono)] = k
            terms[mono] = AffineCoeff(0.0, {k: 1.0})
            k += 1
        vec.append(ParamPolynomial(names, terms))
    return vec, ids, k


def make_E_F(basis: ObserverBasis) -> tuple[PolyMatrix, PolyMatrix]:
    """Jacobians of e and f with respect to the estimate variables."""
    E = jacobian(basis.e, basis.xh_indices)
    F = jacobian(basis.f, basis.xh_indices)
    return E, F


@dataclass
class ObserverModel:
    """A concrete observer: bound (e, f) plus its contraction evidence."""

    set_kind: str                    # "ct1" | "ct2" | "dt"
    mode: str                        # "l2" | "exp"
    n: int
    m: int
    p: int
    e: list[ParamPolynomial]         # numeric, over observer variables
    f: list[ParamPolynomial]
    P: np.ndarray
    mu: float = 1e-3
    lam: float | None = None
    h: float | None = None
    H_fixed: np.ndarray | None = None
    theta: np.ndarray | None = None
    basis_meta: dict | None = None
    certificates: dict = field(default_factory=dict)

    def __post_init__(self):
        self._E = jacobian(self.e, list(range(self.n)))
        self._F = jacobian(self.f, list(range(self.n)))
        self._e_eval = PolyEvaluator(self.e)
        self._f_eval = PolyEvaluator(self.f)
        self._E_evals = [PolyEvaluator(row) for row in self._E.entries]
        self._F_evals = [PolyEvaluator(row) for row in self._F.entries]

    @property
    def variables(self):
        return observer_variables(self.n, self.m, self.p)

    def point(self, xh, u=None, y=None) -> np.ndarray:
        parts = [np.atleast_1d(np.asarray(xh, dtype=float))]
        parts.append(np.zeros(self.m) if u is None else np.atleast_1d(np.asarray(u, dtype=float)))
        parts.append(np.zeros(self.p) if y is None else np.atleast_1d(np.asarray(y, dtype=float)))
        return np.concatenate(parts)

    def e_at(self, xh) -> np.ndarray:
        return self._e_eval(self.point(xh))

    def f_at(self, xh, u=None, y=None) -> np.ndarray:
        return self._f_eval(self.point(xh, u, y))

    def E_at(self, xh) -> np.ndarray:
        pt = self.point(xh)
        return np.stack([ev(pt) for ev in self._E_evals])

    def F_at(self, xh, u=None, y=None) -> np.ndarray:
        pt = self.point(xh, u, y)
        return np.stack([ev(pt) for ev in self._F_evals])

    @classmethod
    def from_parts(cls, set_kind, mode, sys_dims, e, f, P, **kw) -> "ObserverModel":
        n, m, p = sys_dims
        return cls(set_kind, mode, n, m, p, list(e), list(f),
                   np.atleast_2d(np.asarray(P, dtype=float)), **kw)

    def to_dict(self) -> dict:
        out = {
            "set_kind": self.set_kind, "mode": self.mode,
            "n": self.n, "m": self.m, "p": self.p,
            "e": [poly.to_text() for poly in self.e],
            "f": [poly.to_text() for poly in self.f],
            "P": [[repr(float(v)) for v in row] for row in np.asarray(self.P)],
            "mu": self.mu,
            "lambda": self.lam,
            "h": self.h,
            "certificates": self.certificates,
        }
        if self.H_fixed is not None:
            out["H_fixed"] = [[repr(float(v)) for v in row] for row in np.asarray(self.H_fixed)]
        if self.theta is not None:
            out["theta"] = [repr(float(v)) for v in self.theta]
        if self.basis_meta is not None:
            out["basis"] = self.basis_meta
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ObserverModel":
        names = observer_variables(d["n"], d["m"], d["p"])
        P = np.array([[float(v) for v in row] for row in d["P"]])
        H = None
        if d.get("H_fixed") is not None:
            H = np.array([[float(v) for v in row] for row in d["H_fixed"]])
        theta = None
        if d.get("theta") is not None:
            theta = np.array([float(v) for v in d["theta"]])
        return cls(
            d["set_kind"], d["mode"], d["n"], d["m"], d["p"],
            [ParamPolynomial.from_text(names, t) for t in d["e"]],
            [ParamPolynomial.from_text(names, t) for t in d["f"]],
            P,
            mu=float(d.get("mu", 1e-3)),
            lam=d.get("lambda"),
            h=d.get("h"),
            H_fixed=H,
            theta=theta,
            basis_meta=d.get("basis"),
            certificates=d.get("certificates", {}),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ObserverModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
