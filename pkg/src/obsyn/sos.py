"""Compile sum-of-squares constraints on ParamPolynomials into SDP blocks.

A scalar constraint "p(v) - eps * sum_i m_i(v)^2 is SOS" becomes one PSD Gram
block Q plus coefficient-matching equalities between p and m(v)' Q m(v). A
matrix constraint M(v) >= eps*I is scalarized with a fresh auxiliary vector w
(w appears exactly quadratically) and compiled the same way with a Gram basis
linear in w.

Feasibility of the augmented SDP certifies the inequality globally in the
quantified variables; margins make strict inequalities representable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .poly import AffineCoeff, Monomial, ParamPolynomial, PolyMatrix, monomial_basis
from .sdp import SdpBuilder

__all__ = [
    "SosCertificate",
    "SosHandle",
    "compile_scalar",
    "compile_matrix",
    "verify_certificate",
    "extract_certificate",
]


@dataclass
class SosCertificate:
    variables: tuple
    basis: list[Monomial]
    gram: np.ndarray
    margin: float
    residual: float

    def to_dict(self) -> dict:
        return {
            "variables": list(self.variables),
            "basis": [[list(pw) for pw in m.powers] for m in self.basis],
            "gram": [[repr(float(v)) for v in row] for row in self.gram],
            "margin": self.margin,
            "residual": self.residual,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SosCertificate":
        basis = [Monomial(tuple((int(i), int(p)) for i, p in m)) for m in d["basis"]]
        gram = np.array([[float(v) for v in row] for row in d["gram"]])
        return cls(tuple(d["variables"]), basis, gram, float(d["margin"]), float(d["residual"]))


@dataclass
class SosHandle:
    """Bookkeeping for one compiled constraint: where its Gram lives."""

    target: ParamPolynomial          # p - margin*sum(m_i^2), affine in theta
    basis: list[Monomial]
    gram_ids: dict                   # (i, j) i<=j -> builder variable id
    block_index: int
    margin: float
    kind: str = "scalar"


def _newton_reduce(poly: ParamPolynomial, candidates: list[Monomial]) -> list[Monomial]:
    """Keep candidate m with 2*exp(m) inside the convex hull of p's support."""
    nv = poly.nvars
    support = np.array([m.dense(nv) for m in poly.terms], dtype=float)
    if support.shape[0] == 0:
        return []
    kept = []
    ones = np.ones((1, support.shape[0]))
    for m in candidates:
        target = 2.0 * np.array(m.dense(nv), dtype=float)
        res = linprog(
            c=np.zeros(support.shape[0]),
            A_eq=np.vstack([support.T, ones]),
            b_eq=np.concatenate([target, [1.0]]),
            bounds=(0, None),
            method="highs",
        )
        if res.status == 0:
            kept.append(m)
    return kept


def _compile_gram(builder: SdpBuilder, target: ParamPolynomial, basis: list[Monomial],
                  category: str) -> tuple[dict, int]:
    """Add Gram variables/equalities for target == m' Q m; return (ids, block)."""
    nb = len(basis)
    ids_range = builder.new_vars(nb * (nb + 1) // 2, "gram")
    gram_ids = {}
    k = ids_range.start
    for i in range(nb):
        for j in range(i, nb):
            gram_ids[(i, j)] = k
            k += 1
    coeff = {}
    for (i, j), idx in gram_ids.items():
        E = np.zeros((nb, nb))
        E[i, j] = 1.0
        E[j, i] = 1.0
        if i == j:
            E[i, i] = 1.0
        coeff[idx] = E
    block = builder.add_block(nb, np.zeros((nb, nb)), coeff, category)

    products: dict[Monomial, list] = {}
    for i in range(nb):
        for j in range(i, nb):
            products.setdefault(basis[i].mul(basis[j]), []).append((i, j))
    for gamma in set(target.terms) | set(products):
        c = target.coeff(gamma)
        row = {tid: w for tid, w in c.lin.items()}
        for (i, j) in products.get(gamma, []):
            row[gram_ids[(i, j)]] = row.get(gram_ids[(i, j)], 0.0) - (1.0 if i == j else 2.0)
        builder.add_equality(row, -c.const)
    return gram_ids, block


def compile_scalar(builder: SdpBuilder, p: ParamPolynomial, margin: float = 0.0,
                   newton_reduce: bool = True, category: str = "gram") -> SosHandle:
    """Certify p(v) >= margin * sum_i m_i(v)^2 for all v via one Gram block.

    The Gram basis is all monomials of degree <= deg(p)/2 in the variables
    appearing in p, reduced by the Newton polytope test when that strips at
    least a quarter of the candidates.
    """
    deg = p.degree
    if deg % 2 != 0:
        raise ValueError("SOS certification needs an even-degree polynomial")
    used = sorted({i for m in p.terms for i, _ in m.powers})
    if not used:
        used = [0]
    sub = monomial_basis(len(used), deg // 2)
    candidates = [Monomial(tuple(sorted((used[i], pw) for i, pw in m.powers))) for m in sub]
    basis = candidates
    if newton_reduce and deg >= 2:
        kept = _newton_reduce(p, candidates)
        if len(kept) <= 0.75 * len(candidates):
            basis = kept
    target = p
    if margin:
        sq = ParamPolynomial.zero(p.variables)
        for m in basis:
            sq = sq + ParamPolynomial(p.variables, {m.mul(m): AffineCoeff(1.0)})
        target = p - sq * margin
    gram_ids, block = _compile_gram(builder, target, basis, category)
    return SosHandle(target, basis, gram_ids, block, margin, "scalar")


def compile_matrix(builder: SdpBuilder, M: PolyMatrix, margin: float = 0.0,
                   category: str = "gram") -> SosHandle:
    """Certify M(v) >= margin*I for all v via w'(M - margin*I)w SOS in (v, w)."""
    if M.rows != M.cols:
        raise ValueError("matrix SOS needs a square matrix")
    if not M.is_symmetric(1e-12):
        raise ValueError("matrix SOS needs a symmetric matrix")
    r = M.rows
    base_vars = M.variables
    names = tuple(base_vars) + tuple(f"_w{k + 1}" for k in range(r))
    nb_base = len(base_vars)

    deg_v = max(e.degree for row in M.entries for e in row)
    half = (deg_v + 1) // 2
    vused = sorted({i for row in M.entries for e in row for mm in e.terms for i, _ in mm.powers})
    if vused:
        sub = monomial_basis(len(vused), half)
        vmonos = [Monomial(tuple(sorted((vused[i], pw) for i, pw in m.powers))) for m in sub]
    else:
        vmonos = [Monomial.one()]
    basis = [Monomial(tuple(sorted(m.powers + ((nb_base + k, 1),))))
             for k in range(r) for m in vmonos]

    target = ParamPolynomial.zero(names)
    for i in range(r):
        for j in range(r):
            entry = M.entries[i][j].extend(names)
            if i == j and margin:
                entry = entry - margin
            if i == j:
                wij = Monomial(((nb_base + i, 2),))
            else:
                wij = Monomial(((nb_base + min(i, j), 1), (nb_base + max(i, j), 1)))
            target = target + entry * ParamPolynomial(names, {wij: AffineCoeff(1.0)})
    gram_ids, block = _compile_gram(builder, target, basis, category)
    return SosHandle(target, basis, gram_ids, block, margin, "matrix")


def extract_certificate(handle: SosHandle, z: np.ndarray) -> SosCertificate:
    """Read the solved Gram matrix back and measure the coefficient residual."""
    nb = len(handle.basis)
    Q = np.zeros((nb, nb))
    for (i, j), idx in handle.gram_ids.items():
        Q[i, j] = z[idx]
        Q[j, i] = z[idx]
    target = handle.target.bind(z)
    residual = _coefficient_residual(target, handle.basis, Q)
    return SosCertificate(target.variables, list(handle.basis), Q, handle.margin, residual)


def _coefficient_residual(target: ParamPolynomial, basis: list[Monomial], Q: np.ndarray) -> float:
    diff = dict(target.terms)
    nb = len(basis)
    for i in range(nb):
        for j in range(nb):
            if Q[i, j] == 0.0:
                continue
            gamma = basis[i].mul(basis[j])
            acc = diff.get(gamma, AffineCoeff(0.0))
            diff[gamma] = acc - Q[i, j]
    return max((abs(c.const) for c in diff.values()), default=0.0)


def verify_certificate(cert: SosCertificate, p: ParamPolynomial, theta=None,
                       eig_tol: float = 1e-8, res_tol: float = 1e-6) -> bool:
    """Audit a certificate: Q must be PSD and coefficient-match p - margin*sum m^2."""
    if np.linalg.eigvalsh(0.5 * (cert.gram + cert.gram.T))[0] < -eig_tol:
        return False
    target = p.bind(theta) if theta is not None else p
    if cert.margin:
        sq = ParamPolynomial.zero(target.variables)
        for m in cert.basis:
            sq = sq + ParamPolynomial(target.variables, {m.mul(m): AffineCoeff(1.0)})
        target = target - sq * cert.margin
    return _coefficient_residual(target, cert.basis, cert.gram) <= res_tol
