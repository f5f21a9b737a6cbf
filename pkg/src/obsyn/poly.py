"""Sparse multivariate polynomials whose coefficients may be affine in a decision vector.

The polynomial layer is the common currency of the whole toolkit: observer
maps, their Jacobians, and every matrix inequality are assembled from
``ParamPolynomial`` objects before being compiled into semidefinite programs.
Coefficients are ``AffineCoeff`` values, i.e. ``const + sum_i w_i * theta_i``
over a global decision vector ``theta``; purely numeric polynomials are the
special case with no linear part.

Monomials are ordered graded-lexicographically (degree first, then x1-major
lexicographic) so that every downstream basis, SDP block, and serialized file
has a deterministic layout.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np

__all__ = [
    "AffineCoeff",
    "Monomial",
    "ParamPolynomial",
    "PolyMatrix",
    "LinearEquation",
    "monomial_basis",
    "differentiate",
    "jacobian",
    "coefficients_equal",
    "PolyEvaluator",
]


class AffineCoeff:
    """A scalar of the form ``const + sum_i lin[i] * theta_i``.

    ``lin`` maps decision-variable indices to weights. Products of two
    coefficients are only defined when at least one side is numeric, which
    keeps every polynomial affine in theta.
    """

    __slots__ = ("const", "lin")

    def __init__(self, const: float = 0.0, lin: dict[int, float] | None = None):
        self.const = float(const)
        self.lin: dict[int, float] = {}
        if lin:
            for k, v in lin.items():
                if v != 0.0:
                    self.lin[int(k)] = float(v)

    @property
    def is_numeric(self) -> bool:
        return not self.lin

    def value(self, theta=None) -> float:
        if not self.lin:
            return self.const
        if theta is None:
            raise ValueError("coefficient depends on theta but no theta given")
        return self.const + sum(w * theta[i] for i, w in self.lin.items())

    def is_zero(self, tol: float = 0.0) -> bool:
        if abs(self.const) > tol:
            return False
        return all(abs(w) <= tol for w in self.lin.values())

    def __add__(self, other):
        other = _as_coeff(other)
        lin = dict(self.lin)
        for i, w in other.lin.items():
            lin[i] = lin.get(i, 0.0) + w
        return AffineCoeff(self.const + other.const, lin)

    __radd__ = __add__

    def __neg__(self):
        return AffineCoeff(-self.const, {i: -w for i, w in self.lin.items()})

    def __sub__(self, other):
        return self + (-_as_coeff(other))

    def __rsub__(self, other):
        return _as_coeff(other) + (-self)

    def __mul__(self, other):
        other = _as_coeff(other)
        if self.lin and other.lin:
            raise ValueError("product of two theta-dependent coefficients is not affine")
        if other.lin:
            self, other = other, self
        # other is numeric here
        s = other.const
        return AffineCoeff(self.const * s, {i: w * s for i, w in self.lin.items()})

    __rmul__ = __mul__

    def __repr__(self):
        if self.is_numeric:
            return f"AffineCoeff({self.const!r})"
        return f"AffineCoeff({self.const!r}, {self.lin!r})"


def _as_coeff(x) -> AffineCoeff:
    if isinstance(x, AffineCoeff):
        return x
    return AffineCoeff(float(x))


@dataclass(frozen=True)
class Monomial:
    """Product of indeterminate powers, stored sparsely as ((var, power), ...).

    Zero powers are never stored, so the representation is canonical and
    hashable. The graded-lex key orders by total degree first, then
    lexicographically with the lowest variable index dominating.
    """

    powers: tuple[tuple[int, int], ...] = ()

    @staticmethod
    def from_dense(exps) -> "Monomial":
        return Monomial(tuple((i, int(e)) for i, e in enumerate(exps) if e))

    @staticmethod
    def one() -> "Monomial":
        return Monomial(())

    @staticmethod
    def var(i: int, power: int = 1) -> "Monomial":
        if power == 0:
            return Monomial(())
        return Monomial(((int(i), int(power)),))

    @property
    def degree(self) -> int:
        return sum(p for _, p in self.powers)

    def dense(self, nvars: int):
        out = [0] * nvars
        for i, p in self.powers:
            out[i] = p
        return tuple(out)

    def power_of(self, var: int) -> int:
        for i, p in self.powers:
            if i == var:
                return p
        return 0

    def mul(self, other: "Monomial") -> "Monomial":
        acc = dict(self.powers)
        for i, p in other.powers:
            acc[i] = acc.get(i, 0) + p
        return Monomial(tuple(sorted(acc.items())))

    def diff(self, var: int):
        """Return (factor, monomial) of the partial derivative, or None."""
        p = self.power_of(var)
        if p == 0:
            return None
        acc = dict(self.powers)
        if p == 1:
            del acc[var]
        else:
            acc[var] = p - 1
        return float(p), Monomial(tuple(sorted(acc.items())))

    def eval(self, point) -> float:
        out = 1.0
        for i, p in self.powers:
            out *= point[i] ** p
        return out

    def grlex_key(self, nvars: int):
        return (self.degree, tuple(-e for e in self.dense(nvars)))

    def __repr__(self):
        if not self.powers:
            return "1"
        return " ".join(f"x{i}^{p}" if p > 1 else f"x{i}" for i, p in self.powers)


def monomial_basis(nvars: int, maxdeg: int) -> list[Monomial]:
    """All monomials in ``nvars`` variables of total degree <= maxdeg, graded-lex.

    The list has length C(nvars + maxdeg, maxdeg).
    """
    if nvars < 1:
        raise ValueError("nvars must be >= 1")
    if maxdeg < 0:
        raise ValueError("maxdeg must be >= 0")
    monos = []
    for deg in range(maxdeg + 1):
        for combo in combinations_with_replacement(range(nvars), deg):
            acc: dict[int, int] = {}
            for i in combo:
                acc[i] = acc.get(i, 0) + 1
            monos.append(Monomial(tuple(sorted(acc.items()))))
    monos.sort(key=lambda m: m.grlex_key(nvars))
    return monos


class ParamPolynomial:
    """Polynomial over named indeterminates with AffineCoeff coefficients.

    Immutable by convention: all operations return new objects. ``variables``
    is the ordered tuple of indeterminate names; monomial variable indices
    refer to positions in that tuple.
    """

    __slots__ = ("variables", "terms")

    def __init__(self, variables, terms: dict[Monomial, AffineCoeff] | None = None):
        self.variables = tuple(variables)
        self.terms: dict[Monomial, AffineCoeff] = {}
        if terms:
            for m, c in terms.items():
                c = _as_coeff(c)
                if not c.is_zero():
                    self.terms[m] = c

    # -- constructors ------------------------------------------------------

    @classmethod
    def zero(cls, variables) -> "ParamPolynomial":
        return cls(variables)

    @classmethod
    def constant(cls, variables, value) -> "ParamPolynomial":
        return cls(variables, {Monomial.one(): _as_coeff(value)})

    @classmethod
    def variable(cls, variables, index: int) -> "ParamPolynomial":
        return cls(variables, {Monomial.var(index): AffineCoeff(1.0)})

    @classmethod
    def theta_term(cls, variables, theta_index: int, monomial: Monomial | None = None) -> "ParamPolynomial":
        m = monomial if monomial is not None else Monomial.one()
        return cls(variables, {m: AffineCoeff(0.0, {theta_index: 1.0})})

    # -- basic queries ------------------------------------------------------

    @property
    def nvars(self) -> int:
        return len(self.variables)

    @property
    def degree(self) -> int:
        return max((m.degree for m in self.terms), default=0)

    @property
    def is_numeric(self) -> bool:
        return all(c.is_numeric for c in self.terms.values())

    def coeff(self, monomial: Monomial) -> AffineCoeff:
        return self.terms.get(monomial, AffineCoeff(0.0))

    def sorted_monomials(self) -> list[Monomial]:
        return sorted(self.terms, key=lambda m: m.grlex_key(self.nvars))

    def theta_ids(self) -> set[int]:
        ids: set[int] = set()
        for c in self.terms.values():
            ids.update(c.lin)
        return ids

    # -- arithmetic ----------------------------------------------------------

    def _check_vars(self, other: "ParamPolynomial"):
        if self.variables != other.variables:
            raise ValueError(f"variable mismatch: {self.variables} vs {other.variables}")

    def __add__(self, other):
        if not isinstance(other, ParamPolynomial):
            other = ParamPolynomial.constant(self.variables, other)
        self._check_vars(other)
        terms = dict(self.terms)
        for m, c in other.terms.items():
            acc = terms.get(m)
            terms[m] = c if acc is None else acc + c
        return ParamPolynomial(self.variables, terms)

    __radd__ = __add__

    def __neg__(self):
        return ParamPolynomial(self.variables, {m: -c for m, c in self.terms.items()})

    def __sub__(self, other):
        if not isinstance(other, ParamPolynomial):
            other = ParamPolynomial.constant(self.variables, other)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, ParamPolynomial):
            c = _as_coeff(other)
            return ParamPolynomial(self.variables, {m: cc * c for m, cc in self.terms.items()})
        self._check_vars(other)
        terms: dict[Monomial, AffineCoeff] = {}
        for m1, c1 in self.terms.items():
            for m2, c2 in other.terms.items():
                m = m1.mul(m2)
                c = c1 * c2
                acc = terms.get(m)
                terms[m] = c if acc is None else acc + c
        return ParamPolynomial(self.variables, terms)

    __rmul__ = __mul__

    def scale(self, s: float) -> "ParamPolynomial":
        return self * float(s)

    def prune(self, tol: float = 0.0) -> "ParamPolynomial":
        return ParamPolynomial(
            self.variables,
            {m: c for m, c in self.terms.items() if not c.is_zero(tol)},
        )

    # -- calculus and substitution -------------------------------------------

    def diff(self, var: int) -> "ParamPolynomial":
        if var < 0 or var >= self.nvars:
            raise ValueError(f"unknown variable index {var}")
        terms: dict[Monomial, AffineCoeff] = {}
        for m, c in self.terms.items():
            d = m.diff(var)
            if d is None:
                continue
            factor, md = d
            nc = c * factor
            acc = terms.get(md)
            terms[md] = nc if acc is None else acc + nc
        return ParamPolynomial(self.variables, terms)

    def substitute(self, mapping: dict[int, "ParamPolynomial"]) -> "ParamPolynomial":
        """Replace variables by numeric polynomials (over the same table).

        Used for correctness constraints, e.g. y -> g(x, u) or xh_i -> a_i(x, u).
        Substituted polynomials must be numeric so the result stays affine in
        theta.
        """
        for q in mapping.values():
            if not q.is_numeric:
                raise ValueError("substituted polynomials must be numeric")
            if q.variables != self.variables:
                raise ValueError("substitution requires a shared variable table")
        power_cache: dict[tuple[int, int], ParamPolynomial] = {}

        def poly_pow(var: int, k: int) -> ParamPolynomial:
            key = (var, k)
            if key not in power_cache:
                base = mapping[var]
                out = ParamPolynomial.constant(self.variables, 1.0)
                for _ in range(k):
                    out = out * base
                power_cache[key] = out
            return power_cache[key]

        result = ParamPolynomial.zero(self.variables)
        for m, c in self.terms.items():
            piece = ParamPolynomial(self.variables, {Monomial.one(): c})
            residual: dict[int, int] = {}
            for i, p in m.powers:
                if i in mapping:
                    piece = piece * poly_pow(i, p)
                else:
                    residual[i] = p
            if residual:
                piece = piece * ParamPolynomial(
                    self.variables, {Monomial(tuple(sorted(residual.items()))): AffineCoeff(1.0)}
                )
            result = result + piece
        return result

    def rename(self, variables) -> "ParamPolynomial":
        """Reinterpret the polynomial over a same-length variable table."""
        if len(variables) != self.nvars:
            raise ValueError("rename requires the same number of variables")
        return ParamPolynomial(tuple(variables), dict(self.terms))

    def extend(self, variables) -> "ParamPolynomial":
        """Embed into a larger variable table that starts with self.variables."""
        variables = tuple(variables)
        if variables[: self.nvars] != self.variables:
            raise ValueError("extended table must start with the current variables")
        return ParamPolynomial(variables, dict(self.terms))

    # -- evaluation ------------------------------------------------------------

    def bind(self, theta) -> "ParamPolynomial":
        """Fix theta, producing a numeric polynomial."""
        terms = {m: AffineCoeff(c.value(theta)) for m, c in self.terms.items()}
        return ParamPolynomial(self.variables, terms).prune()

    def eval(self, point, theta=None) -> float:
        return sum(c.value(theta) * m.eval(point) for m, c in self.terms.items())

    def eval_affine(self, point) -> AffineCoeff:
        """Evaluate the indeterminates only, leaving an affine function of theta."""
        out = AffineCoeff(0.0)
        for m, c in self.terms.items():
            out = out + c * m.eval(point)
        return out

    # -- text form ---------------------------------------------------------------

    def to_text(self) -> str:
        """Serialize a numeric polynomial as ``coeff * x^a y^b`` terms joined by ' + '."""
        if not self.is_numeric:
            raise ValueError("only numeric polynomials have a text form")
        if not self.terms:
            return "0"
        parts = []
        for m in self.sorted_monomials():
            c = self.terms[m].const
            factors = " ".join(
                f"{self.variables[i]}^{p}" if p > 1 else self.variables[i] for i, p in m.powers
            )
            parts.append(f"{c!r} * {factors}" if m.powers else f"{c!r}")
        return " + ".join(parts)

    @classmethod
    def from_text(cls, variables, text: str) -> "ParamPolynomial":
        variables = tuple(variables)
        index = {name: i for i, name in enumerate(variables)}
        poly = cls.zero(variables)
        text = text.strip()
        if text in ("", "0"):
            return poly
        for raw in text.split(" + "):
            raw = raw.strip()
            if "*" in raw:
                coeff_str, monos = raw.split("*", 1)
                powers: dict[int, int] = {}
                for tok in monos.split():
                    m = re.fullmatch(r"([A-Za-z_]\w*)(?:\^(\d+))?", tok)
                    if not m or m.group(1) not in index:
                        raise ValueError(f"bad monomial token {tok!r}")
                    powers[index[m.group(1)]] = powers.get(index[m.group(1)], 0) + int(m.group(2) or 1)
                mono = Monomial(tuple(sorted(powers.items())))
            else:
                coeff_str, mono = raw, Monomial.one()
            poly = poly + cls(variables, {mono: AffineCoeff(float(coeff_str))})
        return poly

    def __repr__(self):
        if not self.terms:
            return "ParamPolynomial(0)"
        bits = []
        for m in self.sorted_monomials()[:6]:
            bits.append(f"{self.terms[m]!r}*{m!r}")
        if len(self.terms) > 6:
            bits.append("...")
        return "ParamPolynomial(" + " + ".join(bits) + ")"


class PolyMatrix:
    """Dense matrix of ParamPolynomials sharing one variable table."""

    __slots__ = ("rows", "cols", "entries", "variables")

    def __init__(self, entries):
        self.entries = [list(row) for row in entries]
        self.rows = len(self.entries)
        self.cols = len(self.entries[0]) if self.rows else 0
        for row in self.entries:
            if len(row) != self.cols:
                raise ValueError("ragged PolyMatrix")
        self.variables = self.entries[0][0].variables if self.rows and self.cols else ()
        for row in self.entries:
            for e in row:
                if e.variables != self.variables:
                    raise ValueError("entries must share the variable table")

    @classmethod
    def zeros(cls, variables, rows, cols):
        return cls([[ParamPolynomial.zero(variables) for _ in range(cols)] for _ in range(rows)])

    @classmethod
    def from_numeric(cls, variables, mat):
        mat = np.asarray(mat, dtype=float)
        return cls(
            [[ParamPolynomial.constant(variables, mat[i, j]) for j in range(mat.shape[1])]
             for i in range(mat.shape[0])]
        )

    def __getitem__(self, ij):
        return self.entries[ij[0]][ij[1]]

    def transpose(self) -> "PolyMatrix":
        return PolyMatrix([[self.entries[i][j] for i in range(self.rows)] for j in range(self.cols)])

    def __add__(self, other: "PolyMatrix") -> "PolyMatrix":
        if (self.rows, self.cols) != (other.rows, other.cols):
            raise ValueError("dimension mismatch")
        return PolyMatrix(
            [[self.entries[i][j] + other.entries[i][j] for j in range(self.cols)] for i in range(self.rows)]
        )

    def __sub__(self, other: "PolyMatrix") -> "PolyMatrix":
        return self + other.scale(-1.0)

    def scale(self, s: float) -> "PolyMatrix":
        return PolyMatrix([[e * float(s) for e in row] for row in self.entries])

    def is_symmetric(self, tol: float = 0.0) -> bool:
        if self.rows != self.cols:
            return False
        for i in range(self.rows):
            for j in range(i + 1, self.cols):
                if not (self.entries[i][j] - self.entries[j][i]).prune(tol).terms == {}:
                    return False
        return True

    def bind(self, theta) -> "PolyMatrix":
        return PolyMatrix([[e.bind(theta) for e in row] for row in self.entries])

    def eval(self, point, theta=None) -> np.ndarray:
        out = np.empty((self.rows, self.cols))
        for i in range(self.rows):
            for j in range(self.cols):
                out[i, j] = self.entries[i][j].eval(point, theta)
        return out

    def theta_ids(self) -> set[int]:
        ids: set[int] = set()
        for row in self.entries:
            for e in row:
                ids.update(e.theta_ids())
        return ids

    @staticmethod
    def block(rows_of_blocks) -> "PolyMatrix":
        """Assemble a block matrix from a 2-D grid of PolyMatrix pieces."""
        entry_rows = []
        for brow in rows_of_blocks:
            height = brow[0].rows
            for b in brow:
                if b.rows != height:
                    raise ValueError("inconsistent block heights")
            for i in range(height):
                entry_rows.append([e for b in brow for e in b.entries[i]])
        return PolyMatrix(entry_rows)


def differentiate(p: ParamPolynomial, var: int) -> ParamPolynomial:
    """Exact partial derivative with respect to the var-th indeterminate."""
    return p.diff(var)


def jacobian(vec, var_indices) -> PolyMatrix:
    """Jacobian matrix: entry (i, j) = d vec[i] / d vars[j]."""
    vec = list(vec)
    if not vec:
        raise ValueError("empty polynomial vector")
    table = vec[0].variables
    for v in vec:
        if v.variables != table:
            raise ValueError("all entries must share the variable declaration")
    return PolyMatrix([[v.diff(j) for j in var_indices] for v in vec])


@dataclass
class LinearEquation:
    """A single linear equation sum_i coeffs[i] * theta_i = rhs."""

    coeffs: dict[int, float] = field(default_factory=dict)
    rhs: float = 0.0

    def is_trivial(self, tol: float = 0.0) -> bool:
        return all(abs(w) <= tol for w in self.coeffs.values()) and abs(self.rhs) <= tol


def coefficients_equal(p: ParamPolynomial, q: ParamPolynomial) -> list[LinearEquation]:
    """Linear equations on theta equivalent to p(.; theta) == q(.; theta).

    One equation per monomial appearing in p or q; trivially-satisfied rows
    (zero coefficients, zero rhs) are dropped.
    """
    if p.variables != q.variables:
        raise ValueError("polynomials must share the variable declaration")
    eqs = []
    for m in set(p.terms) | set(q.terms):
        d = p.coeff(m) - q.coeff(m)
        eq = LinearEquation(dict(d.lin), -d.const)
        if not eq.is_trivial():
            eqs.append(eq)
    return eqs


class PolyEvaluator:
    """Vectorized evaluator for a vector of numeric polynomials.

    Precomputes exponent and coefficient arrays so repeated evaluation inside
    Newton/RK4 loops is a couple of numpy ops per call.
    """

    def __init__(self, polys):
        polys = list(polys)
        if not polys:
            raise ValueError("no polynomials")
        self.nvars = polys[0].nvars
        self.npolys = len(polys)
        monos: list[Monomial] = sorted(
            {m for p in polys for m in p.terms}, key=lambda m: m.grlex_key(self.nvars)
        )
        self.expmat = np.array([m.dense(self.nvars) for m in monos], dtype=np.int64)
        if self.expmat.size == 0:
            self.expmat = np.zeros((0, self.nvars), dtype=np.int64)
        self.coefmat = np.zeros((self.npolys, len(monos)))
        index = {m: k for k, m in enumerate(monos)}
        for r, p in enumerate(polys):
            if not p.is_numeric:
                raise ValueError("PolyEvaluator requires numeric polynomials")
            for m, c in p.terms.items():
                self.coefmat[r, index[m]] = c.const

    def __call__(self, point) -> np.ndarray:
        point = np.asarray(point, dtype=float)
        if self.expmat.shape[0] == 0:
            return np.zeros(self.npolys)
        vals = np.prod(point[None, :] ** self.expmat, axis=1)
        return self.coefmat @ vals
