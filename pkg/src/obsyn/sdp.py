"""Dense semidefinite programming for small-to-medium LMI problems.

Problems are posed in the "dual" linear-matrix-inequality form

    minimize    c' z
    subject to  A0_b + sum_i z_i * Ai_b  >= 0   (PSD, one constraint per block)
                a_k' z = b_k                    (linear equalities)

Equalities are eliminated in presolve through a QR null-space
parameterization, 1x1 blocks are routed to a vectorized nonnegative-orthant
cone, and the remaining pure conic problem is solved by a primal-dual
path-following method with Nesterov-Todd scaling, Mehrotra
predictor-corrector steps, and a homogeneous self-dual embedding so that
infeasibility is certified by an improving dual ray rather than by timeout.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

__all__ = [
    "LmiBlock",
    "SdpProblem",
    "SdpSolution",
    "SolveOptions",
    "solve",
    "check_feasible",
    "dump_sdpa",
]


@dataclass
class LmiBlock:
    """One constraint A0 + sum_i z_i * coeff[i] >= 0 with symmetric matrices."""

    size: int
    a0: np.ndarray
    coeff: dict[int, np.ndarray] = field(default_factory=dict)
    category: str = "design"

    def validate(self, nvars: int, tol: float = 1e-12):
        a0 = np.asarray(self.a0, dtype=float)
        if a0.shape != (self.size, self.size):
            raise ValueError("A0 shape mismatch")
        if np.max(np.abs(a0 - a0.T), initial=0.0) > tol * max(1.0, np.max(np.abs(a0), initial=0.0)):
            raise ValueError("A0 not symmetric")
        for i, m in self.coeff.items():
            if not (0 <= i < nvars):
                raise ValueError(f"variable index {i} out of range")
            m = np.asarray(m, dtype=float)
            if m.shape != (self.size, self.size):
                raise ValueError("coefficient shape mismatch")
            if np.max(np.abs(m - m.T), initial=0.0) > tol * max(1.0, np.max(np.abs(m), initial=0.0)):
                raise ValueError(f"coefficient matrix for variable {i} not symmetric")

    def matrix_at(self, z) -> np.ndarray:
        out = np.array(self.a0, dtype=float, copy=True)
        for i, m in self.coeff.items():
            out += z[i] * m
        return 0.5 * (out + out.T)


@dataclass
class SdpProblem:
    nvars: int
    objective: np.ndarray
    blocks: list[LmiBlock]
    eq_lhs: np.ndarray | None = None   # (neq, nvars)
    eq_rhs: np.ndarray | None = None   # (neq,)

    def validate(self):
        c = np.asarray(self.objective, dtype=float)
        if c.shape != (self.nvars,):
            raise ValueError("objective length mismatch")
        if not self.blocks and self.eq_lhs is None:
            raise ValueError("problem needs at least one block or equality")
        for b in self.blocks:
            b.validate(self.nvars)
        if self.eq_lhs is not None:
            A = np.asarray(self.eq_lhs, dtype=float)
            rhs = np.asarray(self.eq_rhs, dtype=float)
            if A.ndim != 2 or A.shape[1] != self.nvars or rhs.shape != (A.shape[0],):
                raise ValueError("equality dimensions inconsistent")


@dataclass
class SdpSolution:
    status: str                      # optimal | infeasible | unbounded | max-iter | numerical-failure
    z: np.ndarray
    duals: list[np.ndarray]
    primal_obj: float
    dual_obj: float
    gap: float
    iterations: int = 0
    info: dict = field(default_factory=dict)


@dataclass
class SolveOptions:
    feastol: float = 1e-8
    gaptol: float = 1e-8
    max_iters: int = 200
    step_frac: float = 0.98
    verbose: bool = False


# ---------------------------------------------------------------------------
# svec helpers: symmetric matrices <-> packed vectors with <A,B> preserved.

_SQRT2 = np.sqrt(2.0)


class _SvecIndex:
    _cache: dict[int, "_SvecIndex"] = {}

    def __init__(self, n: int):
        iu, ju = np.triu_indices(n)
        self.n = n
        self.iu = iu
        self.ju = ju
        self.dim = iu.size
        self.scale = np.where(iu == ju, 1.0, _SQRT2)

    @classmethod
    def get(cls, n: int) -> "_SvecIndex":
        if n not in cls._cache:
            cls._cache[n] = cls(n)
        return cls._cache[n]

    def svec(self, M: np.ndarray) -> np.ndarray:
        return M[self.iu, self.ju] * self.scale

    def svec_many(self, Ms: np.ndarray) -> np.ndarray:
        return Ms[:, self.iu, self.ju] * self.scale[None, :]

    def smat(self, v: np.ndarray) -> np.ndarray:
        M = np.zeros((self.n, self.n))
        vals = v / self.scale
        M[self.iu, self.ju] = vals
        M[self.ju, self.iu] = vals
        return M


# ---------------------------------------------------------------------------
# presolve: equality elimination, free-variable handling, scaling.


class _Presolve:
    """Reduce to a pure conic problem min cr'w s.t. h - Gr w in cone."""

    def __init__(self, prob: SdpProblem):
        n = prob.nvars
        c = np.asarray(prob.objective, dtype=float).copy()
        self.n = n
        self.obj_offset = 0.0
        self.status: str | None = None
        self.farkas = None

        if prob.eq_lhs is not None and prob.eq_lhs.shape[0] > 0:
            A = np.asarray(prob.eq_lhs, dtype=float)
            b = np.asarray(prob.eq_rhs, dtype=float)
            # drop all-zero rows (consistency-checked)
            norms = np.max(np.abs(A), axis=1, initial=0.0)
            zero_rows = norms <= 1e-14
            if np.any(zero_rows) and np.max(np.abs(b[zero_rows]), initial=0.0) > 1e-9:
                self.status = "infeasible"
                self.reason = "inconsistent equalities (zero row, nonzero rhs)"
                return
            A, b = A[~zero_rows], b[~zero_rows]
            if A.shape[0] > 0:
                scale = np.maximum(np.max(np.abs(A), axis=1), 1e-300)
                A = A / scale[:, None]
                b = b / scale
                Q, R, piv = sla.qr(A.T, mode="economic", pivoting=True)
                diag = np.abs(np.diag(R))
                tol = max(A.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
                rank = int(np.sum(diag > max(tol, 1e-13)))
                z0, *_ = np.linalg.lstsq(A, b, rcond=None)
                if np.max(np.abs(A @ z0 - b), initial=0.0) > 1e-7 * max(1.0, np.max(np.abs(b), initial=0.0)):
                    # Farkas-style certificate from the least-squares residual
                    self.status = "infeasible"
                    self.reason = "inconsistent equality constraints"
                    self.farkas = A @ z0 - b
                    return
                Qfull, _ = sla.qr(A.T, mode="full")
                N = Qfull[:, rank:]
            else:
                z0 = np.zeros(n)
                N = np.eye(n)
        else:
            z0 = np.zeros(n)
            N = np.eye(n)

        self.z0 = z0
        self.N = N
        self.obj_offset = float(c @ z0)
        cr = N.T @ c

        # reduced blocks, split into scalar (orthant) and PSD groups
        self.sdp_blocks: list[tuple[int, np.ndarray, np.ndarray]] = []  # (size, A0r, Ar[k,nb,nb])
        self.sdp_meta: list[int] = []      # original block index
        self.lin_rows: list[np.ndarray] = []
        self.lin_consts: list[float] = []
        self.lin_meta: list[int] = []
        nw = N.shape[1]
        for bi, blk in enumerate(prob.blocks):
            a0 = 0.5 * (np.asarray(blk.a0, dtype=float) + np.asarray(blk.a0, dtype=float).T)
            ids = sorted(blk.coeff)
            if ids:
                mats = np.stack([0.5 * (np.asarray(blk.coeff[i]) + np.asarray(blk.coeff[i]).T) for i in ids])
                a0r = a0 + np.tensordot(z0[ids], mats, axes=1)
                Ar = np.tensordot(N[ids, :].T, mats, axes=1)  # (nw, nb, nb)
            else:
                a0r = a0
                Ar = np.zeros((nw, blk.size, blk.size))
            if blk.size == 1:
                self.lin_rows.append(Ar[:, 0, 0].copy())
                self.lin_consts.append(float(a0r[0, 0]))
                self.lin_meta.append(bi)
            else:
                self.sdp_blocks.append((blk.size, a0r, Ar))
                self.sdp_meta.append(bi)

        self.cr = cr
        self.nw = nw
        self.nblocks_orig = len(prob.blocks)

    def lift(self, w: np.ndarray) -> np.ndarray:
        return self.z0 + self.N @ w


# ---------------------------------------------------------------------------
# core conic solver on the reduced problem.


class _ConeData:
    """Stacked cone bookkeeping for the reduced problem.

    Vector layout: [linear part (l entries)] then svec'd PSD blocks in order.
    """

    def __init__(self, pres: _Presolve):
        self.l = len(pres.lin_rows)
        self.block_sizes = [sz for sz, _, _ in pres.sdp_blocks]
        self.svx = [_SvecIndex.get(sz) for sz in self.block_sizes]
        self.offsets = []
        off = self.l
        for sv in self.svx:
            self.offsets.append(off)
            off += sv.dim
        self.dim = off
        self.degree = self.l + sum(self.block_sizes)

        nw = pres.nw
        G = np.zeros((self.dim, nw))
        h = np.zeros(self.dim)
        if self.l:
            Lr = np.stack(pres.lin_rows)           # (l, nw)
            G[: self.l, :] = -Lr
            h[: self.l] = np.asarray(pres.lin_consts)
        for k, (sz, a0r, Ar) in enumerate(pres.sdp_blocks):
            sv = self.svx[k]
            o = self.offsets[k]
            h[o : o + sv.dim] = sv.svec(a0r)
            G[o : o + sv.dim, :] = -sv.svec_many(Ar).T
        self.G = G
        self.h = h

    def identity(self) -> np.ndarray:
        e = np.zeros(self.dim)
        e[: self.l] = 1.0
        for sv, o in zip(self.svx, self.offsets):
            e[o : o + sv.dim] = sv.svec(np.eye(sv.n))
        return e

    def mats(self, v: np.ndarray) -> list[np.ndarray]:
        return [sv.smat(v[o : o + sv.dim]) for sv, o in zip(self.svx, self.offsets)]

    def min_eig(self, v: np.ndarray) -> float:
        worst = np.inf
        if self.l:
            worst = min(worst, float(np.min(v[: self.l])))
        for M in self.mats(v):
            worst = min(worst, float(np.linalg.eigvalsh(M)[0]))
        return worst if np.isfinite(worst) else 0.0

    def chol_ok(self, v: np.ndarray) -> bool:
        """True iff every block factorizes, i.e. the next NT scaling will work."""
        if self.l and np.min(v[: self.l]) <= 0:
            return False
        for M in self.mats(v):
            try:
                np.linalg.cholesky(M)
            except np.linalg.LinAlgError:
                return False
        return True

    def shift_interior(self, v: np.ndarray) -> np.ndarray:
        alpha = self.min_eig(v)
        if alpha > 1e-8:
            return v
        return v + (1.0 - alpha) * self.identity()

    def max_step(self, v: np.ndarray, dv: np.ndarray, chols: list[np.ndarray]) -> float:
        """Largest t with v + t*dv remaining in the cone (inf if unconstrained)."""
        t = np.inf
        if self.l:
            neg = dv[: self.l] < 0
            if np.any(neg):
                t = min(t, float(np.min(-v[: self.l][neg] / dv[: self.l][neg])))
        for k, (sv, o) in enumerate(zip(self.svx, self.offsets)):
            D = sv.smat(dv[o : o + sv.dim])
            L = chols[k]
            T = sla.solve_triangular(L, D, lower=True)
            T = sla.solve_triangular(L, T.T, lower=True)
            emin = float(np.linalg.eigvalsh(0.5 * (T + T.T))[0])
            if emin < 0:
                t = min(t, -1.0 / emin)
        return t


class _NTScaling:
    """Nesterov-Todd scaling point for the current (s, z) iterate."""

    def __init__(self, cone: _ConeData, s: np.ndarray, z: np.ndarray):
        self.cone = cone
        self.w_lin = np.sqrt(s[: cone.l] / z[: cone.l]) if cone.l else np.zeros(0)
        self.lam_lin = np.sqrt(s[: cone.l] * z[: cone.l]) if cone.l else np.zeros(0)
        self.R: list[np.ndarray] = []
        self.Rinv: list[np.ndarray] = []
        self.lam: list[np.ndarray] = []
        self.chol_s: list[np.ndarray] = []
        self.chol_z: list[np.ndarray] = []
        for S, Z in zip(cone.mats(s), cone.mats(z)):
            Ls = np.linalg.cholesky(S)
            Lz = np.linalg.cholesky(Z)
            U, sig, Vt = np.linalg.svd(Lz.T @ Ls)
            isq = 1.0 / np.sqrt(sig)
            R = Ls @ Vt.T * isq[None, :]
            Rinv = (isq[:, None] * U.T) @ Lz.T
            self.R.append(R)
            self.Rinv.append(Rinv)
            self.lam.append(sig)
            self.chol_s.append(Ls)
            self.chol_z.append(Lz)

    # scaled-space maps ------------------------------------------------------
    #
    # The scaled dual direction is kept as the primary unknown so every
    # product involves a single R congruence; routing through Phi = W^2 would
    # square the scaling's condition number and stall the iteration early.

    def apply_winv_t(self, v: np.ndarray) -> np.ndarray:
        """W^{-T} v: linear part / w, PSD blocks Rinv mat(v) Rinv'."""
        out = np.empty_like(v)
        if self.cone.l:
            out[: self.cone.l] = v[: self.cone.l] / self.w_lin
        for k, (sv, o) in enumerate(zip(self.cone.svx, self.cone.offsets)):
            Ri = self.Rinv[k]
            out[o : o + sv.dim] = sv.svec(Ri @ sv.smat(v[o : o + sv.dim]) @ Ri.T)
        return out

    def apply_winv(self, v: np.ndarray) -> np.ndarray:
        """W^{-1} v: linear part / w, PSD blocks Rinv' mat(v) Rinv."""
        out = np.empty_like(v)
        if self.cone.l:
            out[: self.cone.l] = v[: self.cone.l] / self.w_lin
        for k, (sv, o) in enumerate(zip(self.cone.svx, self.cone.offsets)):
            Ri = self.Rinv[k]
            out[o : o + sv.dim] = sv.svec(Ri.T @ sv.smat(v[o : o + sv.dim]) @ Ri)
        return out

    def scaled_G(self, G: np.ndarray) -> np.ndarray:
        """Apply W^{-T} to every column of G (batched per block)."""
        cone = self.cone
        nw = G.shape[1]
        out = np.empty_like(G)
        if cone.l:
            out[: cone.l, :] = G[: cone.l, :] / self.w_lin[:, None]
        for k, (sv, o) in enumerate(zip(cone.svx, cone.offsets)):
            cols = G[o : o + sv.dim, :]
            mats = np.empty((nw, sv.n, sv.n))
            half = cols / sv.scale[:, None]
            for j in range(nw):
                Mj = np.zeros((sv.n, sv.n))
                Mj[sv.iu, sv.ju] = half[:, j]
                Mj[sv.ju, sv.iu] = half[:, j]
                mats[j] = Mj
            Ri = self.Rinv[k]
            tilted = Ri @ mats @ Ri.T              # batched congruence
            out[o : o + sv.dim, :] = sv.svec_many(tilted).T
        return out

    def comp_rhs(self, sig_mu: float, sbar: np.ndarray | None, zbar: np.ndarray | None) -> np.ndarray:
        """Scaled complementarity target X with H_lam(X) = sig_mu*I - lam^2 - corr.

        sbar/zbar are scaled affine directions (svec stacked); None means no
        second-order correction (predictor step).
        """
        cone = self.cone
        out = np.empty(cone.dim)
        if cone.l:
            D = sig_mu - self.lam_lin**2
            if sbar is not None:
                D = D - sbar[: cone.l] * zbar[: cone.l]
            out[: cone.l] = D / self.lam_lin
        for k, (sv, o) in enumerate(zip(cone.svx, cone.offsets)):
            lam = self.lam[k]
            D = np.diag(sig_mu - lam**2)
            if sbar is not None:
                A = sv.smat(sbar[o : o + sv.dim])
                B = sv.smat(zbar[o : o + sv.dim])
                D = D - 0.5 * (A @ B + B @ A)
            X = 2.0 * D / (lam[:, None] + lam[None, :])
            out[o : o + sv.dim] = sv.svec(X)
        return out


def _solve_reduced(pres: _Presolve, opts: SolveOptions) -> tuple[str, np.ndarray, np.ndarray, dict]:
    """HSDE predictor-corrector loop. Returns (status, w, dual cone vec, info)."""
    cone = _ConeData(pres)
    G, h, c = cone.G, cone.h, pres.cr
    nw = pres.nw

    if nw == 0:
        emin = cone.min_eig(h) if cone.dim else 0.0
        status = "optimal" if emin >= -opts.feastol else "infeasible"
        return status, np.zeros(0), np.zeros(cone.dim), {"min_eig": emin}
    if cone.dim == 0:
        if np.max(np.abs(c), initial=0.0) <= 1e-14:
            return "optimal", np.zeros(nw), np.zeros(0), {"gap": 0.0, "iterations": 0}
        return "unbounded", -c / np.linalg.norm(c), np.zeros(0), {"iterations": 0}

    # Restrict to a maximal independent column set of G. Dependent variables
    # only reparameterize the same constraint range, so pinning them at zero
    # preserves the optimal value whenever c is in range(G'); otherwise the
    # objective has an unconstrained improving direction.
    _, Rq, piv = sla.qr(G, mode="economic", pivoting=True)
    diag = np.abs(np.diag(Rq))
    rank = int(np.sum(diag > max(1e-12 * (diag[0] if diag.size else 0.0), 1e-300)))
    c_perp = np.zeros(nw)
    if rank < nw:
        proj, *_ = np.linalg.lstsq(G.T, c, rcond=None)
        c_perp = c - G.T @ proj
        if np.linalg.norm(c_perp) <= 1e-10 * max(1.0, np.linalg.norm(c)):
            c_perp = np.zeros(nw)
    keep = np.sort(piv[:rank])
    if rank == 0:
        feas = cone.min_eig(h) >= -opts.feastol
        if not feas:
            return "infeasible", np.zeros(nw), np.zeros(cone.dim), {"iterations": 0}
        if np.any(c_perp):
            return "unbounded", -c_perp / np.linalg.norm(c_perp), np.zeros(cone.dim), {"iterations": 0}
        return "optimal", np.zeros(nw), np.zeros(cone.dim), {"gap": 0.0, "iterations": 0}
    if rank < nw:
        status, wk, zc, info = _solve_reduced_dense(G[:, keep], h, c[keep], cone, opts)
        w = np.zeros(nw)
        w[keep] = wk
        if np.any(c_perp) and status in ("optimal", "max-iter"):
            # feasible problem with a cost direction in null(G): unbounded below
            return "unbounded", -c_perp / np.linalg.norm(c_perp), zc, {**info,
                                                                       "certificate": "null-space ray"}
        return status, w, zc, info
    return _solve_reduced_dense(G, h, c, cone, opts)


def _solve_reduced_dense(G, h, c, cone: _ConeData, opts: SolveOptions):
    """Predictor-corrector HSDE loop on a cleaned conic problem."""
    nw = G.shape[1]

    hnorm = max(1.0, float(np.linalg.norm(h)))
    cnorm = max(1.0, float(np.linalg.norm(c)))

    # initial point: LS-feasible shifted into the cone interior
    GtG = G.T @ G + 1e-12 * np.eye(nw)
    try:
        x = np.linalg.solve(GtG, G.T @ h)
        zls = -G @ np.linalg.solve(GtG, c)
    except np.linalg.LinAlgError:
        x = np.zeros(nw)
        zls = np.zeros(cone.dim)
    s = cone.shift_interior(h - G @ x)
    z = cone.shift_interior(zls)
    tau, kappa = 1.0, 1.0

    info: dict = {"trace": []}
    best = None
    stall = 0
    cond_flag = False
    mu0 = None
    mu_best = np.inf

    for it in range(opts.max_iters):
        res_z = G @ x + s - h * tau
        res_x = G.T @ z + c * tau
        res_t = float(c @ x + h @ z + kappa)
        mu = (float(s @ z) + tau * kappa) / (cone.degree + 1)
        if mu0 is None:
            mu0 = mu
        mu_best = min(mu_best, mu)

        pres_rel = float(np.linalg.norm(res_z)) / (tau * hnorm)
        dres_rel = float(np.linalg.norm(res_x)) / (tau * cnorm)
        gap_abs = float(s @ z) / tau**2
        pcost = float(c @ x) / tau
        dcost = -float(h @ z) / tau
        relgap = gap_abs / max(1.0, abs(pcost))
        info["trace"].append((mu, pres_rel, dres_rel, gap_abs))
        if opts.verbose:
            print(f"  it {it:3d}  mu {mu:9.2e}  pres {pres_rel:9.2e}  dres {dres_rel:9.2e}  gap {gap_abs:9.2e}")

        metric = max(pres_rel, dres_rel, min(gap_abs, relgap))
        if best is None or metric < best["metric"]:
            best = {"metric": metric, "x": x / tau, "z": z / tau, "pres": pres_rel,
                    "dres": dres_rel, "gap": gap_abs, "relgap": relgap, "it": it}

        # relgap is only an escape hatch for badly scaled objectives; the
        # primary criterion is the absolute gap so status=optimal certifies it.
        if pres_rel <= opts.feastol and dres_rel <= opts.feastol and (
            gap_abs <= opts.gaptol or relgap <= 1e-3 * opts.gaptol
        ):
            return "optimal", x / tau, z / tau, {**info, "iterations": it, "gap": gap_abs,
                                                 "pres": pres_rel, "dres": dres_rel}

        # stagnation: accept the best iterate early if it already qualifies
        if it >= 12:
            window = [t[0] for t in info["trace"][-10:]]
            stagnant = min(window) > 0.99 * mu_best
            if stagnant and best["pres"] <= opts.feastol and best["dres"] <= opts.feastol \
                    and (best["gap"] <= opts.gaptol or best["relgap"] <= 1e-3 * opts.gaptol):
                break

        # infeasibility certificates: either a high-quality Farkas ray, or the
        # homogeneous embedding collapsing (tau -> 0 with stagnating scaled
        # residuals), which is the textbook signature when rays converge slowly
        # A feasible-and-nearly-solved run also shows h'z < 0 (it approaches
        # minus the dual objective), so infeasibility verdicts additionally
        # require that primal feasibility never materialized: genuinely
        # infeasible runs stagnate at a positive scaled-residual floor.
        hz = float(h @ z)
        cx = float(c @ x)
        pinf = float(np.linalg.norm(G.T @ z)) / (-hz) / cnorm if hz < -1e-12 else np.inf
        dinf = float(np.linalg.norm(G @ x + s)) / (-cx) / hnorm if cx < -1e-12 else np.inf
        pres_floor = best["pres"] > 10 * opts.feastol
        dres_floor = best["dres"] > 10 * opts.feastol
        if pinf <= max(opts.feastol, 1e-7) and mu <= 1e-6 * max(1.0, tau) * mu0 and pres_floor:
            return "infeasible", x / max(tau, 1e-300), z / (-hz), {
                **info, "iterations": it, "certificate": "dual-ray", "quality": pinf}
        if dinf <= max(opts.feastol, 1e-7) and mu <= 1e-6 * max(1.0, tau) * mu0 and dres_floor:
            return "unbounded", x / (-cx), z / max(tau, 1e-300), {
                **info, "iterations": it, "certificate": "primal-ray", "quality": dinf}
        if it >= 10 and tau <= 1e-8 * max(1.0, kappa):
            if hz < 0 and pinf <= dinf and pres_floor:
                return "infeasible", x / max(tau, 1e-300), z / (-hz), {
                    **info, "iterations": it, "certificate": "tau-collapse", "quality": pinf}
            if cx < 0 and dres_floor:
                return "unbounded", x / (-cx), z / max(tau, 1e-300), {
                    **info, "iterations": it, "certificate": "tau-collapse", "quality": dinf}
            break

        try:
            W = _NTScaling(cone, s, z)
        except np.linalg.LinAlgError:
            return ("numerical-failure", best["x"], best["z"],
                    {**info, "iterations": it, "reason": "iterate left the cone"})

        Gs = W.scaled_G(G)                   # W^{-T} G, columnwise
        hs = W.apply_winv_t(h)               # W^{-T} h
        M = Gs.T @ Gs
        Gt_hs = Gs.T @ hs
        # Bordered Newton matrix in (dx, dtau). Near the optimum hs drifts
        # into range(Gs) and K loses rank up to O(c); a static quasi-definite
        # regularization keeps the factorization alive and the refinement
        # passes below recover the unregularized solution.
        K = np.empty((nw + 1, nw + 1))
        K[:nw, :nw] = M
        K[:nw, nw] = c - Gt_hs
        K[nw, :nw] = c + Gt_hs
        K[nw, nw] = -(float(hs @ hs) + kappa / tau)
        kscale = max(1.0, float(np.max(np.abs(K))))
        lu = piv = None
        delta = 1e-14 * kscale
        reg = np.diag(np.concatenate([np.full(nw, 1.0), [-1.0]]))
        for _ in range(4):
            with warnings.catch_warnings():
                warnings.simplefilter("error", sla.LinAlgWarning)
                try:
                    lu, piv = sla.lu_factor(K + delta * reg)
                    break
                except (sla.LinAlgWarning, ValueError, np.linalg.LinAlgError):
                    lu = None
                    delta *= 1e3
        if lu is None:
            return ("numerical-failure", best["x"], best["z"],
                    {**info, "iterations": it, "reason": "Newton matrix factorization failed"})
        du = np.abs(np.diag(lu))
        cond_est = float(np.max(du)) / max(float(np.min(du)), 1e-300)
        if cond_est > 1e14:
            cond_flag = True

        def newton_core(t_z, bx, bt, dtk):
            """Solve for (dx, dzs, dtau, dkap) in the W-scaled unknowns.

            dzs - Gs dx + hs dtau = t_z;  Gs' dzs + c dtau = bx;
            c' dx + hs' dzs + dkap = bt;  kappa dtau + tau dkap = dtk.
            """
            rhs = np.empty(nw + 1)
            rhs[:nw] = bx - Gs.T @ t_z
            rhs[nw] = bt - float(hs @ t_z) - dtk / tau
            out = sla.lu_solve((lu, piv), rhs)
            dx, dtau = out[:nw], float(out[nw])
            dzs = Gs @ dx - hs * dtau + t_z
            dkap = (dtk - kappa * dtau) / tau
            return dx, dzs, dtau, dkap

        def newton(eta, sig_mu, sbar_aff, zbar_aff, corr_tk):
            bx = -eta * res_x
            bt = -eta * res_t
            comp = W.comp_rhs(sig_mu, sbar_aff, zbar_aff)
            t_z = comp + eta * W.apply_winv_t(res_z)
            dtk = sig_mu - tau * kappa - corr_tk

            def residuals(d):
                dx, dzs, dtau, dkap = d
                e_z = t_z - (dzs - Gs @ dx + hs * dtau)
                e_x = bx - (Gs.T @ dzs + c * dtau)
                e_t = bt - (float(c @ dx) + float(hs @ dzs) + dkap)
                e_tk = dtk - (kappa * dtau + tau * dkap)
                return e_z, e_x, e_t, e_tk

            rhs_scale = max(float(np.linalg.norm(t_z)), float(np.linalg.norm(bx)),
                            abs(bt), abs(dtk), 1e-300)
            cur = newton_core(t_z, bx, bt, dtk)
            e_z, e_x, e_t, e_tk = residuals(cur)
            err = max(np.linalg.norm(e_z), np.linalg.norm(e_x), abs(e_t), abs(e_tk))
            # iterative refinement against the unregularized system
            for _ in range(3):
                if err <= 1e-13 * rhs_scale:
                    break
                corr = newton_core(e_z, e_x, e_t, e_tk)
                cand = tuple(a + b for a, b in zip(cur, corr))
                e2 = residuals(cand)
                err2 = max(np.linalg.norm(e2[0]), np.linalg.norm(e2[1]), abs(e2[2]), abs(e2[3]))
                if err2 >= err:
                    break
                cur, (e_z, e_x, e_t, e_tk), err = cand, e2, err2
            dx, dzs, dtau, dkap = cur
            ds = -eta * res_z - G @ dx + h * dtau
            dz = W.apply_winv(dzs)
            return dx, ds, dz, dzs, dtau, dkap

        # predictor
        dxa, dsa, dza, dzsa, dta, dka = newton(1.0, 0.0, None, None, 0.0)
        amax = min(
            cone.max_step(s, dsa, W.chol_s),
            cone.max_step(z, dza, W.chol_z),
            (-tau / dta) if dta < 0 else np.inf,
            (-kappa / dka) if dka < 0 else np.inf,
        )
        a_aff = min(1.0, amax)
        mu_aff = (float((s + a_aff * dsa) @ (z + a_aff * dza))
                  + (tau + a_aff * dta) * (kappa + a_aff * dka)) / (cone.degree + 1)
        sigma = float(np.clip((mu_aff / mu) ** 3, 0.0, 1.0))

        # corrector / combined
        sbar_aff = W.apply_winv_t(dsa)
        dx, ds, dz, dzs, dtau, dkap = newton(1.0, sigma * mu, sbar_aff, dzsa, dta * dka)
        amax = min(
            cone.max_step(s, ds, W.chol_s),
            cone.max_step(z, dz, W.chol_z),
            (-tau / dtau) if dtau < 0 else np.inf,
            (-kappa / dkap) if dkap < 0 else np.inf,
        )
        alpha = min(1.0, opts.step_frac * amax)
        if alpha < 1e-11:
            stall += 1
            if stall >= 3:
                reason = "step length collapsed"
                if cond_flag:
                    reason += " (Newton system conditioning exceeded 1e14)"
                return ("numerical-failure", best["x"], best["z"],
                        {**info, "iterations": it, "reason": reason, "cond_est": cond_est})
        else:
            stall = 0

        # backtrack if rounding pushed the trial point onto the cone boundary
        # or the step blows complementarity up (boundary-feasible problems)
        for _ in range(30):
            s_new = s + alpha * ds
            z_new = z + alpha * dz
            if cone.chol_ok(s_new) and cone.chol_ok(z_new):
                mu_new = (float(s_new @ z_new)
                          + (tau + alpha * dtau) * (kappa + alpha * dkap)) / (cone.degree + 1)
                if mu_new <= 8.0 * mu or alpha <= 1e-6:
                    break
            alpha *= 0.5
        x = x + alpha * dx
        s = s_new
        z = z_new
        tau = tau + alpha * dtau
        kappa = kappa + alpha * dkap
        if not np.isfinite(s).all() or not np.isfinite(z).all() or tau <= 0 or kappa <= 0:
            return ("numerical-failure", best["x"], best["z"],
                    {**info, "iterations": it, "reason": "nonfinite iterate"})
        # the embedding is homogeneous: renormalize runaway iterates (the ray
        # grows instead of tau shrinking when infeasibility is approached)
        scale = max(tau, kappa, float(np.max(np.abs(s), initial=0.0)),
                    float(np.max(np.abs(z), initial=0.0)))
        if scale > 1e6:
            x, s, z, tau, kappa = x / scale, s / scale, z / scale, tau / scale, kappa / scale

    # budget exhausted or stagnated: judge the best iterate seen
    info["iterations"] = best["it"] if best else opts.max_iters
    if best and best["pres"] <= opts.feastol and best["dres"] <= opts.feastol and (
        best["gap"] <= opts.gaptol or best["relgap"] <= 1e-3 * opts.gaptol
    ):
        info["gap"] = best["gap"]
        info["pres"] = best["pres"]
        info["dres"] = best["dres"]
        return "optimal", best["x"], best["z"], info
    status = "max-iter"
    if cond_flag:
        status = "numerical-failure"
        info["reason"] = "Newton system conditioning exceeded 1e14 before convergence"
    return status, best["x"], best["z"], info


def solve(prob: SdpProblem, opts: SolveOptions | None = None) -> SdpSolution:
    """Solve the block LMI problem; see module docstring for the form.

    status semantics:
      optimal            feasible within feastol, duality gap <= gaptol
      infeasible         dual improving ray found (returned in duals)
      unbounded          objective unbounded below (primal ray in z)
      max-iter           tolerances not met within the iteration budget
      numerical-failure  Newton system broke down (conditioning > 1e14 etc.)
    """
    opts = opts or SolveOptions()
    prob.validate()
    pres = _Presolve(prob)
    if pres.status == "infeasible":
        return SdpSolution(
            status="infeasible",
            z=np.zeros(prob.nvars),
            duals=[np.zeros((b.size, b.size)) for b in prob.blocks],
            primal_obj=np.nan, dual_obj=np.nan, gap=np.nan,
            info={"reason": pres.reason, "farkas": pres.farkas},
        )

    status, w, zc, info = _solve_reduced(pres, opts)
    cone = _ConeData(pres)

    z_full = pres.lift(w)
    duals = [np.zeros((b.size, b.size)) for b in prob.blocks]
    # scatter cone duals back into per-block matrices
    for k, bi in enumerate(pres.lin_meta):
        duals[bi] = np.array([[zc[k]]])
    for k, bi in enumerate(pres.sdp_meta):
        sv = cone.svx[k]
        o = cone.offsets[k]
        duals[bi] = sv.smat(zc[o : o + sv.dim])

    c = np.asarray(prob.objective, dtype=float)
    pobj = float(c @ z_full)
    dobj = pres.obj_offset - float(cone.h @ zc) if status in ("optimal", "max-iter") else np.nan
    gap = info.get("gap", np.nan)
    return SdpSolution(
        status=status, z=z_full, duals=duals,
        primal_obj=pobj if status in ("optimal", "max-iter") else np.nan,
        dual_obj=dobj, gap=gap,
        iterations=info.get("iterations", 0), info=info,
    )


class SdpBuilder:
    """Incremental construction of an SdpProblem with named variable groups.

    Blocks carry a category: margin-maximization (feasibility mode) subtracts
    t*I only from blocks tagged "design", leaving bound/box blocks untouched.
    """

    def __init__(self):
        self.nvars = 0
        self.labels: dict[str, range] = {}
        self.blocks: list[LmiBlock] = []
        self.eq_rows: list[dict[int, float]] = []
        self.eq_rhs: list[float] = []
        self.obj: dict[int, float] = {}

    def new_vars(self, count: int, label: str | None = None) -> range:
        r = range(self.nvars, self.nvars + count)
        self.nvars += count
        if label:
            base = label
            k = 1
            while label in self.labels:
                k += 1
                label = f"{base}_{k}"
            self.labels[label] = r
        return r

    def add_block(self, size: int, a0, coeff: dict[int, np.ndarray], category: str = "design") -> int:
        self.blocks.append(LmiBlock(size, np.asarray(a0, dtype=float), dict(coeff), category))
        return len(self.blocks) - 1

    def add_scalar_ineq(self, const: float, coeffs: dict[int, float], category: str = "bound") -> int:
        """Constraint const + sum coeffs[i] * z_i >= 0 as a 1x1 block."""
        return self.add_block(
            1, np.array([[float(const)]]),
            {i: np.array([[float(w)]]) for i, w in coeffs.items() if w != 0.0},
            category,
        )

    def add_equality(self, coeffs: dict[int, float], rhs: float):
        self.eq_rows.append({int(i): float(w) for i, w in coeffs.items()})
        self.eq_rhs.append(float(rhs))

    def add_box(self, ids, bound: float):
        for i in ids:
            self.add_scalar_ineq(bound, {i: -1.0})
            self.add_scalar_ineq(bound, {i: 1.0})

    def set_objective(self, coeffs: dict[int, float]):
        self.obj = {int(i): float(w) for i, w in coeffs.items()}

    def build(self) -> SdpProblem:
        """Assemble the problem (pure feasibility when no objective was set)."""
        blocks = [LmiBlock(b.size, b.a0, dict(b.coeff), b.category) for b in self.blocks]
        c = np.zeros(self.nvars)
        for i, w in self.obj.items():
            c[i] = w
        eq_lhs = eq_rhs = None
        if self.eq_rows:
            eq_lhs = np.zeros((len(self.eq_rows), self.nvars))
            for k, row in enumerate(self.eq_rows):
                for i, w in row.items():
                    eq_lhs[k, i] = w
            eq_rhs = np.asarray(self.eq_rhs)
        return SdpProblem(self.nvars, c, blocks, eq_lhs, eq_rhs)


@dataclass
class FeasibilityReport:
    feasible: bool
    worst_violation: float
    block_violations: list[float]
    equality_violations: list[float]


def check_feasible(prob: SdpProblem, z, tol: float) -> FeasibilityReport:
    """Independent audit: eigenvalue check per block plus equality residuals."""
    z = np.asarray(z, dtype=float)
    if z.shape != (prob.nvars,):
        raise ValueError("dimension mismatch")
    bviol = []
    for b in prob.blocks:
        emin = float(np.linalg.eigvalsh(b.matrix_at(z))[0])
        bviol.append(max(0.0, -emin))
    eviol = []
    if prob.eq_lhs is not None:
        r = prob.eq_lhs @ z - prob.eq_rhs
        eviol = [float(abs(v)) for v in r]
    worst = max(bviol + eviol, default=0.0)
    return FeasibilityReport(worst <= tol, worst, bviol, eviol)


def dump_sdpa(prob: SdpProblem, path_or_file):
    """Write the problem in sparse SDPA format for third-party cross-checks.

    Equalities are emitted as paired +/- rows of one diagonal block.
    """
    close = False
    if isinstance(path_or_file, (str, bytes)):
        f = open(path_or_file, "w")
        close = True
    else:
        f = path_or_file
    try:
        neq = prob.eq_lhs.shape[0] if prob.eq_lhs is not None else 0
        sizes = [b.size for b in prob.blocks]
        if neq:
            sizes.append(-2 * neq)
        f.write(f"{prob.nvars}\n{len(sizes)}\n")
        f.write(" ".join(str(s) for s in sizes) + "\n")
        f.write(" ".join(repr(float(v)) for v in prob.objective) + "\n")

        def emit(matno, blkno, M):
            M = np.asarray(M, dtype=float)
            for i in range(M.shape[0]):
                for j in range(i, M.shape[1]):
                    if M[i, j] != 0.0:
                        f.write(f"{matno} {blkno} {i + 1} {j + 1} {M[i, j]!r}\n")

        for bi, b in enumerate(prob.blocks, start=1):
            emit(0, bi, -np.asarray(b.a0))
            for v, M in sorted(b.coeff.items()):
                emit(v + 1, bi, M)
        if neq:
            blk = len(sizes)
            for k in range(neq):
                f.write(f"0 {blk} {2 * k + 1} {2 * k + 1} {(-prob.eq_rhs[k])!r}\n")
                f.write(f"0 {blk} {2 * k + 2} {2 * k + 2} {prob.eq_rhs[k]!r}\n")
                for v in range(prob.nvars):
                    a = prob.eq_lhs[k, v]
                    if a != 0.0:
                        f.write(f"{v + 1} {blk} {2 * k + 1} {2 * k + 1} {(-a)!r}\n")
                        f.write(f"{v + 1} {blk} {2 * k + 2} {2 * k + 2} {a!r}\n")
    finally:
        if close:
            f.close()
