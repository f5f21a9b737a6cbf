"""Trajectory simulation for true systems and observers.

Continuous-time systems integrate with classical RK4 at a fixed substep
(deterministic runs reproduce byte-for-byte); discrete-time systems iterate
the exact recursion. Observers run in three forms: the explicit CT form
E(xh) xh' = f solved pointwise, the implicit DT step e(xh+) = f(...) solved
by damped Newton, and the trapezoidal sampled-data step

    e(xh+) - (h/2) f(xh+, u+, y+) = e(xh) + (h/2) f(xh, u, y)

which matches trapezoidal integration of the CT observer and uses data at
both endpoints of the interval.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .models import ObserverModel, SystemModel

__all__ = [
    "Trajectory",
    "SimulationError",
    "simulate_true",
    "explicit_ct_rhs",
    "implicit_step",
    "sampled_data_observer",
    "simulate_observer_ct",
    "simulate_observer_dt",
]

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 50


class SimulationError(RuntimeError):
    def __init__(self, message, first_bad_index=None):
        super().__init__(message)
        self.first_bad_index = first_bad_index


@dataclass
class Trajectory:
    domain: str                  # "ct-sampled" | "dt"
    times: np.ndarray
    x: np.ndarray                # (T+1, n)
    u: np.ndarray                # (T+1, m)
    y: np.ndarray                # (T+1, p)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        T = len(self.times)
        if not (self.x.shape[0] == self.u.shape[0] == self.y.shape[0] == T):
            raise ValueError("trajectory sequences must share length")

    @property
    def step(self) -> float:
        return float(self.meta.get("step", self.times[1] - self.times[0] if len(self.times) > 1 else 0.0))

    def to_csv(self, path, estimates: np.ndarray | None = None):
        n, m, p = self.x.shape[1], self.u.shape[1], self.y.shape[1]
        header = (["t"] + [f"x{i+1}" for i in range(n)] + [f"u{j+1}" for j in range(m)]
                  + [f"y{k+1}" for k in range(p)])
        if estimates is not None:
            header += [f"xh{i+1}" for i in range(estimates.shape[1])]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k, t in enumerate(self.times):
                row = [f"{t!r}"] + [f"{v!r}" for v in self.x[k]] + [f"{v!r}" for v in self.u[k]] \
                    + [f"{v!r}" for v in self.y[k]]
                if estimates is not None:
                    row += [f"{v!r}" for v in estimates[k]]
                w.writerow(row)

    def save_meta(self, path):
        with open(path, "w") as fh:
            json.dump(self.meta, fh, indent=1, sort_keys=True)


def _input_signal(u_signal, m):
    if u_signal is None:
        return lambda t: np.zeros(m)
    if callable(u_signal):
        return lambda t: np.atleast_1d(np.asarray(u_signal(t), dtype=float))
    arr = np.asarray(u_signal, dtype=float)
    return lambda t: arr


def _check_finite(x, index):
    if not np.all(np.isfinite(x)):
        raise SimulationError(f"state diverged (nonfinite at sample {index})", index)


def rk4_step(f, x, dt):
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def simulate_true(sys: SystemModel, x0, u_signal=None, T: float | int = 10.0,
                  step: float = 0.1, noise: bool = False, seed: int = 0,
                  substeps: int | None = None) -> Trajectory:
    """Simulate the true system and sample its (possibly noisy) output.

    CT systems use RK4 with `substeps` sub-intervals per output step
    (default 10, satisfying substep <= step/10); DT systems iterate exactly
    and T counts steps. Output noise is i.i.d. Gaussian added after sampling;
    DT process noise enters the recursion.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    uf = _input_signal(u_signal, sys.m)
    rng = np.random.default_rng(seed)
    a_eval = sys.a_eval()
    g_eval = sys.g_eval()

    out_var = sys.noise.output_variance if (noise and sys.noise) else 0.0
    proc_var = sys.noise.process_variance if (noise and sys.noise) else 0.0

    if sys.domain == "dt":
        nsteps = int(T)
        times = np.arange(nsteps + 1) * step
        xs = np.empty((nsteps + 1, sys.n))
        us = np.empty((nsteps + 1, sys.m))
        xs[0] = x0
        for k in range(nsteps):
            us[k] = uf(times[k])
            xk = a_eval(np.concatenate([xs[k], us[k]]))
            if proc_var > 0:
                xk = xk + rng.normal(0.0, np.sqrt(proc_var), size=sys.n)
            xs[k + 1] = xk
            _check_finite(xs[k + 1], k + 1)
        us[nsteps] = uf(times[nsteps])
        domain = "dt"
    else:
        nsteps = int(round(float(T) / step))
        times = np.arange(nsteps + 1) * step
        nsub = substeps if substeps is not None else 10
        xs = np.empty((nsteps + 1, sys.n))
        us = np.empty((nsteps + 1, sys.m))
        xs[0] = x0
        dt = step / nsub
        for k in range(nsteps):
            us[k] = uf(times[k])
            xcur = xs[k]
            for j in range(nsub):
                tj = times[k] + j * dt
                uj = uf(tj)
                xcur = rk4_step(lambda xx: a_eval(np.concatenate([xx, uj])), xcur, dt)
            xs[k + 1] = xcur
            _check_finite(xs[k + 1], k + 1)
        us[nsteps] = uf(times[nsteps])
        domain = "ct-sampled"

    ys = np.stack([g_eval(np.concatenate([xs[k], us[k]])) for k in range(len(times))])
    if out_var > 0:
        ys = ys + rng.normal(0.0, np.sqrt(out_var), size=ys.shape)
    meta = {"step": step, "seed": seed, "noise_variance": out_var,
            "process_variance": proc_var, "domain": domain}
    return Trajectory(domain, times, xs, us, ys, meta)


def explicit_ct_rhs(obs: ObserverModel, xh, u=None, y=None) -> np.ndarray:
    """xh' solving E(xh) xh' = f(xh, u, y); the certificate guarantees E invertible."""
    E = obs.E_at(xh)
    fv = obs.f_at(xh, u, y)
    try:
        rhs = np.linalg.solve(E, fv)
    except np.linalg.LinAlgError:
        raise SimulationError("singular E(xh): well-posedness certificate violated")
    if np.max(np.abs(E @ rhs - fv)) > 1e-8 * max(1.0, float(np.max(np.abs(fv)))):
        raise SimulationError("explicit form residual too large")
    return rhs


def _newton_solve(residual, jacobian, x0, context="implicit step"):
    """Damped Newton with Armijo backtracking; the root is unique by Lemma-1-type
    monotonicity of the certified maps."""
    x = np.array(x0, dtype=float)
    r = residual(x)
    norm = float(np.linalg.norm(r))
    for _ in range(NEWTON_MAX_ITER):
        if norm <= NEWTON_TOL:
            return x
        J = jacobian(x)
        try:
            dx = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            raise SimulationError(f"singular Jacobian in {context}: certificate violation suspected")
        alpha = 1.0
        for _ in range(40):
            cand = x + alpha * dx
            rc = residual(cand)
            nc = float(np.linalg.norm(rc))
            if nc < (1.0 - 1e-4 * alpha) * norm:
                x, r, norm = cand, rc, nc
                break
            alpha *= 0.5
        else:
            raise SimulationError(f"Newton line search failed in {context}")
    if norm <= NEWTON_TOL:
        return x
    raise SimulationError(f"Newton did not converge in {NEWTON_MAX_ITER} iterations ({context}); "
                          "certificate violation suspected")


def implicit_step(obs: ObserverModel, xh_t, rhs_value, u=None, y=None) -> np.ndarray:
    """Solve e(xh) = rhs_value by Newton, warm-started at xh_t."""
    rhs_value = np.atleast_1d(np.asarray(rhs_value, dtype=float))
    return _newton_solve(
        lambda x: obs.e_at(x) - rhs_value,
        lambda x: obs.E_at(x),
        xh_t,
        context="implicit DT step",
    )


def simulate_observer_dt(obs: ObserverModel, traj: Trajectory, xh0) -> np.ndarray:
    """Run the implicit DT observer e(xh+) = f(xh, u, y) along recorded data."""
    T = len(traj.times) - 1
    est = np.empty((T + 1, obs.n))
    est[0] = np.atleast_1d(np.asarray(xh0, dtype=float))
    for k in range(T):
        rhs = obs.f_at(est[k], traj.u[k], traj.y[k])
        est[k + 1] = implicit_step(obs, est[k], rhs)
        _check_finite(est[k + 1], k + 1)
    return est


def sampled_data_observer(obs: ObserverModel, h: float, traj: Trajectory, xh0) -> np.ndarray:
    """Trapezoidal sampled-data estimates along a trajectory sampled at h."""
    if abs(traj.step - h) > 1e-9 * max(1.0, h):
        raise ValueError("trajectory must be sampled at the observer interval h")
    T = len(traj.times) - 1
    est = np.empty((T + 1, obs.n))
    est[0] = np.atleast_1d(np.asarray(xh0, dtype=float))
    half = h / 2.0
    for k in range(T):
        rhs = obs.e_at(est[k]) + half * obs.f_at(est[k], traj.u[k], traj.y[k])
        u1, y1 = traj.u[k + 1], traj.y[k + 1]

        def residual(x):
            return obs.e_at(x) - half * obs.f_at(x, u1, y1) - rhs

        def jacobian(x):
            return obs.E_at(x) - half * obs.F_at(x, u1, y1)

        est[k + 1] = _newton_solve(residual, jacobian, est[k], context="sampled-data step")
        _check_finite(est[k + 1], k + 1)
    return est


def simulate_observer_ct(obs: ObserverModel, traj: Trajectory, xh0,
                         substeps: int = 10, hold: str = "zoh") -> np.ndarray:
    """RK4 integration of the explicit CT observer along recorded data.

    hold="zoh" keeps (u, y) constant over each sample interval, matching the
    information a sampled implementation would have; hold="linear"
    interpolates between samples, appropriate when the trajectory is dense.
    """
    if hold not in ("zoh", "linear"):
        raise ValueError("hold must be 'zoh' or 'linear'")
    T = len(traj.times) - 1
    est = np.empty((T + 1, obs.n))
    est[0] = np.atleast_1d(np.asarray(xh0, dtype=float))
    for k in range(T):
        dt = (traj.times[k + 1] - traj.times[k]) / substeps
        u0, y0 = traj.u[k], traj.y[k]
        u1, y1 = traj.u[k + 1], traj.y[k + 1]
        xcur = est[k]
        for j in range(substeps):
            if hold == "zoh":
                def rhs_at(xx, s):
                    return explicit_ct_rhs(obs, xx, u0, y0)
            else:
                def rhs_at(xx, s):
                    w = s / (traj.times[k + 1] - traj.times[k])
                    return explicit_ct_rhs(obs, xx, (1 - w) * u0 + w * u1,
                                           (1 - w) * y0 + w * y1)
            s0 = j * dt
            k1 = rhs_at(xcur, s0)
            k2 = rhs_at(xcur + 0.5 * dt * k1, s0 + 0.5 * dt)
            k3 = rhs_at(xcur + 0.5 * dt * k2, s0 + 0.5 * dt)
            k4 = rhs_at(xcur + dt * k3, s0 + dt)
            xcur = xcur + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        est[k + 1] = xcur
        _check_finite(est[k + 1], k + 1)
    return est
