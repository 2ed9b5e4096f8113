"""Markovian BSDE solvers.

With a terminal map ``Phi(X_T)`` the jump BSDE reduces to a backward
equation on the lattice ``{0, 1/K, ..., x_max}``:

    du/dt + lb (D+u) + ld (D-u) + lb g_b(x, u, D+u) + ld g_d(x, u, D-u) = 0,

with ``Y_t = u(t, X_t)``, ``Z^b = D+u``, ``Z^d = D-u``.  The Brownian limit
reduces to ``du/dt + f u_x + sig2/2 u_xx + sig2 g(x, u, u_x) = 0``.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_banded
from scipy.special import logsumexp

from .errors import ConfigError, ContractionError, DomainError, NumericError
from .model import PopulationModel, ScalingContext, intensities
from .stats import mean_se
from .table import ExperimentTable

DEFAULT_SNAPSHOTS = 201
STABILITY = 0.5
TRUNCATION_RTOL = 1e-4
REGION_FLOOR = 1e-30


class TruncationWarning(UserWarning):
    """Doubling the lattice cut-off moved ``Y0`` by more than the tolerance."""


def _zeros(x, y, z):
    return np.zeros(np.broadcast(x, y, z).shape)


@dataclass
class GeneratorK:
    """Driver pair ``(g_b, g_d)`` of the jump BSDE.

    ``weight_beta`` defaults to the value making the Picard map a
    ``0.9``-contraction in the weighted norm: ``beta = (L^2 + L)/0.9 + L``.
    """

    g_b: Callable
    g_d: Callable
    lipschitz_L: float
    weight_beta: Optional[float] = None
    zero_b: bool = False
    is_zero: bool = False

    def __post_init__(self):
        L = float(self.lipschitz_L)
        if not L >= 0:
            raise ConfigError("lipschitz_L must be nonnegative")
        if self.weight_beta is None:
            self.weight_beta = (L * L + L) / 0.9 + L if L > 0 else 1.0
        if not self.weight_beta > L * L + 2 * L:
            raise ConfigError(f"weight_beta must exceed L^2 + 2L = {L * L + 2 * L}")

    @property
    def alpha_theory(self) -> float:
        """Contraction factor ``(L^2 + L)/(beta - L)``."""
        L = self.lipschitz_L
        return (L * L + L) / (self.weight_beta - L) if L > 0 else 0.0

    def spot_check(self, K: float, x, y, z, y2, z2) -> float:
        """Largest observed ``K^2 |g(x,y,z/K) - g(x,y',z'/K)| / (|y-y'| + |z-z'|)``."""
        den = np.abs(y - y2) + np.abs(z - z2)
        worst = 0.0
        for g in (self.g_b, self.g_d):
            num = K * K * np.abs(g(x, y, z / K) - g(x, y2, z2 / K))
            worst = max(worst, float(np.max(num / den)))
        return worst


def zero_generator() -> GeneratorK:
    return GeneratorK(_zeros, _zeros, 0.0, zero_b=True, is_zero=True)


def _lattice_diffs(u: np.ndarray):
    zb = np.zeros_like(u)
    zd = np.zeros_like(u)
    zb[..., :-1] = u[..., 1:] - u[..., :-1]
    zd[..., 1:] = u[..., :-1] - u[..., 1:]
    return zb, zd


@dataclass
class LatticeSolution:
    """Field ``u`` on ``times x states``; ``K is None`` marks the continuum solver."""

    times: np.ndarray
    states: np.ndarray
    u: np.ndarray
    K: Optional[float]
    x0: float
    dt: float
    n_steps: int
    truncation_rel_change: Optional[float] = None
    meta: dict = field(default_factory=dict)

    @property
    def is_discrete(self) -> bool:
        return self.K is not None

    @property
    def z_b(self) -> np.ndarray:
        return _lattice_diffs(self.u)[0]

    @property
    def z_d(self) -> np.ndarray:
        return _lattice_diffs(self.u)[1]

    @property
    def z(self) -> np.ndarray:
        if self.is_discrete:
            raise DomainError("discrete solutions carry z_b and z_d")
        return np.gradient(self.u, self.states, axis=1, edge_order=1)

    @property
    def Y0(self) -> float:
        return float(self.at(0.0, self.x0))

    def _time_weights(self, t):
        t = np.asarray(t, dtype=float)
        dtau = self.times[1] - self.times[0] if self.times.size > 1 else 1.0
        k = np.clip(np.floor(t / dtau).astype(np.int64), 0, max(self.times.size - 2, 0))
        w = np.clip((t - self.times[k]) / dtau, 0.0, 1.0) if self.times.size > 1 else np.zeros_like(t)
        return k, w

    def field_at(self, values: np.ndarray, t, x):
        """Evaluate a field on this grid at ``(t, x)``: linear in time, linear in state."""
        x = np.asarray(x, dtype=float)
        t = np.broadcast_to(np.asarray(t, dtype=float), x.shape)
        k, w = self._time_weights(t)
        dx = self.states[1] - self.states[0]
        pos = np.clip(x / dx, 0.0, self.states.size - 1)
        i = np.minimum(np.floor(pos).astype(np.int64), self.states.size - 2)
        v = pos - i
        k1 = np.minimum(k + 1, self.times.size - 1)
        lo = (1 - v) * values[k, i] + v * values[k, i + 1]
        hi = (1 - v) * values[k1, i] + v * values[k1, i + 1]
        out = (1 - w) * lo + w * hi
        return out if out.ndim else float(out)

    def at(self, t, x):
        return self.field_at(self.u, t, x)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            if self.is_discrete:
                zb, zd = _lattice_diffs(self.u)
                w.writerow(["t", "x", "u", "z_b", "z_d"])
                for k, t in enumerate(self.times):
                    for j, x in enumerate(self.states):
                        w.writerow([f"{v:.17g}" for v in (t, x, self.u[k, j], zb[k, j], zd[k, j])])
            else:
                z = self.z
                w.writerow(["t", "x", "u", "z"])
                for k, t in enumerate(self.times):
                    for j, x in enumerate(self.states):
                        w.writerow([f"{v:.17g}" for v in (t, x, self.u[k, j], z[k, j])])


# --- discrete lattice ----------------------------------------------------------

def default_x_max(model: PopulationModel, x0: float, T: float) -> float:
    return 4.0 * x0 * np.exp(max(model.nu - model.mu, 0.0) * T)


@dataclass
class _Lattice:
    x: np.ndarray
    lb: np.ndarray
    ld: np.ndarray
    dt: float
    n: int
    snap: np.ndarray
    K: float

    @property
    def lb_eff(self):
        lb = self.lb.copy()
        lb[-1] = 0.0
        return lb


def _lattice(model, ctx: ScalingContext, x_max, dt, n_snap) -> _Lattice:
    K, T = float(ctx.K), float(ctx.horizon_T)
    x_max = default_x_max(model, ctx.x_start, T) if x_max is None else float(x_max)
    M = int(np.ceil(x_max * K))
    if M < ctx.initial_count + 1:
        raise ConfigError("x_max must exceed the initial state")
    x = np.arange(M + 1) / K
    lb, ld = intensities(model, K, x)
    rate = float(np.max(lb + ld))
    n_snap = max(int(n_snap), 2)
    if dt is None:
        dt_max = STABILITY / rate if rate > 0 else T
        blocks = n_snap - 1
        n = int(np.ceil(T / dt_max / blocks)) * blocks
    else:
        if dt * rate > STABILITY:
            raise ConfigError(f"dt = {dt} violates the stability bound; need dt <= {STABILITY / rate:.6g}")
        n = int(round(T / dt))
        if n < 1 or abs(n * dt - T) > 1e-9 * T:
            raise ConfigError("T must be an integer multiple of dt")
    snap = np.unique(np.round(np.linspace(0, n, min(n_snap, n + 1))).astype(np.int64))
    return _Lattice(x, lb, ld, T / n, n, snap, K)


def _drive(gen: GeneratorK, lat: _Lattice, u: np.ndarray) -> np.ndarray:
    """``lb g_b + ld g_d`` with the generator vanishing at ``x = 0``."""
    out = np.zeros_like(u)
    if gen.is_zero:
        return out
    zb, zd = _lattice_diffs(u)
    s = slice(1, None)
    x = lat.x[s]
    with np.errstate(divide="ignore", invalid="ignore"):
        out[s] = lat.ld[s] * gen.g_d(x, u[s], zd[s])
        if not gen.zero_b:
            out[s] += lat.lb[s] * gen.g_b(x, u[s], zb[s])
    return out


def _linear_part(lat: _Lattice, u: np.ndarray) -> np.ndarray:
    zb, zd = _lattice_diffs(u)
    return lat.lb * zb + lat.ld * zd


def _sweep(lat: _Lattice, u_T: np.ndarray, drive_at: Callable, keep_all: bool):
    """Explicit backward sweep; ``drive_at(k, u_next)`` gives the generator term at step ``k+1``."""
    u = u_T.copy()
    snaps = {lat.n: u.copy()} if lat.n in set(lat.snap.tolist()) else {}
    full = np.empty((lat.n + 1, u.size)) if keep_all else None
    if keep_all:
        full[lat.n] = u
    want = set(lat.snap.tolist())
    for k in range(lat.n - 1, -1, -1):
        u = u + lat.dt * (_linear_part(lat, u) + drive_at(k, u))
        if k % 256 == 0 and not np.all(np.isfinite(u)):
            raise NumericError(f"non-finite lattice field at step {k}")
        if k in want:
            snaps[k] = u.copy()
        if keep_all:
            full[k] = u
    if not np.all(np.isfinite(u)):
        raise NumericError("non-finite lattice field")
    return np.stack([snaps[k] for k in lat.snap]), full


def solve_discrete_bsde(
    model: PopulationModel,
    ctx: ScalingContext,
    gen: GeneratorK,
    terminal: Callable,
    x_max: Optional[float] = None,
    dt: Optional[float] = None,
    *,
    n_snap: int = DEFAULT_SNAPSHOTS,
    truncation_check: bool = False,
) -> LatticeSolution:
    """Explicit backward solve of the lattice equation; ``dt`` defaults to ``0.5 / max rate``."""
    lat = _lattice(model, ctx, x_max, dt, n_snap)
    u_T = np.asarray(terminal(lat.x), dtype=float)
    if u_T.shape != lat.x.shape or not np.all(np.isfinite(u_T)):
        raise DomainError("terminal map must be finite on the lattice")
    u, _ = _sweep(lat, u_T, lambda k, u: _drive(gen, lat, u), keep_all=False)
    sol = LatticeSolution(
        times=lat.snap * lat.dt, states=lat.x, u=u, K=lat.K, x0=ctx.x_start, dt=lat.dt, n_steps=lat.n,
    )
    if truncation_check:
        wide = solve_discrete_bsde(model, ctx, gen, terminal, 2.0 * lat.x[-1], None, n_snap=n_snap)
        rel = abs(wide.Y0 - sol.Y0) / max(abs(wide.Y0), 1e-300)
        sol.truncation_rel_change = float(rel)
        if rel > TRUNCATION_RTOL:
            warnings.warn(f"x_max = {lat.x[-1]:.6g} moves Y0 by {rel:.3g} relative", TruncationWarning)
    return sol


@dataclass
class ContractionReport:
    """Per-iteration increments of the Picard map.

    ``log_distances[p]`` is the log of the weighted distance between
    iterates ``p+1`` and ``p``; ``ratios`` are successive quotients.
    """

    log_distances: list
    sup_increments: list
    iterations: int
    converged: bool
    alpha_theory: float
    beta: float

    @property
    def ratios(self) -> np.ndarray:
        d = np.asarray(self.log_distances)
        if d.size < 2:
            return np.zeros(0)
        with np.errstate(invalid="ignore"):
            r = np.exp(d[1:] - d[:-1])
        return np.where(np.isneginf(d[1:]), 0.0, r)

    def to_dict(self) -> dict:
        return {
            "log_distances": [float(v) for v in self.log_distances],
            "ratios": [float(v) for v in self.ratios],
            "sup_increments": [float(v) for v in self.sup_increments],
            "iterations": self.iterations,
            "converged": self.converged,
            "alpha_theory": self.alpha_theory,
            "beta": self.beta,
        }


def _weighted_density(lat: _Lattice, i0: int, beta: float):
    """Law of the chain weighted by ``exp(beta A)``, normalised per step with log scales."""
    q = np.zeros((lat.n + 1, lat.x.size))
    logs = np.zeros(lat.n + 1)
    cur = np.zeros(lat.x.size)
    cur[i0] = 1.0
    lb = lat.lb_eff
    tot = lb + lat.ld
    grow = np.exp(lat.dt * beta * (lat.lb + lat.ld) / lat.K**2)
    q[0] = cur
    for k in range(lat.n):
        nxt = cur * (1.0 - lat.dt * tot)
        nxt[1:] += lat.dt * (cur * lb)[:-1]
        nxt[:-1] += lat.dt * (cur * lat.ld)[1:]
        nxt *= grow
        s = nxt.sum()
        logs[k + 1] = logs[k] + np.log(s)
        cur = nxt / s
        q[k + 1] = cur
    return q, logs


def picard_solve_discrete(
    model: PopulationModel,
    ctx: ScalingContext,
    gen: GeneratorK,
    terminal: Callable,
    x_max: Optional[float] = None,
    dt: Optional[float] = None,
    max_iters: int = 50,
    tol: float = 1e-8,
    *,
    n_snap: int = DEFAULT_SNAPSHOTS,
):
    """Picard iteration with frozen generator arguments.

    Each step solves the linear lattice equation with the driver evaluated
    at the previous iterate, so the fixed point is the explicit scheme of
    :func:`solve_discrete_bsde`.  Distances are measured in
    ``(L |Y|^2 + |Z|^2)^{1/2}`` with ``exp(beta A)`` weights, evaluated
    exactly through the weighted forward law of the chain.

    Iteration stops when the sup-norm increment over the support of that
    law (``meta["region"]``) is below ``tol * max(1, sup |Y|)``.  Far from
    the support the iterates need many more steps to settle; the returned
    field is only converged on the region.
    """
    lat = _lattice(model, ctx, x_max, dt, n_snap)
    u_T = np.asarray(terminal(lat.x), dtype=float)
    q, logs = _weighted_density(lat, ctx.initial_count, gen.weight_beta)
    region = (q / q.max(axis=1, keepdims=True)).max(axis=0) > REGION_FLOOR
    tot = (lat.lb + lat.ld) / lat.K**2
    L = gen.lipschitz_L
    Y = np.zeros((lat.n + 1, lat.x.size))
    log_d, sups = [], []
    converged, iterations = False, max_iters
    for p in range(max_iters):
        frozen = Y
        snaps, newY = _sweep(lat, u_T, lambda k, u: _drive(gen, lat, frozen[k + 1]), keep_all=True)
        dY = newY - Y
        dzb, dzd = _lattice_diffs(dY)
        per_step = (q * (L * dY**2 * tot + dzb**2 * lat.lb_eff + dzd**2 * lat.ld)).sum(axis=1)[:-1]
        with np.errstate(divide="ignore"):
            log_d.append(0.5 * float(logsumexp(np.log(per_step * lat.dt) + logs[:-1])))
        sups.append(float(np.max(np.abs(dY[:, region]))))
        Y = newY
        if sups[-1] <= tol * max(1.0, float(np.max(np.abs(Y[:, region])))):
            converged, iterations = True, p
            break
        if p >= 2 and np.exp(log_d[-1] - log_d[-2]) >= 1.0:
            raise ContractionError(f"Picard distances stopped decaying at iteration {p}")
    if not converged:
        raise ContractionError(f"no convergence within {max_iters} iterations")
    sol = LatticeSolution(times=lat.snap * lat.dt, states=lat.x, u=snaps, K=lat.K, x0=ctx.x_start,
                          dt=lat.dt, n_steps=lat.n, meta={"region": [float(lat.x[region].min()),
                                                                    float(lat.x[region].max())]})
    rep = ContractionReport(log_d, sups, iterations, converged,
                            gen.alpha_theory, float(gen.weight_beta))
    return sol, rep


# --- continuum ------------------------------------------------------------------

def solve_limit_bsde(
    model: PopulationModel,
    gen_cont: Optional[Callable],
    terminal: Callable,
    x_max: float,
    nx: int,
    dt: float,
    T: float,
    x0: float = 0.0,
    *,
    n_snap: int = DEFAULT_SNAPSHOTS,
) -> LatticeSolution:
    """Crank-Nicolson in the linear part, Heun predictor-corrector in the driver.

    ``gen_cont(x, y, z)`` multiplies ``sig2(x)``; ``None`` means zero.  The
    row ``x = 0`` stays at ``terminal(0)`` and ``u_xx = 0`` closes ``x_max``.
    """
    if not (x_max > 0 and nx >= 3 and dt > 0 and T > 0):
        raise ConfigError("need x_max > 0, nx >= 3, dt > 0, T > 0")
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * T:
        raise ConfigError("T must be an integer multiple of dt")
    x = np.linspace(0.0, x_max, nx + 1)
    dx = x[1] - x[0]
    f = model.fb(x) - model.fd(x)
    s = 0.5 * model.sig2(x)
    lo = s / dx**2 - f / (2 * dx)
    di = -2 * s / dx**2
    up = s / dx**2 + f / (2 * dx)
    lo[-1], di[-1], up[-1] = -f[-1] / dx, f[-1] / dx, 0.0
    lo[0] = di[0] = up[0] = 0.0

    def apply_L(u):
        out = di * u
        out[1:] += lo[1:] * u[:-1]
        out[:-1] += up[:-1] * u[1:]
        return out

    h = 0.5 * dt
    ab = np.zeros((3, x.size))
    ab[0, 1:] = -h * up[:-1]
    ab[1] = 1.0 - h * di
    ab[2, :-1] = -h * lo[1:]

    def drive(u):
        if gen_cont is None:
            return np.zeros_like(u)
        z = np.gradient(u, dx, edge_order=1)
        out = np.zeros_like(u)
        with np.errstate(divide="ignore", invalid="ignore"):
            out[1:] = 2.0 * s[1:] * gen_cont(x[1:], u[1:], z[1:])
        return out

    u = np.asarray(terminal(x), dtype=float).copy()
    if not np.all(np.isfinite(u)):
        raise DomainError("terminal map must be finite on the grid")
    want = np.unique(np.round(np.linspace(0, n, min(n_snap, n + 1))).astype(np.int64))
    snaps = {n: u.copy()}
    u0 = u[0]
    for k in range(n - 1, -1, -1):
        rhs0 = u + h * apply_L(u)
        g1 = drive(u)
        pred = solve_banded((1, 1), ab, rhs0 + dt * g1)
        pred[0] = u0
        g = 0.5 * (g1 + drive(pred))
        u = solve_banded((1, 1), ab, rhs0 + dt * g)
        u[0] = u0
        if not np.all(np.isfinite(u)):
            raise NumericError(f"non-finite limit field at step {k}")
        if k in snaps or k in set(want.tolist()):
            snaps[k] = u.copy()
    return LatticeSolution(times=want * dt, states=x, u=np.stack([snaps[k] for k in want]), K=None,
                           x0=float(x0), dt=dt, n_steps=n)


# --- convergence diagnostics ----------------------------------------------------------

def convergence_report(
    discrete: dict,
    limit: LatticeSolution,
    model: PopulationModel,
    x0: float,
    T: float,
    n_paths: int,
    *,
    seed: int = 0,
    dt_euler: float = 1e-4,
    window=None,
    n_eval: int = 10,
) -> ExperimentTable:
    """Discrete-vs-limit errors per K.

    Deterministic columns: ``y0_abs_err`` and ``field_sup_err`` (sup over
    snapshot times and lattice states in ``window``).  MC columns, each
    with an SE: ``ypath_sup_err``, the sup over ``n_eval`` times of the
    gap between mean ``Y`` along base-law paths, and the brackets
    ``bracket_K = E int (z_b^2 lb + z_d^2 ld) ds``,
    ``bracket_lim = E int z^2 sig2 ds``.
    """
    from .feller import euler_batch
    from .simulate import simulate_batch

    lo, hi = window if window is not None else (0.5 * x0, 2.0 * x0)
    steps = int(round(T / dt_euler))
    if steps % n_eval:
        raise ConfigError("n_eval must divide the number of Euler steps")
    eval_t = np.linspace(0.0, T, n_eval + 1)
    z_lim = limit.z
    ref = euler_batch(
        model, x0, T, dt_euler, seed, n_paths, record_every=steps // n_eval,
        integrands={"bracket": lambda t, x: limit.field_at(z_lim, t, x) ** 2 * model.sig2(x)},
    )
    y_ref = np.stack([limit.at(t, ref.X[:, j]) for j, t in enumerate(eval_t)], axis=1)
    br_lim, br_lim_se = mean_se(ref.integrals["bracket"][:, -1])
    names = ("K", "y0_abs_err", "field_sup_err", "ypath_sup_err", "ypath_sup_err_se",
             "bracket_K", "bracket_K_se", "bracket_lim", "bracket_lim_se")
    cols = {k: [] for k in names}
    for K in sorted(discrete):
        sol = discrete[K]
        zb, zd = sol.z_b, sol.z_d
        lb, ld = intensities(model, K, sol.states)
        fb_field = zb**2 * lb + zd**2 * ld
        res = simulate_batch(
            model, ScalingContext(K, x0, T), seed, n_paths, grid=eval_t,
            integrands={"bracket": lambda t, x, F=fb_field, s=sol: s.field_at(F, t, x)},
        )
        yk = np.stack([sol.at(t, res.X[:, j]) for j, t in enumerate(eval_t)], axis=1)
        gaps = [mean_se(yk[:, j])[0] - mean_se(y_ref[:, j])[0] for j in range(eval_t.size)]
        j = int(np.argmax(np.abs(gaps)))
        gap_se = float(np.hypot(mean_se(yk[:, j])[1], mean_se(y_ref[:, j])[1]))
        mask = (sol.states >= lo) & (sol.states <= hi)
        fsup = 0.0
        for k, t in enumerate(sol.times):
            ul = limit.at(np.full(mask.sum(), t), sol.states[mask])
            fsup = max(fsup, float(np.max(np.abs(sol.at(np.full(mask.sum(), t), sol.states[mask]) - ul))))
        bk, bk_se = mean_se(res.integrals["bracket"][:, -1])
        row = (K, abs(sol.Y0 - limit.Y0), fsup, abs(gaps[j]), gap_se, bk, bk_se, br_lim, br_lim_se)
        for name, v in zip(names, row):
            cols[name].append(v)
    return ExperimentTable("bsde_convergence", cols,
                           stochastic=("ypath_sup_err", "bracket_K", "bracket_lim"),
                           meta={"window": [lo, hi], "n_paths": n_paths})
