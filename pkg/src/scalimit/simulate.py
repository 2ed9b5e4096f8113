"""Exact event-driven simulation of the scaled birth/death chain.

Between jumps the state is constant, so the uncontrolled chain is sampled
exactly with exponential clocks.  Under a feedback control the death
intensity ``lambda_d(x) + hK(x, alpha(t, x))`` varies in time between jumps;
candidates are then drawn at an upper-bound rate and accepted by thinning,
which is still exact.  Each candidate consumes two uniforms (clock and
mark) from the path's own stream, so an identically-zero control
reproduces the uncontrolled path bit for bit.

Many paths are advanced together: one loop iteration moves every active
path to its next candidate or its next recording time, whichever is first.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import AdmissibilityError, CouplingError, DomainError, ResourceError
from .model import PopulationModel, ScalingContext, intensities
from .rng import StreamBank

DEFAULT_MAX_EVENTS = 10**8
BIRTH, DEATH = 1, -1

_GL_X, _GL_W = np.polynomial.legendre.leggauss(5)
GL_NODES = (_GL_X + 1.0) / 2.0
GL_WEIGHTS = _GL_W / 2.0


def gl_integral(fn: Callable, t0: np.ndarray, t1: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Five-point Gauss-Legendre integral of ``fn(t, x)`` over ``[t0, t1]`` at fixed ``x``."""
    dt = t1 - t0
    total = np.zeros_like(dt)
    for node, weight in zip(GL_NODES, GL_WEIGHTS):
        total += weight * fn(t0 + node * dt, x)
    return total * dt


@dataclass
class PolicyK:
    """Markovian feedback control of the death intensity.

    ``control(t, x)`` and ``hK(x, alpha)`` must accept numpy arrays.
    ``rate_bound(x)``, when given, must dominate ``hK(x, alpha(t, x))`` for
    every ``t`` in the horizon; by default the larger endpoint value of
    ``hK`` over the control interval is used, which is valid for ``hK``
    monotone in ``alpha``.
    """

    control: Callable
    hK: Callable
    a_lo: float
    a_hi: float
    rate_bound: Optional[Callable] = None

    def alpha(self, t, x):
        x = np.asarray(x, dtype=float)
        a = np.clip(self.control(t, x), -self.a_lo, self.a_hi)
        return np.broadcast_to(a, np.broadcast(np.asarray(t), x).shape).astype(float)

    def shift(self, t, x):
        return self.hK(np.asarray(x, dtype=float), self.alpha(t, x))

    def bound(self, x):
        if self.rate_bound is not None:
            return np.asarray(self.rate_bound(x), dtype=float)
        x = np.asarray(x, dtype=float)
        lo = self.hK(x, np.full_like(x, -self.a_lo))
        hi = self.hK(x, np.full_like(x, self.a_hi))
        return np.maximum(lo, hi)

    def certificate(self, model: PopulationModel, K: float, x_grid, n_alpha: int = 41):
        """Sampled Assumption-style checks.

        Returns ``(min_death_rate, C_hat)`` where ``min_death_rate`` is the
        smallest ``lambda_d + hK`` over the sampled ``(x, alpha)`` with
        ``x > 0`` and ``C_hat`` the largest ``hK^2 / (lambda_d x)``.
        """
        x = np.asarray(x_grid, dtype=float)
        x = x[x > 0]
        alphas = np.linspace(-self.a_lo, self.a_hi, n_alpha)
        xx, aa = np.meshgrid(x, alphas)
        _, ld = intensities(model, K, xx)
        h = self.hK(xx, aa)
        return float((ld + h).min()), float((h * h / (ld * xx)).max())


def constant_policy(alpha: float, hK: Callable, a_lo: float, a_hi: float) -> PolicyK:
    return PolicyK(lambda t, x: np.full(np.broadcast(np.asarray(t), x).shape, float(alpha)), hK, a_lo, a_hi)


def zero_policy() -> PolicyK:
    return PolicyK(
        lambda t, x: np.zeros(np.broadcast(np.asarray(t), x).shape),
        lambda x, a: np.zeros_like(np.asarray(x, dtype=float) * a),
        0.0,
        0.0,
        rate_bound=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
    )


@dataclass
class JumpPath:
    """Event record of one trajectory; ``kinds`` holds +1 (birth) / -1 (death)."""

    times: np.ndarray
    kinds: np.ndarray
    initial_count: int
    K: float
    horizon_T: float
    model: Optional[PopulationModel] = field(default=None, repr=False)

    @property
    def counts_after(self) -> np.ndarray:
        return self.initial_count + np.cumsum(self.kinds, dtype=np.int64)

    def count_at(self, t) -> np.ndarray:
        j = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right")
        counts = np.concatenate([[self.initial_count], self.counts_after])
        return counts[j]

    def X_at(self, t) -> np.ndarray:
        return self.count_at(t) / self.K

    def __len__(self) -> int:
        return int(self.times.size)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "kind", "count_after"])
            for t, k, c in zip(self.times, self.kinds, self.counts_after):
                w.writerow([f"{t:.17g}", "birth" if k == BIRTH else "death", int(c)])


@dataclass
class ScaledSnapshot:
    grid: np.ndarray
    X: np.ndarray
    Nbar_b: np.ndarray
    Nbar_d: np.ndarray
    Lambdabar_b: np.ndarray
    Lambdabar_d: np.ndarray
    K: float

    @property
    def Mbar_b(self) -> np.ndarray:
        return self.K * (self.Nbar_b - self.Lambdabar_b)

    @property
    def Mbar_d(self) -> np.ndarray:
        return self.K * (self.Nbar_d - self.Lambdabar_d)

    @property
    def A(self) -> np.ndarray:
        return self.Lambdabar_b + self.Lambdabar_d

    def to_csv(self, path) -> None:
        cols = ["t", "X", "Nbar_b", "Nbar_d", "Lambdabar_b", "Lambdabar_d", "Mbar_b", "Mbar_d"]
        data = [self.grid, self.X, self.Nbar_b, self.Nbar_d, self.Lambdabar_b,
                self.Lambdabar_d, self.Mbar_b, self.Mbar_d]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in zip(*data):
                w.writerow([f"{v:.17g}" for v in row])


def scaled_snapshot(path: JumpPath, grid) -> ScaledSnapshot:
    """Exact scaled processes of ``path`` on ``grid``; compensators are piecewise exact."""
    if path.model is None:
        raise DomainError("path carries no model; cannot evaluate compensators")
    grid = np.asarray(grid, dtype=float)
    if np.any(grid < 0) or np.any(grid > path.horizon_T * (1 + 1e-12)):
        raise DomainError("grid must lie in [0, T]")
    K = path.K
    counts = np.concatenate([[path.initial_count], path.counts_after])
    starts = np.concatenate([[0.0], path.times])
    lb, ld = intensities(path.model, K, counts / K)
    widths = np.diff(starts)
    cum_b = np.concatenate([[0.0], np.cumsum(lb[:-1] * widths)])
    cum_d = np.concatenate([[0.0], np.cumsum(ld[:-1] * widths)])
    j = np.searchsorted(path.times, grid, side="right")
    tail = grid - starts[j]
    births = np.concatenate([[0], np.cumsum(path.kinds == BIRTH)])
    deaths = np.concatenate([[0], np.cumsum(path.kinds == DEATH)])
    return ScaledSnapshot(
        grid=grid,
        X=counts[j] / K,
        Nbar_b=births[j] / K**2,
        Nbar_d=deaths[j] / K**2,
        Lambdabar_b=(cum_b[j] + lb[j] * tail) / K**2,
        Lambdabar_d=(cum_d[j] + ld[j] * tail) / K**2,
        K=K,
    )


@dataclass
class BatchResult:
    """Grid records of a batch of paths; arrays are ``(n_paths, n_grid)``.

    ``Lb``, ``Ld`` are the base-model compensators ``int lambda ds`` (unscaled),
    ``H`` the integrated control shift ``int hK ds`` and ``integrals`` the
    running integrals of the requested integrands.
    """

    K: float
    grid: np.ndarray
    X: np.ndarray
    Nb: np.ndarray
    Nd: np.ndarray
    Lb: np.ndarray
    Ld: np.ndarray
    H: Optional[np.ndarray]
    integrals: dict
    log_weight: Optional[np.ndarray]
    n_events: np.ndarray
    paths: Optional[list] = None

    @property
    def Nbar_b(self):
        return self.Nb / self.K**2

    @property
    def Nbar_d(self):
        return self.Nd / self.K**2

    @property
    def Lambdabar_b(self):
        return self.Lb / self.K**2

    @property
    def Lambdabar_d(self):
        return self.Ld / self.K**2

    @property
    def Mbar_b(self):
        return (self.Nb - self.Lb) / self.K

    @property
    def Mbar_d(self):
        return (self.Nd - self.Ld) / self.K

    @property
    def X_T(self):
        return self.X[:, -1]


def _make_grid(grid, T: float) -> np.ndarray:
    if grid is None:
        return np.array([0.0, T])
    g = np.asarray(grid, dtype=float)
    if g.ndim != 1 or g.size < 1 or np.any(np.diff(g) <= 0):
        raise DomainError("grid must be strictly increasing")
    if g[0] < 0 or g[-1] > T * (1 + 1e-12):
        raise DomainError("grid must lie in [0, T]")
    if g[0] > 0:
        g = np.concatenate([[0.0], g])
    if g[-1] < T:
        g = np.concatenate([g, [T]])
    g[-1] = T
    return g


def _expected_events(model, ctx, policy) -> float:
    x = ctx.x_start
    lb, ld = intensities(model, ctx.K, np.array([x]))
    rate = float(lb[0] + ld[0])
    if policy is not None:
        rate += max(float(policy.bound(np.array([x]))[0]), 0.0)
    growth = np.exp(max(model.nu - model.mu, 0.0) * ctx.horizon_T) if np.isfinite(model.nu) else 1.0
    return rate * ctx.horizon_T * growth


def simulate_batch(
    model: PopulationModel,
    ctx: ScalingContext,
    seed: int,
    n_paths: Optional[int] = None,
    *,
    indices=None,
    policy: Optional[PolicyK] = None,
    grid=None,
    integrands: Optional[dict] = None,
    weight_policy: Optional[PolicyK] = None,
    record_events: bool = False,
    max_events: int = DEFAULT_MAX_EVENTS,
    tag: int = 0,
) -> BatchResult:
    """Simulate paths ``indices`` (default ``range(n_paths)``) of the run ``seed``.

    ``integrands`` maps names to ``F(t, x)``; their running integrals are
    recorded on the grid.  ``weight_policy`` accumulates the log of the
    change-of-measure density towards that policy (meaningful for base
    runs, ``policy=None``).
    """
    K, T = float(ctx.K), float(ctx.horizon_T)
    idx = np.arange(n_paths) if indices is None else np.asarray(indices, dtype=np.int64)
    n_p = idx.size
    if _expected_events(model, ctx, policy) > max_events:
        raise ResourceError(
            f"expected event count {_expected_events(model, ctx, policy):.3g} exceeds cap {max_events}"
        )
    grid = _make_grid(grid, T)
    G = grid.size
    integrands = dict(integrands or {})
    bank = StreamBank(seed, idx, tag=tag)

    n = np.full(n_p, ctx.initial_count, dtype=np.int64)
    t = np.zeros(n_p)
    nb = np.zeros(n_p, dtype=np.int64)
    nd = np.zeros(n_p, dtype=np.int64)
    lb_int = np.zeros(n_p)
    ld_int = np.zeros(n_p)
    h_int = np.zeros(n_p)
    acc = {k: np.zeros(n_p) for k in integrands}
    logw = np.zeros(n_p)
    n_ev = np.zeros(n_p, dtype=np.int64)

    rec = {k: np.zeros((n_p, G)) for k in ("X", "Lb", "Ld", "H")}
    rec_nb = np.zeros((n_p, G), dtype=np.int64)
    rec_nd = np.zeros((n_p, G), dtype=np.int64)
    rec_acc = {k: np.zeros((n_p, G)) for k in integrands}
    rec["X"][:, 0] = n / K

    gi = np.ones(n_p, dtype=np.int64)
    active = np.ones(n_p, dtype=bool) if G > 1 else np.zeros(n_p, dtype=bool)
    pend_t = np.full(n_p, np.nan)
    pend_w = np.zeros(n_p)
    ev_rows, ev_times, ev_kinds = [], [], []

    while True:
        act = np.flatnonzero(active)
        if act.size == 0:
            break
        need = act[np.isnan(pend_t[act])]
        if need.size:
            xn = n[need] / K
            lbn, ldn = intensities(model, K, xn)
            R = lbn + ldn
            if policy is not None:
                R = R + np.maximum(policy.bound(xn), 0.0)
            live = R > 0
            pend_t[need[~live]] = np.inf
            rows = need[live]
            if rows.size:
                u1 = bank.draw(rows)
                u2 = bank.draw(rows)
                pend_t[rows] = t[rows] - np.log1p(-u1) / R[live]
                pend_w[rows] = u2 * R[live]

        tp = pend_t[act]
        tg = grid[gi[act]]
        stop = np.minimum(tp, tg)
        x = n[act] / K
        t0 = t[act]
        lba, lda = intensities(model, K, x)
        lb_int[act] += lba * (stop - t0)
        ld_int[act] += lda * (stop - t0)
        if policy is not None:
            h_int[act] += gl_integral(policy.shift, t0, stop, x)
        if weight_policy is not None:
            logw[act] -= gl_integral(weight_policy.shift, t0, stop, x)
        for k, fn in integrands.items():
            acc[k][act] += gl_integral(fn, t0, stop, x)
        t[act] = stop

        hit = tg <= tp
        r = act[hit]
        if r.size:
            g = gi[r]
            rec["X"][r, g] = n[r] / K
            rec["Lb"][r, g] = lb_int[r]
            rec["Ld"][r, g] = ld_int[r]
            rec["H"][r, g] = h_int[r]
            rec_nb[r, g] = nb[r]
            rec_nd[r, g] = nd[r]
            for k in integrands:
                rec_acc[k][r, g] = acc[k][r]
            gi[r] = g + 1
            active[r[g + 1 >= G]] = False

        e = act[~hit]
        if e.size:
            te = pend_t[e]
            xe = n[e] / K
            lbe, lde = intensities(model, K, xe)
            death_rate = lde
            if policy is not None:
                h = policy.shift(te, xe)
                bound = policy.bound(xe)
                if np.any(h > bound + 1e-9 * np.maximum(1.0, np.abs(bound))):
                    raise DomainError("policy rate_bound is not an upper bound of hK along the path")
                death_rate = lde + h
                bad = (death_rate < -1e-9 * np.maximum(1.0, lde)) | ((xe == 0) & (h != 0))
                if np.any(bad):
                    i = int(np.flatnonzero(bad)[0])
                    a = float(policy.alpha(te[i], xe[i]))
                    raise AdmissibilityError(float(te[i]), float(xe[i]), a, float(death_rate[i]))
            w = pend_w[e]
            birth = w < lbe
            death = ~birth & (w < lbe + death_rate)
            if weight_policy is not None and np.any(death):
                de = e[death]
                hw = weight_policy.shift(te[death], xe[death])
                factor = 1.0 + hw / lde[death]
                if np.any(factor <= 0):
                    raise DomainError("change-of-measure factor <= 0 at a death jump")
                logw[de] += np.log(factor)
            bi, di = e[birth], e[death]
            n[bi] += 1
            nb[bi] += 1
            n[di] -= 1
            nd[di] += 1
            jumped = e[birth | death]
            n_ev[jumped] += 1
            if jumped.size and n_ev[jumped].max() > max_events:
                raise ResourceError(f"path exceeded the event cap {max_events}")
            if record_events and jumped.size:
                ev_rows.append(jumped)
                ev_times.append(pend_t[jumped].copy())
                ev_kinds.append(np.where(birth[birth | death], BIRTH, DEATH).astype(np.int8))
            pend_t[e] = np.nan

    paths = None
    if record_events:
        paths = _split_events(ev_rows, ev_times, ev_kinds, n_p, ctx, model)
    return BatchResult(
        K=K,
        grid=grid,
        X=rec["X"],
        Nb=rec_nb,
        Nd=rec_nd,
        Lb=rec["Lb"],
        Ld=rec["Ld"],
        H=rec["H"] if policy is not None else None,
        integrals=rec_acc,
        log_weight=logw if weight_policy is not None else None,
        n_events=n_ev,
        paths=paths,
    )


def _split_events(rows, times, kinds, n_p, ctx, model) -> list:
    if rows:
        r = np.concatenate(rows)
        tt = np.concatenate(times)
        kk = np.concatenate(kinds)
        order = np.argsort(r, kind="stable")
        r, tt, kk = r[order], tt[order], kk[order]
        cuts = np.searchsorted(r, np.arange(n_p + 1))
    else:
        tt = np.zeros(0)
        kk = np.zeros(0, dtype=np.int8)
        cuts = np.zeros(n_p + 1, dtype=np.int64)
    return [
        JumpPath(tt[cuts[i]:cuts[i + 1]], kk[cuts[i]:cuts[i + 1]], ctx.initial_count,
                 float(ctx.K), float(ctx.horizon_T), model)
        for i in range(n_p)
    ]


def simulate_path(model, ctx, seed, index: int = 0, max_events: int = DEFAULT_MAX_EVENTS) -> JumpPath:
    res = simulate_batch(model, ctx, seed, indices=[index], record_events=True, max_events=max_events)
    return res.paths[0]


def simulate_controlled_path(
    model, ctx, policy: PolicyK, seed, index: int = 0, max_events: int = DEFAULT_MAX_EVENTS
) -> JumpPath:
    res = simulate_batch(
        model, ctx, seed, indices=[index], policy=policy, record_events=True, max_events=max_events
    )
    return res.paths[0]


def likelihood_weight(path: JumpPath, policy: PolicyK, model=None, ctx=None) -> float:
    """Doleans-Dade density ``L_T`` tilting the death intensity by ``policy.shift``.

    ``prod_deaths (1 + h/lambda_d) * exp(-int_0^T h ds)`` evaluated on ``path``;
    the time integral uses Gauss-Legendre on each inter-jump interval.
    """
    model = model if model is not None else path.model
    if model is None:
        raise DomainError("a model is required to evaluate the density")
    K = path.K
    T = path.horizon_T if ctx is None else ctx.horizon_T
    counts = np.concatenate([[path.initial_count], path.counts_after])
    starts = np.concatenate([[0.0], path.times])
    ends = np.concatenate([path.times, [T]])
    x = counts / K
    integral = gl_integral(policy.shift, starts, ends, x).sum()
    log_l = -integral
    deaths = np.flatnonzero(path.kinds == DEATH)
    if deaths.size:
        pre = x[deaths]
        _, ld = intensities(model, K, pre)
        if np.any(ld <= 0):
            raise DomainError("death jump at a state with zero death intensity")
        factor = 1.0 + policy.shift(path.times[deaths], pre) / ld
        if np.any(factor <= 0):
            raise DomainError("change-of-measure factor <= 0 at a death jump")
        log_l += np.log(factor).sum()
    return float(np.exp(log_l))


# --- thinning coupling -------------------------------------------------------

_JB, _DB, _JD, _PD, _DD = range(5)


@dataclass
class CouplingResult:
    violations: int
    min_gap: int
    n_events: np.ndarray
    pairs: Optional[list] = None


def _coupled_batch(model, ctx, branch_nu, branch_mu, seed, indices, record, max_events, tag=7):
    K = float(ctx.K)
    idx = np.asarray(indices, dtype=np.int64)
    n_p = idx.size
    bank = StreamBank(seed, idx, tag=tag)
    n1 = np.full(n_p, ctx.initial_count, dtype=np.int64)
    n2 = n1.copy()
    t = np.zeros(n_p)
    active = n1 > 0
    violations = 0
    min_gap = 0
    n_ev = np.zeros(n_p, dtype=np.int64)
    log = []
    T = float(ctx.horizon_T)
    while True:
        act = np.flatnonzero(active)
        if act.size == 0:
            break
        a1, a2 = n1[act], n2[act]
        gb, gd = intensities(model, K, a2 / K)
        tol = 1e-12 * np.maximum(1.0, gb + gd)
        if np.any(gb > branch_nu * a2 + tol):
            i = int(np.flatnonzero(gb > branch_nu * a2 + tol)[0])
            raise CouplingError(int(a2[i]), "population birth rate exceeds branch_nu * n")
        if np.any(gd < branch_mu * a2 - tol):
            i = int(np.flatnonzero(gd < branch_mu * a2 - tol)[0])
            raise CouplingError(int(a2[i]), "population death rate below branch_mu * n")
        eq = a1 == a2
        rates = np.zeros((act.size, 5))
        rates[:, _JB] = gb
        rates[:, _DB] = np.maximum(branch_nu * a1 - gb, 0.0)
        rates[:, _JD] = np.where(eq, branch_mu * a1, 0.0)
        rates[:, _PD] = np.where(eq, np.maximum(gd - branch_mu * a2, 0.0), gd)
        rates[:, _DD] = np.where(eq, 0.0, branch_mu * a1)
        R = rates.sum(axis=1)
        dead = R <= 0
        active[act[dead]] = False
        act, rates, R = act[~dead], rates[~dead], R[~dead]
        if act.size == 0:
            break
        u1 = bank.draw(act)
        u2 = bank.draw(act)
        tn = t[act] - np.log1p(-u1) / R
        late = tn > T
        active[act[late]] = False
        act, rates, R, tn, u2 = act[~late], rates[~late], R[~late], tn[~late], u2[~late]
        if act.size == 0:
            break
        t[act] = tn
        cum = np.cumsum(rates, axis=1)
        mark = (u2 * R)[:, None] >= cum
        kind = np.minimum(mark.sum(axis=1), 4)
        d1 = np.select([kind == _JB, kind == _DB, kind == _JD, kind == _DD], [1, 1, -1, -1], 0)
        d2 = np.select([kind == _JB, kind == _JD, kind == _PD], [1, -1, -1], 0)
        n1[act] += d1
        n2[act] += d2
        gap = n1[act] - n2[act]
        violations += int((gap < 0).sum())
        min_gap = min(min_gap, int(gap.min()))
        n_ev[act] += 1
        if n_ev[act].max() > max_events:
            raise ResourceError(f"coupled path exceeded the event cap {max_events}")
        if record:
            log.append((act.copy(), tn.copy(), d1.astype(np.int8), d2.astype(np.int8)))
    pairs = None
    if record:
        dom_model = PopulationModel.linear(branch_nu, branch_mu, 0.0)
        pairs = []
        for i in range(n_p):
            parts = [(tt[r == i], k1[r == i], k2[r == i]) for r, tt, k1, k2 in log]
            tt = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0)
            k1 = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, np.int8)
            k2 = np.concatenate([p[2] for p in parts]) if parts else np.zeros(0, np.int8)
            dom = JumpPath(tt[k1 != 0], k1[k1 != 0], ctx.initial_count, K, T, dom_model)
            pop = JumpPath(tt[k2 != 0], k2[k2 != 0], ctx.initial_count, K, T, model)
            pairs.append((dom, pop))
    return CouplingResult(violations, min_gap, n_ev, pairs)


def thinning_coupled_pair(model, ctx, branch_nu, branch_mu, seed, index: int = 0,
                          max_events: int = DEFAULT_MAX_EVENTS):
    """Dominating linear branching path and population path on one event stream.

    Population births are always shared with the dominating process; while
    the two counts are equal the dominating process can only die jointly.
    Counts (not scaled states) are compared.
    """
    res = _coupled_batch(model, ctx, branch_nu, branch_mu, seed, [index], True, max_events)
    return res.pairs[0]


def thinning_domination_check(model, ctx, branch_nu, branch_mu, seed, n_paths: int,
                              max_events: int = DEFAULT_MAX_EVENTS) -> CouplingResult:
    return _coupled_batch(model, ctx, branch_nu, branch_mu, seed, np.arange(n_paths), False, max_events)
