"""Control of the death intensity: generators, verification and convergence statistics.

The discrete problem maximises ``E[Phi(X_T) + int c^K(X, alpha) ds]`` where
the control adds ``h^K(x, alpha)`` to the death intensity.  Its BSDE driver
is ``g_d = sup_alpha (c^K + z h^K) / lambda_d`` with ``z = D-u``.  In the
limit the control reduces the drift by ``h(x, alpha)``; with ``z = u_x`` the
driver is ``g = sup_alpha (c - z h) / sig2``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .bsde import GeneratorK, LatticeSolution, solve_discrete_bsde, solve_limit_bsde, default_x_max
from .errors import DomainError
from .feller import euler_batch
from .model import PopulationModel, ScalingContext, intensities
from .simulate import PolicyK, simulate_batch
from .stats import ks_critical, ks_statistic, mean_se
from .table import ExperimentTable

GOLDEN_TOL = 1e-10
_INVPHI = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass
class QuadraticPair:
    """``c = c2 alpha^2 + c1 alpha + c0`` and ``h = h1 alpha + h0``, coefficients functions of x."""

    c2: Callable
    c1: Callable
    c0: Callable
    h1: Callable
    h0: Callable


@dataclass
class ControlProblemK:
    model: PopulationModel
    ctx: ScalingContext
    cK: Callable
    hK: Callable
    a_lo: float
    a_hi: float
    terminal: Callable
    quadratic: Optional[QuadraticPair] = None

    @property
    def K(self) -> float:
        return float(self.ctx.K)

    def certificate(self, x_grid, n_alpha: int = 41) -> dict:
        """Sampled admissibility and Lipschitz envelopes.

        ``min_death_rate`` is the least ``lambda_d + hK`` over ``x > 0``,
        ``C_hat`` the largest ``hK^2 / (lambda_d x)`` and ``lipschitz_z`` the
        largest ``K |hK| / lambda_d`` (slope of ``z -> K^2 g_d(z/K)``).
        """
        x = np.asarray(x_grid, dtype=float)
        x = x[x > 0]
        al = np.linspace(-self.a_lo, self.a_hi, n_alpha)
        xx, aa = np.meshgrid(x, al)
        _, ld = intensities(self.model, self.K, xx)
        h = self.hK(xx, aa)
        return {
            "min_death_rate": float((ld + h).min()),
            "C_hat": float((h * h / (ld * xx)).max()),
            "lipschitz_z": float((self.K * np.abs(h) / ld).max()),
        }


@dataclass
class ControlProblem:
    model: PopulationModel
    x0: float
    T: float
    c: Callable
    h: Callable
    a_lo: float
    a_hi: float
    terminal: Callable
    quadratic: Optional[QuadraticPair] = None

    def certificate(self, x_grid, n_alpha: int = 41) -> dict:
        x = np.asarray(x_grid, dtype=float)
        x = x[x > 0]
        al = np.linspace(-self.a_lo, self.a_hi, n_alpha)
        xx, aa = np.meshgrid(x, al)
        s2 = self.model.sig2(xx)
        h = self.h(xx, aa)
        return {"C_hat": float((h * h / (s2 * xx)).max()), "lipschitz_z": float((np.abs(h) / s2).max())}


def _sign(problem) -> float:
    return 1.0 if isinstance(problem, ControlProblemK) else -1.0


def _h(problem):
    return problem.hK if isinstance(problem, ControlProblemK) else problem.h


def _c(problem):
    return problem.cK if isinstance(problem, ControlProblemK) else problem.c


def _objective(problem, x, z, a):
    val = _c(problem)(x, a) + _sign(problem) * z * _h(problem)(x, a)
    if not np.all(np.isfinite(val)):
        raise DomainError("non-finite Hamiltonian value")
    return val


def _golden(problem, x, z):
    lo = np.full(x.shape, -float(problem.a_lo))
    hi = np.full(x.shape, float(problem.a_hi))
    while np.max(hi - lo) > GOLDEN_TOL:
        c = hi - _INVPHI * (hi - lo)
        d = lo + _INVPHI * (hi - lo)
        left = _objective(problem, x, z, c) >= _objective(problem, x, z, d)
        hi = np.where(left, d, hi)
        lo = np.where(left, lo, c)
    best = 0.5 * (lo + hi)
    cands = np.stack([best, np.full(x.shape, -float(problem.a_lo)), np.full(x.shape, float(problem.a_hi))])
    vals = np.stack([_objective(problem, x, z, a) for a in cands])
    return cands[np.argmax(vals, axis=0), np.arange(x.size)]


def _quadratic(problem, x, z):
    q = problem.quadratic
    s = _sign(problem)
    a_lo, a_hi = -float(problem.a_lo), float(problem.a_hi)
    c2 = np.broadcast_to(q.c2(x), x.shape)
    slope = q.c1(x) + s * z * q.h1(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        interior = np.clip(-slope / (2.0 * c2), a_lo, a_hi)
    f_lo = c2 * a_lo**2 + slope * a_lo
    f_hi = c2 * a_hi**2 + slope * a_hi
    endpoint = np.where(f_hi > f_lo, a_hi, np.where(f_hi < f_lo, a_lo, np.clip(0.0, a_lo, a_hi)))
    return np.where(c2 < 0, interior, endpoint)


def argmax_hamiltonian(problem, x, z, K: Optional[float] = None):
    """Maximiser over ``[-a_lo, a_hi]`` of ``c + z h`` (discrete) or ``c - z h`` (limit); 0 at x = 0."""
    x = np.asarray(x, dtype=float)
    z = np.broadcast_to(np.asarray(z, dtype=float), x.shape)
    if np.any(x < 0):
        raise DomainError("x must be nonnegative")
    shape = np.broadcast(x, z).shape
    x, z = np.broadcast_to(x, shape).ravel(), np.broadcast_to(z, shape).ravel()
    out = np.zeros(x.shape)
    pos = x > 0
    if pos.any():
        f = _quadratic if problem.quadratic is not None else _golden
        out[pos] = f(problem, x[pos], z[pos])
    out = out.reshape(shape)
    return out if out.ndim else float(out)


def _hamiltonian(problem, x, z):
    a = argmax_hamiltonian(problem, x, z)
    return _c(problem)(x, a) + _sign(problem) * z * _h(problem)(x, a)


def build_generator(problem, K: Optional[float] = None, x_grid=None):
    """BSDE driver from the maximised Hamiltonian.

    Discrete: a :class:`GeneratorK` with ``g_b = 0``; its Lipschitz
    constant is the sampled ``lipschitz_z`` envelope.  Limit: a function
    ``g(x, y, z)`` multiplying ``sig2(x)``.
    """
    if isinstance(problem, ControlProblemK):
        model, Kp = problem.model, problem.K

        def g_d(x, y, z):
            x = np.asarray(x, dtype=float)
            _, ld = intensities(model, Kp, x)
            with np.errstate(divide="ignore", invalid="ignore"):
                return np.where(x > 0, _hamiltonian(problem, x, z) / np.where(x > 0, ld, 1.0), 0.0)

        def g_b(x, y, z):
            return np.zeros(np.broadcast(x, y, z).shape)

        if x_grid is None:
            x_grid = np.linspace(0, default_x_max(model, problem.ctx.x_start, problem.ctx.horizon_T), 401)
        L = problem.certificate(x_grid)["lipschitz_z"]
        return GeneratorK(g_b, g_d, L, zero_b=True)

    model = problem.model

    def g(x, y, z):
        x = np.asarray(x, dtype=float)
        s2 = model.sig2(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(x > 0, _hamiltonian(problem, x, z) / np.where(x > 0, s2, 1.0), 0.0)

    return g


# --- verification ---------------------------------------------------------------

@dataclass
class VerificationReport:
    Y0: float
    mc_optimal: dict
    perturbations: list
    passed: bool
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"Y0": self.Y0, "mc_optimal": self.mc_optimal, "perturbations": self.perturbations,
                "pass": self.passed, "meta": self.meta}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def perturbation_battery(a_lo: float, a_hi: float) -> list:
    """``(name, shift or None, constant or None)`` triples."""
    out = [(f"opt{d:+g}", d, None) for d in (0.1, -0.1, 0.5, -0.5)]
    for q in (0.0, 0.25, 0.5, 0.75, 1.0):
        out.append((f"const_q{q:g}", None, -a_lo + q * (a_lo + a_hi)))
    return out


def _variant(base: Callable, shift, const, a_lo, a_hi) -> Callable:
    if const is not None:
        return lambda t, x: np.full(np.broadcast(np.asarray(t), np.asarray(x)).shape, const)
    return lambda t, x: np.clip(base(t, x) + shift, -a_lo, a_hi)


def lattice_policy(problem: ControlProblemK, sol: LatticeSolution) -> Callable:
    zd = sol.z_d
    return lambda t, x: argmax_hamiltonian(problem, x, sol.field_at(zd, t, x))


def limit_policy(problem: ControlProblem, sol: LatticeSolution) -> Callable:
    z = sol.z
    return lambda t, x: argmax_hamiltonian(problem, x, sol.field_at(z, t, x))


def mc_value_K(problem: ControlProblemK, control: Callable, n_paths: int, seed: int):
    pol = PolicyK(control, problem.hK, problem.a_lo, problem.a_hi)
    res = simulate_batch(problem.model, problem.ctx, seed, n_paths, policy=pol,
                         integrands={"c": lambda t, x: problem.cK(x, pol.alpha(t, x))})
    return mean_se(problem.terminal(res.X_T) + res.integrals["c"][:, -1])


def mc_value(problem: ControlProblem, control: Callable, n_paths: int, seed: int, dt: float):
    def ctl(t, x):
        return np.clip(control(t, x), -problem.a_lo, problem.a_hi)

    res = euler_batch(problem.model, problem.x0, problem.T, dt, seed, n_paths, control=ctl, h=problem.h,
                      integrands={"c": lambda t, x: problem.c(x, ctl(t, x))})
    return mean_se(problem.terminal(res.X_T) + res.integrals["c"][:, -1])


def _judge(Y0, opt, perts, slack):
    mean, se = opt
    ok = abs(Y0 - mean) <= 3 * se + slack
    ok &= all(Y0 >= p["mean"] - 3 * p["se"] - slack for p in perts)
    return bool(ok)


def solve_and_verify_K(problem: ControlProblemK, dt: Optional[float] = None, n_paths: int = 10_000,
                       seed: int = 0, x_max: Optional[float] = None) -> VerificationReport:
    """Lattice ``Y0^K`` against MC values of the induced feedback and of a perturbation battery."""
    sol = solve_discrete_bsde(problem.model, problem.ctx, build_generator(problem), problem.terminal, x_max, dt)
    opt = lattice_policy(problem, sol)
    mean, se = mc_value_K(problem, opt, n_paths, seed)
    perts = []
    for name, shift, const in perturbation_battery(problem.a_lo, problem.a_hi):
        m, s = mc_value_K(problem, _variant(opt, shift, const, problem.a_lo, problem.a_hi), n_paths, seed)
        perts.append({"name": name, "mean": m, "se": s})
    return VerificationReport(sol.Y0, {"mean": mean, "se": se, "n": n_paths}, perts,
                              _judge(sol.Y0, (mean, se), perts, 0.0), {"K": problem.K})


def solve_and_verify_continuous(problem: ControlProblem, grid: Optional[dict] = None, n_paths: int = 10_000,
                                seed: int = 0, dt_mc: float = 1e-4) -> VerificationReport:
    """Limit-PDE ``Y0`` against Euler MC values; bias allowance ``10 dt |Y0|``."""
    grid = dict(grid or {})
    x_max = grid.get("x_max", default_x_max(problem.model, problem.x0, problem.T))
    sol = solve_limit_bsde(problem.model, build_generator(problem), problem.terminal, x_max,
                           grid.get("nx", 2000), grid.get("dt", 1e-4), problem.T, problem.x0)
    opt = limit_policy(problem, sol)
    mean, se = mc_value(problem, opt, n_paths, seed, dt_mc)
    perts = []
    for name, shift, const in perturbation_battery(problem.a_lo, problem.a_hi):
        m, s = mc_value(problem, _variant(opt, shift, const, problem.a_lo, problem.a_hi), n_paths, seed, dt_mc)
        perts.append({"name": name, "mean": m, "se": s})
    slack = 10.0 * dt_mc * abs(sol.Y0)
    return VerificationReport(sol.Y0, {"mean": mean, "se": se, "n": n_paths}, perts,
                              _judge(sol.Y0, (mean, se), perts, slack), {"bias_allowance": slack})


# --- convergence of the controls ---------------------------------------------------------

def control_convergence_stats(
    model: PopulationModel,
    x0: float,
    T: float,
    K_list,
    policy_K: Callable,
    control_lim: Callable,
    h_lim: Callable,
    n_paths: int,
    *,
    seed: int = 0,
    dt: float = 1e-4,
    n_eval: int = 10,
) -> ExperimentTable:
    """Per-K gaps between control integrals of the chain and of the limit.

    ``policy_K(K)`` returns the discrete :class:`PolicyK`.  The integral
    columns are ``sup_t |E int_0^t alpha^K ld/K^2 ds - E int_0^t alpha sig2/2 ds|``
    and the squared-control analogue, evaluated at ``n_eval`` times from
    independent samples.  ``ks_XT`` is the two-sample KS distance of the
    terminal laws, reported with its 1% critical value.
    """
    steps = int(round(T / dt))
    if steps % n_eval:
        raise DomainError("n_eval must divide the number of Euler steps")
    eval_t = np.linspace(0.0, T, n_eval + 1)
    ref = euler_batch(
        model, x0, T, dt, seed, n_paths, control=control_lim, h=h_lim, record_every=steps // n_eval,
        integrands={
            "ia": lambda t, x: control_lim(t, x) * model.sig2(x) / 2.0,
            "ia2": lambda t, x: control_lim(t, x) ** 2 * model.sig2(x) / 2.0,
        },
    )
    names = ("K", "int_alpha_err", "int_alpha_err_se", "int_alpha2_err", "int_alpha2_err_se", "ks_XT", "ks_crit")
    cols = {k: [] for k in names}
    for K in K_list:
        pol = policy_K(K)

        def ia(t, x, p=pol, K=K):
            return p.alpha(t, x) * intensities(model, K, x)[1] / K**2

        def ia2(t, x, p=pol, K=K):
            return p.alpha(t, x) ** 2 * intensities(model, K, x)[1] / K**2

        res = simulate_batch(model, ScalingContext(K, x0, T), seed, n_paths, policy=pol, grid=eval_t,
                             integrands={"ia": ia, "ia2": ia2})
        row = [K]
        for name in ("ia", "ia2"):
            gaps, ses = [], []
            for j in range(eval_t.size):
                mk, sk = mean_se(res.integrals[name][:, j])
                ml, sl = mean_se(ref.integrals[name][:, j])
                gaps.append(abs(mk - ml))
                ses.append(np.hypot(sk, sl) if j else 0.0)
            j = int(np.argmax(gaps))
            row += [gaps[j], ses[j]]
        row += [ks_statistic(res.X_T, ref.X_T), ks_critical(n_paths, n_paths)]
        for name, v in zip(names, row):
            cols[name].append(v)
    return ExperimentTable("control_convergence", cols, stochastic=("int_alpha_err", "int_alpha2_err"),
                           meta={"n_paths": n_paths, "dt": dt})


# --- toy problem ------------------------------------------------------------------

def _toy_quadratic(scale: Callable) -> QuadraticPair:
    return QuadraticPair(
        c2=lambda x: -0.5 * np.asarray(x, dtype=float) ** 2,
        c1=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        c0=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        h1=scale,
        h0=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
    )


def toy_problem_K(params, K: float, a_hi: float = 2.0) -> ControlProblemK:
    """``c = -(alpha x)^2 / 2``, ``hK = K x alpha``, ``Phi = -gamma (x - x_tilde)^2``, ``alpha in [-nu, a_hi]``."""
    return ControlProblemK(
        model=params.model,
        ctx=params.ctx(K),
        cK=lambda x, a: -0.5 * (a * x) ** 2,
        hK=lambda x, a: K * x * a,
        a_lo=params.nu,
        a_hi=a_hi,
        terminal=params.terminal,
        quadratic=_toy_quadratic(lambda x: K * np.asarray(x, dtype=float)),
    )


def toy_problem(params, a_hi: float = 2.0) -> ControlProblem:
    return ControlProblem(
        model=params.model,
        x0=params.x0,
        T=params.T,
        c=lambda x, a: -0.5 * (a * x) ** 2,
        h=lambda x, a: a * x,
        a_lo=params.nu,
        a_hi=a_hi,
        terminal=params.terminal,
        quadratic=_toy_quadratic(lambda x: np.asarray(x, dtype=float)),
    )


def toy_control_convergence(params, K_list, n_paths: int, *, seed: int = 0, dt: float = 1e-4,
                            a_hi: float = 2.0) -> ExperimentTable:
    from .toy import solve_ode_triple, toy_policy, toy_policy_K

    control, h = toy_policy(solve_ode_triple(params), a_hi)
    return control_convergence_stats(
        params.model, params.x0, params.T, K_list,
        lambda K: toy_policy_K(solve_ode_triple(params, K), K, a_hi),
        control, h, n_paths, seed=seed, dt=dt,
    )
