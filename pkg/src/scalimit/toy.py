"""Linear-quadratic toy control problem.

The value function is quadratic, ``U(t, x) = a(t) x^2 + b(t) x + c(t)``,
where ``(a, b, c)`` solve a backward Riccati system.  The discrete system
carries ``1/K`` corrections from the lattice differences; the continuous
system is its ``K -> inf`` limit.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DomainError, NumericError
from .model import PopulationModel, ScalingContext
from .simulate import PolicyK
from .stats import ks_critical, ks_statistic, mean_se
from .table import ExperimentTable

DEFAULT_STEPS = 2000
DEFAULT_A_HI = 2.0


@dataclass(frozen=True)
class ToyParams:
    nu: float
    mu: float
    sigma2: float
    gamma: float
    x_tilde: float
    x0: float
    T: float

    def __post_init__(self):
        for name in ("nu", "mu", "sigma2", "gamma", "x_tilde", "x0"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise DomainError(f"{name} must be finite and >= 0, got {v}")
        if not self.T > 0:
            raise DomainError("T must be positive")

    @classmethod
    def figure1(cls) -> "ToyParams":
        return cls(nu=0.2, mu=0.1, sigma2=0.3, gamma=1.0, x_tilde=20.0, x0=50.0, T=0.1)

    @property
    def model(self) -> PopulationModel:
        return PopulationModel.linear(self.nu, self.mu, self.sigma2)

    def ctx(self, K: float) -> ScalingContext:
        return ScalingContext(K, self.x0, self.T)

    def assumption_warnings(self) -> list:
        """Standing assumptions that fail; reported rather than raised."""
        out = []
        if not self.sigma2 > 2 * self.gamma * self.x_tilde:
            out.append(f"sigma2 = {self.sigma2} <= 2 gamma x_tilde = {2 * self.gamma * self.x_tilde}")
        if not self.gamma < self.mu:
            out.append(f"gamma = {self.gamma} >= mu = {self.mu}")
        return out

    def terminal(self, x):
        return -self.gamma * (np.asarray(x, dtype=float) - self.x_tilde) ** 2


@dataclass
class OdeTriple:
    grid: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    K: Optional[float] = None
    params: Optional[ToyParams] = field(default=None, repr=False)

    def _weights(self, t):
        n = self.grid.size - 1
        pos = np.clip(np.asarray(t, dtype=float) / self.grid[-1] * n, 0.0, n)
        k = np.minimum(pos.astype(np.int64), n - 1)
        return k, pos - k

    def at(self, t):
        """Linearly interpolated ``(a, b, c)`` at times ``t`` (uniform grid)."""
        k, w = self._weights(t)
        return tuple((1 - w) * v[k] + w * v[k + 1] for v in (self.a, self.b, self.c))

    def ab(self, t):
        k, w = self._weights(t)
        return (1 - w) * self.a[k] + w * self.a[k + 1], (1 - w) * self.b[k] + w * self.b[k + 1]


def _rhs(y, p: ToyParams, K: Optional[float]):
    a, b, c = y
    r = p.nu - p.mu
    da = -2.0 * a * r - 2.0 * a * a
    if K is None:
        db = -2.0 * a * b - a * p.sigma2 - b * r
        dc = -0.5 * b * b
    else:
        d = a / K - b
        db = 2.0 * a * d - a * (p.sigma2 + (p.mu + p.nu) / K) - b * r
        dc = -0.5 * d * d
    return np.array([da, db, dc])


def solve_ode_triple(params: ToyParams, K: Optional[float] = None, dt: Optional[float] = None) -> OdeTriple:
    """Backward RK4 solution of the Riccati system on ``[0, T]``."""
    if K is not None and not K > 0:
        raise DomainError("K must be positive")
    n = DEFAULT_STEPS if dt is None else int(round(params.T / dt))
    if n < 1:
        raise DomainError("dt must be positive and at most T")
    h = params.T / n
    y = np.empty((n + 1, 3))
    y[n] = (-params.gamma, 2.0 * params.gamma * params.x_tilde, -params.gamma * params.x_tilde**2)
    for k in range(n, 0, -1):
        yk = y[k]
        k1 = _rhs(yk, params, K)
        k2 = _rhs(yk - 0.5 * h * k1, params, K)
        k3 = _rhs(yk - 0.5 * h * k2, params, K)
        k4 = _rhs(yk - h * k3, params, K)
        y[k - 1] = yk - h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y[k - 1])):
            raise NumericError(f"non-finite Riccati state at t = {(k - 1) * h:.6g}")
    grid = np.linspace(0.0, params.T, n + 1)
    return OdeTriple(grid, y[:, 0].copy(), y[:, 1].copy(), y[:, 2].copy(), K, params)


def closed_form_a(params: ToyParams, t):
    """Exact ``a(t)``; ``1/a`` solves a linear equation."""
    t = np.asarray(t, dtype=float)
    r = params.nu - params.mu
    if params.gamma == 0:
        return np.zeros_like(t)
    if r == 0:
        return 1.0 / (-1.0 / params.gamma - 2.0 * (params.T - t))
    w = (-1.0 / params.gamma + 1.0 / r) * np.exp(2.0 * r * (t - params.T)) - 1.0 / r
    return 1.0 / w


def value_function(triple: OdeTriple, x, t: float = 0.0):
    a, b, c = triple.at(t)
    x = np.asarray(x, dtype=float)
    out = a * x * x + b * x + c
    return out if out.ndim else float(out)


def _safe_div(num, x):
    x = np.asarray(x, dtype=float)
    return np.where(x > 0, num / np.where(x > 0, x, 1.0), 0.0)


def optimal_control_K(triple: OdeTriple, K: float, t, x):
    a, b = triple.ab(t)
    x = np.asarray(x, dtype=float)
    out = _safe_div(a / K - 2.0 * a * x - b, x)
    return out if out.ndim else float(out)


def optimal_control(triple: OdeTriple, t, x):
    a, b = triple.ab(t)
    x = np.asarray(x, dtype=float)
    out = _safe_div(-(2.0 * a * x + b), x)
    return out if out.ndim else float(out)


def admissibility_horizon(params: ToyParams, K: Optional[float] = None, dt: Optional[float] = None) -> float:
    """Largest time-to-maturity ``<= T`` on which ``a < 0``, ``b > 0`` (and ``sigma2 > b_K``).

    The system is autonomous, so the solution for a shorter horizon is a
    time shift of this one and the check runs over time-to-maturity.
    """
    if params.gamma == 0:
        return params.T
    tr = solve_ode_triple(params, K, dt)
    s = params.T - tr.grid[::-1]
    ok = (tr.a[::-1] < 0) & (tr.b[::-1] > 0)
    if K is not None:
        ok &= params.sigma2 - tr.b[::-1] > 0
    if ok.all():
        return params.T
    first = int(np.argmin(ok))
    return 0.0 if first == 0 else float(s[first - 1])


# --- policies ---------------------------------------------------------------

def toy_policy_K(triple: OdeTriple, K: float, a_hi: float = DEFAULT_A_HI) -> PolicyK:
    """Clamped feedback ``alpha^{K,*}`` acting through ``hK(x, alpha) = K x alpha``."""
    p = triple.params
    return PolicyK(
        control=lambda t, x: optimal_control_K(triple, K, t, x),
        hK=lambda x, a: K * x * a,
        a_lo=p.nu,
        a_hi=a_hi,
    )


def toy_policy(triple: OdeTriple, a_hi: float = DEFAULT_A_HI):
    """Clamped continuous feedback ``alpha*`` and its drift reduction ``h(x, alpha) = alpha x``."""
    p = triple.params

    def control(t, x):
        return np.clip(optimal_control(triple, t, x), -p.nu, a_hi)

    return control, (lambda x, a: a * x)


def toy_mc_value_K(params: ToyParams, K: float, n_paths: int, seed: int, a_hi: float = DEFAULT_A_HI,
                   triple: Optional[OdeTriple] = None):
    """MC estimate of ``J_0`` under ``alpha^{K,*}``: mean and SE."""
    from .simulate import simulate_batch

    triple = triple or solve_ode_triple(params, K)
    pol = toy_policy_K(triple, K, a_hi)
    cost = {"cost": lambda t, x: -0.5 * (pol.alpha(t, x) * x) ** 2}
    res = simulate_batch(params.model, params.ctx(K), seed, n_paths, policy=pol, integrands=cost)
    return mean_se(params.terminal(res.X_T) + res.integrals["cost"][:, -1])


def toy_mc_value(params: ToyParams, n_paths: int, seed: int, dt: float = 1e-4, a_hi: float = DEFAULT_A_HI,
                 triple: Optional[OdeTriple] = None):
    """MC estimate of ``J_0`` under ``alpha*`` with the Euler scheme: mean and SE."""
    from .feller import euler_batch

    triple = triple or solve_ode_triple(params)
    control, h = toy_policy(triple, a_hi)
    cost = {"cost": lambda t, x: -0.5 * (control(t, x) * x) ** 2}
    res = euler_batch(params.model, params.x0, params.T, dt, seed, n_paths, control=control, h=h,
                      integrands=cost)
    return mean_se(params.terminal(res.X_T) + res.integrals["cost"][:, -1])


# --- experiments --------------------------------------------------------------

def figure1_experiment(
    params: ToyParams,
    K_list,
    *,
    bsde_K_max: float = 0,
    mc_K_max: float = 0,
    n_paths: int = 10_000,
    seed: int = 0,
    a_hi: float = DEFAULT_A_HI,
    lattice_dt: Optional[float] = None,
) -> ExperimentTable:
    """Convergence of ``V0^K`` to ``V0``; BSDE and MC columns for ``K <= *_K_max`` (else NaN)."""
    from .control import toy_problem_K, build_generator
    from .bsde import solve_discrete_bsde

    cont = solve_ode_triple(params)
    v0 = value_function(cont, params.x0)
    cols = {k: [] for k in ("K", "V0K_ode", "Y0K_bsde", "J0K_mc", "J0K_mc_se", "V0_cont", "abs_err")}
    for K in K_list:
        tr = solve_ode_triple(params, K)
        x_start = params.ctx(K).x_start
        vk = value_function(tr, x_start)
        y0 = np.nan
        if K <= bsde_K_max:
            prob = toy_problem_K(params, K, a_hi)
            sol = solve_discrete_bsde(prob.model, prob.ctx, build_generator(prob), prob.terminal, dt=lattice_dt)
            y0 = sol.Y0
        j0, se = (np.nan, np.nan)
        if K <= mc_K_max:
            j0, se = toy_mc_value_K(params, K, n_paths, seed, a_hi, tr)
        for k, v in zip(cols, (K, vk, y0, j0, se, v0, abs(vk - v0))):
            cols[k].append(v)
    return ExperimentTable("figure1", cols, stochastic=("J0K_mc",), meta={"params": params.__dict__.copy()})


@dataclass
class Figure2Result:
    t_eval: float
    samples: dict
    reference: np.ndarray
    table: ExperimentTable
    X_samples: dict = field(default_factory=dict)
    X_reference: Optional[np.ndarray] = None

    def write(self, out_dir) -> list:
        """Write one ``(path_id, value)`` CSV per sample set; returns the file names."""
        sets = [(f"figure2_alpha_K{K:g}.csv", "alpha_value", s) for K, s in self.samples.items()]
        sets.append(("figure2_alpha_limit.csv", "alpha_value", self.reference))
        sets += [(f"figure2_X_K{K:g}.csv", "X_value", s) for K, s in self.X_samples.items()]
        if self.X_reference is not None:
            sets.append(("figure2_X_limit.csv", "X_value", self.X_reference))
        for name, label, values in sets:
            _write_samples(os.path.join(out_dir, name), values, label)
        return [name for name, _, _ in sets]


def _write_samples(path, values, label: str = "alpha_value") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["path_id", label])
        for i, v in enumerate(values):
            w.writerow([i, f"{v:.17g}"])


def figure2_experiment(
    params: ToyParams,
    K_list,
    t_eval: float,
    n_paths: int,
    *,
    seed: int = 0,
    dt: float = 1e-4,
    a_hi: float = DEFAULT_A_HI,
) -> Figure2Result:
    """Laws of ``alpha^{K,*}_{t_eval}`` under the controlled chain against ``alpha*_{t_eval}``."""
    from .feller import euler_batch
    from .simulate import simulate_batch

    if not 0 < t_eval <= params.T:
        raise DomainError("t_eval must lie in (0, T]")
    cont = solve_ode_triple(params)
    control, h = toy_policy(cont, a_hi)
    steps = int(round(params.T / dt))
    every = int(round(t_eval / dt))
    if every < 1 or steps % every or abs(every * dt - t_eval) > 1e-9:
        raise DomainError("t_eval must be a multiple of dt dividing T")
    ref = euler_batch(params.model, params.x0, params.T, dt, seed, n_paths, control=control, h=h,
                      record_every=every)
    j = int(round(t_eval / (every * dt)))
    x_ref = ref.X[:, j]
    alpha_ref = control(t_eval, x_ref)
    samples, xs = {}, {}
    cols = {"K": [], "ks_stat": [], "ks_X": [], "ks_crit": [], "n": []}
    for K in K_list:
        tr = solve_ode_triple(params, K)
        pol = toy_policy_K(tr, K, a_hi)
        grid = np.unique([0.0, t_eval, params.T])
        res = simulate_batch(params.model, params.ctx(K), seed, n_paths, policy=pol, grid=grid)
        x = res.X[:, int(np.searchsorted(grid, t_eval))]
        s = pol.alpha(t_eval, x)
        samples[K], xs[K] = s, x
        cols["K"].append(K)
        cols["ks_stat"].append(ks_statistic(s, alpha_ref))
        cols["ks_X"].append(ks_statistic(x, x_ref))
        cols["ks_crit"].append(ks_critical(n_paths, n_paths))
        cols["n"].append(n_paths)
    table = ExperimentTable("figure2", cols, meta={"t_eval": t_eval})
    return Figure2Result(t_eval, samples, alpha_ref, table, xs, x_ref)
