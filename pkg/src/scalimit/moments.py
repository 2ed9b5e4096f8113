"""Exponential moments of linear branching processes.

For a branching process with per-capita birth rate ``nu`` and death rate
``mu`` the moment ``F(n, beta, t) = E_n exp(beta1 int_0^t N ds + beta2 N_t)``
solves the Riccati equation ``f' = nu f^2 - (nu + mu - beta1) f + mu``,
``f(0) = e^{beta2}``, and ``F(n) = f^n``.  The solution is explicit and blows
up at a finite horizon ``t_star``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BlowUpError, DomainError
from .model import PopulationModel, ScalingContext
from .stats import mean_se
from .table import ExperimentTable

LOG_MAX = np.log(np.finfo(float).max)
_UNIT_TOL = 1e-12


@dataclass(frozen=True)
class MomentParams:
    nu: float
    mu: float
    beta1: float
    beta2: float

    def __post_init__(self):
        if not (self.nu > 0 and self.mu >= 0):
            raise DomainError("need nu > 0 and mu >= 0")
        if self.beta1 < 0 or self.beta2 < 0:
            raise DomainError("beta must be nonnegative")

    @property
    def is_trivial(self) -> bool:
        return self.beta1 == 0 and self.beta2 == 0

    @property
    def gamma(self) -> float:
        return (self.nu + self.mu - self.beta1) / (2.0 * self.nu)

    @property
    def phi(self) -> float:
        return self.nu * self.gamma**2 - self.mu

    @property
    def Delta(self) -> float:
        if self.phi <= 0:
            return float("nan")
        if self.is_trivial:
            return float(np.sign(self.nu - self.mu))
        return float(np.sqrt(self.nu / self.phi) * (np.exp(self.beta2) - self.gamma))

    @property
    def rate(self) -> float:
        return float(np.sqrt(self.nu * self.phi))

    @property
    def alpha_log(self) -> float:
        d = self.Delta
        if abs(d - 1.0) <= _UNIT_TOL:
            return float("-inf")
        return float(np.log(abs((d - 1.0) / (d + 1.0))))

    @property
    def admissible(self) -> bool:
        return self.phi > 0 and self.Delta >= 1.0 - _UNIT_TOL

    def check(self) -> None:
        if not self.phi > 0:
            raise DomainError(f"phi = {self.phi:.6g} must be positive")
        if self.Delta < 1.0 - _UNIT_TOL:
            raise DomainError(f"Delta = {self.Delta:.6g} must be >= 1")


def horizon_t_star(params: MomentParams) -> float:
    params.check()
    a = params.alpha_log
    return float("inf") if np.isinf(a) else float(-a / (2.0 * params.rate))


def _log_f1(params: MomentParams, t: float) -> float:
    a = params.alpha_log
    if np.isinf(a):
        f1 = np.sqrt(params.phi / params.nu) + params.gamma
    else:
        # 1 - exp(alpha + 2 r t) = -expm1(...), positive below t_star
        denom = -np.expm1(a + 2.0 * params.rate * t)
        if not denom > 0:
            raise BlowUpError(f"t = {t} is at or beyond the blow-up horizon")
        f1 = np.sqrt(params.phi / params.nu) * (2.0 / denom - 1.0) + params.gamma
    if not np.isfinite(f1):
        raise BlowUpError("moment is not finite")
    return float(np.log(f1))


def closed_form_F(n: int, params: MomentParams, t: float) -> float:
    """``E_n exp(beta1 int_0^t N ds + beta2 N_t)`` for ``0 <= t < t_star``."""
    if n < 0 or t < 0:
        raise DomainError("n and t must be nonnegative")
    if params.is_trivial and params.nu >= params.mu:
        return 1.0
    params.check()
    if t == 0:
        val = n * params.beta2
    else:
        if t >= horizon_t_star(params):
            raise BlowUpError(f"t = {t} >= t_star = {horizon_t_star(params)}")
        val = n * _log_f1(params, t)
    if val > LOG_MAX:
        raise BlowUpError("moment exceeds floating range")
    return float(np.exp(val))


@dataclass(frozen=True)
class LimitMoment:
    psi: float
    t_star: float
    eta: float
    Lambda: float
    alpha_log: float


def limit_moment_psi(a: float, nu: float, mu: float, beta, t: float) -> LimitMoment:
    """Limit exponent ``Psi`` with ``F(nK, beta/K, t) -> exp(n Psi)`` for rates ``nu + aK, mu + aK``."""
    b1, b2 = map(float, beta)
    if not a > 0:
        raise DomainError("a must be positive")
    disc = (nu - mu) ** 2 - 4.0 * a * b1
    if not disc > 0:
        raise DomainError("need (nu - mu)^2 > 4 a beta1")
    eta = np.sqrt(disc) / 2.0
    lam = ((nu - mu) / (2.0 * a) + b2) * 2.0 * a / np.sqrt(disc)
    if lam < 1.0 - _UNIT_TOL:
        raise DomainError(f"Lambda_inf = {lam:.6g} must exceed 1")
    if abs(lam - 1.0) <= _UNIT_TOL:
        alpha, t_star = float("-inf"), float("inf")
        psi = (mu - nu) / (2.0 * a) + eta / a
    else:
        alpha = float(np.log(abs((lam - 1.0) / (lam + 1.0))))
        t_star = -alpha / (2.0 * eta)
        if t >= t_star:
            raise BlowUpError(f"t = {t} >= t_star_inf = {t_star}")
        psi = (mu - nu) / (2.0 * a) + (eta / a) * (2.0 / -np.expm1(alpha + 2.0 * eta * t) - 1.0)
    if b1 == 0 and b2 == 0:
        psi = 0.0
    return LimitMoment(float(psi), float(t_star), float(eta), float(lam), alpha)


def branching_params(model: PopulationModel, K: float, beta) -> MomentParams:
    """Per-capita rates of the linear model's count process and the ``beta/K`` exponents."""
    if not model.is_linear:
        raise DomainError("closed-form moments need a linear model")
    s = model.sigma2 * K / 2.0
    return MomentParams(model.nu + s, model.mu + s, beta[0] / K, beta[1] / K)


def mc_moment(model, ctx: ScalingContext, beta, seed: int, n_paths: int):
    """MC estimate of ``E exp(beta1 int X ds + beta2 X_T)`` and its SE."""
    from .simulate import simulate_batch

    b1, b2 = map(float, beta)
    if b1 == 0 and b2 == 0:
        return 1.0, 0.0
    res = simulate_batch(model, ctx, seed, n_paths, integrands={"intX": lambda t, x: x})
    w = np.exp(b1 * res.integrals["intX"][:, -1] + b2 * res.X_T)
    return mean_se(w)


def uniform_moment_check(model, K_list, beta, T, n_paths, x0: float = 1.0, seed: int = 0,
                         estimates=None) -> ExperimentTable:
    """Per-K MC estimates against the closed form and the ``K -> inf`` limit.

    ``estimates`` may supply precomputed ``(mean, se)`` pairs, one per K.
    ``upward_trend`` flags a K whose estimate exceeds the previous one by
    more than three combined standard errors.
    """
    a = model.sigma2 / 2.0
    lim = limit_moment_psi(a, model.nu, model.mu, beta, T)
    if estimates is None:
        estimates = [mc_moment(model, ScalingContext(K, x0, T), beta, seed, n_paths) for K in K_list]
    cols = {k: [] for k in ("K", "estimate", "estimate_se", "closed_form", "limit", "upward_trend")}
    prev = None
    for K, (est, se) in zip(K_list, estimates):
        ctx = ScalingContext(K, x0, T)
        cf = closed_form_F(ctx.initial_count, branching_params(model, K, beta), T)
        trend = prev is not None and est - prev[0] > 3.0 * np.hypot(se, prev[1])
        for k, v in zip(cols, (K, est, se, cf, float(np.exp(x0 * lim.psi)), bool(trend))):
            cols[k].append(v)
        prev = (est, se)
    return ExperimentTable("moments", cols, stochastic=("estimate",),
                           meta={"beta": list(beta), "T": T, "x0": x0, "n_paths": n_paths})
