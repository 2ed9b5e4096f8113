"""Population models and the K-scaled birth/death intensities.

A model is described by three rate maps on the scaled state ``x >= 0``:
the birth rate ``fb``, the death rate ``fd`` and the fluctuation rate
``sig2``.  The chain with scaling ``K`` jumps by ``+-1/K`` with intensities

    birth: fb(x) K + sig2(x) K^2 / 2
    death: fd(x) K + sig2(x) K^2 / 2

so the drift ``fb - fd`` survives the scaling while the common
``K^2`` term produces the diffusive limit.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DomainError

RateMap = Callable[[np.ndarray], np.ndarray]

_PROBE = np.concatenate([[0.0], np.logspace(-6, 4, 201)])


def _positive_part(fn: RateMap) -> RateMap:
    def wrapped(x):
        x = np.asarray(x, dtype=float)
        return np.where(x > 0, fn(np.maximum(x, 0.0)), 0.0)

    return wrapped


@dataclass(frozen=True)
class PopulationModel:
    """Birth/death model; build with :meth:`linear` or :meth:`custom`.

    ``nu`` and ``mu`` are the linear bounds ``fb(x) <= nu x``,
    ``fd(x) <= mu x``; ``eta_lo x <= sig2(x) <= eta_hi (1 + x)``.  In the
    linear case they are the model itself.
    """

    kind: str
    nu: float
    mu: float
    sigma2: float
    eta_lo: float
    eta_hi: float
    fb: RateMap = field(repr=False, compare=False)
    fd: RateMap = field(repr=False, compare=False)
    sig2: RateMap = field(repr=False, compare=False)

    @classmethod
    def linear(cls, nu: float, mu: float, sigma2: float) -> "PopulationModel":
        for name, v in (("nu", nu), ("mu", mu), ("sigma2", sigma2)):
            if not np.isfinite(v) or v < 0:
                raise DomainError(f"{name} must be finite and >= 0, got {v}")
        nu, mu, sigma2 = float(nu), float(mu), float(sigma2)
        return cls(
            kind="linear",
            nu=nu,
            mu=mu,
            sigma2=sigma2,
            eta_lo=sigma2,
            eta_hi=sigma2,
            fb=lambda x: nu * np.maximum(np.asarray(x, dtype=float), 0.0),
            fd=lambda x: mu * np.maximum(np.asarray(x, dtype=float), 0.0),
            sig2=lambda x: sigma2 * np.maximum(np.asarray(x, dtype=float), 0.0),
        )

    @classmethod
    def custom(
        cls,
        fb: RateMap,
        fd: RateMap,
        sig2: RateMap,
        nu: float,
        mu: float,
        eta_lo: float = 0.0,
        eta_hi: float = np.inf,
    ) -> "PopulationModel":
        """Wrap user rate maps; they are forced to vanish for ``x <= 0``.

        Raises DomainError if any map is negative or non-finite on a probe grid.
        """
        maps = {"fb": _positive_part(fb), "fd": _positive_part(fd), "sig2": _positive_part(sig2)}
        for name, fn in maps.items():
            vals = np.asarray(fn(_PROBE), dtype=float)
            if not np.all(np.isfinite(vals)):
                raise DomainError(f"custom map {name} returned a non-finite value")
            if np.any(vals < 0):
                raise DomainError(f"custom map {name} returned a negative rate")
        return cls(
            kind="custom",
            nu=float(nu),
            mu=float(mu),
            sigma2=float("nan"),
            eta_lo=float(eta_lo),
            eta_hi=float(eta_hi),
            **maps,
        )

    @property
    def is_linear(self) -> bool:
        return self.kind == "linear"

    def to_dict(self) -> dict:
        if not self.is_linear:
            raise DomainError("only linear models serialise to a config block")
        return {"kind": "linear", "nu": self.nu, "mu": self.mu, "sigma2": self.sigma2}

    @classmethod
    def from_dict(cls, block: dict) -> "PopulationModel":
        if block.get("kind", "linear") != "linear":
            raise DomainError("config model blocks must have kind 'linear'")
        return cls.linear(block["nu"], block["mu"], block["sigma2"])


@dataclass(frozen=True)
class ScalingContext:
    K: float
    x0: float
    horizon_T: float

    def __post_init__(self):
        if not self.K > 0:
            raise DomainError(f"K must be positive, got {self.K}")
        if not self.x0 >= 0:
            raise DomainError(f"x0 must be nonnegative, got {self.x0}")
        if not self.horizon_T > 0:
            raise DomainError(f"horizon_T must be positive, got {self.horizon_T}")

    @property
    def initial_count(self) -> int:
        return int(round(self.K * self.x0))

    @property
    def x_start(self) -> float:
        """Scaled initial state actually used, ``round(K x0) / K``."""
        return self.initial_count / self.K


def _check_domain(K, x):
    if np.ndim(K) == 0 and not K > 0:
        raise DomainError(f"K must be positive, got {K}")
    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or np.any(np.isnan(x)):
        raise DomainError("state x must be nonnegative")
    return x


def birth_intensity(model: PopulationModel, K: float, x):
    x = _check_domain(K, x)
    out = model.fb(x) * K + model.sig2(x) * K * K / 2.0
    return out if out.ndim else float(out)


def death_intensity(model: PopulationModel, K: float, x):
    x = _check_domain(K, x)
    out = model.fd(x) * K + model.sig2(x) * K * K / 2.0
    return out if out.ndim else float(out)


def net_drift(model: PopulationModel, x):
    x = _check_domain(1.0, x)
    out = model.fb(x) - model.fd(x)
    return out if out.ndim else float(out)


def intensities(model: PopulationModel, K: float, x: np.ndarray):
    """Unchecked vectorised ``(birth, death)`` intensities for hot loops."""
    s = model.sig2(x) * (K * K / 2.0)
    return model.fb(x) * K + s, model.fd(x) * K + s


@dataclass
class Violation:
    check: str
    x: float
    detail: str


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)
    lipschitz_f: float = 0.0
    lipschitz_sigma2: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_model(
    model: PopulationModel,
    x_grid,
    lipschitz_f: Optional[float] = None,
    lipschitz_sigma2: Optional[float] = None,
    rtol: float = 1e-12,
) -> ValidationReport:
    """Sampled check of the linear growth bounds and Lipschitz estimates.

    Violations are collected, never raised.  Finite-difference Lipschitz
    estimates are always reported; they become violations only when a
    certificate constant is supplied.
    """
    x = np.unique(np.asarray(x_grid, dtype=float))
    if x.size == 0:
        raise DomainError("x_grid must be nonempty")
    if np.any(x < 0):
        raise DomainError("x_grid must be nonnegative")
    report = ValidationReport()
    fb, fd, s2 = model.fb(x), model.fd(x), model.sig2(x)

    def slack(bound):
        return rtol * np.maximum(1.0, np.abs(bound))

    checks = [
        ("birth_linear_bound", fb > model.nu * x + slack(model.nu * x), fb, "fb(x) > nu x"),
        ("death_linear_bound", fd > model.mu * x + slack(model.mu * x), fd, "fd(x) > mu x"),
        ("sigma2_lower_bound", s2 < model.eta_lo * x - slack(model.eta_lo * x), s2, "sig2(x) < eta_lo x"),
        (
            "sigma2_upper_bound",
            s2 > model.eta_hi * (1 + x) + slack(model.eta_hi * (1 + x)),
            s2,
            "sig2(x) > eta_hi (1 + x)",
        ),
    ]
    for name, bad, vals, text in checks:
        for xi, vi in zip(x[bad], vals[bad]):
            report.violations.append(Violation(name, float(xi), f"{text}: value {vi:.6g}"))

    if x.size > 1:
        dx = np.diff(x)
        slope_f = np.abs(np.diff(fb - fd)) / dx
        slope_s = np.abs(np.diff(s2)) / dx
        report.lipschitz_f = float(slope_f.max())
        report.lipschitz_sigma2 = float(slope_s.max())
        for name, cert, slopes in (
            ("lipschitz_f", lipschitz_f, slope_f),
            ("lipschitz_sigma2", lipschitz_sigma2, slope_s),
        ):
            if cert is None:
                continue
            for i in np.flatnonzero(slopes > cert * (1 + rtol)):
                report.violations.append(
                    Violation(name, float(x[i]), f"slope {slopes[i]:.6g} exceeds {cert}")
                )
    return report
