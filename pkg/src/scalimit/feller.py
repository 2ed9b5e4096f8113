"""Samplers for the limiting Feller-type diffusion.

``dX = (f(X) - h(X, alpha)) dt + sqrt(sig2(X)) dB`` is discretised by a
fully truncated Euler scheme with permanent absorption at 0.  For the
linear model without control the transition law is known exactly: a
Poisson mixture of Gamma laws.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DomainError, NumericError
from .model import PopulationModel
from .rng import StreamBank, path_generator

EULER_TAG = 11
EXACT_TAG = 13


@dataclass
class ContinuousPath:
    grid: np.ndarray
    X: np.ndarray
    absorbed_at: Optional[float] = None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "X"])
            for t, x in zip(self.grid, self.X):
                w.writerow([f"{t:.17g}", f"{x:.17g}"])


@dataclass
class EulerBatch:
    """Records of a batch on ``record_grid``; arrays are ``(n_paths, n_record)``."""

    record_grid: np.ndarray
    X: np.ndarray
    integrals: dict = field(default_factory=dict)
    absorbed_at: Optional[np.ndarray] = None

    @property
    def X_T(self) -> np.ndarray:
        return self.X[:, -1]


def _n_steps(T: float, dt: float) -> int:
    if not dt > 0 or not T > 0:
        raise DomainError("T and dt must be positive")
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * T:
        raise DomainError(f"T={T} is not an integer multiple of dt={dt}")
    return n


def euler_batch(
    model: PopulationModel,
    x0: float,
    T: float,
    dt: float,
    seed: int,
    n_paths: Optional[int] = None,
    *,
    indices=None,
    control: Optional[Callable] = None,
    h: Optional[Callable] = None,
    integrands: Optional[dict] = None,
    record_every: Optional[int] = None,
) -> EulerBatch:
    """Vectorised truncated Euler scheme over independent per-path normal streams.

    ``control(t, x)`` and ``h(x, alpha)`` define the drift reduction; the
    integrands ``F(t, x)`` are accumulated with the left-point rule.
    ``record_every`` steps are stored (default: only 0 and T).
    """
    if x0 < 0:
        raise DomainError("x0 must be nonnegative")
    n = _n_steps(T, dt)
    idx = np.arange(n_paths) if indices is None else np.asarray(indices, dtype=np.int64)
    rows = np.arange(idx.size)
    every = n if record_every is None else int(record_every)
    if every < 1 or n % every:
        raise DomainError("record_every must divide the number of steps")
    bank = StreamBank(seed, idx, tag=EULER_TAG, kind="normal", block=min(n, 4096))
    x = np.full(idx.size, float(x0))
    absorbed = np.full(idx.size, np.nan)
    absorbed[x == 0] = 0.0
    integrands = dict(integrands or {})
    acc = {k: np.zeros(idx.size) for k in integrands}
    rec_X = [x.copy()]
    rec_acc = {k: [v.copy()] for k, v in acc.items()}
    sq = np.sqrt(dt)
    for k in range(n):
        t = k * dt
        drift = model.fb(x) - model.fd(x)
        if control is not None:
            drift = drift - h(x, control(t, x))
        for name, fn in integrands.items():
            acc[name] += fn(t, x) * dt
        xi = bank.draw(rows)
        new = x + drift * dt + np.sqrt(model.sig2(x)) * sq * xi
        new = np.where(x > 0, np.maximum(new, 0.0), 0.0)
        if not np.all(np.isfinite(new)):
            raise NumericError(f"non-finite Euler state at step {k + 1}")
        hit = (new == 0) & np.isnan(absorbed)
        absorbed[hit] = (k + 1) * dt
        x = new
        if (k + 1) % every == 0:
            rec_X.append(x.copy())
            for name in integrands:
                rec_acc[name].append(acc[name].copy())
    grid = np.arange(0, n + 1, every) * dt
    return EulerBatch(
        record_grid=grid,
        X=np.stack(rec_X, axis=1),
        integrals={k: np.stack(v, axis=1) for k, v in rec_acc.items()},
        absorbed_at=absorbed,
    )


def _single(batch: EulerBatch, index: int = 0) -> ContinuousPath:
    a = batch.absorbed_at[index]
    return ContinuousPath(batch.record_grid, batch.X[index], None if np.isnan(a) else float(a))


def euler_path(model, x0, T, dt, seed, index: int = 0) -> ContinuousPath:
    return _single(euler_batch(model, x0, T, dt, seed, indices=[index], record_every=1))


def controlled_euler_path(model, x0, T, dt, policy: Callable, h: Callable, seed, index: int = 0) -> ContinuousPath:
    """Euler path with drift ``f(x) - h(x, policy(t, x))``; same noise as :func:`euler_path`."""
    batch = euler_batch(model, x0, T, dt, seed, indices=[index], control=policy, h=h, record_every=1)
    return _single(batch)


def exact_feller_sample(b: float, sigma2: float, x0: float, t: float, seed: int, size=None):
    """Exact draw(s) of ``X_t`` for ``dX = b X dt + sqrt(sigma2 X) dW``, ``X_0 = x0``.

    With ``c = sigma2 (e^{bt} - 1) / (2b)`` the law is ``Gamma(N, c)`` with
    ``N ~ Poisson(x0 e^{bt} / c)`` and an atom at 0 when ``N = 0``.
    """
    if not sigma2 > 0:
        raise DomainError("sigma2 must be positive")
    if x0 < 0 or not t > 0:
        raise DomainError("x0 must be nonnegative and t positive")
    rng = path_generator(seed, 0, tag=EXACT_TAG)
    c = sigma2 * t / 2.0 if b == 0 else sigma2 * np.expm1(b * t) / (2.0 * b)
    lam = x0 * np.exp(b * t) / c
    n = rng.poisson(lam, size=size)
    shape = np.where(n > 0, n, 1)
    x = np.where(n > 0, rng.gamma(shape, c), 0.0)
    return float(x) if size is None else x
