"""Monte-Carlo summaries and distances between empirical laws."""
from __future__ import annotations

import numpy as np
from scipy import stats as _st

from .errors import DomainError


def _sample(a) -> np.ndarray:
    a = np.asarray(a, dtype=float).ravel()
    if a.size == 0:
        raise DomainError("sample must be nonempty")
    if not np.all(np.isfinite(a)):
        raise DomainError("sample contains non-finite values")
    return a


def ks_statistic(sample_a, sample_b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic ``sup |F_a - F_b|`` by sorted merge."""
    a, b = np.sort(_sample(sample_a)), np.sort(_sample(sample_b))
    pts = np.concatenate([a, b])
    ca = np.searchsorted(a, pts, side="right").astype(np.int64)
    cb = np.searchsorted(b, pts, side="right").astype(np.int64)
    # integer numerators keep the statistic exact up to the final division
    return float(np.max(np.abs(ca * b.size - cb * a.size)) / (a.size * b.size))


def ks_critical(n: int, m: int, level: float = 0.01) -> float:
    """Asymptotic two-sample KS critical value ``c(level) sqrt((n + m) / (n m))``."""
    c = np.sqrt(-0.5 * np.log(level / 2.0))
    return float(c * np.sqrt((n + m) / (n * m)))


def wasserstein1(sample_a, sample_b) -> float:
    """Exact one-dimensional Wasserstein-1 distance between empirical laws."""
    return float(_st.wasserstein_distance(_sample(sample_a), _sample(sample_b)))


def mean_se(x) -> tuple[float, float]:
    """Sample mean and its standard error."""
    x = _sample(x)
    if x.size < 2:
        return float(x.mean()), float("nan")
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size))


def within(estimate: float, target: float, se: float, k: float = 3.0, slack: float = 0.0) -> bool:
    return abs(estimate - target) <= k * se + slack
