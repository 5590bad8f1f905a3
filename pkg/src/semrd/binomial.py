"""Log-domain binomial pmf/cdf tables that stay finite in deep tails.

The blocklength bounds sum binomial masses whose interesting terms sit
hundreds of nats below the mode, so everything here works with log
probabilities built from log-gamma.  Cumulatives are accumulated from the
small tail upward, which keeps lower-tail cdf values accurate in relative
terms (the regime the achievability sums live in).
"""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln

NEG_INF = -np.inf


def log_binom_pmf(j, n: int, p: float) -> np.ndarray:
    """log C(n, j) p^j (1-p)^(n-j), elementwise over j; -inf outside [0, n]."""
    j = np.asarray(j, dtype=float)
    out = np.full(j.shape, NEG_INF)
    valid = (j >= 0) & (j <= n) & (j == np.floor(j))
    if n == 0:
        out[valid & (j == 0)] = 0.0
        return out
    if p <= 0.0:
        out[valid & (j == 0)] = 0.0
        return out
    if p >= 1.0:
        out[valid & (j == n)] = 0.0
        return out
    jv = j[valid]
    out[valid] = (
        gammaln(n + 1.0)
        - gammaln(jv + 1.0)
        - gammaln(n - jv + 1.0)
        + jv * np.log(p)
        + (n - jv) * np.log1p(-p)
    )
    return out


def log_pmf_table(n: int, p: float) -> np.ndarray:
    """Full pmf table, index j in [0, n]."""
    return log_binom_pmf(np.arange(n + 1), n, p)


def log_cdf_table(n: int, p: float) -> np.ndarray:
    """c[m] = log P[X <= m] for m in [0, n], summed from the lower tail."""
    return np.logaddexp.accumulate(log_pmf_table(n, p))


def log_sf_table(n: int, p: float) -> np.ndarray:
    """s[m] = log P[X >= m] for m in [0, n+1], summed from the upper tail."""
    pmf = log_pmf_table(n, p)
    out = np.empty(n + 2)
    out[n + 1] = NEG_INF
    out[:-1] = np.logaddexp.accumulate(pmf[::-1])[::-1]
    return out


def log_cdf_at(table: np.ndarray, m: int) -> float:
    """Saturating lookup into a log_cdf_table: m < 0 gives -inf, m >= n gives 0."""
    if m < 0:
        return NEG_INF
    if m >= len(table) - 1:
        return 0.0
    return float(table[m])


def window_by_mass(log_pmf: np.ndarray, tail_mass: float) -> tuple[int, int, float]:
    """Smallest contiguous index window whose complement carries little mass.

    Trims each tail while its cumulative (linear) mass stays below
    ``tail_mass``.  Returns (lo, hi_inclusive, omitted_mass).  With
    ``tail_mass = 0`` the full range is kept.
    """
    n = len(log_pmf)
    if tail_mass <= 0.0:
        return 0, n - 1, 0.0
    mass = np.exp(log_pmf)
    lo = 0
    acc_lo = 0.0
    while lo < n - 1 and acc_lo + mass[lo] < tail_mass:
        acc_lo += mass[lo]
        lo += 1
    hi = n - 1
    acc_hi = 0.0
    while hi > lo and acc_hi + mass[hi] < tail_mass:
        acc_hi += mass[hi]
        hi -= 1
    return lo, hi, acc_lo + acc_hi


def floor_count(x: float) -> int:
    """floor(x) guarded against float ties from products like k * d.

    A product that is mathematically an integer can land a few ulps below
    it; the guard keeps the intended count.
    """
    return int(np.floor(x + 1e-9))
