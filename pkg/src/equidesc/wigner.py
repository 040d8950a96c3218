"""Wigner small-d matrices by three-term recursion in the degree.

d^l_{mn}(beta) = <l m| exp(-i beta J_y) |l n>, so that
D^l_{mn}(alpha, beta, gamma) = exp(-i m alpha) d^l_{mn}(beta) exp(-i n gamma)
is a representation of R = Rz(alpha) Ry(beta) Rz(gamma). Matrices are indexed
[m + l, n + l].
"""

from __future__ import annotations

from functools import lru_cache
from typing import List

import numpy as np
from scipy.special import gammaln

from .core import make_dh_grid
from .errors import InvalidInputError


def _log_factorial(x: int) -> float:
    return float(gammaln(x + 1))


def _seed(l: int, m: int, n: int, cos_half: np.ndarray, sin_half: np.ndarray) -> np.ndarray:
    """d^l_{mn} from the explicit Wigner sum, used at l = max(|m|, |n|)."""
    s_min = max(0, n - m)
    s_max = min(l + n, l - m)
    log_norm = 0.5 * (
        _log_factorial(l + m)
        + _log_factorial(l - m)
        + _log_factorial(l + n)
        + _log_factorial(l - n)
    )
    total = np.zeros_like(cos_half)
    for s in range(s_min, s_max + 1):
        log_coef = log_norm - (
            _log_factorial(l + n - s)
            + _log_factorial(s)
            + _log_factorial(m - n + s)
            + _log_factorial(l - m - s)
        )
        sign = -1.0 if (m - n + s) % 2 else 1.0
        total = total + sign * np.exp(log_coef) * (
            cos_half ** (2 * l + n - m - 2 * s) * sin_half ** (m - n + 2 * s)
        )
    return total


def wigner_d_table(bandwidth: int, betas) -> List[np.ndarray]:
    """All d^l(beta) for l < bandwidth; entry l has shape (len(betas), 2l+1, 2l+1)."""
    if bandwidth < 1:
        raise InvalidInputError(f"Bandwidth must be positive, got {bandwidth}")
    betas = np.atleast_1d(np.asarray(betas, dtype=np.float64))
    size = 2 * bandwidth - 1
    orders = np.arange(-(bandwidth - 1), bandwidth)
    m_idx, n_idx = np.meshgrid(orders, orders, indexing="ij")
    start = np.maximum(np.abs(m_idx), np.abs(n_idx))
    mn = (m_idx * n_idx).astype(np.float64)
    m2 = (m_idx ** 2).astype(np.float64)
    n2 = (n_idx ** 2).astype(np.float64)

    cos_half = np.cos(betas / 2.0)
    sin_half = np.sin(betas / 2.0)
    x = np.cos(betas)[:, None, None]

    seeds = np.zeros((len(betas), size, size))
    for i, m in enumerate(orders):
        for j, n in enumerate(orders):
            seeds[:, i, j] = _seed(int(start[i, j]), int(m), int(n), cos_half, sin_half)

    center = bandwidth - 1
    prev = np.zeros_like(seeds)
    cur = np.zeros_like(seeds)
    table: List[np.ndarray] = []
    for l in range(bandwidth):
        if l == 0:
            new = np.where(start == 0, seeds, 0.0)
        else:
            lp = l - 1
            valid = start < l
            numer = (2 * lp + 1) * (lp * (lp + 1) * x - mn) * cur - (lp + 1) * np.sqrt(
                np.clip(lp * lp - m2, 0.0, None) * np.clip(lp * lp - n2, 0.0, None)
            ) * prev
            denom = lp * np.sqrt(np.clip(l * l - m2, 0.0, None) * np.clip(l * l - n2, 0.0, None))
            safe = np.where(valid & (denom > 0), denom, 1.0)
            new = np.where(valid, numer / safe, 0.0)
            new = np.where(start == l, seeds, new)
            if l == 1:
                # the l-recursion divides by l - 1; seed d^1_00 = cos(beta) directly
                new[:, center, center] = x[:, 0, 0]
        prev, cur = cur, new
        table.append(cur[:, center - l : center + l + 1, center - l : center + l + 1].copy())
    return table


def wigner_d(l: int, beta: float) -> np.ndarray:
    """Real Wigner-d matrix of degree l at inclination beta, shape (2l+1, 2l+1)."""
    if l < 0:
        raise InvalidInputError(f"Degree must be non-negative, got {l}")
    return wigner_d_table(l + 1, [beta])[l][0]


@lru_cache(maxsize=None)
def grid_wigner_table(bandwidth: int) -> tuple:
    """Wigner-d tables at the Driscoll-Healy betas of the given bandwidth."""
    tables = wigner_d_table(bandwidth, make_dh_grid(bandwidth).betas)
    for table in tables:
        table.flags.writeable = False
    return tuple(tables)
