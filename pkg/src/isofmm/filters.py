"""Daubechies extremal-phase filters by spectral factorization.

The low-pass filter with ``N`` vanishing moments is

    H(z) = sqrt(2) * ((1 + z^-1) / 2)^N * Q(z^-1),    |Q|^2 = P(sin^2(w/2))

with ``P(y) = sum_k C(N-1+k, k) y^k``. Roots are found in 60-digit
arithmetic and those inside the unit circle are kept (minimum phase), which
reproduces the tabulated ``dbN`` filters.
"""

from __future__ import annotations

from functools import lru_cache

import mpmath
import numpy as np

MAX_MOMENTS = 10


@lru_cache(maxsize=None)
def _lowpass(n_moments: int) -> tuple[float, ...]:
    with mpmath.workdps(60):
        poly = [mpmath.mpf(1)]
        for _ in range(n_moments):
            poly = _convolve(poly, [mpmath.mpf(1), mpmath.mpf(1)])
        if n_moments > 1:
            # polyroots wants highest degree first
            p_coefs = [mpmath.binomial(n_moments - 1 + k, k) for k in range(n_moments)]
            y_roots = mpmath.polyroots(p_coefs[::-1], maxsteps=500, extraprec=200)
            for y in y_roots:
                b = 2 - 4 * y
                disc = mpmath.sqrt(b * b - 4)
                z1, z2 = (b + disc) / 2, (b - disc) / 2
                z = z1 if abs(z1) < 1 else z2
                poly = _convolve(poly, [mpmath.mpf(1), -z])
        re = [mpmath.re(c) for c in poly]
        scale = mpmath.sqrt(2) / mpmath.fsum(re)
        return tuple(float(c * scale) for c in re)


def _convolve(a, b):
    out = [mpmath.mpf(0)] * (len(a) + len(b) - 1)
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            out[i + j] += x * y
    return out


def daubechies(n_moments: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(lowpass, highpass)`` analysis filters of length ``2 * n_moments``.

    The high-pass filter is the alternating flip ``g[m] = (-1)^m h[L-1-m]``.
    """
    if not 1 <= n_moments <= MAX_MOMENTS:
        raise ValueError(f"vanishing moments must be in 1..{MAX_MOMENTS}, got {n_moments}")
    h = np.array(_lowpass(int(n_moments)))
    g = h[::-1] * (-1.0) ** np.arange(h.size)
    _check_orthonormal(h, g)
    return h, g


def _check_orthonormal(h: np.ndarray, g: np.ndarray, tol: float = 1e-12) -> None:
    L = h.size
    for shift in range(0, L, 2):
        target = 1.0 if shift == 0 else 0.0
        hh = np.dot(h[shift:], h[: L - shift])
        gg = np.dot(g[shift:], g[: L - shift])
        if abs(hh - target) > tol or abs(gg - target) > tol:
            raise ArithmeticError(f"filter of length {L} fails orthonormality at shift {shift}")
    for shift in range(-L + 2, L, 2):
        lo, hi = max(0, shift), min(L, L + shift)
        hg = np.dot(h[lo:hi], g[lo - shift : hi - shift])
        if abs(hg) > tol:
            raise ArithmeticError(f"low/high filters of length {L} are not orthogonal")
