"""Central finite-difference checks for hand-written gradients."""

from __future__ import annotations

import numpy as np


def directional_error(f, x, grad, rng, h: float = 1e-5, directions: int = 3) -> float:
    """Worst relative error between ``<grad, d>`` and a central difference of ``f`` along ``d``.

    ``f`` maps an array shaped like ``x`` to a scalar.  Errors are relative
    to ``max(|fd|, |analytic|, 1e-8)``.
    """
    x = np.asarray(x, dtype=np.float64)
    worst = 0.0
    for _ in range(directions):
        d = rng.standard_normal(x.shape)
        d /= np.linalg.norm(d)
        fd = (f(x + h * d) - f(x - h * d)) / (2.0 * h)
        an = float(np.sum(grad * d))
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return worst


def coordinate_error(f, x, grad, indices, h: float = 1e-5) -> float:
    """Worst relative error over single-entry perturbations at ``indices``."""
    x = np.asarray(x, dtype=np.float64)
    worst = 0.0
    for idx in indices:
        plus, minus = x.copy(), x.copy()
        plus[idx] += h
        minus[idx] -= h
        fd = (f(plus) - f(minus)) / (2.0 * h)
        an = float(grad[idx])
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return worst
