"""Reference targets with known geometry for exercising the sampler.

Targets are module-level classes so they pickle into worker processes.
"""

from __future__ import annotations

import math

import numpy as np

from hiermig.sampler import TargetDensity

FUNNEL_SCALE = 3.0


class StandardNormal(TargetDensity):
    def __init__(self, dim: int):
        super().__init__(dim)

    def log_density_and_gradient(self, q):
        return -0.5 * float(q @ q), -q


class CorrelatedNormal(TargetDensity):
    def __init__(self, cov):
        self.cov = np.asarray(cov, float)
        self.prec = np.linalg.inv(self.cov)
        super().__init__(self.cov.shape[0])

    def log_density_and_gradient(self, q):
        g = -self.prec @ q
        return 0.5 * float(q @ g), g


class Funnel(TargetDensity):
    """Neal's funnel: v ~ N(0, 3^2), x_k | v ~ N(0, exp(v)) for k < dim.

    ``centered=False`` samples standard normals ``z`` with ``x = exp(v / 2) z``.
    Coordinate 0 is ``v`` either way.
    """

    def __init__(self, dim: int = 10, centered: bool = True):
        self.centered = centered
        super().__init__(dim, names=["v"] + [f"x[{k}]" for k in range(dim - 1)])

    def log_density_and_gradient(self, q):
        s2 = FUNNEL_SCALE**2
        v, x = q[0], q[1:]
        g = np.empty_like(q)
        if not self.centered:
            g[0] = -v / s2
            g[1:] = -x
            return -0.5 * v * v / s2 - 0.5 * float(x @ x), g
        m = self.dim - 1
        ev = math.exp(-v) if v > -700 else math.inf
        xx = float(x @ x)
        with np.errstate(invalid="ignore", over="ignore"):
            lp = -0.5 * v * v / s2 - 0.5 * m * v - 0.5 * ev * xx
            g[0] = -v / s2 - 0.5 * m + 0.5 * ev * xx
            g[1:] = -ev * x
        return lp, g


def standard_normal(dim: int) -> StandardNormal:
    return StandardNormal(dim)


def correlated_normal(cov) -> CorrelatedNormal:
    return CorrelatedNormal(cov)


def funnel(dim: int = 10, centered: bool = True) -> Funnel:
    return Funnel(dim, centered)


def funnel_to_centered(draws: np.ndarray) -> np.ndarray:
    """Map non-centred funnel draws ``(..., dim)`` to ``(v, x)``."""
    out = np.array(draws, float, copy=True)
    out[..., 1:] *= np.exp(out[..., :1] / 2.0)
    return out
