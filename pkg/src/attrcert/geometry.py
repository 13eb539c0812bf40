"""Ball geometry: symmetric-difference volume ratio and uniform ball sampling.

Random streams use numpy's Philox4x64 counter-based generator. A stream is
addressed by ``(seed, *path)`` through ``SeedSequence`` spawn keys, so chunk
``k`` of a computation always sees the same numbers no matter which worker
runs it or in what order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .specfun import reg_inc_beta_complement

__all__ = [
    "BallSpec",
    "VolumeRatio",
    "CertificateInfeasible",
    "volume_ratio_vU",
    "substream",
    "sample_uniform_ball",
    "sample_uniform_ball_batch",
]


class CertificateInfeasible(ValueError):
    """The perturbation budget exceeds the ball diameter (epsilon > 2r)."""


@dataclass(frozen=True)
class BallSpec:
    d: int
    r: float

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"dimension must be a positive integer, got {self.d!r}")
        if not (math.isfinite(self.r) and self.r > 0.0):
            raise ValueError(f"radius must be positive, got {self.r!r}")


@dataclass(frozen=True)
class VolumeRatio:
    vU_over_vS: float
    cap_height: float


def volume_ratio_vU(ball: BallSpec, epsilon: float) -> VolumeRatio:
    """V_U / V_S for two radius-r balls whose centres are epsilon apart.

    V_U = 2 V_S (1 - I_z((d+1)/2, 1/2)) with z = (2rh - h^2)/r^2 and cap height
    h = r - epsilon/2. Since 1 - z = epsilon^2 / (4 r^2) exactly, the complement
    is evaluated from that small quantity directly.
    """
    if not (epsilon >= 0.0 and math.isfinite(epsilon)):
        raise ValueError(f"epsilon must be a nonnegative finite number, got {epsilon!r}")
    r = ball.r
    if epsilon > 2.0 * r:
        raise CertificateInfeasible(
            f"epsilon={epsilon!r} exceeds the smoothing ball diameter 2r={2.0 * r!r}; "
            "the radius must be at least epsilon/2"
        )
    cap_height = r - 0.5 * epsilon
    w = min(1.0, (epsilon / (2.0 * r)) ** 2)
    ratio = 2.0 * reg_inc_beta_complement(w, 0.5 * (ball.d + 1), 0.5)
    return VolumeRatio(vU_over_vS=min(2.0, max(0.0, ratio)), cap_height=cap_height)


def substream(seed: int, *path: int) -> np.random.Generator:
    """Independent Philox generator for the stream addressed by ``path``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def sample_uniform_ball_batch(ball: BallSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """(n, d) points uniform on the closed ball of radius r around 0."""
    d = ball.d
    g = rng.standard_normal((n, d))
    norms = np.linalg.norm(g, axis=1)
    bad = norms == 0.0
    while bad.any():
        g[bad] = rng.standard_normal((int(bad.sum()), d))
        norms[bad] = np.linalg.norm(g[bad], axis=1)
        bad = norms == 0.0
    u = rng.random(n)
    radii = ball.r * u ** (1.0 / d)
    return g * (radii / norms)[:, None]


def sample_uniform_ball(ball: BallSpec, rng: np.random.Generator) -> np.ndarray:
    return sample_uniform_ball_batch(ball, 1, rng)[0]
