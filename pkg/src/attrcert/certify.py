"""Cosine-similarity certificates for uniformly smoothed attributions.

Three equivalent views of one inequality. With rho = V_U / V_S and
n = ||h(x)||_2:

    T = n / sqrt(n^2 + (M rho)^2)                (bound at fixed r, epsilon)
    epsilon = 2 r sqrt(1 - I^-1_Z((d+1)/2, 1/2))  (largest budget for T)
    R = (epsilon/2) (1 - I^-1_Z((d+1)/2, 1/2))^(-1/2)  (smallest radius for T)

with Z = 1 - (n / 2M) sqrt(1/T^2 - 1), i.e. the value I_z must take so that
rho = 2 (1 - Z) reproduces T exactly. Infeasible inputs produce a
certificate with ``feasible=False`` instead of raising.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attribution import SmoothedAttribution
from .metrics import DegenerateAttributionError
from .geometry import BallSpec, CertificateInfeasible, substream, volume_ratio_vU
from .specfun import ConvergenceError, DomainError, reg_inc_beta_inv

__all__ = [
    "Certificate",
    "ProbabilisticBound",
    "DegenerateAttributionError",
    "bound_T",
    "max_epsilon",
    "min_radius",
    "probabilistic_interval",
]


@dataclass(frozen=True)
class Certificate:
    kind: str  # "bound_T" | "max_epsilon" | "min_radius"
    d: int
    r: float | None
    epsilon: float | None
    norm_h: float
    M: float
    threshold_T: float | None
    value: float | None
    vU_over_vS: float | None
    feasible: bool
    m_strategy: str = "user"
    Z: float | None = None
    reason: str = ""


@dataclass(frozen=True)
class ProbabilisticBound:
    alpha: float
    t1: float
    t2: float
    mc_samples: int
    point_T: float
    c: float


def _check_common(d: int, norm_h: float, M: float) -> None:
    if int(d) != d or d < 1:
        raise ValueError(f"d must be a positive integer, got {d!r}")
    if norm_h == 0.0:
        raise DegenerateAttributionError("||h(x)||_2 is zero; cosine similarity is undefined")
    if not (norm_h > 0.0 and math.isfinite(norm_h)):
        raise ValueError(f"norm_h must be positive and finite, got {norm_h!r}")
    if not (M > 0.0 and math.isfinite(M)):
        raise ValueError(f"M must be positive and finite, got {M!r}")


def _t_from_ratio(norm_h: float, M: float, ratio: float) -> float:
    return norm_h / math.hypot(norm_h, M * ratio)


def bound_T(d: int, r: float, epsilon: float, norm_h: float, M: float,
            m_strategy: str = "user") -> Certificate:
    """Lower bound on cos(h(x), h(x + delta)) over ||delta||_2 <= epsilon."""
    _check_common(d, norm_h, M)
    if not r > 0.0:
        raise ValueError(f"r must be positive, got {r!r}")
    if not epsilon >= 0.0:
        raise ValueError(f"epsilon must be nonnegative, got {epsilon!r}")
    try:
        vr = volume_ratio_vU(BallSpec(d, r), epsilon)
    except CertificateInfeasible as exc:
        return Certificate("bound_T", d, r, epsilon, norm_h, M, None, None, None, False,
                           m_strategy, reason=str(exc))
    return Certificate("bound_T", d, r, epsilon, norm_h, M, None,
                       _t_from_ratio(norm_h, M, vr.vU_over_vS), vr.vU_over_vS, True, m_strategy)


def _one_minus_z(norm_h: float, M: float, threshold_T: float) -> float:
    if not (0.0 < threshold_T <= 1.0):
        raise DomainError(f"threshold T must lie in (0, 1], got {threshold_T!r}")
    # sqrt(1/T^2 - 1) without cancellation near T = 1
    s = math.sqrt((1.0 - threshold_T) * (1.0 + threshold_T)) / threshold_T
    return norm_h / (2.0 * M) * s


# q = 1 - Z within this of 1 is rounding of Z = 0 (V_U/V_S saturated at 2)
_Q_ROUNDING = 1e-12


def _half_gap(d: int, q: float) -> float:
    # 1 - I^-1_Z((d+1)/2, 1/2) = y with I_y(1/2, (d+1)/2) = 1 - Z = q
    return reg_inc_beta_inv(q, 0.5, 0.5 * (d + 1))


def max_epsilon(d: int, r: float, norm_h: float, M: float, threshold_T: float,
                m_strategy: str = "user") -> Certificate:
    """Largest epsilon for which bound_T(d, r, epsilon, ...) >= threshold_T."""
    _check_common(d, norm_h, M)
    if not r > 0.0:
        raise ValueError(f"r must be positive, got {r!r}")
    q = _one_minus_z(norm_h, M, threshold_T)
    if 1.0 < q <= 1.0 + _Q_ROUNDING:
        q = 1.0
    Z = 1.0 - q
    if q > 1.0:
        return Certificate("max_epsilon", d, r, None, norm_h, M, threshold_T, None, None, False,
                           m_strategy, Z,
                           "Z < 0: the threshold holds for every epsilon up to 2r, no finite maximum below the ball diameter")
    y = _half_gap(d, q)
    eps = min(2.0 * r, 2.0 * r * math.sqrt(y))
    return Certificate("max_epsilon", d, r, eps, norm_h, M, threshold_T, eps, 2.0 * q, True,
                       m_strategy, Z)


def min_radius(d: int, epsilon: float, norm_h: float, M: float, threshold_T: float,
               m_strategy: str = "user") -> Certificate:
    """Smallest smoothing radius R with bound_T(d, R, epsilon, ...) >= threshold_T."""
    _check_common(d, norm_h, M)
    if not epsilon > 0.0:
        raise ValueError(f"epsilon must be positive, got {epsilon!r}")
    q = _one_minus_z(norm_h, M, threshold_T)
    if 1.0 < q <= 1.0 + _Q_ROUNDING:
        q = 1.0
    Z = 1.0 - q
    if q > 1.0:
        return Certificate("min_radius", d, None, epsilon, norm_h, M, threshold_T, None, None, False,
                           m_strategy, Z,
                           "Z < 0: every radius r >= epsilon/2 already meets the threshold")
    y = _half_gap(d, q)
    if y == 0.0:
        return Certificate("min_radius", d, None, epsilon, norm_h, M, threshold_T, None, None, False,
                           m_strategy, Z, "Z = 1: an infinite smoothing radius would be required")
    R = 0.5 * epsilon / math.sqrt(y)
    R = max(R, 0.5 * epsilon)
    check = bound_T(d, R, epsilon, norm_h, M)
    if not (check.feasible and check.value >= threshold_T - 1e-9):
        raise ConvergenceError(
            f"min_radius self-check failed: R={R!r} gives T={check.value!r} < {threshold_T!r}"
        )
    return Certificate("min_radius", d, R, epsilon, norm_h, M, threshold_T, R, 2.0 * q, True,
                       m_strategy, Z)


def probabilistic_interval(sa: SmoothedAttribution, d: int, r: float, epsilon: float, M: float,
                           alpha: float = 0.01, mc_samples: int = 1_000_000, seed: int = 0,
                           chunk: int = 100_000) -> ProbabilisticBound:
    """Interval [t1, t2] holding the Monte Carlo T with probability 1 - alpha.

    The estimate is modelled as N(estimate, diag(per_coord_variance)). The
    alpha/2 and 1 - alpha/2 quantiles of Q^2 = ||h||^2 (a generalized
    chi-square variable) are estimated from ``mc_samples`` draws and mapped
    through t = sqrt(q / (c + q)), c = (M V_U / V_S)^2.
    """
    if sa.sample_count < 2 or sa.per_coord_variance is None:
        raise ValueError("probabilistic interval needs a smoothed attribution with >= 2 samples")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha!r}")
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    vr = volume_ratio_vU(BallSpec(d, r), epsilon)
    c = (M * vr.vU_over_vS) ** 2
    if not c > 0.0:
        raise ValueError("c = (M V_U/V_S)^2 must be positive (epsilon > 0 required)")
    mean = np.asarray(sa.estimate, dtype=np.float64)
    sd = np.sqrt(np.asarray(sa.per_coord_variance, dtype=np.float64))
    q0 = float(mean @ mean)
    point_T = math.sqrt(q0 / (c + q0))
    if not sd.any():
        return ProbabilisticBound(alpha, point_T, point_T, mc_samples, point_T, c)
    q2 = np.empty(mc_samples)
    for k, start in enumerate(range(0, mc_samples, chunk)):
        size = min(chunk, mc_samples - start)
        draw = mean + sd * substream(seed, k).standard_normal((size, mean.shape[0]))
        q2[start:start + size] = np.einsum("ij,ij->i", draw, draw)
    lo, hi = np.quantile(q2, [alpha / 2.0, 1.0 - alpha / 2.0])
    t1 = math.sqrt(lo / (c + lo))
    t2 = math.sqrt(hi / (c + hi))
    return ProbabilisticBound(alpha, t1, t2, mc_samples, point_T, c)
