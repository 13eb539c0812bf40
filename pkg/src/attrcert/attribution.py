"""Saliency / integrated-gradient attributions and their smoothed versions.

Smoothing is Monte Carlo over fixed-size noise chunks. Chunk ``k`` draws
from ``substream(seed, k)`` and chunk statistics are merged in index order,
so estimates are bit-reproducible and independent of how chunks are
scheduled.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import BallSpec, sample_uniform_ball_batch, substream
from .model import ModelWeights, input_gradients, lipschitz_logit_bound, predict

__all__ = [
    "AttributionConfig",
    "SmoothingConfig",
    "SmoothedAttribution",
    "RunningMoments",
    "UpperBound",
    "resolve_target",
    "attribute",
    "attribute_batch",
    "uniform_noise",
    "gaussian_noise",
    "smoothed_mean_batch",
    "smooth_uniform",
    "smooth_gaussian",
    "attribution_upper_bound",
    "parse_m_strategy",
]

DEFAULT_CHUNK = 1000


@dataclass(frozen=True)
class AttributionConfig:
    method: str = "sm"  # "sm" or "ig"
    target: int | None = None  # None: class predicted at the clean input
    ig_steps: int = 32
    ig_baseline: np.ndarray | None = None  # None: all-zeros
    wrt: str = "logit"

    def __post_init__(self):
        if self.method not in ("sm", "ig"):
            raise ValueError(f"method must be 'sm' or 'ig', got {self.method!r}")
        if self.ig_steps < 1:
            raise ValueError("ig_steps must be >= 1")
        if self.wrt not in ("logit", "prob"):
            raise ValueError(f"wrt must be 'logit' or 'prob', got {self.wrt!r}")

    def baseline(self, d: int) -> np.ndarray:
        if self.ig_baseline is None:
            return np.zeros(d)
        b = np.asarray(self.ig_baseline, dtype=np.float64)
        if b.shape != (d,):
            raise ValueError(f"baseline has shape {b.shape}, expected ({d},)")
        return b


@dataclass(frozen=True)
class SmoothingConfig:
    r: float
    n: int
    seed: int = 0
    chunk: int = DEFAULT_CHUNK

    def __post_init__(self):
        if not self.r > 0.0:
            raise ValueError("smoothing radius must be positive")
        if self.n < 1 or self.chunk < 1:
            raise ValueError("sample count and chunk size must be >= 1")


@dataclass
class SmoothedAttribution:
    estimate: np.ndarray
    per_coord_variance: np.ndarray | None  # variance of the mean, None when n < 2
    sample_count: int
    radius: float
    seed: int
    target: int
    noise: str = "uniform"

    @property
    def norm2(self) -> float:
        return float(np.linalg.norm(self.estimate))


class RunningMoments:
    """Per-coordinate mean and sum of squared deviations, merged chunkwise (Chan/Welford)."""

    def __init__(self, d: int):
        self.count = 0
        self.mean = np.zeros(d)
        self.m2 = np.zeros(d)

    def update(self, batch: np.ndarray) -> None:
        nb = batch.shape[0]
        if nb == 0:
            return
        bmean = batch.mean(axis=0)
        bm2 = ((batch - bmean) ** 2).sum(axis=0)
        n = self.count + nb
        delta = bmean - self.mean
        self.mean = self.mean + delta * (nb / n)
        self.m2 = self.m2 + bm2 + delta ** 2 * (self.count * nb / n)
        self.count = n

    def variance(self) -> np.ndarray | None:
        if self.count < 2:
            return None
        return self.m2 / (self.count - 1)


def resolve_target(w: ModelWeights, x: np.ndarray, cfg: AttributionConfig) -> int:
    if cfg.target is not None:
        return int(cfg.target)
    return int(predict(w, x))


def attribute_batch(w: ModelWeights, X: np.ndarray, cfg: AttributionConfig, cls) -> np.ndarray:
    """Attributions of the rows of X for class ``cls``; shape (n, d)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if cfg.method == "sm":
        return input_gradients(w, X, cls, cfg.wrt)
    n, d = X.shape
    m = cfg.ig_steps
    base = cfg.baseline(d)
    alphas = (np.arange(m) + 0.5) / m
    diff = X - base
    pts = base + alphas[None, :, None] * diff[:, None, :]
    cls_rep = np.repeat(np.broadcast_to(np.asarray(cls), (n,)), m)
    return diff * input_gradients(w, pts.reshape(n * m, d), cls_rep, cfg.wrt, group=m)


def attribute(w: ModelWeights, x, cfg: AttributionConfig) -> np.ndarray:
    """g(x): saliency map or integrated gradients (midpoint rule) for one input."""
    x = np.asarray(x, dtype=np.float64)
    return attribute_batch(w, x[None, :], cfg, resolve_target(w, x, cfg))[0]


def _chunk_sizes(n: int, chunk: int) -> list[int]:
    return [min(chunk, n - s) for s in range(0, n, chunk)]


def uniform_noise(d: int, r: float, n: int, seed: int, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """The exact (n, d) noise sequence that smooth_uniform draws for this seed."""
    ball = BallSpec(d, r)
    parts = [sample_uniform_ball_batch(ball, size, substream(seed, k))
             for k, size in enumerate(_chunk_sizes(n, chunk))]
    return np.concatenate(parts) if parts else np.zeros((0, d))


def gaussian_noise(d: int, sigma: float, n: int, seed: int, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    parts = [sigma * substream(seed, k).standard_normal((size, d))
             for k, size in enumerate(_chunk_sizes(n, chunk))]
    return np.concatenate(parts) if parts else np.zeros((0, d))


def smoothed_mean_batch(w: ModelWeights, centers: np.ndarray, cfg: AttributionConfig, cls: int,
                        noise: np.ndarray) -> np.ndarray:
    """Mean attribution over a shared noise set for each row of ``centers``; (n, d)."""
    centers = np.atleast_2d(centers)
    n, d = centers.shape
    k = noise.shape[0]
    pts = (centers[:, None, :] + noise[None, :, :]).reshape(n * k, d)
    if cfg.method == "sm":
        return input_gradients(w, pts, cls, cfg.wrt, group=k)
    return attribute_batch(w, pts, cfg, cls).reshape(n, k, d).mean(axis=1)


def _smooth(w: ModelWeights, x, cfg: AttributionConfig, n: int, seed: int, chunk: int,
            draw: Callable[[int, np.random.Generator], np.ndarray], radius: float,
            noise_name: str, target: int | None) -> SmoothedAttribution:
    x = np.asarray(x, dtype=np.float64)
    cls = resolve_target(w, x, cfg) if target is None else int(target)
    acc = RunningMoments(x.shape[0])
    for k, size in enumerate(_chunk_sizes(n, chunk)):
        eta = draw(size, substream(seed, k))
        acc.update(attribute_batch(w, x + eta, cfg, cls))
    var = acc.variance()
    return SmoothedAttribution(
        estimate=acc.mean,
        per_coord_variance=None if var is None else var / acc.count,
        sample_count=acc.count,
        radius=radius,
        seed=seed,
        target=cls,
        noise=noise_name,
    )


def smooth_uniform(w: ModelWeights, x, cfg: AttributionConfig, smoothing: SmoothingConfig,
                   target: int | None = None) -> SmoothedAttribution:
    """Monte Carlo estimate of E[g(x + eta)], eta uniform on the radius-r ball.

    ``target`` overrides the class otherwise resolved at ``x``; attacks use it to
    keep the clean input's class while evaluating perturbed inputs.
    """
    ball = BallSpec(np.asarray(x).shape[0], smoothing.r)
    return _smooth(w, x, cfg, smoothing.n, smoothing.seed, smoothing.chunk,
                   lambda size, rng: sample_uniform_ball_batch(ball, size, rng),
                   smoothing.r, "uniform", target)


def smooth_gaussian(w: ModelWeights, x, cfg: AttributionConfig, sigma: float, n: int, seed: int = 0,
                    chunk: int = DEFAULT_CHUNK, target: int | None = None) -> SmoothedAttribution:
    """SmoothGrad-style baseline: eta ~ N(0, sigma^2 I)."""
    if not sigma > 0.0:
        raise ValueError("sigma must be positive")
    d = np.asarray(x).shape[0]
    return _smooth(w, x, cfg, n, seed, chunk,
                   lambda size, rng: sigma * rng.standard_normal((size, d)),
                   sigma, "gaussian", target)


@dataclass(frozen=True)
class UpperBound:
    value: float
    provenance: str
    heuristic: bool = False


def _max_baseline_distance(base: np.ndarray) -> float:
    # farthest corner of [0, 1]^d from the baseline
    return float(np.linalg.norm(np.maximum(np.abs(base), np.abs(1.0 - base))))


def attribution_upper_bound(w: ModelWeights, cfg: AttributionConfig, strategy: str = "lipschitz", *,
                            scale_factor: float = 1.0, probe_count: int = 1000, seed: int = 0,
                            value: float | None = None, pad: float = 0.0) -> UpperBound:
    """M with ||g(z)||_2 <= M, as required by the cosine certificate.

    lipschitz: product of spectral norms. For IG this is multiplied by the
        largest ||z - baseline||_2 over [0, 1]^d enlarged by ``pad`` (pass the
        smoothing radius, since g is evaluated on x + eta).
    empirical: largest attribution norm over uniform probes of [0, 1]^d and
        all classes, times ``scale_factor``. Not a proof; flagged heuristic.
    user: ``value`` as given.
    """
    d = w.input_dim
    if strategy == "lipschitz":
        lip = lipschitz_logit_bound(w, cfg.wrt)
        if cfg.method == "sm":
            return UpperBound(lip, f"lipschitz(sm,wrt={cfg.wrt})")
        reach = _max_baseline_distance(cfg.baseline(d)) + pad
        return UpperBound(lip * reach, f"lipschitz(ig,wrt={cfg.wrt},reach={reach!r})")
    if strategy == "empirical":
        if probe_count < 100:
            raise ValueError(f"empirical M needs at least 100 probes, got {probe_count}")
        if not scale_factor > 0.0:
            raise ValueError("scale_factor must be positive")
        probes = substream(seed, 0).random((probe_count, d))
        classes = range(w.class_count) if cfg.target is None else [cfg.target]
        best = 0.0
        for cls in classes:
            for start in range(0, probe_count, DEFAULT_CHUNK):
                g = attribute_batch(w, probes[start:start + DEFAULT_CHUNK], cfg, cls)
                best = max(best, float(np.linalg.norm(g, axis=1).max()))
        return UpperBound(best * scale_factor,
                          f"empirical(scale={scale_factor!r},probes={probe_count},seed={seed})",
                          heuristic=True)
    if strategy == "user":
        if value is None or not (value > 0.0 and math.isfinite(value)):
            raise ValueError("user strategy needs a positive finite value")
        return UpperBound(float(value), f"user({value!r})")
    raise ValueError(f"unknown M strategy {strategy!r}")


def parse_m_strategy(text: str) -> dict:
    """Parse 'lipschitz', 'user:3.5' or 'empirical:scale,probes,seed' into kwargs."""
    name, _, rest = text.partition(":")
    name = name.strip()
    if name == "lipschitz" and not rest:
        return {"strategy": "lipschitz"}
    if name == "user":
        return {"strategy": "user", "value": float(rest)}
    if name == "empirical":
        parts = [p for p in rest.split(",") if p.strip()] if rest else []
        out: dict = {"strategy": "empirical"}
        if len(parts) > 3:
            raise ValueError(f"bad M strategy {text!r}")
        for key, conv, p in zip(("scale_factor", "probe_count", "seed"), (float, int, int), parts):
            out[key] = conv(p)
        return out
    raise ValueError(f"bad M strategy {text!r}")
