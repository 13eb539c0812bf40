"""l2 attribution attack (iterative feature-importance style) and its evaluation.

The attack minimises a soft top-k surrogate, the softmax mass that the
perturbed attribution places on the clean top-k features. It takes projected
l2 steps and rejects any step that changes the predicted label. Gradients of
the surrogate come from central finite differences or a random line search.
No second-order autodiff is involved. Soundness of a certificate must hold
against any in-budget perturbation, so a weaker attack still tests it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import softmax

from .attribution import (AttributionConfig, attribute_batch, resolve_target,
                          smoothed_mean_batch, uniform_noise)
from .geometry import BallSpec, sample_uniform_ball, substream
from .metrics import cosine_similarity, kendall_correlation, topk_indices, topk_intersection
from .model import ModelWeights, predict, with_activation

__all__ = [
    "AttackConfig",
    "AttackResult",
    "AttackObjective",
    "ifia_l2_attack",
    "gradient_of_attack_loss",
    "surrogate_topk_mass",
    "default_k",
]

NUMERIC_MAX_DIM = 4096
_MAX_ROWS = 200_000

BatchLoss = Callable[[np.ndarray], np.ndarray]


def default_k(d: int) -> int:
    return max(1, d // 8)


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    iterations: int = 200
    step_size: float = 0.1
    k: int | None = None  # None: max(1, d // 8)
    target: str = "plain"  # "plain" or "smoothed"
    nstar: int = 300
    r: float | None = None
    smooth_seed: int = 0
    grad_mode: str = "numeric"  # "numeric" or "random_search"
    fd_step: float = 1e-3
    directions_per_iter: int = 8
    softplus: bool = True
    softplus_beta: float | None = None
    temperature: float = 0.1
    max_halvings: int = 5
    random_start: bool = True
    clip: bool = True  # keep x_adv inside [0, 1]^d

    def __post_init__(self):
        if not (self.epsilon >= 0.0 and math.isfinite(self.epsilon)):
            raise ValueError("epsilon must be a nonnegative finite number")
        if self.iterations < 1 or not self.step_size > 0.0:
            raise ValueError("iterations must be >= 1 and step_size > 0")
        if self.target not in ("plain", "smoothed"):
            raise ValueError(f"target must be 'plain' or 'smoothed', got {self.target!r}")
        if self.target == "smoothed" and (self.r is None or not self.r > 0.0 or self.nstar < 1):
            raise ValueError("smoothed target needs r > 0 and nstar >= 1")
        if self.grad_mode not in ("numeric", "random_search"):
            raise ValueError(f"grad_mode must be 'numeric' or 'random_search', got {self.grad_mode!r}")
        if not self.fd_step > 0.0 or self.directions_per_iter < 1:
            raise ValueError("fd_step must be positive and directions_per_iter >= 1")


@dataclass
class AttackResult:
    x_adv: np.ndarray
    delta_norm: float
    prediction_preserved: bool
    topk_intersection: float
    kendall: float
    cosine: float
    iterations_used: int
    surrogate: float
    meta: dict = field(default_factory=dict)


def surrogate_topk_mass(G: np.ndarray, topk_set: np.ndarray, temperature: float) -> np.ndarray:
    """Softmax weight that each row of G places on ``topk_set``; rows scaled to max |g| = 1."""
    G = np.atleast_2d(G)
    scale = np.abs(G).max(axis=1, keepdims=True)
    scale[scale == 0.0] = 1.0
    p = softmax(G / (scale * temperature), axis=1)
    return p[:, topk_set].sum(axis=1)


class AttackObjective:
    """Batch surrogate loss and target attribution for one attacked input.

    ``w_surrogate`` (Softplus copy) drives the loss; ``w`` gives the reported
    attributions. Both use the clean input's class and, for smoothed targets,
    one fixed noise set.
    """

    def __init__(self, w: ModelWeights, x: np.ndarray, cfg: AttributionConfig, atk: AttackConfig):
        self.w = w
        self.cfg = cfg
        self.atk = atk
        self.cls = resolve_target(w, x, cfg)
        self.w_surrogate = w
        if atk.softplus and any(layer.activation == "relu" for layer in w.layers):
            self.w_surrogate = with_activation(w, "relu", "softplus", atk.softplus_beta)
        self.noise = None
        if atk.target == "smoothed":
            self.noise = uniform_noise(x.shape[0], atk.r, atk.nstar, atk.smooth_seed)
        self.k = atk.k if atk.k is not None else default_k(x.shape[0])
        self.clean = self.attribution(x[None, :])[0]
        self.topk_set = topk_indices(self.clean, self.k)
        self.evaluations = 0

    def _rows_per_point(self) -> int:
        per = self.cfg.ig_steps if self.cfg.method == "ig" else 1
        return per * (1 if self.noise is None else self.noise.shape[0])

    def _attr(self, w: ModelWeights, X: np.ndarray) -> np.ndarray:
        step = max(1, _MAX_ROWS // self._rows_per_point())
        out = []
        for s in range(0, X.shape[0], step):
            block = X[s:s + step]
            if self.noise is None:
                out.append(attribute_batch(w, block, self.cfg, self.cls))
            else:
                out.append(smoothed_mean_batch(w, block, self.cfg, self.cls, self.noise))
        return np.concatenate(out)

    def attribution(self, X: np.ndarray) -> np.ndarray:
        return self._attr(self.w, np.atleast_2d(X))

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        self.evaluations += X.shape[0]
        G = self._attr(self.w_surrogate, X)
        return surrogate_topk_mass(G, self.topk_set, self.atk.temperature)


def gradient_of_attack_loss(loss: BatchLoss, x: np.ndarray, atk: AttackConfig,
                            rng: np.random.Generator | None = None,
                            loss_at_x: float | None = None) -> np.ndarray:
    """Descent information for a batch loss at x.

    numeric: central differences with step ``fd_step``, one batch of 2d points.
    random_search: probes ``directions_per_iter`` random unit directions at
        distance ``step_size``; returns -u * (decrease / step) for the best
        decreasing direction u, or zeros when none decreases the loss.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    if atk.grad_mode == "numeric":
        if d > NUMERIC_MAX_DIM:
            raise ValueError(f"numeric attack gradients are limited to d <= {NUMERIC_MAX_DIM}; "
                             "use grad_mode='random_search'")
        h = atk.fd_step
        eye = np.eye(d) * h
        vals = loss(np.concatenate([x + eye, x - eye]))
        with np.errstate(invalid="ignore"):
            g = (vals[:d] - vals[d:]) / (2.0 * h)
        return np.where(np.isfinite(g), g, 0.0)
    if rng is None:
        raise ValueError("random_search needs a generator")
    u = rng.standard_normal((atk.directions_per_iter, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    base = float(loss(x[None, :])[0]) if loss_at_x is None else loss_at_x
    vals = loss(x + atk.step_size * u)
    j = int(np.argmin(vals))
    with np.errstate(invalid="ignore"):
        drop = base - vals[j]
    if not (drop > 0.0 and math.isfinite(drop)):
        return np.zeros(d)
    return -u[j] * (drop / atk.step_size)


def _project(x: np.ndarray, cand: np.ndarray, eps: float, clip: bool) -> np.ndarray:
    delta = cand - x
    norm = np.linalg.norm(delta)
    if norm > eps:
        delta *= eps / norm
    out = x + delta
    if clip:
        out = np.clip(out, 0.0, 1.0)
    # clipping toward a box containing x never lengthens delta; guard rounding
    norm = np.linalg.norm(out - x)
    if norm > eps:
        out = x + (out - x) * (eps / norm) * (1.0 - 1e-15)
    return out


def _evaluate(obj: AttackObjective, x: np.ndarray, x_adv: np.ndarray, it: int, surrogate: float,
              preserved: bool, meta: dict) -> AttackResult:
    g_adv = obj.attribution(x_adv[None, :])[0]
    clean = obj.clean
    try:
        cos = cosine_similarity(clean, g_adv)
    except ValueError:
        cos = math.nan
    d = x.shape[0]
    return AttackResult(
        x_adv=x_adv,
        delta_norm=float(np.linalg.norm(x_adv - x)),
        prediction_preserved=preserved,
        topk_intersection=topk_intersection(clean, g_adv, obj.k),
        kendall=kendall_correlation(clean, g_adv) if d >= 2 else 1.0,
        cosine=cos,
        iterations_used=it,
        surrogate=surrogate,
        meta=meta,
    )


def ifia_l2_attack(w: ModelWeights, x, cfg: AttributionConfig, atk: AttackConfig,
                   seed: int = 0) -> AttackResult:
    """Perturb x within an l2 ball of radius epsilon to disturb its top-k attribution.

    Returns the prediction-preserving iterate with the lowest surrogate. Falls
    back to x itself when nothing better is found.
    """
    x = np.asarray(x, dtype=np.float64)
    obj = AttackObjective(w, x, cfg, atk)
    cls = int(predict(w, x))
    meta = {
        "surrogate": f"softmax(g/max|g|/{atk.temperature!r}) mass on clean top-{obj.k}",
        "kendall_variant": "standard_tau",
        "grad_mode": atk.grad_mode,
        "target": atk.target,
        "class": obj.cls,
    }
    base_loss = float(obj(x[None, :])[0])
    if atk.epsilon == 0.0:
        return _evaluate(obj, x, x.copy(), 0, base_loss, True, meta)

    rng = substream(seed, 0)
    cur, cur_loss = x.copy(), base_loss
    if atk.random_start:
        start = _project(x, x + sample_uniform_ball(BallSpec(x.shape[0], atk.epsilon), rng),
                         atk.epsilon, atk.clip)
        if int(predict(w, start)) == cls:
            cur, cur_loss = start, float(obj(start[None, :])[0])
    best, best_loss = (cur, cur_loss) if cur_loss <= base_loss else (x.copy(), base_loss)
    used = 0
    for it in range(atk.iterations):
        used = it + 1
        direction = gradient_of_attack_loss(obj, cur, atk, rng, cur_loss)
        norm = float(np.linalg.norm(direction))
        if norm == 0.0:
            if atk.grad_mode == "numeric":
                break
            continue
        step = atk.step_size
        accepted = None
        for _ in range(atk.max_halvings + 1):
            cand = _project(x, cur - step * direction / norm, atk.epsilon, atk.clip)
            if int(predict(w, cand)) == cls:
                accepted = cand
                break
            step *= 0.5
        if accepted is None:
            if atk.grad_mode == "numeric":
                break
            continue
        cur = accepted
        cur_loss = float(obj(cur[None, :])[0])
        if cur_loss < best_loss:
            best, best_loss = cur, cur_loss
    meta["loss_evaluations"] = obj.evaluations
    return _evaluate(obj, x, best, used, best_loss, int(predict(w, best)) == cls, meta)
