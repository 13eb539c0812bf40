"""Attribution similarity metrics: top-k intersection, Kendall correlation, cosine."""
from __future__ import annotations

import numpy as np

__all__ = ["DegenerateAttributionError", "topk_indices", "topk_intersection", "kendall_correlation", "cosine_similarity"]


class DegenerateAttributionError(ValueError):
    """An attribution is the zero vector; its cosine is undefined."""


def _pair(g1, g2) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(g1, dtype=np.float64).ravel()
    b = np.asarray(g2, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"attributions differ in length: {a.size} vs {b.size}")
    if np.isnan(a).any() or np.isnan(b).any():
        raise ValueError("attributions contain NaN")
    return a, b


def topk_indices(g, k: int) -> np.ndarray:
    """Indices of the k largest values; ties go to the lower index."""
    g = np.asarray(g, dtype=np.float64).ravel()
    if not 1 <= k <= g.size:
        raise ValueError(f"k must lie in [1, {g.size}], got {k}")
    return np.argsort(-g, kind="stable")[:k]


def topk_intersection(g1, g2, k: int) -> float:
    a, b = _pair(g1, g2)
    common = np.intersect1d(topk_indices(a, k), topk_indices(b, k))
    return common.size / k


def kendall_correlation(g1, g2, variant: str = "standard_tau") -> float:
    """Rank agreement between two attributions.

    standard_tau: (concordant - discordant) / (d(d-1)/2), ties broken by index
        (an earlier feature ranks above a later one with the same value).
    paper_concordant_share: 2/(d(d-1)) * sum_{i<j} [a_i > a_j][b_i > b_j],
        taken literally, so it lies in [0, 1].
    """
    a, b = _pair(g1, g2)
    d = a.size
    if d < 2:
        raise ValueError("Kendall correlation needs at least two features")
    iu = np.triu_indices(d, k=1)
    pairs = d * (d - 1) / 2
    if variant == "standard_tau":
        above_a = a[iu[0]] >= a[iu[1]]
        above_b = b[iu[0]] >= b[iu[1]]
        concordant = np.count_nonzero(above_a == above_b)
        return float((2 * concordant - pairs) / pairs)
    if variant == "paper_concordant_share":
        both = (a[iu[0]] > a[iu[1]]) & (b[iu[0]] > b[iu[1]])
        return float(np.count_nonzero(both) / pairs)
    raise ValueError(f"unknown Kendall variant {variant!r}")


def cosine_similarity(g1, g2) -> float:
    a, b = _pair(g1, g2)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateAttributionError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))
