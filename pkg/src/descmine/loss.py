"""List-wise AP loss over top-K negatives, the triplet variant, and the chain
rule from similarities back to descriptor rows.

Soft-binned AP for one anchor with one positive::

    bins     b_m = 1 - (m - 1) * delta,  delta = 2 / (M - 1)
    kernel   k(s, m) = max(0, 1 - |s - b_m| / delta)
    AP'      = sum_m k(s_pos, m) / (1 + sum_{m' <= m} sum_j k(s_neg_j, m'))

Each bin's precision counts the positive as one item plus the negative mass
ranked at or above the bin, so a positive separated from every negative by
more than two bins scores exactly ``1 / (1 + #negatives above)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class EmptyListError(ValueError):
    pass


@dataclass(frozen=True)
class APConfig:
    num_bins: int = 25

    def __post_init__(self):
        if self.num_bins < 2:
            raise ValueError("num_bins must be >= 2")

    @property
    def delta(self) -> float:
        return 2.0 / (self.num_bins - 1)

    @property
    def centers(self) -> np.ndarray:
        return 1.0 - np.arange(self.num_bins) * self.delta


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.4

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be > 0")


@dataclass
class RankedList:
    s_pos: float
    s_negs: np.ndarray
    anchor_index: int = 0
    positive_index: int = -1
    negative_indices: np.ndarray = field(default=None)

    def __post_init__(self):
        s = np.asarray(self.s_negs, dtype=np.float64).ravel()
        order = np.argsort(-s, kind="stable")
        self.s_negs = s[order]
        if self.negative_indices is not None:
            self.negative_indices = np.asarray(self.negative_indices)[order]


@dataclass
class LossOutput:
    value: float
    d_s_pos: np.ndarray
    d_s_negs: list[np.ndarray]


def _kernel(s: np.ndarray, cfg: APConfig) -> tuple[np.ndarray, np.ndarray]:
    """Triangular bin weights and their derivative, bins on the last axis."""
    delta = cfg.delta
    diff = np.clip(s, -1.0, 1.0)[..., None] - cfg.centers
    dist = np.abs(diff)
    w = np.maximum(0.0, 1.0 - dist / delta)
    # right-sided slope at the peak, zero at the feet
    dw = np.where(dist < delta, np.where(diff >= 0, -1.0 / delta, 1.0 / delta), 0.0)
    return w, dw


def soft_ap_arrays(s_pos, s_neg, mask, cfg: APConfig):
    """Vectorized AP' over ``L`` lists padded to ``K`` negatives.

    Returns ``(ap, d_ap/d_s_pos, d_ap/d_s_neg)`` with shapes ``(L,)``, ``(L,)``,
    ``(L, K)``; padded entries get zero gradient.
    """
    s_pos = np.asarray(s_pos, dtype=np.float64)
    s_neg = np.asarray(s_neg, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    wp, dwp = _kernel(s_pos, cfg)
    wn, dwn = _kernel(s_neg, cfg)
    wn = wn * mask[..., None]
    dwn = dwn * mask[..., None]
    cum_neg = np.cumsum(wn.sum(axis=1), axis=1)
    q = 1.0 / (1.0 + cum_neg)
    # bin weights sum to 1 only up to rounding
    ap = np.minimum(np.sum(wp * q, axis=1), 1.0)
    d_pos = np.sum(dwp * q, axis=1)
    d_cum = -wp * q * q
    d_hist = np.cumsum(d_cum[:, ::-1], axis=1)[:, ::-1]
    d_neg = np.einsum("lkm,lm->lk", dwn, d_hist)
    return ap, d_pos, d_neg


def soft_binned_ap(lst: RankedList, cfg: APConfig = APConfig()) -> tuple[float, float, np.ndarray]:
    s_negs = np.asarray(lst.s_negs, dtype=np.float64)
    if s_negs.size == 0:
        raise EmptyListError("AP' needs at least one negative")
    ap, dp, dn = soft_ap_arrays([lst.s_pos], s_negs[None, :], np.ones((1, s_negs.size), bool), cfg)
    return float(ap[0]), float(dp[0]), dn[0]


def exact_ap(lst: RankedList) -> float:
    """AP of a single positive; ties with negatives rank the positive last."""
    rank = 1 + int(np.sum(np.asarray(lst.s_negs) >= lst.s_pos))
    return 1.0 / rank


def pad_lists(lists) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    k = max(len(l.s_negs) for l in lists)
    s_pos = np.array([l.s_pos for l in lists], dtype=np.float64)
    s_neg = np.zeros((len(lists), k))
    mask = np.zeros((len(lists), k), dtype=bool)
    for i, l in enumerate(lists):
        s_neg[i, : len(l.s_negs)] = l.s_negs
        mask[i, : len(l.s_negs)] = True
    return s_pos, s_neg, mask


def ap_loss_batch(lists, cfg: APConfig = APConfig()) -> LossOutput:
    """Mean of ``1 - AP'`` over anchors, with gradients w.r.t. every similarity."""
    lists = list(lists)
    if not lists:
        raise EmptyListError("empty list collection")
    if any(len(l.s_negs) == 0 for l in lists):
        raise EmptyListError("every list needs at least one negative")
    s_pos, s_neg, mask = pad_lists(lists)
    return ap_loss_arrays(s_pos, s_neg, mask, cfg)


def ap_loss_arrays(s_pos, s_neg, mask, cfg: APConfig = APConfig()) -> LossOutput:
    n = len(s_pos)
    if n == 0:
        raise EmptyListError("empty list collection")
    ap, dp, dn = soft_ap_arrays(s_pos, s_neg, mask, cfg)
    scale = -1.0 / n
    value = float(np.mean(1.0 - ap))
    d_negs = [dn[i, mask[i]] * scale for i in range(n)]
    return LossOutput(value, dp * scale, d_negs)


def triplet_loss(s_pos: float, s_neg_hardest: float, cfg: TripletConfig = TripletConfig()) -> tuple[float, float, float]:
    """Similarity-form hinge ``max(0, margin - s_pos + s_neg)`` and its gradient."""
    value = cfg.margin - s_pos + s_neg_hardest
    if value > 0:
        return float(value), -1.0, 1.0
    return 0.0, 0.0, 0.0


def triplet_loss_batch(s_pos, s_neg_hardest, cfg: TripletConfig = TripletConfig()) -> LossOutput:
    s_pos = np.asarray(s_pos, dtype=np.float64)
    s_neg = np.asarray(s_neg_hardest, dtype=np.float64)
    raw = cfg.margin - s_pos + s_neg
    active = raw > 0
    n = len(s_pos)
    if n == 0:
        raise EmptyListError("empty list collection")
    value = float(np.mean(np.where(active, raw, 0.0)))
    g = active / n
    return LossOutput(value, -g, [np.array([gi]) for gi in g])


def backprop_similarities(rows, anchor_idx, positive_idx, d_s_pos, negative_idx, d_s_negs) -> np.ndarray:
    """Accumulate ``dL/d(row)`` through ``s(a, b) = a . b`` for every list entry.

    ``negative_idx[i]`` and ``d_s_negs[i]`` hold the negative rows and the
    gradients for anchor ``i``. Returns an array shaped like *rows*.
    """
    rows = np.asarray(rows, dtype=np.float64)
    n = rows.shape[0]
    anchor_idx = np.asarray(anchor_idx, dtype=np.int64)
    positive_idx = np.asarray(positive_idx, dtype=np.int64)
    neg_counts = [len(x) for x in negative_idx]
    neg_flat = np.concatenate([np.asarray(x, dtype=np.int64) for x in negative_idx]) if negative_idx else np.zeros(0, np.int64)
    g_flat = np.concatenate([np.asarray(x, dtype=np.float64) for x in d_s_negs]) if d_s_negs else np.zeros(0)
    for idx in (anchor_idx, positive_idx, neg_flat):
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise IndexError("descriptor index out of range")
    a_flat = np.repeat(anchor_idx, neg_counts)

    grad = np.zeros_like(rows)
    g_pos = np.asarray(d_s_pos, dtype=np.float64)[:, None]
    np.add.at(grad, anchor_idx, g_pos * rows[positive_idx])
    np.add.at(grad, positive_idx, g_pos * rows[anchor_idx])
    np.add.at(grad, a_flat, g_flat[:, None] * rows[neg_flat])
    np.add.at(grad, neg_flat, g_flat[:, None] * rows[a_flat])
    return grad
