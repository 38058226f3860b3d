"""Decoupled InfoNCE over matched neuron pairs.

For each matched pair the positive is the same neuron's projection in the
other view; negatives are every other neuron in the same view plus every
non-matched neuron in the other view. The positive similarity never
appears in the denominator, and the loss for a batch of view pairs is the
match-count weighted mean of the per-pair losses (no cross-pair negatives).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import AllEmpty, EmptyDenominator, EmptyMatched, ZeroVector
from .numerics import Tensor


@dataclass
class LossConfig:
    temperature: float = 0.1

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def cosine_sim(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity of two vectors; zero vectors are a contract violation."""
    nu = (u * u).sum() ** 0.5
    nv = (v * v).sum() ** 0.5
    if nu.item() == 0.0 or nv.item() == 0.0:
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    return (u * v).sum() / (nu * nv)


def _normalize_rows(p: Tensor) -> Tensor:
    norms = (p * p).sum(axis=-1, keepdims=True) ** 0.5
    if np.any(norms.data == 0.0):
        raise ZeroVector("projection row with zero norm")
    return p / norms


def _masked_row_lse(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise log-sum-exp of `scores` restricted to mask==1 entries."""
    shift = np.where(mask, scores.data, -np.inf).max(axis=-1, keepdims=True)
    masked = (scores - shift).exp() * mask.astype(scores.dtype)
    return masked.sum(axis=-1).log() + nx.tensor(shift[..., 0])


def _directional(
    sim_within: Tensor, sim_cross: Tensor, matched: np.ndarray
) -> Tensor:
    """Sum over matched anchors of -log(pos / (own-view + cross-view negatives)).

    `matched` is (|M|, 2) holding (anchor row, partner column) indices into
    `sim_cross`; `sim_within` is the anchor view's self-similarity matrix.
    Both are already divided by the temperature.
    """
    n1 = sim_within.shape[0]
    n2 = sim_cross.shape[1]
    anchors = matched[:, 0]
    partners = matched[:, 1]
    if n1 < 2 and n2 < 2:
        raise EmptyDenominator("no negatives available for any anchor")

    pos = sim_cross[anchors, partners]

    within_mask = np.ones((len(anchors), n1), dtype=bool)
    within_mask[np.arange(len(anchors)), anchors] = False
    cross_mask = np.ones((len(anchors), n2), dtype=bool)
    cross_mask[np.arange(len(anchors)), partners] = False

    rows_within = sim_within[anchors]  # (|M|, N1)
    rows_cross = sim_cross[anchors]  # (|M|, N2)
    # one combined (|M|, N1+N2) score matrix with the excluded entries masked out
    all_scores = _concat_lastdim(rows_within, rows_cross)
    all_mask = np.concatenate([within_mask, cross_mask], axis=1)
    if not all_mask.any(axis=1).all():
        raise EmptyDenominator("an anchor has an empty negative set")
    lse = _masked_row_lse(all_scores, all_mask)
    return (lse - pos).sum()


def _concat_lastdim(a: Tensor, b: Tensor) -> Tensor:
    out = np.concatenate([a.data, b.data], axis=-1)
    na = a.shape[-1]

    def vjp(g):
        return g[..., :na], g[..., na:]

    return nx.Tensor(out, _parents=(a, b), _vjp=vjp)


def pair_loss(
    p1: Tensor, p2: Tensor, matched: list[tuple[int, int]], temperature: float
) -> Tensor:
    """Symmetric decoupled InfoNCE for one view pair; mean over matched pairs."""
    if len(matched) == 0:
        raise EmptyMatched("no matched pairs in this view pair")
    m = np.asarray(matched, dtype=np.int64)
    q1 = _normalize_rows(p1)
    q2 = _normalize_rows(p2)
    inv_t = 1.0 / temperature
    s11 = nx.matmul(q1, q1.swapaxes(0, 1)) * inv_t
    s22 = nx.matmul(q2, q2.swapaxes(0, 1)) * inv_t
    s12 = nx.matmul(q1, q2.swapaxes(0, 1)) * inv_t
    s21 = s12.swapaxes(0, 1)

    term_12 = _directional(s11, s12, m)
    term_21 = _directional(s22, s21, m[:, ::-1])
    return (term_12 + term_21) * (1.0 / len(matched))


def batch_loss(pairs: list[tuple[Tensor, int]]) -> Tensor:
    """Match-count weighted mean of per-pair losses; zero-weight pairs drop out."""
    total_weight = sum(n for _, n in pairs)
    if total_weight <= 0:
        raise AllEmpty("every view pair in the batch has zero matched pairs")
    acc = None
    for loss, n in pairs:
        if n == 0:
            continue
        contrib = loss * float(n)
        acc = contrib if acc is None else acc + contrib
    return acc * (1.0 / total_weight)
