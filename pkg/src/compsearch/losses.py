"""Training losses over transformation pairs, and relevance-aware batching.

The composition-aware loss ties the output-space transformation To (dot
products of embeddings) to the input-space transformation Ti (map overlap):
per entry, max(To,0) - Ti*To + log(1+exp(-|To|)). Algebraically this is
soft-label cross-entropy with target Ti on logit To, written so no exp can
overflow. The Euclidean baseline squashes To through a sigmoid and takes
the squared error instead.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

RELEVANCE_THRESHOLD = 0.30
ANCHORS_PER_BATCH = 36


def _check_pair(ti: np.ndarray, to_shape: tuple) -> np.ndarray:
    ti = np.asarray(ti)
    if ti.shape != to_shape:
        raise ad.GraphError(f"Ti shape {ti.shape} != To shape {to_shape}")
    if not np.isfinite(ti).all():
        raise ad.NonFiniteError("ti")
    if ti.min() < 0 or ti.max() > 1:
        raise ad.GraphError("Ti entries must lie in [0,1]")
    return ti


def cal_loss(ti: np.ndarray, to) -> "Tensor | float":
    """Mean over all ordered pairs of max(To,0) - Ti*To + log(1+exp(-|To|))."""
    if isinstance(to, Tensor):
        ti = _check_pair(ti, to.shape).astype(to.data.dtype)
        hinge = ad.relu(to)
        cross = ad.mul(to, Tensor(ti))
        log_term = ad.log1p(ad.exp(ad.neg(ad.absolute(to))))
        return ad.mean_all(ad.add(ad.sub(hinge, cross), log_term))
    to = np.asarray(to)
    ti = _check_pair(ti, to.shape)
    if not np.isfinite(to).all():
        raise ad.NonFiniteError("to")
    per_entry = np.maximum(to, 0.0) - ti * to + np.log1p(np.exp(-np.abs(to)))
    return float(per_entry.mean())


def euclidean_loss(ti: np.ndarray, to) -> "Tensor | float":
    """Mean squared error between Ti and sigmoid(To)."""
    if isinstance(to, Tensor):
        ti = _check_pair(ti, to.shape).astype(to.data.dtype)
        diff = ad.sub(Tensor(ti), ad.sigmoid(to))
        return ad.mean_all(ad.mul(diff, diff))
    to = np.asarray(to)
    ti = _check_pair(ti, to.shape)
    if not np.isfinite(to).all():
        raise ad.NonFiniteError("to")
    e = np.exp(-np.abs(to))
    sig = np.where(to >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(((ti - sig) ** 2).mean())


def loss_grad_wrt_to(ti: np.ndarray, to: np.ndarray) -> np.ndarray:
    """Closed-form d(cal_loss)/dTo = (sigmoid(To) - Ti) / B^2."""
    to = np.asarray(to, dtype=np.float64)
    ti = _check_pair(ti, to.shape)
    e = np.exp(-np.abs(to))
    sig = np.where(to >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return (sig - ti) / to.size


LOSSES = {"cal": cal_loss, "euclidean": euclidean_loss}


# ---------------------------------------------------------------------------
# batch construction

@dataclass
class RelevanceIndex:
    """Per-anchor companion candidates split at the relevance threshold.

    high[i]/low[i] hold candidate indices with Ti >= / < threshold; the
    fallback arrays carry the single best/worst candidate for anchors whose
    bucket came up empty.
    """

    high: list[np.ndarray]
    low: list[np.ndarray]
    threshold: float = RELEVANCE_THRESHOLD

    @classmethod
    def from_ti_matrix(cls, ti: np.ndarray,
                       threshold: float = RELEVANCE_THRESHOLD) -> "RelevanceIndex":
        n = ti.shape[0]
        if ti.shape != (n, n):
            raise ValueError(f"Ti matrix must be square, got {ti.shape}")
        high, low = [], []
        for i in range(n):
            row = ti[i].copy()
            others = np.arange(n) != i
            hi = np.flatnonzero(others & (row >= threshold))
            lo = np.flatnonzero(others & (row < threshold))
            if hi.size == 0:
                row[i] = -1.0
                hi = np.array([int(np.argmax(row))])
            if lo.size == 0:
                row[i] = 2.0
                lo = np.array([int(np.argmin(row))])
            high.append(hi)
            low.append(lo)
        return cls(high, low, threshold)


@dataclass
class TrainingBatch:
    """Flat item indices laid out as (anchor, high, low) triples."""

    indices: np.ndarray     # [B] into the dataset
    ti: np.ndarray          # [B,B] input transformations for the batch

    @property
    def size(self) -> int:
        return len(self.indices)


def build_batch(ti_full: np.ndarray, index: RelevanceIndex,
                rng: np.random.Generator,
                anchors: int = ANCHORS_PER_BATCH) -> TrainingBatch:
    """Sample anchors plus one high- and one low-relevance companion each.

    ti_full is the precomputed all-pairs input transformation for the
    dataset; the batch Ti is its submatrix, identical to recomputing from
    the maps because the counts divide exactly the same way.
    """
    n = ti_full.shape[0]
    if n < anchors:
        warnings.warn(f"dataset of {n} scenes smaller than {anchors} anchors; "
                      f"using all of them", stacklevel=2)
        anchors = n
    anchor_ids = rng.choice(n, size=anchors, replace=False)
    triples = []
    for a in anchor_ids:
        hi = index.high[a][rng.integers(len(index.high[a]))]
        lo = index.low[a][rng.integers(len(index.low[a]))]
        triples.extend((int(a), int(hi), int(lo)))
    idx = np.array(triples, dtype=np.int64)
    return TrainingBatch(idx, ti_full[np.ix_(idx, idx)])
