"""Per-sample head selection for multi-head open-set classifiers.

For each head the gap between its two largest probabilities (DMaxP) and the
gap between its two smallest (DMinP) are measured.  If the head with the
largest DMaxP also has the smallest DMinP it is used; otherwise the head with
the largest DMaxP is used.  Both branches therefore pick the same head, and
``agreement`` only records which branch fired.

Ties resolve to the lowest head index and, inside a distribution, to the
lowest class index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datahub import OPEN


@dataclass(frozen=True)
class HeadConfidence:
    head_index: int
    dmaxp: float
    dminp: float


@dataclass(frozen=True)
class EnsembleDecision:
    chosen_head: int
    label: int
    probs: np.ndarray
    agreement: bool


def index_to_label(idx: int | np.ndarray, n_known: int):
    """Map argmax slot to label code; slot ``n_known`` is the open class."""
    if isinstance(idx, np.ndarray):
        return np.where(idx == n_known, OPEN, idx)
    return OPEN if idx == n_known else int(idx)


def head_confidence(probs: Sequence[float]) -> tuple[float, float]:
    p = np.sort(np.asarray(probs, dtype=np.float64))
    if p.ndim != 1 or p.size < 2:
        raise ValueError("a probability vector needs at least two entries")
    return float(p[-1] - p[-2]), float(p[1] - p[0])


def ensemble_predict(per_head_probs: Sequence[Sequence[float]]) -> EnsembleDecision:
    if len(per_head_probs) == 0:
        raise ValueError("need at least one head")
    stack = np.asarray(per_head_probs, dtype=np.float64)[:, None, :]
    heads, labels, chosen, agree = ensemble_arrays(stack)
    return EnsembleDecision(int(heads[0]), int(labels[0]), chosen[0], bool(agree[0]))


def ensemble_arrays(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised rule over ``probs`` of shape (heads, samples, classes).

    Returns chosen head, label code, chosen distribution and agreement flag
    per sample.
    """
    n_heads, n, c = probs.shape
    if c < 2:
        raise ValueError("a probability vector needs at least two entries")
    s = np.sort(probs, axis=2)
    dmaxp = s[:, :, -1] - s[:, :, -2]
    dminp = s[:, :, 1] - s[:, :, 0]
    best_max = np.argmax(dmaxp, axis=0)
    best_min = np.argmin(dminp, axis=0)
    agreement = best_max == best_min
    chosen_head = np.where(agreement, best_min, best_max)
    chosen = probs[chosen_head, np.arange(n)]
    labels = index_to_label(np.argmax(chosen, axis=1), c - 1)
    return chosen_head, labels, chosen, agreement


def batch_predict(state, features: np.ndarray) -> list[EnsembleDecision]:
    from .meosda import predict_all

    heads, labels, chosen, agree = ensemble_arrays(predict_all(state, features))
    return [EnsembleDecision(int(h), int(y), p, bool(a)) for h, y, p, a in zip(heads, labels, chosen, agree)]
