"""Accuracy metrics, reported in percent."""

from __future__ import annotations

from typing import Sequence

import numpy as np


def _as_sets(labels) -> list[frozenset]:
    if isinstance(labels, np.ndarray) and labels.ndim == 2:
        return [frozenset(int(c) + 1 for c in np.flatnonzero(row)) for row in labels]
    return [frozenset(s) for s in labels]


def multilabel_accuracy(pred, truth) -> float:
    """Example-based (Jaccard) accuracy: mean of ``|Y & P| / |Y | P|``.

    Accepts label sets or ``n x C`` indicator matrices. A sample where both
    sets are empty scores 1.
    """
    pred, truth = _as_sets(pred), _as_sets(truth)
    if len(pred) != len(truth):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(truth)} truths")
    if not truth:
        raise ValueError("accuracy of an empty prediction list is undefined")
    total = 0.0
    for p, t in zip(pred, truth):
        union = p | t
        total += 1.0 if not union else len(p & t) / len(union)
    return 100.0 * total / len(truth)


def hamming_accuracy(pred, truth, n_classes: int) -> float:
    """Share of correctly predicted class slots: ``1 - |Y ^ P| / C`` averaged."""
    pred, truth = _as_sets(pred), _as_sets(truth)
    if len(pred) != len(truth):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(truth)} truths")
    if not truth:
        raise ValueError("accuracy of an empty prediction list is undefined")
    wrong = sum(len(p ^ t) for p, t in zip(pred, truth))
    return 100.0 * (1.0 - wrong / (n_classes * len(truth)))


def singlelabel_accuracy(pred: Sequence[int], truth: Sequence[int]) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if len(pred) != len(truth):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(truth)} truths")
    if len(truth) == 0:
        raise ValueError("accuracy of an empty prediction list is undefined")
    return 100.0 * float(np.mean(pred == truth))


MULTILABEL_METRICS = {"jaccard": multilabel_accuracy, "hamming": hamming_accuracy}
