"""Evaluation metrics: answer accuracy, PDR, IoU and attention entropy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import UndefinedMetricError
from .imagecore import BBox

__all__ = [
    "JudgedAnswer",
    "accuracy",
    "pdr",
    "iou",
    "attention_entropy",
    "iou_degradation",
]


@dataclass(frozen=True)
class JudgedAnswer:
    sample_id: str
    prediction: str
    ground_truth: str
    correct: bool


def accuracy(answers: Sequence[JudgedAnswer]) -> float:
    """Fraction of answers the judge marked correct."""
    if not answers:
        raise UndefinedMetricError("accuracy of an empty answer set")
    return sum(1 for a in answers if a.correct) / len(answers)


def pdr(acc_clean: float, acc_perturbed: float) -> float:
    """Performance drop rate (acc_clean - acc_perturbed) / acc_clean.

    Negative values mean the perturbation apparently helped.
    """
    if acc_clean <= 0:
        raise UndefinedMetricError(f"PDR undefined for clean accuracy {acc_clean}")
    return (acc_clean - acc_perturbed) / acc_clean


def iou(b1: BBox, b2: BBox) -> float:
    """Intersection over union of two axis-aligned boxes, in [0, 1].

    The overlap takes the max of the top-left and the min of the
    bottom-right coordinates; an empty overlap scores 0. Two degenerate
    boxes (zero union area) have no defined IoU.
    """
    ix1 = max(b1.x1, b2.x1)
    iy1 = max(b1.y1, b2.y1)
    ix2 = min(b1.x2, b2.x2)
    iy2 = min(b1.y2, b2.y2)
    inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
    union = b1.area() + b2.area() - inter
    if union <= 0:
        raise UndefinedMetricError(f"zero-area union for {b1} and {b2}")
    return inter / union


def attention_entropy(scores) -> float:
    """Shannon entropy (nats) of the map normalized to a distribution.

    Entries must be nonnegative with positive total mass; zero entries
    contribute 0 * ln 0 := 0. Result lies in [0, ln N].
    """
    arr = np.asarray(scores, dtype=np.float64)
    if arr.size == 0:
        raise UndefinedMetricError("entropy of an empty map")
    if np.any(arr < 0):
        raise ValueError("attention scores must be nonnegative")
    total = arr.sum()
    if total <= 0:
        raise UndefinedMetricError("entropy of a zero-mass map")
    p = arr / total
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def iou_degradation(clean_ious: Sequence[float], perturbed_ious: Sequence[float]) -> float:
    """Mean clean IoU minus mean perturbed IoU."""
    if len(clean_ious) == 0 or len(perturbed_ious) == 0:
        raise UndefinedMetricError("IoU degradation of empty sequences")
    return float(np.mean(clean_ious) - np.mean(perturbed_ious))
