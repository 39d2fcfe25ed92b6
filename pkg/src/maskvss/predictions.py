"""Shared prediction and ground-truth containers.

Class labels live in {1..K}; the class-probability rows span K+1 entries
where column c-1 holds class c and column K holds the no-object label.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor

NO_OBJECT = -1  # sentinel for "matched to nothing"

__all__ = ["PredictionSet", "GroundTruth", "NO_OBJECT"]


@dataclass
class PredictionSet:
    """Per-query class distributions plus mask logits/probabilities.

    class_probs: [N, K+1] rows on the simplex
    mask_logits: [N, T, H, W]
    mask_probs:  sigmoid(mask_logits), built lazily when not supplied
    """

    class_probs: Tensor
    mask_logits: Tensor
    mask_probs: Tensor = None

    def __post_init__(self):
        if self.mask_probs is None:
            self.mask_probs = self.mask_logits.sigmoid()
        if self.class_probs.shape[0] != self.mask_logits.shape[0]:
            raise ShapeError("class and mask query counts disagree")

    @property
    def num_queries(self) -> int:
        return self.class_probs.shape[0]

    @property
    def num_classes(self) -> int:
        return self.class_probs.shape[1] - 1


@dataclass
class GroundTruth:
    """Per-clip (class label, binary mask) pairs.

    labels: [G] ints in {1..K}
    masks:  [G, T, H, W] with values in {0, 1}
    """

    labels: np.ndarray
    masks: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.masks = np.asarray(self.masks, dtype=np.float64)
        if self.masks.ndim != 4 or self.masks.shape[0] != self.labels.shape[0]:
            raise ShapeError("ground-truth masks must be [G, T, H, W]")
        if self.labels.size and self.labels.min() < 1:
            raise ContractError("class labels start at 1")

    @property
    def count(self) -> int:
        return int(self.labels.shape[0])

    @classmethod
    def empty(cls, frames: int, height: int, width: int) -> "GroundTruth":
        return cls(np.zeros(0, dtype=np.int64),
                   np.zeros((0, frames, height, width)))
