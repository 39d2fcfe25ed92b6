"""Label-map aggregation and evaluation metrics.

A label map assigns every pixel one class in {1..K}; no-object is never
emitted. Ground-truth label maps may additionally carry 0 as an ignore
label, excluded from all metrics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assignment import MatchResult
from .errors import ContractError, ShapeError
from .predictions import PredictionSet
from .tensor import Tensor

__all__ = [
    "aggregate_semantic",
    "aggregate_video_frame",
    "ConfusionAccumulator",
    "miou",
    "wiou",
    "clipwise_infer",
    "matched_query_stats",
    "MatchStats",
    "MetricsReport",
]

IGNORE_LABEL = 0


def _np(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _argmax_labels(scores: np.ndarray, shape) -> np.ndarray:
    # scores [K, P]; ties go to the smallest class index via argmax
    return (scores.argmax(axis=0) + 1).astype(np.int64).reshape(shape)


def aggregate_semantic(preds: PredictionSet) -> np.ndarray:
    """Per pixel, argmax over real classes of sum_i p_i(c) * m_i; the
    no-object column never competes."""
    class_probs = _np(preds.class_probs)
    masks = _np(preds.mask_probs)
    n, t, h, w = masks.shape
    k = class_probs.shape[1] - 1
    scores = class_probs[:, :k].T @ masks.reshape(n, -1)
    return _argmax_labels(scores, (t, h, w))


def aggregate_video_frame(video: PredictionSet, frame_class_probs,
                          frame_mask_probs) -> np.ndarray:
    """Average the video-level and frame-level score sums per pixel, then
    argmax over real classes.

    frame_class_probs: [T, N, K+1]; frame_mask_probs: [N, T, H, W].
    """
    v_class = _np(video.class_probs)
    v_masks = _np(video.mask_probs)
    f_class = _np(frame_class_probs)
    f_masks = _np(frame_mask_probs)
    if v_masks.shape != f_masks.shape:
        raise ShapeError("video and frame masks must share a shape")
    n, t, h, w = v_masks.shape
    k = v_class.shape[1] - 1
    video_scores = (v_class[:, :k].T @ v_masks.reshape(n, -1)).reshape(k, t, h, w)
    frame_scores = np.empty_like(video_scores)
    for ti in range(t):
        frame_scores[:, ti] = (
            f_class[ti][:, :k].T @ f_masks[:, ti].reshape(n, -1)
        ).reshape(k, h, w)
    scores = 0.5 * (video_scores + frame_scores)
    return _argmax_labels(scores.reshape(k, -1), (t, h, w))


class ConfusionAccumulator:
    """Streaming confusion counts over an evaluation set.

    IoU per class is TP / (TP + FP + FN) over the accumulated counts;
    the mean skips classes absent from both prediction and ground truth.
    """

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)

    def add(self, pred: np.ndarray, gt: np.ndarray) -> None:
        pred = np.asarray(pred, dtype=np.int64)
        gt = np.asarray(gt, dtype=np.int64)
        if pred.shape != gt.shape:
            raise ShapeError("prediction and ground truth shapes differ")
        keep = gt != IGNORE_LABEL
        k = self.num_classes
        flat = (gt[keep] - 1) * k + (pred[keep] - 1)
        self.matrix += np.bincount(flat, minlength=k * k).reshape(k, k)

    def per_class_iou(self) -> np.ndarray:
        tp = np.diag(self.matrix).astype(np.float64)
        gt_count = self.matrix.sum(axis=1).astype(np.float64)
        pred_count = self.matrix.sum(axis=0).astype(np.float64)
        union = gt_count + pred_count - tp
        return np.where(union > 0, tp / np.where(union > 0, union, 1.0), 0.0)

    def present(self) -> np.ndarray:
        return (self.matrix.sum(axis=1) + self.matrix.sum(axis=0)) > 0

    def miou(self) -> float:
        present = self.present()
        if not present.any():
            return 0.0
        return float(self.per_class_iou()[present].mean())

    def wiou(self) -> float:
        gt_count = self.matrix.sum(axis=1).astype(np.float64)
        total = gt_count.sum()
        if total == 0:
            return 0.0
        return float((gt_count / total * self.per_class_iou()).sum())


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int):
    """Mean IoU and per-class IoUs of one prediction/target pair."""
    acc = ConfusionAccumulator(num_classes)
    acc.add(pred, gt)
    return acc.miou(), acc.per_class_iou()


def wiou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    """Ground-truth-frequency-weighted IoU of one pair."""
    acc = ConfusionAccumulator(num_classes)
    acc.add(pred, gt)
    return acc.wiou()


def clipwise_infer(num_frames: int, clip_len: int, infer_fn) -> np.ndarray:
    """Split [0, num_frames) into consecutive clips of length clip_len
    (last clip possibly shorter), run infer_fn(start, stop) on each, and
    concatenate the label maps along the frame axis."""
    if clip_len < 1:
        raise ContractError("clip length must be >= 1")
    parts = []
    for start in range(0, num_frames, clip_len):
        stop = min(start + clip_len, num_frames)
        labels = np.asarray(infer_fn(start, stop))
        if labels.shape[0] != stop - start:
            raise ShapeError("clip inference returned wrong frame count")
        parts.append(labels)
    return np.concatenate(parts, axis=0)


@dataclass
class MatchStats:
    matched_round1: float
    matched_round2: float
    unmatched: float
    categories_per_clip: float

    def to_dict(self) -> dict:
        return dict(vars(self))


def matched_query_stats(matches: list) -> MatchStats:
    """Mean per-iteration counts of first-round, second-round, and
    unmatched queries; categories_per_clip is the mean ground-truth count."""
    if not matches:
        return MatchStats(0.0, 0.0, 0.0, 0.0)
    r1 = np.array([len(m.sigma1) for m in matches], dtype=np.float64)
    r2 = np.array([len(m.sigma2) for m in matches], dtype=np.float64)
    rest = np.array([len(m.unmatched) for m in matches], dtype=np.float64)
    return MatchStats(float(r1.mean()), float(r2.mean()), float(rest.mean()),
                      float(r1.mean()))


@dataclass
class MetricsReport:
    miou: float
    wiou: float
    per_class_iou: list
    matched_round1: float
    matched_round2: float
    unmatched: float
    categories_per_clip: float
    config_hash: str
    seed: int

    def to_dict(self) -> dict:
        return dict(vars(self))
