"""Keypoint evaluation: object keypoint similarity, AP over OKS
thresholds, and PCK at a radius fraction of object scale.

Every sample holds exactly one instance, so detection matching is the
identity: prediction i scores against ground truth i. AP still ranks by
prediction score, so confident wrong predictions hurt more than hesitant
ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, UndefinedMetric

OKS_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


def oks(
    pred: np.ndarray,
    gt: np.ndarray,
    visible: np.ndarray,
    scale: float,
    sigmas: np.ndarray,
) -> float:
    """Mean over visible joints of exp(-d^2 / (2 s sigma_j^2)).

    `scale` is the squared object scale in px^2 (bounding-box diagonal
    squared for the synthetic skeletons). Raises UndefinedMetric when no
    joint is visible or the scale is not positive: such a sample has no
    well-defined similarity.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    vis = np.asarray(visible, dtype=bool)
    sig = np.asarray(sigmas, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} must both be (J, 2)")
    J = pred.shape[0]
    if vis.shape != (J,) or sig.shape != (J,):
        raise ShapeError("visible and sigmas must be (J,)")
    if not vis.any():
        raise UndefinedMetric("OKS undefined: no visible joints")
    if not (scale > 0.0):
        raise UndefinedMetric(f"OKS undefined: scale {scale} is not positive")
    d2 = ((pred - gt) ** 2).sum(axis=1)
    sims = np.exp(-d2 / (2.0 * scale * sig * sig))
    return float(sims[vis].mean())


def pck_hits(
    pred: np.ndarray,
    gt: np.ndarray,
    visible: np.ndarray,
    scale: float,
    radius: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-joint (hit, counted) masks: a visible joint is a hit when its
    error is at most radius * scale."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    vis = np.asarray(visible, dtype=bool)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} must both be (J, 2)")
    if not (scale > 0.0):
        raise UndefinedMetric(f"PCK undefined: scale {scale} is not positive")
    d = np.sqrt(((pred - gt) ** 2).sum(axis=1))
    hits = (d <= radius * scale) & vis
    return hits, vis.copy()


def pck(
    preds: list[np.ndarray],
    gts: list[np.ndarray],
    visibles: list[np.ndarray],
    scales: list[float],
    radius: float,
) -> float:
    """Pooled fraction of visible joints within radius * scale, over samples."""
    hit = 0
    total = 0
    for p, g, v, s in zip(preds, gts, visibles, scales):
        h, c = pck_hits(p, g, v, s, radius)
        hit += int(h.sum())
        total += int(c.sum())
    if total == 0:
        raise UndefinedMetric("PCK undefined: no visible joints in the set")
    return hit / total


def per_joint_pck(
    preds: list[np.ndarray],
    gts: list[np.ndarray],
    visibles: list[np.ndarray],
    scales: list[float],
    radius: float,
    num_joints: int,
) -> np.ndarray:
    """Per-joint PCK; joints never visible get NaN rather than a made-up 0."""
    hit = np.zeros(num_joints)
    total = np.zeros(num_joints)
    for p, g, v, s in zip(preds, gts, visibles, scales):
        h, c = pck_hits(p, g, v, s, radius)
        hit += h
        total += c
    out = np.full(num_joints, np.nan)
    ok = total > 0
    out[ok] = hit[ok] / total[ok]
    return out


def ap_at_threshold(scores: np.ndarray, oks_values: np.ndarray, threshold: float,
                    num_gt: int | None = None) -> float:
    """All-point interpolated AP for one OKS threshold.

    Predictions are ranked by score (stable, ties keep input order); a
    prediction is a true positive when its OKS reaches the threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    vals = np.asarray(oks_values, dtype=np.float64)
    if scores.shape != vals.shape or scores.ndim != 1:
        raise ShapeError("scores and oks_values must be equal-length 1-d arrays")
    n = scores.size
    if num_gt is None:
        num_gt = n
    if n == 0 or num_gt == 0:
        raise UndefinedMetric("AP undefined: empty evaluation set")
    order = np.argsort(-scores, kind="stable")
    tp = vals[order] >= threshold
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, n + 1)
    recall = cum_tp / num_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev = 0.0
    for k in range(n):
        if tp[k]:
            ap += (recall[k] - prev) * envelope[k]
            prev = recall[k]
    return float(ap)


def average_precision(
    scores: np.ndarray,
    oks_values: np.ndarray,
    thresholds: tuple = OKS_THRESHOLDS,
    num_gt: int | None = None,
) -> dict[str, float]:
    """Mean AP over the threshold sweep plus the two standard single cuts."""
    per = {t: ap_at_threshold(scores, oks_values, t, num_gt) for t in thresholds}
    return {
        "ap": float(np.mean([per[t] for t in thresholds])),
        "ap50": per.get(0.5, float("nan")),
        "ap75": per.get(0.75, float("nan")),
        "per_threshold": {f"{t:.2f}": per[t] for t in thresholds},
    }


@dataclass
class EvalResult:
    ap: float
    ap50: float
    ap75: float
    pck: float
    per_joint: np.ndarray
    num_samples: int

    def to_dict(self) -> dict:
        return {
            "ap": self.ap,
            "ap50": self.ap50,
            "ap75": self.ap75,
            "pck": self.pck,
            "per_joint_pck": [None if np.isnan(v) else float(v) for v in self.per_joint],
            "num_samples": self.num_samples,
        }
