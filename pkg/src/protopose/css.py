"""Cross-type self-supervision: agreement filtering between the keypoint
head and the prototype-matching modality, confidence fusion, and the
pseudo-label loss applied to unlabeled datasets.

Pseudo-label targets are detached: gradients reach the unlabeled heads and
the embedding through the loss terms, never through target construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpec, ShapeError
from .losses import (
    JointPlan,
    LossValue,
    LossWeights,
    combine,
    joint_mse,
    plan_proto,
    proto_loss_from_plan,
)
from .protobank import PrototypeBank, match_embeddings
from .skeletons import Keypoint, KeypointSet, SkeletonRegistry, decode_heatmap, encode_heatmap


@dataclass(frozen=True)
class CssConfig:
    """Agreement gate and pseudo-label rendering parameters."""

    confidence_threshold: float = 0.25  # both modal confidences must exceed this
    distance_threshold: float = 2.1  # rms coordinate disagreement must stay below, px
    sigma: float = 2.0  # Gaussian width of re-rendered pseudo labels

    def __post_init__(self) -> None:
        if self.distance_threshold <= 0.0:
            raise InvalidSpec("distance_threshold must be positive")
        if self.sigma <= 0.0:
            raise InvalidSpec("sigma must be positive")


@dataclass(frozen=True)
class FusedKeypoint:
    """A pseudo-label keypoint fused from the two modalities."""

    joint: int
    x: float
    y: float
    weight: float  # share of the keypoint-head modality in the fusion


def rms_disagreement(a: Keypoint, b: Keypoint) -> float:
    dx = a.x - b.x
    dy = a.y - b.y
    return float(np.sqrt((dx * dx + dy * dy) / 2.0))


def filter_predictions(
    kpt: KeypointSet, emb: KeypointSet, cfg: CssConfig
) -> list[int]:
    """Indices where both modalities are confident and agree.

    Kept iff min(confidences) > confidence_threshold (strict) and the rms of
    the coordinate deltas < distance_threshold (strict).
    """
    if len(kpt) != len(emb):
        raise ShapeError(f"modalities disagree on joint count: {len(kpt)} vs {len(emb)}")
    kept = []
    for i, (a, b) in enumerate(zip(kpt.points, emb.points)):
        if min(a.confidence, b.confidence) > cfg.confidence_threshold and (
            rms_disagreement(a, b) < cfg.distance_threshold
        ):
            kept.append(i)
    return kept


def fuse_predictions(
    kpt: KeypointSet, emb: KeypointSet, kept: list[int]
) -> list[FusedKeypoint]:
    """Confidence-weighted fusion of the kept joints.

    The keypoint head contributes s = c_kpt / (c_kpt + c_emb); the fused
    coordinate lies between the two modal predictions componentwise.
    """
    fused = []
    for i in kept:
        a = kpt.points[i]
        b = emb.points[i]
        denom = a.confidence + b.confidence
        if denom <= 0.0:
            raise InvalidSpec("fusion needs positive confidences; filter first")
        s = a.confidence / denom
        fused.append(
            FusedKeypoint(joint=i, x=s * a.x + (1.0 - s) * b.x, y=s * a.y + (1.0 - s) * b.y, weight=s)
        )
    return fused


def reliable_heatmap(
    fused: list[FusedKeypoint], num_joints: int, H: int, W: int, cfg: CssConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Render the fused keypoints back into Gaussian target heatmaps.

    Returns (heatmap, mask): mask[j] is 1 for kept joints, and only those
    channels are rendered; everything else stays zero.
    """
    points = [Keypoint(x=0.0, y=0.0, visible=False) for _ in range(num_joints)]
    mask = np.zeros(num_joints, dtype=np.float64)
    for f in fused:
        if not (0 <= f.joint < num_joints):
            raise InvalidSpec(f"fused joint {f.joint} out of range")
        # Joints fused to an out-of-grid location cannot be rendered.
        if not (0.0 <= f.x <= W - 1 and 0.0 <= f.y <= H - 1):
            continue
        points[f.joint] = Keypoint(x=f.x, y=f.y, visible=True)
        mask[f.joint] = 1.0
    hm = encode_heatmap(KeypointSet(dataset_id=-1, points=points), H, W, cfg.sigma)
    return hm, mask


@dataclass
class CssDatasetPlan:
    """Frozen pseudo-label context for one unlabeled dataset."""

    dataset_id: int
    kept: list[int]
    fused: list[FusedKeypoint]
    target: np.ndarray  # (J_d, H, W) pseudo-label heatmap
    mask: np.ndarray  # (J_d,) kept-joint indicator
    proto_plans: list[JointPlan] = field(default_factory=list)


def plan_css(
    heads: dict[int, np.ndarray],
    proto_maps: dict[int, np.ndarray],
    emb: np.ndarray,
    bank: PrototypeBank,
    labeled_dataset: int,
    cfg: CssConfig,
    registry: SkeletonRegistry,
    kappa: float = 0.05,
    sinkhorn_iters: int = 3,
) -> list[CssDatasetPlan]:
    """Decode, filter, fuse and re-render pseudo labels for every unlabeled
    dataset present in `heads`. The labeled dataset is skipped."""
    plans: list[CssDatasetPlan] = []
    for d in sorted(heads.keys()):
        if d == labeled_dataset:
            continue
        if d not in proto_maps:
            raise InvalidSpec(f"missing prototype response map for dataset {d}")
        hm = heads[d]
        Jd, H, W = hm.shape
        kpt = decode_heatmap(hm, dataset_id=d)
        pm = decode_heatmap(proto_maps[d], dataset_id=d)
        # Embedding-modality confidence is the clipped cosine at the peak.
        for p in pm.points:
            p.confidence = max(0.0, p.confidence)
        kept = filter_predictions(kpt, pm, cfg)
        fused = fuse_predictions(kpt, pm, kept)
        target, mask = reliable_heatmap(fused, Jd, H, W, cfg)
        proto_plans = plan_proto(
            emb, bank, target, registry.offset(d), kappa=kappa, sinkhorn_iters=sinkhorn_iters
        )
        plans.append(
            CssDatasetPlan(
                dataset_id=d, kept=kept, fused=fused, target=target, mask=mask, proto_plans=proto_plans
            )
        )
    return plans


def css_loss_from_plans(
    heads: dict[int, np.ndarray],
    emb: np.ndarray,
    bank: PrototypeBank,
    plans: list[CssDatasetPlan],
    weights: LossWeights,
) -> LossValue:
    """zeta * [heatmap MSE vs pseudo labels + delta * prototype loss] summed
    over unlabeled datasets. Datasets with nothing kept contribute zero."""
    terms: list[tuple[float, LossValue]] = []
    hm_total = 0.0
    for plan in plans:
        d = plan.dataset_id
        mse = joint_mse(heads[d], plan.target, plan.mask)
        hm_total += mse.value
        terms.append((weights.zeta, LossValue(mse.value, {f"head.{d}": mse.grads["pred"]})))
        proto = proto_loss_from_plan(emb, bank, plan.proto_plans, weights)
        terms.append((weights.zeta * weights.delta, proto))
    if not terms:
        return LossValue(0.0, {}, {"css_hm": 0.0})
    out = combine(terms)
    out.parts["css_hm"] = hm_total
    return out


def css_loss(
    heads: dict[int, np.ndarray],
    proto_maps: dict[int, np.ndarray],
    emb: np.ndarray,
    bank: PrototypeBank,
    labeled_dataset: int,
    cfg: CssConfig,
    weights: LossWeights,
    registry: SkeletonRegistry,
    kappa: float = 0.05,
    sinkhorn_iters: int = 3,
) -> LossValue:
    """Self-supervision loss over the sample's unlabeled datasets."""
    plans = plan_css(
        heads, proto_maps, emb, bank, labeled_dataset, cfg, registry, kappa, sinkhorn_iters
    )
    return css_loss_from_plans(heads, emb, bank, plans, weights)


def proto_response_maps(
    bank: PrototypeBank,
    emb: np.ndarray,
    registry: SkeletonRegistry,
    dataset_ids,
) -> dict[int, np.ndarray]:
    """Best-prototype cosine response per dataset, used as the embedding
    modality's heatmaps."""
    return {d: match_embeddings(bank, emb, registry.joint_range(d)) for d in dataset_ids}
