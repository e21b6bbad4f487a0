"""Prediction and evaluation on synthetic multi-skeleton data.

Checkpoints trained with the prototype bank predict through two
modalities per joint: the dataset's heatmap head, and the nearest-prototype
response field of the shared embedding. When the modalities agree within a
small radius their estimates fuse, weighted by relative confidence;
otherwise the more confident one wins. Head-only checkpoints predict from
the head alone. Transfer checkpoints with a cold head use the prototype
modality alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .metrics import EvalResult, average_precision, oks, pck_hits, per_joint_pck
from .protobank import PrototypeBank, match_embeddings
from .skeletons import SkeletonRegistry, decode_heatmap
from .synthdata import Sample, SkeletonFamily, family_coords, latent_scale
from .trainer import forward_embedding, forward_head

MODES = ("head", "fused", "proto")
AGREE_RADIUS = 2.1  # px, same gate the self-supervision filter uses


def _head_peaks(params: dict, features: np.ndarray, dataset_id: int):
    hm = forward_head(features, params, dataset_id)
    kps = decode_heatmap(hm, dataset_id)
    coords = kps.coords()
    confs = np.clip(kps.confidences(), 0.0, 1.0)
    return coords, confs


def _proto_peaks(params: dict, bank: PrototypeBank, registry: SkeletonRegistry,
                 features: np.ndarray, dataset_id: int):
    emb, _ = forward_embedding(features, params)
    sims = match_embeddings(bank, emb, registry.joint_range(dataset_id))
    kps = decode_heatmap(sims, dataset_id)
    coords = kps.coords()
    confs = np.maximum(kps.confidences(), 0.0)
    return coords, confs


def predict_keypoints(
    params: dict,
    bank: PrototypeBank | None,
    registry: SkeletonRegistry,
    features: np.ndarray,
    dataset_id: int,
    mode: str = "fused",
    agree_radius: float = AGREE_RADIUS,
) -> tuple[np.ndarray, np.ndarray]:
    """Predict (coords (J, 2), confidences (J,)) for one dataset's joints."""
    if mode not in MODES:
        raise ConfigError(f"unknown prediction mode {mode!r}")
    if mode == "head":
        return _head_peaks(params, features, dataset_id)
    if bank is None:
        raise ConfigError(f"mode {mode!r} needs a prototype bank")
    if mode == "proto":
        return _proto_peaks(params, bank, registry, features, dataset_id)

    kc, kconf = _head_peaks(params, features, dataset_id)
    pc, pconf = _proto_peaks(params, bank, registry, features, dataset_id)
    J = kc.shape[0]
    coords = np.zeros_like(kc)
    confs = np.zeros(J)
    for j in range(J):
        dx = kc[j, 0] - pc[j, 0]
        dy = kc[j, 1] - pc[j, 1]
        rms = np.sqrt(0.5 * (dx * dx + dy * dy))
        total = kconf[j] + pconf[j]
        if rms < agree_radius and total > 0.0:
            s = kconf[j] / total
            coords[j] = s * kc[j] + (1.0 - s) * pc[j]
            confs[j] = s * kconf[j] + (1.0 - s) * pconf[j]
        elif pconf[j] > kconf[j]:
            coords[j] = pc[j]
            confs[j] = pconf[j]
        else:
            coords[j] = kc[j]
            confs[j] = kconf[j]
    return coords, confs


def evaluate_family(
    params: dict,
    bank: PrototypeBank | None,
    registry: SkeletonRegistry,
    samples: list[Sample],
    dataset_id: int,
    mode: str = "fused",
    pck_radius: float = 0.1,
) -> EvalResult:
    """AP over the OKS sweep plus PCK on one family's own validation set."""
    spec = registry.spec(dataset_id)
    sigmas = spec.oks_sigmas
    preds, gts, viss, scales, scores, oks_vals = [], [], [], [], [], []
    for s in samples:
        coords, confs = predict_keypoints(params, bank, registry, s.features,
                                          dataset_id, mode)
        gt = s.keypoints.coords()
        vis = s.keypoints.visibility()
        if not vis.any():
            continue
        scale = latent_scale(s.latent_pose)
        preds.append(coords)
        gts.append(gt)
        viss.append(vis)
        scales.append(scale)
        scores.append(float(confs.mean()))
        # OKS scale is the squared object scale (px^2).
        oks_vals.append(oks(coords, gt, vis, scale * scale, sigmas))
    ap = average_precision(np.array(scores), np.array(oks_vals))
    hit = sum(int(pck_hits(p, g, v, s, pck_radius)[0].sum())
              for p, g, v, s in zip(preds, gts, viss, scales))
    tot = sum(int(v.sum()) for v in viss)
    return EvalResult(
        ap=ap["ap"],
        ap50=ap["ap50"],
        ap75=ap["ap75"],
        pck=hit / tot if tot else float("nan"),
        per_joint=per_joint_pck(preds, gts, viss, scales, pck_radius, spec.num_joints),
        num_samples=len(preds),
    )


def cross_skeleton_pck(
    params: dict,
    bank: PrototypeBank | None,
    registry: SkeletonRegistry,
    val_sets: dict[int, list[Sample]],
    families: dict[int, SkeletonFamily],
    mode: str = "fused",
    radius: float = 0.1,
) -> dict:
    """PCK of every family's predictions on every *other* family's images.

    The latent pose behind each validation image projects into any family,
    so family f's joints have ground truth on an image labeled for family
    d != f. Pooled over all such pairs; also reported per (image family,
    prediction family)."""
    pair_hits: dict[str, list[int]] = {}
    hit_total = 0
    vis_total = 0
    for d, samples in sorted(val_sets.items()):
        for f in sorted(families):
            if f == d:
                continue
            fam = families[f]
            h = t = 0
            for s in samples:
                coords, _ = predict_keypoints(params, bank, registry, s.features, f, mode)
                gt = family_coords(fam, s.latent_pose)
                vis = np.array([
                    0.0 <= x <= s.width - 1 and 0.0 <= y <= s.height - 1
                    for x, y in gt
                ])
                if not vis.any():
                    continue
                hits, counted = pck_hits(coords, gt, vis, latent_scale(s.latent_pose), radius)
                h += int(hits.sum())
                t += int(counted.sum())
            pair_hits[f"{registry.name_of(d)}->{registry.name_of(f)}"] = [h, t]
            hit_total += h
            vis_total += t
    pooled = hit_total / vis_total if vis_total else float("nan")
    return {
        "pck": pooled,
        "pairs": {k: (v[0] / v[1] if v[1] else float("nan")) for k, v in sorted(pair_hits.items())},
        "hits": hit_total,
        "visible": vis_total,
    }


@dataclass
class EvalSummary:
    families: dict[str, EvalResult]
    cross: dict
    mode: str

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "families": {k: v.to_dict() for k, v in sorted(self.families.items())},
            "cross_skeleton": {
                "pck": self.cross["pck"],
                "pairs": self.cross["pairs"],
            },
        }


def evaluate_model(
    params: dict,
    bank: PrototypeBank | None,
    registry: SkeletonRegistry,
    val_sets: dict[int, list[Sample]],
    families: dict[int, SkeletonFamily],
    mode: str = "fused",
    pck_radius: float = 0.1,
) -> EvalSummary:
    fam_results = {
        registry.name_of(d): evaluate_family(params, bank, registry, samples, d,
                                             mode, pck_radius)
        for d, samples in sorted(val_sets.items())
    }
    cross = cross_skeleton_pck(params, bank, registry, val_sets, families, mode, pck_radius)
    return EvalSummary(families=fam_results, cross=cross, mode=mode)
