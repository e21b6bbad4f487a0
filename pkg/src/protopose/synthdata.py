"""Synthetic multi-skeleton pose benchmark.

A hidden 12-joint canonical skeleton generates every figure; each dataset
family observes its own subset of the canonical joints (plus, for some
families, extra joints derived from them at fixed anatomical offsets), so
the families share an underlying body while disagreeing on format. Every
sample is labeled for exactly one family and carries the full latent pose
as hidden evaluation ground truth.

Rendered input features are deliberately weak: 8 per-pixel channels (bone
distance field, joint junction field, four orientation-selective bone
responses, two normalized coordinates), all bounded in [-1, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpec
from .skeletons import (
    DEFAULT_SIGMA,
    JointDef,
    Keypoint,
    KeypointSet,
    SkeletonSpec,
    encode_heatmap,
)
from .util import canonical_json, config_hash

FEATURE_CHANNELS = 8
SYNTH_OKS_SIGMA = 0.05

_BONE_FALLOFF = 0.9  # px, bone distance field Gaussian width
_JOINT_FALLOFF = 1.3  # px, junction field Gaussian width
_FILTER_ANGLES = (0.0, np.pi / 4.0, np.pi / 2.0, 3.0 * np.pi / 4.0)

_CANONICAL_JOINTS = (
    "pelvis",
    "chest",
    "head",
    "l_elbow",
    "l_hand",
    "r_elbow",
    "r_hand",
    "l_knee",
    "l_foot",
    "r_knee",
    "r_foot",
    "nose",
)

# (parent, child, (len_lo, len_hi) px, base angle rad, angle halfwidth rad).
# Angles are absolute world angles, y pointing down.
_CANONICAL_BONES = (
    (0, 1, (4.0, 5.5), -np.pi / 2.0, 0.18),
    (1, 2, (2.4, 3.2), -np.pi / 2.0, 0.22),
    (2, 11, (1.6, 2.4), -np.pi / 2.0 + 0.9, 0.35),
    (1, 3, (2.8, 4.0), 3.0 * np.pi / 4.0, 0.30),
    (3, 4, (2.4, 3.6), 3.0 * np.pi / 4.0, 0.45),
    (1, 5, (2.8, 4.0), np.pi / 4.0, 0.30),
    (5, 6, (2.4, 3.6), np.pi / 4.0, 0.45),
    (0, 7, (3.2, 4.6), np.pi / 2.0 + 0.30, 0.25),
    (7, 8, (2.8, 4.2), np.pi / 2.0 + 0.18, 0.35),
    (0, 9, (3.2, 4.6), np.pi / 2.0 - 0.30, 0.25),
    (9, 10, (2.8, 4.2), np.pi / 2.0 - 0.18, 0.35),
)

# Observed canonical joints per family, in canonical order.
_FAMILY_CANONICAL = {
    "synth_a": (0, 1, 2, 3, 4, 5, 6, 7, 9),
    "synth_b": (0, 1, 2, 4, 6, 8, 10, 11),
    "synth_c": (0, 1, 3, 5, 7, 8, 9, 10),
    "synth_d": (0, 2, 4, 6, 8, 10),
}

# Family-only joints: name -> (base canonical joint, reference canonical
# joint, scale). Position = base + scale * (base - reference).
_FAMILY_DERIVED = {
    "synth_a": (),
    "synth_b": (),
    "synth_c": (("snout", 2, 1, 0.6), ("tail", 0, 1, 0.55)),
    "synth_d": (("crown", 2, 1, 0.8),),
}

_FAMILY_ORDER = ("synth_a", "synth_b", "synth_c", "synth_d")
_SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


@dataclass(frozen=True)
class Bone:
    parent: int
    child: int
    length_range: tuple[float, float]
    angle_range: tuple[float, float]


@dataclass(frozen=True)
class CanonicalSkeleton:
    """The hidden skeleton whose forward kinematics generate every pose."""

    joint_names: tuple[str, ...]
    bones: tuple[Bone, ...]

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)


@dataclass(frozen=True)
class SkeletonFamily:
    """One dataset family: a skeleton spec plus its mapping onto the
    canonical skeleton.

    canonical_map[i] is the canonical joint observed by family joint i, or
    None for family-only joints; `derived` holds their construction rules.
    bone_graph is the contracted canonical tree over family joints (ranges
    are loose envelopes, informational only).
    """

    name: str
    stream_id: int
    spec: SkeletonSpec
    canonical_map: tuple
    derived: dict = field(default_factory=dict)
    bone_graph: tuple = ()
    # Per canonical bone: (length scale, angle shift, range narrowing).
    # Families render the same body plan but pose and proportion it
    # differently, so labels do not transfer across families for free.
    pose_prior: tuple = ()

    @property
    def num_joints(self) -> int:
        return self.spec.num_joints

    def overlap_map(self) -> dict[int, int]:
        """family joint index -> canonical joint index, observed joints only."""
        return {i: c for i, c in enumerate(self.canonical_map) if c is not None}


@dataclass(frozen=True)
class SynthFamilies:
    canonical: CanonicalSkeleton
    train_families: tuple[SkeletonFamily, ...]
    transfer_family: SkeletonFamily

    def all_families(self) -> tuple[SkeletonFamily, ...]:
        return self.train_families + (self.transfer_family,)


def _contracted_tree(canonical: CanonicalSkeleton, family_joints, derived) -> tuple:
    """Contract the canonical tree onto the observed joints; derived joints
    hang off the nearest observed ancestor of their base joint."""
    parent_of = {c.child: c.parent for c in canonical.bones}
    observed = {c: i for i, c in enumerate(family_joints)}

    def nearest_observed(c):
        while c is not None and c not in observed:
            c = parent_of.get(c)
        return c

    edges = []
    for i, c in enumerate(family_joints):
        if i == 0:
            continue
        anc = nearest_observed(parent_of.get(c))
        if anc is None:
            anc = family_joints[0]
        edges.append((observed[anc], i, (0.0, 20.0), (-np.pi, np.pi)))
    base = len(family_joints)
    for k, (_, b, _, _) in enumerate(derived):
        anc = nearest_observed(b)
        if anc is None:
            anc = family_joints[0]
        edges.append((observed[anc], base + k, (0.0, 20.0), (-np.pi, np.pi)))
    return tuple(edges)


def make_families(seed: int) -> SynthFamilies:
    """Build the three training families and the held-out transfer family.

    The seed applies a small deterministic jitter to the canonical bone base
    angles so different seeds give genuinely different (but equally shaped)
    benchmarks. Bitwise stable for a fixed seed.
    """
    rng = np.random.default_rng([seed, 0x5CE1E])
    bones = []
    for parent, child, lr, base, hw in _CANONICAL_BONES:
        jitter = rng.uniform(-0.04, 0.04)
        a = base + jitter
        bones.append(Bone(parent, child, lr, (a - hw, a + hw)))
    canonical = CanonicalSkeleton(joint_names=_CANONICAL_JOINTS, bones=tuple(bones))

    priors = []
    for _ in _FAMILY_ORDER:
        prior = tuple(
            (
                float(rng.uniform(0.8, 1.25)),  # bone length scale
                float(rng.uniform(-0.55, 0.55)),  # angle shift
                float(rng.uniform(0.45, 0.8)),  # angle range narrowing
            )
            for _ in _CANONICAL_BONES
        )
        priors.append(prior)

    families = []
    for stream_id, name in enumerate(_FAMILY_ORDER):
        observed = _FAMILY_CANONICAL[name]
        derived_defs = _FAMILY_DERIVED[name]
        joints = []
        cmap: list = []
        derived: dict = {}
        for i, c in enumerate(observed):
            joints.append(JointDef(joint_id=i, name=_CANONICAL_JOINTS[c], oks_sigma=SYNTH_OKS_SIGMA))
            cmap.append(c)
        for k, (jname, bidx, ridx, scale) in enumerate(derived_defs):
            idx = len(observed) + k
            joints.append(JointDef(joint_id=idx, name=jname, oks_sigma=SYNTH_OKS_SIGMA))
            cmap.append(None)
            derived[idx] = (bidx, ridx, scale)
        spec = SkeletonSpec(name=name, joints=tuple(joints))
        families.append(
            SkeletonFamily(
                name=name,
                stream_id=stream_id,
                spec=spec,
                canonical_map=tuple(cmap),
                derived=derived,
                bone_graph=_contracted_tree(canonical, observed, derived_defs),
                pose_prior=priors[stream_id],
            )
        )
    return SynthFamilies(
        canonical=canonical,
        train_families=tuple(families[:3]),
        transfer_family=families[3],
    )


def sample_pose(canonical: CanonicalSkeleton, rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    """Forward kinematics draw of one canonical pose.

    Root lands uniformly in the central 60% of the pixel-center span; each
    bone draws its length and world angle uniformly from its range. Draw
    order is fixed (root x, root y, then per bone length, angle).
    """
    pose = np.zeros((canonical.num_joints, 2), dtype=np.float64)
    x_lo, x_hi = 0.2 * (W - 1), 0.8 * (W - 1)
    y_lo, y_hi = 0.2 * (H - 1), 0.8 * (H - 1)
    pose[0, 0] = rng.uniform(x_lo, x_hi)
    pose[0, 1] = rng.uniform(y_lo, y_hi)
    for b in canonical.bones:
        length = rng.uniform(*b.length_range)
        angle = rng.uniform(*b.angle_range)
        pose[b.child, 0] = pose[b.parent, 0] + length * np.cos(angle)
        pose[b.child, 1] = pose[b.parent, 1] + length * np.sin(angle)
    return pose


def sample_family_pose(
    canonical: CanonicalSkeleton,
    family: SkeletonFamily,
    rng: np.random.Generator,
    H: int,
    W: int,
) -> np.ndarray:
    """Pose draw under one family's prior (its proportions and posture).

    Same draw order as sample_pose; a family without a prior reduces to it.
    """
    if not family.pose_prior:
        return sample_pose(canonical, rng, H, W)
    pose = np.zeros((canonical.num_joints, 2), dtype=np.float64)
    x_lo, x_hi = 0.2 * (W - 1), 0.8 * (W - 1)
    y_lo, y_hi = 0.2 * (H - 1), 0.8 * (H - 1)
    pose[0, 0] = rng.uniform(x_lo, x_hi)
    pose[0, 1] = rng.uniform(y_lo, y_hi)
    for b, (lscale, shift, narrow) in zip(canonical.bones, family.pose_prior):
        length = rng.uniform(*b.length_range) * lscale
        a_lo, a_hi = b.angle_range
        center = 0.5 * (a_lo + a_hi) + shift
        half = 0.5 * (a_hi - a_lo) * narrow
        angle = rng.uniform(center - half, center + half)
        pose[b.child, 0] = pose[b.parent, 0] + length * np.cos(angle)
        pose[b.child, 1] = pose[b.parent, 1] + length * np.sin(angle)
    return pose


def family_coords(family: SkeletonFamily, latent_pose: np.ndarray) -> np.ndarray:
    """Family keypoint coordinates derived from a canonical pose. Observed
    joints copy the canonical coordinates exactly; family-only joints
    extrapolate from their base joint."""
    coords = np.zeros((family.num_joints, 2), dtype=np.float64)
    for i, c in enumerate(family.canonical_map):
        if c is not None:
            coords[i] = latent_pose[c]
        else:
            base, ref, scale = family.derived[i]
            coords[i] = latent_pose[base] + scale * (latent_pose[base] - latent_pose[ref])
    return coords


def _segment_distance(px, py, ax, ay, bx, by):
    abx = bx - ax
    aby = by - ay
    L2 = abx * abx + aby * aby
    if L2 < 1e-12:
        return np.sqrt((px - ax) ** 2 + (py - ay) ** 2)
    t = np.clip(((px - ax) * abx + (py - ay) * aby) / L2, 0.0, 1.0)
    cx = ax + t * abx
    cy = ay + t * aby
    return np.sqrt((px - cx) ** 2 + (py - cy) ** 2)


def render(canonical: CanonicalSkeleton, pose: np.ndarray, H: int, W: int) -> np.ndarray:
    """Render the 8 per-pixel feature channels for one pose. All values lie
    in [-1, 1]; with no bones only the coordinate channels are nonzero."""
    out = np.zeros((FEATURE_CHANNELS, H, W), dtype=np.float64)
    py, px = np.mgrid[0:H, 0:W].astype(np.float64)
    bone_den = 2.0 * _BONE_FALLOFF * _BONE_FALLOFF
    joint_den = 2.0 * _JOINT_FALLOFF * _JOINT_FALLOFF
    for b in canonical.bones:
        ax, ay = pose[b.parent]
        bx, by = pose[b.child]
        d = _segment_distance(px, py, ax, ay, bx, by)
        resp = np.exp(-(d * d) / bone_den)
        np.maximum(out[0], resp, out=out[0])
        theta = np.arctan2(by - ay, bx - ax)
        for k, phi in enumerate(_FILTER_ANGLES):
            w = np.cos(theta - phi) ** 2
            np.maximum(out[2 + k], w * resp, out=out[2 + k])
    for j in range(pose.shape[0]):
        jx, jy = pose[j]
        d2 = (px - jx) ** 2 + (py - jy) ** 2
        np.maximum(out[1], np.exp(-d2 / joint_den), out=out[1])
    out[6] = 2.0 * px / (W - 1) - 1.0
    out[7] = 2.0 * py / (H - 1) - 1.0
    return out


@dataclass
class Sample:
    """One rendered figure labeled for exactly one family."""

    features: np.ndarray  # (C, H, W) float32
    labeled_dataset: int  # registry dataset id that carries GT
    keypoints: KeypointSet  # labeled family coordinates + visibility
    latent_pose: np.ndarray  # (12, 2) canonical coordinates, hidden GT

    @property
    def height(self) -> int:
        return self.features.shape[1]

    @property
    def width(self) -> int:
        return self.features.shape[2]

    def gt_heatmap(self, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
        return encode_heatmap(self.keypoints, self.height, self.width, sigma)

    @property
    def gt(self) -> np.ndarray:
        return self.gt_heatmap()


def _keypoints_from_coords(coords: np.ndarray, dataset_id: int, H: int, W: int) -> KeypointSet:
    points = []
    for x, y in coords:
        visible = bool(0.0 <= x <= W - 1 and 0.0 <= y <= H - 1)
        points.append(Keypoint(x=float(x), y=float(y), confidence=1.0, visible=visible))
    return KeypointSet(dataset_id=dataset_id, points=points)


def dataset(
    canonical: CanonicalSkeleton,
    family: SkeletonFamily,
    dataset_id: int,
    n: int,
    split: str,
    seed: int,
    H: int = 32,
    W: int = 32,
) -> list[Sample]:
    """Generate one split of one family's dataset.

    RNG streams are disjoint across (seed, family, split): each triple gets
    its own SeedSequence, so train and val never share state.
    """
    if split not in _SPLIT_CODES:
        raise InvalidSpec(f"split must be one of {sorted(_SPLIT_CODES)}, got {split!r}")
    if n < 1:
        raise InvalidSpec(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(
        np.random.SeedSequence([seed, family.stream_id, _SPLIT_CODES[split], 0x5A11AD])
    )
    samples = []
    for _ in range(n):
        pose = sample_family_pose(canonical, family, rng, H, W)
        features = render(canonical, pose, H, W).astype(np.float32)
        coords = family_coords(family, pose)
        samples.append(
            Sample(
                features=features,
                labeled_dataset=dataset_id,
                keypoints=_keypoints_from_coords(coords, dataset_id, H, W),
                latent_pose=pose,
            )
        )
    return samples


def latent_scale(latent_pose: np.ndarray) -> float:
    """Reference scale of a figure: its latent bounding-box diagonal."""
    spans = latent_pose.max(axis=0) - latent_pose.min(axis=0)
    return float(np.sqrt((spans * spans).sum()))


# --- optional on-disk cache ------------------------------------------------

_CACHE_MAGIC = b"PPDS"


def _cache_key(
    family: SkeletonFamily, dataset_id: int, n: int, split: str, seed: int, H: int, W: int
) -> str:
    return config_hash(
        {
            "family": family.spec.to_dict(),
            "stream": family.stream_id,
            "dataset_id": dataset_id,
            "n": n,
            "split": split,
            "seed": seed,
            "H": H,
            "W": W,
        }
    )


def save_dataset_cache(samples: list[Sample], path, key: str) -> None:
    """Binary cache: magic, key hash, shapes, then raw sample arrays."""
    n = len(samples)
    if n == 0:
        raise InvalidSpec("refusing to cache an empty dataset")
    C, H, W = samples[0].features.shape
    Jd = len(samples[0].keypoints)
    feats = np.stack([s.features for s in samples]).astype("<f4")
    coords = np.stack([s.keypoints.coords() for s in samples]).astype("<f8")
    vis = np.stack([s.keypoints.visibility() for s in samples]).astype(np.uint8)
    latent = np.stack([s.latent_pose for s in samples]).astype("<f8")
    labeled = samples[0].labeled_dataset
    header = canonical_json(
        {"key": key, "n": n, "C": C, "H": H, "W": W, "J": Jd, "labeled": labeled}
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC + struct.pack("<I", len(header)) + header)
        fh.write(feats.tobytes())
        fh.write(coords.tobytes())
        fh.write(vis.tobytes())
        fh.write(latent.tobytes())


def load_dataset_cache(path, key: str) -> list[Sample] | None:
    """Load a cached split; returns None on any mismatch (treat as miss)."""
    import json as _json

    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError:
        return None
    if len(data) < 8 or data[:4] != _CACHE_MAGIC:
        return None
    (hlen,) = struct.unpack("<I", data[4:8])
    try:
        header = _json.loads(data[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, ValueError):
        return None
    if header.get("key") != key:
        return None
    n, C, H, W, Jd = header["n"], header["C"], header["H"], header["W"], header["J"]
    off = 8 + hlen
    sizes = [n * C * H * W * 4, n * Jd * 2 * 8, n * Jd, n * 12 * 2 * 8]
    if len(data) != off + sum(sizes):
        return None
    feats = np.frombuffer(data, dtype="<f4", count=n * C * H * W, offset=off).reshape(n, C, H, W)
    off += sizes[0]
    coords = np.frombuffer(data, dtype="<f8", count=n * Jd * 2, offset=off).reshape(n, Jd, 2)
    off += sizes[1]
    vis = np.frombuffer(data, dtype=np.uint8, count=n * Jd, offset=off).reshape(n, Jd)
    off += sizes[2]
    latent = np.frombuffer(data, dtype="<f8", count=n * 24, offset=off).reshape(n, 12, 2)
    samples = []
    for i in range(n):
        points = [
            Keypoint(x=float(coords[i, j, 0]), y=float(coords[i, j, 1]), visible=bool(vis[i, j]))
            for j in range(Jd)
        ]
        samples.append(
            Sample(
                features=feats[i].copy(),
                labeled_dataset=header["labeled"],
                keypoints=KeypointSet(dataset_id=header["labeled"], points=points),
                latent_pose=latent[i].copy(),
            )
        )
    return samples


def dataset_cached(
    canonical: CanonicalSkeleton,
    family: SkeletonFamily,
    dataset_id: int,
    n: int,
    split: str,
    seed: int,
    H: int = 32,
    W: int = 32,
    cache_dir=None,
) -> list[Sample]:
    """dataset() with an optional on-disk cache keyed by (seed, config)."""
    if cache_dir is None:
        return dataset(canonical, family, dataset_id, n, split, seed, H, W)
    import os

    key = _cache_key(family, dataset_id, n, split, seed, H, W)
    path = os.path.join(cache_dir, f"{family.name}_{split}_{key[:16]}.ppds")
    cached = load_dataset_cache(path, key)
    if cached is not None:
        return cached
    samples = dataset(canonical, family, dataset_id, n, split, seed, H, W)
    os.makedirs(cache_dir, exist_ok=True)
    save_dataset_cache(samples, path, key)
    return samples
