"""Skeleton formats, the unified joint index space, and heatmap codecs.

Heatmaps are plain float64 arrays of shape (J_d, H, W); the rest of the
package follows the same array-first convention (embedding maps are
(F, H, W), prototype banks (J, M, F)).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import DuplicateSkeleton, InvalidSpec

# (H, W) target resolution used when a config does not override it.
DEFAULT_HEATMAP_SIZE = (64, 48)
# Ground-truth Gaussian width in heatmap pixels.
DEFAULT_SIGMA = 2.0


@dataclass(frozen=True)
class JointDef:
    """One named joint of a skeleton, with its keypoint-similarity falloff."""

    joint_id: int
    name: str
    oks_sigma: float


@dataclass(frozen=True)
class SkeletonSpec:
    """An ordered joint list for one dataset's skeleton format."""

    name: str
    joints: tuple[JointDef, ...]

    def __post_init__(self) -> None:
        if not self.name:
            raise InvalidSpec("skeleton name must be non-empty")
        if len(self.joints) == 0:
            raise InvalidSpec(f"skeleton {self.name!r} has no joints")
        ids = [j.joint_id for j in self.joints]
        if ids != list(range(len(self.joints))):
            raise InvalidSpec(f"skeleton {self.name!r} joint ids must be 0..J_d-1, got {ids}")
        names = [j.name for j in self.joints]
        if len(set(names)) != len(names):
            raise InvalidSpec(f"skeleton {self.name!r} has duplicate joint names")
        for j in self.joints:
            if not (j.oks_sigma > 0.0):
                raise InvalidSpec(f"joint {j.name!r} needs oks_sigma > 0, got {j.oks_sigma}")

    @property
    def num_joints(self) -> int:
        return len(self.joints)

    @property
    def oks_sigmas(self) -> np.ndarray:
        return np.array([j.oks_sigma for j in self.joints], dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "joints": [
                {"id": j.joint_id, "name": j.name, "oks_sigma": j.oks_sigma} for j in self.joints
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonSpec":
        joints = tuple(
            JointDef(joint_id=j["id"], name=j["name"], oks_sigma=j["oks_sigma"])
            for j in d["joints"]
        )
        return cls(name=d["name"], joints=joints)


def load_skeleton(path) -> SkeletonSpec:
    """Read a skeleton spec from its JSON file format."""
    with open(path, "r", encoding="utf-8") as fh:
        return SkeletonSpec.from_dict(json.load(fh))


def save_skeleton(spec: SkeletonSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


class SkeletonRegistry:
    """Assigns each registered skeleton a dataset id and a contiguous global
    joint range inside one shared index space."""

    def __init__(self) -> None:
        self.specs: list[SkeletonSpec] = []
        self._offsets: list[int] = []

    def register(self, spec: SkeletonSpec) -> int:
        if any(s.name == spec.name for s in self.specs):
            raise DuplicateSkeleton(f"skeleton {spec.name!r} already registered")
        dataset_id = len(self.specs)
        self._offsets.append(self.total_joints)
        self.specs.append(spec)
        return dataset_id

    @property
    def num_datasets(self) -> int:
        return len(self.specs)

    @property
    def total_joints(self) -> int:
        return sum(s.num_joints for s in self.specs)

    def spec(self, dataset_id: int) -> SkeletonSpec:
        return self.specs[dataset_id]

    def offset(self, dataset_id: int) -> int:
        return self._offsets[dataset_id]

    def joint_range(self, dataset_id: int) -> tuple[int, int]:
        """Half-open global index interval [start, stop) of one dataset."""
        start = self._offsets[dataset_id]
        return start, start + self.specs[dataset_id].num_joints

    def global_index(self, dataset_id: int, joint_id: int) -> int:
        spec = self.specs[dataset_id]
        if not (0 <= joint_id < spec.num_joints):
            raise IndexError(f"joint {joint_id} out of range for {spec.name!r}")
        return self._offsets[dataset_id] + joint_id

    def find_joint(self, global_index: int) -> tuple[int, int]:
        """Inverse of global_index: global index -> (dataset_id, joint_id)."""
        if not (0 <= global_index < self.total_joints):
            raise IndexError(f"global joint {global_index} out of range")
        for d in range(len(self.specs) - 1, -1, -1):
            if global_index >= self._offsets[d]:
                return d, global_index - self._offsets[d]
        raise IndexError(global_index)  # unreachable

    def name_of(self, dataset_id: int) -> str:
        return self.specs[dataset_id].name

    def dataset_id(self, name: str) -> int:
        for d, s in enumerate(self.specs):
            if s.name == name:
                return d
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"skeletons": [s.to_dict() for s in self.specs]}

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonRegistry":
        reg = cls()
        for sd in d["skeletons"]:
            reg.register(SkeletonSpec.from_dict(sd))
        return reg


@dataclass
class Keypoint:
    """One 2D keypoint in heatmap pixel coordinates."""

    x: float
    y: float
    confidence: float = 1.0
    visible: bool = True


@dataclass
class KeypointSet:
    """All keypoints of one skeleton instance. Length must equal the
    skeleton's joint count; dataset_id -1 means 'not attached to a dataset'."""

    dataset_id: int
    points: list[Keypoint]

    def __len__(self) -> int:
        return len(self.points)

    def coords(self) -> np.ndarray:
        return np.array([[p.x, p.y] for p in self.points], dtype=np.float64)

    def confidences(self) -> np.ndarray:
        return np.array([p.confidence for p in self.points], dtype=np.float64)

    def visibility(self) -> np.ndarray:
        return np.array([p.visible for p in self.points], dtype=bool)


@dataclass(frozen=True)
class ForegroundSample:
    """One strictly positive ground-truth pixel: (global joint, pixel, value)."""

    joint: int
    y: int
    x: int
    confidence: float


def encode_heatmap(
    keypoints: KeypointSet, H: int, W: int, sigma: float = DEFAULT_SIGMA
) -> np.ndarray:
    """Render ground-truth heatmaps, one channel per joint.

    Visible joints get a Gaussian centered at the continuous keypoint
    location, truncated to a (6*sigma+1)-wide window, rescaled so the nearest
    in-grid pixel reads exactly 1.0. Invisible joints give zero channels.
    """
    if sigma <= 0.0:
        raise InvalidSpec(f"sigma must be positive, got {sigma}")
    if H < 1 or W < 1:
        raise InvalidSpec(f"bad heatmap size {(H, W)}")
    n = len(keypoints)
    xs = np.empty(n, dtype=np.float64)
    ys = np.empty(n, dtype=np.float64)
    vis = np.empty(n, dtype=np.uint8)
    for i, p in enumerate(keypoints.points):
        xs[i] = p.x
        ys[i] = p.y
        vis[i] = 1 if p.visible else 0
    return _kernels.encode_gaussians(xs, ys, vis, H, W, sigma)


def decode_heatmap(hm: np.ndarray, dataset_id: int = -1) -> KeypointSet:
    """Per-channel argmax decode with quarter-pixel refinement.

    Ties resolve to the row-major smallest (y, x); the refinement shifts
    0.25 px toward the larger axis neighbor and is skipped at the border.
    Confidence is the raw peak value.
    """
    hm = np.asarray(hm, dtype=np.float64)
    if hm.ndim != 3:
        raise InvalidSpec(f"heatmap must be (J, H, W), got shape {hm.shape}")
    J, H, W = hm.shape
    if H < 3 or W < 3:
        raise InvalidSpec(f"decode needs H, W >= 3, got {(H, W)}")
    xs, ys, conf = _kernels.decode_peaks(np.ascontiguousarray(hm))
    points = [
        Keypoint(x=float(xs[j]), y=float(ys[j]), confidence=float(conf[j]), visible=True)
        for j in range(J)
    ]
    return KeypointSet(dataset_id=dataset_id, points=points)


def foreground_arrays(gt: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Strictly positive GT pixels as flat arrays (joints, ys, xs, confidences).

    Order is deterministic: joint-major, then row-major within a channel.
    """
    js, ys, xs = np.nonzero(gt > 0.0)
    return js.astype(np.int64), ys.astype(np.int64), xs.astype(np.int64), gt[js, ys, xs].astype(np.float64)


def foreground_samples(gt: np.ndarray, joint_offset: int = 0) -> list[ForegroundSample]:
    """Flatten strictly positive GT pixels into ForegroundSample records,
    shifting local joint ids by `joint_offset` into the global index space."""
    js, ys, xs, confs = foreground_arrays(np.asarray(gt, dtype=np.float64))
    return [
        ForegroundSample(joint=int(j) + joint_offset, y=int(y), x=int(x), confidence=float(c))
        for j, y, x, c in zip(js, ys, xs, confs)
    ]
