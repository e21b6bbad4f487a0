"""Nonparametric prototype bank over the unified joint space.

The bank holds M unit-norm prototype vectors per global joint, is matched
against pixel embeddings by cosine similarity, assigned with balanced
Sinkhorn scaling, and updated by gradient-free momentum averaging. A one-off
spherical k-means over all prototypes drives cross-dataset contrastive
batches.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import CheckpointError, InvalidSpec, NumericalError, ShapeError
from .skeletons import SkeletonRegistry

BANK_MAGIC = b"PBNK"
BANK_VERSION = 1

# Truncated-normal init: mean 0, std 0.02, truncated at +/- 2 std.
INIT_STD = 0.02
INIT_TRUNC = 2.0


@dataclass
class PrototypeBank:
    """(J, M, F) array of unit-norm prototype rows."""

    P: np.ndarray

    def __post_init__(self) -> None:
        self.P = np.asarray(self.P, dtype=np.float64)
        if self.P.ndim != 3:
            raise ShapeError(f"bank must be (J, M, F), got shape {self.P.shape}")

    @property
    def J(self) -> int:
        return self.P.shape[0]

    @property
    def M(self) -> int:
        return self.P.shape[1]

    @property
    def F(self) -> int:
        return self.P.shape[2]

    def validate(self, atol: float = 1e-6) -> None:
        if not np.isfinite(self.P).all():
            raise InvalidSpec("bank contains non-finite values")
        norms = np.linalg.norm(self.P, axis=2)
        if np.abs(norms - 1.0).max() > atol:
            raise InvalidSpec(f"bank rows must be unit norm, worst |n-1| = {np.abs(norms-1).max():.3g}")

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(self.P.copy())


@dataclass
class Assignment:
    """Balanced assignment of N pixel embeddings to M prototypes.

    Q columns sum to 1 and rows to N/M (up to the solver tolerance); targets
    are the per-column argmax with ties to the smallest prototype index;
    weights are the full soft plan Q (used as update mass).
    """

    Q: np.ndarray
    targets: np.ndarray
    iterations: int

    @property
    def weights(self) -> np.ndarray:
        return self.Q


def _truncated_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    vals = rng.normal(0.0, INIT_STD, size=shape)
    lim = INIT_TRUNC * INIT_STD
    bad = np.abs(vals) > lim
    while bad.any():
        vals[bad] = rng.normal(0.0, INIT_STD, size=int(bad.sum()))
        bad = np.abs(vals) > lim
    return vals


def init_bank(J: int, M: int, F: int, seed: int) -> PrototypeBank:
    """Seeded truncated-normal init followed by per-row L2 normalization."""
    if J < 1 or M < 1 or F < 1:
        raise InvalidSpec(f"bank dims must be positive, got J={J} M={M} F={F}")
    rng = np.random.default_rng(seed)
    P = _truncated_normal(rng, (J, M, F))
    P /= np.linalg.norm(P, axis=2, keepdims=True)
    return PrototypeBank(P)


def match_embeddings(
    bank: PrototypeBank, emb: np.ndarray, joint_range: tuple[int, int]
) -> np.ndarray:
    """Best-prototype cosine response per joint and pixel.

    emb is a unit-norm (F, H, W) map; the result is (stop-start, H, W) with
    entry [j, y, x] = max over the joint's M prototypes of the dot product.
    """
    start, stop = joint_range
    if not (0 <= start < stop <= bank.J):
        raise InvalidSpec(f"joint range {joint_range} outside bank with J={bank.J}")
    F, H, W = emb.shape
    if F != bank.F:
        raise ShapeError(f"embedding dim {F} does not match bank F={bank.F}")
    P = bank.P[start:stop]
    sims = P.reshape(-1, F) @ emb.reshape(F, H * W)
    return sims.reshape(stop - start, bank.M, H * W).max(axis=1).reshape(stop - start, H, W)


def sinkhorn_assign(
    logits: np.ndarray, kappa: float = 0.05, iters: int = 3, tol: float = 0.0
) -> Assignment:
    """Balanced assignment Q = Diag(u) exp(logits/kappa) Diag(v).

    Columns (pixels) receive total mass 1, rows (prototypes) N/M. With
    tol > 0 sweeps continue until the row-marginal violation drops below tol
    or `iters` is hit; tol <= 0 runs exactly `iters` sweeps.
    """
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] < 1 or logits.shape[1] < 1:
        raise ShapeError(f"logits must be (M, N) with M, N >= 1, got {logits.shape}")
    if not np.isfinite(logits).all():
        raise NumericalError("logits contain non-finite values")
    if kappa <= 0.0:
        raise InvalidSpec(f"kappa must be positive, got {kappa}")
    if iters < 1:
        raise InvalidSpec(f"iters must be >= 1, got {iters}")
    Q, used = _kernels.sinkhorn(logits, kappa, iters, tol)
    targets = np.argmax(Q, axis=0).astype(np.int64)
    return Assignment(Q=Q, targets=targets, iterations=int(used))


def momentum_update(
    bank: PrototypeBank,
    joint: int,
    assignment: Assignment,
    embeddings: np.ndarray,
    momentum: float = 0.999,
) -> None:
    """In-place momentum update of one joint's prototypes.

    P <- momentum * P + (1 - momentum) * (1/N) * sum_n Q[m, n] * e_n, then
    L2 renormalized. N = 0 columns is a no-op, as is momentum exactly 1
    (skipping the renormalization so the bank stays bitwise unchanged).
    Gradients never flow here; inputs are treated as constants.
    """
    if not (0 <= joint < bank.J):
        raise IndexError(f"joint {joint} out of range for bank J={bank.J}")
    if not (0.0 <= momentum <= 1.0):
        raise InvalidSpec(f"momentum must be in [0, 1], got {momentum}")
    Q = assignment.Q
    N = Q.shape[1]
    if N == 0:
        return
    if Q.shape[0] != bank.M:
        raise ShapeError(f"assignment has {Q.shape[0]} rows, bank M={bank.M}")
    if embeddings.shape != (bank.F, N):
        raise ShapeError(f"embeddings must be (F, N) = {(bank.F, N)}, got {embeddings.shape}")
    if momentum == 1.0:
        return
    mean = embeddings @ Q.T / N  # (F, M)
    P = momentum * bank.P[joint] + (1.0 - momentum) * mean.T
    norms = np.linalg.norm(P, axis=1, keepdims=True)
    # A row can only collapse at momentum ~ 0 with near-zero assigned mass;
    # keep the previous direction there so rows stay unit-norm.
    degenerate = norms[:, 0] < 1e-12
    np.maximum(norms, 1e-12, out=norms)
    fresh = P / norms
    fresh[degenerate] = bank.P[joint][degenerate]
    bank.P[joint] = fresh


@dataclass
class ClusterIndex:
    """Result of the one-off spherical k-means over all J*M prototypes.

    assignment[i] is the cluster of flat prototype i (= j * M + m);
    centroids are unit norm.
    """

    K: int
    assignment: np.ndarray
    centroids: np.ndarray

    def members(self, k: int) -> np.ndarray:
        return np.nonzero(self.assignment == k)[0]

    def member_table(self, M: int) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
        """Per-cluster member joints/protos plus the (K, J) joint presence
        mask, cached: the assignment never changes after clustering."""
        cached = getattr(self, "_member_table", None)
        if cached is not None and cached[0] == M:
            return cached[1]
        J = self.assignment.shape[0] // M
        order = np.argsort(self.assignment, kind="stable")
        splits = np.searchsorted(self.assignment[order], np.arange(self.K + 1))
        mj = [order[splits[k] : splits[k + 1]] // M for k in range(self.K)]
        mm = [order[splits[k] : splits[k + 1]] % M for k in range(self.K)]
        presence = np.zeros((self.K, J), dtype=bool)
        presence[self.assignment, np.repeat(np.arange(J), M)] = True
        table = (mj, mm, presence)
        self._member_table = (M, table)
        return table


def kmeans_clusters(
    bank: PrototypeBank, K: int, seed: int, max_iters: int = 100
) -> ClusterIndex:
    """Spherical k-means (cosine similarity) with k-means++ seeding.

    Centroids are renormalized means; an emptied cluster is re-seeded from
    the point farthest from its current centroid. Deterministic for a fixed
    seed: ties in seeding, assignment and re-seeding all break to the
    smallest index.
    """
    X = bank.P.reshape(-1, bank.F)
    n = X.shape[0]
    if not (1 <= K <= n):
        raise InvalidSpec(f"K must be in [1, J*M] = [1, {n}], got {K}")

    rng = np.random.default_rng(seed)
    # k-means++ seeding on squared Euclidean distance (= 2 - 2 cos for unit vectors).
    centroids = np.empty((K, bank.F), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = X[first]
    d2 = np.maximum(2.0 - 2.0 * (X @ centroids[0]), 0.0)
    for k in range(1, K):
        total = d2.sum()
        if total <= 0.0:
            # Every point coincides with a chosen centroid; any pick keeps
            # the objective at zero.
            centroids[k] = X[k % n]
        else:
            u = rng.random()
            idx = int(np.searchsorted(np.cumsum(d2 / total), u, side="right"))
            idx = min(idx, n - 1)
            centroids[k] = X[idx]
        d2 = np.minimum(d2, np.maximum(2.0 - 2.0 * (X @ centroids[k]), 0.0))

    assign = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iters):
        sims = X @ centroids.T  # (n, K)
        new_assign = np.argmax(sims, axis=1).astype(np.int64)
        # Re-seed empty clusters from the farthest point.
        counts = np.bincount(new_assign, minlength=K)
        for k in np.nonzero(counts == 0)[0]:
            dist = 2.0 - 2.0 * sims[np.arange(n), new_assign]
            far = int(np.argmax(dist))
            new_assign[far] = k
            counts = np.bincount(new_assign, minlength=K)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for k in range(K):
            members = X[assign == k]
            c = members.mean(axis=0)
            norm = np.linalg.norm(c)
            if norm > 1e-12:
                centroids[k] = c / norm
    return ClusterIndex(K=K, assignment=assign, centroids=centroids)


def kmeans_objective(bank: PrototypeBank, index: ClusterIndex) -> float:
    """Sum of within-cluster squared distances (monotone under Lloyd steps)."""
    X = bank.P.reshape(-1, bank.F)
    diffs = X - index.centroids[index.assignment]
    return float((diffs * diffs).sum())


@dataclass
class CrossBatch:
    """One cluster's cross-dataset contrastive batch.

    logits[i, n] is the cosine between selected pixel n's embedding and the
    cluster's i-th member prototype; targets[n] indexes the member list.
    ys/xs locate the selected pixels so gradients can be scattered back.
    """

    cluster: int
    member_joints: np.ndarray
    member_protos: np.ndarray
    ys: np.ndarray
    xs: np.ndarray
    confidences: np.ndarray
    targets: np.ndarray


def cross_batches_from_arrays(
    clusters: ClusterIndex,
    bank: PrototypeBank,
    emb: np.ndarray,
    joints: np.ndarray,
    ys: np.ndarray,
    xs: np.ndarray,
    confs: np.ndarray,
    top_r: int = 16,
) -> list[CrossBatch]:
    """Array-based core of cross_dataset_batch (hot path)."""
    if top_r < 1:
        raise InvalidSpec(f"top_r must be >= 1, got {top_r}")
    out: list[CrossBatch] = []
    if joints.shape[0] == 0:
        return out
    E = emb[:, ys, xs]  # (F, N) pixel embeddings
    cent_sims = clusters.centroids @ E  # (K, N)
    members_j, members_m, joint_in_cluster = clusters.member_table(bank.M)
    cand_mask = joint_in_cluster[:, joints]  # (K, N)
    # Rank every cluster's candidates at once: non-candidates sink to -inf,
    # and the stable sort keeps ties in sample order.
    masked = np.where(cand_mask, cent_sims, -np.inf)
    order = np.argsort(-masked, axis=1, kind="stable")
    counts = np.minimum(cand_mask.sum(axis=1), top_r)
    for k in range(clusters.K):
        mj = members_j[k]
        if mj.size == 0 or counts[k] == 0:
            continue
        mm = members_m[k]
        sel = order[k, : counts[k]]
        P_mem = bank.P[mj, mm]  # (|c|, F)
        lg = P_mem @ E[:, sel]  # (|c|, R)
        # Target = best member prototype of the pixel's own joint; rows of
        # other joints are masked out. argmax ties keep the smallest row.
        own = mj[:, None] == joints[sel][None, :]
        targets = np.argmax(np.where(own, lg, -np.inf), axis=0).astype(np.int64)
        out.append(
            CrossBatch(
                cluster=int(k),
                member_joints=mj,
                member_protos=mm,
                ys=ys[sel],
                xs=xs[sel],
                confidences=confs[sel],
                targets=targets,
            )
        )
    return out


def cross_dataset_batch(
    clusters: ClusterIndex,
    bank: PrototypeBank,
    emb: np.ndarray,
    gt_samples,
    top_r: int = 16,
) -> list[CrossBatch]:
    """Build per-cluster contrastive batches across datasets.

    For each cluster: take the top_r foreground pixels whose embeddings are
    nearest the centroid (skipping pixels whose GT joint has no prototype in
    the cluster), score them against the cluster's member prototypes, and
    target the nearest member prototype of each pixel's own joint.
    """
    joints = np.array([s.joint for s in gt_samples], dtype=np.int64)
    ys = np.array([s.y for s in gt_samples], dtype=np.int64)
    xs = np.array([s.x for s in gt_samples], dtype=np.int64)
    confs = np.array([s.confidence for s in gt_samples], dtype=np.float64)
    return cross_batches_from_arrays(clusters, bank, emb, joints, ys, xs, confs, top_r)


def bank_to_bytes(bank: PrototypeBank) -> bytes:
    """Serialize to the PBNK container: magic, version, J, M, F (u32 LE),
    row-major float32 payload, CRC32 of the payload."""
    payload = np.ascontiguousarray(bank.P, dtype="<f4").tobytes()
    header = BANK_MAGIC + struct.pack("<IIII", BANK_VERSION, bank.J, bank.M, bank.F)
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def bank_from_bytes(data: bytes) -> PrototypeBank:
    if len(data) < 24 or data[:4] != BANK_MAGIC:
        raise CheckpointError("not a PBNK bank (bad magic or truncated)")
    version, J, M, F = struct.unpack("<IIII", data[4:20])
    if version != BANK_VERSION:
        raise CheckpointError(f"unsupported bank version {version}")
    n = J * M * F * 4
    if len(data) != 20 + n + 4:
        raise CheckpointError("bank payload size mismatch")
    payload = data[20 : 20 + n]
    (crc,) = struct.unpack("<I", data[20 + n :])
    if zlib.crc32(payload) != crc:
        raise CheckpointError("bank payload CRC mismatch")
    P = np.frombuffer(payload, dtype="<f4").reshape(J, M, F).astype(np.float64)
    return PrototypeBank(P)


def save_bank(bank: PrototypeBank, path, registry: SkeletonRegistry | None = None) -> None:
    """Write the PBNK file plus a JSON sidecar mapping global joint indices
    to dataset and joint names (when a registry is provided)."""
    with open(path, "wb") as fh:
        fh.write(bank_to_bytes(bank))
    if registry is not None:
        side = []
        for j in range(bank.J):
            d, local = registry.find_joint(j)
            side.append(
                {
                    "global_index": j,
                    "dataset": registry.name_of(d),
                    "joint": registry.spec(d).joints[local].name,
                }
            )
        with open(str(path) + ".json", "w", encoding="utf-8") as fh:
            json.dump({"joints": side}, fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_bank(path) -> PrototypeBank:
    with open(path, "rb") as fh:
        return bank_from_bytes(fh.read())
