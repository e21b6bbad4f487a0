"""Training losses and their hand-derived gradients.

Every loss returns a LossValue: the scalar plus gradients with respect to
its differentiable inputs, keyed by block name ("pred", "logits", "emb",
"head.<d>"). Assignment targets, pseudo-label heatmaps and pixel selections
are constants of the step objective: gradients never flow through them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpec, MissingLabel, ShapeError
from .protobank import Assignment, CrossBatch, PrototypeBank, sinkhorn_assign
from .skeletons import SkeletonRegistry, foreground_arrays


@dataclass(frozen=True)
class LossWeights:
    """Loss mixing weights. Defaults are the full-scale training values."""

    alpha: float = 3.33e-6  # pixel-prototype contrastive (cross entropy)
    beta: float = 1.25e-7  # pixel-prototype distance
    gamma: float = 1.25e-8  # cross-dataset contrastive terms
    delta: float = 0.01  # prototype loss inside the keypoint loss
    zeta: float = 0.001  # self-supervision term per unlabeled dataset
    temperature: float = 1.0  # softmax temperature for the contrastive term


@dataclass
class LossValue:
    """A scalar loss with gradients per named input block."""

    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    parts: dict[str, float] = field(default_factory=dict)


def combine(terms: list[tuple[float, "LossValue"]]) -> LossValue:
    """Weighted sum of losses; gradients with matching keys accumulate."""
    value = 0.0
    grads: dict[str, np.ndarray] = {}
    parts: dict[str, float] = {}
    for w, lv in terms:
        value += w * lv.value
        for key, g in lv.grads.items():
            if key in grads:
                grads[key] = grads[key] + w * g
            else:
                grads[key] = w * g
        for key, p in lv.parts.items():
            parts[key] = parts.get(key, 0.0) + w * p
    return LossValue(value=value, grads=grads, parts=parts)


def joint_mse(
    pred: np.ndarray, target: np.ndarray, joint_weights: np.ndarray | None = None
) -> LossValue:
    """Mean over visible joints of the per-joint pixel MSE.

    Gradient w.r.t. pred is 2 (pred - target) / (H * W * J_vis) on visible
    channels. No visible joints gives zero loss and zero gradient.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 3:
        raise ShapeError(f"pred {pred.shape} and target {target.shape} must both be (J, H, W)")
    J, H, W = pred.shape
    if joint_weights is None:
        w = np.ones(J, dtype=np.float64)
    else:
        w = np.asarray(joint_weights, dtype=np.float64)
        if w.shape != (J,):
            raise ShapeError(f"joint_weights must be ({J},), got {w.shape}")
    jvis = float(w.sum())
    if jvis <= 0.0:
        return LossValue(0.0, {"pred": np.zeros_like(pred)})
    diff = (pred - target) * w[:, None, None]
    value = float((diff * (pred - target)).sum() / (H * W * jvis))
    grad = 2.0 * diff / (H * W * jvis)
    return LossValue(value, {"pred": grad})


def ppc_loss(
    logits: np.ndarray,
    targets: np.ndarray,
    confidences: np.ndarray,
    temperature: float = 1.0,
) -> LossValue:
    """Confidence-weighted cross entropy of softmax(logits / T) vs targets,
    averaged over the N columns.

    Gradient w.r.t. logits column n is (c_n / (N * T)) (softmax - onehot).
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (M, N), got {logits.shape}")
    if temperature <= 0.0:
        raise InvalidSpec(f"temperature must be positive, got {temperature}")
    M, N = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    confidences = np.asarray(confidences, dtype=np.float64)
    if targets.shape != (N,) or confidences.shape != (N,):
        raise ShapeError("targets and confidences must have one entry per logits column")
    if N == 0:
        return LossValue(0.0, {"logits": np.zeros_like(logits)})
    if targets.min() < 0 or targets.max() >= M:
        raise InvalidSpec("targets out of range")
    z = logits / temperature
    z = z - z.max(axis=0, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=0)
    logp_t = z[targets, np.arange(N)] - np.log(denom)
    value = float((confidences * -logp_t).sum() / N)
    grad = ez / denom  # softmax
    grad[targets, np.arange(N)] -= 1.0
    grad *= confidences / (N * temperature)
    return LossValue(value, {"logits": grad})


def ppd_loss(
    logits: np.ndarray, targets: np.ndarray, confidences: np.ndarray
) -> LossValue:
    """Confidence-weighted squared distance (1 - l[t_n, n])^2, averaged over
    columns. Only the target row of each column receives gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (M, N), got {logits.shape}")
    M, N = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    confidences = np.asarray(confidences, dtype=np.float64)
    if targets.shape != (N,) or confidences.shape != (N,):
        raise ShapeError("targets and confidences must have one entry per logits column")
    if N == 0:
        return LossValue(0.0, {"logits": np.zeros_like(logits)})
    lt = logits[targets, np.arange(N)]
    resid = 1.0 - lt
    value = float((confidences * resid * resid).sum() / N)
    grad = np.zeros_like(logits)
    grad[targets, np.arange(N)] = -2.0 * confidences * resid / N
    return LossValue(value, {"logits": grad})


def _ppc_ppd_columns(
    logits: np.ndarray,
    targets: np.ndarray,
    col_weights: np.ndarray,
    temperature: float,
) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Columnwise PPC + PPD over concatenated joint blocks.

    col_weights folds each column's confidence with its block's 1/N mean
    factor, so summing columns reproduces the per-block averages. Rows of
    -inf act as padding: zero softmax mass, zero gradient. Returns
    (ppc_sum, ppd_sum, dppc, dppd) with all scaling already applied.
    """
    N = logits.shape[1]
    idx = np.arange(N)
    z = logits / temperature
    z = z - z.max(axis=0, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=0)
    logp_t = z[targets, idx] - np.log(denom)
    ppc_sum = float(-(col_weights * logp_t).sum())
    dppc = ez / denom
    dppc[targets, idx] -= 1.0
    dppc *= col_weights / temperature
    resid = 1.0 - logits[targets, idx]
    ppd_sum = float((col_weights * resid * resid).sum())
    dppd = np.zeros_like(logits)
    dppd[targets, idx] = -2.0 * col_weights * resid
    return ppc_sum, ppd_sum, dppc, dppd


@dataclass
class JointPlan:
    """Frozen per-joint assignment context for the prototype loss."""

    joint_global: int
    ys: np.ndarray
    xs: np.ndarray
    confidences: np.ndarray
    assignment: Assignment


def plan_proto(
    emb: np.ndarray,
    bank: PrototypeBank,
    gt: np.ndarray,
    joint_offset: int,
    kappa: float = 0.05,
    sinkhorn_iters: int = 3,
) -> list[JointPlan]:
    """Collect foreground pixels per joint and solve their balanced
    assignments. The result is detached: training treats it as constant."""
    gt = np.asarray(gt, dtype=np.float64)
    if gt.ndim != 3:
        raise ShapeError(f"gt must be (J_d, H, W), got {gt.shape}")
    Jd = gt.shape[0]
    if joint_offset < 0 or joint_offset + Jd > bank.J:
        raise InvalidSpec(
            f"gt joints [{joint_offset}, {joint_offset + Jd}) fall outside bank J={bank.J}"
        )
    js, ys, xs, confs = foreground_arrays(gt)
    # foreground_arrays is joint-major, so each joint is one contiguous run.
    bounds = np.searchsorted(js, np.arange(Jd + 1))
    plans: list[JointPlan] = []
    for local in range(Jd):
        a, b = bounds[local], bounds[local + 1]
        if a == b:
            continue
        jy = ys[a:b]
        jx = xs[a:b]
        jc = confs[a:b]
        g = joint_offset + local
        ebar = emb[:, jy, jx]
        logits = bank.P[g] @ ebar
        assignment = sinkhorn_assign(logits, kappa=kappa, iters=sinkhorn_iters)
        plans.append(JointPlan(joint_global=g, ys=jy, xs=jx, confidences=jc, assignment=assignment))
    return plans


def proto_loss_from_plan(
    emb: np.ndarray,
    bank: PrototypeBank,
    joint_plans: list[JointPlan],
    weights: LossWeights,
    cross_batches: list[CrossBatch] | None = None,
) -> LossValue:
    """alpha * PPC + beta * PPD summed over joints, plus gamma times the
    cross-dataset PPC + PPD. Gradient flows to "emb" only; prototypes and
    plan targets are constants.

    All joints share the bank's M rows, so their logit blocks concatenate
    into one columnwise PPC/PPD evaluation; per-joint 1/N factors ride in
    the column weights. Gradients scatter back block by block because a
    pixel is unique within one joint but can repeat across joints.
    """
    demb = np.zeros_like(emb)
    ppc_sum = 0.0
    ppd_sum = 0.0
    plans = [jp for jp in joint_plans if jp.ys.shape[0] > 0]
    if plans:
        protos = [bank.P[jp.joint_global] for jp in plans]
        blocks = [P @ emb[:, jp.ys, jp.xs] for P, jp in zip(protos, plans)]
        logits = np.concatenate(blocks, axis=1)
        targets = np.concatenate([jp.assignment.targets for jp in plans])
        colw = np.concatenate(
            [jp.confidences / b.shape[1] for jp, b in zip(plans, blocks)]
        )
        ppc_sum, ppd_sum, dppc, dppd = _ppc_ppd_columns(
            logits, targets, colw, weights.temperature
        )
        dl = weights.alpha * dppc
        dl += weights.beta * dppd
        stop = 0
        for P, jp in zip(protos, plans):
            start, stop = stop, stop + jp.ys.shape[0]
            # Within one joint the pixels are unique, so fancy-index += is safe.
            demb[:, jp.ys, jp.xs] += P.T @ dl[:, start:stop]
    cross_sum = 0.0
    batches = [cb for cb in cross_batches or [] if cb.targets.shape[0] > 0]
    if batches:
        rmax = max(cb.member_joints.shape[0] for cb in batches)
        protos = [bank.P[cb.member_joints, cb.member_protos] for cb in batches]
        ncol = sum(cb.targets.shape[0] for cb in batches)
        logits = np.full((rmax, ncol), -np.inf)
        colw = np.empty(ncol)
        targets = np.empty(ncol, dtype=np.int64)
        stop = 0
        for P, cb in zip(protos, batches):
            start, stop = stop, stop + cb.targets.shape[0]
            logits[: P.shape[0], start:stop] = P @ emb[:, cb.ys, cb.xs]
            colw[start:stop] = cb.confidences / cb.targets.shape[0]
            targets[start:stop] = cb.targets
        cppc, cppd, dppc, dppd = _ppc_ppd_columns(logits, targets, colw, weights.temperature)
        cross_sum = cppc + cppd
        dl = dppc
        dl += dppd
        dl *= weights.gamma
        stop = 0
        for P, cb in zip(protos, batches):
            start, stop = stop, stop + cb.targets.shape[0]
            demb[:, cb.ys, cb.xs] += P.T @ dl[: P.shape[0], start:stop]
    value = weights.alpha * ppc_sum + weights.beta * ppd_sum + weights.gamma * cross_sum
    parts = {"ppc": ppc_sum, "ppd": ppd_sum, "cross": cross_sum}
    return LossValue(value, {"emb": demb}, parts)


def proto_loss(
    emb: np.ndarray,
    bank: PrototypeBank,
    gt: np.ndarray,
    weights: LossWeights,
    cross_batches: list[CrossBatch] | None = None,
    joint_offset: int = 0,
    kappa: float = 0.05,
    sinkhorn_iters: int = 3,
) -> LossValue:
    """Prototype loss against one sample's ground truth heatmap."""
    plans = plan_proto(emb, bank, gt, joint_offset, kappa, sinkhorn_iters)
    return proto_loss_from_plan(emb, bank, plans, weights, cross_batches)


def visibility_from_gt(gt: np.ndarray) -> np.ndarray:
    """Visible joints are the channels that were actually rendered (peak 1)."""
    return (np.asarray(gt).max(axis=(1, 2)) > 0.5).astype(np.float64)


def kpl_loss(
    heads: dict[int, np.ndarray],
    gts: dict[int, np.ndarray],
    emb: np.ndarray,
    bank: PrototypeBank,
    weights: LossWeights,
    registry: SkeletonRegistry,
    joint_weights: np.ndarray | None = None,
    cross_batches: list[CrossBatch] | None = None,
    kappa: float = 0.05,
    sinkhorn_iters: int = 3,
    use_proto: bool = True,
) -> LossValue:
    """Supervised keypoint loss: heatmap MSE on the labeled head plus
    delta times the prototype loss on the labeled joints."""
    if len(gts) == 0:
        raise MissingLabel("sample has no labeled dataset")
    if len(gts) > 1:
        raise InvalidSpec("exactly one dataset may carry ground truth per sample")
    (labeled,) = gts.keys()
    if labeled not in heads:
        raise MissingLabel(f"no head output for labeled dataset {labeled}")
    gt = gts[labeled]
    if joint_weights is None:
        joint_weights = visibility_from_gt(gt)
    mse = joint_mse(heads[labeled], gt, joint_weights)
    out = LossValue(mse.value, {f"head.{labeled}": mse.grads["pred"]}, {"hm": mse.value})
    if use_proto:
        proto = proto_loss(
            emb,
            bank,
            gt,
            weights,
            cross_batches=cross_batches,
            joint_offset=registry.offset(labeled),
            kappa=kappa,
            sinkhorn_iters=sinkhorn_iters,
        )
        out = combine([(1.0, out), (weights.delta, proto)])
    return out


def mdt_loss(kpl: LossValue, css: LossValue) -> LossValue:
    """Multi-dataset training loss: supervised part plus self-supervision."""
    return combine([(1.0, kpl), (1.0, css)])
