"""Desk-scale trainer with hand-derived gradients.

The model is a frozen feature map (rendered channels) feeding two branches:
a per-pixel two-layer MLP embedding head (SiLU, then per-pixel L2
normalization) shared by all datasets, and one per-dataset per-pixel affine
heatmap head. Parameters live in a flat dict keyed "emb.W1", "emb.b1",
"emb.W2", "emb.b2", "head.<d>.A", "head.<d>.b"; everything is float64 in
memory and float32 on disk.

Training follows a three-phase schedule over the epoch fraction:
phase 1 trains the embedding against the prototype bank (which is momentum
updated per batch), phase 2 freezes the bank and adds the supervised
heatmap heads, phase 3 adds cross-type self-supervision on the datasets a
sample is not labeled for.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .css import CssConfig, css_loss_from_plans, plan_css
from .errors import ConfigError, InvalidSpec, NumericalError
from .losses import (
    LossValue,
    LossWeights,
    combine,
    joint_mse,
    plan_proto,
    proto_loss_from_plan,
    visibility_from_gt,
)
from .protobank import (
    ClusterIndex,
    PrototypeBank,
    cross_batches_from_arrays,
    init_bank,
    kmeans_clusters,
    momentum_update,
    sinkhorn_assign,
)
from .skeletons import SkeletonRegistry, SkeletonSpec, foreground_arrays
from .synthdata import Sample

GUARD_NORM = 1e-8  # below this raw norm a pixel gets the fixed unit vector


@dataclass
class TrainConfig:
    """Optimization and model hyperparameters. Defaults follow the
    full-scale recipe; desk-scale configs override sizes and epochs."""

    epochs: int = 40
    batch_size: int = 32
    seed: int = 0
    lr: float = 1e-3
    lr_drops: tuple = ((0.5, 0.1), (0.9, 0.1))  # (epoch fraction, factor)
    weight_decay: float = 0.1
    phase1_end: float = 0.5
    phase2_end: float = 0.9
    weights: LossWeights = field(default_factory=LossWeights)
    css: CssConfig = field(default_factory=CssConfig)
    sinkhorn_iters: int = 3
    kappa: float = 0.05
    momentum: float = 0.999
    embed_dim: int = 64  # F
    embed_hidden: int = 32
    protos_per_joint: int = 3  # M
    kmeans_k: int = 96
    cross_start: float = 0.25  # epoch fraction triggering k-means + cross terms
    cross_top_r: int = 16
    heatmap_sigma: float = 2.0
    use_proto: bool = True
    use_css: bool = True
    deterministic: bool = True

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (self.lr > 0.0):
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0.0 < self.phase1_end < self.phase2_end <= 1.0):
            raise ConfigError(
                f"need 0 < phase1_end < phase2_end <= 1, got {self.phase1_end}, {self.phase2_end}"
            )
        if self.use_css and not self.use_proto:
            raise ConfigError("use_css requires use_proto: the self-supervision "
                              "filter needs the prototype modality")
        if self.embed_dim < 1 or self.embed_hidden < 1 or self.protos_per_joint < 1:
            raise ConfigError("model dims must be positive")
        if self.kappa <= 0.0 or self.sinkhorn_iters < 1:
            raise ConfigError("bad assignment solver settings")
        if not (0.0 <= self.momentum <= 1.0):
            raise ConfigError(f"momentum must be in [0, 1], got {self.momentum}")
        for frac, factor in self.lr_drops:
            if not (0.0 < frac <= 1.0) or factor <= 0.0:
                raise ConfigError(f"bad lr drop ({frac}, {factor})")


# --- parameters and forward/backward ---------------------------------------


def _trunc_normal(rng: np.random.Generator, shape, std=0.02, trunc=2.0) -> np.ndarray:
    vals = rng.normal(0.0, std, size=shape)
    lim = trunc * std
    bad = np.abs(vals) > lim
    while bad.any():
        vals[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(vals) > lim
    return vals


def init_params(
    registry: SkeletonRegistry, feature_channels: int, cfg: TrainConfig
) -> dict[str, np.ndarray]:
    """Truncated-normal weights (mean 0, std 0.02, +/- 2 std), zero biases."""
    rng = np.random.default_rng([cfg.seed, 0xE5B])
    params = {
        "emb.W1": _trunc_normal(rng, (cfg.embed_hidden, feature_channels)),
        "emb.b1": np.zeros(cfg.embed_hidden),
        "emb.W2": _trunc_normal(rng, (cfg.embed_dim, cfg.embed_hidden)),
        "emb.b2": np.zeros(cfg.embed_dim),
    }
    for d in range(registry.num_datasets):
        Jd = registry.spec(d).num_joints
        params[f"head.{d}.A"] = _trunc_normal(rng, (Jd, feature_channels))
        params[f"head.{d}.b"] = np.zeros(Jd)
    return params


def init_head(params: dict, registry: SkeletonRegistry, dataset_id: int,
              feature_channels: int, seed: int) -> None:
    """Add a freshly initialized head for one dataset (used by transfer)."""
    rng = np.random.default_rng([seed, 0xAD0, dataset_id])
    Jd = registry.spec(dataset_id).num_joints
    params[f"head.{dataset_id}.A"] = _trunc_normal(rng, (Jd, feature_channels))
    params[f"head.{dataset_id}.b"] = np.zeros(Jd)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # Branchless stable form: exp(-|z|) never overflows, and both branches
    # reduce to the same expressions as the classic two-case version.
    e = np.exp(-np.abs(z))
    denom = 1.0 + e
    return np.where(z >= 0, 1.0 / denom, e / denom)


def normalize_columns(E: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """L2-normalize the columns of E (F, N).

    Returns (Ehat, safe_norms, guard). Columns with norm below GUARD_NORM
    emit the fixed first basis vector; the guard mask marks them so the
    backward pass can zero their gradient (the Jacobian is unbounded there).
    """
    norms = np.sqrt((E * E).sum(axis=0))
    guard = norms < GUARD_NORM
    safe = np.where(guard, 1.0, norms)
    Ehat = E / safe
    if guard.any():
        Ehat[:, guard] = 0.0
        Ehat[0, guard] = 1.0
    return Ehat, safe, guard


def normalize_columns_backward(
    Ehat: np.ndarray, norms: np.ndarray, guard: np.ndarray, dEhat: np.ndarray
) -> np.ndarray:
    """Apply the per-column normalization Jacobian (I - ee^T)/n."""
    dE = Ehat * (Ehat * dEhat).sum(axis=0, keepdims=True)
    np.subtract(dEhat, dE, out=dE)
    dE /= norms
    if guard.any():
        dE[:, guard] = 0.0
    return dE


def forward_embedding_flat(X: np.ndarray, params: dict) -> tuple[np.ndarray, dict]:
    """Per-pixel MLP plus L2 normalization over feature columns.

    X is (C, N); returns (Ehat (F, N), cache). Columns whose raw embedding
    norm falls below GUARD_NORM emit the fixed first basis vector and block
    gradient flow (the normalization Jacobian is unbounded there).
    """
    Z1 = params["emb.W1"] @ X
    Z1 += params["emb.b1"][:, None]
    S = _sigmoid(Z1)
    Hid = Z1 * S
    E = params["emb.W2"] @ Hid
    E += params["emb.b2"][:, None]
    Ehat, safe, guard = normalize_columns(E)
    cache = {"X": X, "Z1": Z1, "S": S, "Hid": Hid, "Ehat": Ehat, "norms": safe, "guard": guard}
    return Ehat, cache


def embedding_backward_flat(cache: dict, dEhat: np.ndarray, params: dict) -> dict[str, np.ndarray]:
    """Backprop through normalization ((I - ee^T)/n per column) and the MLP."""
    dE = normalize_columns_backward(cache["Ehat"], cache["norms"], cache["guard"], dEhat)
    dW2 = dE @ cache["Hid"].T
    db2 = dE.sum(axis=1)
    dHid = params["emb.W2"].T @ dE
    S = cache["S"]
    # dZ1 = dHid * S * (1 + Z1 * (1 - S)), built in place.
    dZ1 = 1.0 - S
    dZ1 *= cache["Z1"]
    dZ1 += 1.0
    dZ1 *= S
    dZ1 *= dHid
    dW1 = dZ1 @ cache["X"].T
    db1 = dZ1.sum(axis=1)
    return {"emb.W1": dW1, "emb.b1": db1, "emb.W2": dW2, "emb.b2": db2}


def forward_head_flat(X: np.ndarray, params: dict, dataset_id: int) -> np.ndarray:
    key = f"head.{dataset_id}.A"
    if key not in params:
        raise IndexError(f"no head registered for dataset {dataset_id}")
    return params[key] @ X + params[f"head.{dataset_id}.b"][:, None]


def head_backward_flat(X: np.ndarray, dK: np.ndarray, dataset_id: int) -> dict[str, np.ndarray]:
    return {f"head.{dataset_id}.A": dK @ X.T, f"head.{dataset_id}.b": dK.sum(axis=1)}


def forward_embedding(features: np.ndarray, params: dict) -> tuple[np.ndarray, dict]:
    """(C, H, W) features -> unit-norm (F, H, W) embedding map."""
    C, H, W = features.shape
    Ehat, cache = forward_embedding_flat(features.reshape(C, H * W).astype(np.float64), params)
    cache["HW"] = (H, W)
    return Ehat.reshape(-1, H, W), cache


def embedding_backward(cache: dict, demb: np.ndarray, params: dict) -> dict[str, np.ndarray]:
    return embedding_backward_flat(cache, demb.reshape(demb.shape[0], -1), params)


def forward_head(features: np.ndarray, params: dict, dataset_id: int) -> np.ndarray:
    C, H, W = features.shape
    K = forward_head_flat(features.reshape(C, H * W).astype(np.float64), params, dataset_id)
    return K.reshape(-1, H, W)


# --- optimizer ---------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay (decay scaled by the current lr).

    Moment estimates live per parameter block; frozen blocks are untouched
    entirely (no moments, no decay)."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.1):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float, trainable: set[str]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k in sorted(trainable):
            p = params[k]
            g = grads.get(k)
            if g is None:
                g = np.zeros_like(p)
            m = self.m.setdefault(k, np.zeros_like(p))
            v = self.v.setdefault(k, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay != 0.0:
                p -= lr * self.weight_decay * p


# --- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    bank: PrototypeBank
    registry: SkeletonRegistry
    config: TrainConfig
    history: list[dict]
    feature_channels: int


def _phase_of(epoch: int, cfg: TrainConfig) -> int:
    p1 = int(round(cfg.phase1_end * cfg.epochs))
    p2 = int(round(cfg.phase2_end * cfg.epochs))
    if epoch < p1:
        return 1
    if epoch < p2:
        return 2
    return 3


def _lr_at(epoch: int, cfg: TrainConfig) -> float:
    lr = cfg.lr
    for frac, factor in cfg.lr_drops:
        if epoch >= int(round(frac * cfg.epochs)):
            lr *= factor
    return lr


def _epoch_batches(datasets: dict[int, list[Sample]], epoch: int, seed: int,
                   batch_size: int) -> list[list[Sample]]:
    """Round-robin interleave of per-family shuffles, chunked into batches,
    so every batch mixes all families."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, 0xBA7C4]))
    orders = {d: rng.permutation(len(s)) for d, s in sorted(datasets.items())}
    interleaved: list[Sample] = []
    longest = max(len(s) for s in datasets.values())
    for i in range(longest):
        for d in sorted(datasets):
            if i < len(datasets[d]):
                interleaved.append(datasets[d][orders[d][i]])
    return [interleaved[i : i + batch_size] for i in range(0, len(interleaved), batch_size)]


def _stack_features(samples: list[Sample]) -> np.ndarray:
    """(C, B*HW) float64 feature matrix for one batch."""
    mats = [s.features.reshape(s.features.shape[0], -1).astype(np.float64) for s in samples]
    return np.concatenate(mats, axis=1)


class _BatchState:
    """Forward products shared by the per-sample loss loop."""

    def __init__(self, samples: list[Sample], params: dict, need_emb: bool,
                 head_ids: list[int]):
        self.samples = samples
        self.H = samples[0].height
        self.W = samples[0].width
        self.HW = self.H * self.W
        self.X = _stack_features(samples)
        self.cache = None
        self.Ehat = None
        if need_emb:
            self.Ehat, self.cache = forward_embedding_flat(self.X, params)
            self.dE = np.zeros_like(self.Ehat)
        self.heads = {d: forward_head_flat(self.X, params, d) for d in head_ids}
        self.dK = {d: np.zeros_like(k) for d, k in self.heads.items()}

    def emb(self, i: int) -> np.ndarray:
        sl = slice(i * self.HW, (i + 1) * self.HW)
        return np.ascontiguousarray(self.Ehat[:, sl]).reshape(-1, self.H, self.W)

    def head(self, d: int, i: int) -> np.ndarray:
        sl = slice(i * self.HW, (i + 1) * self.HW)
        return np.ascontiguousarray(self.heads[d][:, sl]).reshape(-1, self.H, self.W)

    def add_demb(self, i: int, g: np.ndarray) -> None:
        sl = slice(i * self.HW, (i + 1) * self.HW)
        self.dE[:, sl] += g.reshape(g.shape[0], -1)

    def add_dhead(self, d: int, i: int, g: np.ndarray) -> None:
        sl = slice(i * self.HW, (i + 1) * self.HW)
        self.dK[d][:, sl] += g.reshape(g.shape[0], -1)


def train(
    cfg: TrainConfig,
    datasets: dict[int, list[Sample]],
    registry: SkeletonRegistry,
    feature_channels: int | None = None,
) -> TrainResult:
    """Run the multi-dataset schedule and return parameters, bank, history."""
    cfg.validate()
    if len(datasets) < 2:
        raise ConfigError("multi-dataset training needs at least two families")
    if any(len(v) == 0 for v in datasets.values()):
        raise InvalidSpec("every dataset needs at least one sample")
    if feature_channels is None:
        first = next(iter(datasets.values()))[0]
        feature_channels = first.features.shape[0]

    params = init_params(registry, feature_channels, cfg)
    bank = init_bank(registry.total_joints, cfg.protos_per_joint, cfg.embed_dim, cfg.seed)
    opt = AdamW(weight_decay=cfg.weight_decay)
    clusters: ClusterIndex | None = None
    cross_epoch = int(round(cfg.cross_start * cfg.epochs))
    use_cross = cfg.use_proto and cfg.weights.gamma > 0.0 and cfg.kmeans_k >= 1
    history: list[dict] = []

    for epoch in range(cfg.epochs):
        phase = _phase_of(epoch, cfg) if cfg.use_proto else 2
        lr = _lr_at(epoch, cfg)
        if cfg.use_proto and use_cross and clusters is None and epoch >= cross_epoch:
            if cfg.kmeans_k > bank.J * bank.M:
                raise ConfigError(
                    f"kmeans_k={cfg.kmeans_k} exceeds prototype count {bank.J * bank.M}"
                )
            clusters = kmeans_clusters(bank, cfg.kmeans_k, seed=cfg.seed)
        sums = {"loss": 0.0, "hm": 0.0, "ppc": 0.0, "ppd": 0.0, "cross": 0.0, "css": 0.0}
        nb = 0
        for batch in _epoch_batches(datasets, epoch, cfg.seed, cfg.batch_size):
            stats = _train_batch(batch, params, bank, registry, cfg, phase, clusters, opt, lr)
            for k in sums:
                sums[k] += stats[k]
            nb += 1
        row = {"epoch": epoch, "phase": phase, "lr": lr}
        row.update({k: sums[k] / max(nb, 1) for k in sums})
        history.append(row)
    return TrainResult(
        params=params,
        bank=bank,
        registry=registry,
        config=cfg,
        history=history,
        feature_channels=feature_channels,
    )


def _train_batch(
    batch: list[Sample],
    params: dict,
    bank: PrototypeBank,
    registry: SkeletonRegistry,
    cfg: TrainConfig,
    phase: int,
    clusters: ClusterIndex | None,
    opt: AdamW,
    lr: float,
) -> dict:
    B = len(batch)
    need_emb = cfg.use_proto
    css_now = cfg.use_proto and cfg.use_css and phase == 3
    if phase == 1:
        head_ids: list[int] = []
    elif css_now:
        head_ids = list(range(registry.num_datasets))
    else:
        head_ids = sorted({s.labeled_dataset for s in batch})
    state = _BatchState(batch, params, need_emb, head_ids)

    proto_maps_all = None
    if css_now:
        # One matmul for every dataset's prototype responses over the batch.
        flat = bank.P.reshape(-1, bank.F) @ state.Ehat  # (J*M, B*HW)
        proto_maps_all = flat.reshape(bank.J, bank.M, -1).max(axis=1)

    total = 0.0
    parts = {"hm": 0.0, "ppc": 0.0, "ppd": 0.0, "cross": 0.0, "css": 0.0}
    pending_updates: dict[int, list[tuple[np.ndarray, np.ndarray]]] = {}

    for i, sample in enumerate(batch):
        d = sample.labeled_dataset
        gt = sample.gt_heatmap(cfg.heatmap_sigma)
        offset = registry.offset(d)
        emb = state.emb(i) if need_emb else None

        cross_batches = None
        proto_plans = None
        if cfg.use_proto:
            proto_plans = plan_proto(emb, bank, gt, offset, cfg.kappa, cfg.sinkhorn_iters)
            if clusters is not None:
                js, ys, xs, confs = foreground_arrays(gt)
                cross_batches = cross_batches_from_arrays(
                    clusters, bank, emb, js + offset, ys, xs, confs, cfg.cross_top_r
                )

        terms: list[tuple[float, LossValue]] = []
        if phase == 1:
            proto = proto_loss_from_plan(emb, bank, proto_plans, cfg.weights, cross_batches)
            terms.append((1.0, proto))
            parts["ppc"] += proto.parts["ppc"]
            parts["ppd"] += proto.parts["ppd"]
            parts["cross"] += proto.parts["cross"]
            for jp in proto_plans:
                pending_updates.setdefault(jp.joint_global, []).append(
                    (emb[:, jp.ys, jp.xs], jp.assignment.Q)
                )
        else:
            pred = state.head(d, i)
            mse = joint_mse(pred, gt, visibility_from_gt(gt))
            terms.append((1.0, LossValue(mse.value, {f"head.{d}": mse.grads["pred"]})))
            parts["hm"] += mse.value
            if cfg.use_proto:
                proto = proto_loss_from_plan(emb, bank, proto_plans, cfg.weights, cross_batches)
                terms.append((cfg.weights.delta, proto))
                parts["ppc"] += proto.parts["ppc"]
                parts["ppd"] += proto.parts["ppd"]
                parts["cross"] += proto.parts["cross"]
            if css_now:
                heads_i = {u: state.head(u, i) for u in head_ids if u != d}
                pmaps_i = {}
                for u in heads_i:
                    lo, hi = registry.joint_range(u)
                    sl = slice(i * state.HW, (i + 1) * state.HW)
                    pmaps_i[u] = np.ascontiguousarray(proto_maps_all[lo:hi, sl]).reshape(
                        hi - lo, state.H, state.W
                    )
                css_plans = plan_css(
                    heads_i, pmaps_i, emb, bank, d, cfg.css, registry,
                    cfg.kappa, cfg.sinkhorn_iters,
                )
                css = css_loss_from_plans(heads_i, emb, bank, css_plans, cfg.weights)
                terms.append((1.0, css))
                parts["css"] += css.value

        lv = combine(terms)
        if not np.isfinite(lv.value):
            raise NumericalError(f"non-finite loss in batch (value={lv.value})")
        total += lv.value
        for key, g in lv.grads.items():
            if key == "emb":
                state.add_demb(i, g)
            elif key.startswith("head."):
                state.add_dhead(int(key.split(".")[1]), i, g)

    grads: dict[str, np.ndarray] = {}
    trainable: set[str] = set()
    if phase == 1:
        grads.update(embedding_backward_flat(state.cache, state.dE / B, params))
        trainable = {"emb.W1", "emb.b1", "emb.W2", "emb.b2"}
    else:
        if need_emb:
            grads.update(embedding_backward_flat(state.cache, state.dE / B, params))
            trainable |= {"emb.W1", "emb.b1", "emb.W2", "emb.b2"}
        for d in head_ids:
            grads.update(head_backward_flat(state.X, state.dK[d] / B, d))
            trainable |= {f"head.{d}.A", f"head.{d}.b"}
    opt.step(params, grads, lr, trainable)

    if phase == 1:
        for j in sorted(pending_updates):
            embs = np.concatenate([e for e, _ in pending_updates[j]], axis=1)
            Qs = np.concatenate([q for _, q in pending_updates[j]], axis=1)
            targets = np.argmax(Qs, axis=0)
            momentum_update(
                bank, j,
                sinkhorn_like(Qs, targets), embs, cfg.momentum,
            )

    out = {"loss": total / B}
    out.update({k: v / B for k, v in parts.items()})
    return out


def sinkhorn_like(Q: np.ndarray, targets: np.ndarray):
    """Wrap a concatenated plan back into an Assignment record."""
    from .protobank import Assignment

    return Assignment(Q=Q, targets=np.asarray(targets, dtype=np.int64), iterations=0)


# --- transfer ----------------------------------------------------------------


@dataclass
class TransferConfig:
    """New-family adaptation: stage 1 learns prototypes only (embedding
    frozen, bank rows of the new family momentum updated); stage 2
    optionally fine-tunes the embedding and the new head."""

    epochs: int = 5
    batch_size: int = 32
    seed: int = 0
    momentum: float = 0.9  # faster than training: the bank starts cold
    stage2: bool = False
    stage2_epochs: int = 5
    lr: float = 1e-3
    weight_decay: float = 0.1

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("transfer epochs and batch_size must be >= 1")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError("transfer momentum must be in [0, 1)")
        if self.stage2 and self.stage2_epochs < 1:
            raise ConfigError("stage2_epochs must be >= 1 when stage 2 is on")


@dataclass
class TransferResult:
    params: dict[str, np.ndarray]
    bank: PrototypeBank
    registry: SkeletonRegistry
    new_dataset_id: int
    history: list[dict]


def extend_for_transfer(
    result_params: dict,
    bank: PrototypeBank,
    registry: SkeletonRegistry,
    new_spec: SkeletonSpec,
    feature_channels: int,
    seed: int,
) -> tuple[dict, PrototypeBank, SkeletonRegistry, int]:
    """Copy the model and grow it by one dataset: registry entry, random
    bank rows, fresh head. Existing blocks are copied bit for bit."""
    registry2 = SkeletonRegistry.from_dict(registry.to_dict())
    new_id = registry2.register(new_spec)
    fresh = init_bank(new_spec.num_joints, bank.M, bank.F, seed)
    bank2 = PrototypeBank(np.concatenate([bank.P.copy(), fresh.P], axis=0))
    params2 = {k: v.copy() for k, v in result_params.items()}
    init_head(params2, registry2, new_id, feature_channels, seed)
    return params2, bank2, registry2, new_id


def transfer(
    result: TrainResult,
    new_spec: SkeletonSpec,
    new_samples: list[Sample],
    cfg: TransferConfig,
) -> TransferResult:
    """Adapt a trained model to an unseen skeleton family.

    Stage 1 never touches the embedding parameters or the old bank rows:
    only the new family's prototypes move, by per-batch momentum updates of
    assigned foreground embeddings. Self-supervision stays off throughout.
    """
    cfg.validate()
    if not new_samples:
        raise InvalidSpec("transfer needs at least one sample")
    params, bank, registry, new_id = extend_for_transfer(
        result.params, result.bank, result.registry, new_spec,
        result.feature_channels, cfg.seed,
    )
    tcfg = result.config
    offset = registry.offset(new_id)
    history: list[dict] = []

    # Stage 1: nonparametric prototype learning, embedding frozen.
    for epoch in range(cfg.epochs):
        batches = _epoch_batches({new_id: new_samples}, epoch, cfg.seed, cfg.batch_size)
        ppd_sum = 0.0
        nb = 0
        for batch in batches:
            state = _BatchState(batch, params, need_emb=True, head_ids=[])
            pending: dict[int, list[tuple[np.ndarray, np.ndarray]]] = {}
            for i, sample in enumerate(batch):
                gt = sample.gt_heatmap(tcfg.heatmap_sigma)
                emb = state.emb(i)
                plans = plan_proto(emb, bank, gt, offset, tcfg.kappa, tcfg.sinkhorn_iters)
                lv = proto_loss_from_plan(emb, bank, plans, tcfg.weights)
                ppd_sum += lv.parts["ppd"]
                for jp in plans:
                    pending.setdefault(jp.joint_global, []).append(
                        (emb[:, jp.ys, jp.xs], jp.assignment.Q)
                    )
            for j in sorted(pending):
                embs = np.concatenate([e for e, _ in pending[j]], axis=1)
                Qs = np.concatenate([q for _, q in pending[j]], axis=1)
                momentum_update(bank, j, sinkhorn_like(Qs, np.argmax(Qs, axis=0)),
                                embs, cfg.momentum)
            nb += 1
        history.append({"epoch": epoch, "stage": 1, "ppd": ppd_sum / max(nb, 1)})

    # Stage 2 (optional): fine-tune embedding + new head, bank frozen.
    if cfg.stage2:
        opt = AdamW(weight_decay=cfg.weight_decay)
        trainable = {"emb.W1", "emb.b1", "emb.W2", "emb.b2",
                     f"head.{new_id}.A", f"head.{new_id}.b"}
        for epoch in range(cfg.stage2_epochs):
            batches = _epoch_batches({new_id: new_samples}, 1000 + epoch, cfg.seed,
                                     cfg.batch_size)
            loss_sum = 0.0
            nb = 0
            for batch in batches:
                state = _BatchState(batch, params, need_emb=True, head_ids=[new_id])
                B = len(batch)
                for i, sample in enumerate(batch):
                    gt = sample.gt_heatmap(tcfg.heatmap_sigma)
                    emb = state.emb(i)
                    pred = state.head(new_id, i)
                    mse = joint_mse(pred, gt, visibility_from_gt(gt))
                    plans = plan_proto(emb, bank, gt, offset, tcfg.kappa, tcfg.sinkhorn_iters)
                    proto = proto_loss_from_plan(emb, bank, plans, tcfg.weights)
                    lv = combine([
                        (1.0, LossValue(mse.value, {f"head.{new_id}": mse.grads["pred"]})),
                        (tcfg.weights.delta, proto),
                    ])
                    if not np.isfinite(lv.value):
                        raise NumericalError("non-finite loss during transfer stage 2")
                    loss_sum += lv.value
                    state.add_dhead(new_id, i, lv.grads[f"head.{new_id}"])
                    if "emb" in lv.grads:
                        state.add_demb(i, lv.grads["emb"])
                grads = embedding_backward_flat(state.cache, state.dE / B, params)
                grads.update(head_backward_flat(state.X, state.dK[new_id] / B, new_id))
                opt.step(params, grads, cfg.lr, trainable)
                nb += 1
            history.append({"epoch": epoch, "stage": 2, "loss": loss_sum / max(nb, 1)})

    return TransferResult(params=params, bank=bank, registry=registry,
                          new_dataset_id=new_id, history=history)


# --- gradient checking --------------------------------------------------------


@dataclass
class GradCheckRow:
    loss: str
    block: str
    max_abs_diff: float
    rel_err: float


@dataclass
class GradCheckReport:
    rows: list[GradCheckRow]

    def max_rel_err(self) -> float:
        return max((r.rel_err for r in self.rows), default=0.0)

    def block_summary(self) -> dict[str, float]:
        """Worst relative error per parameter block across all losses."""
        out: dict[str, float] = {}
        for r in self.rows:
            out[r.block] = max(out.get(r.block, 0.0), r.rel_err)
        return out

    def passed(self, tol: float) -> bool:
        return self.max_rel_err() < tol


class _CheckContext:
    """Frozen step objective over a handful of samples.

    Assignment targets and pseudo-label plans are computed once from the
    base parameters and held fixed, exactly as one optimization step sees
    them; the objective is then smooth and finite differences are valid.
    """

    def __init__(self, params, bank, registry, samples, cfg: TrainConfig):
        self.bank = bank
        self.registry = registry
        self.cfg = cfg
        self.samples = []
        for s in samples:
            f = s.features.astype(np.float64)
            gt = s.gt_heatmap(cfg.heatmap_sigma)
            emb, _ = forward_embedding(f, params)
            d = s.labeled_dataset
            offset = registry.offset(d)
            proto_plans = plan_proto(emb, bank, gt, offset, cfg.kappa, cfg.sinkhorn_iters)
            unlabeled = [u for u in range(registry.num_datasets) if u != d]
            heads = {u: forward_head(f, params, u) for u in unlabeled}
            pmaps = {}
            for u in unlabeled:
                lo, hi = registry.joint_range(u)
                sims = bank.P[lo:hi].reshape(-1, bank.F) @ emb.reshape(bank.F, -1)
                pmaps[u] = sims.reshape(hi - lo, bank.M, -1).max(axis=1).reshape(
                    hi - lo, *emb.shape[1:]
                )
            css_plans = plan_css(heads, pmaps, emb, bank, d, cfg.css, registry,
                                 cfg.kappa, cfg.sinkhorn_iters)
            self.samples.append({
                "features": f, "gt": gt, "labeled": d, "offset": offset,
                "vis": visibility_from_gt(gt), "proto_plans": proto_plans,
                "css_plans": css_plans, "unlabeled": unlabeled,
            })

    def objective(self, name: str, params: dict, want_grads: bool) -> tuple[float, dict]:
        cfg = self.cfg
        total = 0.0
        pgrads: dict[str, np.ndarray] = {}
        for sc in self.samples:
            need_emb = name in ("ppc", "ppd", "proto", "kpl", "css", "mdt")
            emb = cache = None
            if need_emb:
                emb, cache = forward_embedding(sc["features"], params)
            terms: list[tuple[float, LossValue]] = []
            if name in ("hm", "kpl", "mdt"):
                pred = forward_head(sc["features"], params, sc["labeled"])
                mse = joint_mse(pred, sc["gt"], sc["vis"])
                terms.append((1.0, LossValue(mse.value,
                                             {f"head.{sc['labeled']}": mse.grads["pred"]})))
            if name in ("ppc", "ppd", "proto", "kpl", "mdt"):
                if name == "ppc":
                    w = replace(cfg.weights, alpha=1.0, beta=0.0, gamma=0.0)
                    scale = 1.0
                elif name == "ppd":
                    w = replace(cfg.weights, alpha=0.0, beta=1.0, gamma=0.0)
                    scale = 1.0
                elif name == "proto":
                    w = cfg.weights
                    scale = 1.0
                else:
                    w = cfg.weights
                    scale = cfg.weights.delta
                proto = proto_loss_from_plan(emb, self.bank, sc["proto_plans"], w)
                terms.append((scale, proto))
            if name in ("css", "mdt"):
                heads = {u: forward_head(sc["features"], params, u) for u in sc["unlabeled"]}
                css = css_loss_from_plans(heads, emb, self.bank, sc["css_plans"], cfg.weights)
                terms.append((1.0, css))
            lv = combine(terms)
            total += lv.value
            if want_grads:
                if "emb" in lv.grads and need_emb:
                    for k, g in embedding_backward(cache, lv.grads["emb"], params).items():
                        pgrads[k] = pgrads.get(k, 0.0) + g
                X = sc["features"].reshape(sc["features"].shape[0], -1)
                for key, g in lv.grads.items():
                    if key.startswith("head."):
                        d = int(key.split(".")[1])
                        for k, gg in head_backward_flat(X, g.reshape(g.shape[0], -1), d).items():
                            pgrads[k] = pgrads.get(k, 0.0) + gg
        return total, pgrads


def grad_check(
    params: dict[str, np.ndarray],
    bank: PrototypeBank,
    registry: SkeletonRegistry,
    samples: list[Sample],
    cfg: TrainConfig,
    losses: tuple[str, ...] = ("hm", "ppc", "ppd", "proto", "kpl", "css", "mdt"),
    eps: float = 1e-5,
) -> GradCheckReport:
    """Central-difference check of every analytic gradient.

    Per loss and parameter block, reports
    max |analytic - fd| / max(max |analytic|, max |fd|, 1e-12).
    """
    if not (eps > 0.0):
        raise InvalidSpec(f"finite-difference step must be positive, got {eps}")
    ctx = _CheckContext(params, bank, registry, samples, cfg)
    rows: list[GradCheckRow] = []
    for name in losses:
        _, agrads = ctx.objective(name, params, want_grads=True)
        for block in sorted(params):
            a = agrads.get(block)
            if a is None:
                a = np.zeros_like(params[block])
            a = np.asarray(a, dtype=np.float64)
            fd = np.zeros_like(a)
            flat_p = params[block].reshape(-1)
            flat_fd = fd.reshape(-1)
            for idx in range(flat_p.size):
                orig = flat_p[idx]
                flat_p[idx] = orig + eps
                hi, _ = ctx.objective(name, params, want_grads=False)
                flat_p[idx] = orig - eps
                lo, _ = ctx.objective(name, params, want_grads=False)
                flat_p[idx] = orig
                flat_fd[idx] = (hi - lo) / (2.0 * eps)
            diff = float(np.abs(a - fd).max()) if a.size else 0.0
            denom = max(float(np.abs(a).max(initial=0.0)),
                        float(np.abs(fd).max(initial=0.0)), 1e-12)
            rows.append(GradCheckRow(loss=name, block=block,
                                     max_abs_diff=diff, rel_err=diff / denom))
    return GradCheckReport(rows)
