import numpy as np
import pytest

from protopose.errors import InvalidSpec, MissingLabel, ShapeError
from protopose.losses import (
    LossValue,
    LossWeights,
    combine,
    joint_mse,
    kpl_loss,
    mdt_loss,
    plan_proto,
    ppc_loss,
    ppd_loss,
    proto_loss,
    proto_loss_from_plan,
    visibility_from_gt,
)
from protopose.protobank import init_bank
from protopose.skeletons import JointDef, SkeletonRegistry, SkeletonSpec
from protopose.trainer import normalize_columns, normalize_columns_backward
from oracles import (
    fd_gradient,
    joint_mse_bruteforce,
    ppc_bruteforce,
    ppd_bruteforce,
    rel_err,
)

EPS = 1e-5


# --- joint_mse ----------------------------------------------------------


def test_joint_mse_identity_is_zero(rng):
    t = rng.normal(size=(2, 4, 4))
    lv = joint_mse(t, t)
    assert lv.value == 0.0
    assert not lv.grads["pred"].any()


def test_joint_mse_unit_offset_is_one(rng):
    t = rng.normal(size=(3, 5, 4))
    lv = joint_mse(t + 1.0, t)
    assert lv.value == pytest.approx(1.0, abs=1e-12)


def test_joint_mse_matches_bruteforce(rng):
    pred = rng.normal(size=(4, 6, 5))
    target = rng.normal(size=(4, 6, 5))
    vis = np.array([1.0, 0.0, 1.0, 1.0])
    lv = joint_mse(pred, target, vis)
    assert lv.value == pytest.approx(joint_mse_bruteforce(pred, target, vis), abs=1e-14)


def test_joint_mse_gradient_matches_fd(rng):
    pred = rng.normal(size=(2, 4, 4))
    target = rng.normal(size=(2, 4, 4))
    fd = fd_gradient(lambda p: joint_mse(p, target).value, pred.copy(), EPS)
    assert rel_err(joint_mse(pred, target).grads["pred"], fd) < 1e-6


def test_joint_mse_invisible_joints_get_no_gradient(rng):
    pred = rng.normal(size=(2, 4, 4))
    target = rng.normal(size=(2, 4, 4))
    lv = joint_mse(pred, target, np.array([1.0, 0.0]))
    assert not lv.grads["pred"][1].any()
    assert lv.grads["pred"][0].any()


def test_joint_mse_no_visible_joints_is_zero(rng):
    pred = rng.normal(size=(2, 3, 3))
    lv = joint_mse(pred, np.zeros((2, 3, 3)), np.zeros(2))
    assert lv.value == 0.0
    assert not lv.grads["pred"].any()


def test_joint_mse_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        joint_mse(np.zeros((2, 3, 3)), np.zeros((2, 3, 4)))


# --- ppc ------------------------------------------------------------------


def test_ppc_uniform_logits_is_ln_m():
    lv = ppc_loss(np.zeros((3, 7)), np.zeros(7, dtype=int), np.ones(7))
    assert lv.value == pytest.approx(np.log(3.0), abs=1e-12)


def test_ppc_saturated_margin_vanishes():
    logits = np.zeros((3, 4))
    logits[1] = 50.0
    lv = ppc_loss(logits, np.full(4, 1, dtype=int), np.ones(4))
    assert lv.value < 1e-20


def test_ppc_matches_bruteforce(rng):
    logits = rng.normal(size=(3, 20))
    targets = rng.integers(0, 3, size=20)
    confs = rng.uniform(0.1, 1.0, size=20)
    lv = ppc_loss(logits, targets, confs, temperature=0.8)
    assert lv.value == pytest.approx(
        ppc_bruteforce(logits, targets, confs, 0.8), abs=1e-12
    )


def test_ppc_gradient_matches_fd(rng):
    logits = rng.normal(size=(3, 20))
    targets = rng.integers(0, 3, size=20)
    confs = rng.uniform(0.1, 1.0, size=20)
    lv = ppc_loss(logits, targets, confs)
    fd = fd_gradient(lambda l: ppc_loss(l, targets, confs).value, logits.copy(), EPS)
    assert rel_err(lv.grads["logits"], fd) < 1e-6


def test_ppc_empty_is_zero():
    lv = ppc_loss(np.zeros((3, 0)), np.zeros(0, dtype=int), np.zeros(0))
    assert lv.value == 0.0


def test_ppc_rejects_bad_targets():
    with pytest.raises(InvalidSpec):
        ppc_loss(np.zeros((3, 2)), np.array([0, 3]), np.ones(2))


# --- ppd ------------------------------------------------------------------


def test_ppd_perfect_alignment_is_zero():
    logits = np.full((2, 5), 0.3)
    logits[0] = 1.0
    lv = ppd_loss(logits, np.zeros(5, dtype=int), np.ones(5))
    assert lv.value == 0.0


def test_ppd_unit_gap_single_sample():
    lv = ppd_loss(np.zeros((2, 1)), np.zeros(1, dtype=int), np.ones(1))
    assert lv.value == pytest.approx(1.0, abs=1e-15)


def test_ppd_matches_bruteforce(rng):
    logits = rng.uniform(-1, 1, size=(4, 9))
    targets = rng.integers(0, 4, size=9)
    confs = rng.uniform(0.1, 1.0, size=9)
    lv = ppd_loss(logits, targets, confs)
    assert lv.value == pytest.approx(ppd_bruteforce(logits, targets, confs), abs=1e-13)


def test_ppd_gradient_matches_fd(rng):
    logits = rng.uniform(-1, 1, size=(3, 12))
    targets = rng.integers(0, 3, size=12)
    confs = rng.uniform(0.1, 1.0, size=12)
    lv = ppd_loss(logits, targets, confs)
    fd = fd_gradient(lambda l: ppd_loss(l, targets, confs).value, logits.copy(), EPS)
    assert rel_err(lv.grads["logits"], fd) < 1e-6
    # non-target rows receive exactly zero gradient
    g = lv.grads["logits"]
    for n in range(12):
        for m in range(3):
            if m != targets[n]:
                assert g[m, n] == 0.0


# --- proto chain -----------------------------------------------------------


def unit_cols(rng, F, n):
    v = rng.normal(size=(F, n))
    return v / np.linalg.norm(v, axis=0, keepdims=True)


def toy_proto_instance(rng, J=2, M=2, F=4, H=3, W=3, n_fg=3):
    bank = init_bank(J, M, F, seed=int(rng.integers(1 << 30)))
    gt = np.zeros((J, H, W))
    flat = rng.choice(H * W, size=n_fg, replace=False)
    for p in flat:
        gt[int(rng.integers(J)), p // W, p % W] = float(rng.uniform(0.3, 1.0))
    raw = rng.normal(size=(F, H * W))
    return bank, gt, raw


def proto_value_from_raw(raw, bank, gt, weights, H, W):
    emb, _, _ = normalize_columns(raw)
    return proto_loss(emb.reshape(-1, H, W), bank, gt, weights).value


def test_proto_loss_zero_gt_is_zero(rng):
    bank = init_bank(2, 2, 4, seed=0)
    emb = unit_cols(rng, 4, 9).reshape(4, 3, 3)
    lv = proto_loss(emb, bank, np.zeros((2, 3, 3)), LossWeights())
    assert lv.value == 0.0
    assert not lv.grads["emb"].any()


def test_proto_loss_default_weights():
    w = LossWeights()
    assert (w.alpha, w.beta, w.gamma) == (3.33e-6, 1.25e-7, 1.25e-8)
    assert (w.delta, w.zeta) == (0.01, 0.001)


def test_proto_chain_gradient_through_normalization(rng):
    """FD oracle w.r.t. pre-normalization embeddings on the toy instance.

    The sinkhorn plan is frozen at the base point: it is a constant of the
    step objective, so the FD perturbations must see the same targets.
    """
    H = W = 3
    weights = LossWeights(alpha=1.0, beta=1.0, gamma=1.0)
    for _ in range(10):
        bank, gt, raw = toy_proto_instance(rng)
        emb0, norms0, guard0 = normalize_columns(raw)
        plans = plan_proto(emb0.reshape(-1, H, W), bank, gt, joint_offset=0)

        def value(r):
            e, _, _ = normalize_columns(r)
            return proto_loss_from_plan(e.reshape(-1, H, W), bank, plans, weights).value

        lv = proto_loss_from_plan(emb0.reshape(-1, H, W), bank, plans, weights)
        demb = lv.grads["emb"].reshape(emb0.shape)
        draw = normalize_columns_backward(emb0, norms0, guard0, demb)
        fd = fd_gradient(value, raw.copy(), EPS)
        assert rel_err(draw, fd) < 1e-5


def test_proto_loss_invariant_under_foreground_permutation(rng):
    bank = init_bank(1, 3, 6, seed=21)
    H = W = 4
    emb = unit_cols(rng, 6, H * W).reshape(6, H, W)
    gt = np.zeros((1, H, W))
    pix = rng.choice(H * W, size=6, replace=False)
    for p in pix:
        gt[0, p // W, p % W] = float(rng.uniform(0.3, 1.0))
    base = proto_loss(emb, bank, gt, LossWeights(alpha=1.0, beta=1.0))

    plans = plan_proto(emb, bank, gt, joint_offset=0)
    (plan,) = plans
    perm = rng.permutation(len(plan.ys))
    from dataclasses import replace

    permuted = replace(
        plan,
        ys=plan.ys[perm],
        xs=plan.xs[perm],
        confidences=plan.confidences[perm],
        assignment=type(plan.assignment)(
            Q=plan.assignment.Q[:, perm],
            targets=plan.assignment.targets[perm],
            iterations=plan.assignment.iterations,
        ),
    )
    shuffled = proto_loss_from_plan(emb, bank, [permuted], LossWeights(alpha=1.0, beta=1.0))
    assert shuffled.value == pytest.approx(base.value, rel=1e-12)


def test_sinkhorn_plan_equivariant_under_pixel_permutation(rng):
    # Permuting foreground pixels permutes the assignment columns: the plan
    # construction itself cannot depend on pixel order.
    from protopose.protobank import sinkhorn_assign

    logits = rng.normal(size=(3, 8))
    perm = rng.permutation(8)
    a = sinkhorn_assign(logits, kappa=0.5, iters=4)
    b = sinkhorn_assign(logits[:, perm], kappa=0.5, iters=4)
    assert np.abs(a.Q[:, perm] - b.Q).max() < 1e-12
    assert (a.targets[perm] == b.targets).all()


def test_ppd_zero_iff_aligned_ppc_positive(rng):
    bank = init_bank(1, 2, 4, seed=22)
    H = W = 3
    gt = np.zeros((1, H, W))
    gt[0, 1, 1] = 1.0
    emb = np.zeros((4, H, W))
    emb[:, :, :] = bank.P[0, 0][:, None, None]  # aligned with prototype 0
    w = LossWeights(alpha=0.0, beta=1.0, gamma=0.0)
    # self-cosine rounds to 1 - O(eps), so PPD lands at O(eps^2) rather than 0
    assert proto_loss(emb, bank, gt, w).value < 1e-30
    wc = LossWeights(alpha=1.0, beta=0.0, gamma=0.0)
    aligned_ppc = proto_loss(emb, bank, gt, wc).value
    assert aligned_ppc > 0.0  # softmax never reaches probability 1

    tilt = emb.copy()
    tilt[:, 1, 1] = unit_cols(rng, 4, 1)[:, 0]
    plans = plan_proto(emb, bank, gt, joint_offset=0)
    tilted_ppc = proto_loss_from_plan(tilt, bank, plans, wc).value
    assert tilted_ppc > aligned_ppc  # alignment minimizes the contrastive term
    tilted_ppd = proto_loss_from_plan(tilt, bank, plans, w).value
    assert tilted_ppd > 0.0


# --- kpl / mdt ---------------------------------------------------------------


def tiny_registry():
    reg = SkeletonRegistry()
    reg.register(
        SkeletonSpec("a", (JointDef(0, "a0", 0.05), JointDef(1, "a1", 0.05)))
    )
    reg.register(SkeletonSpec("b", (JointDef(0, "b0", 0.05),)))
    return reg


def kpl_fixture(rng, H=5, W=5):
    reg = tiny_registry()
    bank = init_bank(reg.total_joints, 2, 6, seed=23)
    emb = unit_cols(rng, 6, H * W).reshape(6, H, W)
    gt = np.zeros((2, H, W))
    gt[0, 2, 2] = 1.0
    gt[1, 1, 3] = 0.8
    heads = {0: rng.normal(size=(2, H, W)), 1: rng.normal(size=(1, H, W))}
    return reg, bank, emb, gt, heads


def test_kpl_is_mse_plus_delta_proto(rng):
    reg, bank, emb, gt, heads = kpl_fixture(rng)
    w = LossWeights()
    lv = kpl_loss(heads, {0: gt}, emb, bank, w, reg)
    mse = joint_mse(heads[0], gt, visibility_from_gt(gt))
    proto = proto_loss(emb, bank, gt, w, joint_offset=reg.offset(0))
    assert lv.value == pytest.approx(mse.value + w.delta * proto.value, rel=1e-12)
    assert rel_err(lv.grads["head.0"], mse.grads["pred"]) < 1e-15
    assert rel_err(lv.grads["emb"], w.delta * proto.grads["emb"]) < 1e-15


def test_kpl_perfect_head_and_alignment_is_negligible(rng):
    reg = tiny_registry()
    bank = init_bank(reg.total_joints, 2, 6, seed=24)
    H = W = 5
    gt = np.zeros((2, H, W))
    gt[0, 2, 2] = 1.0
    emb = np.zeros((6, H, W))
    emb[:, :, :] = bank.P[0, 0][:, None, None]
    heads = {0: gt.copy(), 1: np.zeros((1, H, W))}
    lv = kpl_loss(heads, {0: gt}, emb, bank, LossWeights(), reg)
    # The heatmap and distance terms vanish exactly; the contrastive term
    # cannot (softmax of bounded cosines), but it enters at alpha * delta.
    assert lv.value < 1e-6
    assert lv.parts["hm"] == 0.0


def test_kpl_missing_label_raises(rng):
    reg, bank, emb, gt, heads = kpl_fixture(rng)
    with pytest.raises(MissingLabel):
        kpl_loss(heads, {}, emb, bank, LossWeights(), reg)
    with pytest.raises(MissingLabel):
        kpl_loss({1: heads[1]}, {0: gt}, emb, bank, LossWeights(), reg)


def test_kpl_rejects_two_labels(rng):
    reg, bank, emb, gt, heads = kpl_fixture(rng)
    with pytest.raises(InvalidSpec):
        kpl_loss(heads, {0: gt, 1: np.zeros((1, 5, 5))}, emb, bank, LossWeights(), reg)


def test_mdt_is_addition():
    a = LossValue(0.3, {"x": np.array([1.0, 2.0])})
    b = LossValue(0.1, {"x": np.array([10.0, 0.0]), "y": np.array([3.0])})
    lv = mdt_loss(a, b)
    assert lv.value == pytest.approx(0.4, abs=1e-15)
    assert (lv.grads["x"] == np.array([11.0, 2.0])).all()
    assert (lv.grads["y"] == np.array([3.0])).all()


def test_mdt_with_zero_css_equals_kpl(rng):
    a = LossValue(0.7, {"x": np.array([4.0])})
    lv = mdt_loss(a, LossValue(0.0, {}))
    assert lv.value == a.value
    assert (lv.grads["x"] == a.grads["x"]).all()


def test_combine_is_linear(rng):
    g1, g2 = rng.normal(size=3), rng.normal(size=3)
    a = LossValue(1.5, {"p": g1})
    b = LossValue(0.25, {"p": g2})
    lv = combine([(2.0, a), (4.0, b)])
    assert lv.value == pytest.approx(2.0 * 1.5 + 4.0 * 0.25, rel=1e-15)
    assert np.allclose(lv.grads["p"], 2.0 * g1 + 4.0 * g2, rtol=1e-15)


# --- invariant sweeps --------------------------------------------------------


def test_loss_scalars_nonnegative_100_trials(rng):
    for _ in range(100):
        J, H, W = int(rng.integers(1, 4)), 4, 4
        pred = rng.normal(size=(J, H, W))
        target = rng.normal(size=(J, H, W))
        assert joint_mse(pred, target).value >= 0.0
        M, N = int(rng.integers(2, 5)), int(rng.integers(1, 12))
        logits = rng.uniform(-1, 1, size=(M, N))
        targets = rng.integers(0, M, size=N)
        confs = rng.uniform(0.05, 1.0, size=N)
        assert ppc_loss(logits, targets, confs).value >= 0.0
        assert ppd_loss(logits, targets, confs).value >= 0.0


def test_ppc_entropy_bound_argmax_targets_100_trials(rng):
    # With each target the column argmax, softmax assigns it >= 1/M, so the
    # per-column CE is <= ln M regardless of temperature.
    for _ in range(100):
        M, N = int(rng.integers(2, 6)), int(rng.integers(1, 16))
        logits = rng.uniform(-1, 1, size=(M, N))
        targets = np.argmax(logits, axis=0)
        confs = rng.uniform(0.05, 1.0, size=N)
        T = float(rng.uniform(1.0, 3.0))
        lv = ppc_loss(logits, targets, confs, temperature=T)
        assert lv.value <= np.log(M) * confs.max() + 1e-12


def test_ppc_general_bound_cosine_logits_100_trials(rng):
    # Arbitrary targets on cosine-bounded logits: CE <= ln(M e^(2/T)).
    for _ in range(100):
        M, N = int(rng.integers(2, 6)), int(rng.integers(1, 16))
        logits = rng.uniform(-1, 1, size=(M, N))
        targets = rng.integers(0, M, size=N)
        confs = rng.uniform(0.05, 1.0, size=N)
        T = float(rng.uniform(1.0, 3.0))
        lv = ppc_loss(logits, targets, confs, temperature=T)
        assert lv.value <= (np.log(M) + 2.0 / T) * confs.max() + 1e-12


def test_fd_sweep_all_losses_100_trials(rng):
    """Acceptance-grade FD sweep at the loss level (inputs O(1))."""
    worst = 0.0
    for _ in range(100):
        J = int(rng.integers(1, 3))
        pred = rng.normal(size=(J, 4, 4))
        target = rng.normal(size=(J, 4, 4))
        lv = joint_mse(pred, target)
        fd = fd_gradient(lambda p: joint_mse(p, target).value, pred.copy(), EPS)
        worst = max(worst, rel_err(lv.grads["pred"], fd))

        M, N = int(rng.integers(2, 4)), int(rng.integers(2, 10))
        logits = rng.normal(size=(M, N))
        targets = rng.integers(0, M, size=N)
        confs = rng.uniform(0.1, 1.0, size=N)
        lv = ppc_loss(logits, targets, confs)
        fd = fd_gradient(lambda l: ppc_loss(l, targets, confs).value, logits.copy(), EPS)
        worst = max(worst, rel_err(lv.grads["logits"], fd))
        lv = ppd_loss(logits, targets, confs)
        fd = fd_gradient(lambda l: ppd_loss(l, targets, confs).value, logits.copy(), EPS)
        worst = max(worst, rel_err(lv.grads["logits"], fd))
    assert worst < 1e-5
