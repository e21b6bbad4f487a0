"""Trainable model, optimizer, three-phase schedule, transfer protocol, and
the finite-difference gradient checker."""

import copy

import numpy as np
import pytest

import protopose.trainer as trainer_mod
from protopose.errors import ConfigError, InvalidSpec, NumericalError
from protopose.losses import LossWeights, joint_mse
from protopose.protobank import init_bank
from protopose.skeletons import (
    JointDef,
    Keypoint,
    KeypointSet,
    SkeletonRegistry,
    SkeletonSpec,
)
from protopose.synthdata import Sample, dataset
from protopose.trainer import (
    GUARD_NORM,
    AdamW,
    TrainConfig,
    TransferConfig,
    embedding_backward_flat,
    forward_embedding,
    forward_embedding_flat,
    forward_head,
    forward_head_flat,
    grad_check,
    head_backward_flat,
    init_params,
    train,
    transfer,
)

from oracles import fd_gradient, rel_err


def toy_registry(joint_counts=(2, 3)):
    reg = SkeletonRegistry()
    for i, n in enumerate(joint_counts):
        joints = tuple(JointDef(j, f"f{i}_{j}", 0.05) for j in range(n))
        reg.register(SkeletonSpec(f"fam{i}", joints))
    return reg


def toy_sample(rng, dataset_id, num_joints, C=4, H=8, W=8):
    feats = rng.normal(size=(C, H, W)).astype(np.float32)
    pts = [
        Keypoint(x=float(rng.uniform(2, W - 3)), y=float(rng.uniform(2, H - 3)))
        for _ in range(num_joints)
    ]
    return Sample(
        features=feats,
        labeled_dataset=dataset_id,
        keypoints=KeypointSet(dataset_id=dataset_id, points=pts),
        latent_pose=np.zeros((12, 2)),
    )


def toy_cfg(**kw):
    base = dict(
        epochs=2,
        batch_size=4,
        seed=0,
        embed_dim=6,
        embed_hidden=8,
        protos_per_joint=2,
        kmeans_k=4,
        phase1_end=0.34,
        phase2_end=0.67,
        cross_start=0.34,
    )
    base.update(kw)
    return TrainConfig(**base)


# --- config -------------------------------------------------------------------


def test_config_defaults_follow_training_recipe():
    cfg = TrainConfig()
    assert cfg.lr == 1e-3
    assert cfg.lr_drops == ((0.5, 0.1), (0.9, 0.1))
    assert cfg.weight_decay == 0.1
    assert (cfg.phase1_end, cfg.phase2_end) == (0.5, 0.9)


def test_config_validation_errors():
    with pytest.raises(ConfigError):
        toy_cfg(epochs=0).validate()
    with pytest.raises(ConfigError):
        toy_cfg(lr=0.0).validate()
    with pytest.raises(ConfigError):
        toy_cfg(phase1_end=0.9, phase2_end=0.5).validate()
    with pytest.raises(ConfigError):
        toy_cfg(use_css=True, use_proto=False).validate()
    with pytest.raises(ConfigError):
        toy_cfg(momentum=1.5).validate()


# --- embedding forward/backward -------------------------------------------------


def test_embedding_output_norms_are_unit(rng):
    reg = toy_registry()
    cfg = toy_cfg()
    params = init_params(reg, 4, cfg)
    feats = rng.normal(size=(4, 8, 8))
    emb, _ = forward_embedding(feats, params)
    norms = np.sqrt((emb * emb).sum(axis=0))
    assert np.abs(norms - 1.0).max() < 1e-6


def test_embedding_guard_path_on_zero_input():
    reg = toy_registry()
    cfg = toy_cfg()
    params = init_params(reg, 4, cfg)
    # Zero features with zero biases leave the raw embedding at exactly 0.
    X = np.zeros((4, 5))
    Ehat, cache = forward_embedding_flat(X, params)
    assert cache["guard"].all()
    assert np.array_equal(Ehat[0], np.ones(5))
    assert not Ehat[1:].any()
    # Guarded columns block gradient flow entirely.
    grads = embedding_backward_flat(cache, np.ones_like(Ehat), params)
    assert all(not g.any() for g in grads.values())


def test_guard_threshold_matches_constant(rng):
    reg = toy_registry()
    params = init_params(reg, 4, toy_cfg())
    params["emb.b2"][:] = 0.0
    X = np.zeros((4, 1))
    E_raw = params["emb.W2"] @ (np.zeros((8, 1))) + params["emb.b2"][:, None]
    assert np.linalg.norm(E_raw) < GUARD_NORM


def test_embedding_vjp_matches_finite_differences(rng):
    reg = toy_registry()
    cfg = toy_cfg()
    params = init_params(reg, 4, cfg)
    # Fresh inits leave raw embedding norms ~1e-3 where the normalization
    # curvature dominates finite differences; scale to operating range.
    params["emb.W1"] *= 30.0
    params["emb.W2"] *= 30.0
    X = rng.normal(size=(4, 7))
    U = rng.normal(size=(cfg.embed_dim, 7))  # cotangent

    Ehat, cache = forward_embedding_flat(X, params)
    grads = embedding_backward_flat(cache, U, params)

    emb_keys = ["emb.W1", "emb.b1", "emb.W2", "emb.b2"]
    V = {k: rng.normal(size=params[k].shape) for k in emb_keys}
    analytic = sum(float((grads[k] * V[k]).sum()) for k in emb_keys)

    h = 1e-6
    def shifted(sign):
        p = {k: v.copy() for k, v in params.items()}
        for k in emb_keys:
            p[k] += sign * h * V[k]
        out, _ = forward_embedding_flat(X, p)
        return float((out * U).sum())

    fd = (shifted(+1.0) - shifted(-1.0)) / (2.0 * h)
    assert abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-12) < 1e-5


# --- heads ----------------------------------------------------------------------


def test_head_affine_map_constant_bias(rng):
    reg = toy_registry()
    params = init_params(reg, 4, toy_cfg())
    params["head.0.A"][:] = 0.0
    params["head.0.b"][:] = 0.5
    feats = rng.normal(size=(4, 6, 6))
    out = forward_head(feats, params, 0)
    assert out.shape == (2, 6, 6)
    assert np.all(out == 0.5)


def test_heads_are_isolated(rng):
    reg = toy_registry()
    params = init_params(reg, 4, toy_cfg())
    feats = rng.normal(size=(4, 6, 6))
    before = forward_head(feats, params, 1)
    params["head.0.A"][:] += 1.0
    assert np.array_equal(forward_head(feats, params, 1), before)


def test_head_unknown_dataset_raises_index_error(rng):
    reg = toy_registry()
    params = init_params(reg, 4, toy_cfg())
    with pytest.raises(IndexError):
        forward_head_flat(np.zeros((4, 3)), params, 7)


def test_head_gradient_matches_finite_differences(rng):
    reg = toy_registry()
    cfg = toy_cfg()
    params = init_params(reg, 4, cfg)
    feats = rng.normal(size=(4, 6, 6))
    target = rng.normal(size=(2, 6, 6))
    X = feats.reshape(4, -1)

    def loss_of_A(A):
        p = dict(params)
        p["head.0.A"] = A
        pred = forward_head_flat(X, p, 0).reshape(2, 6, 6)
        return joint_mse(pred, target).value

    pred = forward_head_flat(X, params, 0).reshape(2, 6, 6)
    mse = joint_mse(pred, target)
    analytic = head_backward_flat(X, mse.grads["pred"].reshape(2, -1), 0)
    fd = fd_gradient(loss_of_A, params["head.0.A"].copy(), eps=1e-6)
    assert rel_err(analytic["head.0.A"], fd) < 1e-6


# --- optimizer ------------------------------------------------------------------


def adamw_reference(p0, gs, lr, wd, beta1=0.9, beta2=0.999, eps=1e-8):
    p = p0.copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(gs, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        p = p - lr * (m / (1 - beta1**t)) / (np.sqrt(v / (1 - beta2**t)) + eps)
        p = p - lr * wd * p
    return p


def test_adamw_matches_reference_updates(rng):
    p0 = rng.normal(size=(3, 4))
    gs = [rng.normal(size=(3, 4)) for _ in range(5)]
    params = {"w": p0.copy()}
    opt = AdamW(weight_decay=0.1)
    for g in gs:
        opt.step(params, {"w": g}, lr=1e-2, trainable={"w"})
    expect = adamw_reference(p0, gs, lr=1e-2, wd=0.1)
    assert rel_err(params["w"], expect) < 1e-12


def test_adamw_lr_zero_is_a_no_op(rng):
    p0 = rng.normal(size=(4,))
    params = {"w": p0.copy()}
    opt = AdamW(weight_decay=0.1)
    opt.step(params, {"w": rng.normal(size=(4,))}, lr=0.0, trainable={"w"})
    assert np.array_equal(params["w"], p0)
    opt2 = AdamW(weight_decay=0.0)
    params2 = {"w": p0.copy()}
    opt2.step(params2, {"w": rng.normal(size=(4,))}, lr=0.0, trainable={"w"})
    assert np.array_equal(params2["w"], p0)


def test_adamw_skips_frozen_blocks(rng):
    pa, pb = rng.normal(size=(3,)), rng.normal(size=(3,))
    params = {"a": pa.copy(), "b": pb.copy()}
    grads = {"a": np.ones(3), "b": np.ones(3)}
    AdamW().step(params, grads, lr=1e-2, trainable={"a"})
    assert not np.array_equal(params["a"], pa)
    assert np.array_equal(params["b"], pb)


def test_adamw_missing_gradient_still_decays(rng):
    # A trainable block without a gradient this step gets zero-gradient
    # moments; with nonzero decay it still shrinks.
    p0 = np.full(3, 2.0)
    params = {"w": p0.copy()}
    AdamW(weight_decay=0.1).step(params, {}, lr=1e-2, trainable={"w"})
    assert np.all(np.abs(params["w"]) < np.abs(p0))


# --- training schedule -----------------------------------------------------------


def two_family_toy(rng, n=12, C=4, H=8, W=8):
    reg = toy_registry((2, 3))
    sets = {
        0: [toy_sample(rng, 0, 2, C, H, W) for _ in range(n)],
        1: [toy_sample(rng, 1, 3, C, H, W) for _ in range(n)],
    }
    return reg, sets


def test_train_rejects_single_family(rng):
    reg = toy_registry((2,))
    sets = {0: [toy_sample(rng, 0, 2)]}
    with pytest.raises(ConfigError):
        train(toy_cfg(), sets, reg)


def test_train_rejects_empty_family(rng):
    reg, sets = two_family_toy(rng, n=2)
    sets[1] = []
    with pytest.raises(InvalidSpec):
        train(toy_cfg(), sets, reg)


@pytest.mark.filterwarnings("ignore:invalid value encountered")
def test_train_raises_on_non_finite_features(rng):
    reg, sets = two_family_toy(rng, n=2)
    sets[0][0].features[0, 0, 0] = np.inf
    with pytest.raises(NumericalError):
        train(toy_cfg(epochs=1, phase1_end=0.9, phase2_end=1.0), sets, reg)


def test_phase1_trains_embedding_and_bank_only(rng):
    reg, sets = two_family_toy(rng)
    cfg = toy_cfg(epochs=1, phase1_end=0.9, phase2_end=1.0)
    init = init_params(reg, 4, cfg)
    bank0 = init_bank(reg.total_joints, cfg.protos_per_joint, cfg.embed_dim, cfg.seed)
    res = train(cfg, sets, reg)
    for k in init:
        if k.startswith("head."):
            assert np.array_equal(res.params[k], init[k]), k
        else:
            assert not np.array_equal(res.params[k], init[k]), k
    assert not np.array_equal(res.bank.P, bank0.P)
    assert res.history[0]["phase"] == 1


def test_phase2_freezes_bank(rng):
    reg, sets = two_family_toy(rng)
    cfg = toy_cfg(epochs=1, phase1_end=0.2, phase2_end=0.9)
    bank0 = init_bank(reg.total_joints, cfg.protos_per_joint, cfg.embed_dim, cfg.seed)
    init = init_params(reg, 4, cfg)
    res = train(cfg, sets, reg)
    assert res.history[0]["phase"] == 2
    assert np.array_equal(res.bank.P, bank0.P)
    assert not np.array_equal(res.params["head.0.A"], init["head.0.A"])
    assert not np.array_equal(res.params["emb.W1"], init["emb.W1"])


def test_phase3_engages_css_and_keeps_bank_frozen(rng):
    reg, sets = two_family_toy(rng)
    cfg = toy_cfg(epochs=1, phase1_end=0.2, phase2_end=0.4, cross_start=1.0)
    bank0 = init_bank(reg.total_joints, cfg.protos_per_joint, cfg.embed_dim, cfg.seed)
    res = train(cfg, sets, reg)
    assert res.history[0]["phase"] == 3
    assert np.array_equal(res.bank.P, bank0.P)
    assert "css" in res.history[0]


def test_bank_moves_only_through_momentum_updates(rng, monkeypatch):
    reg, sets = two_family_toy(rng)
    cfg = toy_cfg(epochs=1, phase1_end=0.9, phase2_end=1.0)
    bank0 = init_bank(reg.total_joints, cfg.protos_per_joint, cfg.embed_dim, cfg.seed)
    calls = []
    monkeypatch.setattr(
        trainer_mod, "momentum_update", lambda *a, **k: calls.append(1)
    )
    res = train(cfg, sets, reg)
    assert calls  # phase 1 schedules updates
    assert np.array_equal(res.bank.P, bank0.P)  # and nothing else writes the bank


def test_train_deterministic_repeats_bitwise(rng):
    reg1, sets = two_family_toy(rng)
    cfg = toy_cfg(epochs=3)
    r1 = train(toy_cfg(epochs=3), sets, reg1)
    r2 = train(toy_cfg(epochs=3), sets, toy_registry((2, 3)))
    assert r1.history == r2.history
    for k in r1.params:
        assert np.array_equal(r1.params[k], r2.params[k]), k
    assert np.array_equal(r1.bank.P, r2.bank.P)


def test_lr_drops_reflect_in_history(rng):
    reg, sets = two_family_toy(rng, n=4)
    cfg = toy_cfg(epochs=4, lr=1e-3, lr_drops=((0.5, 0.1),), phase1_end=0.2, phase2_end=0.3)
    res = train(cfg, sets, reg)
    lrs = [row["lr"] for row in res.history]
    assert lrs == [1e-3, 1e-3, 1e-4, 1e-4]


def test_smoke_run_phase1_ppd_strictly_decreases(fams, registry3):
    sets = {
        did: dataset(fams.canonical, fam, did, 200, "train", 0)
        for did, fam in enumerate(fams.train_families)
    }
    cfg = TrainConfig(
        epochs=5,
        batch_size=32,
        phase1_end=0.9,
        phase2_end=1.0,
        embed_dim=16,
        embed_hidden=16,
        protos_per_joint=3,
        kmeans_k=16,
        cross_start=0.5,
    )
    res = train(cfg, sets, registry3)
    ppd = [row["ppd"] for row in res.history if row["phase"] == 1]
    assert len(ppd) == 4
    assert all(b < a for a, b in zip(ppd, ppd[1:]))


# --- transfer --------------------------------------------------------------------


@pytest.fixture(scope="module")
def toy_trained():
    rng = np.random.default_rng(77)
    reg, sets = two_family_toy(rng, n=16)
    cfg = toy_cfg(epochs=3, phase1_end=0.34, phase2_end=0.67)
    return train(cfg, sets, reg), rng


def transfer_spec():
    return SkeletonSpec("fam_new", (JointDef(0, "n0", 0.05), JointDef(1, "n1", 0.05)))


def test_transfer_stage1_freezes_embedding_and_old_rows(toy_trained):
    res, rng = toy_trained
    new_samples = [toy_sample(rng, 2, 2) for _ in range(8)]
    out = transfer(res, transfer_spec(), new_samples, TransferConfig(epochs=2, batch_size=4))
    for k in ("emb.W1", "emb.b1", "emb.W2", "emb.b2"):
        assert np.array_equal(out.params[k], res.params[k]), k
    J_old = res.bank.J
    assert np.array_equal(out.bank.P[:J_old], res.bank.P)
    assert out.bank.J == J_old + 2
    # New rows exist, stay unit, and moved off their random initialization.
    fresh = init_bank(2, res.bank.M, res.bank.F, 0)
    new_rows = out.bank.P[J_old:]
    assert np.abs(np.linalg.norm(new_rows, axis=2) - 1.0).max() < 1e-9
    assert not np.array_equal(new_rows, fresh.P)


def test_transfer_extends_registry_without_mutating_original(toy_trained):
    res, rng = toy_trained
    new_samples = [toy_sample(rng, 2, 2) for _ in range(4)]
    out = transfer(res, transfer_spec(), new_samples, TransferConfig(epochs=1, batch_size=4))
    assert out.new_dataset_id == 2
    assert out.registry.num_datasets == 3
    assert res.registry.num_datasets == 2
    assert f"head.{out.new_dataset_id}.A" in out.params


def test_transfer_stage2_moves_embedding(toy_trained):
    res, rng = toy_trained
    new_samples = [toy_sample(rng, 2, 2) for _ in range(8)]
    out = transfer(
        res, transfer_spec(), new_samples,
        TransferConfig(epochs=1, batch_size=4, stage2=True, stage2_epochs=1),
    )
    assert not np.array_equal(out.params["emb.W1"], res.params["emb.W1"])
    # The bank is frozen throughout stage 2: rows match the stage-1 result.
    stage1 = transfer(res, transfer_spec(), new_samples, TransferConfig(epochs=1, batch_size=4))
    assert np.array_equal(out.bank.P, stage1.bank.P)


def test_transfer_requires_samples(toy_trained):
    res, _ = toy_trained
    with pytest.raises(InvalidSpec):
        transfer(res, transfer_spec(), [], TransferConfig())


def test_transfer_config_validation():
    with pytest.raises(ConfigError):
        TransferConfig(epochs=0).validate()
    with pytest.raises(ConfigError):
        TransferConfig(momentum=1.0).validate()
    with pytest.raises(ConfigError):
        TransferConfig(stage2=True, stage2_epochs=0).validate()


# --- gradient checker --------------------------------------------------------------


@pytest.fixture(scope="module")
def check_setup():
    rng = np.random.default_rng(5)
    reg = toy_registry((2, 3))
    # Unit weights: production weights put some gradient components under
    # the finite-difference cancellation floor. The losses are linear in the
    # weights, so checking at 1.0 validates the same chain. The loose CSS
    # gate keeps the self-supervision branch from filtering everything out
    # under random heads.
    from protopose.css import CssConfig

    cfg = toy_cfg(
        weights=LossWeights(alpha=1.0, beta=1.0, gamma=1.0, delta=1.0, zeta=1.0),
        css=CssConfig(confidence_threshold=0.0, distance_threshold=1e9),
    )
    params = init_params(reg, 4, cfg)
    # Operating-scale embedding weights: fresh inits sit so close to the
    # normalization guard that finite differences lose their validity.
    params["emb.W1"] *= 30.0
    params["emb.W2"] *= 30.0
    bank = init_bank(reg.total_joints, cfg.protos_per_joint, cfg.embed_dim, cfg.seed)
    samples = [toy_sample(rng, 0, 2, H=6, W=6), toy_sample(rng, 1, 3, H=6, W=6)]
    return params, bank, reg, samples, cfg


def test_grad_check_heatmap_loss_tight(check_setup):
    params, bank, reg, samples, cfg = check_setup
    report = grad_check(params, bank, reg, samples, cfg, losses=("hm",))
    assert report.max_rel_err() < 1e-6


def test_grad_check_full_chain_on_two_family_toy(check_setup):
    params, bank, reg, samples, cfg = check_setup
    report = grad_check(params, bank, reg, samples, cfg, losses=("mdt",))
    assert report.max_rel_err() < 1e-5
    blocks = {r.block for r in report.rows}
    assert blocks == set(params)


def test_grad_check_rejects_zero_eps(check_setup):
    params, bank, reg, samples, cfg = check_setup
    with pytest.raises(InvalidSpec):
        grad_check(params, bank, reg, samples, cfg, eps=0.0)


def test_grad_check_detects_a_broken_gradient(check_setup, monkeypatch):
    params, bank, reg, samples, cfg = check_setup
    real = trainer_mod.head_backward_flat

    def broken(X, dK, dataset_id):
        out = real(X, dK, dataset_id)
        return {k: -v for k, v in out.items()}  # sign flip

    monkeypatch.setattr(trainer_mod, "head_backward_flat", broken)
    report = grad_check(params, bank, reg, samples, cfg, losses=("hm",))
    assert report.max_rel_err() > 1e-2
