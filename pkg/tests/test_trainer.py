from dataclasses import replace

import numpy as np
import pytest

from cdpad.dda import SubnetConfig
from cdpad.errors import ConfigError, ShapeError, StageError
from cdpad.trainer import (FROZEN_PREFIXES, PhaseConfig, adapt_source_phase, adapt_with_regularizer, augment,
                           augment_batch, build_state, check_label_overlap, domain_accuracy, domain_probs,
                           score_split, source_embeddings, target_embeddings, train_domain_classifier,
                           train_target_phase, _dev_key)

P1 = PhaseConfig(phase="target", epochs=2, patience=5, seed=3)
P2 = PhaseConfig(phase="adapt", epochs=2, patience=5, lr=1e-3, seed=3)


@pytest.fixture(scope="module")
def trained(small_ds):
    st = build_state(subnet_config=SubnetConfig("dense", "pool3"), seed=3)
    train_target_phase(st, small_ds.splits["train"], small_ds.splits["dev"], P1)
    return st


def fresh_from(trained, subnet="dense"):
    st = build_state(subnet_config=SubnetConfig(subnet, "pool3"), seed=3)
    st.params.restore({k: v for k, v in trained.params.snapshot().items() if not k.startswith(("subnet", "buffer:"))})
    st.stages = list(trained.stages)
    return st


# ---------------------------------------------------------------- augmentation

def test_augment_double_flip_identity():
    img = np.random.default_rng(0).random((8, 6, 1)).astype(np.float32)
    rng = np.random.default_rng(1)
    twice = augment(augment(img, rng, flip=True, angle=0.0), rng, flip=True, angle=0.0)
    assert twice.tobytes() == img.tobytes()


def test_augment_zero_rotation_identity():
    img = np.random.default_rng(0).random((8, 8, 1)).astype(np.float32)
    np.testing.assert_allclose(augment(img, np.random.default_rng(0), flip=False, angle=0.0), img, atol=1e-6)


def test_augment_rotation_fills_zero_and_bounds():
    img = np.ones((16, 16, 1), dtype=np.float32)
    out = augment(img, np.random.default_rng(0), flip=False, angle=10.0)
    assert out[0, 0, 0] == 0.0 and out[8, 8, 0] == pytest.approx(1.0)


def test_augment_seeded_batch_identical():
    x = np.random.default_rng(0).random((4, 10, 10, 1)).astype(np.float32)
    a = augment_batch(x, np.random.default_rng(9))
    b = augment_batch(x, np.random.default_rng(9))
    assert a.tobytes() == b.tobytes()


def test_augment_requires_single_channel():
    with pytest.raises(ShapeError):
        augment(np.zeros((4, 4, 2)), np.random.default_rng(0))


# ---------------------------------------------------------------- config

def test_phase_config_validation():
    with pytest.raises(ConfigError):
        PhaseConfig(variant="coral")
    with pytest.raises(ConfigError):
        PhaseConfig(weight=-1.0)


# ---------------------------------------------------------------- phase 1

def test_zero_epochs_unchanged(small_ds):
    st = build_state(seed=3)
    before = st.params.checksum()
    train_target_phase(st, small_ds.splits["train"], small_ds.splits["dev"], replace(P1, epochs=0))
    assert st.params.checksum() == before


def test_target_phase_empty_split(small_ds):
    st = build_state(seed=3)
    empty = small_ds.splits["train"]
    empty = replace(empty, labels=empty.labels[:0], source=empty.source[:0], target=empty.target[:0])
    with pytest.raises(StageError):
        train_target_phase(st, empty, small_ds.splits["dev"], P1)


def test_early_stopping_restores_best(trained, small_ds):
    hist = trained.history["target"]
    best_epoch = trained.history["best_epoch"][-1]["epoch"]
    keys = [(h["dev_acer"], h["dev_loss"]) for h in hist]
    if best_epoch:
        assert keys[best_epoch - 1] == min(keys)
        assert _dev_key(trained, small_ds.splits["dev"], "target", "target") == keys[best_epoch - 1]


def test_target_phase_only_trains_backbone_and_pad_head(small_ds):
    st = build_state(seed=3)
    other = st.params.checksum(["domain_head.", "subnet."])
    train_target_phase(st, small_ds.splits["train"], small_ds.splits["dev"], replace(P1, epochs=1))
    assert st.params.checksum(["domain_head.", "subnet."]) == other
    assert st.params.trainable_names() == []


# ---------------------------------------------------------------- phase 2

def test_adapt_requires_phase1(small_ds):
    st = build_state(seed=3)
    with pytest.raises(StageError):
        adapt_source_phase(st, small_ds.splits["train"], small_ds.splits["dev"], P2)


def test_adapt_needs_subnet(trained, small_ds):
    st = fresh_from(trained, "none")
    with pytest.raises(StageError):
        adapt_source_phase(st, small_ds.splits["train"], small_ds.splits["dev"], P2)


def test_adapt_freezes_backbone_and_classifier(trained, small_ds):
    st = fresh_from(trained)
    frozen = st.params.checksum(FROZEN_PREFIXES)
    head = st.params.checksum(["domain_head."])
    sub = st.params.checksum(["subnet."])
    adapt_source_phase(st, small_ds.splits["train"], small_ds.splits["dev"], replace(P2, patience=10))
    assert st.params.checksum(FROZEN_PREFIXES) == frozen
    assert st.params.checksum(["domain_head."]) == head
    if st.history["best_epoch"][-1]["epoch"]:
        assert st.params.checksum(["subnet."]) != sub


def test_adapt_lr_zero_leaves_parameters(trained, small_ds):
    """lr 0 moves no learnable weight; only batch-norm running statistics may track the data."""
    st = fresh_from(trained)
    ref = fresh_from(trained)
    te = small_ds.splits["test"]
    before = st.params.checksum()
    adapt_source_phase(st, small_ds.splits["train"], small_ds.splits["dev"], replace(P2, lr=0.0))
    assert st.params.checksum() == before
    for name, buf in st.params.buffers.items():
        ref.params.buffers[name][...] = buf
    a = score_split(st, te, "source", "source").scores
    assert a.tobytes() == score_split(ref, te, "source", "source").scores.tobytes()


def test_label_overlap_enforced():
    check_label_overlap(np.array([0, 1]), np.array([1, 0, 1]))
    with pytest.raises(StageError):
        check_label_overlap(np.array([0, 1]), np.array([1, 1]))


def test_adapt_rejects_non_overlapping_labels(trained, small_ds):
    st = fresh_from(trained)
    tr = small_ds.splits["train"]
    only_bona = replace(tr, labels=np.ones_like(tr.labels))
    with pytest.raises(StageError):
        adapt_source_phase(st, tr, small_ds.splits["dev"], P2, only_bona)


# ---------------------------------------------------------------- regularized variants

def test_lambda_zero_matches_plain_adaptation(trained, small_ds):
    tr, dv = small_ds.splits["train"], small_ds.splits["dev"]
    a = fresh_from(trained)
    adapt_source_phase(a, tr, dv, P2, tr)
    b = fresh_from(trained)
    adapt_with_regularizer(b, tr, dv, replace(P2, variant="mmd", weight=0.0), tr)
    la = [s["cdpad"] for s in a.history["adapt_steps"]]
    lb = [s["total"] for s in b.history["adapt_mmd_steps"]]
    assert la == lb
    assert a.params.checksum(["subnet."]) == b.params.checksum(["subnet."])


@pytest.mark.parametrize("variant", ["mmd", "dil"])
def test_total_is_cdpad_plus_weighted_reg(trained, small_ds, variant):
    tr, dv = small_ds.splits["train"], small_ds.splits["dev"]
    st = fresh_from(trained)
    adapt_with_regularizer(st, tr, dv, replace(P2, epochs=1, variant=variant, weight=0.7), tr)
    steps = st.history[f"adapt_{variant}_steps"]
    assert steps
    for s in steps:
        assert abs(s["total"] - (s["cdpad"] + 0.7 * s["reg"])) <= 1e-6
    assert st.params.checksum(FROZEN_PREFIXES) == trained.params.checksum(FROZEN_PREFIXES)


def test_mmd_needs_target_batches(trained, small_ds):
    st = fresh_from(trained)
    with pytest.raises(StageError):
        adapt_with_regularizer(st, small_ds.splits["train"], small_ds.splits["dev"], replace(P2, variant="mmd"))


def test_idr_requires_domain_stage(trained, small_ds):
    st = fresh_from(trained)
    with pytest.raises(StageError):
        adapt_with_regularizer(st, small_ds.splits["train"], small_ds.splits["dev"], replace(P2, variant="idr"))


# ---------------------------------------------------------------- domain classifier

def test_domain_head_zero_init_half_accuracy(trained, small_ds):
    st = fresh_from(trained)
    te = small_ds.splits["test"]
    es, et = source_embeddings(st, te.source), target_embeddings(st, te.target)
    p = domain_probs(st, np.concatenate([es, et]))
    np.testing.assert_allclose(p, 0.5)
    assert domain_accuracy(p, np.r_[np.zeros(len(es)), np.ones(len(et))]) == 0.5


def test_domain_stage_touches_only_domain_head(trained, small_ds):
    st = fresh_from(trained)
    tr, dv = small_ds.splits["train"], small_ds.splits["dev"]
    others = st.params.checksum(FROZEN_PREFIXES + ("subnet.",))
    head = st.params.checksum(["domain_head."])
    train_domain_classifier(st, tr, tr, PhaseConfig(phase="domain", epochs=3, lr=1e-3, seed=3), dv, dv)
    assert st.params.checksum(FROZEN_PREFIXES + ("subnet.",)) == others
    assert st.params.checksum(["domain_head."]) != head
    assert "domain" in st.stages


def test_domain_stage_needs_both_domains(trained, small_ds):
    st = fresh_from(trained)
    with pytest.raises(StageError):
        train_domain_classifier(st, small_ds.splits["train"], None, PhaseConfig())


def test_idr_adaptation_runs_and_keeps_heads_frozen(trained, small_ds):
    st = fresh_from(trained)
    tr, dv = small_ds.splits["train"], small_ds.splits["dev"]
    train_domain_classifier(st, tr, tr, PhaseConfig(phase="domain", epochs=3, lr=1e-3, seed=3), dv, dv)
    frozen = st.params.checksum(FROZEN_PREFIXES + ("domain_head.",))
    adapt_with_regularizer(st, tr, dv, replace(P2, epochs=1, variant="idr"), tr)
    assert st.params.checksum(FROZEN_PREFIXES + ("domain_head.",)) == frozen
    assert "adapt_idr" in st.stages


# ---------------------------------------------------------------- determinism

def test_two_runs_bit_identical(small_ds):
    tr, dv, te = small_ds.splits["train"], small_ds.splits["dev"], small_ds.splits["test"]
    out = []
    for _ in range(2):
        st = build_state(seed=5)
        train_target_phase(st, tr, dv, replace(P1, epochs=1, seed=5))
        adapt_source_phase(st, tr, dv, replace(P2, epochs=1, seed=5), tr)
        out.append(score_split(st, te, "source", "source").scores.tobytes())
    assert out[0] == out[1]
