"""Schedule, loss, optimizer, metrics, freezing, checkpoints."""

import numpy as np
import pytest

import adafuse as af
from adafuse.data import SceneDataset, generate_synthetic, stack_batch
from adafuse.gradcheck import grad_check_params
from adafuse.training import (AdamW, CheckpointError, ConfusionMatrix,
                              TrainConfig, TrainingError, cross_entropy,
                              evaluate, fit, format_metrics,
                              load_adapter_checkpoint, load_checkpoint, lr_at,
                              save_checkpoint, train_step)


def tiny_model(seed=0, modalities=("vis", "ir"), use_ffm=False, dtype="float32"):
    cfg = af.ModelConfig(preset="tiny", modalities=modalities,
                         channels=(1,) * len(modalities), density="pair-bi",
                         bottleneck=4, num_classes=5, dtype=dtype, seed=seed)
    cfg.use_ffm = use_ffm
    return af.FusionModel(cfg)


def tiny_dataset(n=8, seed=0):
    return generate_synthetic(n, 32, 32, 5, 2, seed=seed)


# ---------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------

def test_lr_ramp_and_decay_endpoints():
    cfg = TrainConfig(base_lr=1.2e-4, warmup_epochs=10, decay_factor=0.01, epochs=50)
    assert lr_at(0.0, cfg) == 0.0
    assert lr_at(10.0, cfg) == pytest.approx(1.2e-4)
    assert lr_at(50.0, cfg) == pytest.approx(1.2e-4 * 0.01)


def test_lr_is_continuous_and_piecewise_monotone():
    cfg = TrainConfig(base_lr=1e-3, warmup_epochs=5, decay_factor=0.01, epochs=20)
    ts = np.linspace(0, 20, 401)
    lrs = [lr_at(float(t), cfg) for t in ts]
    jumps = np.abs(np.diff(lrs))
    assert jumps.max() < 1e-3 * 0.05          # no discontinuities
    peak = int(np.argmax(lrs))
    assert all(np.diff(lrs[:peak + 1]) >= 0)
    assert all(np.diff(lrs[peak:]) <= 0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(decay_factor=0.0)
    with pytest.raises(ValueError):
        TrainConfig(warmup_epochs=60, epochs=50)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 1e-3})


# ---------------------------------------------------------------------
# cross entropy
# ---------------------------------------------------------------------

def test_uniform_logits_loss_is_ln_k():
    k = 7
    logits = af.Tensor(np.zeros((1, k, 4, 4)))
    labels = np.random.default_rng(0).integers(0, k, (1, 4, 4))
    assert cross_entropy(logits, labels).item() == pytest.approx(np.log(k))


def test_all_ignored_pixels_give_zero_loss():
    logits = af.Tensor(np.random.default_rng(1).normal(size=(1, 3, 2, 2)))
    labels = np.full((1, 2, 2), 255)
    loss = cross_entropy(logits, labels)
    assert loss.item() == 0.0


def test_out_of_range_label_rejected():
    logits = af.Tensor(np.zeros((1, 3, 2, 2)))
    labels = np.full((1, 2, 2), 3)
    with pytest.raises(ValueError, match="class ids"):
        cross_entropy(logits, labels)


@pytest.mark.parametrize("seed", range(3))
def test_cross_entropy_gradient(seed):
    rng = np.random.default_rng(seed)
    logits = af.Tensor(rng.normal(size=(2, 4, 3, 3)), requires_grad=True)
    labels = rng.integers(0, 4, (2, 3, 3))
    labels[0, 0, :] = 255
    err = grad_check_params(lambda: cross_entropy(logits, labels), [logits])
    assert err < 1e-4


def test_ignored_pixels_get_zero_gradient():
    logits = af.Tensor(np.random.default_rng(2).normal(size=(1, 3, 2, 2)),
                       requires_grad=True)
    labels = np.array([[[0, 255], [255, 2]]])
    af.backward(cross_entropy(logits, labels))
    grad = logits.grad
    assert np.all(grad[0, :, 0, 1] == 0.0) and np.all(grad[0, :, 1, 0] == 0.0)
    assert np.any(grad[0, :, 0, 0] != 0.0)


# ---------------------------------------------------------------------
# metrics vs brute-force oracle
# ---------------------------------------------------------------------

def brute_force_metrics(preds, labels, k, ignore=255):
    """Per-class IoU via explicit pixel-set intersection/union."""
    ious = []
    for c in range(k):
        inter = union = 0
        for p, l in zip(preds, labels):
            keep = l != ignore
            pc, lc = (p == c) & keep, (l == c) & keep
            inter += int((pc & lc).sum())
            union += int((pc | lc).sum())
        ious.append(inter / union if union else None)
    present = [v for v in ious if v is not None]
    return ious, (sum(present) / len(present) if present else float("nan"))


@pytest.mark.parametrize("seed", range(5))
def test_confusion_matrix_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    k = 4
    preds = [rng.integers(0, k, (16, 16)) for _ in range(5)]
    labels = [rng.integers(0, k, (16, 16)) for _ in range(5)]
    labels[0][rng.random((16, 16)) < 0.2] = 255
    cm = ConfusionMatrix(k)
    for p, l in zip(preds, labels):
        cm.update(p, l)
    want_iou, want_miou = brute_force_metrics(preds, labels, k)
    got = cm.per_class_iou()
    for c in range(k):
        if want_iou[c] is None:
            assert np.isnan(got[c])
        else:
            assert got[c] == pytest.approx(want_iou[c], abs=1e-15)
    assert cm.miou() == pytest.approx(want_miou, abs=1e-15)


def test_perfect_prediction_gives_full_scores():
    rng = np.random.default_rng(3)
    label = rng.integers(0, 5, (10, 10))
    cm = ConfusionMatrix(5)
    cm.update(label, label)
    assert np.nanmin(cm.per_class_iou()) == 1.0
    assert cm.miou() == 1.0 and cm.pixel_accuracy() == 1.0


def test_half_misclassified_class_iou():
    # 2-class toy: half of class 1 predicted as class 0.
    label = np.array([1, 1, 1, 1, 0, 0])
    pred = np.array([1, 1, 0, 0, 0, 0])
    cm = ConfusionMatrix(2)
    cm.update(pred, label)
    want_iou, want_miou = brute_force_metrics([pred], [label], 2)
    assert cm.per_class_iou()[1] == pytest.approx(want_iou[1]) == pytest.approx(0.5)
    assert cm.miou() == pytest.approx(want_miou)


def test_ignored_pixels_never_enter_the_matrix():
    rng = np.random.default_rng(4)
    label = rng.integers(0, 3, (8, 8))
    label[:2] = 255
    pred = rng.integers(0, 3, (8, 8))
    flipped = pred.copy()
    flipped[:2] = (flipped[:2] + 1) % 3
    a, b = ConfusionMatrix(3), ConfusionMatrix(3)
    a.update(pred, label)
    b.update(flipped, label)
    assert np.array_equal(a.counts, b.counts)


def test_absent_classes_excluded_from_mean():
    cm = ConfusionMatrix(4)
    cm.update(np.array([0, 1, 1]), np.array([0, 1, 0]))
    iou = cm.per_class_iou()
    assert np.isnan(iou[2]) and np.isnan(iou[3])
    assert cm.miou() == pytest.approx(np.nanmean(iou[:2]))


def test_format_metrics_csv_layout():
    metrics = {"miou": 0.5, "pixel_accuracy": 0.9,
               "per_class_iou": [1.0, None, 0.25], "num_classes": 3,
               "confusion": []}
    text, csv = format_metrics(metrics, method="toy")
    lines = csv.strip().split("\n")
    assert lines[0] == "method,class_0,class_1,class_2,mIoU(%)"
    assert lines[1] == "toy,100.00,,25.00,50.00"
    assert '"miou_percent": 50.0' in text


# ---------------------------------------------------------------------
# optimizer and train_step
# ---------------------------------------------------------------------

def test_zero_lr_step_changes_nothing():
    model = tiny_model(seed=1)
    ds = tiny_dataset(n=4, seed=1)
    images, labels = stack_batch(ds.samples, model.config.modalities)
    opt = AdamW([p for _, p in model.trainable_parameters()], lr=0.0)
    before = {n: p.data.tobytes() for n, p in model.named_parameters()}
    train_step(model, images, labels, opt, lr=0.0)
    after = {n: p.data.tobytes() for n, p in model.named_parameters()}
    assert before == after


def test_encoders_frozen_through_training_steps():
    model = tiny_model(seed=2)
    ds = tiny_dataset(n=4, seed=2)
    images, labels = stack_batch(ds.samples, model.config.modalities)
    opt = AdamW([p for _, p in model.trainable_parameters()], lr=1e-3)
    frozen_before = {n: p.data.tobytes() for n, p in model.frozen_parameters()}
    train_before = {n: p.data.tobytes() for n, p in model.trainable_parameters()}
    for _ in range(10):
        train_step(model, images, labels, opt, lr=1e-3)
    frozen_after = {n: p.data.tobytes() for n, p in model.frozen_parameters()}
    assert frozen_before == frozen_after
    changed = sum(train_before[n] != p.data.tobytes()
                  for n, p in model.trainable_parameters())
    assert changed > 0


def test_loss_decreases_on_fixed_batch_in_9_of_10_seeds():
    wins = 0
    for seed in range(10):
        model = tiny_model(seed=seed, modalities=("vis",))
        ds = tiny_dataset(n=2, seed=seed)
        images, labels = stack_batch(ds.samples, model.config.modalities)
        opt = AdamW([p for _, p in model.trainable_parameters()], lr=1e-3)
        first = train_step(model, images, labels, opt, lr=1e-3)
        last = first
        for _ in range(49):
            last = train_step(model, images, labels, opt, lr=1e-3)
        wins += last < first
    assert wins >= 9


def test_non_finite_loss_aborts_with_diagnostic():
    model = tiny_model(seed=3)
    model.decoder.cls_w.data[...] = np.inf
    ds = tiny_dataset(n=2, seed=3)
    images, labels = stack_batch(ds.samples, model.config.modalities)
    opt = AdamW([p for _, p in model.trainable_parameters()], lr=1e-3)
    with np.errstate(invalid="ignore"), pytest.raises(TrainingError, match="non-finite"):
        train_step(model, images, labels, opt, lr=1e-3)


def test_grads_cleared_after_step():
    model = tiny_model(seed=4)
    ds = tiny_dataset(n=2, seed=4)
    images, labels = stack_batch(ds.samples, model.config.modalities)
    opt = AdamW([p for _, p in model.trainable_parameters()], lr=1e-3)
    train_step(model, images, labels, opt, lr=1e-3)
    assert all(p.grad is None for _, p in model.trainable_parameters())


def test_fit_rejects_empty_dataset():
    model = tiny_model(seed=5)
    empty = SceneDataset([], 5, 32, 32, [("vis", 1), ("ir", 1)], 0)
    with pytest.raises(ValueError, match="empty"):
        fit(model, empty, TrainConfig(epochs=1, warmup_epochs=0))


def test_identical_config_and_seed_give_bit_identical_metrics():
    ds = tiny_dataset(n=6, seed=6)
    results = []
    for _ in range(2):
        model = tiny_model(seed=6)
        cfg = TrainConfig(base_lr=1e-3, warmup_epochs=1, epochs=2, batch_size=4,
                          seed=6)
        fit(model, ds, cfg)
        results.append(evaluate(model, ds))
    assert results[0]["miou"] == results[1]["miou"]
    assert results[0]["confusion"] == results[1]["confusion"]


# ---------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------

def test_checkpoint_roundtrip_bit_identical_metrics(tmp_path):
    model = tiny_model(seed=7)
    ds = tiny_dataset(n=4, seed=7)
    fit(model, ds, TrainConfig(base_lr=1e-3, warmup_epochs=0, epochs=1,
                               batch_size=4, seed=7))
    before = evaluate(model, ds)
    save_checkpoint(model, tmp_path / "ckpt")
    restored = load_checkpoint(tmp_path / "ckpt")
    after = evaluate(restored, ds)
    assert before["miou"] == after["miou"]
    assert before["confusion"] == after["confusion"]
    for (na, pa), (nb, pb) in zip(model.named_parameters(),
                                  restored.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()


def test_checkpoint_rejected_by_mismatched_config(tmp_path):
    model = tiny_model(seed=8)
    save_checkpoint(model, tmp_path / "ckpt")
    three = af.ModelConfig(preset="tiny", modalities=("vis", "ir", "pol"),
                           channels=(1, 1, 1), bottleneck=4, num_classes=5,
                           dtype="float32", seed=8)
    with pytest.raises(CheckpointError, match="does not match"):
        load_checkpoint(tmp_path / "ckpt", expect_config=three)


def test_adapters_only_checkpoint_loads_onto_matching_backbone(tmp_path):
    trained = tiny_model(seed=9)
    ds = tiny_dataset(n=4, seed=9)
    fit(trained, ds, TrainConfig(base_lr=1e-2, warmup_epochs=0, epochs=2,
                                 batch_size=4, seed=9))
    save_checkpoint(trained, tmp_path / "ada", include="adapters")

    fresh = tiny_model(seed=9)   # same frozen backbone init
    load_adapter_checkpoint(fresh, tmp_path / "ada")
    for (_, pa), (_, pb) in zip(trained.bank.named_parameters(),
                                fresh.bank.named_parameters()):
        assert pa.data.tobytes() == pb.data.tobytes()
    # decoder was not in the checkpoint: stays at init
    assert not np.array_equal(trained.decoder.cls_w.data, fresh.decoder.cls_w.data)


def test_full_load_rejects_partial_checkpoint(tmp_path):
    model = tiny_model(seed=10)
    save_checkpoint(model, tmp_path / "ada", include="adapters")
    with pytest.raises(CheckpointError, match="not a full checkpoint"):
        load_checkpoint(tmp_path / "ada")


def test_checkpoint_missing_blob_fails(tmp_path):
    model = tiny_model(seed=11)
    root = save_checkpoint(model, tmp_path / "ckpt")
    next(root.glob("p000*.bin")).unlink()
    with pytest.raises(CheckpointError, match="missing blob"):
        load_checkpoint(root)
