"""Losses, the optimizer, the train loop, and evaluation metrics.

Loss gradients are checked against finite differences on the logits, and the
ranking metrics against a brute-force pair count.
"""

import numpy as np
import pytest

from reststream import cell, training
from reststream.cell import MaskConfig, UpdateSchedule
from reststream.errors import DivergenceError, ValidationError
from reststream.graph import build_graph
from reststream.preprocess import ClipSet
from reststream.training import (
    EvalReport,
    TrainConfig,
    adam_step,
    auroc_binary,
    auroc_macro,
    compute_class_weights,
    confusion_matrix,
    evaluate,
    init_adam,
    loss_and_grad,
    lr_at_epoch,
    predictions_from_logits,
    train,
    weighted_f1,
)


def toy_graph(n=3, seed=0):
    rng = np.random.default_rng(seed)
    return build_graph(
        [f"s{i}" for i in range(n)], rng.standard_normal((n, 3)), threshold=2.0
    )


def separable_dataset(num=20, t_steps=2, m=2, n=3, noise=0.05, seed=1):
    """Class 1 clips sit near +1, class 0 near -1: linearly separable."""
    rng = np.random.default_rng(seed)
    labels = np.arange(num) % 2
    base = np.where(labels[:, None, None, None] == 1, 1.0, -1.0)
    feats = base * np.ones((num, t_steps, m, n)) + noise * rng.standard_normal(
        (num, t_steps, m, n)
    )
    return ClipSet(feats, labels.astype(np.int64))


# ---------------------------------------------------------------------------
# losses


def test_loss_values_at_logit_zero():
    logits = np.zeros((1, 1))
    y = np.array([1])
    mse, _ = loss_and_grad(logits, y, "mse")
    bce, _ = loss_and_grad(logits, y, "bce")
    assert mse == pytest.approx(0.25, abs=1e-15)
    assert bce == pytest.approx(np.log(2.0), abs=1e-15)


def test_loss_vanishes_for_confident_correct_predictions():
    logits = np.array([[40.0], [-40.0]])
    y = np.array([1, 0])
    for kind in ("mse", "bce"):
        loss, grad = loss_and_grad(logits, y, kind)
        assert loss <= 1e-15
        assert np.max(np.abs(grad)) <= 1e-15


def test_weighted_ce_balanced_weights_equal_plain():
    rng = np.random.default_rng(2)
    logits = rng.standard_normal((6, 3))
    y = np.array([0, 1, 2, 0, 1, 2])
    plain, gplain = loss_and_grad(logits, y, "weighted_ce")
    balanced, gbal = loss_and_grad(logits, y, "weighted_ce", np.ones(3))
    assert plain == balanced
    assert np.array_equal(gplain, gbal)


def test_weighted_ce_upweights_the_rare_class():
    logits = np.array([[2.0, 0.0], [2.0, 0.0], [2.0, 0.0], [0.0, 2.0]])
    y = np.array([0, 0, 0, 1])
    w = compute_class_weights(y, 2)
    weighted, _ = loss_and_grad(logits, y, "weighted_ce", w)
    # every clip is classified correctly with the same margin, so reweighting
    # the per-clip terms leaves the weighted mean unchanged
    unweighted, _ = loss_and_grad(logits, y, "weighted_ce")
    assert weighted == pytest.approx(unweighted, rel=1e-12)
    # flip the rare clip to be wrong: the weighted loss must rise faster
    logits_bad = logits.copy()
    logits_bad[3] = [2.0, 0.0]
    weighted_bad, _ = loss_and_grad(logits_bad, y, "weighted_ce", w)
    unweighted_bad, _ = loss_and_grad(logits_bad, y, "weighted_ce")
    assert weighted_bad - weighted > unweighted_bad - unweighted


@pytest.mark.parametrize("kind", ["mse", "bce", "weighted_ce"])
def test_loss_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(3)
    cols = 3 if kind == "weighted_ce" else 1
    logits = rng.standard_normal((5, cols))
    labels = rng.integers(0, 2 if cols == 1 else cols, size=5)
    labels[0] = 0
    labels[1] = 1
    w = compute_class_weights(labels, cols) if kind == "weighted_ce" else None
    _, grad = loss_and_grad(logits, labels, kind, w)
    step = 1e-6
    for i in range(5):
        for j in range(cols):
            bumped = logits.copy()
            bumped[i, j] += step
            up, _ = loss_and_grad(bumped, labels, kind, w)
            bumped[i, j] -= 2 * step
            down, _ = loss_and_grad(bumped, labels, kind, w)
            fd = (up - down) / (2 * step)
            assert grad[i, j] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_loss_validation():
    with pytest.raises(ValidationError, match="single logit"):
        loss_and_grad(np.zeros((2, 3)), np.array([0, 1]), "mse")
    with pytest.raises(ValidationError, match="0/1"):
        loss_and_grad(np.zeros((2, 1)), np.array([0, 2]), "bce")
    with pytest.raises(ValidationError, match="one of"):
        loss_and_grad(np.zeros((2, 1)), np.array([0, 1]), "hinge")
    with pytest.raises(ValidationError, match="do not match"):
        loss_and_grad(np.zeros((2, 1)), np.array([0, 1, 0]), "mse")
    with pytest.raises(ValidationError, match="at least 2"):
        loss_and_grad(np.zeros((2, 1)), np.array([0, 1]), "weighted_ce")
    with pytest.raises(ValidationError, match="outside"):
        loss_and_grad(np.zeros((2, 3)), np.array([0, 3]), "weighted_ce")
    with pytest.raises(ValidationError, match="weights"):
        loss_and_grad(np.zeros((2, 3)), np.array([0, 1]), "weighted_ce", np.ones(2))


def test_class_weights_inverse_frequency():
    w = compute_class_weights(np.array([0, 0, 0, 1]), 2)
    assert np.allclose(w, [2.0 / 3.0, 2.0], atol=1e-15)
    balanced = compute_class_weights(np.array([0, 1, 0, 1]), 2)
    assert np.array_equal(balanced, np.ones(2))
    with pytest.raises(ValidationError, match="class 2"):
        compute_class_weights(np.array([0, 1, 0, 1]), 3)


# ---------------------------------------------------------------------------
# optimizer


def test_adam_zero_gradient_is_a_no_op():
    rng = np.random.default_rng(4)
    weights = cell.init_rnn(3, 4, rng)
    before = {name: arr.copy() for name, arr in weights.named_arrays()}
    state = init_adam(weights)
    grads = {name: np.zeros_like(arr) for name, arr in weights.named_arrays()}
    adam_step(weights, grads, state, lr=0.1)
    for name, arr in weights.named_arrays():
        assert np.array_equal(arr, before[name]), name
    assert state.step == 1


def test_adam_first_step_closed_form():
    rng = np.random.default_rng(5)
    weights = cell.init_rnn(2, 3, rng)
    before = {name: arr.copy() for name, arr in weights.named_arrays()}
    grads = {
        name: rng.standard_normal(arr.shape)
        for name, arr in weights.named_arrays()
    }
    adam_step(weights, grads, init_adam(weights), lr=0.01)
    for name, arr in weights.named_arrays():
        g = grads[name]
        # bias correction makes m_hat = g and v_hat = g*g on the first step
        expect = before[name] - 0.01 * g / (np.abs(g) + 1e-8)
        assert np.allclose(arr, expect, atol=1e-15), name
        assert np.all(np.abs(arr - before[name]) <= 0.01)


def test_lr_schedule_decays_at_exact_milestones():
    base = 1e-3
    for epoch, factor in [(0, 1.0), (119, 1.0), (120, 0.1), (169, 0.1),
                          (170, 0.01), (199, 0.01)]:
        lr = lr_at_epoch(base, epoch, 200, (0.6, 0.85))
        assert lr == pytest.approx(base * factor, rel=1e-12), epoch
    assert lr_at_epoch(base, 50, 100, ()) == base


# ---------------------------------------------------------------------------
# config parsing


def test_train_config_from_mapping():
    cfg = TrainConfig.from_mapping({
        "model": "rest", "q": "8", "loss": "bce", "updates": "1:5",
        "keep_prob": "0.7", "lr": "0.01", "epochs": "50",
        "milestones": "0.5,0.75", "threshold": "1.1",
    })
    assert cfg.q == 8
    assert cfg.updates_low == 1 and cfg.updates_high == 5
    assert cfg.schedule == UpdateSchedule(1, 5)
    assert cfg.milestones == (0.5, 0.75)
    assert cfg.mask == MaskConfig(0.7, "sample")
    single = TrainConfig.from_mapping({"updates": "3"})
    assert single.updates_low == single.updates_high == 3
    assert single.schedule.is_fixed


def test_train_config_rejects_bad_input():
    with pytest.raises(ValidationError, match="unknown config key"):
        TrainConfig.from_mapping({"plateau": "yes"})
    with pytest.raises(ValidationError, match="config key q"):
        TrainConfig.from_mapping({"q": "eight"})
    with pytest.raises(ValidationError, match="model"):
        TrainConfig(model="transformer")
    with pytest.raises(ValidationError, match="lr"):
        TrainConfig(lr=-0.1)
    with pytest.raises(ValidationError, match="val_fraction"):
        TrainConfig(val_fraction=1.0)
    with pytest.raises(ValidationError):
        TrainConfig(keep_prob=0.0)
    with pytest.raises(ValidationError):
        TrainConfig(updates_low=2, updates_high=1)


# ---------------------------------------------------------------------------
# the train loop


def test_train_zero_lr_keeps_losses_flat():
    ds = separable_dataset()
    cfg = TrainConfig(
        q=4, lr=0.0, epochs=4, mask_mode="scaled", batch_size=8, seed=0
    )
    result = train(ds, toy_graph(), cfg)
    # the validation set and forward are fixed, so its loss is bit-flat
    val_losses = {s.val_loss for s in result.history}
    assert len(val_losses) == 1
    # training batches are reshuffled every epoch, so the summed loss can
    # move by an ulp even though the weights never change
    train_losses = [s.train_loss for s in result.history]
    assert np.allclose(train_losses, train_losses[0], rtol=1e-12)


def test_train_is_bit_reproducible():
    ds = separable_dataset()
    cfg = TrainConfig(
        q=4, lr=0.01, epochs=3, mask_mode="sample", updates_low=1,
        updates_high=3, batch_size=8, seed=7,
    )
    a = train(ds, toy_graph(), cfg)
    b = train(ds, toy_graph(), cfg)
    assert a.history == b.history
    for (name, wa), (_, wb) in zip(
        a.weights.named_arrays(), b.weights.named_arrays()
    ):
        assert np.array_equal(wa, wb), name
    c = train(ds, toy_graph(), TrainConfig(**{**cfg.__dict__, "seed": 8}))
    assert c.history != a.history


def test_train_reaches_perfect_accuracy_on_separable_task():
    ds = separable_dataset()
    cfg = TrainConfig(
        q=4, lr=0.05, epochs=15, mask_mode="scaled", batch_size=8, seed=0
    )
    result = train(ds, toy_graph(), cfg)
    assert result.train_accuracy == 1.0
    assert result.history[-1].val_loss < result.history[0].val_loss
    assert len(result.history) == 15
    assert result.classes == 2
    # weights land on the float32 grid so checkpoints reload bit-identically
    for name, arr in result.weights.named_arrays():
        assert np.array_equal(arr, arr.astype(np.float32).astype(np.float64)), name


@pytest.mark.parametrize("model", ["rnn", "rnn_wrapped"])
def test_train_baselines_run_without_graph(model):
    ds = separable_dataset()
    cfg = TrainConfig(
        model=model, q=4, lr=0.05, epochs=15, mask_mode="scaled",
        batch_size=8, seed=0,
    )
    result = train(ds, None, cfg)
    assert result.train_accuracy == 1.0
    assert result.graph is None


def test_train_weighted_ce_path():
    ds = separable_dataset(num=24)
    cfg = TrainConfig(
        q=4, loss="weighted_ce", lr=0.05, epochs=15, mask_mode="scaled",
        batch_size=8, seed=0,
    )
    result = train(ds, toy_graph(), cfg)
    assert result.weights.head.kind == "classify"
    assert result.train_accuracy == 1.0


def test_train_divergence_is_reported_with_epoch():
    ds = ClipSet(
        np.random.default_rng(0).standard_normal((12, 10, 4, 3)),
        (np.arange(12) % 2).astype(np.int64),
    )
    cfg = TrainConfig(
        q=4, lr=1e6, epochs=3, updates_low=3, updates_high=3,
        mask_mode="off", keep_prob=1.0, batch_size=4, seed=0,
    )
    with pytest.raises(DivergenceError, match="epoch"):
        train(ds, toy_graph(), cfg)


def test_train_input_validation():
    ds = separable_dataset(num=3)
    with pytest.raises(ValidationError, match="graph"):
        train(ds, None, TrainConfig(q=2, epochs=1))
    one = ClipSet(np.zeros((1, 2, 2, 3)), np.zeros(1, dtype=np.int64))
    with pytest.raises(ValidationError, match="at least 2"):
        train(one, toy_graph(), TrainConfig(q=2, epochs=1))
    with pytest.raises(ValidationError, match="no training clips"):
        train(ds, toy_graph(), TrainConfig(q=2, epochs=1, val_fraction=0.95))


def test_train_state_only_rule_runs():
    ds = separable_dataset()
    cfg = TrainConfig(
        q=4, rule="state_only", lr=0.05, epochs=10, mask_mode="scaled",
        batch_size=8, seed=0,
    )
    result = train(ds, toy_graph(), cfg)
    assert np.isfinite(result.history[-1].val_loss)


# ---------------------------------------------------------------------------
# ranking metrics


def brute_force_auroc(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (pos.size * neg.size)


def test_auroc_hand_case():
    scores = np.array([0.1, 0.4, 0.35, 0.8])
    labels = np.array([0, 0, 1, 1])
    assert auroc_binary(scores, labels) == pytest.approx(0.75, abs=1e-15)


def test_auroc_matches_pair_counting_with_ties():
    rng = np.random.default_rng(6)
    scores = rng.integers(0, 5, size=60).astype(np.float64)  # many ties
    labels = rng.integers(0, 2, size=60)
    labels[0] = 0
    labels[1] = 1
    assert auroc_binary(scores, labels) == pytest.approx(
        brute_force_auroc(scores, labels), abs=1e-12
    )


def test_auroc_extremes():
    labels = np.array([0, 0, 1, 1])
    assert auroc_binary(np.array([0.1, 0.2, 0.8, 0.9]), labels) == 1.0
    assert auroc_binary(np.array([0.9, 0.8, 0.2, 0.1]), labels) == 0.0
    assert auroc_binary(np.full(4, 0.5), labels) == 0.5


def test_auroc_random_scores_near_half():
    rng = np.random.default_rng(7)
    scores = rng.random(10000)
    labels = rng.integers(0, 2, size=10000)
    assert abs(auroc_binary(scores, labels) - 0.5) <= 0.02


def test_auroc_requires_both_classes():
    with pytest.raises(ValidationError, match="both classes"):
        auroc_binary(np.array([0.1, 0.2]), np.array([1, 1]))


def test_auroc_macro_perfect_probabilities():
    labels = np.array([0, 1, 2, 0, 1, 2])
    probs = np.eye(3)[labels]
    assert auroc_macro(probs, labels) == 1.0


def test_confusion_matrix_rows_are_true_classes():
    cm = confusion_matrix(np.array([0, 1, 1]), np.array([1, 1, 0]), 2)
    assert np.array_equal(cm, np.array([[0, 1], [1, 1]]))
    assert cm.sum() == 3


def test_weighted_f1_hand_case():
    labels = np.array([0, 0, 1, 1])
    preds = np.array([0, 1, 1, 1])
    # class 0: precision 1, recall 1/2, f1 2/3; class 1: 2/3, 1, 4/5
    assert weighted_f1(labels, preds, 2) == pytest.approx(
        0.5 * (2.0 / 3.0) + 0.5 * 0.8, abs=1e-12
    )
    assert weighted_f1(labels, labels, 2) == 1.0


def test_weighted_f1_handles_empty_prediction_class():
    labels = np.array([0, 0, 0, 1])
    preds = np.zeros(4, dtype=np.int64)
    value = weighted_f1(labels, preds, 2)
    assert np.isfinite(value)
    # class 1 contributes zero; class 0 has precision 3/4, recall 1
    assert value == pytest.approx(0.75 * (2 * 0.75 / 1.75), abs=1e-12)


def test_predictions_from_logits():
    detect = cell.ReadoutHead("detect", np.zeros((1, 2)), np.zeros(1))
    out = predictions_from_logits(detect, np.array([[-1.0], [0.0], [1.0]]))
    assert np.array_equal(out, [0, 1, 1])
    classify = cell.ReadoutHead("classify", np.zeros((3, 2)), np.zeros(3))
    logits = np.array([[0.1, 0.9, 0.0], [2.0, 1.0, 1.5]])
    assert np.array_equal(predictions_from_logits(classify, logits), [1, 0])


# ---------------------------------------------------------------------------
# evaluation


def test_evaluate_trained_model_end_to_end():
    ds = separable_dataset()
    cfg = TrainConfig(
        q=4, lr=0.05, epochs=15, mask_mode="scaled", batch_size=8, seed=0
    )
    result = train(ds, toy_graph(), cfg)
    report = evaluate(
        ds, result.weights, result.graph, MaskConfig(0.5, "scaled"), updates=1
    )
    assert isinstance(report, EvalReport)
    assert report.auroc == 1.0
    assert report.accuracy == 1.0
    assert report.weighted_f1 == 1.0
    assert report.n_clips == 20
    assert report.confusion.sum() == 20
    assert np.isfinite(report.mean_loss)
    again = evaluate(
        ds, result.weights, result.graph, MaskConfig(0.5, "scaled"), updates=1
    )
    assert report.auroc == again.auroc and report.mean_loss == again.mean_loss


def test_evaluate_rejects_empty_dataset():
    empty = ClipSet(np.zeros((0, 2, 2, 3)), np.zeros(0, dtype=np.int64))
    rng = np.random.default_rng(8)
    weights = cell.init_rest(2, 2, rng)
    with pytest.raises(ValidationError, match="empty"):
        evaluate(empty, weights, toy_graph(), MaskConfig.off(), updates=1)
