"""Training machinery: hand-written reverse-mode gradients through the
unrolled recurrence, losses, Adam, metrics, and the train loop.

The forward pass used for training records every intermediate (drive, conv
pre-activations, masks) on a tape; the backward pass walks the tape in
reverse and accumulates exact gradients. Masks and update counts are drawn
up front into a plan so the finite-difference oracle can replay the same
randomness. Masks are constants in the backward pass: gradient flows through
the residual term only where the mask kept it.

All training math is float64 with a fixed reduction order, so a given seed
produces bit-identical histories.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import cell
from .cell import (
    GruWeights,
    MaskConfig,
    OpCounters,
    ReadoutHead,
    RestWeights,
    RnnWeights,
    UpdateSchedule,
)
from .errors import DivergenceError, ValidationError
from .graph import DistanceGraph, build_graph
from .preprocess import ClipSet

LOSS_KINDS = ("mse", "bce", "weighted_ce")
MODEL_KINDS = ("rest", "rnn", "rnn_wrapped")
FORWARD_RULES = ("reinject", "state_only")


# ---------------------------------------------------------------------------
# losses


def compute_class_weights(labels: np.ndarray, classes: int) -> np.ndarray:
    """Inverse-frequency weights normalized so balanced classes give 1."""
    counts = np.bincount(labels, minlength=classes)
    if np.any(counts == 0):
        missing = int(np.flatnonzero(counts == 0)[0])
        raise ValidationError(f"class {missing} has no examples")
    return labels.size / (classes * counts.astype(np.float64))


def loss_and_grad(
    logits: np.ndarray,
    labels: np.ndarray,
    kind: str,
    class_weights: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient with respect to logits.

    mse and bce act on the sigmoid of a single logit; weighted_ce is a
    class-weighted softmax cross-entropy (weighted mean, so balanced weights
    reduce to the plain mean).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValidationError(
            f"logits {logits.shape} do not match {labels.shape} labels"
        )
    if kind not in LOSS_KINDS:
        raise ValidationError(f"loss must be one of {LOSS_KINDS}")
    batch = logits.shape[0]
    if kind in ("mse", "bce"):
        if logits.shape[1] != 1:
            raise ValidationError(f"{kind} needs a single logit per clip")
        if np.any((labels != 0) & (labels != 1)):
            raise ValidationError(f"{kind} needs 0/1 labels")
        z = logits[:, 0]
        y = labels.astype(np.float64)
        p = cell.sigmoid(z)
        if kind == "mse":
            loss = float(np.mean((p - y) ** 2))
            dz = 2.0 * (p - y) * p * (1.0 - p) / batch
        else:
            per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
            loss = float(np.mean(per))
            dz = (p - y) / batch
        return loss, dz[:, None]
    n_classes = logits.shape[1]
    if n_classes < 2:
        raise ValidationError("weighted_ce needs at least 2 logits per clip")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValidationError(f"labels outside [0, {n_classes})")
    if class_weights is None:
        class_weights = np.ones(n_classes)
    if class_weights.shape != (n_classes,):
        raise ValidationError(
            f"class weights {class_weights.shape} for {n_classes} classes"
        )
    zmax = logits.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(logits - zmax).sum(axis=1))
    log_probs = logits - lse[:, None]
    w = class_weights[labels]
    w_sum = float(w.sum())
    loss = float(-(w * log_probs[np.arange(batch), labels]).sum() / w_sum)
    soft = np.exp(log_probs)
    onehot = np.zeros_like(soft)
    onehot[np.arange(batch), labels] = 1.0
    dlogits = w[:, None] * (soft - onehot) / w_sum
    return loss, dlogits


# ---------------------------------------------------------------------------
# plans: pre-drawn randomness so forward, backward, and the FD oracle agree


@dataclass
class UpdatePlan:
    """Update counts per time step plus one mask per refinement.

    Masks are 0/1 arrays in sampled mode, or the scalar factor the blend
    applies (keep_prob for the scaled mode, 1.0 for mask-off).
    """

    updates: list[int]
    masks: list[list[np.ndarray | float]]


def draw_plan(
    t_steps: int,
    state_shape: tuple[int, ...],
    schedule: UpdateSchedule,
    mask_cfg: MaskConfig,
    rng: np.random.Generator | None,
) -> UpdatePlan:
    """Draw in the same order as the streaming forward: per step the update
    count, then one mask per refinement."""
    updates: list[int] = []
    masks: list[list[np.ndarray | float]] = []
    for _ in range(t_steps):
        count = schedule.draw(rng) if rng is not None else schedule.midpoint
        updates.append(count)
        row: list[np.ndarray | float] = []
        for _ in range(count):
            if mask_cfg.mode == "sample":
                if rng is None:
                    raise ValidationError("sampled masks need an rng")
                row.append(cell.sample_mask(state_shape, mask_cfg.keep_prob, rng))
            elif mask_cfg.mode == "scaled":
                row.append(mask_cfg.keep_prob)
            else:
                row.append(1.0)
        masks.append(row)
    return UpdatePlan(updates, masks)


# ---------------------------------------------------------------------------
# taped forward


@dataclass
class IterRecord:
    s_in: np.ndarray  # state entering the refinement
    drive: np.ndarray | None  # affine drive (None for the state-only rule)
    z1: np.ndarray  # first conv pre-activation
    a1: np.ndarray  # first conv output (relu)
    mask: np.ndarray | float


@dataclass
class TimeRecord:
    s_prev: np.ndarray  # state entering the time step
    iters: list[IterRecord]


@dataclass
class RestTape:
    """Everything the backward pass needs, in forward order."""

    rule: str
    x: np.ndarray  # (B, T, M, N)
    times: list[TimeRecord]
    final_state: np.ndarray
    pooled: np.ndarray
    logits: np.ndarray
    plan: UpdatePlan


def _conv_pre(layer, h: np.ndarray, neighbor_w: np.ndarray) -> np.ndarray:
    return (
        layer.theta_self @ h
        + layer.theta_neigh @ (h @ neighbor_w)
        + layer.bias[..., None]
    )


def rest_forward_tape(
    batch_x: np.ndarray,
    weights: RestWeights,
    neighbor_w: np.ndarray,
    plan: UpdatePlan,
    rule: str = "reinject",
) -> RestTape:
    """Batched forward of (B, T, M, N) recording all intermediates."""
    batch_x = np.asarray(batch_x, dtype=np.float64)
    if batch_x.ndim != 4:
        raise ValidationError(f"batch must be (B, T, M, N), got {batch_x.shape}")
    if rule not in FORWARD_RULES:
        raise ValidationError(f"forward rule must be one of {FORWARD_RULES}")
    b, t_steps, _, n = batch_x.shape
    state = np.zeros((b, weights.q, n))
    times: list[TimeRecord] = []
    # overflow is detected by the isfinite checks and raised as a
    # DivergenceError, so the intermediate numpy warnings are silenced
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(t_steps):
            x = batch_x[:, t]
            s_prev = state
            iters: list[IterRecord] = []
            if rule == "reinject":
                for i in range(plan.updates[t]):
                    h = cell.affine_drive(weights, x, state)
                    z1 = _conv_pre(weights.conv1, h, neighbor_w)
                    a1 = np.maximum(z1, 0.0)
                    delta = _conv_pre(weights.conv2, a1, neighbor_w)
                    iters.append(IterRecord(state, h, z1, a1, plan.masks[t][i]))
                    state = h + delta * plan.masks[t][i]
                    if not np.all(np.isfinite(state)):
                        raise DivergenceError.at_step(t, i)
            else:
                state = cell.affine_drive(weights, x, state)
                for i in range(plan.updates[t]):
                    z1 = _conv_pre(weights.conv1, state, neighbor_w)
                    a1 = np.maximum(z1, 0.0)
                    delta = _conv_pre(weights.conv2, a1, neighbor_w)
                    iters.append(IterRecord(state, None, z1, a1, plan.masks[t][i]))
                    state = state + delta * plan.masks[t][i]
                    if not np.all(np.isfinite(state)):
                        raise DivergenceError.at_step(t, i)
            times.append(TimeRecord(s_prev, iters))
    pooled = state.mean(axis=-1)
    logits = pooled @ weights.head.weight.T + weights.head.bias
    return RestTape(rule, batch_x, times, state, pooled, logits, plan)


def replay_tape(tape: RestTape, weights: RestWeights, neighbor_w: np.ndarray) -> np.ndarray:
    """Re-run the forward from the tape's recorded plan; returns logits."""
    return rest_forward_tape(tape.x, weights, neighbor_w, tape.plan, tape.rule).logits


# ---------------------------------------------------------------------------
# backward


def _zero_grads(weights) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in weights.named_arrays()}


def _head_backward(
    head: ReadoutHead,
    pooled: np.ndarray,
    dlogits: np.ndarray,
    n_nodes: int,
    grads: dict[str, np.ndarray],
) -> np.ndarray:
    grads["head_weight"] += np.einsum("bk,bq->kq", dlogits, pooled)
    grads["head_bias"] += dlogits.sum(axis=0)
    dpooled = dlogits @ head.weight
    return np.broadcast_to(
        (dpooled / n_nodes)[:, :, None], pooled.shape + (n_nodes,)
    ).copy()


def rest_backward(
    tape: RestTape,
    weights: RestWeights,
    neighbor_w: np.ndarray,
    dlogits: np.ndarray,
    record_state_norms: bool = False,
) -> tuple[dict[str, np.ndarray], np.ndarray | None]:
    """Exact gradients of the loss with respect to every weight tensor.

    Optionally records the Frobenius norm of dL/dstate at every time-step
    boundary (index 0 = earliest step), the quantity behind the
    gradient-flow comparison against the vanilla RNN.
    """
    grads = _zero_grads(weights)
    n = tape.final_state.shape[-1]
    dstate = _head_backward(weights.head, tape.pooled, dlogits, n, grads)
    c1, c2 = weights.conv1, weights.conv2
    norms: list[float] = []
    for t in range(len(tape.times) - 1, -1, -1):
        if record_state_norms:
            norms.append(float(np.linalg.norm(dstate)))
        rec = tape.times[t]
        x = tape.x[:, t]
        if tape.rule == "reinject":
            for it in reversed(rec.iters):
                ddelta = dstate * it.mask
                a1n = it.a1 @ neighbor_w
                grads["conv2_self"] += np.einsum("bqn,bpn->qp", ddelta, it.a1)
                grads["conv2_neigh"] += np.einsum("bqn,bpn->qp", ddelta, a1n)
                grads["conv2_bias"] += ddelta.sum(axis=(0, 2))
                da1 = c2.theta_self.T @ ddelta + (c2.theta_neigh.T @ ddelta) @ neighbor_w
                dz1 = da1 * (it.z1 > 0.0)
                hn = it.drive @ neighbor_w
                grads["conv1_self"] += np.einsum("bqn,bpn->qp", dz1, it.drive)
                grads["conv1_neigh"] += np.einsum("bqn,bpn->qp", dz1, hn)
                grads["conv1_bias"] += dz1.sum(axis=(0, 2))
                dh = dstate + c1.theta_self.T @ dz1 + (c1.theta_neigh.T @ dz1) @ neighbor_w
                grads["w_in"] += np.einsum("bqn,bmn->qm", dh, x)
                grads["u_rec"] += np.einsum("bqn,bpn->qp", dh, it.s_in)
                grads["in_bias"] += dh.sum(axis=(0, 2))
                dstate = weights.u_rec.T @ dh
        else:
            for it in reversed(rec.iters):
                ddelta = dstate * it.mask
                a1n = it.a1 @ neighbor_w
                grads["conv2_self"] += np.einsum("bqn,bpn->qp", ddelta, it.a1)
                grads["conv2_neigh"] += np.einsum("bqn,bpn->qp", ddelta, a1n)
                grads["conv2_bias"] += ddelta.sum(axis=(0, 2))
                da1 = c2.theta_self.T @ ddelta + (c2.theta_neigh.T @ ddelta) @ neighbor_w
                dz1 = da1 * (it.z1 > 0.0)
                sn = it.s_in @ neighbor_w
                grads["conv1_self"] += np.einsum("bqn,bpn->qp", dz1, it.s_in)
                grads["conv1_neigh"] += np.einsum("bqn,bpn->qp", dz1, sn)
                grads["conv1_bias"] += dz1.sum(axis=(0, 2))
                dstate = dstate + c1.theta_self.T @ dz1 + (c1.theta_neigh.T @ dz1) @ neighbor_w
            grads["w_in"] += np.einsum("bqn,bmn->qm", dstate, x)
            grads["u_rec"] += np.einsum("bqn,bpn->qp", dstate, rec.s_prev)
            grads["in_bias"] += dstate.sum(axis=(0, 2))
            dstate = weights.u_rec.T @ dstate
    if record_state_norms:
        return grads, np.array(norms[::-1])
    return grads, None


# ---------------------------------------------------------------------------
# vanilla RNN forwards/backwards (plain and mask-wrapped)


@dataclass
class RnnIterRecord:
    s_in: np.ndarray
    tanh_out: np.ndarray
    mask: np.ndarray | float


@dataclass
class RnnTape:
    wrapped: bool
    x: np.ndarray
    times: list[list[RnnIterRecord]]
    final_state: np.ndarray
    pooled: np.ndarray
    logits: np.ndarray
    plan: UpdatePlan | None


def rnn_forward_tape(
    batch_x: np.ndarray,
    weights: RnnWeights,
    plan: UpdatePlan | None = None,
) -> RnnTape:
    """Plain tanh recurrence, or the masked-residual wrap when given a plan."""
    batch_x = np.asarray(batch_x, dtype=np.float64)
    if batch_x.ndim != 4:
        raise ValidationError(f"batch must be (B, T, M, N), got {batch_x.shape}")
    b, t_steps, _, n = batch_x.shape
    state = np.zeros((b, weights.q, n))
    times: list[list[RnnIterRecord]] = []
    for t in range(t_steps):
        x = batch_x[:, t]
        iters: list[RnnIterRecord] = []
        if plan is None:
            out = np.tanh(
                weights.w_in @ x + weights.w_rec @ state + weights.bias[..., None]
            )
            iters.append(RnnIterRecord(state, out, 1.0))
            state = out
        else:
            for i in range(plan.updates[t]):
                out = np.tanh(
                    weights.w_in @ x + weights.w_rec @ state + weights.bias[..., None]
                )
                iters.append(RnnIterRecord(state, out, plan.masks[t][i]))
                state = state + out * plan.masks[t][i]
        if not np.all(np.isfinite(state)):
            raise DivergenceError.at_step(t, 0)
        times.append(iters)
    pooled = state.mean(axis=-1)
    logits = pooled @ weights.head.weight.T + weights.head.bias
    return RnnTape(plan is not None, batch_x, times, state, pooled, logits, plan)


def rnn_backward(
    tape: RnnTape,
    weights: RnnWeights,
    dlogits: np.ndarray,
    record_state_norms: bool = False,
) -> tuple[dict[str, np.ndarray], np.ndarray | None]:
    grads = _zero_grads(weights)
    n = tape.final_state.shape[-1]
    dstate = _head_backward(weights.head, tape.pooled, dlogits, n, grads)
    norms: list[float] = []
    for t in range(len(tape.times) - 1, -1, -1):
        if record_state_norms:
            norms.append(float(np.linalg.norm(dstate)))
        x = tape.x[:, t]
        for it in reversed(tape.times[t]):
            if tape.wrapped:
                dout = dstate * it.mask
                carry = dstate
            else:
                dout = dstate
                carry = 0.0
            dpre = dout * (1.0 - it.tanh_out**2)
            grads["w_in"] += np.einsum("bqn,bmn->qm", dpre, x)
            grads["w_rec"] += np.einsum("bqn,bpn->qp", dpre, it.s_in)
            grads["bias"] += dpre.sum(axis=(0, 2))
            dstate = carry + weights.w_rec.T @ dpre
    if record_state_norms:
        return grads, np.array(norms[::-1])
    return grads, None


# ---------------------------------------------------------------------------
# state-gradient norms (gradient-flow experiment)


def rest_state_grad_norms(
    clip: np.ndarray,
    weights: RestWeights,
    graph: DistanceGraph,
    label: int,
    loss_kind: str = "mse",
    schedule: UpdateSchedule | None = None,
    mask_cfg: MaskConfig | None = None,
    rng: np.random.Generator | None = None,
    rule: str = "reinject",
) -> np.ndarray:
    """||dL/dstate|| per time step for one clip, earliest step first."""
    schedule = schedule or UpdateSchedule.fixed(1)
    mask_cfg = mask_cfg or MaskConfig.off()
    batch = np.asarray(clip, dtype=np.float64)[None]
    plan = draw_plan(
        batch.shape[1], batch.shape[:1] + (weights.q, batch.shape[3]),
        schedule, mask_cfg, rng,
    )
    neighbor_w = graph.neighbor_weights()
    tape = rest_forward_tape(batch, weights, neighbor_w, plan, rule)
    _, dlogits = loss_and_grad(tape.logits, np.array([label]), loss_kind)
    _, norms = rest_backward(tape, weights, neighbor_w, dlogits, True)
    return norms


def rnn_state_grad_norms(
    clip: np.ndarray,
    weights: RnnWeights,
    label: int,
    loss_kind: str = "mse",
) -> np.ndarray:
    """Same measurement for the plain tanh RNN baseline."""
    batch = np.asarray(clip, dtype=np.float64)[None]
    tape = rnn_forward_tape(batch, weights)
    _, dlogits = loss_and_grad(tape.logits, np.array([label]), loss_kind)
    _, norms = rnn_backward(tape, weights, dlogits, True)
    return norms


# ---------------------------------------------------------------------------
# finite differences


def finite_difference_grads(
    loss_fn: Callable[[], float], weights, step: float
) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn`` with respect to every weight entry.

    Mutates each entry in place and restores it, so ``loss_fn`` must read the
    live weight arrays. step must be positive.
    """
    if not step > 0.0:
        raise ValidationError(f"finite-difference step must be > 0, got {step}")
    grads: dict[str, np.ndarray] = {}
    for name, arr in weights.named_arrays():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + step
            up = loss_fn()
            flat[j] = original - step
            down = loss_fn()
            flat[j] = original
            gflat[j] = (up - down) / (2.0 * step)
        grads[name] = g
    return grads


def max_relative_error(
    analytic: dict[str, np.ndarray],
    numeric: dict[str, np.ndarray],
    floor: float = 1e-6,
) -> float:
    """Largest per-entry |a - n| / max(|a|, |n|, floor) over all tensors.

    The floor keeps finite-difference rounding noise on near-zero gradients
    from registering as relative error.
    """
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


@dataclass
class GradCheckResult:
    entries: list[tuple[str, int, int, float]]  # (loss, updates, seed, err)
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def gradient_check(
    q: int = 4,
    n: int = 3,
    m: int = 5,
    t_steps: int = 3,
    updates: int = 2,
    seeds: tuple[int, ...] = (0,),
    losses: tuple[str, ...] = LOSS_KINDS,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    batch: int = 4,
    keep_prob: float = 0.5,
    rule: str = "reinject",
) -> GradCheckResult:
    """Backward pass vs the finite-difference oracle on small random nets.

    Masks and update counts are drawn once per case and replayed for every
    perturbed evaluation, so the compared function is deterministic.
    """
    entries = []
    for loss_kind in losses:
        for seed in seeds:
            rng = np.random.default_rng([seed, LOSS_KINDS.index(loss_kind)])
            coords = rng.standard_normal((n, 3))
            graph = build_graph([f"s{i}" for i in range(n)], coords, threshold=2.0)
            head_kind = "classify" if loss_kind == "weighted_ce" else "detect"
            weights = cell.init_rest(q, m, rng, head_kind=head_kind, classes=2)
            batch_x = rng.standard_normal((batch, t_steps, m, n))
            labels = np.concatenate(
                [[0, 1], rng.integers(0, 2, size=batch - 2)]
            ).astype(np.int64)
            class_w = (
                compute_class_weights(labels, 2)
                if loss_kind == "weighted_ce"
                else None
            )
            plan = draw_plan(
                t_steps, (batch, q, n), UpdateSchedule.fixed(updates),
                MaskConfig(keep_prob, "sample"), rng,
            )
            neighbor_w = graph.neighbor_weights()
            tape = rest_forward_tape(batch_x, weights, neighbor_w, plan, rule)
            _, dlogits = loss_and_grad(tape.logits, labels, loss_kind, class_w)
            analytic, _ = rest_backward(tape, weights, neighbor_w, dlogits)

            def loss_fn() -> float:
                t = rest_forward_tape(batch_x, weights, neighbor_w, plan, rule)
                value, _ = loss_and_grad(t.logits, labels, loss_kind, class_w)
                return value

            numeric = finite_difference_grads(loss_fn, weights, step)
            err = max_relative_error(analytic, numeric)
            entries.append((loss_kind, updates, seed, err))
    return GradCheckResult(entries, max(e[3] for e in entries), tolerance)


# ---------------------------------------------------------------------------
# Adam with multistep decay


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_adam(weights) -> AdamState:
    return AdamState(
        m={name: np.zeros_like(a) for name, a in weights.named_arrays()},
        v={name: np.zeros_like(a) for name, a in weights.named_arrays()},
    )


def adam_step(
    weights,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard bias-corrected Adam update, in place."""
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, arr in weights.named_arrays():
        g = grads[name]
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        arr -= lr * m_hat / (np.sqrt(v_hat) + eps)


def lr_at_epoch(
    base_lr: float, epoch: int, epochs: int, milestones: tuple[float, ...]
) -> float:
    """Multistep decay: x0.1 after each milestone fraction of the budget."""
    lr = base_lr
    for frac in milestones:
        if epoch >= int(frac * epochs):
            lr *= 0.1
    return lr


# ---------------------------------------------------------------------------
# train loop


@dataclass
class TrainConfig:
    model: str = "rest"  # rest | rnn | rnn_wrapped
    q: int = 16
    loss: str = "mse"
    rule: str = "reinject"
    keep_prob: float = 0.5
    mask_mode: str = "sample"
    updates_low: int = 1
    updates_high: int = 1
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    val_fraction: float = 0.1
    milestones: tuple[float, ...] = (0.6, 0.85)
    threshold: float = 0.9  # graph distance cutoff

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ValidationError(f"model must be one of {MODEL_KINDS}")
        if self.loss not in LOSS_KINDS:
            raise ValidationError(f"loss must be one of {LOSS_KINDS}")
        if self.rule not in FORWARD_RULES:
            raise ValidationError(f"rule must be one of {FORWARD_RULES}")
        if not self.lr >= 0.0:
            raise ValidationError(f"lr must be >= 0, got {self.lr}")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValidationError("val_fraction must be in (0, 1)")
        if self.q < 1:
            raise ValidationError(f"q must be >= 1, got {self.q}")
        # reuse the shared validations
        MaskConfig(self.keep_prob, self.mask_mode)
        UpdateSchedule(self.updates_low, self.updates_high)

    @property
    def schedule(self) -> UpdateSchedule:
        return UpdateSchedule(self.updates_low, self.updates_high)

    @property
    def mask(self) -> MaskConfig:
        return MaskConfig(self.keep_prob, self.mask_mode)

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "TrainConfig":
        """Build from a key=value config file, e.g. updates=1:5."""
        kwargs: dict = {}
        parsers: dict[str, Callable[[str], object]] = {
            "model": str, "q": int, "loss": str, "rule": str,
            "keep_prob": float, "mask_mode": str, "lr": float,
            "epochs": int, "batch_size": int, "seed": int,
            "val_fraction": float, "threshold": float,
        }
        for key, raw in mapping.items():
            if key == "updates":
                low, _, high = raw.partition(":")
                kwargs["updates_low"] = int(low)
                kwargs["updates_high"] = int(high) if high else int(low)
            elif key == "milestones":
                kwargs["milestones"] = tuple(
                    float(v) for v in raw.split(",") if v
                )
            elif key in parsers:
                try:
                    kwargs[key] = parsers[key](raw)
                except ValueError as exc:
                    raise ValidationError(f"config key {key}: {exc}") from None
            else:
                raise ValidationError(f"unknown config key {key!r}")
        return cls(**kwargs)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    weights: RestWeights | RnnWeights
    config: TrainConfig
    history: list[EpochStats]
    classes: int
    train_accuracy: float
    graph: DistanceGraph | None


def _deterministic_logits(
    batch_x: np.ndarray,
    weights,
    config: TrainConfig,
    neighbor_w: np.ndarray | None,
) -> np.ndarray:
    """Noise-free evaluation forward: expectation mask, midpoint updates."""
    mode = "off" if config.mask_mode == "off" else "scaled"
    plan = draw_plan(
        batch_x.shape[1], (), UpdateSchedule.fixed(config.schedule.midpoint),
        MaskConfig(config.keep_prob, mode), None,
    )
    if config.model == "rest":
        return rest_forward_tape(
            batch_x, weights, neighbor_w, plan, config.rule
        ).logits
    if config.model == "rnn":
        return rnn_forward_tape(batch_x, weights).logits
    return rnn_forward_tape(batch_x, weights, plan).logits


def train(
    dataset: ClipSet,
    graph: DistanceGraph | None,
    config: TrainConfig,
) -> TrainResult:
    """Adam over shuffled minibatches with a 90/10 validation split.

    Fully seeded: weight init, the split, shuffles, masks, and update draws
    all derive from config.seed, so the history is reproducible bit for bit.
    """
    num = len(dataset)
    if num < 2:
        raise ValidationError("need at least 2 clips to split train/validation")
    if config.model == "rest" and graph is None:
        raise ValidationError("the graph-coupled model needs a graph")
    labels = dataset.labels
    classes = int(labels.max()) + 1 if labels.size else 0
    seq = np.random.SeedSequence(config.seed)
    rng_init, rng_split, rng_shuffle, rng_draw = (
        np.random.default_rng(s) for s in seq.spawn(4)
    )

    head_kind = "classify" if config.loss == "weighted_ce" else "detect"
    m_features = dataset.features.shape[2]
    if config.model == "rest":
        weights = cell.init_rest(
            config.q, m_features, rng_init, head_kind=head_kind, classes=classes
        )
        neighbor_w = graph.neighbor_weights()
    else:
        weights = cell.init_rnn(
            config.q, m_features, rng_init, head_kind=head_kind, classes=classes
        )
        neighbor_w = None

    perm = rng_split.permutation(num)
    n_val = max(1, int(round(config.val_fraction * num)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if train_idx.size == 0:
        raise ValidationError("validation split leaves no training clips")
    class_w = (
        compute_class_weights(labels[train_idx], classes)
        if config.loss == "weighted_ce"
        else None
    )
    val_x = dataset.features[val_idx]
    val_y = labels[val_idx]

    adam = init_adam(weights)
    history: list[EpochStats] = []
    q = config.q
    for epoch in range(config.epochs):
        lr = lr_at_epoch(config.lr, epoch, config.epochs, config.milestones)
        order = rng_shuffle.permutation(train_idx)
        total_loss = 0.0
        for start in range(0, order.size, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = dataset.features[idx]
            yb = labels[idx]
            plan_rng = rng_draw if config.mask_mode == "sample" or not config.schedule.is_fixed else None
            plan = draw_plan(
                xb.shape[1], (idx.size, q, xb.shape[3]),
                config.schedule, config.mask, plan_rng,
            )
            try:
                if config.model == "rest":
                    tape = rest_forward_tape(xb, weights, neighbor_w, plan, config.rule)
                    loss, dlogits = loss_and_grad(tape.logits, yb, config.loss, class_w)
                    grads, _ = rest_backward(tape, weights, neighbor_w, dlogits)
                elif config.model == "rnn":
                    tape = rnn_forward_tape(xb, weights)
                    loss, dlogits = loss_and_grad(tape.logits, yb, config.loss, class_w)
                    grads, _ = rnn_backward(tape, weights, dlogits)
                else:
                    tape = rnn_forward_tape(xb, weights, plan)
                    loss, dlogits = loss_and_grad(tape.logits, yb, config.loss, class_w)
                    grads, _ = rnn_backward(tape, weights, dlogits)
            except DivergenceError as exc:
                raise DivergenceError(
                    f"{exc} (epoch {epoch})", exc.time_step, exc.iteration
                ) from None
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            total_loss += loss * idx.size
            adam_step(weights, grads, adam, lr)
        train_loss = total_loss / order.size
        val_logits = _deterministic_logits(val_x, weights, config, neighbor_w)
        val_loss, _ = loss_and_grad(val_logits, val_y, config.loss, class_w)
        history.append(EpochStats(epoch, float(lr), float(train_loss), float(val_loss)))

    # land on the float32 grid so a saved checkpoint reloads bit-identically
    cell.snap_weights(weights)
    train_logits = _deterministic_logits(
        dataset.features[train_idx], weights, config, neighbor_w
    )
    preds = predictions_from_logits(weights.head, train_logits)
    train_acc = float(np.mean(preds == labels[train_idx]))
    return TrainResult(weights, config, history, classes, train_acc, graph)


# ---------------------------------------------------------------------------
# metrics


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties given the mean rank of their group."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc_binary(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability a positive outranks a negative, ties counted half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUROC needs both classes present")
    ranks = _average_ranks(scores)
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auroc_macro(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean one-vs-rest AUROC over classes."""
    classes = probs.shape[1]
    values = [
        auroc_binary(probs[:, c], (labels == c).astype(np.int64))
        for c in range(classes)
    ]
    return float(np.mean(values))


def confusion_matrix(
    labels: np.ndarray, preds: np.ndarray, classes: int
) -> np.ndarray:
    """Counts with true class on rows, predicted class on columns."""
    out = np.zeros((classes, classes), dtype=np.int64)
    for y, p in zip(labels, preds):
        out[int(y), int(p)] += 1
    return out


def weighted_f1(labels: np.ndarray, preds: np.ndarray, classes: int) -> float:
    """Per-class F1 averaged with class-support weights."""
    cm = confusion_matrix(labels, preds, classes)
    total = cm.sum()
    score = 0.0
    for c in range(classes):
        tp = cm[c, c]
        fp = cm[:, c].sum() - tp
        fn = cm[c, :].sum() - tp
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        score += (cm[c, :].sum() / total) * f1
    return float(score)


def predictions_from_logits(head: ReadoutHead, logits: np.ndarray) -> np.ndarray:
    if head.kind == "detect":
        return (cell.sigmoid(logits[:, 0]) >= 0.5).astype(np.int64)
    return logits.argmax(axis=1).astype(np.int64)


@dataclass
class EvalReport:
    auroc: float
    weighted_f1: float
    confusion: np.ndarray
    accuracy: float
    mean_loss: float
    n_clips: int


def evaluate(
    dataset: ClipSet,
    weights: RestWeights,
    graph: DistanceGraph,
    mask_cfg: MaskConfig,
    updates: int,
    rule: str = "reinject",
    loss_kind: str = "mse",
    rng: np.random.Generator | None = None,
    class_weights: np.ndarray | None = None,
) -> EvalReport:
    """Score a labeled dataset with a fixed update count and mask mode."""
    if len(dataset) == 0:
        raise ValidationError("cannot evaluate an empty dataset")
    logits = cell.rest_forward(
        dataset.features, weights, graph,
        UpdateSchedule.fixed(updates), mask_cfg,
        rng=rng, rule=rule,
    )
    labels = dataset.labels
    classes = max(int(labels.max()) + 1, weights.head.n_out)
    if weights.head.kind == "detect":
        scores = cell.sigmoid(logits[:, 0])
        auroc = auroc_binary(scores, labels)
        classes = 2
    else:
        probs = cell.softmax(logits)
        auroc = auroc_macro(probs, labels)
    preds = predictions_from_logits(weights.head, logits)
    loss, _ = loss_and_grad(logits, labels, loss_kind, class_weights)
    return EvalReport(
        auroc=auroc,
        weighted_f1=weighted_f1(labels, preds, classes),
        confusion=confusion_matrix(labels, preds, classes),
        accuracy=float(np.mean(preds == labels)),
        mean_loss=loss,
        n_clips=len(dataset),
    )
