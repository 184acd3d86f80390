"""Recurrent cells over graph-coupled multichannel streams.

The central model keeps one state matrix of shape (Q, N): Q hidden features
for each of N sensor nodes. Every time step computes an affine drive from the
input spectrum and the previous state, then applies one or more residual
refinements produced by a two-layer graph convolution, each optionally gated
by a Bernoulli keep-mask:

    drive   = w_in @ x + u_rec @ state + in_bias
    delta   = conv2(relu(conv1(drive)))
    state'  = drive + delta * mask

Baselines: a node-wise GRU with shared dense gates and a vanilla tanh RNN.
A generic candidate protocol lets the masked-residual loop wrap either the
main cell or the RNN.

All math is float64; shapes accept an optional leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .errors import DivergenceError, ValidationError
from .graph import DistanceGraph

MASK_MODES = ("sample", "scaled", "off")
HEAD_KINDS = ("detect", "classify")


# ---------------------------------------------------------------------------
# weight containers


@dataclass
class GraphConvLayer:
    """One graph convolution: self term, neighbor-mix term, bias."""

    theta_self: np.ndarray  # (Q_out, Q_in)
    theta_neigh: np.ndarray  # (Q_out, Q_in)
    bias: np.ndarray  # (Q_out,)
    activation: str  # "relu" | "linear"


@dataclass
class ReadoutHead:
    """Affine map from the node-mean state vector to class logits."""

    kind: str  # "detect" (1 logit, sigmoid) | "classify" (C logits, softmax)
    weight: np.ndarray  # (K, Q)
    bias: np.ndarray  # (K,)

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class RestWeights:
    """Parameters of the residual state-update cell."""

    w_in: np.ndarray  # (Q, M)
    u_rec: np.ndarray  # (Q, Q)
    in_bias: np.ndarray  # (Q,)
    conv1: GraphConvLayer  # relu
    conv2: GraphConvLayer  # linear
    head: ReadoutHead

    @property
    def q(self) -> int:
        return self.w_in.shape[0]

    @property
    def m(self) -> int:
        return self.w_in.shape[1]

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        yield "w_in", self.w_in
        yield "u_rec", self.u_rec
        yield "in_bias", self.in_bias
        yield "conv1_self", self.conv1.theta_self
        yield "conv1_neigh", self.conv1.theta_neigh
        yield "conv1_bias", self.conv1.bias
        yield "conv2_self", self.conv2.theta_self
        yield "conv2_neigh", self.conv2.theta_neigh
        yield "conv2_bias", self.conv2.bias
        yield "head_weight", self.head.weight
        yield "head_bias", self.head.bias


@dataclass
class GruWeights:
    """Node-wise GRU with dense gates shared across nodes."""

    w_reset: np.ndarray  # (Q, Q + M)
    w_update: np.ndarray  # (Q, Q + M)
    w_cand: np.ndarray  # (Q, Q + M)
    b_reset: np.ndarray  # (Q,)
    b_update: np.ndarray  # (Q,)
    b_cand: np.ndarray  # (Q,)
    head: ReadoutHead

    @property
    def q(self) -> int:
        return self.w_reset.shape[0]

    @property
    def m(self) -> int:
        return self.w_reset.shape[1] - self.q

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        yield "w_reset", self.w_reset
        yield "w_update", self.w_update
        yield "w_cand", self.w_cand
        yield "b_reset", self.b_reset
        yield "b_update", self.b_update
        yield "b_cand", self.b_cand
        yield "head_weight", self.head.weight
        yield "head_bias", self.head.bias


@dataclass
class RnnWeights:
    """Vanilla tanh RNN, node-wise with shared dense maps."""

    w_in: np.ndarray  # (Q, M)
    w_rec: np.ndarray  # (Q, Q)
    bias: np.ndarray  # (Q,)
    head: ReadoutHead

    @property
    def q(self) -> int:
        return self.w_in.shape[0]

    @property
    def m(self) -> int:
        return self.w_in.shape[1]

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        yield "w_in", self.w_in
        yield "w_rec", self.w_rec
        yield "bias", self.bias
        yield "head_weight", self.head.weight
        yield "head_bias", self.head.bias


# ---------------------------------------------------------------------------
# update policies


@dataclass(frozen=True)
class MaskConfig:
    """Bernoulli keep-mask policy for the residual term.

    mode "sample" draws a fresh 0/1 mask per refinement, "scaled" replaces the
    mask by its expectation (delta scaled by keep_prob), "off" applies the
    full unscaled delta.
    """

    keep_prob: float = 1.0
    mode: str = "sample"

    def __post_init__(self):
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValidationError(
                f"keep_prob must be in (0, 1], got {self.keep_prob}"
            )
        if self.mode not in MASK_MODES:
            raise ValidationError(f"mask mode must be one of {MASK_MODES}")

    @classmethod
    def off(cls) -> "MaskConfig":
        return cls(1.0, "off")


@dataclass(frozen=True)
class UpdateSchedule:
    """How many residual refinements to run per time step.

    Fixed count when low == high, otherwise drawn uniformly from
    [low, high] inclusive for every time step.
    """

    low: int
    high: int

    def __post_init__(self):
        if not 1 <= self.low <= self.high:
            raise ValidationError(
                f"need 1 <= low <= high, got [{self.low}, {self.high}]"
            )

    @classmethod
    def fixed(cls, count: int) -> "UpdateSchedule":
        return cls(count, count)

    @classmethod
    def uniform(cls, low: int, high: int) -> "UpdateSchedule":
        return cls(low, high)

    @property
    def is_fixed(self) -> bool:
        return self.low == self.high

    @property
    def midpoint(self) -> int:
        return (self.low + self.high) // 2

    def draw(self, rng: np.random.Generator) -> int:
        if self.is_fixed:
            return self.low
        return int(rng.integers(self.low, self.high + 1))


@dataclass
class RestState:
    """The single carried state matrix. This is all the cell remembers."""

    state: np.ndarray  # (Q, N)

    @classmethod
    def zeros(cls, q: int, n: int) -> "RestState":
        return cls(np.zeros((q, n)))


@dataclass
class OpCounters:
    """Structural operation counts accumulated over forward passes."""

    dense_multiplies: int = 0
    graph_convs: int = 0
    gate_evaluations: int = 0
    state_blends: int = 0
    mask_draws: int = 0
    peak_state_floats: int = 0

    def observe_state(self, state: np.ndarray) -> None:
        self.peak_state_floats = max(self.peak_state_floats, state.size)


# ---------------------------------------------------------------------------
# initialization


def _snap(a: np.ndarray) -> np.ndarray:
    # round to the float32 grid so checkpoints round-trip bit-exactly
    return a.astype(np.float32).astype(np.float64)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return _snap(rng.uniform(-bound, bound, size=shape))


def spectral_rescale(matrix: np.ndarray, target: float) -> np.ndarray:
    """Scale a square matrix so its largest singular value equals target."""
    top = np.linalg.norm(matrix, ord=2)
    if top == 0.0:
        raise ValidationError("cannot rescale a zero matrix")
    return _snap(matrix * (target / top))


def _make_head(kind: str, classes: int, q: int, rng) -> ReadoutHead:
    if kind not in HEAD_KINDS:
        raise ValidationError(f"head kind must be one of {HEAD_KINDS}")
    if kind == "detect":
        k = 1
    else:
        if classes < 2:
            raise ValidationError("classify head needs at least 2 classes")
        k = classes
    return ReadoutHead(kind, _uniform(rng, (k, q), q), _uniform(rng, (k,), q))


def init_rest(
    q: int,
    m: int,
    rng: np.random.Generator,
    head_kind: str = "detect",
    classes: int = 2,
    recurrent_norm: float | None = 0.9,
) -> RestWeights:
    """Uniform +-1/sqrt(fan_in) init; recurrent map rescaled to a fixed
    spectral norm so long products neither explode nor vanish at start."""
    u = _uniform(rng, (q, q), q)
    if recurrent_norm is not None:
        u = spectral_rescale(u, recurrent_norm)
    return RestWeights(
        w_in=_uniform(rng, (q, m), m),
        u_rec=u,
        in_bias=_uniform(rng, (q,), m),
        conv1=GraphConvLayer(
            _uniform(rng, (q, q), q),
            _uniform(rng, (q, q), q),
            _uniform(rng, (q,), q),
            "relu",
        ),
        conv2=GraphConvLayer(
            _uniform(rng, (q, q), q),
            _uniform(rng, (q, q), q),
            _uniform(rng, (q,), q),
            "linear",
        ),
        head=_make_head(head_kind, classes, q, rng),
    )


def init_gru(
    q: int,
    m: int,
    rng: np.random.Generator,
    head_kind: str = "detect",
    classes: int = 2,
) -> GruWeights:
    fan = q + m
    return GruWeights(
        w_reset=_uniform(rng, (q, fan), fan),
        w_update=_uniform(rng, (q, fan), fan),
        w_cand=_uniform(rng, (q, fan), fan),
        b_reset=_uniform(rng, (q,), fan),
        b_update=_uniform(rng, (q,), fan),
        b_cand=_uniform(rng, (q,), fan),
        head=_make_head(head_kind, classes, q, rng),
    )


def init_rnn(
    q: int,
    m: int,
    rng: np.random.Generator,
    head_kind: str = "detect",
    classes: int = 2,
    recurrent_norm: float | None = 0.9,
) -> RnnWeights:
    w_rec = _uniform(rng, (q, q), q)
    if recurrent_norm is not None:
        w_rec = spectral_rescale(w_rec, recurrent_norm)
    return RnnWeights(
        w_in=_uniform(rng, (q, m), m),
        w_rec=w_rec,
        bias=_uniform(rng, (q,), m),
        head=_make_head(head_kind, classes, q, rng),
    )


def count_parameters(weights) -> int:
    """Total trainable scalar count, head included."""
    return int(sum(a.size for _, a in weights.named_arrays()))


def snap_weights(weights) -> None:
    """Round every weight entry to the float32 grid, in place.

    Checkpoints store float32, so snapping makes the in-memory weights equal
    what a later load returns, bit for bit.
    """
    for _, arr in weights.named_arrays():
        arr[...] = _snap(arr)


# ---------------------------------------------------------------------------
# primitive ops


def graph_conv(
    layer: GraphConvLayer, h: np.ndarray, neighbor_w: np.ndarray
) -> np.ndarray:
    """Per-node conv: self term plus kernel-weighted sum over neighbors.

    h is (..., Q, N); neighbor_w is the zero-diagonal adjacency (N, N).
    """
    pre = (
        layer.theta_self @ h
        + layer.theta_neigh @ (h @ neighbor_w)
        + layer.bias[..., None]
    )
    if layer.activation == "relu":
        return np.maximum(pre, 0.0)
    return pre


def affine_drive(
    weights: RestWeights, x: np.ndarray, state: np.ndarray
) -> np.ndarray:
    """Input injection plus recurrent map: w_in x + u_rec s + bias."""
    return weights.w_in @ x + weights.u_rec @ state + weights.in_bias[..., None]


def delta_network(
    weights: RestWeights, h: np.ndarray, neighbor_w: np.ndarray
) -> np.ndarray:
    """Two-layer graph conv producing the residual refinement."""
    return graph_conv(
        weights.conv2, graph_conv(weights.conv1, h, neighbor_w), neighbor_w
    )


def sample_mask(
    shape, keep_prob: float, rng: np.random.Generator
) -> np.ndarray:
    """0/1 Bernoulli keep-mask, one independent draw per state entry."""
    return (rng.random(size=shape) < keep_prob).astype(np.float64)


def _blend(
    base: np.ndarray,
    delta: np.ndarray,
    mask_cfg: MaskConfig,
    rng: np.random.Generator | None,
    counters: OpCounters | None,
) -> np.ndarray:
    if mask_cfg.mode == "sample":
        if rng is None:
            raise ValidationError("sampled masks need an rng")
        mask = sample_mask(base.shape, mask_cfg.keep_prob, rng)
        if counters is not None:
            counters.mask_draws += 1
            counters.state_blends += 1
        return base + delta * mask
    if counters is not None:
        counters.state_blends += 1
    if mask_cfg.mode == "scaled":
        return base + mask_cfg.keep_prob * delta
    return base + delta


# ---------------------------------------------------------------------------
# main cell forward


def rest_step(
    weights: RestWeights,
    neighbor_w: np.ndarray,
    x: np.ndarray,
    state: np.ndarray,
    updates: int,
    mask_cfg: MaskConfig,
    rng: np.random.Generator | None = None,
    counters: OpCounters | None = None,
    rule: str = "reinject",
    time_step: int = 0,
) -> np.ndarray:
    """Advance the state by one time step with ``updates`` refinements.

    rule "reinject" recomputes the affine drive from (x, state) before every
    refinement; rule "state_only" computes it once and then iterates the
    residual refinement on the state alone.
    """
    # overflow here is not an error condition per se: it is detected by the
    # isfinite checks and reported as a DivergenceError, so silence the
    # intermediate numpy warnings
    if rule == "reinject":
        with np.errstate(over="ignore", invalid="ignore"):
            for i in range(updates):
                h = affine_drive(weights, x, state)
                delta = delta_network(weights, h, neighbor_w)
                if counters is not None:
                    counters.dense_multiplies += 2
                    counters.graph_convs += 2
                state = _blend(h, delta, mask_cfg, rng, counters)
                if not np.all(np.isfinite(state)):
                    raise DivergenceError.at_step(time_step, i)
    elif rule == "state_only":
        with np.errstate(over="ignore", invalid="ignore"):
            state = affine_drive(weights, x, state)
            if counters is not None:
                counters.dense_multiplies += 2
            for i in range(updates):
                delta = delta_network(weights, state, neighbor_w)
                if counters is not None:
                    counters.graph_convs += 2
                state = _blend(state, delta, mask_cfg, rng, counters)
                if not np.all(np.isfinite(state)):
                    raise DivergenceError.at_step(time_step, i)
    else:
        raise ValidationError(f"unknown forward rule {rule!r}")
    if counters is not None:
        counters.observe_state(state)
    return state


def head_logits(head: ReadoutHead, state: np.ndarray) -> np.ndarray:
    """Mean-pool the node columns, then apply the affine head."""
    pooled = state.mean(axis=-1)
    return pooled @ head.weight.T + head.bias


def rest_forward(
    clip: np.ndarray,
    weights: RestWeights,
    graph: DistanceGraph,
    schedule: UpdateSchedule,
    mask_cfg: MaskConfig,
    rng: np.random.Generator | None = None,
    counters: OpCounters | None = None,
    rule: str = "reinject",
    state: np.ndarray | None = None,
    return_states: bool = False,
):
    """Run a clip of shape (T, M, N) (or (B, T, M, N)) through the cell.

    Returns logits, or (logits, [state after each time step]) when
    ``return_states`` is set. The carried memory is exactly one state matrix.
    """
    clip = np.asarray(clip, dtype=np.float64)
    _check_clip(clip, weights.q, weights.m, graph.n_nodes)
    neighbor_w = graph.neighbor_weights()
    t_axis = clip.ndim - 3
    steps = clip.shape[t_axis]
    if state is None:
        shape = (weights.q, graph.n_nodes)
        if clip.ndim == 4:
            shape = (clip.shape[0],) + shape
        state = np.zeros(shape)
    states = []
    for t in range(steps):
        x = clip[t] if clip.ndim == 3 else clip[:, t]
        updates = schedule.draw(rng) if rng is not None else schedule.midpoint
        state = rest_step(
            weights, neighbor_w, x, state, updates, mask_cfg, rng, counters,
            rule=rule, time_step=t,
        )
        if return_states:
            states.append(state)
    logits = head_logits(weights.head, state)
    if return_states:
        return logits, states
    return logits


def _check_clip(clip: np.ndarray, q: int, m: int, n: int) -> None:
    if clip.ndim not in (3, 4):
        raise ValidationError(f"clip must be (T, M, N) or (B, T, M, N), got {clip.shape}")
    if clip.shape[-2] != m:
        raise ValidationError(f"clip has {clip.shape[-2]} features, weights expect {m}")
    if clip.shape[-1] != n:
        raise ValidationError(f"clip has {clip.shape[-1]} nodes, graph has {n}")


# ---------------------------------------------------------------------------
# baselines


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def gru_step(
    weights: GruWeights,
    x: np.ndarray,
    h: np.ndarray,
    counters: OpCounters | None = None,
) -> np.ndarray:
    """Gated update; reset/update/candidate gates over [h, x] columns."""
    hx = np.concatenate([h, x], axis=-2)
    r = _sigmoid(weights.w_reset @ hx + weights.b_reset[..., None])
    z = _sigmoid(weights.w_update @ hx + weights.b_update[..., None])
    rhx = np.concatenate([r * h, x], axis=-2)
    cand = np.tanh(weights.w_cand @ rhx + weights.b_cand[..., None])
    if counters is not None:
        counters.gate_evaluations += 3
        counters.state_blends += 1
    return (1.0 - z) * h + z * cand


def gru_step_residual(
    weights: GruWeights,
    x: np.ndarray,
    h: np.ndarray,
) -> np.ndarray:
    """Algebraic rewrite of the gated update as h + z * (cand - h)."""
    hx = np.concatenate([h, x], axis=-2)
    r = _sigmoid(weights.w_reset @ hx + weights.b_reset[..., None])
    z = _sigmoid(weights.w_update @ hx + weights.b_update[..., None])
    rhx = np.concatenate([r * h, x], axis=-2)
    cand = np.tanh(weights.w_cand @ rhx + weights.b_cand[..., None])
    return h + z * (cand - h)


def gru_forward(
    clip: np.ndarray,
    weights: GruWeights,
    counters: OpCounters | None = None,
    state: np.ndarray | None = None,
) -> np.ndarray:
    """Run a clip through the GRU baseline; same readout head contract."""
    clip = np.asarray(clip, dtype=np.float64)
    if clip.ndim not in (3, 4):
        raise ValidationError(f"clip must be (T, M, N) or (B, T, M, N), got {clip.shape}")
    if clip.shape[-2] != weights.m:
        raise ValidationError(
            f"clip has {clip.shape[-2]} features, weights expect {weights.m}"
        )
    steps = clip.shape[clip.ndim - 3]
    n = clip.shape[-1]
    if state is None:
        shape = (weights.q, n)
        if clip.ndim == 4:
            shape = (clip.shape[0],) + shape
        state = np.zeros(shape)
    for t in range(steps):
        x = clip[t] if clip.ndim == 3 else clip[:, t]
        state = gru_step(weights, x, state, counters)
        if not np.all(np.isfinite(state)):
            raise DivergenceError.at_step(t, 0)
        if counters is not None:
            counters.observe_state(state)
    return head_logits(weights.head, state)


def rnn_step(
    weights: RnnWeights,
    x: np.ndarray,
    h: np.ndarray,
    counters: OpCounters | None = None,
) -> np.ndarray:
    """Vanilla tanh update replacing the whole state."""
    if counters is not None:
        counters.dense_multiplies += 2
    return np.tanh(
        weights.w_in @ x + weights.w_rec @ h + weights.bias[..., None]
    )


# ---------------------------------------------------------------------------
# candidate protocol: one masked-residual loop wrapping different cells

Candidate = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


def rest_candidate(weights: RestWeights, neighbor_w: np.ndarray) -> Candidate:
    """(x, s) -> (drive, delta); the residual base is the fresh drive."""

    def fn(x, s):
        h = affine_drive(weights, x, s)
        return h, delta_network(weights, h, neighbor_w)

    return fn


def rnn_candidate(weights: RnnWeights) -> Candidate:
    """(x, s) -> (s, tanh drive); the residual base is the old state."""

    def fn(x, s):
        return s, np.tanh(
            weights.w_in @ x + weights.w_rec @ s + weights.bias[..., None]
        )

    return fn


def wrapped_forward(
    clip: np.ndarray,
    candidate: Candidate,
    head: ReadoutHead,
    q: int,
    schedule: UpdateSchedule,
    mask_cfg: MaskConfig,
    rng: np.random.Generator | None = None,
    state: np.ndarray | None = None,
) -> np.ndarray:
    """Masked multi-refinement loop around any candidate function."""
    clip = np.asarray(clip, dtype=np.float64)
    if clip.ndim not in (3, 4):
        raise ValidationError(f"clip must be (T, M, N) or (B, T, M, N), got {clip.shape}")
    steps = clip.shape[clip.ndim - 3]
    n = clip.shape[-1]
    if state is None:
        shape = (q, n)
        if clip.ndim == 4:
            shape = (clip.shape[0],) + shape
        state = np.zeros(shape)
    for t in range(steps):
        x = clip[t] if clip.ndim == 3 else clip[:, t]
        updates = schedule.draw(rng) if rng is not None else schedule.midpoint
        for i in range(updates):
            base, delta = candidate(x, state)
            state = _blend(base, delta, mask_cfg, rng, None)
            if not np.all(np.isfinite(state)):
                raise DivergenceError.at_step(t, i)
    return head_logits(head, state)


# ---------------------------------------------------------------------------
# probabilities


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(head: ReadoutHead, logits: np.ndarray) -> np.ndarray:
    """Sigmoid score for detect heads, softmax distribution for classify."""
    if head.kind == "detect":
        return _sigmoid(logits)
    return softmax(logits)


sigmoid = _sigmoid
