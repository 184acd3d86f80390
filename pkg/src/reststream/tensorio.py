"""Binary tensor files, electrode layout CSVs, and model checkpoints.

Tensor format (.rten): magic ``RESTTEN1``, then a little-endian u32 rank in
[1, 4], rank u32 dims, and the float32 payload in row-major order. Payloads
must be finite.

Checkpoint format (.rckpt): magic ``RESTCKP1``, a key-value metadata block,
then named tensors in a fixed declared order, each an embedded tensor blob.
Writes are atomic (temp file + rename), so a failed save leaves no partial
file behind.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cell import (
    GraphConvLayer,
    MaskConfig,
    ReadoutHead,
    RestWeights,
    UpdateSchedule,
)
from .errors import FormatError, ValidationError
from .graph import DistanceGraph

TENSOR_MAGIC = b"RESTTEN1"
CHECKPOINT_MAGIC = b"RESTCKP1"
MAX_RANK = 4

_U32 = struct.Struct("<I")


# ---------------------------------------------------------------------------
# tensor files


def tensor_to_bytes(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.ndim < 1 or array.ndim > MAX_RANK:
        raise ValidationError(
            f"tensor rank must be in [1, {MAX_RANK}], got {array.ndim}"
        )
    if any(d < 1 for d in array.shape):
        raise ValidationError(f"tensor dims must be positive, got {array.shape}")
    if not np.all(np.isfinite(array)):
        raise ValidationError("refusing to write non-finite tensor payload")
    payload = np.ascontiguousarray(array, dtype="<f4")
    parts = [TENSOR_MAGIC, _U32.pack(array.ndim)]
    parts.extend(_U32.pack(d) for d in array.shape)
    parts.append(payload.tobytes())
    return b"".join(parts)


def _need(buf: bytes, offset: int, count: int, what: str) -> int:
    end = offset + count
    if end > len(buf):
        raise FormatError(f"truncated tensor data: {what}")
    return end


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor blob; returns (float64 array, end offset)."""
    end = _need(buf, offset, len(TENSOR_MAGIC), "magic")
    magic = buf[offset:end]
    if magic != TENSOR_MAGIC:
        if magic[:7] == TENSOR_MAGIC[:7]:
            raise FormatError(
                f"unsupported tensor format version {magic!r}"
            )
        raise FormatError(f"bad tensor magic {magic!r}")
    offset = end
    end = _need(buf, offset, 4, "rank")
    (rank,) = _U32.unpack_from(buf, offset)
    if rank < 1 or rank > MAX_RANK:
        raise FormatError(f"tensor rank must be in [1, {MAX_RANK}], got {rank}")
    offset = end
    dims = []
    for _ in range(rank):
        end = _need(buf, offset, 4, "dims")
        (d,) = _U32.unpack_from(buf, offset)
        if d < 1:
            raise FormatError("tensor dims must be positive")
        dims.append(d)
        offset = end
    count = 1
    for d in dims:
        count *= d
    end = _need(buf, offset, 4 * count, "payload")
    flat = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
    array = flat.reshape(dims).astype(np.float64)
    if not np.all(np.isfinite(array)):
        raise FormatError("tensor payload contains non-finite values")
    return array, end


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    _atomic_write(Path(path), tensor_to_bytes(array))


def load_tensor(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    array, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after tensor payload")
    return array


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# electrode layout CSV


def load_layout(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Read a sensor layout CSV: header ``name,x,y,z`` (or ``name,x,y``
    with z taken as 0), unique names, at least two rows."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError("empty layout file")
    header = [c.strip() for c in rows[0]]
    if header == ["name", "x", "y", "z"]:
        width = 4
    elif header == ["name", "x", "y"]:
        width = 3
    else:
        raise FormatError(
            f"layout header must be name,x,y,z or name,x,y, got {','.join(header)}"
        )
    names: list[str] = []
    coords: list[list[float]] = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise FormatError(
                f"layout line {lineno}: expected {width} fields, got {len(row)}"
            )
        name = row[0].strip()
        if not name:
            raise FormatError(f"layout line {lineno}: empty name")
        if name in names:
            raise FormatError(f"duplicate electrode name {name!r}")
        try:
            vals = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise FormatError(f"layout line {lineno}: {exc}") from None
        if not all(np.isfinite(vals)):
            raise FormatError(f"layout line {lineno}: non-finite coordinate")
        if width == 3:
            vals.append(0.0)
        names.append(name)
        coords.append(vals)
    if len(names) < 2:
        raise FormatError("layout needs at least 2 electrodes")
    return names, np.array(coords, dtype=np.float64)


def default_layout_path() -> Path:
    """Bundled approximate 19-channel clinical montage."""
    return Path(__file__).parent / "data" / "ten_twenty_19.csv"


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """A trained model plus everything needed to run it."""

    weights: RestWeights
    graph: DistanceGraph
    mask: MaskConfig
    schedule: UpdateSchedule
    seed: int
    loss: str
    rule: str
    classes: int

    @property
    def infer_updates(self) -> int:
        return self.schedule.midpoint


def _meta_block(ckpt: Checkpoint) -> list[tuple[str, str]]:
    w = ckpt.weights
    return [
        ("model", "rest"),
        ("q", str(w.q)),
        ("m", str(w.m)),
        ("n", str(ckpt.graph.n_nodes)),
        ("head", w.head.kind),
        ("classes", str(ckpt.classes)),
        ("keep_prob", repr(float(ckpt.mask.keep_prob))),
        ("mask_mode", ckpt.mask.mode),
        ("sched_low", str(ckpt.schedule.low)),
        ("sched_high", str(ckpt.schedule.high)),
        ("seed", str(ckpt.seed)),
        ("loss", ckpt.loss),
        ("rule", ckpt.rule),
        ("sigma", repr(float(ckpt.graph.sigma))),
        ("threshold", repr(float(ckpt.graph.threshold))),
        ("node_names", ",".join(ckpt.graph.names)),
    ]


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    parts = [CHECKPOINT_MAGIC]
    meta = _meta_block(ckpt)
    parts.append(_U32.pack(len(meta)))
    for key, value in meta:
        kb, vb = key.encode(), value.encode()
        parts.extend((_U32.pack(len(kb)), kb, _U32.pack(len(vb)), vb))
    tensors = [("adjacency", ckpt.graph.adjacency)]
    tensors.extend(ckpt.weights.named_arrays())
    parts.append(_U32.pack(len(tensors)))
    for name, array in tensors:
        nb = name.encode()
        parts.extend((_U32.pack(len(nb)), nb, tensor_to_bytes(array)))
    return b"".join(parts)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    _atomic_write(Path(path), checkpoint_to_bytes(ckpt))


def _read_u32(buf: bytes, offset: int, what: str) -> tuple[int, int]:
    end = _need_ckpt(buf, offset, 4, what)
    (value,) = _U32.unpack_from(buf, offset)
    return value, end


def _need_ckpt(buf: bytes, offset: int, count: int, what: str) -> int:
    end = offset + count
    if end > len(buf):
        raise FormatError(f"truncated checkpoint: {what}")
    return end


def _read_str(buf: bytes, offset: int, what: str) -> tuple[str, int]:
    length, offset = _read_u32(buf, offset, what)
    end = _need_ckpt(buf, offset, length, what)
    return buf[offset:end].decode(), end


EXPECTED_TENSORS = (
    "adjacency",
    "w_in",
    "u_rec",
    "in_bias",
    "conv1_self",
    "conv1_neigh",
    "conv1_bias",
    "conv2_self",
    "conv2_neigh",
    "conv2_bias",
    "head_weight",
    "head_bias",
)


def load_checkpoint(path: str | Path) -> Checkpoint:
    buf = Path(path).read_bytes()
    offset = len(CHECKPOINT_MAGIC)
    if len(buf) < offset:
        raise FormatError("truncated checkpoint: magic")
    magic = buf[:offset]
    if magic != CHECKPOINT_MAGIC:
        if magic[:7] == CHECKPOINT_MAGIC[:7]:
            raise FormatError(f"unsupported checkpoint version {magic!r}")
        raise FormatError(f"bad checkpoint magic {magic!r}")
    meta_count, offset = _read_u32(buf, offset, "metadata count")
    meta: dict[str, str] = {}
    for _ in range(meta_count):
        key, offset = _read_str(buf, offset, "metadata key")
        value, offset = _read_str(buf, offset, "metadata value")
        meta[key] = value
    tensor_count, offset = _read_u32(buf, offset, "tensor count")
    tensors: dict[str, np.ndarray] = {}
    order: list[str] = []
    for _ in range(tensor_count):
        name, offset = _read_str(buf, offset, "tensor name")
        try:
            array, offset = tensor_from_bytes(buf, offset)
        except FormatError as exc:
            raise FormatError(f"checkpoint tensor {name!r}: {exc}") from None
        tensors[name] = array
        order.append(name)
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after checkpoint")
    for name in EXPECTED_TENSORS:
        if name not in tensors:
            raise FormatError(f"checkpoint is missing tensor {name!r}")
    if tuple(order) != EXPECTED_TENSORS:
        raise FormatError(
            f"checkpoint tensors out of declared order: {order}"
        )
    return _assemble(meta, tensors)


def _meta_get(meta: dict[str, str], key: str) -> str:
    if key not in meta:
        raise FormatError(f"checkpoint metadata is missing {key!r}")
    return meta[key]


def _assemble(meta: dict[str, str], t: dict[str, np.ndarray]) -> Checkpoint:
    if _meta_get(meta, "model") != "rest":
        raise FormatError(f"unsupported model kind {meta['model']!r}")
    try:
        q = int(_meta_get(meta, "q"))
        m = int(_meta_get(meta, "m"))
        n = int(_meta_get(meta, "n"))
        classes = int(_meta_get(meta, "classes"))
        keep_prob = float(_meta_get(meta, "keep_prob"))
        low = int(_meta_get(meta, "sched_low"))
        high = int(_meta_get(meta, "sched_high"))
        seed = int(_meta_get(meta, "seed"))
        sigma = float(_meta_get(meta, "sigma"))
        threshold = float(_meta_get(meta, "threshold"))
    except ValueError as exc:
        raise FormatError(f"bad checkpoint metadata: {exc}") from None
    shapes = {
        "adjacency": (n, n),
        "w_in": (q, m),
        "u_rec": (q, q),
        "in_bias": (q,),
        "conv1_self": (q, q),
        "conv1_neigh": (q, q),
        "conv1_bias": (q,),
        "conv2_self": (q, q),
        "conv2_neigh": (q, q),
        "conv2_bias": (q,),
    }
    head_kind = _meta_get(meta, "head")
    k = 1 if head_kind == "detect" else classes
    shapes["head_weight"] = (k, q)
    shapes["head_bias"] = (k,)
    for name, want in shapes.items():
        if t[name].shape != want:
            raise FormatError(
                f"checkpoint tensor {name!r} has shape {t[name].shape}, expected {want}"
            )
    weights = RestWeights(
        w_in=t["w_in"],
        u_rec=t["u_rec"],
        in_bias=t["in_bias"],
        conv1=GraphConvLayer(
            t["conv1_self"], t["conv1_neigh"], t["conv1_bias"], "relu"
        ),
        conv2=GraphConvLayer(
            t["conv2_self"], t["conv2_neigh"], t["conv2_bias"], "linear"
        ),
        head=ReadoutHead(head_kind, t["head_weight"], t["head_bias"]),
    )
    names = tuple(_meta_get(meta, "node_names").split(","))
    if len(names) != n:
        raise FormatError("checkpoint node names do not match node count")
    graph = DistanceGraph(names, t["adjacency"], sigma, threshold)
    try:
        mask = MaskConfig(keep_prob, _meta_get(meta, "mask_mode"))
        schedule = UpdateSchedule(low, high)
    except ValidationError as exc:
        raise FormatError(f"bad checkpoint metadata: {exc}") from None
    return Checkpoint(
        weights=weights,
        graph=graph,
        mask=mask,
        schedule=schedule,
        seed=seed,
        loss=_meta_get(meta, "loss"),
        rule=_meta_get(meta, "rule"),
        classes=classes,
    )
