"""Raw multichannel streams to per-second log-spectral feature clips.

A recording of shape (samples, N) is cut into clips of ``clip_seconds``
seconds, each clip into one-second windows of L = rate samples. Every window
and channel is mapped to M spectral amplitude features (log scale), then each
feature vector is normalized to zero mean and unit variance across the M
bins. Trailing samples that do not fill a whole clip are dropped.

Also hosts the synthetic task generator used for desk-scale experiments:
class-dependent sine bursts on small clusters of nodes, buried in noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError

LOG_EPS = 1e-8
NORM_EPS = 1e-8


# ---------------------------------------------------------------------------
# windowing


def window_stream(
    stream: np.ndarray,
    rate: int,
    clip_seconds: int,
    stride_seconds: int | None = None,
) -> np.ndarray:
    """Cut (samples, N) into clips of shape (n_clips, T, L, N).

    T = clip_seconds one-second windows of L = rate samples. Clips start
    every ``stride_seconds`` (default: clip_seconds, i.e. non-overlapping).
    A stream shorter than one clip is an error.
    """
    stream = np.asarray(stream, dtype=np.float64)
    if stream.ndim != 2:
        raise ValidationError(f"stream must be (samples, N), got {stream.shape}")
    if rate < 2:
        raise ValidationError(f"rate must be >= 2, got {rate}")
    if clip_seconds < 1:
        raise ValidationError(f"clip_seconds must be >= 1, got {clip_seconds}")
    if stride_seconds is None:
        stride_seconds = clip_seconds
    if stride_seconds < 1:
        raise ValidationError(f"stride must be >= 1 second, got {stride_seconds}")
    samples, n = stream.shape
    clip_len = clip_seconds * rate
    stride_len = stride_seconds * rate
    if samples < clip_len:
        raise ValidationError(
            f"stream of {samples} samples is shorter than one clip ({clip_len})"
        )
    n_clips = (samples - clip_len) // stride_len + 1
    clips = np.empty((n_clips, clip_seconds, rate, n))
    for c in range(n_clips):
        start = c * stride_len
        chunk = stream[start : start + clip_len]
        clips[c] = chunk.reshape(clip_seconds, rate, n)
    return clips


# ---------------------------------------------------------------------------
# spectral features


def spectral_features(
    windows: np.ndarray,
    n_features: int | None = None,
    keep_dc: bool = False,
) -> np.ndarray:
    """Log amplitude spectra per window and channel.

    Input (..., L, N) -> output (..., M, N) with M = L // 2 by default.
    The default keeps bins 1..M (drops the constant offset bin); ``keep_dc``
    keeps bins 0..M-1 instead (drops the top bin).
    """
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim < 2:
        raise ValidationError(f"windows must be (..., L, N), got {windows.shape}")
    length = windows.shape[-2]
    if length < 2:
        raise ValidationError(f"window length must be >= 2, got {length}")
    m = length // 2 if n_features is None else n_features
    available = length // 2  # usable bins beyond DC for even or odd L
    if not 1 <= m <= available:
        raise ValidationError(
            f"n_features must be in [1, {available}] for window length {length}"
        )
    spectrum = np.fft.rfft(windows, axis=-2)
    amplitude = np.abs(spectrum)
    if keep_dc:
        band = amplitude[..., 0:m, :]
    else:
        band = amplitude[..., 1 : m + 1, :]
    return np.log(band + LOG_EPS)


def znorm_features(features: np.ndarray) -> np.ndarray:
    """Normalize each feature vector (the M axis) to mean 0, variance 1.

    A constant vector maps to zeros: the centered values vanish and the
    epsilon in the denominator only guards the division.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim < 2:
        raise ValidationError(f"features must be (..., M, N), got {features.shape}")
    mean = features.mean(axis=-2, keepdims=True)
    std = features.std(axis=-2, keepdims=True)
    return (features - mean) / (std + NORM_EPS)


def preprocess_stream(
    stream: np.ndarray,
    rate: int,
    clip_seconds: int,
    stride_seconds: int | None = None,
    n_features: int | None = None,
    keep_dc: bool = False,
) -> np.ndarray:
    """Full pipeline: window, spectral transform, normalize.

    Returns (n_clips, T, M, N) feature clips ready for the recurrent cell.
    """
    clips = window_stream(stream, rate, clip_seconds, stride_seconds)
    return znorm_features(spectral_features(clips, n_features, keep_dc))


# ---------------------------------------------------------------------------
# datasets


@dataclass
class EegClip:
    """One labeled feature clip."""

    features: np.ndarray  # (T, M, N)
    label: int


@dataclass
class ClipSet:
    """A labeled collection of feature clips."""

    features: np.ndarray  # (num, T, M, N)
    labels: np.ndarray  # (num,) integer

    def __post_init__(self):
        if self.features.ndim != 4:
            raise ValidationError(
                f"features must be (num, T, M, N), got {self.features.shape}"
            )
        if self.labels.shape != (self.features.shape[0],):
            raise ValidationError(
                f"{self.features.shape[0]} clips but {self.labels.shape} labels"
            )

    def __len__(self) -> int:
        return self.features.shape[0]

    def clip(self, index: int) -> EegClip:
        return EegClip(self.features[index], int(self.labels[index]))


def save_dataset(directory: str | Path, dataset: ClipSet) -> list[Path]:
    """Write features.rten and labels.rten into a directory."""
    from . import tensorio

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    fpath = directory / "features.rten"
    lpath = directory / "labels.rten"
    tensorio.save_tensor(fpath, dataset.features)
    tensorio.save_tensor(lpath, dataset.labels.astype(np.float64))
    return [fpath, lpath]


def load_dataset(directory: str | Path) -> ClipSet:
    from . import tensorio

    directory = Path(directory)
    features = tensorio.load_tensor(directory / "features.rten")
    raw_labels = tensorio.load_tensor(directory / "labels.rten")
    if raw_labels.ndim != 1:
        raise ValidationError(f"labels must be rank 1, got {raw_labels.shape}")
    labels = raw_labels.astype(np.int64)
    if not np.all(labels == raw_labels):
        raise ValidationError("labels tensor contains non-integer values")
    return ClipSet(features, labels)


# ---------------------------------------------------------------------------
# synthetic task


@dataclass
class SynthConfig:
    """Synthetic classification task over a ring of sensor nodes.

    Class c drives a contiguous cluster of ``cluster_size`` nodes with a sine
    at ``freqs[c]`` cycles per second (shared random phase per clip, random
    amplitude), on top of white noise everywhere.
    """

    nodes: int = 8
    seconds: int = 10
    rate: int = 32
    classes: int = 2
    clips_per_class: int = 100
    cluster_size: int = 3
    freqs: tuple[int, ...] = (4, 9)
    noise: float = 1.0
    amp_min: float = 0.25
    amp_max: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if self.nodes < 2:
            raise ValidationError("need at least 2 nodes")
        if self.classes < 2:
            raise ValidationError("need at least 2 classes")
        if self.seconds < 1 or self.rate < 4 or self.rate % 2:
            raise ValidationError("need seconds >= 1 and an even rate >= 4")
        if len(self.freqs) != self.classes:
            raise ValidationError(
                f"{self.classes} classes need {self.classes} frequencies"
            )
        for f in self.freqs:
            if not 1 <= f < self.rate / 2:
                raise ValidationError(
                    f"frequency {f} outside [1, rate/2) for rate {self.rate}"
                )
        if not 1 <= self.cluster_size <= self.nodes // self.classes:
            raise ValidationError(
                f"cluster_size {self.cluster_size} does not fit "
                f"{self.classes} disjoint clusters on {self.nodes} nodes"
            )
        if self.clips_per_class < 1:
            raise ValidationError("clips_per_class must be >= 1")
        if self.noise < 0:
            raise ValidationError("noise must be >= 0")
        if not 0 < self.amp_min <= self.amp_max:
            raise ValidationError("need 0 < amp_min <= amp_max")

    def cluster(self, label: int) -> list[int]:
        start = label * (self.nodes // self.classes)
        return list(range(start, start + self.cluster_size))

    @property
    def n_features(self) -> int:
        return self.rate // 2

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "SynthConfig":
        """Build from a key=value config file (freqs comma-separated)."""
        kwargs: dict = {}
        int_keys = (
            "nodes", "seconds", "rate", "classes", "clips_per_class",
            "cluster_size", "seed",
        )
        float_keys = ("noise", "amp_min", "amp_max")
        for key, raw in mapping.items():
            try:
                if key in int_keys:
                    kwargs[key] = int(raw)
                elif key in float_keys:
                    kwargs[key] = float(raw)
                elif key == "freqs":
                    kwargs[key] = tuple(int(v) for v in raw.split(",") if v)
                else:
                    raise ValidationError(f"unknown config key {key!r}")
            except ValueError as exc:
                raise ValidationError(f"config key {key}: {exc}") from None
        return cls(**kwargs)


def circle_layout(nodes: int) -> tuple[list[str], np.ndarray]:
    """Evenly spaced points on a unit circle in the z = 0 plane."""
    angles = 2.0 * np.pi * np.arange(nodes) / nodes
    coords = np.stack(
        [np.cos(angles), np.sin(angles), np.zeros(nodes)], axis=1
    )
    names = [f"node{i}" for i in range(nodes)]
    return names, coords


def synth_raw_clip(
    config: SynthConfig, label: int, rng: np.random.Generator
) -> np.ndarray:
    """One raw recording of shape (seconds * rate, nodes) for a class."""
    total = config.seconds * config.rate
    clip = config.noise * rng.standard_normal((total, config.nodes))
    amp = rng.uniform(config.amp_min, config.amp_max)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    t = np.arange(total) / config.rate
    tone = amp * np.sin(2.0 * np.pi * config.freqs[label] * t + phase)
    for node in config.cluster(label):
        clip[:, node] += tone
    return clip


def make_synth_dataset(
    config: SynthConfig, seed: int | None = None
) -> ClipSet:
    """Balanced labeled dataset of preprocessed clips, fully seeded."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    num = config.classes * config.clips_per_class
    features = np.empty(
        (num, config.seconds, config.n_features, config.nodes)
    )
    labels = np.empty(num, dtype=np.int64)
    idx = 0
    for label in range(config.classes):
        for _ in range(config.clips_per_class):
            raw = synth_raw_clip(config, label, rng)
            feats = preprocess_stream(raw, config.rate, config.seconds)
            features[idx] = feats[0]
            labels[idx] = label
            idx += 1
    return ClipSet(features, labels)
