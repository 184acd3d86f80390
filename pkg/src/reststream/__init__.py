"""Streaming multichannel time-series classification with a residual
state-update graph-recurrent cell.

The package covers the full desk-scale pipeline: binary tensor and
checkpoint formats, distance-kernel coupling graphs over sensor layouts,
log-spectral preprocessing, the recurrent cell with Bernoulli-masked
multi-refinement updates, GRU and vanilla RNN baselines, hand-written
backpropagation through time with a finite-difference oracle, Adam
training, evaluation metrics, and a latency/op-count benchmark harness.
"""

from .cell import (
    GraphConvLayer,
    GruWeights,
    MaskConfig,
    OpCounters,
    ReadoutHead,
    RestState,
    RestWeights,
    RnnWeights,
    UpdateSchedule,
    count_parameters,
    gru_forward,
    init_gru,
    init_rest,
    init_rnn,
    rest_forward,
)
from .errors import DivergenceError, FormatError, RestError, ValidationError
from .graph import DistanceGraph, build_graph
from .preprocess import (
    ClipSet,
    EegClip,
    SynthConfig,
    make_synth_dataset,
    preprocess_stream,
)
from .tensorio import (
    Checkpoint,
    load_checkpoint,
    load_layout,
    load_tensor,
    save_checkpoint,
    save_tensor,
)
from .training import TrainConfig, TrainResult, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "ClipSet",
    "DistanceGraph",
    "DivergenceError",
    "EegClip",
    "FormatError",
    "GraphConvLayer",
    "GruWeights",
    "MaskConfig",
    "OpCounters",
    "ReadoutHead",
    "RestError",
    "RestState",
    "RestWeights",
    "RnnWeights",
    "SynthConfig",
    "TrainConfig",
    "TrainResult",
    "UpdateSchedule",
    "ValidationError",
    "build_graph",
    "count_parameters",
    "evaluate",
    "gru_forward",
    "init_gru",
    "init_rest",
    "init_rnn",
    "load_checkpoint",
    "load_layout",
    "load_tensor",
    "make_synth_dataset",
    "preprocess_stream",
    "rest_forward",
    "save_checkpoint",
    "save_tensor",
    "train",
    "__version__",
]
