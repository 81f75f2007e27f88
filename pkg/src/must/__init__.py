"""Multi-scale temporal transformer pipeline for surgical phase recognition.

Two stages: a frame encoder that fuses several temporal pyramid views of
each keyframe into one embedding, and a consistency module that smooths
per-frame phase distributions over sliding windows. Everything runs on a
small float64 reverse-mode autodiff core; no deep learning framework is
involved.
"""

from .backbone import Backbone, BackboneConfig, SequenceEmbedding
from .data import (
    DirectoryFrameStore,
    EmbeddingStore,
    EmbeddingStoreWriter,
    InMemoryFrameStore,
    PyramidSampleDataset,
    SyntheticSpec,
    WindowSampleDataset,
    extract_embeddings,
    generate_synthetic,
    load_annotations,
    save_annotations,
    save_frames,
    split_videos,
)
from .errors import ConfigError, DataError, NumericalError
from .estimators import (
    MultiTermFrameEncoder,
    PhaseRecognizer,
    TemporalConsistencyClassifier,
)
from .metrics import (
    MetricsReport,
    accuracy,
    average_precision,
    evaluate_timelines,
    f1_scores,
    mean_average_precision,
    phase_durations,
    transition_count,
)
from .mtam import MtamConfig, MultiTermEncoder, MultiTermEmbedding
from .ribbon import render_ribbon
from .sampler import (
    OFFLINE,
    ONLINE,
    PyramidIndices,
    PyramidSpec,
    build_pyramid,
    gather_frames,
)
from .tcm import (
    ConsistencyEncoder,
    PhaseTimeline,
    TcmConfig,
    WindowSchedule,
    aggregate_predictions,
    effective_window,
    predict_offline,
    predict_online,
    schedule_windows,
    sinusoidal_pe,
)
from .tensor import (
    Tensor,
    capture_softmax,
    grad_check,
    load_checkpoint,
    no_grad,
    parameter,
    save_checkpoint,
)
from .train import (
    AdamWState,
    TrainConfig,
    adamw_step,
    cosine_lr,
    cross_entropy,
    fit_mtfe,
    fit_tcm,
)

__version__ = "0.1.0"

__all__ = [
    "Backbone", "BackboneConfig", "SequenceEmbedding",
    "DirectoryFrameStore", "EmbeddingStore", "EmbeddingStoreWriter",
    "InMemoryFrameStore", "PyramidSampleDataset", "SyntheticSpec",
    "WindowSampleDataset", "extract_embeddings", "generate_synthetic",
    "load_annotations", "save_annotations", "save_frames", "split_videos",
    "ConfigError", "DataError", "NumericalError",
    "MultiTermFrameEncoder", "PhaseRecognizer", "TemporalConsistencyClassifier",
    "MetricsReport", "accuracy", "average_precision", "evaluate_timelines",
    "f1_scores", "mean_average_precision", "phase_durations",
    "transition_count",
    "MtamConfig", "MultiTermEncoder", "MultiTermEmbedding",
    "render_ribbon",
    "OFFLINE", "ONLINE", "PyramidIndices", "PyramidSpec", "build_pyramid",
    "gather_frames",
    "ConsistencyEncoder", "PhaseTimeline", "TcmConfig", "WindowSchedule",
    "aggregate_predictions", "effective_window", "predict_offline",
    "predict_online", "schedule_windows", "sinusoidal_pe",
    "Tensor", "capture_softmax", "grad_check", "load_checkpoint", "no_grad",
    "parameter", "save_checkpoint",
    "AdamWState", "TrainConfig", "adamw_step", "cosine_lr", "cross_entropy",
    "fit_mtfe", "fit_tcm",
    "__version__",
]
