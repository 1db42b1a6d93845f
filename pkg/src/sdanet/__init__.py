"""EEG/speech match-mismatch classification, desk scale and fully deterministic.

The public surface re-exports the pieces most callers need; submodules hold
the rest (``autodiff`` for the op layer, ``datapipe`` for signal prep and
samplers, ``trainer``/``synth`` for the recipe and the synthetic oracle,
``cli`` for the command-line pipeline).
"""

from .autodiff import Node, backward, grad_check
from .datapipe import (
    AugmentConfig,
    PairDataset,
    Recording,
    Window,
    WindowPair,
    build_pair_dataset,
    extract_envelope,
    load_recording,
    overlap_fraction,
    resample_to_64hz,
    save_recording,
    specaug,
)
from .estimator import SdanetClassifier, check_window_arrays
from .model import (
    ForwardTrace,
    ParamStore,
    SdanetConfig,
    average_params,
    forward,
    init_params,
    load_model_checkpoint,
    predict,
    save_model_checkpoint,
)
from .rng import RngState
from .synth import EvalReport, SynthConfig, evaluate, generate_synthetic
from .trainer import TrainConfig, fit, validate

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "EvalReport",
    "ForwardTrace",
    "Node",
    "PairDataset",
    "ParamStore",
    "Recording",
    "RngState",
    "SdanetClassifier",
    "SdanetConfig",
    "SynthConfig",
    "TrainConfig",
    "Window",
    "WindowPair",
    "average_params",
    "backward",
    "build_pair_dataset",
    "check_window_arrays",
    "evaluate",
    "extract_envelope",
    "fit",
    "forward",
    "generate_synthetic",
    "grad_check",
    "init_params",
    "load_model_checkpoint",
    "load_recording",
    "overlap_fraction",
    "predict",
    "resample_to_64hz",
    "save_model_checkpoint",
    "save_recording",
    "specaug",
    "validate",
    "__version__",
]
