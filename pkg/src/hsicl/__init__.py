"""Contrastive pretraining and fine-tuning for hyperspectral patch classification."""

from .autodiff import Tape, Tensor
from .baselines import AutoencoderClassifier, SchemeConfig, reconstruction_loss, train_scheme
from .classifier import ContrastiveClassifier, FineTuneMode, LossWeights, bce_logits_loss, cross_entropy_loss
from .dataset import (
    HsiCube,
    PatchSet,
    compute_band_stats,
    load_cube,
    make_splits,
    make_synthetic_cube,
    normalize,
    sample_patches,
)
from .exceptions import (
    CheckpointError,
    ConfigError,
    DatasetError,
    DegenerateInputError,
    HsiclError,
    NonFiniteError,
    ShapeError,
)
from .harness import SweepSpec, export_embeddings, report, run_sweep
from .metrics import hamming_accuracy, multilabel_accuracy, singlelabel_accuracy
from .optim import AdamState, LrSchedule, adam_step, lr_at
from .rng import Rng
from .sscl import ContrastiveEncoder, augment, nt_xent
from .training import RunConfig, RunMetrics, run_experiment

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "AutoencoderClassifier",
    "CheckpointError",
    "ConfigError",
    "ContrastiveClassifier",
    "ContrastiveEncoder",
    "DatasetError",
    "DegenerateInputError",
    "FineTuneMode",
    "HsiCube",
    "HsiclError",
    "LossWeights",
    "LrSchedule",
    "NonFiniteError",
    "PatchSet",
    "Rng",
    "RunConfig",
    "RunMetrics",
    "SchemeConfig",
    "ShapeError",
    "SweepSpec",
    "Tape",
    "Tensor",
    "adam_step",
    "augment",
    "bce_logits_loss",
    "compute_band_stats",
    "cross_entropy_loss",
    "export_embeddings",
    "hamming_accuracy",
    "load_cube",
    "lr_at",
    "make_splits",
    "make_synthetic_cube",
    "multilabel_accuracy",
    "normalize",
    "nt_xent",
    "reconstruction_loss",
    "report",
    "run_experiment",
    "run_sweep",
    "sample_patches",
    "singlelabel_accuracy",
    "train_scheme",
]
