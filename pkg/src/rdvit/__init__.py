"""Recurrent-depth vision transformer for synthetic segmentation tasks.

One weight-shared transformer block is unrolled T times between a prelude
and a coda, with a contractive state recurrence, per-token adaptive
halting, a depth-indexed low-rank adapter, and an optional
mixture-of-experts feed-forward. Everything runs on a small numpy-backed
autodiff engine; training, data synthesis and all file formats are fully
deterministic given a seed.
"""
from .clustering import ClusterParams, Instance, cluster, cluster_oracle
from .config import RunConfig, format_run_config, parse_run_config, read_run_config
from .data import Sample, SynthSpec, augment, generate, read_sample, write_sample
from .errors import (
    ConfigError,
    DomainError,
    FormatError,
    NumericError,
    RdvitError,
    ShapeError,
    TapeError,
)
from .model import (
    RDViTConfig,
    RDViTModel,
    StandardViTModel,
    build,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .rng import RngState, derive_seed
from .tensor import Tape, Tensor, gradcheck, set_default_dtype, using_dtype
from .training import AdamW, cosine_lr, evaluate, train_run

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "ClusterParams",
    "ConfigError",
    "DomainError",
    "FormatError",
    "Instance",
    "NumericError",
    "RDViTConfig",
    "RDViTModel",
    "RdvitError",
    "RngState",
    "RunConfig",
    "Sample",
    "ShapeError",
    "StandardViTModel",
    "SynthSpec",
    "Tape",
    "TapeError",
    "Tensor",
    "augment",
    "build",
    "cluster",
    "cluster_oracle",
    "cosine_lr",
    "count_parameters",
    "derive_seed",
    "evaluate",
    "format_run_config",
    "generate",
    "gradcheck",
    "load_checkpoint",
    "parse_run_config",
    "read_run_config",
    "read_sample",
    "save_checkpoint",
    "set_default_dtype",
    "train_run",
    "using_dtype",
    "write_sample",
    "__version__",
]
