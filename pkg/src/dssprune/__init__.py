"""Structural channel pruning driven by domain similarity of activation maps."""

from .errors import (
    ConfigError,
    DSSPruneError,
    FormatError,
    InputError,
    RunError,
    ShapeError,
    StateError,
)
from .config import DataConfig, ExperimentConfig, TrainConfig, load_config
from .data import Dataset, load_mnist, synth_mnistm
from .experiment import evaluate, finetune, load_domains, run_pipeline, run_sweep, train
from .metrics import MetricsRecord
from .model import ModelSpec, build_convnet, channel_count, forward
from .pruning import PrunePlan, apply_prune, masked_forward, select_bottom_k, sparsity_report
from .saliency import (
    ActivationStats,
    Method,
    SaliencyScore,
    collect_stats,
    dss_scores,
    gamma,
    l2_scores,
    multi_domain_dss,
    random_scores,
    reverse_scores,
)
from .tensor import SGD, Tape, Tensor, backward

__version__ = "0.1.0"
