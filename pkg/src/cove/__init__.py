"""Compositions of variant experts (CoVE) for session-aware recommendation."""

from .data import (
    Dataset,
    Interaction,
    Session,
    SplitDataset,
    build_dataset,
    dataset_stats,
    load_dataset,
    load_interactions,
    save_dataset,
    split,
)
from .errors import ConfigError, CoveError, DataError, DivergenceError
from .experts import ExpertKind, QueryBatch, make_batch, make_expert
from .fusion import CoVEModel
from .gating import softmax, topk_gate, uniform_gate

__version__ = "0.1.0"
