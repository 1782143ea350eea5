"""Python bindings for the tta test-time adaptation library."""

import json as _json

from . import _core
from ._core import (
    INFINITE_ALPHA,
    Backbone,
    ConfigError,
    InputError,
    IoError,
    MemoryBank,
    NumericError,
    StateError,
    TtaError,
    batch_stats,
    dirichlet_stream,
    ema_update,
    iabn_correct_stats,
    iabn_forward,
    iid_stream,
    instance_stats,
    load_checkpoint,
    methods,
    soft_shrink,
    sorted_stream,
)


def _config_text(config):
    if config is None:
        return ""
    if isinstance(config, str):
        return config
    return _json.dumps(config)


def gen_synthetic_dataset(split, seed=0, config=None):
    """Return (inputs, labels) for the synthetic task; inputs has shape (N, C, L)."""
    return _core.gen_synthetic_dataset(split, seed, _config_text(config))


def train_source(norm="bn", seed=0, config=None):
    """Train a source model; returns (model, final train accuracy)."""
    return _core.train_source(norm, seed, _config_text(config))


def run_tta(model, inputs, labels, stream, method="note", seed=0):
    return _core.run_tta(model, inputs, list(labels), list(stream), method, seed)


def run_experiment(config=None):
    return _core.run_experiment(_config_text(config))
