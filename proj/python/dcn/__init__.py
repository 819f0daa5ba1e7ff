"""Decoder-choice-network meta-learning toolkit.

Thin wrapper over the C++ core: episodic task generators, GLT decoders,
fuzzy decoder choice, meta-training drivers, and snapshot ensembling.
"""

from dcn._core import (  # noqa: F401
    ArchMismatchError,
    ConfigError,
    TrainingError,
    cross_entropy_loss,
    decode,
    decoder_weights,
    dynamic_routing,
    elu,
    ensemble,
    evaluate,
    glt_forward,
    glyph_episode,
    lr_at,
    membership,
    mse_loss,
    param_counts,
    param_normalize,
    resize_params,
    sinusoid_episode,
    softshrink,
    squash,
    state_variables,
    train,
)

__all__ = [
    "ArchMismatchError",
    "ConfigError",
    "TrainingError",
    "cross_entropy_loss",
    "decode",
    "decoder_weights",
    "dynamic_routing",
    "elu",
    "ensemble",
    "evaluate",
    "glt_forward",
    "glyph_episode",
    "lr_at",
    "membership",
    "mse_loss",
    "param_counts",
    "param_normalize",
    "resize_params",
    "sinusoid_episode",
    "softshrink",
    "squash",
    "state_variables",
    "train",
]
