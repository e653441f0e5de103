"""Sequential neural-process models with a reconstructive key-value memory.

The package is organized bottom-up:

- ``autodiff``: reverse-mode differentiation over dense float64 arrays
- ``layers``: MLP, LSTM cell, attention, gaussian heads, divergence terms
- ``rmr``: the imaginary-memory reconstruction mechanism
- ``models``: the model family (np, anp, snp, asnp_w, asnp_rmr)
- ``taskgen``: synthetic non-stationary task-sequence generators
- ``harness``: training loop, evaluation, metrics, plot-data export
- ``figures``: rendering of exported plot data to png files
- ``cli``: the ``npl`` command line entry point

The names re-exported here are the stable surface for library use; anything
else should be imported from its module directly.
"""

from npl.autodiff import Node, ParamStore, backprop, no_grad
from npl.harness import (
    EvalResult,
    TrainConfig,
    ablate,
    evaluate,
    export_plot_data,
    load_checkpoint,
    parse_train_config,
    save_checkpoint,
    train,
)
from npl.models import KINDS, ModelConfig, elbo, init_params, target_nll
from npl.taskgen import (
    RegimeSpec,
    TaskSequence,
    TaskStep,
    generate_1d_sequence,
    generate_2d_sequence,
    gp_oracle_nll,
    make_default_sprites,
    read_sequences,
    regime_for,
    regime_names,
    write_sequences,
)

__all__ = [
    "Node",
    "ParamStore",
    "backprop",
    "no_grad",
    "EvalResult",
    "TrainConfig",
    "ablate",
    "evaluate",
    "export_plot_data",
    "load_checkpoint",
    "parse_train_config",
    "save_checkpoint",
    "train",
    "KINDS",
    "ModelConfig",
    "elbo",
    "init_params",
    "target_nll",
    "RegimeSpec",
    "TaskSequence",
    "TaskStep",
    "generate_1d_sequence",
    "generate_2d_sequence",
    "gp_oracle_nll",
    "make_default_sprites",
    "read_sequences",
    "regime_for",
    "regime_names",
    "write_sequences",
]
