"""Continual adversarial defense: config validation, experiment runs and metrics."""

from ._core import (
    ConfigError,
    DataError,
    Error,
    __version__,
    cluster_homogeneity,
    forgetting_metrics,
    kl_div,
    parse_matrix_csv,
    resolve_config,
    run_experiment,
)

__all__ = [
    "ConfigError",
    "DataError",
    "Error",
    "__version__",
    "cluster_homogeneity",
    "forgetting_metrics",
    "kl_div",
    "parse_matrix_csv",
    "resolve_config",
    "run_experiment",
]
