import logging
import os
from pathlib import Path

from scripts.exceptions import ConfigurationError

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"

DATA_DIR_ENV = "PURIFYLAB_DATA_DIR"

# Hyperparameters the method leaves open. Values follow common practice for
# each dataset and are overridable from the CLI and experiment configs.
DATASET_DEFAULTS = {
    "mnist": {
        "channels": 1,
        "dae_depth": 5,
        "sigma_max": 0.3,
        "epsilon": 0.1,
        "attack_alpha": 0.01,
        "purify_iters": 15,
        "purify_alpha": 0.01,
        "purify_beta": 0.9,
        "purify_gamma": 0.02,
        "dae_epochs": 20,
        "classifier_epochs": 5,
        "batch_size": 128,
        "learning_rate": 1e-3,
    },
    "cifar10": {
        "channels": 3,
        "dae_depth": 15,
        "sigma_max": 0.1,
        "epsilon": 8 / 255,
        "attack_alpha": 1 / 255,
        "purify_iters": 15,
        "purify_alpha": 0.01,
        "purify_beta": 0.9,
        "purify_gamma": 0.02,
        "dae_epochs": 30,
        "classifier_epochs": 40,
        "batch_size": 128,
        "learning_rate": 1e-3,
    },
}


def dataset_defaults(dataset):
    """
    Returns the default hyperparameters for a dataset.

    Args:
        dataset (str): "mnist" or "cifar10".

    Returns:
        dict: A copy of the defaults, safe to mutate.
    """
    try:
        return dict(DATASET_DEFAULTS[dataset])
    except KeyError:
        raise ConfigurationError(
            f"Unknown dataset '{dataset}'; expected one of {sorted(DATASET_DEFAULTS)}"
        ) from None


def resolve_data_dir(cli_value=None):
    """
    Resolves the dataset root: the CLI flag wins, then the environment variable.

    Args:
        cli_value (str | None): Value of ``--data-dir``.

    Returns:
        Path: Existing directory.
    """
    value = cli_value or os.environ.get(DATA_DIR_ENV)
    if not value:
        raise ConfigurationError(f"No data directory given; pass --data-dir or set {DATA_DIR_ENV}")
    path = Path(value)
    if not path.is_dir():
        raise ConfigurationError(f"Data directory {path} does not exist")
    return path


def configure_logging(verbose=False, quiet=False):
    """Sets the root logging level for a CLI run."""
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT)
    logging.getLogger().setLevel(level)
