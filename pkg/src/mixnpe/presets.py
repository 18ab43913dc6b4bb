"""Default architectures and training settings for the benchmark simulators.

Values are plain Python types so they round-trip through JSON configs and
checkpoints unchanged.
"""

from __future__ import annotations

from .exceptions import ConfigurationError

PRESETS = {
    "gaussian_toy": {
        "hidden_features": 32,
        "made_hidden_layers": 3,
        "num_transforms": 5,
        "num_bins": 10,
        "flow_hidden_layers": 3,
        "observation_transforms": ["identity"],
    },
    "tandem_queue": {
        "hidden_features": 256,
        "made_hidden_layers": 4,
        "num_transforms": 4,
        "num_bins": 9,
        "flow_hidden_features": 256,
        "flow_hidden_layers": 4,
        "observation_transforms": ["identity", "identity", "identity", "log1p", "log1p"],
    },
    # Narrower variant of the queue network for single-core runs.
    "tandem_queue_small": {
        "hidden_features": 64,
        "made_hidden_layers": 3,
        "num_transforms": 4,
        "num_bins": 9,
        "flow_hidden_features": 64,
        "flow_hidden_layers": 3,
        "observation_transforms": ["identity", "identity", "identity", "log1p", "log1p"],
    },
    "coal_mining": {
        "hidden_features": 64,
        "made_hidden_layers": 1,
        "num_transforms": 2,
        "num_bins": 10,
        "flow_hidden_features": 64,
        "flow_hidden_layers": 1,
        "embedding_hidden": [64],
        "embedding_features": 32,
        "observation_transforms": ["sqrt"] * 111,
    },
}

TRAINING_DEFAULTS = {
    "learning_rate": 5e-4,
    "batch_size": 200,
    "validation_fraction": 0.1,
    "patience": 20,
    "max_epochs": 2000,
}


def preset(name, **overrides):
    """Estimator keyword arguments for a named preset, with overrides applied."""
    try:
        params = dict(PRESETS[name])
    except KeyError:
        raise ConfigurationError(
            f"unknown preset {name!r}; choose from {sorted(PRESETS)}"
        ) from None
    params.update(TRAINING_DEFAULTS)
    params.update(overrides)
    for key in ("observation_transforms", "embedding_hidden"):
        if params.get(key) is not None:
            params[key] = tuple(params[key])
    return params
