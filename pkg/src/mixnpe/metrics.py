"""Accuracy metrics: classifier two-sample test and posterior-predictive MSE."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.model_selection import StratifiedKFold
from sklearn.neural_network import MLPClassifier
from sklearn.preprocessing import StandardScaler

from .estimator import apply_observation_transforms
from .exceptions import ConfigurationError, InputError, StabilityError

MIN_SAMPLES = 100


@dataclass
class C2stConfig:
    hidden_layer_sizes: tuple = (64, 64)
    n_folds: int = 5
    max_iter: int = 500
    seed: int = 0
    max_attempts: int = 5


@dataclass
class C2stResult:
    score: float
    fold_accuracies: list
    n_a: int
    n_b: int
    config: C2stConfig = field(default_factory=C2stConfig)


def encode_mixed(theta_d, theta_c, class_counts):
    """Feature matrix [one-hot(theta_d) | theta_c] for mixed samples."""
    theta_d = np.asarray(theta_d, dtype=np.int64).reshape(len(theta_c), -1)
    blocks = [np.eye(c)[theta_d[:, i]] for i, c in enumerate(class_counts)]
    return np.concatenate(blocks + [np.asarray(theta_c, dtype=float)], axis=1)


def c2st(samples_a, samples_b, config=None):
    """Mean held-out accuracy of an MLP telling ``samples_a`` from ``samples_b``.

    Features are z-scored with statistics from each training fold. A score
    near 0.5 means the two sets are indistinguishable to the classifier.
    """
    config = config or C2stConfig()
    a = np.asarray(samples_a, dtype=float)
    b = np.asarray(samples_b, dtype=float)
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if a.shape[1] != b.shape[1]:
        raise InputError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if min(len(a), len(b)) < MIN_SAMPLES:
        raise InputError(f"each sample set needs at least {MIN_SAMPLES} rows")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InputError("samples must be finite")
    X = np.concatenate([a, b])
    y = np.concatenate([np.zeros(len(a), dtype=int), np.ones(len(b), dtype=int)])

    for attempt in range(config.max_attempts):
        seed = config.seed + attempt
        folds = list(StratifiedKFold(config.n_folds, shuffle=True, random_state=seed).split(X, y))
        if all(len(np.unique(y[tr])) == 2 for tr, _ in folds):
            break
    else:
        raise InputError("could not build folds containing both classes")

    accs = []
    for tr, te in folds:
        scaler = StandardScaler().fit(X[tr])
        clf = MLPClassifier(
            hidden_layer_sizes=config.hidden_layer_sizes,
            activation="relu",
            max_iter=config.max_iter,
            early_stopping=True,
            n_iter_no_change=20,
            random_state=seed,
        )
        clf.fit(scaler.transform(X[tr]), y[tr])
        accs.append(float(clf.score(scaler.transform(X[te]), y[te])))
    return C2stResult(float(np.mean(accs)), accs, len(a), len(b), config)


def c2st_mixed(draws_a, draws_b, class_counts, config=None):
    """C2ST between two sets of (theta_d, theta_c) draws."""
    return c2st(encode_mixed(*draws_a, class_counts), encode_mixed(*draws_b, class_counts), config)


@dataclass
class PredictiveMse:
    mse: float
    per_feature: np.ndarray
    n_test: int
    n_resampled: int


def predictive_mse(posterior, model, n_test=500, rng=None, max_retries=100):
    """Posterior-predictive MSE on the transformed observation scale.

    For each of ``n_test`` prior-predictive pairs (theta_o, x_o), draw one
    posterior sample, re-simulate x_post and average ||x_o - x_post||^2 per
    feature. Posterior draws the simulator rejects (unstable queues) are
    redrawn and counted.
    """
    if n_test < 1:
        raise ConfigurationError("n_test must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    theta_d, theta_c = model.sample_prior(n_test, rng)
    x_obs = np.asarray(model.simulate(theta_d, theta_c, rng), dtype=float)
    transforms = model.observation_transforms
    sq = np.empty_like(x_obs)
    resampled = 0
    for i, x in enumerate(x_obs):
        for _ in range(max_retries):
            d, c = posterior.sample(x, 1, rng)
            try:
                x_post = model.simulate(d, c, rng)
            except StabilityError:
                resampled += 1
                continue
            break
        else:
            raise StabilityError(f"no simulable posterior draw for test pair {i}")
        diff = (apply_observation_transforms(x_post.reshape(1, -1), transforms)
                - apply_observation_transforms(x.reshape(1, -1), transforms))
        sq[i] = diff[0] ** 2
    per_feature = sq.mean(axis=0)
    return PredictiveMse(float(per_feature.mean()), per_feature, n_test, resampled)
