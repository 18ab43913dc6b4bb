"""Mixed neural posterior estimator.

The posterior over theta = (theta_d, theta_c) is factorised as
q(theta_d | x) q(theta_c | theta_d, x): a categorical MADE models the discrete
factor and a conditional spline flow the continuous one. Both heads read the
same transformed, z-scored (and optionally embedded) observation and are
trained jointly by minimising the summed negative log-likelihood.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted
from torch import nn

from .exceptions import CapabilityError, ConfigurationError, InputError, TrainingError
from .flow import EmbeddingNet, SplineCouplingFlow
from .made import ENUMERATION_CAP, CategoricalMade
from .nn import Normalizer, TrainConfig, as_tensor, split_indices, train
from .simulators import Dataset, MixedParamSpace

OBSERVATION_TRANSFORMS = {
    "identity": lambda v: v,
    "sqrt": np.sqrt,
    "log1p": np.log1p,
}

_SAMPLE_CHUNK = 50_000


def apply_observation_transforms(x, transforms):
    x = np.asarray(x, dtype=np.float64)
    if transforms is None:
        return x
    if len(transforms) != x.shape[-1]:
        raise InputError(f"{len(transforms)} observation transforms for {x.shape[-1]} features")
    out = np.empty_like(x)
    for j, name in enumerate(transforms):
        try:
            fn = OBSERVATION_TRANSFORMS[name]
        except KeyError:
            raise ConfigurationError(f"unknown observation transform {name!r}") from None
        with np.errstate(invalid="ignore"):
            out[..., j] = fn(x[..., j])
    return out


def _as_rows(arr, n, width, name):
    if arr is None:
        arr = np.zeros((n, 0))
    arr = np.asarray(arr)
    if arr.size != n * width:
        raise InputError(f"{name} must have shape ({n}, {width})")
    return arr.reshape(n, width)


class MNPE(BaseEstimator):
    """Amortised posterior estimator for mixed discrete/continuous parameters.

    Args:
        space: the :class:`MixedParamSpace` of the simulator.
        hidden_features: width of the MADE hidden layers.
        made_hidden_layers: number of MADE hidden layers.
        num_transforms: number of flow transforms.
        num_bins: spline bins per transform.
        flow_hidden_features: width of the flow conditioners (defaults to
            ``hidden_features``).
        flow_hidden_layers: hidden layers per flow conditioner.
        num_blocks: if set, flow conditioners are residual nets with this many
            blocks instead of plain MLPs.
        tail_bound: spline interval [-B, B] in z-scored units.
        embedding_hidden, embedding_features: optional observation encoder
            shared by both heads.
        observation_transforms: per-feature "identity" | "sqrt" | "log1p",
            applied before z-scoring.
        learning_rate, batch_size, validation_fraction, patience, max_epochs,
        seed: training settings, see :class:`~mixnpe.nn.TrainConfig`.
    """

    def __init__(
        self,
        space=None,
        hidden_features=32,
        made_hidden_layers=3,
        num_transforms=5,
        num_bins=10,
        flow_hidden_features=None,
        flow_hidden_layers=3,
        num_blocks=None,
        tail_bound=5.0,
        embedding_hidden=None,
        embedding_features=None,
        observation_transforms=None,
        learning_rate=5e-4,
        batch_size=200,
        validation_fraction=0.1,
        patience=20,
        max_epochs=2000,
        seed=0,
    ):
        self.space = space
        self.hidden_features = hidden_features
        self.made_hidden_layers = made_hidden_layers
        self.num_transforms = num_transforms
        self.num_bins = num_bins
        self.flow_hidden_features = flow_hidden_features
        self.flow_hidden_layers = flow_hidden_layers
        self.num_blocks = num_blocks
        self.tail_bound = tail_bound
        self.embedding_hidden = embedding_hidden
        self.embedding_features = embedding_features
        self.observation_transforms = observation_transforms
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.validation_fraction = validation_fraction
        self.patience = patience
        self.max_epochs = max_epochs
        self.seed = seed

    # -- construction -------------------------------------------------------

    def _train_config(self):
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            validation_fraction=self.validation_fraction,
            patience_epochs=self.patience,
            max_epochs=self.max_epochs,
            seed=self.seed,
        )

    def _build(self, x_dim):
        if not isinstance(self.space, MixedParamSpace):
            raise ConfigurationError("MNPE needs a MixedParamSpace as `space`")
        gen = torch.Generator().manual_seed(int(self.seed))
        self.n_features_in_ = int(x_dim)
        modules = {}
        ctx_dim = x_dim
        if self.embedding_features:
            hidden = list(self.embedding_hidden or [])
            modules["embedding"] = EmbeddingNet(x_dim, hidden, self.embedding_features, gen)
            ctx_dim = int(self.embedding_features)
        schema = self.space.discrete
        if len(schema):
            modules["made"] = CategoricalMade(
                schema, ctx_dim, self.hidden_features, self.made_hidden_layers, generator=gen
            )
        if self.space.n_continuous:
            modules["flow"] = SplineCouplingFlow(
                self.space.n_continuous,
                schema.onehot_width + ctx_dim,
                num_transforms=self.num_transforms,
                num_bins=self.num_bins,
                tail_bound=self.tail_bound,
                hidden_features=self.flow_hidden_features or self.hidden_features,
                num_hidden_layers=self.flow_hidden_layers,
                num_blocks=self.num_blocks,
                generator=gen,
            )
        self.net_ = nn.ModuleDict(modules)
        self.context_features_ = ctx_dim
        return self

    @property
    def made_(self):
        return self.net_["made"] if "made" in self.net_ else None

    @property
    def flow_(self):
        return self.net_["flow"] if "flow" in self.net_ else None

    @property
    def embedding_(self):
        return self.net_["embedding"] if "embedding" in self.net_ else None

    # -- validation ---------------------------------------------------------

    def _n_rows(self, theta_d, theta_c):
        l, k = self.space.n_discrete, self.space.n_continuous
        if l:
            return np.asarray(theta_d).reshape(-1, l).shape[0]
        return np.asarray(theta_c).reshape(-1, k).shape[0]

    def _check_theta(self, theta_d, theta_c, n):
        l, k = self.space.n_discrete, self.space.n_continuous
        theta_d = _as_rows(theta_d, n, l, "theta_d")
        theta_d = self.space.discrete.validate(theta_d) if l else theta_d.astype(np.int64)
        theta_c = _as_rows(theta_c, n, k, "theta_c").astype(np.float64)
        if not np.all(np.isfinite(theta_c)):
            raise InputError("non-finite continuous parameters")
        return theta_d, theta_c

    def _check_x(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        if X.shape[1] != self.n_features_in_:
            raise InputError(
                f"observation has {X.shape[1]} features, estimator expects {self.n_features_in_}"
            )
        return X

    def _prepare_x(self, X):
        """Observation transforms + z-scoring, as a tensor."""
        xt = apply_observation_transforms(X, self.observation_transforms)
        if not np.all(np.isfinite(xt)):
            raise InputError("observations are non-finite after the observation transforms")
        return as_tensor(self.x_normalizer_.transform(xt))

    # -- fitting ------------------------------------------------------------

    def fit(self, X, theta_d=None, theta_c=None):
        """Train both heads on simulated pairs.

        Args:
            X: observations, shape (N, d).
            theta_d: discrete class indices, shape (N, l).
            theta_c: continuous parameters, shape (N, k).
        """
        try:
            X = check_array(X, dtype=np.float64, ensure_2d=True)
        except ValueError as exc:
            raise InputError(f"invalid observations: {exc}") from exc
        n = len(X)
        theta_d, theta_c = self._check_theta(theta_d, theta_c, n)
        self._build(X.shape[1])
        config = self._train_config()
        rng = np.random.default_rng(config.seed)
        split = split_indices(n, config.validation_fraction, rng)
        tr = split[0]

        xt = apply_observation_transforms(X, self.observation_transforms)
        if not np.all(np.isfinite(xt)):
            raise InputError("observations are non-finite after the observation transforms")
        self.x_normalizer_ = Normalizer.fit(xt[tr])
        if self.space.n_continuous:
            self.theta_normalizer_ = Normalizer.fit(theta_c[tr])
        else:
            self.theta_normalizer_ = Normalizer.identity(0)
        tensors = (
            torch.as_tensor(theta_d, dtype=torch.int64),
            as_tensor(self.theta_normalizer_.transform(theta_c)),
            as_tensor(self.x_normalizer_.transform(xt)),
        )
        self.training_log_ = train(self.net_, tensors, self._batch_loss, config, split=split)
        return self

    def fit_dataset(self, dataset: Dataset):
        return self.fit(dataset.x, dataset.theta_d, dataset.theta_c)

    # -- densities ----------------------------------------------------------

    def _context(self, x_norm):
        emb = self.embedding_
        return emb(x_norm) if emb is not None else x_norm

    def _head_log_probs(self, theta_d, z_c, x_norm):
        """Per-row (discrete, continuous) log-probs in normalised theta_c units."""
        ctx = self._context(x_norm)
        n = ctx.shape[0]
        zero = torch.zeros(n, dtype=torch.float64)
        lp_d = self.made_.log_prob(theta_d, ctx) if self.made_ is not None else zero
        if self.flow_ is not None:
            cond = torch.cat([self.space.discrete.one_hot(theta_d), ctx], dim=1)
            lp_c = self.flow_.log_prob(z_c, cond)
        else:
            lp_c = zero
        return lp_d, lp_c

    def _batch_loss(self, net, batch):
        theta_d, z_c, x_norm = batch
        lp_d, lp_c = self._head_log_probs(theta_d, z_c, x_norm)
        total = lp_d + lp_c
        finite = torch.isfinite(total)
        if not torch.all(finite):
            bad = int(torch.nonzero(~finite)[0, 0])
            raise TrainingError(f"non-finite log-probability for batch sample {bad}")
        return -total.mean()

    def _broadcast_x(self, X, n):
        X = self._check_x(X)
        if len(X) == 1 and n > 1:
            X = np.repeat(X, n, axis=0)
        if len(X) != n:
            raise InputError("observation and parameter row counts differ")
        return X

    def loss_terms(self, theta_d, theta_c, X):
        """Mean discrete NLL and mean continuous NLL (normalised theta_c units)."""
        check_is_fitted(self, "net_")
        n = self._n_rows(theta_d, theta_c)
        theta_d, theta_c = self._check_theta(theta_d, theta_c, n)
        X = self._broadcast_x(X, n)
        with torch.no_grad():
            lp_d, lp_c = self._head_log_probs(
                torch.as_tensor(theta_d),
                as_tensor(self.theta_normalizer_.transform(theta_c)),
                self._prepare_x(X),
            )
        return -float(lp_d.mean()), -float(lp_c.mean())

    def joint_loss(self, theta_d, theta_c, X):
        """The training objective on a batch: mean of -log q(theta_d, z_c | x)."""
        check_is_fitted(self, "net_")
        n = self._n_rows(theta_d, theta_c)
        theta_d, theta_c = self._check_theta(theta_d, theta_c, n)
        X = self._broadcast_x(X, n)
        with torch.no_grad():
            batch = (
                torch.as_tensor(theta_d),
                as_tensor(self.theta_normalizer_.transform(theta_c)),
                self._prepare_x(X),
            )
            return float(self._batch_loss(self.net_, batch))

    def log_prob(self, theta_d, theta_c, X):
        """log q(theta_d, theta_c | x) on the original parameter scale.

        ``X`` is a single observation (broadcast) or one row per parameter row.
        """
        lp_d, lp_c = self._log_prob_parts(theta_d, theta_c, X)
        return lp_d + lp_c

    def _log_prob_parts(self, theta_d, theta_c, X):
        check_is_fitted(self, "net_")
        k = self.space.n_continuous
        n = self._n_rows(theta_d, theta_c)
        theta_d, theta_c = self._check_theta(theta_d, theta_c, n)
        X = self._broadcast_x(X, n)
        with torch.no_grad():
            lp_d, lp_c = self._head_log_probs(
                torch.as_tensor(theta_d),
                as_tensor(self.theta_normalizer_.transform(theta_c)),
                self._prepare_x(X),
            )
        lp_c = lp_c.numpy() + (self.theta_normalizer_.log_abs_det if k else 0.0)
        return lp_d.numpy(), lp_c

    def discrete_log_prob(self, theta_d, X):
        """log q(theta_d | x)."""
        check_is_fitted(self, "net_")
        theta_d = np.asarray(theta_d).reshape(-1, self.space.n_discrete)
        theta_d = self.space.discrete.validate(theta_d)
        X = self._broadcast_x(X, len(theta_d))
        with torch.no_grad():
            ctx = self._context(self._prepare_x(X))
            return self.made_.log_prob(torch.as_tensor(theta_d), ctx).numpy()

    def continuous_log_prob(self, theta_c, theta_d, X):
        """log q(theta_c | theta_d, x) on the original parameter scale."""
        return self._log_prob_parts(theta_d, theta_c, X)[1]

    # -- sampling -----------------------------------------------------------

    def sample(self, X, n, rng):
        """Draw ``n`` posterior samples per observation.

        Returns ``(theta_d, theta_c)``. For a single observation the shapes are
        (n, l) and (n, k); for M observations they are (M, n, l) and (M, n, k).
        """
        check_is_fitted(self, "net_")
        if n < 1:
            raise InputError("n must be >= 1")
        single = np.ndim(X) == 1
        X_arr = self._check_x(X)
        m = len(X_arr)
        l, k = self.space.n_discrete, self.space.n_continuous
        rows = np.repeat(np.arange(m), n)
        out_d = np.zeros((m * n, l), dtype=np.int64)
        out_c = np.zeros((m * n, k))
        with torch.no_grad():
            ctx_all = self._context(self._prepare_x(X_arr))
            for start in range(0, m * n, _SAMPLE_CHUNK):
                sel = rows[start : start + _SAMPLE_CHUNK]
                ctx = ctx_all[torch.as_tensor(sel)]
                if l:
                    td = self.made_.sample(ctx, rng)
                    out_d[start : start + len(sel)] = td
                if k:
                    onehot = self.space.discrete.one_hot(out_d[start : start + len(sel)])
                    z = self.flow_.sample(torch.cat([onehot, ctx], dim=1), rng)
                    out_c[start : start + len(sel)] = self.theta_normalizer_.inverse_transform(z)
        if single:
            return out_d, out_c
        return out_d.reshape(m, n, l), out_c.reshape(m, n, k)

    # -- discrete probabilities ---------------------------------------------

    def class_probabilities(self, x_obs, cap=ENUMERATION_CAP):
        """Exact joint PMF of the discrete factor: ``(configs, pmf)``."""
        check_is_fitted(self, "net_")
        if self.made_ is None:
            raise InputError("the parameter space has no discrete dimensions")
        with torch.no_grad():
            ctx = self._context(self._prepare_x(self._check_x(x_obs)))[0]
        return self.made_.class_probabilities(ctx, cap)

    def marginal_probabilities(self, x_obs, rng=None, n_mc=10_000, cap=ENUMERATION_CAP):
        """Per-dimension marginal PMFs of the discrete factor.

        Falls back to Monte Carlo frequencies over ``n_mc`` draws when |D|
        exceeds the enumeration cap.
        """
        try:
            configs, pmf = self.class_probabilities(x_obs, cap)
        except CapabilityError:
            if rng is None:
                rng = np.random.default_rng(0)
            theta_d, _ = self.sample(np.asarray(x_obs).reshape(-1), n_mc, rng)
            return [
                np.bincount(theta_d[:, i], minlength=c) / n_mc
                for i, c in enumerate(self.space.discrete.class_counts)
            ]
        return [
            np.bincount(configs[:, i], weights=pmf, minlength=c)
            for i, c in enumerate(self.space.discrete.class_counts)
        ]

    def predict(self, X):
        """Most probable discrete configuration (class indices) per observation."""
        X = self._check_x(X)
        out = []
        for row in X:
            configs, pmf = self.class_probabilities(row)
            out.append(configs[int(np.argmax(pmf))])
        return np.array(out).reshape(len(X), self.space.n_discrete)

    # -- persistence --------------------------------------------------------

    def save(self, path):
        from .checkpoint import save_estimator

        save_estimator(self, path)

    @classmethod
    def load(cls, path):
        from .checkpoint import load_estimator

        return load_estimator(path)


def fit_mnpe(space, dataset, **params):
    """Convenience wrapper: build an :class:`MNPE` and fit it on ``dataset``."""
    return MNPE(space=space, **params).fit_dataset(dataset)


__all__ = ["MNPE", "fit_mnpe", "apply_observation_transforms", "OBSERVATION_TRANSFORMS"]
