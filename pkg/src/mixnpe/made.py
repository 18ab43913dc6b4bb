"""Conditional categorical MADE for the discrete posterior factor."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .exceptions import CapabilityError, ConfigurationError, InputError
from .nn import MLP, as_tensor

ENUMERATION_CAP = 10**6


@dataclass(frozen=True)
class DiscreteSchema:
    """Ordered discrete dimensions; the order is the autoregressive order.

    ``offsets`` map class indices to user-facing values (index + offset), e.g.
    server counts 2..6 or calendar years.
    """

    names: tuple
    class_counts: tuple
    offsets: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(str(n) for n in self.names))
        object.__setattr__(self, "class_counts", tuple(int(c) for c in self.class_counts))
        if len(self.names) != len(self.class_counts):
            raise ConfigurationError("names and class_counts differ in length")
        if any(c < 2 for c in self.class_counts):
            raise ConfigurationError("every discrete dimension needs >= 2 classes")
        offsets = self.offsets
        if offsets is None:
            offsets = (0,) * len(self.class_counts)
        offsets = tuple(int(o) for o in offsets)
        if len(offsets) != len(self.class_counts):
            raise ConfigurationError("offsets and class_counts differ in length")
        object.__setattr__(self, "offsets", offsets)

    def __len__(self):
        return len(self.class_counts)

    @property
    def onehot_width(self):
        return sum(self.class_counts)

    @property
    def size(self):
        """Number of joint configurations |D|."""
        return int(np.prod(self.class_counts, dtype=np.int64)) if self.class_counts else 1

    @property
    def block_starts(self):
        return tuple(np.cumsum((0,) + self.class_counts)[:-1].tolist())

    def validate(self, theta_d):
        theta_d = np.asarray(theta_d)
        if theta_d.ndim != 2 or theta_d.shape[1] != len(self):
            raise InputError(f"discrete parameters must have shape (N, {len(self)})")
        if np.issubdtype(theta_d.dtype, np.floating):
            if not np.all(theta_d == np.round(theta_d)):
                raise InputError("discrete parameters must be integers")
        theta_d = theta_d.astype(np.int64)
        counts = np.asarray(self.class_counts)
        if np.any(theta_d < 0) or np.any(theta_d >= counts):
            raise InputError("discrete class index out of range")
        return theta_d

    def one_hot(self, theta_d):
        """One-hot encode an (N, l) integer tensor/array into (N, sum |D_i|)."""
        theta_d = torch.as_tensor(np.asarray(theta_d), dtype=torch.int64)
        if len(self) == 0:
            return torch.zeros(theta_d.shape[0], 0, dtype=torch.float64)
        parts = [
            F.one_hot(theta_d[:, i], c).to(torch.float64)
            for i, c in enumerate(self.class_counts)
        ]
        return torch.cat(parts, dim=1)

    def enumerate(self):
        """All configurations in lexicographic order, shape (|D|, l)."""
        grids = itertools.product(*(range(c) for c in self.class_counts))
        return np.array(list(grids), dtype=np.int64).reshape(-1, len(self))

    def to_dict(self):
        return {
            "names": list(self.names),
            "class_counts": list(self.class_counts),
            "offsets": list(self.offsets),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["names"]), tuple(d["class_counts"]), tuple(d["offsets"]))


def build_masks(schema: DiscreteSchema, hidden_layout, context_features=0):
    """Degree-based MADE masks for ``[one-hot(theta_d) || context] -> logits``.

    Input degrees: context units 0, one-hot units of dimension i (1-based) i.
    Hidden units get degrees cycling through 1..l; a hidden unit of degree d
    sees first-layer inputs of degree < d and hidden units of degree <= d.
    Output block i sees hidden units of degree <= i, hence only dimensions
    < i and the context.

    Returns a list of (out, in) boolean masks, one per layer.
    """
    l = len(schema)
    if l == 0:
        raise ConfigurationError("MADE needs at least one discrete dimension")
    hidden_layout = [int(h) for h in hidden_layout]
    if not hidden_layout:
        raise ConfigurationError("MADE needs at least one hidden layer")
    if min(hidden_layout) < l:
        raise ConfigurationError(
            f"hidden width {min(hidden_layout)} < number of discrete dims {l}"
        )
    in_deg = np.concatenate(
        [np.repeat(np.arange(1, l + 1), schema.class_counts), np.zeros(context_features, int)]
    )
    out_deg = np.repeat(np.arange(1, l + 1), schema.class_counts)
    hidden_deg = [np.arange(h) % l + 1 for h in hidden_layout]

    masks = [hidden_deg[0][:, None] > in_deg[None, :]]
    for prev, cur in zip(hidden_deg[:-1], hidden_deg[1:]):
        masks.append(cur[:, None] >= prev[None, :])
    masks.append(out_deg[:, None] >= hidden_deg[-1][None, :])
    return masks


def path_matrix(masks):
    """Boolean reachability from every input unit to every output unit."""
    reach = masks[0].astype(np.int64)
    for m in masks[1:]:
        reach = (m.astype(np.int64) @ reach > 0).astype(np.int64)
    return reach.astype(bool)


class CategoricalMade(nn.Module):
    """Autoregressive categorical density q(theta_d | context).

    Args:
        schema: discrete dimensions and class counts.
        context_features: width of the conditioning vector.
        hidden_features: width of each hidden layer.
        num_hidden_layers: number of masked hidden layers.
        generator: torch generator for initialisation.
    """

    def __init__(self, schema, context_features, hidden_features=32, num_hidden_layers=3,
                 activation="relu", generator=None):
        super().__init__()
        self.schema = schema
        self.context_features = int(context_features)
        self.hidden_layout = [int(hidden_features)] * int(num_hidden_layers)
        masks = build_masks(schema, self.hidden_layout, self.context_features)
        self.net = MLP(
            schema.onehot_width + self.context_features,
            self.hidden_layout,
            schema.onehot_width,
            activation=activation,
            masks=masks,
            generator=generator,
        )

    @property
    def masks(self):
        return [layer.mask.numpy().astype(bool) for layer in self.net.layers]

    def logits(self, onehot, context):
        return self.net(torch.cat([onehot, context], dim=1))

    def _blocks(self, logits):
        return torch.split(logits, list(self.schema.class_counts), dim=1)

    def log_prob_per_dim(self, theta_d, context):
        """Per-dimension conditional log-probabilities, shape (N, l)."""
        theta_d = torch.as_tensor(np.asarray(theta_d), dtype=torch.int64)
        context = as_tensor(context)
        logits = self.logits(self.schema.one_hot(theta_d), context)
        cols = []
        for i, block in enumerate(self._blocks(logits)):
            lp = torch.log_softmax(block, dim=1)
            cols.append(lp.gather(1, theta_d[:, i : i + 1]))
        return torch.cat(cols, dim=1)

    def log_prob(self, theta_d, context):
        """log q(theta_d | context) for each row, as a tensor of shape (N,)."""
        if isinstance(theta_d, torch.Tensor):
            counts = torch.as_tensor(self.schema.class_counts)
            if torch.any(theta_d < 0) or torch.any(theta_d >= counts):
                raise InputError("discrete class index out of range")
        else:
            theta_d = self.schema.validate(theta_d)
        return self.log_prob_per_dim(theta_d, context).sum(dim=1)

    @torch.no_grad()
    def sample(self, context, rng, n=None):
        """Draw discrete configurations by l sequential forward passes.

        ``context`` is either one vector (then ``n`` draws are returned) or an
        (N, c) matrix (one draw per row). Each dimension consumes one uniform
        from ``rng`` and picks its class by inverse CDF over class order.
        """
        context = as_tensor(context)
        if context.ndim == 1:
            if n is None or n < 1:
                raise InputError("n >= 1 draws required for a single context")
            context = context.expand(int(n), -1)
        if context.shape[1] != self.context_features:
            raise InputError(
                f"context width {context.shape[1]} != expected {self.context_features}"
            )
        m = context.shape[0]
        theta = torch.zeros(m, len(self.schema), dtype=torch.int64)
        uniforms = torch.as_tensor(rng.random((m, len(self.schema))), dtype=torch.float64)
        for i in range(len(self.schema)):
            logits = self.logits(self.schema.one_hot(theta), context)
            probs = torch.softmax(self._blocks(logits)[i], dim=1)
            cdf = torch.cumsum(probs, dim=1)
            idx = (cdf < uniforms[:, i : i + 1]).sum(dim=1)
            theta[:, i] = idx.clamp(max=self.schema.class_counts[i] - 1)
        return theta.numpy()

    @torch.no_grad()
    def class_probabilities(self, context, cap=ENUMERATION_CAP):
        """Exact joint PMF over all configurations for one context vector.

        Returns ``(configs, pmf)`` with configs in lexicographic order.
        """
        size = self.schema.size
        if size > cap:
            raise CapabilityError(
                f"|D| = {size} exceeds the enumeration cap {cap}; "
                "estimate marginals by Monte Carlo sampling instead"
            )
        configs = self.schema.enumerate()
        ctx = as_tensor(context).reshape(1, -1).expand(len(configs), -1)
        logp = self.log_prob_per_dim(configs, ctx).sum(dim=1)
        return configs, torch.exp(logp).numpy()

    @torch.no_grad()
    def marginal_probabilities(self, context, cap=ENUMERATION_CAP):
        """Per-dimension marginal PMFs, a list of arrays of length |D_i|."""
        configs, pmf = self.class_probabilities(context, cap)
        return [
            np.bincount(configs[:, i], weights=pmf, minlength=c)
            for i, c in enumerate(self.schema.class_counts)
        ]
