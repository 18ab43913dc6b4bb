"""Conditional neural spline flow for the continuous posterior factor.

The flow maps standard-normal noise to parameters through a stack of
transforms; each transform applies monotone rational-quadratic splines on
[-B, B] (identity outside) whose knots are produced by a conditioner network.
"""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

from .exceptions import ConfigurationError, InputError
from .nn import MLP, ResidualMLP, as_tensor

DEFAULT_MIN_BIN_WIDTH = 1e-3
DEFAULT_MIN_BIN_HEIGHT = 1e-3
DEFAULT_MIN_DERIVATIVE = 1e-3
DEGENERATE_BIN = 1e-6
_LOG_2PI = math.log(2.0 * math.pi)

# Incremented whenever rq_spline has to clamp a degenerate bin.
degenerate_bin_events = {"count": 0}


def _knots(sizes, low, high):
    cum = torch.cumsum(sizes, dim=-1)
    cum = F.pad(cum, (1, 0), value=0.0)
    cum = low + (high - low) * cum
    cum[..., 0] = low
    cum[..., -1] = high
    return cum


def _bin_index(knots, values):
    shifted = knots.clone()
    shifted[..., -1] += 1e-6
    idx = torch.sum(values[..., None] >= shifted, dim=-1) - 1
    return idx.clamp(0, knots.shape[-1] - 2)


def rq_spline(inputs, widths, heights, derivatives, inverse=False, tail_bound=5.0):
    """Monotone rational-quadratic spline on [-B, B], identity outside.

    Args:
        inputs: tensor of shape (...,).
        widths: normalised bin widths, shape (..., K), positive, summing to 1.
        heights: normalised bin heights, shape (..., K), positive, summing to 1.
        derivatives: knot derivatives, shape (..., K + 1), positive. Boundary
            values of 1 make the map C1 at the tails.
        inverse: evaluate the inverse map.
        tail_bound: B.

    Returns:
        ``(outputs, logabsdet)`` where logabsdet is log|d out / d in|.
    """
    if widths.shape != heights.shape or derivatives.shape[-1] != widths.shape[-1] + 1:
        raise ConfigurationError("inconsistent spline parameter shapes")
    if torch.any(widths < DEGENERATE_BIN) or torch.any(heights < DEGENERATE_BIN):
        degenerate_bin_events["count"] += 1
        widths = widths.clamp(min=DEGENERATE_BIN)
        widths = widths / widths.sum(dim=-1, keepdim=True)
        heights = heights.clamp(min=DEGENERATE_BIN)
        heights = heights / heights.sum(dim=-1, keepdim=True)

    low, high = -float(tail_bound), float(tail_bound)
    inside = (inputs >= low) & (inputs <= high)
    x = inputs.clamp(low, high)

    cumwidths = _knots(widths, low, high)
    cumheights = _knots(heights, low, high)
    bin_w = cumwidths[..., 1:] - cumwidths[..., :-1]
    bin_h = cumheights[..., 1:] - cumheights[..., :-1]

    idx = _bin_index(cumheights if inverse else cumwidths, x)[..., None]
    xk = cumwidths.gather(-1, idx)[..., 0]
    wk = bin_w.gather(-1, idx)[..., 0]
    yk = cumheights.gather(-1, idx)[..., 0]
    hk = bin_h.gather(-1, idx)[..., 0]
    dk = derivatives.gather(-1, idx)[..., 0]
    dk1 = derivatives[..., 1:].gather(-1, idx)[..., 0]
    sk = hk / wk
    curv = dk1 + dk - 2.0 * sk

    if inverse:
        dy = x - yk
        a = hk * (sk - dk) + dy * curv
        b = hk * dk - dy * curv
        c = -sk * dy
        disc = (b.pow(2) - 4.0 * a * c).clamp(min=0.0)
        t = (2.0 * c) / (-b - torch.sqrt(disc))
        out = t * wk + xk
    else:
        t = (x - xk) / wk
        tt = t * (1.0 - t)
        out = yk + hk * (sk * t.pow(2) + dk * tt) / (sk + curv * tt)

    tt = t * (1.0 - t)
    denom = sk + curv * tt
    deriv = sk.pow(2) * (dk1 * t.pow(2) + 2.0 * sk * tt + dk * (1.0 - t).pow(2))
    lad = torch.log(deriv) - 2.0 * torch.log(denom)
    if inverse:
        lad = -lad

    outputs = torch.where(inside, out, inputs)
    logabsdet = torch.where(inside, lad, torch.zeros_like(lad))
    return outputs, logabsdet


_DERIVATIVE_SHIFT = math.log(math.expm1(1.0 - DEFAULT_MIN_DERIVATIVE))


def constrain_spline_params(raw, num_bins):
    """Map unconstrained (..., 3K - 1) parameters to (widths, heights, derivatives).

    Widths and heights use a softmax with a floor; interior derivatives use a
    shifted softplus with a floor so that all-zero raw parameters give the
    identity map. Boundary derivatives are fixed to 1.
    """
    K = num_bins
    uw, uh, ud = raw[..., :K], raw[..., K : 2 * K], raw[..., 2 * K :]
    widths = DEFAULT_MIN_BIN_WIDTH + (1 - DEFAULT_MIN_BIN_WIDTH * K) * torch.softmax(uw, -1)
    heights = DEFAULT_MIN_BIN_HEIGHT + (1 - DEFAULT_MIN_BIN_HEIGHT * K) * torch.softmax(uh, -1)
    interior = DEFAULT_MIN_DERIVATIVE + F.softplus(ud + _DERIVATIVE_SHIFT)
    derivatives = F.pad(interior, (1, 1), value=1.0)
    return widths, heights, derivatives


def standard_normal_log_prob(z):
    return -0.5 * (z.pow(2) + _LOG_2PI).sum(dim=-1)


class SplineCouplingFlow(nn.Module):
    """Conditional flow q(theta | condition) with rational-quadratic splines.

    For ``features >= 2`` every transform is a coupling layer: the first
    ``features // 2`` coordinates pass through and condition the splines of the
    remaining ones; the coordinate order is reversed between transforms. For
    ``features == 1`` each transform is a 1-D spline whose knots depend on the
    condition vector alone.

    Conditioners are plain MLPs with ``num_hidden_layers`` hidden layers, or
    residual nets with ``num_blocks`` blocks when ``num_blocks`` is given.
    Their output layers start at zero, so a fresh flow is the identity map.
    """

    def __init__(
        self,
        features,
        condition_features,
        num_transforms=5,
        num_bins=10,
        tail_bound=5.0,
        hidden_features=32,
        num_hidden_layers=3,
        num_blocks=None,
        activation="relu",
        generator=None,
    ):
        super().__init__()
        if features < 1:
            raise ConfigurationError("flow needs at least one continuous dimension")
        if num_transforms < 1 or num_bins < 1:
            raise ConfigurationError("num_transforms and num_bins must be >= 1")
        self.features = int(features)
        self.condition_features = int(condition_features)
        self.num_transforms = int(num_transforms)
        self.num_bins = int(num_bins)
        self.tail_bound = float(tail_bound)
        self.n_identity = self.features // 2
        self.n_transformed = self.features - self.n_identity
        n_params = self.n_transformed * (3 * self.num_bins - 1)
        n_in = self.n_identity + self.condition_features
        if n_in == 0:
            raise ConfigurationError("a 1-D flow needs a non-empty condition vector")
        conditioners = []
        for _ in range(self.num_transforms):
            if num_blocks:
                net = ResidualMLP(n_in, hidden_features, n_params, int(num_blocks),
                                  activation=activation, zero_output=True, generator=generator)
            else:
                net = MLP(n_in, [hidden_features] * int(num_hidden_layers), n_params,
                          activation=activation, zero_output=True, generator=generator)
            conditioners.append(net)
        self.conditioners = nn.ModuleList(conditioners)

    def _spline_params(self, t, identity_part, condition):
        raw = self.conditioners[t](torch.cat([identity_part, condition], dim=1))
        raw = raw.reshape(raw.shape[0], self.n_transformed, 3 * self.num_bins - 1)
        return constrain_spline_params(raw, self.num_bins)

    def _apply(self, t, values, condition, inverse):
        a, b = values[:, : self.n_identity], values[:, self.n_identity :]
        w, h, d = self._spline_params(t, a, condition)
        b, lad = rq_spline(b, w, h, d, inverse=inverse, tail_bound=self.tail_bound)
        return torch.cat([a, b], dim=1), lad.sum(dim=1)

    def _check(self, values, condition):
        values, condition = as_tensor(values), as_tensor(condition)
        if values.ndim != 2 or values.shape[1] != self.features:
            raise InputError(f"expected continuous parameters of shape (N, {self.features})")
        if condition.ndim != 2 or condition.shape[1] != self.condition_features:
            raise InputError(f"expected condition of shape (N, {self.condition_features})")
        if condition.shape[0] != values.shape[0]:
            raise InputError("parameter and condition row counts differ")
        if not torch.all(torch.isfinite(values)):
            raise InputError("non-finite continuous parameters")
        return values, condition

    def forward(self, z, condition):
        """Noise -> parameters. Returns ``(theta, log|det d theta / d z|)``."""
        z, condition = self._check(z, condition)
        total = torch.zeros(z.shape[0], dtype=z.dtype)
        x = z
        for t in range(self.num_transforms):
            if t > 0:
                x = x.flip(1)
            x, lad = self._apply(t, x, condition, inverse=False)
            total = total + lad
        return x, total

    def inverse(self, theta, condition):
        """Parameters -> noise. Returns ``(z, log|det d z / d theta|)``."""
        theta, condition = self._check(theta, condition)
        total = torch.zeros(theta.shape[0], dtype=theta.dtype)
        x = theta
        for t in reversed(range(self.num_transforms)):
            x, lad = self._apply(t, x, condition, inverse=True)
            total = total + lad
            if t > 0:
                x = x.flip(1)
        return x, total

    def log_prob(self, theta, condition):
        z, lad = self.inverse(theta, condition)
        return standard_normal_log_prob(z) + lad

    @torch.no_grad()
    def sample(self, condition, rng, n=None):
        """Push standard-normal draws from ``rng`` through the flow.

        ``condition`` is one vector (``n`` draws) or an (N, c) matrix (one
        draw per row).
        """
        condition = as_tensor(condition)
        if condition.ndim == 1:
            if n is None or n < 1:
                raise InputError("n >= 1 draws required for a single condition")
            condition = condition.expand(int(n), -1)
        z = torch.as_tensor(rng.standard_normal((condition.shape[0], self.features)))
        theta, _ = self.forward(z, condition)
        return theta.numpy()


class EmbeddingNet(MLP):
    """Fully connected observation encoder trained jointly with the heads."""

    def __init__(self, in_features, hidden=(64,), out_features=32, generator=None):
        super().__init__(in_features, list(hidden), out_features, generator=generator)
        self.hidden = list(hidden)
        self.out_features = int(out_features)


def identity_spline_params(shape, num_bins):
    """Constrained parameters for which :func:`rq_spline` is the identity."""
    raw = torch.zeros(*shape, 3 * num_bins - 1, dtype=torch.float64)
    return constrain_spline_params(raw, num_bins)


def random_spline_params(shape, num_bins, rng, scale=1.0):
    raw = torch.as_tensor(scale * rng.standard_normal((*shape, 3 * num_bins - 1)))
    return constrain_spline_params(raw, num_bins)


__all__ = [
    "rq_spline",
    "constrain_spline_params",
    "SplineCouplingFlow",
    "EmbeddingNet",
    "standard_normal_log_prob",
    "identity_spline_params",
    "random_spline_params",
    "degenerate_bin_events",
]
