"""Small differentiable core: (masked) dense layers, z-scoring, Adam and a
training loop with a validation split and early stopping.

Everything runs in float64. Reverse-mode gradients come from torch autograd;
the layers, initialisation, optimizer and loop are implemented here so that
their behaviour is pinned down independently of torch defaults.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .exceptions import ConfigurationError, InputError, TrainingError

DTYPE = torch.float64

_ACTIVATIONS = {
    "relu": torch.relu,
    "tanh": torch.tanh,
    "elu": F.elu,
}


def as_tensor(array) -> torch.Tensor:
    """Convert array-likes to a float64 tensor without copying tensors."""
    if isinstance(array, torch.Tensor):
        return array.to(DTYPE)
    return torch.as_tensor(np.asarray(array, dtype=np.float64), dtype=DTYPE)


def glorot_uniform_(tensor: torch.Tensor, generator: torch.Generator | None = None):
    fan_out, fan_in = tensor.shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=generator)
    return tensor


class MaskedLinear(nn.Module):
    """Affine layer whose effective weight is ``weight * mask``.

    With ``mask=None`` the layer is an ordinary dense layer. The mask is stored
    as a non-trainable buffer and never changes after construction, so masked
    positions receive an exactly-zero gradient.
    """

    def __init__(self, in_features, out_features, mask=None, generator=None):
        super().__init__()
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.weight = nn.Parameter(torch.empty(out_features, in_features, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(out_features, dtype=DTYPE))
        glorot_uniform_(self.weight, generator)
        if mask is None:
            self.register_buffer("_mask", None)
        else:
            mask = torch.as_tensor(np.asarray(mask, dtype=np.float64), dtype=DTYPE)
            if mask.shape != self.weight.shape:
                raise ConfigurationError(
                    f"mask shape {tuple(mask.shape)} != weight shape {tuple(self.weight.shape)}"
                )
            self.register_buffer("_mask", mask)

    @property
    def mask(self):
        return None if self._mask is None else self._mask.clone()

    def effective_weight(self):
        if self._mask is None:
            return self.weight
        return self.weight * self._mask

    def forward(self, inputs):
        if inputs.shape[-1] != self.in_features:
            raise ConfigurationError(
                f"expected input width {self.in_features}, got {inputs.shape[-1]}"
            )
        return F.linear(inputs, self.effective_weight(), self.bias)


class MLP(nn.Module):
    """Feedforward net: ``len(hidden)`` hidden layers plus a linear output layer.

    Args:
        in_features: input width.
        hidden: widths of the hidden layers.
        out_features: output width.
        activation: name of the hidden activation ("relu", "tanh", "elu").
        masks: optional list of binary masks, one per layer (out x in).
        zero_output: start with zero output weights and bias.
        generator: torch generator used for initialisation.
    """

    def __init__(
        self,
        in_features,
        hidden,
        out_features,
        activation="relu",
        masks=None,
        zero_output=False,
        generator=None,
    ):
        super().__init__()
        if activation not in _ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {activation!r}")
        sizes = [int(in_features), *[int(h) for h in hidden], int(out_features)]
        if masks is not None and len(masks) != len(sizes) - 1:
            raise ConfigurationError("need exactly one mask per layer")
        self.activation = activation
        self.sizes = sizes
        self.layers = nn.ModuleList(
            MaskedLinear(a, b, None if masks is None else masks[i], generator)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        )
        if zero_output:
            with torch.no_grad():
                self.layers[-1].weight.zero_()
                self.layers[-1].bias.zero_()

    def forward(self, inputs):
        act = _ACTIVATIONS[self.activation]
        h = inputs
        for layer in self.layers[:-1]:
            h = act(layer(h))
        return self.layers[-1](h)


class ResidualMLP(nn.Module):
    """Input projection, ``num_blocks`` two-layer residual blocks, output layer."""

    def __init__(
        self,
        in_features,
        hidden_features,
        out_features,
        num_blocks,
        activation="relu",
        zero_output=False,
        generator=None,
    ):
        super().__init__()
        self.activation = activation
        self.inp = MaskedLinear(in_features, hidden_features, generator=generator)
        self.blocks = nn.ModuleList()
        for _ in range(num_blocks):
            pair = nn.ModuleList(
                [
                    MaskedLinear(hidden_features, hidden_features, generator=generator),
                    MaskedLinear(hidden_features, hidden_features, generator=generator),
                ]
            )
            self.blocks.append(pair)
        self.out = MaskedLinear(hidden_features, out_features, generator=generator)
        if zero_output:
            with torch.no_grad():
                self.out.weight.zero_()
                self.out.bias.zero_()

    def forward(self, inputs):
        act = _ACTIVATIONS[self.activation]
        h = self.inp(inputs)
        for first, second in self.blocks:
            h = h + second(act(first(act(h))))
        return self.out(act(h))


@dataclass
class Normalizer:
    """Per-dimension z-scoring, ``(x - mean) / std``, with ``std >= epsilon``."""

    mean: np.ndarray
    std: np.ndarray
    epsilon: float = 1e-8

    @classmethod
    def fit(cls, data, epsilon=1e-8):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] == 0:
            raise InputError("Normalizer.fit expects a non-empty 2-D array")
        if not np.all(np.isfinite(data)):
            raise InputError("cannot fit a normalizer on non-finite data")
        return cls(data.mean(axis=0), data.std(axis=0) + epsilon, epsilon)

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim), np.ones(dim), 0.0)

    def transform(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def inverse_transform(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def transform_tensor(self, x):
        return (x - as_tensor(self.mean)) / as_tensor(self.std)

    def inverse_tensor(self, z):
        return z * as_tensor(self.std) + as_tensor(self.mean)

    @property
    def log_abs_det(self):
        """log |d transform / dx|, summed over dimensions."""
        return float(-np.sum(np.log(self.std)))


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 200
    validation_fraction: float = 0.1
    patience_epochs: int = 20
    max_epochs: int = 2000
    seed: int = 0
    clip_norm: float | None = 5.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if int(self.batch_size) < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigurationError("validation_fraction must lie in (0, 1)")
        if int(self.patience_epochs) < 0:
            raise ConfigurationError("patience_epochs must be >= 0")
        if int(self.max_epochs) < 1:
            raise ConfigurationError("max_epochs must be >= 1")


class Adam:
    """Adam with bias correction, operating on a list of tensors in place."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = [p for p in params]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self, grads=None):
        """Apply one update. ``grads`` defaults to each parameter's ``.grad``."""
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise ConfigurationError("gradient list does not match parameters")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                continue
            if g.shape != p.shape:
                raise ConfigurationError("gradient shape does not match parameter")
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            p.sub_(self.lr * (m / c1) / ((v / c2).sqrt() + self.eps))


def gradient(loss_fn, module, batch):
    """Gradients of a scalar ``loss_fn(module, batch)`` w.r.t. every parameter.

    Returns a dict mapping parameter names to detached gradient tensors.
    """
    module.zero_grad(set_to_none=True)
    loss = loss_fn(module, batch)
    if loss.ndim != 0:
        raise ConfigurationError("loss_fn must return a scalar")
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()}")
    loss.backward()
    out = {}
    for name, p in module.named_parameters():
        out[name] = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
    return out


@dataclass
class TrainingLog:
    train_loss: list = field(default_factory=list)
    validation_loss: list = field(default_factory=list)
    best_epoch: int = -1
    epochs_run: int = 0

    @property
    def best_validation_loss(self):
        return self.validation_loss[self.best_epoch]

    def to_rows(self):
        return [
            {"epoch": i, "train_loss": t, "validation_loss": v}
            for i, (t, v) in enumerate(zip(self.train_loss, self.validation_loss))
        ]


def split_indices(n, validation_fraction, rng):
    n_val = math.ceil(validation_fraction * n)
    if n_val < 1 or n_val >= n:
        raise ConfigurationError(
            f"validation split of {n_val} rows is unusable for a dataset of {n} rows"
        )
    perm = rng.permutation(n)
    return perm[: n - n_val], perm[n - n_val :]


def _evaluate(module, loss_fn, tensors, idx, chunk=4096):
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(idx), chunk):
            sel = torch.as_tensor(idx[start : start + chunk])
            loss = loss_fn(module, tuple(t[sel] for t in tensors))
            total += float(loss) * len(sel)
    return total / len(idx)


def train(module, tensors, loss_fn, config: TrainConfig, split=None, callback=None):
    """Minimise the mean loss ``loss_fn(module, batch)`` with Adam.

    ``tensors`` is a tuple of equally long tensors; batches are row subsets of
    all of them. The last ``ceil(validation_fraction * N)`` rows of a seeded
    permutation form the validation set unless ``split`` gives explicit
    ``(train_idx, val_idx)``. Training stops once the validation
    loss has not improved for ``patience_epochs`` epochs, and the parameters
    of the best validation epoch are restored.
    """
    tensors = tuple(tensors)
    if not tensors or len(tensors[0]) == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    n = len(tensors[0])
    if any(len(t) != n for t in tensors):
        raise ConfigurationError("all training tensors need the same row count")
    rng = np.random.default_rng(config.seed)
    if split is None:
        split = split_indices(n, config.validation_fraction, rng)
    train_idx, val_idx = (np.asarray(i, dtype=np.int64) for i in split)
    if len(val_idx) == 0 or len(train_idx) == 0:
        raise ConfigurationError("empty training or validation split")
    params = [p for p in module.parameters() if p.requires_grad]
    opt = Adam(params, lr=config.learning_rate)
    log = TrainingLog()
    best_state, best_loss, since_best = None, math.inf, 0
    bs = int(config.batch_size)

    for epoch in range(int(config.max_epochs)):
        order = rng.permutation(train_idx)
        running = 0.0
        for b, start in enumerate(range(0, len(order), bs)):
            sel = torch.as_tensor(order[start : start + bs])
            opt.zero_grad()
            loss = loss_fn(module, tuple(t[sel] for t in tensors))
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {b}", epoch=epoch, batch=b
                )
            loss.backward()
            if config.clip_norm is not None:
                nn.utils.clip_grad_norm_(params, config.clip_norm)
            opt.step()
            running += float(loss.detach()) * len(sel)
        val = _evaluate(module, loss_fn, tensors, val_idx)
        if not math.isfinite(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}", epoch=epoch)
        log.train_loss.append(running / len(order))
        log.validation_loss.append(val)
        log.epochs_run = epoch + 1
        if callback is not None:
            callback(epoch, log)
        if val < best_loss:
            best_loss, since_best = val, 0
            log.best_epoch = epoch
            best_state = copy.deepcopy(module.state_dict())
        else:
            since_best += 1
        if since_best >= config.patience_epochs:
            break

    module.load_state_dict(best_state)
    return log
