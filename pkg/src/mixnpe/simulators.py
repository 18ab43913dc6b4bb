"""Benchmark simulators with mixed discrete/continuous parameters.

Each model exposes ``space`` (the parameter schema), ``sample_prior``,
``simulate`` (batched, seeded through a numpy Generator), ``log_likelihood``
and ``observation_transforms`` (per-dimension preprocessing applied before
z-scoring). Discrete parameters are class indices ``0..|D_i|-1``; the schema
offsets turn them into server counts or calendar years.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial

import numpy as np
from scipy import special, stats

from .exceptions import InputError, StabilityError
from .made import DiscreteSchema

MODEL_NAMES = ("gaussian_toy", "tandem_queue", "coal_mining")


@dataclass(frozen=True)
class MixedParamSpace:
    """theta = (theta_d, theta_c): ``discrete`` schema plus named continuous dims."""

    discrete: DiscreteSchema
    continuous: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "continuous", tuple(str(c) for c in self.continuous))
        if len(self.discrete) + len(self.continuous) < 1:
            raise InputError("parameter space must have at least one dimension")

    @property
    def n_discrete(self):
        return len(self.discrete)

    @property
    def n_continuous(self):
        return len(self.continuous)

    def to_dict(self):
        return {"discrete": self.discrete.to_dict(), "continuous": list(self.continuous)}

    @classmethod
    def from_dict(cls, d):
        return cls(DiscreteSchema.from_dict(d["discrete"]), tuple(d["continuous"]))


@dataclass
class Dataset:
    """Parameter/observation pairs with provenance metadata."""

    theta_d: np.ndarray
    theta_c: np.ndarray
    x: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta_d = np.asarray(self.theta_d, dtype=np.int64)
        self.theta_c = np.asarray(self.theta_c, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.float64)
        n = len(self.x)
        if self.theta_d.ndim == 1:
            self.theta_d = self.theta_d.reshape(n, -1)
        if self.theta_c.ndim == 1:
            self.theta_c = self.theta_c.reshape(n, -1)
        if self.x.ndim == 1:
            self.x = self.x.reshape(n, -1)
        if not (len(self.theta_d) == len(self.theta_c) == n):
            raise InputError("theta_d, theta_c and x need the same number of rows")

    def __len__(self):
        return len(self.x)

    def subset(self, idx):
        return Dataset(self.theta_d[idx], self.theta_c[idx], self.x[idx], dict(self.metadata))


# ---------------------------------------------------------------------------
# Gaussian toy


@dataclass
class GaussianToy:
    """theta_c ~ N(0, 1), theta_d ~ Bernoulli(1/2), x ~ N(theta_c + a theta_d, sigma^2)."""

    a: float = 2.0
    sigma: float = 0.5
    name: str = "gaussian_toy"

    def __post_init__(self):
        if not self.sigma > 0:
            raise InputError("sigma must be positive")

    @property
    def space(self):
        return MixedParamSpace(DiscreteSchema(("theta_d",), (2,)), ("theta_c",))

    observation_dim = 1
    observation_transforms = ("identity",)

    def sample_prior(self, n, rng):
        theta_d = rng.integers(0, 2, size=(n, 1))
        theta_c = rng.standard_normal((n, 1))
        return theta_d, theta_c

    def simulate(self, theta_d, theta_c, rng):
        theta_d = np.asarray(theta_d).reshape(-1, 1)
        theta_c = np.asarray(theta_c, dtype=float).reshape(-1, 1)
        if np.any((theta_d != 0) & (theta_d != 1)):
            raise InputError("theta_d must be 0 or 1")
        mean = theta_c + self.a * theta_d
        return mean + self.sigma * rng.standard_normal(mean.shape)

    def log_likelihood(self, theta_d, theta_c, x):
        theta_d = np.asarray(theta_d).reshape(-1, 1)
        theta_c = np.asarray(theta_c, dtype=float).reshape(-1, 1)
        x = np.asarray(x, dtype=float).reshape(-1, 1)
        mean = theta_c + self.a * theta_d
        return stats.norm.logpdf(x, mean, self.sigma)[:, 0]


# ---------------------------------------------------------------------------
# Tandem M/M/c queue

_FACT = np.array([float(factorial(i)) for i in range(64)])


def queue_expected_length(gamma, mu, c):
    """Steady-state mean number waiting in an M/M/c queue.

    E[Q] = r^c rho / (c! (1 - rho)^2) * pi0 with r = gamma / mu,
    rho = r / c and pi0 = [sum_{n<c} r^n / n! + r^c / (c! (1 - rho))]^-1.
    Works elementwise on arrays; raises :class:`StabilityError` if any
    rho >= 1.
    """
    gamma, mu, c = np.broadcast_arrays(
        np.asarray(gamma, dtype=float), np.asarray(mu, dtype=float), np.asarray(c)
    )
    c = c.astype(np.int64)
    r = gamma / mu
    rho = r / c
    if np.any(rho >= 1):
        raise StabilityError("traffic intensity rho = gamma / (c mu) must be < 1")
    return _expected_length_unchecked(r, rho, c)


def _expected_length_unchecked(r, rho, c):
    total = np.zeros_like(r)
    for k in range(int(np.max(c, initial=0))):
        total = total + np.where(k < c, r**k / _FACT[k], 0.0)
    rc = r**c / _FACT[c]
    pi0 = 1.0 / (total + rc / (1.0 - rho))
    return rc * rho / (1.0 - rho) ** 2 * pi0


def queue_stability(gamma, mu, c):
    """Vectorised E[Q] with ``inf`` where rho >= 1."""
    gamma, mu, c = np.broadcast_arrays(
        np.asarray(gamma, dtype=float), np.asarray(mu, dtype=float), np.asarray(c)
    )
    c = c.astype(np.int64)
    r = gamma / mu
    rho = r / c
    stable = rho < 1
    safe_rho = np.where(stable, rho, 0.5)
    eq = _expected_length_unchecked(np.where(stable, r, 0.5 * c), safe_rho, c)
    return np.where(stable, eq, np.inf)


@dataclass
class TandemQueue:
    """Two M/M/c stations in series observed over a horizon T.

    theta_d = (c1, c2) with c_i in {2..6} (class index + 2);
    theta_c = (gamma, mu1, mu2);
    x = (n_arr, n_comp1, n_comp2, q1, q2).
    """

    horizon: float = 100.0
    sigma_obs: float = 0.1
    max_expected_length: float = 10.0
    log_medians: tuple = (np.log(9.0), np.log(8.0), np.log(5.0))
    log_scale: float = 0.3
    min_servers: int = 2
    max_servers: int = 6
    name: str = "tandem_queue"

    @property
    def n_server_options(self):
        return self.max_servers - self.min_servers + 1

    @property
    def space(self):
        k = self.n_server_options
        schema = DiscreteSchema(("c1", "c2"), (k, k), (self.min_servers, self.min_servers))
        return MixedParamSpace(schema, ("gamma", "mu1", "mu2"))

    observation_dim = 5
    observation_transforms = ("identity", "identity", "identity", "log1p", "log1p")

    def servers(self, theta_d):
        return np.asarray(theta_d, dtype=np.int64) + self.min_servers

    def expected_lengths(self, theta_d, theta_c):
        """(N, 2) array of E[Q_i]; ``inf`` where a station is unstable."""
        c = self.servers(theta_d)
        theta_c = np.asarray(theta_c, dtype=float)
        gamma = theta_c[:, 0]
        return np.stack(
            [queue_stability(gamma, theta_c[:, 1], c[:, 0]),
             queue_stability(gamma, theta_c[:, 2], c[:, 1])],
            axis=1,
        )

    def accepts(self, theta_d, theta_c):
        eq = self.expected_lengths(theta_d, theta_c)
        return np.all(eq <= self.max_expected_length, axis=1)

    def sample_untruncated_prior(self, n, rng):
        theta_d = rng.integers(0, self.n_server_options, size=(n, 2))
        z = rng.standard_normal((n, 3))
        theta_c = np.exp(np.asarray(self.log_medians) + self.log_scale * z)
        return theta_d, theta_c

    def sample_prior(self, n, rng, return_rejections=False):
        """Draw ``n`` accepted prior samples, discarding unstable/near-unstable draws."""
        kept_d, kept_c, rejected, have = [], [], 0, 0
        while have < n:
            batch = max(2 * (n - have), 64)
            d, c = self.sample_untruncated_prior(batch, rng)
            ok = self.accepts(d, c)
            # Count only rejections that precede the n-th accepted draw.
            ok_idx = np.flatnonzero(ok)
            need = n - have
            if len(ok_idx) >= need:
                cut = ok_idx[need - 1] + 1
                rejected += int(np.sum(~ok[:cut]))
                ok_idx = ok_idx[:need]
            else:
                rejected += int(np.sum(~ok))
            kept_d.append(d[ok_idx])
            kept_c.append(c[ok_idx])
            have += len(ok_idx)
        theta_d, theta_c = np.concatenate(kept_d), np.concatenate(kept_c)
        if return_rejections:
            return theta_d, theta_c, rejected
        return theta_d, theta_c

    def simulate(self, theta_d, theta_c, rng, sigma_obs=None):
        sigma = self.sigma_obs if sigma_obs is None else sigma_obs
        theta_d = np.asarray(theta_d).reshape(-1, 2)
        theta_c = np.asarray(theta_c, dtype=float).reshape(-1, 3)
        eq = self.expected_lengths(theta_d, theta_c)
        if np.any(~np.isfinite(eq)):
            raise StabilityError("cannot simulate an unstable queue (rho >= 1)")
        n = len(theta_c)
        rate = theta_c[:, :1] * self.horizon
        counts = rng.poisson(np.repeat(rate, 3, axis=1)).astype(float)
        q = _truncated_normal(eq, sigma, rng)
        return np.concatenate([counts, q], axis=1).reshape(n, 5)

    def log_likelihood(self, theta_d, theta_c, x, sigma_obs=None):
        sigma = self.sigma_obs if sigma_obs is None else sigma_obs
        theta_d = np.asarray(theta_d).reshape(-1, 2)
        theta_c = np.asarray(theta_c, dtype=float).reshape(-1, 3)
        x = np.asarray(x, dtype=float).reshape(-1, 5)
        eq = self.expected_lengths(theta_d, theta_c)
        rate = theta_c[:, 0] * self.horizon
        out = stats.poisson.logpmf(x[:, :3], rate[:, None]).sum(axis=1)
        out = out + truncated_normal_logpdf(x[:, 3:], eq, sigma).sum(axis=1)
        return np.where(np.all(np.isfinite(eq), axis=1), out, -np.inf)


def _truncated_normal(mean, sigma, rng):
    """N(mean, sigma^2) restricted to [0, inf) by rejection."""
    out = mean + sigma * rng.standard_normal(mean.shape)
    bad = out < 0
    while np.any(bad):
        out[bad] = mean[bad] + sigma * rng.standard_normal(int(bad.sum()))
        bad = out < 0
    return out


def truncated_normal_logpdf(q, mean, sigma):
    """log density of N(mean, sigma^2) truncated to [0, inf)."""
    q = np.asarray(q, dtype=float)
    with np.errstate(invalid="ignore"):
        z = (q - mean) / sigma
        lp = stats.norm.logpdf(z) - np.log(sigma) - special.log_ndtr(mean / sigma)
    return np.where(q >= 0, lp, -np.inf)


# ---------------------------------------------------------------------------
# Coal mining changepoint

FIRST_YEAR = 1851
LAST_YEAR = 1961

# Annual UK coal-mining disasters, 1851-1961. The two years missing from the
# commonly distributed series (1890, 1934) are filled with 2 and 1.
COAL_DISASTERS = np.array(
    [4, 5, 4, 0, 1, 4, 3, 4, 0, 6, 3, 3, 4, 0, 2, 6, 3, 3, 5, 4, 5, 3, 1, 4,
     4, 1, 5, 5, 3, 4, 2, 5, 2, 2, 3, 4, 2, 1, 3, 2, 2, 1, 1, 1, 1, 3, 0, 0,
     1, 0, 1, 1, 0, 0, 3, 1, 0, 3, 2, 2, 0, 1, 1, 1, 0, 1, 0, 1, 0, 0, 0, 2,
     1, 0, 0, 0, 1, 1, 0, 2, 3, 3, 1, 1, 2, 1, 1, 1, 1, 2, 4, 2, 0, 0, 1, 4,
     0, 0, 0, 1, 0, 0, 0, 0, 0, 1, 0, 0, 1, 0, 1],
    dtype=float,
)


@dataclass
class CoalMining:
    """s ~ U{1851..1961}, rates ~ Exp(1), y_t ~ Poisson(early if t < s else late)."""

    first_year: int = FIRST_YEAR
    last_year: int = LAST_YEAR
    name: str = "coal_mining"

    @property
    def n_years(self):
        return self.last_year - self.first_year + 1

    @property
    def space(self):
        schema = DiscreteSchema(("switchpoint",), (self.n_years,), (self.first_year,))
        return MixedParamSpace(schema, ("lambda_early", "lambda_late"))

    @property
    def observation_dim(self):
        return self.n_years

    @property
    def observation_transforms(self):
        return ("sqrt",) * self.n_years

    def rates(self, theta_d, theta_c):
        """Per-year Poisson rate, shape (N, n_years)."""
        s = np.asarray(theta_d, dtype=np.int64).reshape(-1, 1)
        theta_c = np.asarray(theta_c, dtype=float).reshape(-1, 2)
        t = np.arange(self.n_years)[None, :]
        return np.where(t < s, theta_c[:, :1], theta_c[:, 1:2])

    def sample_prior(self, n, rng):
        theta_d = rng.integers(0, self.n_years, size=(n, 1))
        theta_c = rng.exponential(1.0, size=(n, 2))
        return theta_d, theta_c

    def simulate(self, theta_d, theta_c, rng):
        theta_d = np.asarray(theta_d).reshape(-1, 1)
        if np.any(theta_d < 0) or np.any(theta_d >= self.n_years):
            raise InputError("switchpoint index out of range")
        if np.any(np.asarray(theta_c) <= 0):
            raise InputError("rates must be positive")
        return rng.poisson(self.rates(theta_d, theta_c)).astype(float)

    def log_likelihood(self, theta_d, theta_c, x):
        x = np.asarray(x, dtype=float).reshape(-1, self.n_years)
        return stats.poisson.logpmf(x, self.rates(theta_d, theta_c)).sum(axis=1)


def get_model(name, **kwargs):
    models = {"gaussian_toy": GaussianToy, "tandem_queue": TandemQueue, "coal_mining": CoalMining}
    try:
        return models[name](**kwargs)
    except KeyError:
        raise InputError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}") from None


def simulate_dataset(model, n, seed):
    """Prior draws paired with simulations, with provenance metadata."""
    rng = np.random.default_rng(seed)
    rejected = 0
    if isinstance(model, TandemQueue):
        theta_d, theta_c, rejected = model.sample_prior(n, rng, return_rejections=True)
    else:
        theta_d, theta_c = model.sample_prior(n, rng)
    x = model.simulate(theta_d, theta_c, rng)
    meta = {
        "simulator": model.name,
        "seed": int(seed),
        "n_requested": int(n),
        "n_rejected": int(rejected),
        "rejection_fraction": rejected / (n + rejected),
    }
    return Dataset(theta_d, theta_c, x, meta)
