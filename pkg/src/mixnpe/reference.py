"""Ground-truth and oracle posteriors for the benchmark simulators.

Every reference implements the same small interface as :class:`~mixnpe.MNPE`
(``sample``, ``marginal_probabilities``, ``log_prob`` and ``space``), so the
calibration and metric code can treat references and trained estimators
alike.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .exceptions import InputError, ReferenceInvalidError
from .simulators import (
    CoalMining,
    GaussianToy,
    TandemQueue,
    _expected_length_unchecked,
    truncated_normal_logpdf,
)


def _categorical(probs, u):
    """Inverse-CDF draw for each uniform in ``u`` (probs sums to 1)."""
    cdf = np.cumsum(probs)
    return np.minimum(np.searchsorted(cdf, u * cdf[-1], side="right"), len(probs) - 1)


class _PosteriorBase:
    """Batched sampling on top of a per-observation ``_sample_one``."""

    def sample(self, X, n, rng):
        X_arr = np.asarray(X, dtype=float)
        if n < 1:
            raise InputError("n must be >= 1")
        if X_arr.ndim == 1:
            if X_arr.shape[0] != self.observation_dim:
                raise InputError(f"expected {self.observation_dim} features, got {X_arr.shape[0]}")
            return self._sample_one(X_arr, n, rng)
        X_arr = X_arr.reshape(-1, self.observation_dim)
        draws = [self._sample_one(row, n, rng) for row in X_arr]
        return np.stack([d for d, _ in draws]), np.stack([c for _, c in draws])


# ---------------------------------------------------------------------------


class ToyPosterior(_PosteriorBase):
    """Closed-form posterior of :class:`GaussianToy`.

    p(x | theta_d) = N(x; a theta_d, 1 + sigma^2), so
    P(theta_d = 1 | x) = sigmoid(a (2x - a) / (2 (1 + sigma^2))) and
    theta_c | theta_d, x ~ N((x - a theta_d) / (1 + sigma^2), sigma^2 / (1 + sigma^2)).
    """

    observation_dim = 1

    def __init__(self, model=None):
        self.model = model or GaussianToy()
        self.space = self.model.space

    def prob_d1(self, x):
        a, s2 = self.model.a, self.model.sigma**2
        x = np.asarray(x, dtype=float)
        return special.expit(a * (2 * x - a) / (2 * (s2 + 1)))

    def conditional(self, x, theta_d):
        a, s2 = self.model.a, self.model.sigma**2
        mean = (np.asarray(x, dtype=float) - a * np.asarray(theta_d)) / (1 + s2)
        return mean, s2 / (1 + s2)

    def marginal_probabilities(self, x_obs, rng=None):
        p1 = float(self.prob_d1(np.asarray(x_obs, dtype=float).reshape(-1)[0]))
        return [np.array([1 - p1, p1])]

    def log_prob(self, theta_d, theta_c, x):
        theta_d = np.asarray(theta_d).reshape(-1)
        theta_c = np.asarray(theta_c, dtype=float).reshape(-1)
        x = np.broadcast_to(np.asarray(x, dtype=float).reshape(-1), theta_c.shape)
        p1 = self.prob_d1(x)
        mean, var = self.conditional(x, theta_d)
        lp_d = np.where(theta_d == 1, np.log(p1), np.log1p(-p1))
        return lp_d + stats.norm.logpdf(theta_c, mean, np.sqrt(var))

    def _sample_one(self, x, n, rng):
        x = float(np.asarray(x).reshape(-1)[0])
        theta_d = (rng.random(n) < self.prob_d1(x)).astype(np.int64)
        mean, var = self.conditional(x, theta_d)
        theta_c = mean + np.sqrt(var) * rng.standard_normal(n)
        return theta_d.reshape(n, 1), theta_c.reshape(n, 1)


# ---------------------------------------------------------------------------


@dataclass
class CoalExactPosterior:
    """Switchpoint PMF plus conjugate Gamma conditionals for one observation."""

    log_marginal: np.ndarray
    pmf: np.ndarray
    shape_early: np.ndarray
    rate_early: np.ndarray
    shape_late: np.ndarray
    rate_late: np.ndarray

    @property
    def mode(self):
        return int(np.argmax(self.pmf))

    def rate_means(self):
        """Posterior means of (lambda_early, lambda_late), averaged over s."""
        early = np.sum(self.pmf * self.shape_early / self.rate_early)
        late = np.sum(self.pmf * self.shape_late / self.rate_late)
        return float(early), float(late)


def coal_exact_posterior(x, n_years=None):
    """Exact posterior of :class:`CoalMining` via Gamma-Poisson conjugacy.

    For switchpoint index j the early segment is years ``[0, j)``. With an
    Exp(1) prior, a segment of length n and total count S contributes
    Gamma(S + 1) / (n + 1)^(S + 1) to the marginal likelihood (the
    s-independent product of 1 / y_t! is dropped) and has the conditional
    posterior Gamma(shape=S + 1, rate=n + 1).
    """
    y = np.asarray(x, dtype=float).reshape(-1)
    if n_years is not None and len(y) != n_years:
        raise InputError(f"expected {n_years} yearly counts, got {len(y)}")
    if np.any(y < 0) or not np.all(np.isfinite(y)):
        raise InputError("counts must be finite and non-negative")
    T = len(y)
    cs = np.concatenate([[0.0], np.cumsum(y)])
    j = np.arange(T)
    s_early, n_early = cs[j], j.astype(float)
    s_late, n_late = cs[-1] - cs[j], (T - j).astype(float)
    logm = (
        special.gammaln(s_early + 1) - (s_early + 1) * np.log(n_early + 1)
        + special.gammaln(s_late + 1) - (s_late + 1) * np.log(n_late + 1)
    )
    pmf = np.exp(logm - special.logsumexp(logm))
    return CoalExactPosterior(logm, pmf, s_early + 1, n_early + 1, s_late + 1, n_late + 1)


class CoalPosterior(_PosteriorBase):
    """Posterior-like wrapper around :func:`coal_exact_posterior`."""

    def __init__(self, model=None):
        self.model = model or CoalMining()
        self.space = self.model.space
        self.observation_dim = self.model.n_years

    def exact(self, x):
        return coal_exact_posterior(x, self.model.n_years)

    def marginal_probabilities(self, x_obs, rng=None):
        return [self.exact(x_obs).pmf]

    def log_prob(self, theta_d, theta_c, x):
        post = self.exact(x)
        s = np.asarray(theta_d, dtype=np.int64).reshape(-1)
        lam = np.asarray(theta_c, dtype=float).reshape(-1, 2)
        return (
            np.log(post.pmf[s])
            + stats.gamma.logpdf(lam[:, 0], post.shape_early[s], scale=1 / post.rate_early[s])
            + stats.gamma.logpdf(lam[:, 1], post.shape_late[s], scale=1 / post.rate_late[s])
        )

    def _sample_one(self, x, n, rng):
        post = self.exact(x)
        s = _categorical(post.pmf, rng.random(n))
        early = rng.gamma(post.shape_early[s], 1 / post.rate_early[s])
        late = rng.gamma(post.shape_late[s], 1 / post.rate_late[s])
        return s.reshape(n, 1), np.stack([early, late], axis=1)


# ---------------------------------------------------------------------------


@dataclass
class QueueISResult:
    """Self-normalised importance-sampling posterior for one observation.

    Each configuration ``configs[c]`` has its own draws ``particles[c]`` of
    (gamma, mu1, mu2) with log importance weights ``log_weights[c]``
    (``-inf`` where the prior truncation rejects).
    """

    configs: np.ndarray
    config_probs: np.ndarray
    log_evidence: np.ndarray
    ess: np.ndarray
    particles: list
    log_weights: list
    retained: np.ndarray
    min_ess: float

    @property
    def valid(self):
        return bool(np.all(self.ess[self.retained] >= self.min_ess))

    @property
    def mode(self):
        return self.configs[int(np.argmax(self.config_probs))]

    def sample(self, n, rng):
        """Sampling-importance-resampling: configuration, then particle."""
        cfg = _categorical(self.config_probs, rng.random(n))
        theta_c = np.empty((n, 3))
        for c in np.unique(cfg):
            sel = np.flatnonzero(cfg == c)
            lw = self.log_weights[c]
            w = np.exp(lw - special.logsumexp(lw))
            idx = _categorical(w, rng.random(len(sel)))
            theta_c[sel] = self.particles[c][idx]
        return self.configs[cfg].copy(), theta_c

    def marginals(self):
        k = int(self.configs.max()) + 1
        return [np.bincount(self.configs[:, i], weights=self.config_probs, minlength=k)
                for i in range(self.configs.shape[1])]


def _ess(log_w):
    if not np.any(np.isfinite(log_w)):
        return 0.0
    lw = log_w - special.logsumexp(log_w)
    return float(1.0 / np.exp(special.logsumexp(2 * lw)))


def rho_for_length(length, c, iters=80):
    """Traffic intensity at which an M/M/c queue has E[Q] = ``length``.

    E[Q] depends on (gamma, mu) only through rho and increases with it, so
    bisection on (0, 1) inverts it.
    """
    length, c = np.broadcast_arrays(np.asarray(length, dtype=float), np.asarray(c))
    lo, hi = np.zeros(length.shape), np.ones(length.shape)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        above = _expected_length_unchecked(c * mid, mid, c) > length
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    return 0.5 * (lo + hi)


class _GridDensity:
    """Piecewise-constant density on fixed bin edges, sampled exactly."""

    def __init__(self, edges, log_mass):
        self.edges = edges
        self.widths = np.diff(edges)
        mass = np.exp(log_mass - special.logsumexp(log_mass))
        self.mass = mass
        with np.errstate(divide="ignore"):
            self.log_density = np.log(mass) - np.log(self.widths)

    def draw(self, n, rng):
        k = _categorical(self.mass, rng.random(n))
        return self.edges[k] + self.widths[k] * rng.random(n)

    def logpdf(self, v):
        k = np.searchsorted(self.edges, v, side="right") - 1
        inside = (k >= 0) & (k < len(self.widths))
        return np.where(inside, self.log_density[np.clip(k, 0, len(self.widths) - 1)], -np.inf)


class _QueueProposal:
    """Proposal over u = log(gamma, mu1, mu2) for one server configuration.

    log(gamma) mixes the prior with a Gaussian centred on the arrival-count
    estimate. Given gamma, each station is proposed in v = log(rho), which
    alone fixes E[Q_i]: a grid density proportional to the (widened) mu prior
    at the count estimate of gamma times the (widened) queue-length
    likelihood, again mixed with the prior. Then mu_i = gamma / (c_i rho).
    """

    n_grid = 2000

    def __init__(self, model, x, config, mix, focused=True):
        self.servers = np.asarray(config) + model.min_servers
        self.mix = mix if focused else 1.0
        self.prior_loc = np.asarray(model.log_medians, dtype=float)
        self.prior_scale = model.log_scale
        total = float(np.sum(x[:3])) + 0.5
        self.gamma_loc = np.log(total / (3 * model.horizon))
        self.gamma_scale = 2.0 / np.sqrt(total)
        self.stations = [None, None]
        if self.mix >= 1.0:
            return
        for i in range(2):
            c = self.servers[i]
            spread = np.hypot(self.prior_scale, 2 * self.gamma_scale)
            centre = self.gamma_loc - np.log(c) - self.prior_loc[1 + i]
            v_max = np.log(rho_for_length(model.max_expected_length, c))
            lo, hi = centre - 8 * spread, min(centre + 8 * spread, v_max)
            if lo >= hi:
                continue
            edges = np.linspace(lo, hi, self.n_grid + 1)
            mid = 0.5 * (edges[1:] + edges[:-1])
            rho = np.exp(mid)
            length = _expected_length_unchecked(c * rho, rho, c)
            log_mass = (stats.norm.logpdf(mid, centre, spread)
                        + truncated_normal_logpdf(x[3 + i], length, 1.5 * model.sigma_obs))
            if np.all(np.isfinite(log_mass)) or np.any(np.isfinite(log_mass)):
                self.stations[i] = _GridDensity(edges, log_mass)

    def draw(self, n, rng):
        u = self.prior_loc + self.prior_scale * rng.standard_normal((n, 3))
        if self.mix >= 1.0:
            return u
        focused = rng.random(n) >= self.mix
        u[focused, 0] = self.gamma_loc + self.gamma_scale * rng.standard_normal(int(focused.sum()))
        for i, grid in enumerate(self.stations):
            if grid is None:
                continue
            pick = rng.random(n) >= self.mix
            v = grid.draw(int(pick.sum()), rng)
            u[pick, 1 + i] = u[pick, 0] - np.log(self.servers[i]) - v
        return u

    def log_ratio(self, u):
        """log prior(u) - log proposal(u)."""
        log_prior = stats.norm.logpdf(u, self.prior_loc, self.prior_scale)
        if self.mix >= 1.0:
            return np.zeros(len(u))
        log_mix, log_rest = np.log(self.mix), np.log1p(-self.mix)
        log_q = np.logaddexp(log_mix + log_prior[:, 0],
                             log_rest + stats.norm.logpdf(u[:, 0], self.gamma_loc, self.gamma_scale))
        for i, grid in enumerate(self.stations):
            if grid is None:
                log_q = log_q + log_prior[:, 1 + i]
                continue
            v = u[:, 0] - np.log(self.servers[i]) - u[:, 1 + i]
            log_q = log_q + np.logaddexp(log_mix + log_prior[:, 1 + i], log_rest + grid.logpdf(v))
        return log_prior.sum(axis=1) - log_q


class QueueReference(_PosteriorBase):
    """Importance-sampling reference for :class:`TandemQueue`.

    Each of the 25 server configurations gets its own importance sampler
    whose proposal targets the likelihood ridge (see :class:`_QueueProposal`)
    with the prior as a defensive component. Weights are likelihood times
    truncation indicator times the prior/proposal ratio.
    Configuration probabilities are the per-configuration marginal
    likelihood estimates (mean weight), normalised. The reference is valid
    only if every configuration with probability >= ``retain`` has an
    effective sample size of at least ``min_ess``; budgets of failing
    configurations are doubled up to ``max_budget`` before giving up.

    Args:
        model: the queue simulator.
        budget: initial number of proposal draws per configuration.
        max_budget: largest per-configuration budget tried.
        min_ess: ESS threshold per retained configuration.
        retain: probability threshold for a configuration to count as retained.
        use_likelihood: if False, weights are truncation indicators only, so
            the result is the truncated prior.
        strict: raise :class:`ReferenceInvalidError` instead of returning an
            invalid result.
        prior_mix: prior weight in every proposal mixture.
    """

    observation_dim = 5

    def __init__(self, model=None, budget=20_000, max_budget=320_000, min_ess=500,
                 retain=1e-3, use_likelihood=True, strict=True, prior_mix=0.1):
        self.model = model or TandemQueue()
        self.space = self.model.space
        self.budget = budget
        self.max_budget = max_budget
        self.min_ess = min_ess
        self.retain = retain
        self.use_likelihood = use_likelihood
        self.strict = strict
        self.prior_mix = prior_mix
        self._cache = (None, None)

    @property
    def configs(self):
        k = self.model.n_server_options
        return np.array([(a, b) for a in range(k) for b in range(k)], dtype=np.int64)

    def _log_lik(self, x, config, theta):
        """Log-likelihood of ``x`` with the truncation indicator folded in."""
        m = self.model
        eq = m.expected_lengths(np.broadcast_to(config, (len(theta), 2)), theta)
        ok = np.all(eq <= m.max_expected_length, axis=1)
        if not self.use_likelihood:
            return np.where(ok, 0.0, -np.inf)
        safe = np.where(np.isfinite(eq), eq, 0.0)
        ll = stats.poisson.logpmf(x[None, :3], theta[:, :1] * m.horizon).sum(axis=1)
        ll = ll + truncated_normal_logpdf(x[3], safe[:, 0], m.sigma_obs)
        ll = ll + truncated_normal_logpdf(x[4], safe[:, 1], m.sigma_obs)
        return np.where(ok, ll, -np.inf)

    def _run(self, x, config, proposal, n, rng):
        u = proposal.draw(n, rng)
        theta = np.exp(u)
        log_w = self._log_lik(x, config, theta) + proposal.log_ratio(u)
        return theta, log_w

    def fit(self, x, rng):
        """Importance-sampling posterior for one observation ``x``."""
        x = np.asarray(x, dtype=float).reshape(-1)
        if len(x) != self.observation_dim or not np.all(np.isfinite(x)):
            raise InputError(f"expected {self.observation_dim} finite features")
        configs = self.configs
        proposals = [_QueueProposal(self.model, x, c, self.prior_mix, self.use_likelihood)
                     for c in configs]
        budgets = np.full(len(configs), self.budget)
        particles, log_ws = [None] * len(configs), [None] * len(configs)
        pending = range(len(configs))
        while True:
            for i in pending:
                particles[i], log_ws[i] = self._run(x, configs[i], proposals[i], budgets[i], rng)
            with np.errstate(divide="ignore"):
                log_ev = np.array([special.logsumexp(lw) - np.log(len(lw)) for lw in log_ws])
            probs = np.exp(log_ev - special.logsumexp(log_ev))
            ess = np.array([_ess(lw) for lw in log_ws])
            retained = probs >= self.retain
            result = QueueISResult(configs, probs, log_ev, ess, particles, log_ws,
                                   retained, self.min_ess)
            failing = retained & (ess < self.min_ess) & (budgets < self.max_budget)
            if result.valid or not failing.any():
                break
            pending = np.flatnonzero(failing)
            budgets[pending] = np.minimum(2 * budgets[pending], self.max_budget)
        if not result.valid and self.strict:
            low = result.ess[result.retained].min()
            raise ReferenceInvalidError(
                f"importance-sampling reference invalid: min retained ESS {low:.0f} < {self.min_ess}"
            )
        return result

    def _fit_cached(self, x, rng):
        # Sampling and marginals for the same observation reuse one fit.
        key = np.asarray(x, dtype=float).reshape(-1).tobytes()
        if self._cache[0] != key:
            self._cache = (key, self.fit(x, rng))
        return self._cache[1]

    def marginal_probabilities(self, x_obs, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        return self._fit_cached(x_obs, rng).marginals()

    def _sample_one(self, x, n, rng):
        return self._fit_cached(x, rng).sample(n, rng)


def reference_for(model):
    """The reference posterior matching a simulator instance."""
    if isinstance(model, GaussianToy):
        return ToyPosterior(model)
    if isinstance(model, CoalMining):
        return CoalPosterior(model)
    if isinstance(model, TandemQueue):
        return QueueReference(model)
    raise InputError(f"no reference posterior for {type(model).__name__}")
