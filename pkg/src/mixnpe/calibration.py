"""Calibration diagnostics for mixed posteriors.

Continuous dimensions are checked with simulation-based calibration (SBC)
ranks, their empirical CDF and the error over the diagonal (EoD). Discrete
dimensions are checked with reliability tables and the expected calibration
error (ECE), compared against the finite-sample baseline a perfectly
calibrated predictor would still show.

Any object with ``space``, ``sample(X, n, rng)`` and
``marginal_probabilities(x, rng)`` can be diagnosed, so trained estimators
and reference posteriors go through the same code.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import special, stats

from .exceptions import CapabilityError, ConfigurationError, InputError

EXACT_BASELINE_CAP = 100_000


# -- continuous: SBC ----------------------------------------------------------


def ranks_from_samples(samples, truth):
    """Rank of each true value among its posterior samples.

    ``samples`` has shape (N, S, k) and ``truth`` (N, k). The rank counts
    samples strictly below the truth, so it lies in 0..S.
    """
    samples = np.asarray(samples, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if samples.ndim != 3 or truth.shape != (samples.shape[0], samples.shape[2]):
        raise InputError(f"shape mismatch: samples {samples.shape}, truth {truth.shape}")
    return np.sum(samples < truth[:, None, :], axis=1).astype(np.int64)


def rank_ecdf(ranks, S):
    """eCDF of integer ranks evaluated at r = 0..S (last value is 1)."""
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size and (ranks.min() < 0 or ranks.max() > S):
        raise InputError(f"ranks must lie in [0, {S}]")
    counts = np.bincount(ranks, minlength=S + 1)
    return np.cumsum(counts) / max(len(ranks), 1)


def error_over_diagonal(ranks, S):
    """Mean |eCDF(r) - r/S| over the grid r = 0..S."""
    grid = np.arange(S + 1) / S
    return float(np.mean(np.abs(rank_ecdf(ranks, S) - grid)))


def _uniform_rank_stats(n_test, S, n_mc, rng):
    grid = np.arange(S + 1) / S
    eods, sups = np.empty(n_mc), np.empty(n_mc)
    for i in range(n_mc):
        dev = rank_ecdf(rng.integers(0, S + 1, size=n_test), S) - grid
        eods[i] = np.mean(np.abs(dev))
        sups[i] = np.max(np.abs(dev))
    return eods, sups


@dataclass
class EodBaseline:
    """EoD expected under exactly uniform ranks, with a 95% interval.

    ``band_halfwidth`` is the 95th percentile of the largest eCDF deviation,
    giving a simultaneous band r/S +- band_halfwidth around the diagonal.
    """

    n_test: int
    S: int
    n_mc: int
    mean: float
    lower: float
    upper: float
    band_halfwidth: float


def eod_uniform_baseline(n_test, S, n_mc=2000, rng=None):
    """Monte Carlo baseline for EoD at the given ``n_test`` and ``S``."""
    if n_mc < 1000:
        raise ConfigurationError("n_mc must be >= 1000")
    if n_test < 1 or S < 1:
        raise ConfigurationError("n_test and S must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    eods, sups = _uniform_rank_stats(n_test, S, n_mc, rng)
    lo, hi = np.percentile(eods, [2.5, 97.5])
    return EodBaseline(n_test, S, n_mc, float(eods.mean()), float(lo), float(hi),
                       float(np.percentile(sups, 95)))


@dataclass
class SbcReport:
    names: list
    S: int
    ranks: np.ndarray
    ecdf: np.ndarray
    eod: np.ndarray
    baseline: EodBaseline

    @property
    def n_test(self):
        return self.ranks.shape[0]

    def deviation(self):
        """eCDF minus the diagonal, shape (k, S+1)."""
        return self.ecdf - np.arange(self.S + 1) / self.S

    def within_band(self):
        """Per dimension: is EoD inside the uniform baseline's 95% interval (or below)?"""
        return self.eod <= self.baseline.upper

    def inside_band(self):
        """Per dimension: does the whole eCDF stay inside the simultaneous band?"""
        return np.abs(self.deviation()).max(axis=1) <= self.baseline.band_halfwidth

    def above_band(self):
        """Per dimension: does the eCDF leave the simultaneous band from above?"""
        return self.deviation().max(axis=1) > self.baseline.band_halfwidth

    def ks_pvalues(self):
        """Discrete-uniform KS test p-values of the ranks (Monte Carlo-free)."""
        out = []
        for j in range(self.ranks.shape[1]):
            u = (self.ranks[:, j] + 0.5) / (self.S + 1)
            out.append(stats.kstest(u, "uniform").pvalue)
        return np.array(out)

    def to_dict(self):
        return {
            "names": list(self.names),
            "S": self.S,
            "n_test": self.n_test,
            "ranks": self.ranks.T.tolist(),
            "ecdf": self.ecdf.tolist(),
            "eod": self.eod.tolist(),
            "eod_within_band": self.within_band().tolist(),
            "ecdf_inside_band": self.inside_band().tolist(),
            "baseline": asdict(self.baseline),
        }


def sbc_report(samples, truth, S=None, names=None, n_mc=2000, rng=None):
    """SBC ranks, eCDFs and EoD from (N, S, k) samples and (N, k) truths."""
    samples = np.asarray(samples, dtype=float)
    S = samples.shape[1] if S is None else S
    ranks = ranks_from_samples(samples, truth)
    names = names or [f"theta_c_{j}" for j in range(ranks.shape[1])]
    ecdf = np.stack([rank_ecdf(ranks[:, j], S) for j in range(ranks.shape[1])])
    eod = np.array([error_over_diagonal(ranks[:, j], S) for j in range(ranks.shape[1])])
    return SbcReport(list(names), S, ranks, ecdf, eod,
                     eod_uniform_baseline(len(ranks), S, n_mc, rng))


# -- discrete: reliability and ECE -----------------------------------------


def bin_index(confidences, n_bins):
    """Equal-width bin on [0, 1]; a confidence of exactly 1 goes to the last bin."""
    c = np.asarray(confidences, dtype=float)
    return np.minimum((c * n_bins).astype(np.int64), n_bins - 1)


@dataclass
class ReliabilityTable:
    """Equal-width reliability table for one discrete dimension."""

    name: str
    edges: np.ndarray
    counts: np.ndarray
    confidence: np.ndarray
    accuracy: np.ndarray
    ece: float
    baseline_halfnormal: float
    baseline_exact: float | None
    rule_of_thumb: np.ndarray = field(default=None)

    @property
    def n(self):
        return int(self.counts.sum())

    def gaps(self):
        """acc(b) - conf(b) for occupied bins (negative: overconfident)."""
        occ = self.counts > 0
        return self.accuracy[occ] - self.confidence[occ]

    def to_dict(self):
        return {
            "name": self.name,
            "edges": self.edges.tolist(),
            "counts": self.counts.tolist(),
            "confidence": _nan_to_none(self.confidence),
            "accuracy": _nan_to_none(self.accuracy),
            "ece": self.ece,
            "baseline_halfnormal": self.baseline_halfnormal,
            "baseline_exact": self.baseline_exact,
            "rule_of_thumb": self.rule_of_thumb.tolist(),
        }


def _nan_to_none(values):
    return [None if np.isnan(v) else float(v) for v in values]


def reliability(confidences, correct, n_bins=10):
    """Bin counts, mean confidence, accuracy and ECE.

    Empty bins have count 0, confidence and accuracy NaN and contribute
    nothing to the ECE.
    """
    if n_bins < 1:
        raise ConfigurationError("n_bins must be >= 1")
    conf = np.asarray(confidences, dtype=float).reshape(-1)
    hit = np.asarray(correct, dtype=float).reshape(-1)
    if conf.shape != hit.shape or conf.size == 0:
        raise InputError("confidences and correct must be non-empty and the same length")
    if np.any((conf < 0) | (conf > 1)):
        raise InputError("confidences must lie in [0, 1]")
    b = bin_index(conf, n_bins)
    counts = np.bincount(b, minlength=n_bins)
    with np.errstate(invalid="ignore"):
        mean_conf = np.bincount(b, weights=conf, minlength=n_bins) / counts
        acc = np.bincount(b, weights=hit, minlength=n_bins) / counts
    occ = counts > 0
    ece = float(np.sum(counts[occ] * np.abs(acc[occ] - mean_conf[occ])) / conf.size)
    return counts, mean_conf, acc, ece


def ece_baseline_halfnormal(counts, probs, n_total=None):
    """Expected ECE of a calibrated predictor, half-normal approximation.

    (1/N) sqrt(2/pi) sum_b sqrt(n_b p_b (1 - p_b)); empty bins contribute 0.
    """
    n, p = _bins(counts, probs)
    N = n.sum() if n_total is None else n_total
    var = np.where(n > 0, n * p * (1 - p), 0.0)
    return float(np.sqrt(2 / np.pi) * np.sum(np.sqrt(np.clip(var, 0, None))) / N)


def expected_abs_binomial_deviation(n, p):
    """E|K/n - p| for K ~ Binomial(n, p), by exact summation."""
    if n == 0 or p <= 0 or p >= 1:
        return 0.0
    if n > EXACT_BASELINE_CAP:
        raise CapabilityError(
            f"bin count {n} exceeds the exact-summation cap {EXACT_BASELINE_CAP}; "
            "use ece_baseline_halfnormal"
        )
    k = np.arange(n + 1)
    return float(np.sum(stats.binom.pmf(k, n, p) * np.abs(k / n - p)))


def ece_baseline_exact(counts, probs, n_total=None):
    """Expected ECE of a calibrated predictor, exact binomial sums."""
    n, p = _bins(counts, probs)
    N = n.sum() if n_total is None else n_total
    return float(sum(nb * expected_abs_binomial_deviation(int(nb), pb)
                     for nb, pb in zip(n, p)) / N)


def rule_of_thumb(counts, probs, minimum=5):
    """Per bin: does n_b p_b >= 5 and n_b (1 - p_b) >= 5 hold?"""
    n, p = _bins(counts, probs)
    return (n * p >= minimum) & (n * (1 - p) >= minimum)


def _bins(counts, probs):
    n = np.asarray(counts, dtype=np.int64).reshape(-1)
    p = np.nan_to_num(np.asarray(probs, dtype=float).reshape(-1), nan=0.0)
    if n.shape != p.shape:
        raise InputError("counts and probs must have the same length")
    if np.any(n < 0):
        raise InputError("bin counts must be non-negative")
    return n, np.clip(p, 0.0, 1.0)


def reliability_table(marginals, truth, n_bins=10, name="theta_d"):
    """Reliability table from (N, C) marginal PMFs and (N,) true classes.

    The predicted class is the argmax and its probability the confidence.
    Baselines use the empirical bin occupancy with p_b = conf(b).
    """
    marginals = np.asarray(marginals, dtype=float)
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    pred = np.argmax(marginals, axis=1)
    conf = marginals[np.arange(len(pred)), pred]
    counts, mean_conf, acc, ece = reliability(np.clip(conf, 0, 1), pred == truth, n_bins)
    try:
        exact = ece_baseline_exact(counts, mean_conf)
    except CapabilityError:
        exact = None
    return ReliabilityTable(
        name, np.linspace(0, 1, n_bins + 1), counts, mean_conf, acc, ece,
        ece_baseline_halfnormal(counts, mean_conf), exact,
        rule_of_thumb(counts, mean_conf),
    )


# -- combined report --------------------------------------------------------


@dataclass
class CalibrationReport:
    sbc: SbcReport | None
    reliability: list
    n_test: int
    S: int
    n_bins: int
    seed: int | None

    def eod_within_band(self):
        return [] if self.sbc is None else self.sbc.within_band().tolist()

    def ecdf_inside_band(self):
        return [] if self.sbc is None else self.sbc.inside_band().tolist()

    def ece_ratios(self, baseline="halfnormal"):
        """ECE divided by its calibrated-predictor baseline per discrete dim."""
        out = []
        for t in self.reliability:
            base = t.baseline_halfnormal
            if baseline == "exact" and t.baseline_exact is not None:
                base = t.baseline_exact
            out.append(t.ece / base if base > 0 else (0.0 if t.ece == 0 else np.inf))
        return out

    def passes(self, ece_factor=2.0):
        """eCDFs inside the band and every ECE within ``ece_factor`` x baseline."""
        return bool(all(self.ecdf_inside_band())
                    and all(r <= ece_factor for r in self.ece_ratios()))

    def to_dict(self):
        return {
            "n_test": self.n_test,
            "S": self.S,
            "n_bins": self.n_bins,
            "seed": self.seed,
            "sbc": None if self.sbc is None else self.sbc.to_dict(),
            "reliability": [t.to_dict() for t in self.reliability],
            "ece_ratios": self.ece_ratios(),
            "passes": self.passes(),
        }


def _check_space(posterior, model):
    if posterior.space != model.space:
        raise ConfigurationError(
            "posterior and simulator parameter spaces differ: "
            f"{posterior.space} vs {model.space}"
        )


def simulate_test_set(model, n_test, rng):
    theta_d, theta_c = model.sample_prior(n_test, rng)
    return theta_d, theta_c, model.simulate(theta_d, theta_c, rng)


def posterior_marginals(posterior, X, rng):
    """List over discrete dims of (N, C_i) marginal PMFs."""
    per_x = [posterior.marginal_probabilities(row, rng=rng) for row in X]
    return [np.stack([m[i] for m in per_x]) for i in range(len(per_x[0]))]


def calibration_report(posterior, model, n_test=500, S=1000, n_bins=10, seed=0,
                       n_mc=2000, test_set=None):
    """SBC on every continuous and ECE on every discrete dimension.

    ``test_set`` may supply (theta_d, theta_c, X) drawn from the prior
    predictive; otherwise ``n_test`` pairs are simulated with ``seed``.
    """
    if n_test < 1 or S < 1:
        raise ConfigurationError("n_test and S must be >= 1")
    _check_space(posterior, model)
    rng = np.random.default_rng(seed)
    if test_set is None:
        theta_d, theta_c, X = simulate_test_set(model, n_test, rng)
    else:
        theta_d, theta_c, X = (np.asarray(a) for a in test_set)
        n_test = len(X)
    space = model.space
    sbc = None
    if space.n_continuous:
        _, samples = posterior.sample(X, S, rng)
        sbc = sbc_report(samples, theta_c, S, list(space.continuous), n_mc, rng)
    tables = []
    if space.n_discrete:
        margs = posterior_marginals(posterior, X, rng)
        for i, name in enumerate(space.discrete.names):
            tables.append(reliability_table(margs[i], theta_d[:, i], n_bins, name))
    return CalibrationReport(sbc, tables, n_test, S, n_bins, seed)


# -- deliberately miscalibrated wrappers ----------------------------------


class ShrunkPosterior:
    """Pulls continuous samples toward their per-observation mean.

    With ``factor`` 0.5 the posterior standard deviation is halved while the
    discrete factor is untouched.
    """

    def __init__(self, base, factor=0.5):
        self.base = base
        self.factor = factor
        self.space = base.space

    def sample(self, X, n, rng):
        d, c = self.base.sample(X, n, rng)
        mean = c.mean(axis=-2, keepdims=True)
        return d, mean + self.factor * (c - mean)

    def marginal_probabilities(self, x_obs, rng=None):
        return self.base.marginal_probabilities(x_obs, rng=rng)


class TemperedPosterior:
    """Sharpens discrete marginals: softmax(log p / temperature)."""

    def __init__(self, base, temperature=0.2):
        self.base = base
        self.temperature = temperature
        self.space = base.space

    def sample(self, X, n, rng):
        return self.base.sample(X, n, rng)

    def marginal_probabilities(self, x_obs, rng=None):
        out = []
        for p in self.base.marginal_probabilities(x_obs, rng=rng):
            with np.errstate(divide="ignore"):
                out.append(special.softmax(np.log(p) / self.temperature))
        return out


class PriorPosterior:
    """Ignores the observation and returns prior draws and uniform-ish marginals."""

    def __init__(self, model, n_marginal=20_000, seed=0):
        self.model = model
        self.space = model.space
        d, _ = model.sample_prior(n_marginal, np.random.default_rng(seed))
        self._marginals = [
            np.bincount(d[:, i], minlength=c) / n_marginal
            for i, c in enumerate(self.space.discrete.class_counts)
        ]

    def sample(self, X, n, rng):
        X = np.asarray(X, dtype=float)
        m = 1 if X.ndim == 1 else len(X)
        d, c = self.model.sample_prior(m * n, rng)
        if X.ndim == 1:
            return d, c
        return d.reshape(m, n, -1), c.reshape(m, n, -1)

    def marginal_probabilities(self, x_obs, rng=None):
        return [m.copy() for m in self._marginals]
