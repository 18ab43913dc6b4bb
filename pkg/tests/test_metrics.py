import numpy as np
import pytest
from scipy import stats

from mixnpe.calibration import PriorPosterior
from mixnpe.exceptions import InputError, StabilityError
from mixnpe.made import DiscreteSchema
from mixnpe.metrics import C2stConfig, c2st, c2st_mixed, encode_mixed, predictive_mse
from mixnpe.reference import ToyPosterior
from mixnpe.simulators import GaussianToy, MixedParamSpace


# -- C2ST ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def identical_score():
    rng = np.random.default_rng(0)
    return c2st(rng.standard_normal((1000, 3)), rng.standard_normal((1000, 3))).score


def test_identical_distributions_score_chance(identical_score):
    assert identical_score == pytest.approx(0.5, abs=0.05)
    assert 0.45 <= identical_score <= 0.58


def test_disjoint_supports_are_separable():
    rng = np.random.default_rng(1)
    a = 0.1 * rng.standard_normal((500, 2))
    b = 10 + 0.1 * rng.standard_normal((500, 2))
    assert c2st(a, b).score > 0.99


def test_unit_shift_matches_bayes_optimal_accuracy():
    # The best classifier thresholds at 1/2, so its accuracy is Phi(1/2).
    oracle = stats.norm.cdf(0.5)
    rng = np.random.default_rng(2)
    res = c2st(rng.standard_normal((5000, 1)), 1 + rng.standard_normal((5000, 1)))
    assert oracle == pytest.approx(0.6915, abs=1e-4)
    assert res.score == pytest.approx(oracle, abs=0.03)
    assert len(res.fold_accuracies) == 5 and res.n_a == res.n_b == 5000


def test_score_is_symmetric():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((1000, 1)), 0.7 + rng.standard_normal((1000, 1))
    assert c2st(a, b).score == pytest.approx(c2st(b, a).score, abs=0.02)


def test_score_grows_with_separation():
    rng = np.random.default_rng(4)
    base = rng.standard_normal((1000, 1))
    scores = [c2st(base, gap + rng.standard_normal((1000, 1))).score for gap in (0.0, 0.5, 1.0, 2.0)]
    assert all(later > earlier - 0.02 for earlier, later in zip(scores, scores[1:]))
    assert scores[-1] > 0.8


def test_seeded_result_is_reproducible():
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal((200, 2)), rng.standard_normal((200, 2))
    cfg = C2stConfig(seed=7)
    assert c2st(a, b, cfg).fold_accuracies == c2st(a, b, cfg).fold_accuracies


def test_c2st_input_errors():
    rng = np.random.default_rng(6)
    with pytest.raises(InputError):
        c2st(rng.standard_normal((200, 2)), rng.standard_normal((200, 3)))
    with pytest.raises(InputError):
        c2st(rng.standard_normal((99, 1)), rng.standard_normal((200, 1)))
    bad = rng.standard_normal((200, 1))
    bad[3] = np.nan
    with pytest.raises(InputError):
        c2st(bad, rng.standard_normal((200, 1)))


def test_mixed_encoding_is_one_hot_then_continuous():
    enc = encode_mixed([[1, 0], [2, 1]], [[0.5], [-1.0]], (3, 2))
    np.testing.assert_array_equal(enc, [[0, 1, 0, 1, 0, 0.5], [0, 0, 1, 0, 1, -1.0]])


def test_mixed_c2st_detects_discrete_shift():
    rng = np.random.default_rng(7)
    n = 1000
    c = rng.standard_normal((n, 1))
    same = c2st_mixed((rng.integers(0, 2, (n, 1)), c), (rng.integers(0, 2, (n, 1)), c[::-1]), (2,))
    shifted = c2st_mixed((np.zeros((n, 1), int), c), (np.ones((n, 1), int), c[::-1]), (2,))
    assert same.score < 0.58 and shifted.score > 0.99


# -- predictive MSE ------------------------------------------------------------


def test_exact_posterior_predictive_mse():
    # Given x_o, the posterior draw and x_o are a joint prior-predictive pair,
    # so E(x_o - x_post)^2 = 2 sigma^2 for the exact posterior.
    model = GaussianToy()
    res = predictive_mse(ToyPosterior(model), model, n_test=4000, rng=np.random.default_rng(0))
    assert res.mse == pytest.approx(2 * model.sigma**2, abs=0.05)
    assert res.n_resampled == 0


def test_prior_predictive_mse_is_an_upper_bound():
    model = GaussianToy()
    prior = predictive_mse(PriorPosterior(model), model, n_test=4000, rng=np.random.default_rng(1))
    # Two independent prior-predictive draws: 2 Var(x) = 2 (a^2/4 + 1 + sigma^2).
    assert prior.mse == pytest.approx(2 * (model.a**2 / 4 + 1 + model.sigma**2), rel=0.08)
    exact = predictive_mse(ToyPosterior(model), model, n_test=1000, rng=np.random.default_rng(1))
    assert exact.mse < prior.mse


class _NoiselessIdentity:
    space = MixedParamSpace(DiscreteSchema(("flag",), (2,)), ("value",))
    observation_transforms = ("identity",)

    def sample_prior(self, n, rng):
        return rng.integers(0, 2, (n, 1)), rng.standard_normal((n, 1))

    def simulate(self, theta_d, theta_c, rng):
        return np.asarray(theta_c, dtype=float).reshape(-1, 1)


class _PointPosterior:
    def sample(self, x, n, rng):
        return np.zeros((n, 1), int), np.tile(np.asarray(x, float).reshape(1, -1), (n, 1))


class _UnstableOnce(_NoiselessIdentity):
    def __init__(self):
        self.calls = 0

    def simulate(self, theta_d, theta_c, rng):
        self.calls += 1
        if self.calls % 2 == 0 and self.calls < 10:
            raise StabilityError("unstable draw")
        return super().simulate(theta_d, theta_c, rng)


def test_noiseless_identity_gives_zero_mse():
    res = predictive_mse(_PointPosterior(), _NoiselessIdentity(), n_test=50)
    assert res.mse == 0.0


def test_rejected_redraws_are_counted():
    res = predictive_mse(_PointPosterior(), _UnstableOnce(), n_test=5)
    assert res.mse == 0.0 and res.n_resampled > 0
