import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from mixnpe.exceptions import ConfigurationError, InputError
from mixnpe.flow import (
    EmbeddingNet,
    SplineCouplingFlow,
    constrain_spline_params,
    degenerate_bin_events,
    identity_spline_params,
    random_spline_params,
    rq_spline,
)


def randomize(module, seed=0, scale=0.3):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return module


def test_identity_parameters_give_identity_map():
    x = torch.linspace(-6, 6, 101, dtype=torch.float64)
    w, h, d = identity_spline_params((101,), 8)
    y, lad = rq_spline(x, w, h, d)
    torch.testing.assert_close(y, x, rtol=0, atol=1e-12)
    torch.testing.assert_close(lad, torch.zeros_like(x), rtol=0, atol=1e-12)


def test_constrained_parameters_are_valid():
    rng = np.random.default_rng(0)
    w, h, d = random_spline_params((50,), 7, rng, scale=3.0)
    assert torch.all(w >= 1e-3) and torch.all(h >= 1e-3) and torch.all(d >= 1e-3)
    torch.testing.assert_close(w.sum(-1), torch.ones(50, dtype=torch.float64))
    assert torch.all(d[:, 0] == 1) and torch.all(d[:, -1] == 1)


def test_tails_are_identity():
    rng = np.random.default_rng(1)
    x = torch.tensor([-9.0, -5.0001, 5.0001, 12.0], dtype=torch.float64)
    w, h, d = random_spline_params((4,), 6, rng)
    y, lad = rq_spline(x, w, h, d)
    assert torch.equal(y, x) and torch.all(lad == 0)


def test_spline_endpoints_fixed():
    rng = np.random.default_rng(2)
    x = torch.tensor([-5.0, 5.0], dtype=torch.float64)
    w, h, d = random_spline_params((2,), 6, rng)
    y, _ = rq_spline(x, w, h, d)
    torch.testing.assert_close(y, x, rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), bins=st.integers(1, 12), scale=st.floats(0.1, 3.0))
def test_spline_inverse_round_trip(seed, bins, scale):
    rng = np.random.default_rng(seed)
    x = torch.as_tensor(rng.uniform(-6, 6, size=200))
    w, h, d = random_spline_params((200,), bins, rng, scale)
    y, lad = rq_spline(x, w, h, d)
    x2, lad_inv = rq_spline(y, w, h, d, inverse=True)
    assert (x2 - x).abs().max() < 1e-5
    assert (lad + lad_inv).abs().max() < 1e-5


def test_spline_is_monotone():
    rng = np.random.default_rng(3)
    x = torch.linspace(-5, 5, 2001, dtype=torch.float64)
    w, h, d = random_spline_params((), 10, rng, 2.0)
    y, _ = rq_spline(x, w.expand(2001, -1), h.expand(2001, -1), d.expand(2001, -1))
    assert torch.all(torch.diff(y) > 0)


def test_spline_logdet_matches_finite_differences():
    rng = np.random.default_rng(4)
    x = torch.as_tensor(rng.uniform(-4.9, 4.9, size=300))
    w, h, d = random_spline_params((300,), 9, rng, 1.5)
    _, lad = rq_spline(x, w, h, d)
    eps = 1e-5
    up, _ = rq_spline(x + eps, w, h, d)
    down, _ = rq_spline(x - eps, w, h, d)
    numeric = torch.log((up - down) / (2 * eps))
    assert (numeric - lad).abs().max() < 1e-5


def test_spline_parameter_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    K = 5
    raw = torch.as_tensor(rng.normal(size=(6, 3 * K - 1)), dtype=torch.float64).requires_grad_(True)
    x = torch.as_tensor(rng.uniform(-4, 4, size=6))

    def loss(r):
        y, lad = rq_spline(x, *constrain_spline_params(r, K))
        return (y.pow(2) + lad).sum()

    loss(raw).backward()
    analytic = raw.grad.clone()
    numeric = torch.zeros_like(raw)
    h = 1e-6
    with torch.no_grad():
        for idx in np.ndindex(*raw.shape):
            r = raw.detach().clone()
            r[idx] += h
            up = loss(r).item()
            r[idx] -= 2 * h
            numeric[idx] = (up - loss(r).item()) / (2 * h)
    rel = (analytic - numeric).abs().max() / numeric.abs().max()
    assert rel < 1e-4


def test_degenerate_bins_are_clamped_and_counted():
    before = degenerate_bin_events["count"]
    w = torch.tensor([[0.0, 0.5, 0.5]], dtype=torch.float64)
    h = torch.tensor([[1 / 3, 1 / 3, 1 / 3]], dtype=torch.float64)
    d = torch.ones(1, 4, dtype=torch.float64)
    y, lad = rq_spline(torch.tensor([0.3], dtype=torch.float64), w, h, d)
    assert torch.isfinite(y).all() and torch.isfinite(lad).all()
    assert degenerate_bin_events["count"] == before + 1


def test_inconsistent_parameter_shapes():
    w, h, d = identity_spline_params((3,), 4)
    with pytest.raises(ConfigurationError):
        rq_spline(torch.zeros(3, dtype=torch.float64), w, h, d[..., :-1])


def test_fresh_flow_is_identity():
    flow = SplineCouplingFlow(3, 2, num_transforms=3)
    theta = torch.randn(10, 3, dtype=torch.float64)
    cond = torch.randn(10, 2, dtype=torch.float64)
    z, lad = flow.inverse(theta, cond)
    torch.testing.assert_close(z, theta, rtol=0, atol=1e-12)
    assert lad.abs().max() < 1e-12


@pytest.mark.parametrize("features,blocks", [(1, None), (2, None), (3, None), (5, 2)])
def test_flow_invertibility(features, blocks):
    # Moderate perturbations: much larger ones compose into contractions of
    # e^-100 whose inverse is ill-conditioned in any floating point.
    torch.manual_seed(features)
    flow = randomize(SplineCouplingFlow(features, 3, num_transforms=4, num_bins=6,
                                        hidden_features=16, num_blocks=blocks), seed=features, scale=0.1)
    rng = np.random.default_rng(0)
    z = torch.as_tensor(rng.normal(size=(500, features)))
    cond = torch.as_tensor(rng.normal(size=(500, 3)))
    theta, lad_f = flow(z, cond)
    z2, lad_i = flow.inverse(theta, cond)
    assert (z2 - z).abs().max() < 1e-5
    assert (lad_f + lad_i).abs().max() < 1e-5


def test_flow_coupling_split_and_order_flip():
    flow = SplineCouplingFlow(5, 1, num_transforms=2)
    assert flow.n_identity == 2 and flow.n_transformed == 3


def test_flow_density_integrates_to_one_in_1d():
    flow = randomize(SplineCouplingFlow(1, 2, num_transforms=3, num_bins=8, hidden_features=8), 9, 0.5)
    cond = torch.tensor([[0.3, -1.2]], dtype=torch.float64)

    def density(t):
        return flow.log_prob(torch.tensor([[t]], dtype=torch.float64), cond).exp().item()

    total, _ = integrate.quad(density, -12, 12, limit=400, points=[-5, 0, 5])
    assert abs(total - 1) < 1e-6


def test_flow_logdet_matches_jacobian_2d():
    flow = randomize(SplineCouplingFlow(2, 1, num_transforms=3, num_bins=5, hidden_features=8), 4)
    cond = torch.tensor([[0.7]], dtype=torch.float64)
    z = torch.tensor([[0.3, -0.8]], dtype=torch.float64)
    jac = torch.autograd.functional.jacobian(lambda v: flow(v, cond)[0], z)[0, :, 0, :]
    _, lad = flow(z, cond)
    assert abs(torch.linalg.slogdet(jac)[1].item() - lad.item()) < 1e-8


def test_flow_sampling_seeded_and_shapes():
    flow = randomize(SplineCouplingFlow(2, 3, num_transforms=2, hidden_features=8), 1)
    cond = torch.zeros(3, dtype=torch.float64)
    a = flow.sample(cond, np.random.default_rng(3), n=20)
    b = flow.sample(cond, np.random.default_rng(3), n=20)
    assert a.shape == (20, 2)
    np.testing.assert_array_equal(a, b)
    assert flow.sample(torch.zeros(4, 3, dtype=torch.float64), np.random.default_rng(0)).shape == (4, 2)


def test_flow_input_errors():
    flow = SplineCouplingFlow(2, 3)
    with pytest.raises(InputError):
        flow.log_prob(torch.zeros(4, 3, dtype=torch.float64), torch.zeros(4, 3, dtype=torch.float64))
    with pytest.raises(InputError):
        flow.log_prob(torch.zeros(4, 2, dtype=torch.float64), torch.zeros(3, 3, dtype=torch.float64))
    with pytest.raises(InputError):
        flow.log_prob(torch.full((1, 2), float("nan"), dtype=torch.float64),
                      torch.zeros(1, 3, dtype=torch.float64))
    with pytest.raises(ConfigurationError):
        SplineCouplingFlow(1, 0)
    with pytest.raises(ConfigurationError):
        SplineCouplingFlow(0, 2)


def test_flow_gradients_match_finite_differences():
    flow = randomize(SplineCouplingFlow(2, 1, num_transforms=2, num_bins=4, hidden_features=4,
                                        num_hidden_layers=1), 2)
    rng = np.random.default_rng(6)
    theta = torch.as_tensor(rng.normal(size=(5, 2)))
    cond = torch.as_tensor(rng.normal(size=(5, 1)))
    loss = lambda: -flow.log_prob(theta, cond).mean()
    flow.zero_grad()
    loss().backward()
    h = 1e-6
    for name, p in flow.named_parameters():
        analytic = p.grad.clone().view(-1)
        flat = p.data.view(-1)
        numeric = torch.zeros_like(flat)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = loss().item()
            flat[i] = old - h
            down = loss().item()
            flat[i] = old
            numeric[i] = (up - down) / (2 * h)
        scale = numeric.abs().max().item()
        if scale > 1e-8:
            assert (analytic - numeric).abs().max().item() / scale < 1e-4, name


def test_embedding_net_shape():
    net = EmbeddingNet(111, (64,), 32)
    assert net(torch.zeros(3, 111, dtype=torch.float64)).shape == (3, 32)
