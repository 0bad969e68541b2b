import numpy as np
import pytest

from cepguide.netcore import Network, NetworkSpec, TrainConfig, init
from cepguide.prior import PriorModel, default_prior_spec, denoising_loss, train_prior
from cepguide.schedule import Schedule

SCH = Schedule()


def test_zero_network_loss_is_noise_energy():
    # eps_theta = 0 gives E||eps||^2 = d
    model = PriorModel(Network(default_prior_spec(2, hidden=(8,))), SCH)
    x0 = np.random.default_rng(0).standard_normal((20_000, 2))
    loss = denoising_loss(model, x0, np.random.default_rng(1))
    assert loss == pytest.approx(2.0, rel=0.03)


def test_loss_gradient_matches_finite_differences():
    model = PriorModel(init(NetworkSpec(2, 2, (5,), "silu", "sinusoidal", 4), 0), SCH)
    x0 = np.random.default_rng(0).standard_normal((6, 2))
    _, g = denoising_loss(model, x0, np.random.default_rng(3), return_grad=True)
    h = 1e-6
    base = model.net.params.copy()
    for i in range(0, base.size, 7):
        model.net.params[i] = base[i] + h
        up = denoising_loss(model, x0, np.random.default_rng(3))
        model.net.params[i] = base[i] - h
        down = denoising_loss(model, x0, np.random.default_rng(3))
        model.net.params[i] = base[i]
        assert g[i] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-8)


def test_eps_vjp_matches_finite_differences():
    model = PriorModel(init(NetworkSpec(2, 2, (6,), "silu", "sinusoidal", 4), 1), SCH)
    x = np.random.default_rng(0).standard_normal((3, 2))
    v = np.random.default_rng(1).standard_normal((3, 2))
    _, vjp = model.eps_vjp(x, 0.4, v)
    h = 1e-6
    for k in range(2):
        e = np.zeros_like(x)
        e[:, k] = h
        fd = np.sum(v * (model.eps(x + e, 0.4) - model.eps(x - e, 0.4)), axis=1) / (2 * h)
        np.testing.assert_allclose(vjp[:, k], fd, rtol=1e-6, atol=1e-9)


def test_spec_checks():
    with pytest.raises(ValueError):
        PriorModel(init(NetworkSpec(2, 1, (4,)), 0), SCH)
    with pytest.raises(ValueError):
        train_prior(np.zeros((0, 2)))


def test_training_reduces_loss_and_is_deterministic():
    data = np.random.default_rng(0).normal(2.0, 0.3, (2000, 2))
    cfg = TrainConfig(steps=150, batch_size=128, learning_rate=3e-3, log_every=10)
    spec = default_prior_spec(2, hidden=(32, 32))
    a = train_prior(data, spec, cfg, seed=4)
    b = train_prior(data, spec, cfg, seed=4)
    np.testing.assert_array_equal(a.net.params, b.net.params)
    assert a.loss_curve == b.loss_curve
    assert a.loss_curve[-1] < 0.7 * a.loss_curve[0]


def test_conditional_training():
    rng = np.random.default_rng(0)
    cond = rng.standard_normal((500, 3))
    data = cond[:, :2] + 0.1 * rng.standard_normal((500, 2))
    model = train_prior(data, None, TrainConfig(steps=20, batch_size=64), seed=0, cond=cond)
    assert model.cond_dim == 3 and model.data_dim == 2
    assert model.eps(data[:4], 0.5, cond[:4]).shape == (4, 2)


def test_single_point_data_concentrates():
    from cepguide.sampler import SamplerConfig, sample

    target = np.array([1.0, -0.5])
    data = np.tile(target, (512, 1))
    cfg = TrainConfig(steps=800, batch_size=256, learning_rate=3e-3, cosine_decay=True)
    model = train_prior(data, default_prior_spec(2, hidden=(64, 64)), cfg, seed=0)
    x = sample(model, None, SamplerConfig(steps=25, seed=0), n=1000, dim=2)
    assert np.linalg.norm(x.mean(axis=0) - target) < 0.1


def test_standard_normal_prior_learns_sigma_x():
    # for N(0, I) data the optimal predictor is eps = sigma_t x_t
    data = np.random.default_rng(0).standard_normal((20_000, 2))
    cfg = TrainConfig(steps=1500, batch_size=512, learning_rate=3e-3, cosine_decay=True)
    model = train_prior(data, default_prior_spec(2, hidden=(64, 64)), cfg, seed=0)
    axis = np.linspace(-2, 2, 9)
    grid = np.stack([a.ravel() for a in np.meshgrid(axis, axis)], axis=1)
    errs = []
    for t in (0.2, 0.5, 0.8):
        _, sigma = SCH.alpha_sigma(t)
        errs.append(np.mean((model.eps(grid, t) - sigma * grid) ** 2))
    assert np.sqrt(np.mean(errs)) < 0.1
