"""Schedule identities, noising, predictor gradients, and sampling."""

import numpy as np
import pytest

from sur import tensor as tz
from sur.diffusion import (
    condition_pool,
    ddpm_sample,
    forward_noise,
    load_denoiser,
    make_schedule,
    new_denoiser,
    predict_eps,
    pretrain_denoiser,
    save_denoiser,
    simple_loss,
    time_embedding,
)
from sur.errors import ConfigError, DimensionError, RangeError
from sur.tensor import Tape, Tensor, backward

from conftest import central_diff, rel_error


@pytest.fixture(scope="module")
def sched():
    return make_schedule()


@pytest.fixture(scope="module")
def den():
    return new_denoiser(0, resolution=4, d_cond=6, hidden=16)


def test_schedule_identity(sched):
    assert np.abs(sched.alpha ** 2 + sched.sigma ** 2 - 1.0).max() < 1e-12


def test_schedule_monotone_and_endpoints(sched):
    assert (np.diff(sched.sigma) > 0).all()
    assert sched.sigma[-1] >= 0.99
    assert (sched.sigma > 0).all() and (sched.sigma < 1).all()


def test_schedule_validation():
    with pytest.raises(ConfigError):
        make_schedule(steps=1)
    with pytest.raises(ConfigError):
        make_schedule(sigma_max=0.5)


def test_forward_noise_closed_form(sched):
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((4, 4))
    eps = rng.standard_normal((4, 4))
    out = forward_noise(x0, 7, eps, sched)
    assert np.array_equal(out.data, sched.alpha[7] * x0 + sched.sigma[7] * eps)


def test_forward_noise_zero_image(sched):
    eps = np.random.default_rng(1).standard_normal((4, 4))
    out = forward_noise(np.zeros((4, 4)), 3, eps, sched)
    assert np.array_equal(out.data, sched.sigma[3] * eps)


def test_forward_noise_small_sigma_limit(sched):
    x0 = np.full((4, 4), 2.0)
    eps = np.ones((4, 4))
    out = forward_noise(x0, 0, eps, sched)
    # at the smallest sigma the output deviates from x0 by at most
    # (1 - alpha_0) * |x0| + sigma_0 * |eps|
    bound = (1.0 - sched.alpha[0]) * np.abs(x0) + sched.sigma[0] * np.abs(eps)
    assert (np.abs(out.data - x0) <= bound + 1e-15).all()


def test_forward_noise_range_error(sched):
    with pytest.raises(RangeError):
        forward_noise(np.zeros((2, 2)), sched.steps, np.zeros((2, 2)), sched)


def test_forward_noise_shape_error(sched):
    with pytest.raises(DimensionError):
        forward_noise(np.zeros((2, 2)), 0, np.zeros((3, 3)), sched)


def test_forward_noise_is_affine(sched):
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((4, 4))
    eps = rng.standard_normal((4, 4))
    lhs = forward_noise(2.5 * x0, 9, 2.5 * eps, sched).data
    rhs = 2.5 * forward_noise(x0, 9, eps, sched).data
    assert np.abs(lhs - rhs).max() < 1e-12


def test_forward_noise_monte_carlo_statistics(sched):
    rng = np.random.default_rng(3)
    t = 20
    x0 = np.array([[0.7]])
    draws = np.array([forward_noise(x0, t, rng.standard_normal((1, 1)), sched).data[0, 0]
                      for _ in range(10_000)])
    n = len(draws)
    se_mean = sched.sigma[t] / np.sqrt(n)
    se_std = sched.sigma[t] / np.sqrt(2 * (n - 1))
    assert abs(draws.mean() - sched.alpha[t] * 0.7) < 4 * se_mean
    assert abs(draws.std(ddof=1) - sched.sigma[t]) < 4 * se_std


def test_condition_pool_identical_rows():
    row = np.array([1.0, -2.0, 3.0])
    out = condition_pool(Tensor(np.tile(row, (5, 1))))
    assert np.abs(out.data - row).max() < 1e-15


def test_condition_pool_matches_mean_oracle():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((6, 8))
    expected = np.zeros(8)
    for r in x:
        expected += r
    expected /= 6.0
    assert np.abs(condition_pool(Tensor(x)).data - expected).max() < 1e-12


def test_condition_pool_zero_matrix():
    assert np.array_equal(condition_pool(Tensor(np.zeros((4, 3)))).data, np.zeros(3))


def test_predict_eps_deterministic(den, sched):
    rng = np.random.default_rng(5)
    xt = rng.standard_normal((4, 4))
    cond = rng.standard_normal(6)
    a = predict_eps(den, xt, 3, Tensor(cond)).data
    b = predict_eps(den, xt.copy(), 3, Tensor(cond.copy())).data
    assert np.array_equal(a, b)


def test_predict_eps_gradient_to_cond(den, sched):
    rng = np.random.default_rng(6)
    xt = rng.standard_normal((4, 4))
    cond0 = rng.standard_normal(6)
    cond = Tensor(cond0.copy(), requires_grad=True)
    with Tape() as tape:
        loss = tz.sum_all(predict_eps(den, xt, 2, cond))
    backward(loss, tape)
    fd = central_diff(lambda arr: float(predict_eps(den, xt, 2, Tensor(arr)).data.sum()), cond0)
    assert rel_error(cond.grad, fd) < 1e-6
    # frozen weights never collect gradients
    assert all(p.grad is None for p in den.params().values())


def test_predict_eps_time_embedding_distinguishes_steps(den, sched):
    rng = np.random.default_rng(7)
    xt = rng.standard_normal((4, 4))
    cond = Tensor(rng.standard_normal(6))
    outs = [predict_eps(den, xt, t, cond).data for t in range(sched.steps)]
    for t in range(1, sched.steps):
        assert np.abs(outs[t] - outs[0]).max() > 0.0


def test_time_embedding_injective_on_steps():
    embs = [tuple(time_embedding(t)[0]) for t in range(50)]
    assert len(set(embs)) == 50


def test_predict_eps_shape_errors(den):
    with pytest.raises(DimensionError):
        predict_eps(den, np.zeros((3, 3)), 0, Tensor(np.zeros(6)))
    with pytest.raises(DimensionError):
        predict_eps(den, np.zeros((4, 4)), 0, Tensor(np.zeros(5)))


def test_simple_loss_composition(den, sched):
    rng = np.random.default_rng(8)
    x0 = rng.standard_normal((4, 4))
    eps = rng.standard_normal((4, 4))
    cond = Tensor(rng.standard_normal(6))
    t = 5
    loss = simple_loss(den, x0, t, eps, cond, sched)
    xt = sched.alpha[t] * x0 + sched.sigma[t] * eps
    eps_hat = predict_eps(den, xt, t, cond).data
    expected = float(((eps - eps_hat) ** 2).mean())
    assert abs(loss.item() - expected) < 1e-12
    assert loss.item() >= 0.0


def test_simple_loss_zero_when_predictor_exact(den, sched):
    # degenerate schedule point cannot force this, so check the definition:
    # a denoiser returning exactly eps would give zero; emulate via mse identity
    eps = np.random.default_rng(9).standard_normal((4, 4))
    assert tz.mse(Tensor(eps), Tensor(eps.copy())).item() == 0.0


def test_simple_loss_gradient_wrt_cond(den, sched):
    rng = np.random.default_rng(10)
    x0 = rng.standard_normal((4, 4))
    eps = rng.standard_normal((4, 4))
    cond0 = rng.standard_normal(6)
    cond = Tensor(cond0.copy(), requires_grad=True)
    with Tape() as tape:
        loss = simple_loss(den, x0, 4, eps, cond, sched)
    backward(loss, tape)
    fd = central_diff(
        lambda arr: simple_loss(den, x0, 4, eps, Tensor(arr), sched).item(), cond0)
    assert rel_error(cond.grad, fd) < 1e-5


def test_ddpm_sample_deterministic(den, sched):
    cond = np.random.default_rng(11).standard_normal(6)
    a = ddpm_sample(den, sched, cond, 123).data
    b = ddpm_sample(den, sched, cond, 123).data
    assert np.array_equal(a, b)


def test_ddpm_sample_seeds_differ(den, sched):
    cond = np.random.default_rng(12).standard_normal(6)
    a = ddpm_sample(den, sched, cond, 1).data
    b = ddpm_sample(den, sched, cond, 2).data
    assert np.abs(a - b).max() > 0.0


def test_ddpm_sample_zero_predictor_matches_recursion_oracle(sched):
    # with eps_hat = 0 the update is pure rescale plus noise; replay it by hand
    zero_den = new_denoiser(0, resolution=4, d_cond=6, hidden=16)
    for p in zero_den.params().values():
        p.data = np.zeros_like(p.data)
    cond = np.zeros(6)
    seed = 77
    sample = ddpm_sample(zero_den, sched, cond, seed).data

    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 4))
    abar = sched.alpha ** 2
    for t in range(sched.steps - 1, 0, -1):
        a_t = abar[t] / abar[t - 1]
        beta = 1.0 - a_t
        var = beta * (1.0 - abar[t - 1]) / (1.0 - abar[t])
        x = x / np.sqrt(a_t) + np.sqrt(var) * rng.standard_normal((4, 4))
    x = x / sched.alpha[0]
    assert np.abs(sample - x).max() < 1e-9


def test_pretrain_reduces_loss_and_freezes():
    rng = np.random.default_rng(13)
    sched = make_schedule(steps=10)
    den = new_denoiser(1, resolution=4, d_cond=3, hidden=16)
    examples = [(rng.standard_normal((4, 4)) * 0.3, rng.standard_normal(3))
                for _ in range(8)]
    history = pretrain_denoiser(den, sched, examples, steps=120, batch_size=4,
                                lr=1e-2, seed=0)
    assert np.mean(history[-20:]) < np.mean(history[:20])
    assert all(not p.requires_grad for p in den.params().values())


def test_denoiser_checkpoint_round_trip(tmp_path, den, sched):
    save_denoiser(den, sched, tmp_path / "den")
    back, back_sched = load_denoiser(tmp_path / "den")
    assert np.array_equal(back.w1.data, den.w1.data)
    assert back_sched.steps == sched.steps
    rng = np.random.default_rng(14)
    xt = rng.standard_normal((4, 4))
    cond = Tensor(rng.standard_normal(6))
    assert np.array_equal(predict_eps(back, xt, 3, cond).data,
                          predict_eps(den, xt, 3, cond).data)
